//! Speech encoder, pooled projection, prefix-addition fusion and the text
//! encoder with its per-position classification head.
//!
//! Parameters live in a flat [`ParamStore`] keyed by dotted names. A forward
//! pass binds parameters into a [`Graph`] lazily through [`Binding`], which
//! also knows how to pull the gradients back out after `backward`.

use std::collections::HashMap;
use std::sync::Arc;

use diac_tensor::{Element, Graph, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::audio::{log_mel, Waveform};
use crate::error::{Error, Result};
use crate::textproc::{encode_tokens, Vocabulary, NUM_CLASSES, PREFIX_ID};

const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;
const TEXT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub text_layers: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub speech_blocks: usize,
    pub speech_dim: usize,
    pub speech_heads: usize,
    pub speech_frames: usize,
    pub prefix_len: usize,
    pub pool_factor: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
    pub mels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            text_layers: 6,
            text_dim: 512,
            text_heads: 16,
            speech_blocks: 6,
            speech_dim: 512,
            speech_heads: 8,
            speech_frames: 1500,
            prefix_len: 150,
            pool_factor: 10,
            num_classes: NUM_CLASSES,
            dropout_p: 0.1,
            mels: 80,
            vocab_size: Vocabulary::default().len(),
            max_text_len: 512,
        }
    }

    pub fn desk() -> Self {
        Self {
            text_layers: 2,
            text_dim: 64,
            text_heads: 2,
            speech_blocks: 2,
            speech_dim: 64,
            speech_heads: 2,
            speech_frames: 100,
            prefix_len: 10,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown model preset {name:?} (expected full or desk)"))),
        }
    }

    /// Mel frames consumed per sample (the stride-2 stem halves them).
    pub fn mel_frames(&self) -> usize {
        2 * self.speech_frames
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.speech_frames != self.prefix_len * self.pool_factor {
            return fail(format!(
                "speech_frames {} != prefix_len {} x pool_factor {}",
                self.speech_frames, self.prefix_len, self.pool_factor
            ));
        }
        if self.text_heads == 0 || !self.text_dim.is_multiple_of(self.text_heads) {
            return fail(format!("text_dim {} not divisible by {} heads", self.text_dim, self.text_heads));
        }
        if self.speech_heads == 0 || !self.speech_dim.is_multiple_of(self.speech_heads) {
            return fail(format!("speech_dim {} not divisible by {} heads", self.speech_dim, self.speech_heads));
        }
        if self.num_classes != NUM_CLASSES {
            return fail(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        if self.mels == 0 || self.prefix_len == 0 || self.vocab_size <= PREFIX_ID as usize || self.max_text_len == 0 {
            return fail("mels, prefix_len, vocab_size and max_text_len must be positive".into());
        }
        Ok(())
    }

    /// Stable `key=value` rendering, used for fingerprints and checkpoint metadata.
    pub fn to_key_values(&self) -> String {
        format!(
            "text_layers={}\ntext_dim={}\ntext_heads={}\nspeech_blocks={}\nspeech_dim={}\nspeech_heads={}\n\
             speech_frames={}\nprefix_len={}\npool_factor={}\nnum_classes={}\ndropout_p={}\nmels={}\n\
             vocab_size={}\nmax_text_len={}\n",
            self.text_layers,
            self.text_dim,
            self.text_heads,
            self.speech_blocks,
            self.speech_dim,
            self.speech_heads,
            self.speech_frames,
            self.prefix_len,
            self.pool_factor,
            self.num_classes,
            self.dropout_p,
            self.mels,
            self.vocab_size,
            self.max_text_len
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub trainable: usize,
    pub speech: usize,
    pub fusion: usize,
    pub text: usize,
}

fn block_params(d: usize) -> usize {
    let attn = 4 * (d * d + d);
    let mlp = d * MLP_RATIO * d + MLP_RATIO * d + MLP_RATIO * d * d + d;
    attn + mlp + 4 * d
}

/// Analytic count; `speech_unfrozen` top speech blocks count as trainable.
pub fn count_parameters(c: &ModelConfig, speech_unfrozen: usize) -> ParameterCount {
    let (sd, td) = (c.speech_dim, c.text_dim);
    let stem = 3 * c.mels * sd + sd + 3 * sd * sd + sd;
    let speech = stem + c.speech_blocks * block_params(sd) + 2 * sd;
    let fusion = sd * td + td;
    let text = c.vocab_size * td
        + (c.prefix_len + c.max_text_len) * td
        + c.text_layers * block_params(td)
        + 2 * td
        + td * c.num_classes
        + c.num_classes;
    let unfrozen = speech_unfrozen.min(c.speech_blocks) * block_params(sd);
    ParameterCount { total: speech + fusion + text, trainable: fusion + text + unfrozen, speech, fusion, text }
}

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> usize {
        let id = self.params.len();
        assert!(self.index.insert(name.clone(), id).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value: Arc::new(value), trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    /// Mutable access to a parameter's values (copy-on-write if shared).
    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id].value)
    }

    pub fn set_trainable(&mut self, id: usize, trainable: bool) {
        self.params[id].trainable = trainable;
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: NormIds,
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
    ln2: NormIds,
    fc1: LinearIds,
    fc2: LinearIds,
}

#[derive(Clone, Debug)]
struct Layout {
    conv1: LinearIds,
    conv2: LinearIds,
    speech_blocks: Vec<BlockIds>,
    speech_ln: NormIds,
    fusion: LinearIds,
    token_embedding: usize,
    position_embedding: usize,
    text_blocks: Vec<BlockIds>,
    text_ln: NormIds,
    head: LinearIds,
}

struct Init<'a, T: Element> {
    store: ParamStore<T>,
    rng: &'a mut RngStream,
}

impl<T: Element> Init<'_, T> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64, trainable: bool) -> usize {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(std * rng.normal()));
        self.store.push(name, t, trainable)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64, trainable: bool) -> usize {
        self.store.push(name, Tensor::full(shape, T::of(v)), trainable)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64, trainable: bool) -> LinearIds {
        LinearIds {
            w: self.normal(format!("{prefix}.weight"), &[fan_in, fan_out], std, trainable),
            b: self.constant(format!("{prefix}.bias"), &[fan_out], 0.0, trainable),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize, trainable: bool) -> NormIds {
        NormIds {
            gamma: self.constant(format!("{prefix}.gamma"), &[d], 1.0, trainable),
            beta: self.constant(format!("{prefix}.beta"), &[d], 0.0, trainable),
        }
    }

    fn block(&mut self, prefix: &str, d: usize, std: f64, trainable: bool) -> BlockIds {
        let hidden = MLP_RATIO * d;
        BlockIds {
            ln1: self.norm(&format!("{prefix}.ln1"), d, trainable),
            q: self.linear(&format!("{prefix}.attn.q"), d, d, std, trainable),
            k: self.linear(&format!("{prefix}.attn.k"), d, d, std, trainable),
            v: self.linear(&format!("{prefix}.attn.v"), d, d, std, trainable),
            o: self.linear(&format!("{prefix}.attn.o"), d, d, std, trainable),
            ln2: self.norm(&format!("{prefix}.ln2"), d, trainable),
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), d, hidden, std, trainable),
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), hidden, d, std / (MLP_RATIO as f64).sqrt(), trainable),
        }
    }
}

/// Parameters bound into one graph, created on first use.
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    fn var<T: Element>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, id: usize) -> Var {
        *self.vars[id].get_or_insert_with(|| {
            let p = store.get(id);
            g.shared_leaf(Arc::clone(&p.value), p.trainable)
        })
    }

    /// Gradient per parameter id; `None` for parameters that were unused or frozen.
    pub fn gradients<T: Element>(&self, g: &mut Graph<T>) -> Vec<Option<Vec<T>>> {
        self.vars.iter().map(|v| v.and_then(|v| g.take_grad(v))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    speech_pos: Arc<Tensor<T>>,
    vocab: Arc<Vocabulary>,
}

/// Sinusoidal table `[frames, d]`: sin on the first half of the features, cos on the second.
pub fn sinusoidal_positions<T: Element>(frames: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let log_step = 10_000f64.ln() / (half.max(2) - 1) as f64;
    Tensor::from_fn(&[frames, d], |i| {
        let (t, c) = (i / d, i % d);
        let k = if c < half { c } else { c - half };
        let angle = t as f64 * (-log_step * k as f64).exp();
        T::of(if c < half { angle.sin() } else if k < half { angle.cos() } else { 0.0 })
    })
}

impl<T: Element> Model<T> {
    /// Randomly initialized model; the whole speech encoder starts frozen.
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let vocab = Arc::new(Vocabulary::default());
        if vocab.len() > config.vocab_size {
            return Err(Error::Config(format!("vocab_size {} below vocabulary size {}", config.vocab_size, vocab.len())));
        }
        let (sd, td) = (config.speech_dim, config.text_dim);
        let speech_std = 1.0 / (sd as f64).sqrt();
        let mut init = Init { store: ParamStore { params: Vec::new(), index: HashMap::new() }, rng };
        let conv1 = init.linear("speech.conv1", 3 * config.mels, sd, 1.0 / ((3 * config.mels) as f64).sqrt(), false);
        let conv2 = init.linear("speech.conv2", 3 * sd, sd, 1.0 / ((3 * sd) as f64).sqrt(), false);
        let speech_blocks =
            (0..config.speech_blocks).map(|i| init.block(&format!("speech.blocks.{i}"), sd, speech_std, false)).collect();
        let speech_ln = init.norm("speech.ln_post", sd, false);
        let fusion = init.linear("fusion.proj", sd, td, speech_std, true);
        let token_embedding = init.normal("text.token_embedding".into(), &[config.vocab_size, td], TEXT_INIT_STD, true);
        let position_embedding = init.normal(
            "text.position_embedding".into(),
            &[config.prefix_len + config.max_text_len, td],
            TEXT_INIT_STD,
            true,
        );
        let text_blocks =
            (0..config.text_layers).map(|i| init.block(&format!("text.blocks.{i}"), td, TEXT_INIT_STD, true)).collect();
        let text_ln = init.norm("text.ln_final", td, true);
        let head = init.linear("text.head", td, config.num_classes, TEXT_INIT_STD, true);
        let layout = Layout {
            conv1,
            conv2,
            speech_blocks,
            speech_ln,
            fusion,
            token_embedding,
            position_embedding,
            text_blocks,
            text_ln,
            head,
        };
        let speech_pos = Arc::new(sinusoidal_positions(config.speech_frames, sd));
        Ok(Self { config, params: init.store, layout, speech_pos, vocab })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn binding(&self) -> Binding {
        Binding { vars: vec![None; self.params.len()] }
    }

    /// Same weights in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let params = ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: Arc::new(p.value.cast()), trainable: p.trainable })
                .collect(),
            index: self.params.index.clone(),
        };
        Model {
            config: self.config.clone(),
            params,
            layout: self.layout.clone(),
            speech_pos: Arc::new(self.speech_pos.cast()),
            vocab: Arc::clone(&self.vocab),
        }
    }

    /// Prefix ids followed by one token per character of `raw`.
    pub fn encode(&self, raw: &str) -> Vec<u32> {
        encode_tokens(raw, &self.vocab, self.config.prefix_len)
    }

    /// Text-encoder dropout rate used by [`Model::text_forward`].
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout {p} not in [0, 1)")));
        }
        self.config.dropout_p = p;
        Ok(())
    }

    /// Clean log-mel input `[2·speech_frames, mels]` for a waveform.
    pub fn mel_input(&self, wave: &Waveform) -> Tensor<f32> {
        log_mel(wave, self.config.mels, self.config.mel_frames()).to_frame_major()
    }

    /// Pooled speech features for a mel input, outside any training graph.
    pub fn pooled_features(&self, mel: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut b = self.binding();
        let x = g.constant(mel.cast());
        let pooled = self.pooled_speech(&mut g, &mut b, x)?;
        Ok(g.value(pooled).cast())
    }

    /// Ids of every speech-encoder tensor (stem, blocks, final norm).
    pub fn speech_param_ids(&self) -> Vec<usize> {
        self.params.iter().enumerate().filter(|(_, p)| p.name.starts_with("speech.")).map(|(i, _)| i).collect()
    }

    /// Marks the top `n` speech blocks trainable and everything else in the
    /// speech encoder frozen.
    pub fn set_speech_unfrozen(&mut self, n: usize) -> Result<()> {
        let blocks = self.config.speech_blocks;
        if n > blocks {
            return Err(Error::Config(format!("cannot unfreeze {n} of {blocks} speech blocks")));
        }
        for id in self.speech_param_ids() {
            let name = &self.params.get(id).name;
            let trainable = name
                .strip_prefix("speech.blocks.")
                .and_then(|rest| rest.split('.').next())
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i >= blocks - n);
            self.params.set_trainable(id, trainable);
        }
        Ok(())
    }

    pub fn speech_unfrozen(&self) -> usize {
        self.layout.speech_blocks.iter().filter(|b| self.params.get(b.q.w).trainable).count()
    }

    pub fn speech_trainable(&self) -> bool {
        self.speech_unfrozen() > 0
    }

    fn linear(&self, g: &mut Graph<T>, b: &mut Binding, x: Var, ids: LinearIds) -> Result<Var> {
        let w = b.var(g, &self.params, ids.w);
        let bias = b.var(g, &self.params, ids.b);
        Ok(g.linear(x, w, bias)?)
    }

    fn norm(&self, g: &mut Graph<T>, b: &mut Binding, x: Var, ids: NormIds) -> Result<Var> {
        let gamma = b.var(g, &self.params, ids.gamma);
        let beta = b.var(g, &self.params, ids.beta);
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph<T>,
        b: &mut Binding,
        x: Var,
        ids: &BlockIds,
        heads: usize,
        p: f64,
        mut rng: Option<&mut RngStream>,
    ) -> Result<Var> {
        let h = self.norm(g, b, x, ids.ln1)?;
        let q = self.linear(g, b, h, ids.q)?;
        let k = self.linear(g, b, h, ids.k)?;
        let v = self.linear(g, b, h, ids.v)?;
        let a = g.attention(q, k, v, heads)?;
        let a = self.linear(g, b, a, ids.o)?;
        let a = g.dropout(a, p, rng.as_deref_mut())?;
        let x = g.add(x, a)?;
        let h = self.norm(g, b, x, ids.ln2)?;
        let h = self.linear(g, b, h, ids.fc1)?;
        let h = g.gelu(h)?;
        let h = self.linear(g, b, h, ids.fc2)?;
        let h = g.dropout(h, p, rng)?;
        Ok(g.add(x, h)?)
    }

    /// `[2·speech_frames, mels]` log-mel frames → `[speech_frames, speech_dim]`.
    /// The speech encoder runs without dropout.
    pub fn speech_encode(&self, g: &mut Graph<T>, b: &mut Binding, mel: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.value(mel).shape().to_vec();
        if shape != [c.mel_frames(), c.mels] {
            return Err(Error::Tensor(diac_tensor::TensorError::Shape(format!(
                "speech encoder expects [{}, {}] mel frames, got {shape:?}",
                c.mel_frames(),
                c.mels
            ))));
        }
        let x = g.im2col(mel, 3, 1, 1)?;
        let x = self.linear(g, b, x, self.layout.conv1)?;
        let x = g.gelu(x)?;
        let x = g.im2col(x, 3, 2, 1)?;
        let x = self.linear(g, b, x, self.layout.conv2)?;
        let x = g.gelu(x)?;
        let pos = g.shared_leaf(Arc::clone(&self.speech_pos), false);
        let mut x = g.add(x, pos)?;
        for ids in &self.layout.speech_blocks {
            x = self.block(g, b, x, ids, c.speech_heads, 0.0, None)?;
        }
        self.norm(g, b, x, self.layout.speech_ln)
    }

    /// Mean-pooled encoder frames, `[prefix_len, speech_dim]`. With a frozen
    /// encoder this is a pure function of the mel input and may be cached.
    pub fn pooled_speech(&self, g: &mut Graph<T>, b: &mut Binding, mel: Var) -> Result<Var> {
        let frames = self.speech_encode(g, b, mel)?;
        Ok(g.mean_pool_time(frames, self.config.pool_factor)?)
    }

    /// Projects pooled frames into the text width: `[prefix_len, text_dim]`.
    pub fn project(&self, g: &mut Graph<T>, b: &mut Binding, pooled: Var) -> Result<Var> {
        self.linear(g, b, pooled, self.layout.fusion)
    }

    /// `frames → mean_pool_time → affine projection`.
    pub fn pool_project(&self, g: &mut Graph<T>, b: &mut Binding, frames: Var) -> Result<Var> {
        let pooled = g.mean_pool_time(frames, self.config.pool_factor)?;
        self.project(g, b, pooled)
    }

    /// Per-position logits `[tokens, 15]`. `prefix` (shape `[prefix_len,
    /// text_dim]`) is added to the embeddings of the prefix positions;
    /// `None` is the text-only model. Dropout is active iff `rng` is given.
    pub fn text_forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binding,
        tokens: &[u32],
        prefix: Option<Var>,
        mut rng: Option<&mut RngStream>,
    ) -> Result<Var> {
        let c = &self.config;
        if tokens.len() < c.prefix_len || tokens[..c.prefix_len].iter().any(|&t| t != PREFIX_ID) {
            return Err(Error::Config(format!("token sequence must start with {} prefix ids", c.prefix_len)));
        }
        let text_len = tokens.len() - c.prefix_len;
        if text_len > c.max_text_len {
            return Err(Error::Config(format!("text of {text_len} characters exceeds {}", c.max_text_len)));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = b.var(g, &self.params, self.layout.token_embedding);
        let emb = g.embedding(table, &ids)?;
        let pos_table = b.var(g, &self.params, self.layout.position_embedding);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(emb, pos)?;
        if let Some(prefix) = prefix {
            let shape = g.value(prefix).shape();
            if shape != [c.prefix_len, c.text_dim] {
                return Err(Error::Tensor(diac_tensor::TensorError::Shape(format!(
                    "prefix {shape:?}, expected [{}, {}]",
                    c.prefix_len, c.text_dim
                ))));
            }
            let padded = if text_len > 0 {
                let zeros = g.constant(Tensor::zeros(&[text_len, c.text_dim]));
                g.concat_rows(prefix, zeros)?
            } else {
                prefix
            };
            x = g.add(x, padded)?;
        }
        x = g.dropout(x, c.dropout_p, rng.as_deref_mut())?;
        for ids in &self.layout.text_blocks {
            x = self.block(g, b, x, ids, c.text_heads, c.dropout_p, rng.as_deref_mut())?;
        }
        let x = self.norm(g, b, x, self.layout.text_ln)?;
        self.linear(g, b, x, self.layout.head)
    }
}

/// One draw per sample: `true` means the whole speech prefix is zeroed.
pub fn speech_dropped(p: f64, training: bool, rng: &mut RngStream) -> bool {
    training && p > 0.0 && (p >= 1.0 || rng.bernoulli(p))
}

/// Replaces the entire prefix by zeros with probability `p` (no rescaling).
pub fn speech_embedding_dropout<T: Element>(prefix: &Tensor<T>, p: f64, training: bool, rng: &mut RngStream) -> Tensor<T> {
    if speech_dropped(p, training, rng) {
        Tensor::zeros(prefix.shape())
    } else {
        prefix.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_model(seed: u64) -> Model<f32> {
        Model::new(ModelConfig::desk(), &mut RngStream::new(seed)).unwrap()
    }

    fn tokens(cfg: &ModelConfig, n: usize) -> Vec<u32> {
        let mut t = vec![PREFIX_ID; cfg.prefix_len];
        t.extend((0..n).map(|i| 3 + (i as u32 * 7) % 30));
        t
    }

    fn mel(cfg: &ModelConfig, seed: u64) -> Tensor<f32> {
        let mut rng = RngStream::new(seed);
        Tensor::from_fn(&[cfg.mel_frames(), cfg.mels], |_| rng.normal() as f32)
    }

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert!(ModelConfig { prefix_len: 11, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { text_heads: 3, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { num_classes: 14, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig::preset("huge").is_err());
    }

    /// Hand formula: each block has 4 attention projections, a 4x MLP and two norms.
    #[test]
    fn desk_count_matches_instantiated_model() {
        let cfg = ModelConfig::desk();
        let m = desk_model(0);
        let d = 64usize;
        let block = 4 * (d * d + d) + (d * 256 + 256) + (256 * d + d) + 4 * d;
        let speech = (240 * d + d) + (3 * d * d + d) + 2 * block + 2 * d;
        let fusion = d * d + d;
        let text = cfg.vocab_size * d + (10 + 512) * d + 2 * block + 2 * d + d * 15 + 15;
        let counted = count_parameters(&cfg, 0);
        assert_eq!(counted.total, speech + fusion + text);
        assert_eq!(counted.trainable, fusion + text);
        assert_eq!(m.params().element_count(), counted.total);
        assert_eq!(m.params().trainable_count(), counted.trainable);
    }

    #[test]
    fn frozen_speech_leaves_fusion_and_text_trainable() {
        let c = count_parameters(&ModelConfig::desk(), 0);
        assert_eq!(c.trainable - c.text, c.fusion);
        let all = count_parameters(&ModelConfig::desk(), 2);
        assert_eq!(all.trainable - c.trainable, 2 * block_params(64));
    }

    #[test]
    fn unfreeze_top_blocks() {
        let mut m = desk_model(0);
        assert_eq!(m.speech_unfrozen(), 0);
        m.set_speech_unfrozen(1).unwrap();
        assert!(m.params().by_name("speech.blocks.1.attn.q.weight").unwrap().trainable);
        assert!(!m.params().by_name("speech.blocks.0.attn.q.weight").unwrap().trainable);
        assert!(!m.params().by_name("speech.conv1.weight").unwrap().trainable);
        assert_eq!(m.params().trainable_count(), count_parameters(m.config(), 1).trainable);
        assert!(matches!(m.set_speech_unfrozen(3), Err(Error::Config(_))));
    }

    #[test]
    fn speech_shapes() {
        let m = desk_model(1);
        let cfg = m.config().clone();
        let mut g = Graph::new();
        let mut b = m.binding();
        let x = g.constant(mel(&cfg, 2));
        let frames = m.speech_encode(&mut g, &mut b, x).unwrap();
        assert_eq!(g.value(frames).shape(), &[100, 64]);
        let prefix = m.pool_project(&mut g, &mut b, frames).unwrap();
        assert_eq!(g.value(prefix).shape(), &[10, 64]);
        let bad = g.constant(Tensor::zeros(&[198, 80]));
        assert!(m.speech_encode(&mut g, &mut b, bad).is_err());
    }

    #[test]
    fn zero_projection_yields_bias() {
        let mut m = desk_model(1);
        let w = m.params().id("fusion.proj.weight").unwrap();
        let bias = m.params().id("fusion.proj.bias").unwrap();
        m.params_mut().value_mut(w).data_mut().fill(0.0);
        m.params_mut().value_mut(bias).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        let mut g = Graph::new();
        let mut b = m.binding();
        let frames = g.constant(Tensor::full(&[100, 64], 3.0f32));
        let out = m.pool_project(&mut g, &mut b, frames).unwrap();
        for r in 0..10 {
            assert_eq!(g.value(out).row(r), m.params().get(bias).value.data());
        }
    }

    #[test]
    fn zero_prefix_equals_text_only() {
        let m = desk_model(3);
        let toks = tokens(m.config(), 7);
        let run = |prefix: bool| {
            let mut g = Graph::new();
            let mut b = m.binding();
            let p = prefix.then(|| g.constant(Tensor::zeros(&[10, 64])));
            let out = m.text_forward(&mut g, &mut b, &toks, p, None).unwrap();
            g.value(out).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn eval_is_deterministic_and_train_is_stochastic() {
        let m = desk_model(4);
        let toks = tokens(m.config(), 5);
        let run = |rng: Option<&mut RngStream>| {
            let mut g = Graph::new();
            let mut b = m.binding();
            let out = m.text_forward(&mut g, &mut b, &toks, None, rng).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(None), run(None));
        let a = run(Some(&mut RngStream::new(1)));
        let c = run(Some(&mut RngStream::new(2)));
        assert_eq!(a.shape(), &[15, 15]);
        assert_ne!(a, c);
        let probs = diac_tensor::softmax(&a, 1).unwrap();
        for r in 0..15 {
            let s: f64 = probs.row(r).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn token_validation() {
        let m = desk_model(0);
        let mut g = Graph::new();
        let mut b = m.binding();
        assert!(m.text_forward(&mut g, &mut b, &[3, 4, 5], None, None).is_err());
        let long = tokens(m.config(), 513);
        assert!(m.text_forward(&mut g, &mut b, &long, None, None).is_err());
        let p = g.constant(Tensor::zeros(&[9, 64]));
        assert!(m.text_forward(&mut g, &mut b, &tokens(m.config(), 3), Some(p), None).is_err());
    }

    #[test]
    fn projection_receives_gradient_with_frozen_speech() {
        let m = desk_model(5);
        let cfg = m.config().clone();
        let mut g = Graph::new();
        let mut b = m.binding();
        let x = g.constant(mel(&cfg, 6));
        let pooled = m.pooled_speech(&mut g, &mut b, x).unwrap();
        let prefix = m.project(&mut g, &mut b, pooled).unwrap();
        let logits = m.text_forward(&mut g, &mut b, &tokens(&cfg, 4), Some(prefix), None).unwrap();
        let sm = g.softmax(logits).unwrap();
        let w = g.constant(Tensor::from_fn(&[14, 15], |i| ((i * 37) % 11) as f32));
        let loss = g.add(sm, w).unwrap();
        let loss = g.gelu(loss).unwrap();
        let loss = g.sum(loss).unwrap();
        g.backward(loss).unwrap();
        let grads = b.gradients(&mut g);
        let proj = grads[m.params().id("fusion.proj.weight").unwrap()].as_ref().unwrap();
        assert!(proj.iter().any(|&v| v != 0.0));
        for id in m.speech_param_ids() {
            assert!(grads[id].is_none(), "{}", m.params().get(id).name);
        }
    }

    #[test]
    fn speech_drop_frequency() {
        let mut rng = RngStream::new(9);
        let drops = (0..10_000).filter(|_| speech_dropped(0.09, true, &mut rng)).count();
        assert!((drops as f64 / 1e4 - 0.09).abs() < 0.01, "{drops}");
        let t = Tensor::full(&[2, 3], 1.5f32);
        assert_eq!(speech_embedding_dropout(&t, 0.0, true, &mut rng), t);
        assert_eq!(speech_embedding_dropout(&t, 1.0, true, &mut rng), Tensor::zeros(&[2, 3]));
        assert_eq!(speech_embedding_dropout(&t, 1.0, false, &mut rng), t);
    }

    #[test]
    fn full_scale_count() {
        let c = count_parameters(&ModelConfig::full(), 0);
        assert!((c.total as f64 - 39e6).abs() <= 0.25 * 39e6, "{}", c.total);
        assert!((c.trainable as f64 - 19e6).abs() <= 0.25 * 19e6, "{}", c.trainable);
    }
}
