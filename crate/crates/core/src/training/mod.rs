//! Training recipe: focal loss with label smoothing inside an R-Drop
//! objective, AdamW on a warmup + cosine schedule, and the speech freeze policy.
//!
//! Each sample gets its own autodiff graph; losses are normalized by the
//! number of labeled letters in the whole batch, so summing per-sample
//! gradients in batch order yields the batch-mean gradient deterministically.

mod checkpoint;
mod config;
mod loss;
mod optim;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use diac_tensor::{Element, Graph, RngStream, Tensor};
use rayon::prelude::*;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, fnv1a64, load_checkpoint, model_fingerprint, run_fingerprint, save_checkpoint,
    Checkpoint, CheckpointMeta,
};
pub use config::{TrainConfig, PRESETS};
pub use loss::{focal_loss_ls, sym_kl, PROB_FLOOR};
pub use optim::{adamw_step, apply_freeze_policy, lr_at, unfrozen_blocks, warmup_steps, OptimizerState};

use crate::audio::{inject_noise, log_mel, spec_augment};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::inference::evaluate;
use crate::metrics::{MetricFlags, ScoreReport};
use crate::model::{speech_dropped, Model};

/// Speech input of one training sample.
#[derive(Clone, Debug)]
pub enum SpeechFeatures {
    Absent,
    /// Log-mel frames, run through the encoder inside the training graph.
    Mel(Tensor<f32>),
    /// Pooled output of a frozen encoder.
    Pooled(Arc<Tensor<f32>>),
}

#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub example: &'a Example,
    pub speech: &'a SpeechFeatures,
}

/// Batch objective and its parts, each normalized by the batch letter count.
#[derive(Clone, Debug)]
pub struct Objective<T: Element> {
    pub value: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub kl: f64,
    /// Summed gradient per parameter id (`None` for frozen or unused tensors).
    pub grads: Vec<Option<Vec<T>>>,
}

fn to_elems<T: Element>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::of).collect()
}

fn sample_objective<T: Element>(
    model: &Model<T>,
    item: TrainItem<'_>,
    cfg: &TrainConfig,
    norm: f64,
    rng: &RngStream,
) -> Result<([f64; 4], Vec<Option<Vec<T>>>)> {
    let prefix_len = model.config().prefix_len;
    let tokens = model.encode(item.example.text.raw());
    let rows = item.example.letter_rows(prefix_len);
    let targets = item.example.targets();
    let mut g = Graph::new();
    let mut b = model.binding();

    let prefix = if speech_dropped(cfg.speech_emb_dropout, true, &mut rng.derive(0)) {
        None
    } else {
        match item.speech {
            SpeechFeatures::Absent => None,
            SpeechFeatures::Mel(mel) => {
                let x = g.constant(mel.cast());
                let pooled = model.pooled_speech(&mut g, &mut b, x)?;
                Some(model.project(&mut g, &mut b, pooled)?)
            }
            SpeechFeatures::Pooled(p) => {
                let x = g.constant(p.cast());
                Some(model.project(&mut g, &mut b, x)?)
            }
        }
    };
    // Both passes share the speech prefix and differ only in dropout masks.
    let z1 = model.text_forward(&mut g, &mut b, &tokens, prefix, Some(&mut rng.derive(1)))?;
    let z2 = model.text_forward(&mut g, &mut b, &tokens, prefix, Some(&mut rng.derive(2)))?;
    let (gamma, eps) = (cfg.focal_gamma, cfg.label_smoothing);
    let (l1, d1) = loss::focal_rows(g.value(z1), &rows, &targets, gamma, eps, norm)?;
    let (l2, d2) = loss::focal_rows(g.value(z2), &rows, &targets, gamma, eps, norm)?;
    let (kl, k1, k2) = loss::sym_kl_rows(g.value(z1), g.value(z2), &rows, norm)?;
    let alpha = cfg.rdrop_alpha;
    let value = 0.5 * (l1 + l2) + alpha * kl;
    let p1 = d1.iter().zip(&k1).map(|(d, k)| 0.5 * d + alpha * k).collect();
    let p2 = d2.iter().zip(&k2).map(|(d, k)| 0.5 * d + alpha * k).collect();
    let out = g.custom_scalar(&[z1, z2], value, vec![to_elems(p1), to_elems(p2)])?;
    g.backward(out)?;
    Ok(([value, l1, l2, kl], b.gradients(&mut g)))
}

/// `½(L1 + L2) + α·symKL(P1, P2)` over a batch. Sample `i` draws its
/// speech-drop decision and its two dropout masks from sub-streams of
/// `rng.derive(i)`.
pub fn rdrop_objective<T: Element>(
    model: &Model<T>,
    batch: &[TrainItem<'_>],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<Objective<T>> {
    let letters: usize = batch.iter().map(|it| it.example.text.num_letters()).sum();
    let norm = letters.max(1) as f64;
    let results: Vec<_> = batch
        .par_iter()
        .enumerate()
        .map(|(i, item)| sample_objective(model, *item, cfg, norm, &rng.derive(i as u64)))
        .collect::<Result<_>>()?;
    let mut total = Objective { value: 0.0, loss1: 0.0, loss2: 0.0, kl: 0.0, grads: vec![None; model.params().len()] };
    for ([value, l1, l2, kl], grads) in results {
        total.value += value;
        total.loss1 += l1;
        total.loss2 += l2;
        total.kl += kl;
        for (acc, g) in total.grads.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(a, g)| *a = *a + *g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    Ok(total)
}

/// Noise at a random SNR, log-mel, then SpecAugment.
pub fn augmented_mel(model: &Model<f32>, ex: &Example, cfg: &TrainConfig, rng: &mut RngStream) -> Option<Tensor<f32>> {
    let wave = ex.wave.as_ref()?;
    let noisy = inject_noise(wave, (cfg.snr_range[0], cfg.snr_range[1]), rng);
    let c = model.config();
    let mel = log_mel(&noisy, c.mels, c.mel_frames());
    Some(spec_augment(&mel, cfg.specaug_freq, cfg.specaug_time, rng).to_frame_major())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_objective: f64,
    pub lr: f64,
    pub unfrozen_blocks: usize,
    pub dev: Option<ScoreReport>,
    pub seconds: f64,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub dev: Option<&'a [Example]>,
    /// Directory for per-epoch checkpoints `epoch-NNN.ckpt`.
    pub out_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochStats)>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Best dev WER epoch when a dev set is given, else the final epoch.
    pub selected: Checkpoint,
    pub history: Vec<EpochStats>,
}

const SHUFFLE_TAG: u64 = 1;
const AUGMENT_TAG: u64 = 2;
const STEP_TAG: u64 = 3;

/// Speech input for every example: clean frames are pooled once while the
/// encoder is frozen, augmented frames are redrawn every epoch.
fn epoch_features(
    model: &Model<f32>,
    corpus: &[Example],
    cfg: &TrainConfig,
    epoch: usize,
    clean: &mut Option<Vec<SpeechFeatures>>,
) -> Result<Vec<SpeechFeatures>> {
    let frozen = !model.speech_trainable();
    if !cfg.augment {
        if let (true, Some(cached)) = (frozen, clean.as_ref()) {
            return Ok(cached.clone());
        }
    }
    let run = RngStream::new(cfg.seed).derive(AUGMENT_TAG).derive(epoch as u64);
    let features: Vec<SpeechFeatures> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mel = if cfg.augment {
                augmented_mel(model, ex, cfg, &mut run.derive(i as u64))
            } else {
                ex.wave.as_ref().map(|w| model.mel_input(w))
            };
            Ok(match mel {
                None => SpeechFeatures::Absent,
                Some(mel) if frozen => SpeechFeatures::Pooled(Arc::new(model.pooled_features(&mel)?)),
                Some(mel) => SpeechFeatures::Mel(mel),
            })
        })
        .collect::<Result<_>>()?;
    if !cfg.augment && frozen {
        *clean = Some(features.clone());
    }
    Ok(features)
}

/// Trains `model` in place; reproducible from `(cfg.seed, corpus order)`.
pub fn fit(corpus: &[Example], model: &mut Model<f32>, cfg: &TrainConfig, mut opts: FitOptions<'_>) -> Result<FitOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let run = RngStream::new(cfg.seed);
    let mut state = OptimizerState::new();
    let mut clean = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        apply_freeze_policy(model, epoch, cfg)?;
        let features = epoch_features(model, corpus, cfg, epoch, &mut clean)?;
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        run.derive(SHUFFLE_TAG).derive(epoch as u64).shuffle(&mut order);
        let mut objective_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<TrainItem> =
                chunk.iter().map(|&i| TrainItem { example: &corpus[i], speech: &features[i] }).collect();
            let obj = rdrop_objective(model, &batch, cfg, &run.derive(STEP_TAG).derive(step as u64))?;
            lr = lr_at(step, total_steps, cfg);
            adamw_step(model.params_mut(), &obj.grads, &mut state, lr, cfg.weight_decay)?;
            objective_sum += obj.value;
        }
        let dev = opts.dev.map(|d| evaluate(model, d, MetricFlags::PRIMARY)).transpose()?;
        let stats = EpochStats {
            epoch,
            mean_objective: objective_sum / steps_per_epoch as f64,
            lr,
            unfrozen_blocks: model.speech_unfrozen(),
            dev,
            seconds: started.elapsed().as_secs_f64(),
        };
        let meta = CheckpointMeta::new(model.config(), cfg, epoch);
        if let Some(dir) = opts.out_dir {
            save_checkpoint(&dir.join(format!("epoch-{epoch:03}.ckpt")), model, &meta)?;
        }
        let score = dev.map_or(0.0, |d| d.wer);
        if opts.dev.is_none() || best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, Checkpoint { model: model.clone(), meta }));
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&stats);
        }
        history.push(stats);
    }
    let (_, selected) = best.expect("at least one epoch");
    Ok(FitOutcome { selected, history })
}
