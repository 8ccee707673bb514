//! MC-dropout ensembles and end-to-end diacritization.
//!
//! Every checkpoint runs `passes` forwards with text-encoder dropout active
//! (speech drop and augmentation off). Softmax rows over the letter positions
//! are averaged in fixed (model, pass) order, then argmaxed with ties going to
//! the lowest class id.

use diac_tensor::{kernels::log_softmax_row, Graph, RngStream, Tensor, TensorError};
use rayon::prelude::*;

use crate::data::{Example, ManifestRecord};
use crate::error::{Error, Result};
use crate::metrics::{score_labels, MetricFlags, ScoreReport, Tallies};
use crate::model::Model;
use crate::textproc::{insert_diacritics, DiacriticClass, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub passes_per_model: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { passes_per_model: 50, dropout_p: 0.1, seed: 42 }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes_per_model == 0 {
            return Err(Error::Config("passes per model must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("inference dropout {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn total_passes(&self, models: usize) -> usize {
        models * self.passes_per_model
    }
}

/// Pooled speech features of an example under `model` (`None` without audio).
pub fn speech_features(model: &Model<f32>, ex: &Example) -> Result<Option<Tensor<f32>>> {
    ex.wave.as_ref().map(|w| model.pooled_features(&model.mel_input(w))).transpose()
}

fn letter_softmax(logits: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[rows.len(), NUM_CLASSES]);
    for (i, &r) in rows.iter().enumerate() {
        let logp = log_softmax_row(logits.row(r));
        for (o, l) in out.data_mut()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].iter_mut().zip(logp) {
            *o = l.exp() as f32;
        }
    }
    out
}

fn forward(model: &Model<f32>, ex: &Example, pooled: Option<&Tensor<f32>>, rng: Option<&mut RngStream>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let mut b = model.binding();
    let prefix = match pooled {
        Some(p) => {
            let x = g.constant(p.clone());
            Some(model.project(&mut g, &mut b, x)?)
        }
        None => None,
    };
    let tokens = model.encode(ex.text.raw());
    let logits = model.text_forward(&mut g, &mut b, &tokens, prefix, rng)?;
    Ok(letter_softmax(g.value(logits), &ex.letter_rows(model.config().prefix_len)))
}

/// Softmax over the letter positions, `[letters, 15]`, for each of `passes`
/// stochastic forwards at text dropout `p`. Pass `k` uses `rng.derive(k)`.
pub fn mc_forward(
    model: &Model<f32>,
    ex: &Example,
    pooled: Option<&Tensor<f32>>,
    passes: usize,
    p: f64,
    rng: &RngStream,
) -> Result<Vec<Tensor<f32>>> {
    let mut m = model.clone();
    m.set_dropout(p)?;
    (0..passes).map(|k| forward(&m, ex, pooled, Some(&mut rng.derive(k as u64)))).collect()
}

/// Deterministic eval-mode argmax of a single model.
pub fn predict_eval(model: &Model<f32>, ex: &Example, pooled: Option<&Tensor<f32>>) -> Result<Vec<DiacriticClass>> {
    Ok(argmax_rows(&forward(model, ex, pooled, None)?))
}

fn argmax_rows(dist: &Tensor<f32>) -> Vec<DiacriticClass> {
    (0..dist.shape()[0])
        .map(|r| {
            let row = dist.row(r);
            // first maximum wins, so ties go to the lowest id
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            DiacriticClass::new(best).expect("15 columns")
        })
        .collect()
}

/// Mean of all pass distributions (f64 accumulation in the given order) and
/// its per-row argmax.
pub fn ensemble_average(dists: &[Tensor<f32>]) -> Result<(Tensor<f32>, Vec<DiacriticClass>)> {
    let first = dists.first().ok_or_else(|| Error::Config("ensemble of zero passes".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 2 || shape[1] != NUM_CLASSES {
        return Err(TensorError::Shape(format!("pass distribution of shape {shape:?}")).into());
    }
    let mut acc = vec![0.0f64; first.len()];
    for d in dists {
        if d.shape() != shape.as_slice() {
            return Err(TensorError::Shape(format!("pass shapes differ: {:?} vs {shape:?}", d.shape())).into());
        }
        acc.iter_mut().zip(d.data()).for_each(|(a, &v)| *a += v as f64);
    }
    let n = dists.len() as f64;
    let mean = Tensor::from_fn(&shape, |i| (acc[i] / n) as f32);
    let classes = argmax_rows(&mean);
    Ok((mean, classes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub text: String,
    /// Mean probability of the chosen class, per letter.
    pub confidence: Vec<f32>,
    /// Stochastic forwards averaged into this prediction.
    pub passes: usize,
}

impl Prediction {
    pub fn to_record(&self, audio: &str) -> ManifestRecord {
        ManifestRecord {
            id: self.id.clone(),
            audio: audio.to_string(),
            text: self.text.clone(),
            confidence: Some(self.confidence.clone()),
        }
    }
}

/// Ensemble prediction for the `index`-th sample of a run. Pass `k` of
/// model `m` draws from `seed → m → index → k`.
pub fn diacritize(models: &[Model<f32>], ex: &Example, cfg: &EnsembleConfig, index: usize) -> Result<Prediction> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let mut dists = Vec::with_capacity(cfg.total_passes(models.len()));
    for (m, model) in models.iter().enumerate() {
        let pooled = speech_features(model, ex)?;
        let rng = root.derive(m as u64).derive(index as u64);
        dists.extend(mc_forward(model, ex, pooled.as_ref(), cfg.passes_per_model, cfg.dropout_p, &rng)?);
    }
    let (mean, classes) = if ex.text.num_letters() == 0 {
        (Tensor::zeros(&[0, NUM_CLASSES]), Vec::new())
    } else {
        ensemble_average(&dists)?
    };
    let text = insert_diacritics(ex.text.raw(), &classes)?;
    let confidence = classes.iter().enumerate().map(|(r, c)| mean.row(r)[c.id()]).collect();
    Ok(Prediction { id: ex.id.clone(), text, confidence, passes: dists.len() })
}

#[derive(Clone, Debug)]
pub struct EnsembleRun {
    pub predictions: Vec<Prediction>,
    /// Forward passes behind each prediction (models × passes per model).
    pub total_passes: usize,
}

/// Diacritizes every example; samples run in parallel, results keep input order.
pub fn run_ensemble(models: &[Model<f32>], examples: &[Example], cfg: &EnsembleConfig) -> Result<EnsembleRun> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::Config("no checkpoints given".into()));
    }
    let predictions: Vec<Prediction> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            diacritize(models, ex, cfg, i).map_err(|e| match e {
                Error::Invariant { invariant, detail } => {
                    Error::Invariant { invariant, detail: format!("sample {}: {detail}", ex.id) }
                }
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let total_passes = predictions.first().map_or(cfg.total_passes(models.len()), |p| p.passes);
    Ok(EnsembleRun { predictions, total_passes })
}

/// Eval-mode scores of one model on gold examples.
pub fn evaluate(model: &Model<f32>, examples: &[Example], flags: MetricFlags) -> Result<ScoreReport> {
    let tallies = examples
        .par_iter()
        .map(|ex| {
            let pooled = speech_features(model, ex)?;
            Ok(score_labels(&ex.text, &predict_eval(model, ex, pooled.as_ref())?, flags))
        })
        .collect::<Result<Vec<Tallies>>>()?;
    Ok(ScoreReport::from_tallies(tallies.into_iter().fold(Tallies::default(), |a, b| a + b), flags))
}

/// Like [`evaluate`], but with the speech prefix left out (text-only forward).
pub fn evaluate_text_only(model: &Model<f32>, examples: &[Example], flags: MetricFlags) -> Result<ScoreReport> {
    let tallies = examples
        .iter()
        .map(|ex| Ok(score_labels(&ex.text, &predict_eval(model, ex, None)?, flags)))
        .collect::<Result<Vec<Tallies>>>()?;
    Ok(ScoreReport::from_tallies(tallies.into_iter().fold(Tallies::default(), |a, b| a + b), flags))
}
