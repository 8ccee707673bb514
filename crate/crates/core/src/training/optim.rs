//! AdamW, the warmup + cosine learning-rate schedule and the speech freeze policy.

use std::f64::consts::PI;

use diac_tensor::Element;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moments per parameter id (allocated on first update).
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T: Element = f32> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new() -> Self {
        Self { step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn moments(&self, id: usize) -> Option<(&[T], &[T])> {
        let m = self.m.get(id).filter(|m| !m.is_empty())?;
        Some((m, &self.v[id]))
    }
}

/// One AdamW update of every trainable parameter. A missing gradient counts
/// as zero; frozen parameters are not touched. Any non-finite gradient
/// aborts the step before anything is modified.
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (id, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if params.get(id).trainable && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(params.get(id).name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (c1, c2) = (1.0 - BETA1.powf(t), 1.0 - BETA2.powf(t));
    state.m.resize_with(params.len(), Vec::new);
    state.v.resize_with(params.len(), Vec::new);
    for id in 0..params.len() {
        if !params.get(id).trainable {
            continue;
        }
        let n = params.get(id).value.len();
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        if m.is_empty() {
            *m = vec![T::zero(); n];
            *v = vec![T::zero(); n];
        }
        let g = grads.get(id).and_then(|g| g.as_deref());
        let theta = params.value_mut(id).data_mut();
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i].as_f64());
            let mi = BETA1 * m[i].as_f64() + (1.0 - BETA1) * gi;
            let vi = BETA2 * v[i].as_f64() + (1.0 - BETA2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let x = theta[i].as_f64();
            let update = (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            theta[i] = T::of(x - lr * update - lr * weight_decay * x);
        }
    }
    Ok(())
}

/// Warmup length in optimizer steps: the warmup share of the run.
pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    ((total_steps * cfg.warmup_epochs) as f64 / cfg.epochs as f64).round() as usize
}

/// Learning rate for optimizer step `step` (0-based position in the schedule,
/// the first update uses step 1).
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let lr = cfg.learning_rate;
    let lr_min = cfg.min_lr_factor * lr;
    let warmup = warmup_steps(total_steps, cfg);
    if step < warmup {
        return lr * (step as f64 / warmup as f64);
    }
    if step == warmup {
        return lr;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    lr_min + (lr - lr_min) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Number of top speech blocks trainable during `epoch` (1-based).
pub fn unfrozen_blocks(epoch: usize, cfg: &TrainConfig) -> usize {
    match cfg.unfreeze_at_epoch {
        Some(after) if epoch <= after => 0,
        _ => cfg.whisper_unfrozen,
    }
}

pub fn apply_freeze_policy<T: Element>(model: &mut Model<T>, epoch: usize, cfg: &TrainConfig) -> Result<()> {
    if epoch == 0 {
        return Err(Error::Config("epochs are numbered from 1".into()));
    }
    model.set_speech_unfrozen(unfrozen_blocks(epoch, cfg))
}
