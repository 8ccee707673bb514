use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rdrop_alpha: f64,
    pub focal_gamma: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub speech_emb_dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub min_lr_factor: f64,
    pub specaug_freq: usize,
    pub specaug_time: usize,
    pub snr_range: [f64; 2],
    pub whisper_unfrozen: usize,
    /// Speech blocks stay frozen through this epoch and unfreeze after it.
    pub unfreeze_at_epoch: Option<usize>,
    pub seed: u64,
    /// Noise injection and SpecAugment on training audio.
    pub augment: bool,
    /// Minimum diacritization ratio for a training sample to be kept.
    pub ratio_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::table1_primary()
    }
}

pub const PRESETS: [&str; 3] = ["table1-primary", "alt-checkpoint4", "desk-synth"];

impl TrainConfig {
    pub fn table1_primary() -> Self {
        Self {
            learning_rate: 4.1e-6,
            rdrop_alpha: 2.08,
            focal_gamma: 0.34,
            label_smoothing: 0.018,
            weight_decay: 0.098,
            speech_emb_dropout: 0.09,
            batch_size: 16,
            epochs: 40,
            warmup_epochs: 3,
            min_lr_factor: 0.002,
            specaug_freq: 10,
            specaug_time: 63,
            snr_range: [10.0, 30.0],
            whisper_unfrozen: 0,
            unfreeze_at_epoch: None,
            seed: 42,
            augment: true,
            ratio_threshold: 0.6,
        }
    }

    pub fn alt_checkpoint4() -> Self {
        Self {
            learning_rate: 4.7e-5,
            batch_size: 32,
            focal_gamma: 1.0,
            label_smoothing: 0.108,
            whisper_unfrozen: 4,
            unfreeze_at_epoch: Some(15),
            ..Self::table1_primary()
        }
    }

    /// Recipe for minutes-scale runs of the desk model on the synthetic
    /// corpus. Randomly initialized weights need a far larger step size than
    /// the fine-tuning rate of the primary recipe, and the tone audio is
    /// presented clean so the frozen encoder's features can be cached.
    pub fn desk_synth() -> Self {
        Self {
            learning_rate: 2e-3,
            weight_decay: 0.01,
            epochs: 30,
            warmup_epochs: 1,
            min_lr_factor: 0.05,
            augment: false,
            ..Self::table1_primary()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table1-primary" => Ok(Self::table1_primary()),
            "alt-checkpoint4" => Ok(Self::alt_checkpoint4()),
            "desk-synth" => Ok(Self::desk_synth()),
            _ => Err(Error::Config(format!("unknown training preset {name:?} (expected one of {})", PRESETS.join(", ")))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive"),
            (self.rdrop_alpha >= 0.0, "rdrop_alpha must be non-negative"),
            (self.focal_gamma >= 0.0, "focal_gamma must be non-negative"),
            ((0.0..1.0).contains(&self.label_smoothing), "label_smoothing must be in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            ((0.0..=1.0).contains(&self.speech_emb_dropout), "speech_emb_dropout must be in [0, 1]"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.warmup_epochs < self.epochs, "warmup_epochs must be below epochs"),
            ((0.0..=1.0).contains(&self.min_lr_factor), "min_lr_factor must be in [0, 1]"),
            (self.snr_range[0] <= self.snr_range[1], "snr_range must be ordered"),
            ((0.0..=1.0).contains(&self.ratio_threshold), "ratio_threshold must be in [0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).to_string())),
            None => Ok(()),
        }
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "learning_rate={}\nrdrop_alpha={}\nfocal_gamma={}\nlabel_smoothing={}\nweight_decay={}\n\
             speech_emb_dropout={}\nbatch_size={}\nepochs={}\nwarmup_epochs={}\nmin_lr_factor={}\n\
             specaug_freq={}\nspecaug_time={}\nsnr_range={},{}\nwhisper_unfrozen={}\nunfreeze_at_epoch={}\n\
             seed={}\naugment={}\nratio_threshold={}\n",
            self.learning_rate,
            self.rdrop_alpha,
            self.focal_gamma,
            self.label_smoothing,
            self.weight_decay,
            self.speech_emb_dropout,
            self.batch_size,
            self.epochs,
            self.warmup_epochs,
            self.min_lr_factor,
            self.specaug_freq,
            self.specaug_time,
            self.snr_range[0],
            self.snr_range[1],
            self.whisper_unfrozen,
            self.unfreeze_at_epoch.map_or("none".to_string(), |e| e.to_string()),
            self.seed,
            self.augment,
            self.ratio_threshold
        )
    }
}
