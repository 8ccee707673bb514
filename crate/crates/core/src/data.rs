//! Manifests, the training-ratio filter, and the synthetic tone corpus.
//!
//! The synthetic corpus stands in for real speech: every character of a
//! sample gets one fixed-length audio segment, a pure tone whose frequency
//! encodes the letter's diacritic class (silence for spaces). Text alone
//! carries no information about the labels, so only a model that reads the
//! audio can beat the class prior.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use diac_tensor::RngStream;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::audio::{load_wav, write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::textproc::{
    diacritization_ratio, insert_diacritics, label_from_diacritized, normalize, strip_diacritics, DiacriticClass,
    LabeledText, NUM_CLASSES,
};

/// One manifest line: `{"id": …, "audio": …, "text": …}` plus an optional
/// per-letter confidence on prediction manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub audio: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Vec<f32>>,
}

impl ManifestRecord {
    /// Audio path resolved against the manifest's directory.
    pub fn audio_path(&self, manifest_dir: &Path) -> PathBuf {
        manifest_dir.join(&self.audio)
    }
}

/// Parses a line-delimited JSON manifest; text is NFC-normalized. Audio
/// paths are resolved against the manifest's directory and must exist; an
/// empty audio field means the sample has no audio.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let mut rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(parse_err(format!("duplicate id {:?}", rec.id)));
        }
        if !rec.audio.is_empty() && !rec.audio_path(dir).is_file() {
            return Err(parse_err(format!("audio file {:?} not found", rec.audio)));
        }
        rec.text = normalize(&rec.text);
        records.push(rec);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A manifest record with its text analyzed and its audio decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: LabeledText,
    pub wave: Option<Waveform>,
}

impl Example {
    /// `labeled`: the text is gold diacritized text. Otherwise any marks are
    /// stripped and the labels are left at their defaults.
    pub fn from_record(rec: &ManifestRecord, manifest_dir: &Path, labeled: bool, max_text_len: usize) -> Result<Self> {
        let text = if labeled {
            label_from_diacritized(&rec.text)?
        } else {
            LabeledText::unlabeled(&strip_diacritics(&rec.text))?
        };
        if text.chars().len() > max_text_len {
            return Err(Error::Ingest(format!(
                "sample {}: {} characters exceed the limit of {max_text_len}",
                rec.id,
                text.chars().len()
            )));
        }
        let wave = if rec.audio.is_empty() { None } else { Some(load_wav(&rec.audio_path(manifest_dir))?) };
        Ok(Self { id: rec.id.clone(), text, wave })
    }

    /// Token rows of the letters, given the number of prefix positions.
    pub fn letter_rows(&self, prefix_len: usize) -> Vec<usize> {
        self.text.letter_positions().iter().map(|&p| p + prefix_len).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.text.labels().iter().map(|c| c.id()).collect()
    }
}

/// Loads every record of a manifest (in parallel, results in manifest order).
pub fn load_examples(records: &[ManifestRecord], manifest_dir: &Path, labeled: bool, max_text_len: usize) -> Result<Vec<Example>> {
    records.par_iter().map(|r| Example::from_record(r, manifest_dir, labeled, max_text_len)).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropReport {
    pub dropped: Vec<(String, f64)>,
}

/// Drops records whose gold diacritization ratio is below `threshold`.
pub fn filter_corpus(records: Vec<ManifestRecord>, threshold: f64) -> (Vec<ManifestRecord>, DropReport) {
    let mut report = DropReport::default();
    let kept = records
        .into_iter()
        .filter(|r| {
            let ratio = diacritization_ratio(&r.text);
            if ratio < threshold {
                report.dropped.push((r.id.clone(), ratio));
                false
            } else {
                true
            }
        })
        .collect();
    (kept, report)
}

pub const DEFAULT_ALPHABET: &str = "بتجدرسعكلمنهو";

/// Class k ↦ 250·1.2^k Hz, spanning 250 Hz to about 3.2 kHz.
pub fn default_tone_map() -> [f64; NUM_CLASSES] {
    std::array::from_fn(|k| 250.0 * 1.2f64.powi(k as i32))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub train_count: usize,
    pub dev_count: usize,
    pub alphabet: Vec<char>,
    /// Inclusive range of letters per word.
    pub word_len: (usize, usize),
    /// Inclusive range of words per sample.
    pub words: (usize, usize),
    /// Classes drawn uniformly per letter.
    pub classes: Vec<DiacriticClass>,
    pub tone_map: [f64; NUM_CLASSES],
    /// Length of the audio segment for every character, spaces included.
    pub tone_ms: f64,
    pub amplitude: f64,
    /// Std of additive Gaussian noise.
    pub noise_floor: f64,
}

impl Default for SynthSpec {
    /// About 7 s per sample: 7–9 words of 2–5 letters at 200 ms per character.
    fn default() -> Self {
        Self {
            train_count: 256,
            dev_count: 32,
            alphabet: DEFAULT_ALPHABET.chars().collect(),
            word_len: (2, 5),
            words: (7, 9),
            classes: DiacriticClass::all().skip(1).collect(),
            tone_map: default_tone_map(),
            tone_ms: 200.0,
            amplitude: 0.5,
            noise_floor: 0.003,
        }
    }
}

impl SynthSpec {
    /// Short utterances for the desk model: at most 9 characters, each
    /// occupying one 200 ms segment, so character `i` lines up with speech
    /// prefix slot `i` of a 2 s / 10-slot frontend.
    pub fn desk() -> Self {
        Self { words: (1, 2), word_len: (2, 4), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.train_count == 0 {
            return err("sample count must be positive");
        }
        if self.alphabet.is_empty() || self.classes.is_empty() {
            return err("alphabet and class set must be non-empty");
        }
        if self.word_len.0 == 0 || self.word_len.0 > self.word_len.1 || self.words.0 == 0 || self.words.0 > self.words.1 {
            return err("word ranges must be non-empty and start at 1 or more");
        }
        if self.tone_ms <= 0.0 {
            return err("tone duration must be positive");
        }
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if self.tone_map.iter().any(|&f| !(f > 0.0 && f < nyquist)) {
            return err("tone frequencies must lie strictly between 0 and 8 kHz");
        }
        for (i, a) in self.tone_map.iter().enumerate() {
            if self.tone_map[i + 1..].contains(a) {
                return err("tone map must be injective");
            }
        }
        Ok(())
    }

    fn segment_len(&self) -> usize {
        (self.tone_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }
}

/// Diacritized text and its audio for one synthetic sample.
pub fn synthesize_sample(spec: &SynthSpec, rng: &mut RngStream) -> (String, Waveform) {
    let words = rng.inclusive(spec.words.0, spec.words.1);
    let mut raw = String::new();
    let mut classes = Vec::new();
    for w in 0..words {
        if w > 0 {
            raw.push(' ');
        }
        for _ in 0..rng.inclusive(spec.word_len.0, spec.word_len.1) {
            raw.push(spec.alphabet[rng.below(spec.alphabet.len())]);
            classes.push(spec.classes[rng.below(spec.classes.len())]);
        }
    }
    let text = insert_diacritics(&raw, &classes).expect("synthetic text satisfies insertion invariants");

    let seg = spec.segment_len();
    let ramp = (SAMPLE_RATE as usize / 200).min(seg / 2);
    let mut samples = Vec::with_capacity(seg * raw.chars().count());
    let mut next_class = classes.iter();
    for c in raw.chars() {
        let hz = if c == ' ' { None } else { next_class.next().map(|k| spec.tone_map[k.id()]) };
        for i in 0..seg {
            let tone = hz.map_or(0.0, |f| {
                let env = if i < ramp {
                    0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
                } else if i >= seg - ramp {
                    0.5 - 0.5 * (PI * (seg - 1 - i) as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
                spec.amplitude * env * (2.0 * PI * f * i as f64 / SAMPLE_RATE as f64).sin()
            });
            let noise = if spec.noise_floor > 0.0 { spec.noise_floor * rng.normal() } else { 0.0 };
            samples.push((tone + noise) as f32);
        }
    }
    (text, Waveform::new(samples))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthReport {
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    pub count: usize,
    pub mean_duration: f64,
    pub min_ratio: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
}

/// Writes `train.jsonl`, `dev.jsonl` and `wav/<id>.wav` under `out_dir`.
/// Sample `i` of split `s` draws from its own sub-stream of `rng`.
pub fn synthesize_corpus(spec: &SynthSpec, rng: &RngStream, out_dir: &Path) -> Result<SynthReport> {
    spec.validate()?;
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut durations = Vec::new();
    let mut ratios = Vec::new();
    let mut manifests = Vec::new();
    for (split_idx, (split, count)) in [("train", spec.train_count), ("dev", spec.dev_count)].into_iter().enumerate() {
        let split_rng = rng.derive(split_idx as u64);
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let (text, wave) = synthesize_sample(spec, &mut split_rng.derive(i as u64));
            let id = format!("{split}-{i:05}");
            let audio = format!("wav/{id}.wav");
            write_wav(&out_dir.join(&audio), &wave)?;
            durations.push(wave.duration());
            ratios.push(diacritization_ratio(&text));
            records.push(ManifestRecord { id, audio, text, confidence: None });
        }
        let path = out_dir.join(format!("{split}.jsonl"));
        write_manifest(&path, &records)?;
        manifests.push(path);
    }
    let n = durations.len() as f64;
    let mut file = fs::File::create(out_dir.join("synth.txt")).map_err(|e| Error::io(out_dir, e))?;
    let report = SynthReport {
        dev_manifest: manifests.pop().expect("dev"),
        train_manifest: manifests.pop().expect("train"),
        count: durations.len(),
        mean_duration: durations.iter().sum::<f64>() / n,
        min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        mean_ratio: ratios.iter().sum::<f64>() / n,
        max_ratio: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    writeln!(
        file,
        "count={}\nmean_duration={:.3}\nratio_min={:.4}\nratio_mean={:.4}\nratio_max={:.4}",
        report.count, report.mean_duration, report.min_ratio, report.mean_ratio, report.max_ratio
    )
    .map_err(|e| Error::io(out_dir, e))?;
    Ok(report)
}
