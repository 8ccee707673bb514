//! Audio ingestion, log-mel features and the two training-time augmentations.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use diac_tensor::{RngStream, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 400;
pub const HOP: usize = 160;
pub const DEFAULT_MELS: usize = 80;

/// 16 kHz mono samples in `[-1, 1]` (noise injection may exceed the range).
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.samples.len() as f64
    }
}

/// Reads a RIFF/WAVE file holding 16 kHz mono PCM16 or IEEE float32 samples.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Ingest(format!("{}: expected mono, found {} channels", path.display(), spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Ingest(format!(
            "{}: expected {SAMPLE_RATE} Hz, found {} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let fmt_err = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fmt_err)?,
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().collect::<std::result::Result<Vec<_>, _>>().map_err(fmt_err)?
        }
        (format, bits) => {
            return Err(Error::Ingest(format!(
                "{}: unsupported sample format {format:?}/{bits} bit",
                path.display()
            )))
        }
    };
    Ok(Waveform::new(samples))
}

/// Writes 16-bit PCM, clipping to the representable range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &wave.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

/// Log-mel spectrogram stored mel-major: `values[mel * frames + frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub mels: usize,
    pub frames: usize,
    pub values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.frames + frame]
    }

    pub fn min_value(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// `[frames, mels]` layout expected by the speech encoder.
    pub fn to_frame_major<T: diac_tensor::Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.frames, self.mels], |i| {
            let (f, m) = (i / self.mels, i % self.mels);
            T::of(self.values[m * self.frames + f] as f64)
        })
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    let logstep = 6.4f64.ln() / 27.0;
    if hz < 1000.0 {
        hz / F_SP
    } else {
        15.0 + (hz / 1000.0).ln() / logstep
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    let logstep = 6.4f64.ln() / 27.0;
    if mel < 15.0 {
        mel * F_SP
    } else {
        1000.0 * ((mel - 15.0) * logstep).exp()
    }
}

/// Slaney-scale, area-normalized triangular filters over `0..sr/2`:
/// `mels × (N_FFT/2 + 1)` weights plus each filter's center frequency.
pub fn mel_filterbank(mels: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let bins = N_FFT / 2 + 1;
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let fft_freqs: Vec<f64> = (0..bins).map(|i| i as f64 * nyquist / (bins - 1) as f64).collect();
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> =
        (0..mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mels + 1) as f64)).collect();
    let filters = (0..mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            fft_freqs
                .iter()
                .map(|&f| {
                    let rise = (f - left) / (center - left);
                    let fall = (right - f) / (right - center);
                    rise.min(fall).max(0.0) * norm
                })
                .collect()
        })
        .collect();
    (filters, edges[1..=mels].to_vec())
}

/// Reusable log-mel extractor (25 ms Hann window, 10 ms hop).
pub struct MelFrontend {
    mels: usize,
    filters: Vec<Vec<f64>>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontend {
    pub fn new(mels: usize) -> Self {
        let window = (0..N_FFT).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / N_FFT as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self { mels, filters: mel_filterbank(mels).0, window, fft }
    }

    pub fn mels(&self) -> usize {
        self.mels
    }

    /// Pads or trims the waveform to `frame_budget` hops, then computes
    /// `log10` mel power clamped 8 decades below the utterance maximum and
    /// rescaled by `(x + 4) / 4`.
    pub fn compute(&self, wave: &Waveform, frame_budget: usize) -> MelSpectrogram {
        let len = frame_budget * HOP;
        let mut samples: Vec<f64> = wave.samples.iter().take(len).map(|&s| s as f64).collect();
        samples.resize(len, 0.0);
        let pad = N_FFT / 2;
        let padded: Vec<f64> = (0..len + 2 * pad)
            .map(|i| {
                let j = i as isize - pad as isize;
                let n = len as isize;
                let r = if j < 0 { -j } else if j >= n { 2 * (n - 1) - j } else { j };
                if (0..n).contains(&r) {
                    samples[r as usize]
                } else {
                    0.0
                }
            })
            .collect();

        let bins = N_FFT / 2 + 1;
        let mut mel_power = vec![0.0f64; self.mels * frame_budget];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = vec![0.0f64; bins];
        for t in 0..frame_budget {
            let start = t * HOP;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (m, filt) in self.filters.iter().enumerate() {
                mel_power[m * frame_budget + t] = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            }
        }
        let logs: Vec<f64> = mel_power.iter().map(|&p| p.max(1e-10).log10()).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let values = logs.iter().map(|&l| ((l.max(max - 8.0) + 4.0) / 4.0) as f32).collect();
        MelSpectrogram { mels: self.mels, frames: frame_budget, values }
    }
}

pub fn log_mel(wave: &Waveform, mels: usize, frame_budget: usize) -> MelSpectrogram {
    MelFrontend::new(mels).compute(wave, frame_budget)
}

/// One frequency band of width `~U{0..=freq_param}` and one time band of width
/// `~U{0..=time_param}`, both filled with the spectrogram minimum.
pub fn spec_augment(m: &MelSpectrogram, freq_param: usize, time_param: usize, rng: &mut RngStream) -> MelSpectrogram {
    let fill = m.min_value();
    let mut out = m.clone();
    let f = rng.inclusive(0, freq_param.min(m.mels));
    let f0 = rng.inclusive(0, m.mels - f);
    let t = rng.inclusive(0, time_param.min(m.frames));
    let t0 = rng.inclusive(0, m.frames - t);
    for mel in f0..f0 + f {
        out.values[mel * m.frames..(mel + 1) * m.frames].fill(fill);
    }
    for mel in 0..m.mels {
        out.values[mel * m.frames + t0..mel * m.frames + t0 + t].fill(fill);
    }
    out
}

/// Adds white Gaussian noise at exactly `snr_db` relative to the signal power.
pub fn inject_noise_at(wave: &Waveform, snr_db: f64, rng: &mut RngStream) -> Waveform {
    let power = wave.power();
    if power == 0.0 {
        return wave.clone();
    }
    let std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let samples = wave.samples.iter().map(|&s| (s as f64 + std * rng.normal()) as f32).collect();
    Waveform { samples, sample_rate: wave.sample_rate }
}

/// Noise injection at an SNR drawn uniformly from `[lo, hi]` dB.
pub fn inject_noise(wave: &Waveform, snr_db_range: (f64, f64), rng: &mut RngStream) -> Waveform {
    if wave.power() == 0.0 {
        return wave.clone();
    }
    let snr = rng.uniform_range(snr_db_range.0, snr_db_range.1);
    inject_noise_at(wave, snr, rng)
}
