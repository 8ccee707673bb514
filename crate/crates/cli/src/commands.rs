use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diac_core::data::{filter_corpus, load_examples, load_manifest, synthesize_corpus, write_manifest, SynthSpec};
use diac_core::inference::run_ensemble;
use diac_core::metrics::{evaluate_corpus, MetricFlags};
use diac_core::model::{count_parameters, Model};
use diac_core::training::{
    decode_checkpoint, fit, fnv1a64, load_checkpoint, run_fingerprint, save_checkpoint, EpochStats, FitOptions,
};
use diac_core::{Error, Result};
use diac_tensor::RngStream;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{EvalArgs, InferArgs, SynthArgs, SynthPreset, Toggle, TrainArgs};

/// Model init draws from `seed → 0`; training draws from tags 1..=3 of the same seed.
const INIT_TAG: u64 = 0;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

/// Writes `files.txt`: relative path, size and FNV-1a hash of every regular
/// file under `dir`, sorted by path.
fn write_file_manifest(dir: &Path) -> Result<()> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                if rel != "files.txt" {
                    out.push((rel, fs::read(&path).map_err(|e| Error::io(&path, e))?));
                }
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let mut text = String::new();
    for (rel, bytes) in &files {
        let _ = writeln!(text, "{rel}\t{}\t{:016x}", bytes.len(), fnv1a64(bytes));
    }
    write_file(&dir.join("files.txt"), text)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match a.preset {
        SynthPreset::Default => SynthSpec::default(),
        SynthPreset::Desk => SynthSpec::desk(),
    };
    spec.train_count = a.n as usize;
    spec.dev_count = a.dev_n;
    if let Some(noise) = a.noise_floor {
        spec.noise_floor = noise;
    }
    let report = synthesize_corpus(&spec, &RngStream::new(a.seed), &a.out)?;
    println!("count={}", report.count);
    println!("mean_duration={:.3}", report.mean_duration);
    println!("ratio_min={:.4}", report.min_ratio);
    println!("ratio_mean={:.4}", report.mean_ratio);
    println!("ratio_max={:.4}", report.max_ratio);
    write_file_manifest(&a.out)
}

fn log_row(s: &EpochStats) -> String {
    let dev = s.dev.map_or("\t\t".to_string(), |d| format!("{:.4}\t{:.4}\t{:.4}", d.der * 100.0, d.wer * 100.0, d.ser * 100.0));
    format!("{}\t{:.6}\t{:.6e}\t{}\t{}\n", s.epoch, s.mean_objective, s.lr, s.unfrozen_blocks, dev)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), a.preset.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(m) = a.manifest {
        cfg.paths.manifest = Some(m);
    }
    if let Some(o) = a.out {
        cfg.paths.out = Some(o);
    }
    let manifest = cfg.paths.manifest.clone().ok_or_else(|| Error::Config("no training manifest given".into()))?;
    let out = cfg.paths.out.clone().ok_or_else(|| Error::Config("no output directory given".into()))?;

    // a rerun into an existing run directory must describe the same run
    let existing = out.join("model.ckpt");
    if existing.exists() {
        let bytes = fs::read(&existing).map_err(|e| Error::io(&existing, e))?;
        let found = decode_checkpoint(&bytes, Some(&cfg.model))?.meta.fingerprint;
        let expected = run_fingerprint(&cfg.model, &cfg.train);
        if found != expected {
            return Err(Error::Fingerprint { expected, found });
        }
    }

    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;

    let records = load_manifest(&manifest)?;
    let total = records.len();
    let (kept, report) = filter_corpus(records, cfg.train.ratio_threshold);
    let mut filter_text = format!("total={total}\nkept={}\ndropped={}\n", kept.len(), report.dropped.len());
    for (id, ratio) in &report.dropped {
        let _ = writeln!(filter_text, "{id}\t{ratio:.4}");
    }
    write_file(&out.join("filter_report.txt"), filter_text)?;
    eprintln!("filter: kept {} of {total} (threshold {})", kept.len(), cfg.train.ratio_threshold);

    let max_len = cfg.model.max_text_len;
    let corpus = load_examples(&kept, parent_dir(&manifest), true, max_len)?;
    let dev = match &cfg.paths.dev {
        Some(p) => Some(load_examples(&load_manifest(p)?, parent_dir(p), true, max_len)?),
        None => None,
    };

    let mut model = Model::new(cfg.model.clone(), &mut RngStream::new(cfg.train.seed).derive(INIT_TAG))?;
    let counts = count_parameters(&cfg.model, 0);
    eprintln!("model: {} parameters, {} trainable", counts.total, counts.trainable);

    let mut log = String::from("epoch\tobjective\tlr\tunfrozen_blocks\tdev_der\tdev_wer\tdev_ser\n");
    let mut on_epoch = |s: &EpochStats| {
        log.push_str(&log_row(s));
        let dev = s.dev.map_or(String::new(), |d| format!(" dev_der={:.2}% dev_wer={:.2}%", d.der * 100.0, d.wer * 100.0));
        eprintln!("epoch {} objective={:.4} lr={:.3e}{dev} ({:.1}s)", s.epoch, s.mean_objective, s.lr, s.seconds);
    };
    let outcome = fit(
        &corpus,
        &mut model,
        &cfg.train,
        FitOptions { dev: dev.as_deref(), out_dir: Some(&ckpt_dir), on_epoch: Some(&mut on_epoch) },
    )?;
    write_file(&out.join("train_log.tsv"), &log)?;
    let selected = &outcome.selected;
    save_checkpoint(&existing, &selected.model, &selected.meta)?;
    write_file(&out.join("selected.txt"), format!("epoch={}\nfingerprint={}\n", selected.meta.epoch, selected.meta.fingerprint))?;
    println!("selected epoch {} -> {}", selected.meta.epoch, existing.display());
    write_file_manifest(&out)
}

#[derive(Serialize)]
struct InferEcho<'a> {
    checkpoints: &'a [PathBuf],
    passes: &'a [usize],
    dropout_p: f64,
    seed: u64,
    manifest: &'a Path,
}

pub fn infer(a: InferArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref(), None)?;
    let expected = a.config.as_ref().map(|_| &cfg.model);
    let models = a
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p, expected).map(|c| c.model))
        .collect::<Result<Vec<_>>>()?;
    let passes = if a.passes.is_empty() { vec![cfg.ensemble.passes_per_model] } else { a.passes.clone() };
    let mut ensemble = cfg.ensemble.clone();
    if let Some(p) = a.dropout {
        ensemble.dropout_p = p;
    }
    if let Some(s) = a.seed {
        ensemble.seed = s;
    }
    for &n in &passes {
        ensemble.to_config(n).validate()?;
    }

    let records = load_manifest(&a.manifest)?;
    let dir = parent_dir(&a.manifest);
    let max_len = models.iter().map(|m| m.config().max_text_len).min().unwrap_or(0);
    let examples = load_examples(&records, dir, false, max_len)?;
    // predictions live elsewhere, so audio paths are made absolute
    let audio: Vec<String> = records
        .iter()
        .map(|r| {
            if r.audio.is_empty() {
                return Ok(String::new());
            }
            let p = r.audio_path(dir);
            let abs = fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?;
            Ok(abs.to_string_lossy().into_owned())
        })
        .collect::<Result<_>>()?;

    create_dir(&a.out)?;
    let echo = InferEcho {
        checkpoints: &a.checkpoints,
        passes: &passes,
        dropout_p: ensemble.dropout_p,
        seed: ensemble.seed,
        manifest: &a.manifest,
    };
    write_file(&a.out.join("infer.toml"), toml::to_string(&echo).expect("echo serializes"))?;
    for &n in &passes {
        let started = Instant::now();
        let run = run_ensemble(&models, &examples, &ensemble.to_config(n))?;
        let out_records: Vec<_> = run.predictions.iter().zip(&audio).map(|(p, a)| p.to_record(a)).collect();
        let path = a.out.join(format!("predictions-p{n}.jsonl"));
        write_manifest(&path, &out_records)?;
        println!(
            "passes_per_model={n} models={} total_passes={} samples={} wall={:.2}s -> {}",
            models.len(),
            run.total_passes,
            examples.len(),
            started.elapsed().as_secs_f64(),
            path.display()
        );
    }
    write_file_manifest(&a.out)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let flags = MetricFlags {
        include_case_endings: a.case_endings == Toggle::Include,
        include_no_diacritic: a.no_diacritic == Toggle::Include,
    };
    let pred = load_manifest(&a.pred)?;
    let gold = load_manifest(&a.gold)?;
    let report = evaluate_corpus(&pred, &gold, flags)?;
    print!("{}", report.to_key_values());
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}
