//! The subcommands as library functions.
//!
//! Feature directory layout:
//!
//! - `mel/<id>.ftn`, shape `[n_mels, T]`
//! - `scalogram/<id>.ftn`, shape `[n_scales, T]`
//! - `pseudo_freqs.ftn`, shape `[n_scales]`
//! - `features.txt` with the corpus-wide `pad_frames`
//!
//! Features are stored unpadded. Training pads the Mel with log-silence and
//! the scalogram with zeros.
//!
//! Training directory layout: `checkpoint/` and `loss.csv`. A checkpoint holds
//! the parameters, `manifest.txt`, and `run.txt` with the full configuration
//! and the number of completed steps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cwtmel::audio::read_wav;
use cwtmel::cwt::{scalogram, ScaleGrid};
use cwtmel::lowrank::{fit_basis_with_energy, project_values, Basis};
use cwtmel::melspec::{mel_spectrogram, pad_columns};
use cwtmel::nets::{Model, ParamStore};
use cwtmel::tensor::{read_tensor, write_tensor};
use cwtmel::train::{evaluate, train_loop, write_trace, Corpus, EvalReport, LossReport, Utterance};
use cwtmel::Tensor;

use crate::config::RunConfig;
use crate::corpus::{CorpusManifest, ManifestEntry};

pub const MEL_DIR: &str = "mel";
pub const SCALOGRAM_DIR: &str = "scalogram";
pub const FEATURES_META: &str = "features.txt";
pub const PSEUDO_FREQS_FILE: &str = "pseudo_freqs.ftn";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRACE_FILE: &str = "loss.csv";
pub const RUN_FILE: &str = "run.txt";
const TRAINED_STEPS_KEY: &str = "trained_steps";

fn feature_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(MEL_DIR).join(format!("{id}.ftn")),
        dir.join(SCALOGRAM_DIR).join(format!("{id}.ftn")),
    )
}

#[derive(Debug, Default)]
pub struct ExtractSummary {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
    /// `(wav path, message)` for every utterance that failed.
    pub failures: Vec<(PathBuf, String)>,
    pub pad_frames: usize,
}

fn extract_one(entry: &ManifestEntry, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let w = read_wav(&entry.wav_path)?;
    if w.sample_rate() != cfg.sample_rate {
        bail!(
            "sample rate {} Hz does not match configured {} Hz",
            w.sample_rate(),
            cfg.sample_rate
        );
    }
    let mel = mel_spectrogram(&w, &cfg.mel)?;
    let scal = scalogram(&w, &cfg.mel, &cfg.cwt)?;
    if mel.n_frames() != scal.n_frames() {
        bail!(
            "frame mismatch: mel {} vs scalogram {}",
            mel.n_frames(),
            scal.n_frames()
        );
    }
    let (mel_path, scal_path) = feature_paths(out_dir, &entry.id);
    write_tensor(&mel_path, &mel.values)?;
    write_tensor(&scal_path, &scal.values)?;
    Ok(())
}

/// Extracts every utterance, continuing past per-file failures.
pub fn extract(manifest: &CorpusManifest, cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<ExtractSummary> {
    cfg.validate()?;
    for sub in [MEL_DIR, SCALOGRAM_DIR] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    }
    let grid = ScaleGrid::new(&cfg.cwt, cfg.sample_rate)?;
    write_tensor(out_dir.join(PSEUDO_FREQS_FILE), &grid.pseudo_freq_tensor()?)?;
    let mut summary = ExtractSummary::default();
    for entry in &manifest.entries {
        let (mel_path, scal_path) = feature_paths(out_dir, &entry.id);
        if !force && mel_path.is_file() && scal_path.is_file() {
            summary.skipped.push(entry.id.clone());
            continue;
        }
        match extract_one(entry, cfg, out_dir) {
            Ok(()) => summary.written.push(entry.id.clone()),
            Err(e) => {
                for p in [&mel_path, &scal_path] {
                    let _ = fs::remove_file(p);
                }
                summary.failures.push((entry.wav_path.clone(), format!("{e:#}")));
            }
        }
    }
    if summary.written.is_empty() && summary.skipped.is_empty() {
        // nothing usable; the per-file failures tell the story
        return Ok(summary);
    }
    let mut longest = 0;
    for id in feature_ids(out_dir)? {
        let (mel_path, _) = feature_paths(out_dir, &id);
        longest = longest.max(read_tensor(&mel_path)?.dims2()?.1);
    }
    summary.pad_frames = match cfg.pad_frames {
        Some(p) if p < longest => bail!("pad_frames = {p} is shorter than the longest utterance ({longest} frames)"),
        Some(p) => p,
        None => longest,
    };
    let meta = out_dir.join(FEATURES_META);
    fs::write(&meta, format!("pad_frames={}\n", summary.pad_frames))
        .with_context(|| format!("writing {}", meta.display()))?;
    Ok(summary)
}

/// Utterance ids with both feature files present, sorted.
pub fn feature_ids(dir: &Path) -> Result<Vec<String>> {
    let mel_dir = dir.join(MEL_DIR);
    let mut ids = Vec::new();
    for entry in fs::read_dir(&mel_dir).with_context(|| format!("listing {}", mel_dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ftn") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if feature_paths(dir, id).1.is_file() {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no feature pairs found in {}", dir.display());
    }
    Ok(ids)
}

pub fn read_pad_frames(dir: &Path) -> Result<usize> {
    let path = dir.join(FEATURES_META);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .find_map(|l| l.strip_prefix("pad_frames="))
        .ok_or_else(|| anyhow!("{}: no pad_frames entry", path.display()))?
        .trim()
        .parse()
        .with_context(|| format!("{}: bad pad_frames", path.display()))
}

fn concat_columns(parts: &[Tensor]) -> Result<Tensor> {
    let rows = parts[0].dims2()?.0;
    let mut total = 0;
    for p in parts {
        let (r, t) = p.dims2()?;
        if r != rows {
            bail!("scalograms disagree on scale count: {r} vs {rows}");
        }
        total += t;
    }
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            let t = p.shape()[1];
            data.extend_from_slice(&p.data()[i * t..(i + 1) * t]);
        }
    }
    Ok(Tensor::new(vec![rows, total], data)?)
}

/// Fits the global basis on all scalogram frames; returns the retained energy.
pub fn fit_basis(features_dir: &Path, k: usize, out_dir: &Path) -> Result<f64> {
    let ids = feature_ids(features_dir)?;
    let scalograms = ids
        .iter()
        .map(|id| read_tensor(feature_paths(features_dir, id).1).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    let n_scales = scalograms[0].dims2()?.0;
    if k == 0 || k > n_scales {
        bail!("k = {k} must be in [1, n_scales = {n_scales}]");
    }
    let frames = concat_columns(&scalograms)?;
    let (basis, energy) = fit_basis_with_energy(&frames, k)?;
    basis.save(out_dir)?;
    Ok(energy)
}

/// Loads features padded to the recorded length, with targets projected on `basis`.
pub fn load_corpus(features_dir: &Path, basis: &Basis, cfg: &RunConfig) -> Result<Corpus> {
    let pad = read_pad_frames(features_dir)?;
    let silence = cfg.mel.silence();
    let mut utterances = Vec::new();
    for id in feature_ids(features_dir)? {
        let (mel_path, scal_path) = feature_paths(features_dir, &id);
        let mel = pad_columns(&read_tensor(&mel_path)?, pad, silence)
            .with_context(|| format!("padding {}", mel_path.display()))?;
        let scal = pad_columns(&read_tensor(&scal_path)?, pad, 0.0)
            .with_context(|| format!("padding {}", scal_path.display()))?;
        let target = project_values(&scal, basis)
            .with_context(|| format!("projecting {}", scal_path.display()))?;
        utterances.push(Utterance {
            id,
            mel,
            target,
            scalogram: scal,
        });
    }
    Ok(Corpus { utterances })
}

fn model_for(corpus: &Corpus, basis: &Basis) -> Result<Model> {
    let n_mels = corpus.utterances[0].mel.dims2()?.0;
    Ok(Model::new(n_mels, basis.k()))
}

/// Trains and writes the checkpoint, loss trace and run record.
pub fn train(features_dir: &Path, basis_dir: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<Vec<LossReport>> {
    cfg.train.validate()?;
    let basis = Basis::load(basis_dir)?;
    let corpus = load_corpus(features_dir, &basis, cfg)?;
    let model = model_for(&corpus, &basis)?;
    let outcome = train_loop(&model, &corpus, &cfg.train, |_| {})?;
    outcome.params.save(out_dir.join(CHECKPOINT_DIR))?;
    write_trace(out_dir.join(TRACE_FILE), &outcome.reports)?;
    let run = format!("{}{TRAINED_STEPS_KEY}={}\n", cfg.to_text(), cfg.train.steps);
    let run_path = out_dir.join(CHECKPOINT_DIR).join(RUN_FILE);
    fs::write(&run_path, run).with_context(|| format!("writing {}", run_path.display()))?;
    Ok(outcome.reports)
}

/// Configuration and completed step count recorded by [`train`].
pub fn read_run_record(checkpoint_dir: &Path) -> Result<(RunConfig, usize)> {
    let path = checkpoint_dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::default();
    let mut steps = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match line.strip_prefix(&format!("{TRAINED_STEPS_KEY}=")) {
            Some(v) => steps = Some(v.trim().parse().context("bad trained_steps")?),
            None => cfg.apply_assignment(line).with_context(|| format!("in {}", path.display()))?,
        }
    }
    let steps = steps.ok_or_else(|| anyhow!("{}: no {TRAINED_STEPS_KEY}", path.display()))?;
    Ok((cfg, steps))
}

/// Metrics of a trained checkpoint. Decoder noise is the draw of `step`,
/// so evaluating at the recorded step reproduces the last trace row.
pub fn eval(checkpoint_dir: &Path, features_dir: &Path, basis_dir: &Path, cfg: &RunConfig, step: usize) -> Result<EvalReport> {
    let basis = Basis::load(basis_dir)?;
    let store = ParamStore::load(checkpoint_dir)?;
    let corpus = load_corpus(features_dir, &basis, cfg)?;
    let model = model_for(&corpus, &basis)?;
    Ok(evaluate(&model, &store, &corpus, &basis, &cfg.train, step)?)
}
