//! LJSpeech-style corpus layout: `wavs/<id>.wav` plus a pipe-delimited
//! `metadata.csv` whose first field is the utterance id.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cwtmel::audio::{mix, synth_signal, wav_duration, write_wav, SynthKind, SynthSpec, Waveform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const METADATA_FILE: &str = "metadata.csv";
pub const WAV_DIR: &str = "wavs";

pub const MIN_DURATION: f64 = 0.5;
pub const MAX_DURATION: f64 = 2.0;
const MIN_FREQ: f64 = 100.0;
const MAX_FREQ: f64 = 4000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub wav_path: PathBuf,
    /// From the WAV header; `None` when the header is unreadable.
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    /// Reads `root/metadata.csv`. Unreadable WAVs are kept, so that
    /// extraction can report them per file.
    pub fn load(root: &Path) -> Result<Self> {
        let meta = root.join(METADATA_FILE);
        let text =
            fs::read_to_string(&meta).with_context(|| format!("reading {}", meta.display()))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let id = line.split('|').next().unwrap_or("").trim();
            if id.is_empty() || id.contains(['/', '\\']) {
                bail!("{}:{}: bad utterance id {id:?}", meta.display(), lineno + 1);
            }
            let wav_path = root.join(WAV_DIR).join(format!("{id}.wav"));
            let duration_s = wav_duration(&wav_path).ok();
            entries.push(ManifestEntry {
                id: id.to_string(),
                wav_path,
                duration_s,
            });
        }
        let manifest = Self {
            root: root.to_path_buf(),
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Ids are unique and every WAV exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                bail!("duplicate utterance id {}", e.id);
            }
            if !e.wav_path.is_file() {
                bail!("missing audio file {}", e.wav_path.display());
            }
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

/// One synthetic utterance: 1 to 3 components, each a gated sine or a
/// linear chirp, with random levels.
pub fn synth_utterance(seed: u64, index: usize, sample_rate: u32) -> Result<(Waveform, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let duration = rng.gen_range(MIN_DURATION..=MAX_DURATION);
    let n_parts = rng.gen_range(1..=3);
    let mut parts = Vec::with_capacity(n_parts);
    let mut desc = Vec::with_capacity(n_parts);
    for _ in 0..n_parts {
        let level: f64 = rng.gen_range(0.3..1.0);
        let (spec, text) = if rng.gen_bool(0.5) {
            let f = log_uniform(&mut rng, MIN_FREQ, MAX_FREQ);
            let spec = SynthSpec {
                kind: SynthKind::Mixture,
                frequencies: vec![f],
                amplitudes: vec![],
                duration,
                seed: rng.gen(),
            };
            (spec, format!("gated sine {f:.1} Hz"))
        } else {
            let f0 = log_uniform(&mut rng, MIN_FREQ, MAX_FREQ);
            let f1 = log_uniform(&mut rng, MIN_FREQ, MAX_FREQ);
            (
                SynthSpec::chirp(f0, f1, duration),
                format!("chirp {f0:.1} to {f1:.1} Hz"),
            )
        };
        let w = synth_signal(&spec, sample_rate)?;
        let scaled = w.samples().iter().map(|&s| s * level as f32).collect();
        parts.push(Waveform::new(scaled, sample_rate)?);
        desc.push(format!("{text} at level {level:.2}"));
    }
    Ok((mix(&parts)?, desc.join(", ")))
}

pub fn utterance_id(index: usize) -> String {
    format!("SYN-{:04}", index + 1)
}

/// Writes `n_utts` synthetic WAVs and `metadata.csv` under `out_dir`.
pub fn gen_corpus(n_utts: usize, out_dir: &Path, seed: u64, sample_rate: u32) -> Result<CorpusManifest> {
    let wav_dir = out_dir.join(WAV_DIR);
    fs::create_dir_all(&wav_dir).with_context(|| format!("creating {}", wav_dir.display()))?;
    let mut metadata = String::new();
    for i in 0..n_utts {
        let id = utterance_id(i);
        let (w, desc) = synth_utterance(seed, i, sample_rate)?;
        write_wav(wav_dir.join(format!("{id}.wav")), &w)?;
        metadata.push_str(&format!("{id}|{desc}|{desc}\n"));
    }
    let meta = out_dir.join(METADATA_FILE);
    fs::write(&meta, metadata).with_context(|| format!("writing {}", meta.display()))?;
    CorpusManifest::load(out_dir)
}
