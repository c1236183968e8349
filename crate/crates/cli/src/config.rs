//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key maps onto
//! one field of the Mel, CWT or training configuration; unknown keys and
//! values that fail to parse are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use cwtmel::audio::DEFAULT_SAMPLE_RATE;
use cwtmel::cwt::CwtConfig;
use cwtmel::melspec::MelConfig;
use cwtmel::train::TrainConfig;

pub const DEFAULT_K: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sample_rate: u32,
    pub mel: MelConfig,
    pub cwt: CwtConfig,
    /// Rank of the scalogram basis.
    pub k: usize,
    pub train: TrainConfig,
    /// Corpus-wide padded frame count; `None` means the longest utterance.
    pub pad_frames: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            mel: MelConfig::default(),
            cwt: CwtConfig::default(),
            k: DEFAULT_K,
            train: TrainConfig::default(),
            pad_frames: None,
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "sample_rate",
    "n_fft",
    "hop_length",
    "win_length",
    "n_mels",
    "f_min",
    "f_max",
    "log_floor",
    "omega0",
    "n_scales",
    "f_lo",
    "f_hi",
    "cwt_normalize",
    "k",
    "pad_frames",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "steps",
    "batch_size",
    "noise_sigma",
    "seed",
    "aux_enabled",
    "aux_weight",
    "zero_init_residual",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("config key {key}: cannot parse {value:?}: {e}"))
}

/// `none` (any case) for unset optional values.
fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_assignment(line)
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got {assignment:?}"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "sample_rate" => self.sample_rate = parse(key, v)?,
            "n_fft" => self.mel.n_fft = parse(key, v)?,
            "hop_length" => self.mel.hop = parse(key, v)?,
            "win_length" => self.mel.win_length = parse(key, v)?,
            "n_mels" => self.mel.n_mels = parse(key, v)?,
            "f_min" => self.mel.f_min = parse(key, v)?,
            "f_max" => self.mel.f_max = parse(key, v)?,
            "log_floor" => self.mel.log_floor = parse(key, v)?,
            "omega0" => self.cwt.omega0 = parse(key, v)?,
            "n_scales" => self.cwt.n_scales = parse(key, v)?,
            "f_lo" => self.cwt.f_lo = parse(key, v)?,
            "f_hi" => self.cwt.f_hi = parse_opt(key, v)?,
            "cwt_normalize" => self.cwt.normalize = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "pad_frames" => self.pad_frames = parse_opt(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "eps" => self.train.eps = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "noise_sigma" => self.train.noise_sigma = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "aux_enabled" => self.train.aux_enabled = parse(key, v)?,
            "aux_weight" => self.train.aux_weight = parse(key, v)?,
            "zero_init_residual" => self.train.zero_init_residual = parse(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Checks every section against the configured sample rate.
    pub fn validate(&self) -> Result<()> {
        self.mel.validate(self.sample_rate)?;
        self.cwt.validate(self.sample_rate)?;
        self.train.validate()?;
        if self.k == 0 || self.k > self.cwt.n_scales {
            bail!("k = {} must be in [1, n_scales = {}]", self.k, self.cwt.n_scales);
        }
        if self.pad_frames == Some(0) {
            bail!("pad_frames must be positive");
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let values: Vec<String> = vec![
            self.sample_rate.to_string(),
            self.mel.n_fft.to_string(),
            self.mel.hop.to_string(),
            self.mel.win_length.to_string(),
            self.mel.n_mels.to_string(),
            self.mel.f_min.to_string(),
            self.mel.f_max.to_string(),
            self.mel.log_floor.to_string(),
            self.cwt.omega0.to_string(),
            self.cwt.n_scales.to_string(),
            self.cwt.f_lo.to_string(),
            opt(self.cwt.f_hi.map(|v| v.to_string())),
            self.cwt.normalize.to_string(),
            self.k.to_string(),
            opt(self.pad_frames.map(|v| v.to_string())),
            self.train.lr.to_string(),
            self.train.beta1.to_string(),
            self.train.beta2.to_string(),
            self.train.eps.to_string(),
            self.train.steps.to_string(),
            self.train.batch_size.to_string(),
            self.train.noise_sigma.to_string(),
            self.train.seed.to_string(),
            self.train.aux_enabled.to_string(),
            self.train.aux_weight.to_string(),
            self.train.zero_init_residual.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
