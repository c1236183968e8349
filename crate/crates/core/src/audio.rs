//! WAV ingestion and deterministic synthetic signals.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;
const PEAK: f64 = 0.9;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::param("sample rate must be positive"));
        }
        if let Some(i) = samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::param(format!(
                "sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a RIFF/WAVE file holding 16-bit PCM mono audio.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            "channels",
            format!("{}: mono required, found {} channels", path.display(), spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            "sample_format",
            format!(
                "{}: PCM16 required, found {:?} with {} bits",
                path.display(),
                spec.sample_format,
                spec.bits_per_sample
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Duration in seconds from the WAV header alone.
pub fn wav_duration(path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

/// Writes 16-bit PCM mono. Samples are scaled by 32768 and clamped.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &w.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format("riff", format!("{}: {other}", path.display())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Sum of sines at `frequencies`, zero phase.
    Sine,
    /// Linear chirp from `frequencies[0]` to `frequencies[1]`.
    Chirp,
    /// Unit impulses repeating at `frequencies[0]` Hz, starting at sample 0.
    ImpulseTrain,
    /// Sines with seeded phases under a seeded piecewise on/off envelope.
    Mixture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub frequencies: Vec<f64>,
    /// Per-frequency amplitudes; empty means all ones.
    pub amplitudes: Vec<f64>,
    pub duration: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn sine(freq: f64, duration: f64) -> Self {
        Self {
            kind: SynthKind::Sine,
            frequencies: vec![freq],
            amplitudes: vec![],
            duration,
            seed: 0,
        }
    }

    pub fn chirp(f_start: f64, f_end: f64, duration: f64) -> Self {
        Self {
            kind: SynthKind::Chirp,
            frequencies: vec![f_start, f_end],
            amplitudes: vec![],
            duration,
            seed: 0,
        }
    }

    fn validate(&self, sample_rate: u32) -> Result<()> {
        if sample_rate == 0 {
            return Err(Error::param("sample rate must be positive"));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::param(format!("duration {} must be > 0", self.duration)));
        }
        let nyquist = sample_rate as f64 / 2.0;
        for &f in &self.frequencies {
            if !(f > 0.0) || f >= nyquist {
                return Err(Error::param(format!(
                    "frequency {f} Hz outside (0, {nyquist}) Hz"
                )));
            }
        }
        let needed = match self.kind {
            SynthKind::Chirp => 2,
            _ => 1,
        };
        if self.frequencies.len() < needed {
            return Err(Error::param(format!(
                "{:?} needs at least {needed} frequencies",
                self.kind
            )));
        }
        if !self.amplitudes.is_empty() && self.amplitudes.len() != self.frequencies.len() {
            return Err(Error::param("amplitudes must match frequencies"));
        }
        Ok(())
    }

    fn amplitude(&self, i: usize) -> f64 {
        self.amplitudes.get(i).copied().unwrap_or(1.0)
    }
}

/// Generates a deterministic signal peak-normalized to 0.9.
pub fn synth_signal(spec: &SynthSpec, sample_rate: u32) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    let sr = sample_rate as f64;
    let n = (spec.duration * sr).round().max(1.0) as usize;
    let t = |i: usize| i as f64 / sr;
    let raw: Vec<f64> = match spec.kind {
        SynthKind::Sine => (0..n)
            .map(|i| {
                spec.frequencies
                    .iter()
                    .enumerate()
                    .map(|(k, &f)| spec.amplitude(k) * (2.0 * PI * f * t(i)).sin())
                    .sum()
            })
            .collect(),
        SynthKind::Chirp => {
            let (f0, f1) = (spec.frequencies[0], spec.frequencies[1]);
            let rate = (f1 - f0) / spec.duration;
            (0..n)
                .map(|i| {
                    let ti = t(i);
                    spec.amplitude(0) * (2.0 * PI * (f0 * ti + 0.5 * rate * ti * ti)).sin()
                })
                .collect()
        }
        SynthKind::ImpulseTrain => {
            let period = sr / spec.frequencies[0];
            let mut out = vec![0.0; n];
            let mut k = 0usize;
            loop {
                let idx = (k as f64 * period).round() as usize;
                if idx >= n {
                    break;
                }
                out[idx] = spec.amplitude(0);
                k += 1;
            }
            out
        }
        SynthKind::Mixture => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let phases: Vec<f64> = spec
                .frequencies
                .iter()
                .map(|_| rng.gen_range(0.0..2.0 * PI))
                .collect();
            // on/off segments of 50..200 ms give the signal transients
            let mut envelope = vec![0.0; n];
            let mut pos = 0usize;
            let mut on = true;
            while pos < n {
                let len = (rng.gen_range(0.05..0.2) * sr) as usize;
                let gain = if on { 1.0 } else { 0.15 };
                for e in envelope.iter_mut().skip(pos).take(len.max(1)) {
                    *e = gain;
                }
                pos += len.max(1);
                on = !on;
            }
            (0..n)
                .map(|i| {
                    let s: f64 = spec
                        .frequencies
                        .iter()
                        .zip(&phases)
                        .enumerate()
                        .map(|(k, (&f, &ph))| spec.amplitude(k) * (2.0 * PI * f * t(i) + ph).sin())
                        .sum();
                    s * envelope[i]
                })
                .collect()
        }
    };
    Waveform::new(normalize_peak(&raw), sample_rate)
}

/// Sums waveforms of equal rate sample-wise (shorter ones zero-extended) and
/// renormalizes the peak to 0.9.
pub fn mix(parts: &[Waveform]) -> Result<Waveform> {
    let first = parts
        .first()
        .ok_or_else(|| Error::param("nothing to mix"))?;
    let sr = first.sample_rate;
    if parts.iter().any(|w| w.sample_rate != sr) {
        return Err(Error::param("sample rates differ"));
    }
    let n = parts.iter().map(Waveform::len).max().unwrap_or(0);
    let mut acc = vec![0.0f64; n];
    for w in parts {
        for (a, &s) in acc.iter_mut().zip(&w.samples) {
            *a += s as f64;
        }
    }
    Waveform::new(normalize_peak(&acc), sr)
}

fn normalize_peak(raw: &[f64]) -> Vec<f32> {
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return vec![0.0; raw.len()];
    }
    let g = PEAK / peak;
    raw.iter().map(|&v| (v * g) as f32).collect()
}

/// Symmetric Hann window `0.5 - 0.5 cos(2 pi i / (n - 1))`.
pub fn hann_window(n: usize) -> Result<Tensor> {
    Tensor::from_f64(vec![n], &hann_f64(n)?)
}

pub(crate) fn hann_f64(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::param(format!("window length {n} < 2")));
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / denom).cos())
        .collect())
}
