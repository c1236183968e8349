//! STFT and log-Mel spectrogram extraction.
//!
//! Frames are not centred: frame `t` covers samples `[t*hop, t*hop + win_length)`,
//! so a signal of `N` samples yields `1 + (N - win_length) / hop` frames.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::{hann_f64, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_MELS: usize = 80;
pub const MAX_MELS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            win_length: 1024,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.win_length < 2 || self.win_length > self.n_fft {
            return Err(Error::param(format!(
                "win_length {} must be in [2, n_fft={}]",
                self.win_length, self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.win_length {
            return Err(Error::param(format!(
                "hop {} must be in [1, win_length={}]",
                self.hop, self.win_length
            )));
        }
        if !(MIN_MELS..=MAX_MELS).contains(&self.n_mels) {
            return Err(Error::param(format!(
                "n_mels {} outside [{MIN_MELS}, {MAX_MELS}]",
                self.n_mels
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::param(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got {}..{}",
                self.f_min, self.f_max
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::param("log_floor must be positive"));
        }
        Ok(())
    }

    /// Frame count for a signal of `len` samples, or `None` if shorter than a window.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.win_length).then(|| 1 + (len - self.win_length) / self.hop)
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Log value of spectral silence, used for padding.
    pub fn silence(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

/// Nonnegative-frequency STFT, stored bin-major: `values[bin * n_frames + frame]`.
#[derive(Debug, Clone)]
pub struct Stft {
    pub n_bins: usize,
    pub n_frames: usize,
    pub values: Vec<Complex64>,
}

impl Stft {
    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.values[bin * self.n_frames + frame]
    }
}

pub fn stft(w: &Waveform, cfg: &MelConfig) -> Result<Stft> {
    let n_frames = cfg.n_frames(w.len()).ok_or_else(|| {
        Error::param(format!(
            "signal of {} samples shorter than one window ({})",
            w.len(),
            cfg.win_length
        ))
    })?;
    if cfg.win_length > cfg.n_fft || cfg.hop == 0 {
        return Err(Error::param("inconsistent STFT configuration"));
    }
    let window = hann_f64(cfg.win_length)?;
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_bins();
    let mut values = vec![Complex64::new(0.0, 0.0); n_bins * n_frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    let samples = w.samples();
    for t in 0..n_frames {
        let start = t * cfg.hop;
        buf.fill(Complex64::new(0.0, 0.0));
        for (i, (b, &wv)) in buf.iter_mut().zip(&window).enumerate() {
            b.re = samples[start + i] as f64 * wv;
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().take(n_bins).enumerate() {
            values[k * n_frames + t] = *v;
        }
    }
    Ok(Stft {
        n_bins,
        n_frames,
        values,
    })
}

/// HTK Mel scale.
pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return Err(Error::param(format!("negative frequency {f}")));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, equally spaced on the Mel scale.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major `[n_mels, n_bins]`.
    pub weights: Vec<f64>,
    /// Peak frequency of each triangle in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let n_bins = cfg.n_bins();
        let m_lo = hz_to_mel(cfg.f_min)?;
        let m_hi = hz_to_mel(cfg.f_max)?;
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, wgt) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let v = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                *wgt = v;
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::param(format!(
                    "mel band {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; increase n_fft"
                )));
            }
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            n_bins,
            weights,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// `weights . power` for a single spectrum of length `n_bins`.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(vec![self.n_mels, self.n_bins], &self.weights)
    }
}

/// Log-Mel energies `[n_mels, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub frame_rate: f64,
    pub log_floor: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }
}

pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let fb = MelFilterbank::new(cfg, w.sample_rate())?;
    let spec = stft(w, cfg)?;
    let t_len = spec.n_frames;
    let mut out = vec![0.0f64; cfg.n_mels * t_len];
    let mut power = vec![0.0f64; spec.n_bins];
    for t in 0..t_len {
        for (k, p) in power.iter_mut().enumerate() {
            *p = spec.at(k, t).norm_sqr();
        }
        for (m, e) in fb.apply(&power).into_iter().enumerate() {
            out[m * t_len + t] = e.max(cfg.log_floor).ln();
        }
    }
    Ok(MelSpectrogram {
        values: Tensor::from_f64(vec![cfg.n_mels, t_len], &out)?,
        frame_rate: w.sample_rate() as f64 / cfg.hop as f64,
        log_floor: cfg.log_floor,
    })
}

/// Right-pads with spectral silence `ln(log_floor)` to exactly `target_t` frames.
pub fn pad_mel(m: &MelSpectrogram, target_t: usize) -> Result<MelSpectrogram> {
    let silence = m.log_floor.ln() as f32;
    Ok(MelSpectrogram {
        values: pad_columns(&m.values, target_t, silence)?,
        frame_rate: m.frame_rate,
        log_floor: m.log_floor,
    })
}

/// Right-pads a `[rows, T]` tensor with `value` to `[rows, target_t]`.
pub fn pad_columns(values: &Tensor, target_t: usize, value: f32) -> Result<Tensor> {
    let (rows, t) = values.dims2()?;
    if t > target_t {
        return Err(Error::Length(format!(
            "{t} frames exceed target {target_t}; truncate explicitly"
        )));
    }
    let mut data = Vec::with_capacity(rows * target_t);
    for r in 0..rows {
        data.extend_from_slice(&values.data()[r * t..(r + 1) * t]);
        data.extend(std::iter::repeat_n(value, target_t - t));
    }
    Tensor::new(vec![rows, target_t], data)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::audio::{synth_signal, SynthSpec};
    use std::f64::consts::PI;

    fn tone(freq: f64, secs: f64, amp: f32) -> Waveform {
        let sr = 22050.0;
        let n = (secs * sr) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / sr).sin() as f32)
            .collect();
        Waveform::new(s, 22050).unwrap()
    }

    #[test]
    fn mel_scale_points() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert!((hz_to_mel(700.0).unwrap() - 781.17).abs() < 0.01);
        let f = 1234.5;
        assert!((mel_to_hz(hz_to_mel(f).unwrap()) - f).abs() / f < 1e-6);
        assert!(hz_to_mel(-1.0).is_err());
    }

    #[test]
    fn zero_signal() {
        let w = Waveform::new(vec![0.0; 22050], 22050).unwrap();
        let cfg = MelConfig::default();
        let spec = stft(&w, &cfg).unwrap();
        assert!(spec.values.iter().all(|c| c.norm() == 0.0));
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(mel.values.shape(), &[80, 83]);
        let floor = (1e-5f64).ln() as f32;
        assert!(mel.values.data().iter().all(|&v| v == floor));
        assert!((floor + 11.5129).abs() < 1e-4);
    }

    #[test]
    fn short_signal_rejected() {
        let w = Waveform::new(vec![0.0; 1000], 22050).unwrap();
        assert!(stft(&w, &MelConfig::default()).is_err());
    }

    /// Direct DFT of one windowed frame, independent of the FFT path.
    fn dft_frame(x: &[f64], n_fft: usize) -> Vec<Complex64> {
        (0..n_fft)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(n, &v)| {
                        let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                        Complex64::new(v * ang.cos(), v * ang.sin())
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn bin_centre_sine_peaks_at_its_bin_and_matches_dft() {
        let cfg = MelConfig::default();
        let k0 = 40;
        let freq = k0 as f64 * 22050.0 / cfg.n_fft as f64;
        let w = tone(freq, 0.5, 0.5);
        let spec = stft(&w, &cfg).unwrap();
        for t in 1..spec.n_frames - 1 {
            let mags: Vec<f64> = (0..spec.n_bins).map(|k| spec.at(k, t).norm()).collect();
            let arg = (0..mags.len())
                .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
                .unwrap();
            assert_eq!(arg, k0, "frame {t}");
        }
        let t = 3;
        let win = hann_f64(cfg.win_length).unwrap();
        let mut frame = vec![0.0; cfg.n_fft];
        for i in 0..cfg.win_length {
            frame[i] = w.samples()[t * cfg.hop + i] as f64 * win[i];
        }
        let oracle = dft_frame(&frame, cfg.n_fft);
        for k in 0..spec.n_bins {
            assert!((oracle[k] - spec.at(k, t)).norm() < 1e-9);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let spec = SynthSpec {
            kind: crate::audio::SynthKind::Mixture,
            frequencies: vec![210.0, 1700.0, 5100.0],
            amplitudes: vec![],
            duration: 0.3,
            seed: 3,
        };
        let w = synth_signal(&spec, 22050).unwrap();
        let cfg = MelConfig::default();
        let st = stft(&w, &cfg).unwrap();
        let win = hann_f64(cfg.win_length).unwrap();
        let half = cfg.n_fft / 2;
        for t in 0..st.n_frames {
            let time_energy: f64 = (0..cfg.win_length)
                .map(|i| (w.samples()[t * cfg.hop + i] as f64 * win[i]).powi(2))
                .sum();
            let mut full = st.at(0, t).norm_sqr() + st.at(half, t).norm_sqr();
            for k in 1..half {
                full += 2.0 * st.at(k, t).norm_sqr();
            }
            let freq_energy = full / cfg.n_fft as f64;
            assert!((time_energy - freq_energy).abs() <= 1e-4 * time_energy.max(1e-12));
        }
    }

    #[test]
    fn one_second_frame_count() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.n_frames(22050), Some(83));
    }

    #[test]
    fn thousand_hz_lands_in_nearest_band() {
        let cfg = MelConfig::default();
        let fb = MelFilterbank::new(&cfg, 22050).unwrap();
        let mel = mel_spectrogram(&tone(1000.0, 1.0, 0.8), &cfg).unwrap();
        let t = mel.n_frames();
        let avg: Vec<f64> = (0..cfg.n_mels)
            .map(|m| (0..t).map(|j| mel.values.get2(m, j) as f64).sum::<f64>() / t as f64)
            .collect();
        let arg = (0..avg.len())
            .max_by(|&a, &b| avg[a].total_cmp(&avg[b]))
            .unwrap();
        let nearest = (0..fb.centers_hz.len())
            .min_by(|&a, &b| {
                (fb.centers_hz[a] - 1000.0)
                    .abs()
                    .total_cmp(&(fb.centers_hz[b] - 1000.0).abs())
            })
            .unwrap();
        assert_eq!(arg, nearest);
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let cfg = MelConfig::default();
        let a = mel_spectrogram(&tone(523.0, 0.4, 0.3), &cfg).unwrap();
        let b = mel_spectrogram(&tone(523.0, 0.4, 0.6), &cfg).unwrap();
        let floor = cfg.silence();
        let mut checked = 0;
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            if *x > floor + 1.0 {
                assert!(((y - x) as f64 - 4f64.ln()).abs() < 1e-5);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn filterbank_rows() {
        for n_mels in [80, 100, 128] {
            let cfg = MelConfig {
                n_mels,
                ..MelConfig::default()
            };
            let fb = MelFilterbank::new(&cfg, 22050).unwrap();
            let ones = vec![1.0; fb.n_bins];
            let applied = fb.apply(&ones);
            for m in 0..n_mels {
                let row = fb.row(m);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!(row.iter().any(|&v| v > 0.0));
                assert!((applied[m] - row.iter().sum::<f64>()).abs() < 1e-12);
                // unimodal: nondecreasing up to the max, nonincreasing after
                let peak = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .unwrap();
                assert!(row[..=peak].windows(2).all(|w| w[0] <= w[1]));
                assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = MelConfig {
            n_mels: 64,
            ..MelConfig::default()
        };
        assert!(bad.validate(22050).is_err());
        let bad = MelConfig {
            f_max: 12000.0,
            ..MelConfig::default()
        };
        assert!(bad.validate(22050).is_err());
        let bad = MelConfig {
            hop: 2048,
            ..MelConfig::default()
        };
        assert!(bad.validate(22050).is_err());
    }

    #[test]
    fn padding() {
        let cfg = MelConfig::default();
        let w = tone(300.0, 1.0, 0.5);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(pad_mel(&m, 83).unwrap(), m);
        let p = pad_mel(&m, 100).unwrap();
        assert_eq!(p.values.shape(), &[80, 100]);
        let floor = (1e-5f64).ln() as f32;
        for r in 0..80 {
            for c in 0..83 {
                assert_eq!(p.values.get2(r, c), m.values.get2(r, c));
            }
            for c in 83..100 {
                assert_eq!(p.values.get2(r, c), floor);
            }
        }
        assert!(matches!(pad_mel(&m, 82), Err(Error::Length(_))));
    }
}
