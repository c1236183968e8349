//! Morlet continuous wavelet transform.
//!
//! For a sampled signal `f[t]`, scale `a` (in samples) and shift `b`:
//!
//! ```text
//! W(a, b) = c(a) * sum_t f[t] * exp(-i w0 (t - b) / a) * exp(-(t - b)^2 / (2 a^2))
//! ```
//!
//! with `c(a) = a^(-1/2)` when amplitude normalization is on and `1` otherwise.
//! Since `conj(psi(u)) = psi(-u)` this is the convolution of `f` with the
//! sampled kernel `psi(n / a)`, which is what the FFT path computes.
//! Both paths treat samples outside the signal as zero.

use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::melspec::MelConfig;
use crate::tensor::Tensor;

/// Kernel half-width in standard deviations of the Gaussian envelope.
pub const SUPPORT_SIGMAS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CwtConfig {
    pub omega0: f64,
    pub n_scales: usize,
    pub f_lo: f64,
    /// Highest pseudo-frequency; `None` means Nyquist.
    pub f_hi: Option<f64>,
    pub normalize: bool,
}

impl Default for CwtConfig {
    fn default() -> Self {
        Self {
            omega0: 6.0,
            n_scales: 64,
            f_lo: 20.0,
            f_hi: None,
            normalize: true,
        }
    }
}

impl CwtConfig {
    pub fn f_hi_for(&self, sample_rate: u32) -> f64 {
        self.f_hi.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(self.omega0 >= 5.0) {
            return Err(Error::param(format!("omega0 {} < 5", self.omega0)));
        }
        if self.n_scales < 2 {
            return Err(Error::param("need at least 2 scales"));
        }
        let f_hi = self.f_hi_for(sample_rate);
        if !(self.f_lo > 0.0 && self.f_lo < f_hi && f_hi <= sample_rate as f64 / 2.0) {
            return Err(Error::param(format!(
                "need 0 < f_lo < f_hi <= Nyquist, got {}..{f_hi}",
                self.f_lo
            )));
        }
        Ok(())
    }
}

/// Geometric scale grid, ordered by descending pseudo-frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    pub scales: Vec<f64>,
    pub pseudo_freqs: Vec<f64>,
    pub sample_rate: u32,
    pub omega0: f64,
}

impl ScaleGrid {
    pub fn new(cfg: &CwtConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let sr = sample_rate as f64;
        let f_hi = cfg.f_hi_for(sample_rate);
        let last = (cfg.n_scales - 1) as f64;
        let pseudo_freqs: Vec<f64> = (0..cfg.n_scales)
            .map(|j| f_hi * (cfg.f_lo / f_hi).powf(j as f64 / last))
            .collect();
        let scales = pseudo_freqs
            .iter()
            .map(|&f| cfg.omega0 * sr / (2.0 * PI * f))
            .collect();
        Ok(Self {
            scales,
            pseudo_freqs,
            sample_rate,
            omega0: cfg.omega0,
        })
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Ratio between neighbouring scales.
    pub fn step_ratio(&self) -> f64 {
        self.scales[1] / self.scales[0]
    }

    pub fn pseudo_freq_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(vec![self.len()], &self.pseudo_freqs)
    }
}

/// Mother wavelet `psi(t) = exp(i w0 t) exp(-t^2 / 2)`.
pub fn morlet(t: f64, omega0: f64) -> Complex64 {
    Complex64::from_polar((-0.5 * t * t).exp(), omega0 * t)
}

pub fn default_support(scale: f64) -> usize {
    (SUPPORT_SIGMAS * scale).ceil() as usize
}

/// Samples `c(scale) * psi(n / scale)` for `n` in `[-support, support]`.
pub fn morlet_kernel(
    scale: f64,
    support: usize,
    omega0: f64,
    normalize: bool,
) -> Result<Vec<Complex64>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::param(format!("scale {scale} must be positive")));
    }
    let gain = if normalize { scale.powf(-0.5) } else { 1.0 };
    let s = support as i64;
    Ok((-s..=s)
        .map(|n| morlet(n as f64 / scale, omega0) * gain)
        .collect())
}

/// Complex CWT coefficients, row-major `[n_scales, n_samples]`.
#[derive(Debug, Clone)]
pub struct CwtField {
    pub n_scales: usize,
    pub n_samples: usize,
    pub values: Vec<Complex64>,
}

impl CwtField {
    pub fn at(&self, scale: usize, sample: usize) -> Complex64 {
        self.values[scale * self.n_samples + sample]
    }

    pub fn row(&self, scale: usize) -> &[Complex64] {
        &self.values[scale * self.n_samples..(scale + 1) * self.n_samples]
    }
}

fn signal_f64(w: &Waveform) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::param("empty signal"));
    }
    Ok(w.samples().iter().map(|&s| s as f64).collect())
}

/// Brute-force Riemann sum over every sample for every shift. `O(N^2)` per scale.
pub fn cwt_direct(w: &Waveform, grid: &ScaleGrid, cfg: &CwtConfig) -> Result<CwtField> {
    let f = signal_f64(w)?;
    let n = f.len();
    let mut values = Vec::with_capacity(grid.len() * n);
    // integrand weight depends on d = t - b only; tabulate for d in (-n, n)
    let mut table = vec![Complex64::new(0.0, 0.0); 2 * n - 1];
    for &a in &grid.scales {
        let gain = if cfg.normalize { a.powf(-0.5) } else { 1.0 };
        for (idx, slot) in table.iter_mut().enumerate() {
            let d = idx as f64 - (n - 1) as f64;
            let u = d / a;
            *slot = Complex64::from_polar((-0.5 * u * u).exp(), -cfg.omega0 * u) * gain;
        }
        for b in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            let offset = n - 1 - b;
            for (t, &ft) in f.iter().enumerate() {
                acc += table[t + offset] * ft;
            }
            values.push(acc);
        }
    }
    Ok(CwtField {
        n_scales: grid.len(),
        n_samples: n,
        values,
    })
}

/// Per-scale linear convolution through zero-padded FFTs.
pub fn cwt_fft(w: &Waveform, grid: &ScaleGrid, cfg: &CwtConfig) -> Result<CwtField> {
    let f = signal_f64(w)?;
    let n = f.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut signal_spectra: HashMap<usize, Vec<Complex64>> = HashMap::new();
    let mut values = Vec::with_capacity(grid.len() * n);
    for &a in &grid.scales {
        let support = default_support(a);
        let kernel = morlet_kernel(a, support, cfg.omega0, cfg.normalize)?;
        let size = (n + kernel.len() - 1).next_power_of_two();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let sig = signal_spectra.entry(size).or_insert_with(|| {
            let mut buf = vec![Complex64::new(0.0, 0.0); size];
            for (b, &v) in buf.iter_mut().zip(&f) {
                b.re = v;
            }
            fwd.process(&mut buf);
            buf
        });
        let mut buf = vec![Complex64::new(0.0, 0.0); size];
        buf[..kernel.len()].copy_from_slice(&kernel);
        fwd.process(&mut buf);
        for (k, s) in buf.iter_mut().zip(sig.iter()) {
            *k *= s;
        }
        inv.process(&mut buf);
        let scale = 1.0 / size as f64;
        values.extend(buf[support..support + n].iter().map(|c| c * scale));
    }
    Ok(CwtField {
        n_scales: grid.len(),
        n_samples: n,
        values,
    })
}

/// Log-compressed magnitudes `ln(1 + |W|)` at Mel frame centres.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalogram {
    pub values: Tensor,
    pub grid: ScaleGrid,
}

impl Scalogram {
    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Frame `t` samples the field at `t * hop + win_length / 2`, clamped to the
/// last sample.
pub fn scalogram_at_frames(field: &CwtField, grid: &ScaleGrid, mel: &MelConfig) -> Result<Scalogram> {
    if field.n_scales != grid.len() {
        return Err(Error::param(format!(
            "field has {} scales, grid {}",
            field.n_scales,
            grid.len()
        )));
    }
    let t_len = mel.n_frames(field.n_samples).ok_or_else(|| {
        Error::param(format!(
            "signal of {} samples shorter than one window ({})",
            field.n_samples, mel.win_length
        ))
    })?;
    let mut data = Vec::with_capacity(field.n_scales * t_len);
    for j in 0..field.n_scales {
        let row = field.row(j);
        for t in 0..t_len {
            let centre = (t * mel.hop + mel.win_length / 2).min(field.n_samples - 1);
            data.push(row[centre].norm().ln_1p());
        }
    }
    Ok(Scalogram {
        values: Tensor::from_f64(vec![field.n_scales, t_len], &data)?,
        grid: grid.clone(),
    })
}

/// FFT-path scalogram aligned with the Mel frames of the same signal.
pub fn scalogram(w: &Waveform, mel: &MelConfig, cfg: &CwtConfig) -> Result<Scalogram> {
    let grid = ScaleGrid::new(cfg, w.sample_rate())?;
    let field = cwt_fft(w, &grid, cfg)?;
    scalogram_at_frames(&field, &grid, mel)
}
