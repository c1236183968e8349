//! Wavelet and baseline losses, Adam, and the training loop.
//!
//! Each step simulates the decoder output as ground-truth Mel plus seeded
//! Gaussian noise, runs it through the shared trunk, then feeds the trunk
//! output to both Post-Net and CWT-Net:
//!
//! ```text
//! loss_wavelet  = mean((cwtnet(trunk) - target)^2)
//! loss_baseline = mean((trunk - mel)^2) + mean((postnet(trunk) - mel)^2)
//! loss_total    = loss_baseline + loss_wavelet
//! ```
//!
//! Gradients from both branches meet in the trunk.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lowrank::Basis;
use crate::nets::{Mat, Model, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// Utterances per step; 0 means the whole corpus.
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub aux_enabled: bool,
    /// Multiplier on the wavelet term. 1.0 is the plain sum.
    pub aux_weight: f64,
    /// Start the trunk and the last Post-Net layer at zero (identity residuals).
    pub zero_init_residual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 200,
            batch_size: 0,
            noise_sigma: 0.1,
            seed: 7,
            aux_enabled: true,
            aux_weight: 1.0,
            zero_init_residual: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::param(format!("lr {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps must be > 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::param("noise_sigma must be >= 0"));
        }
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return Err(Error::param("aux_weight must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub loss_baseline: f64,
    pub loss_wavelet: f64,
    pub loss_total: f64,
}

impl LossReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e}",
            self.step, self.loss_baseline, self.loss_wavelet, self.loss_total
        )
    }
}

pub const TRACE_HEADER: &str = "step,loss_baseline,loss_wavelet,loss_total";

pub fn trace_csv(reports: &[LossReport]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn write_trace(path: impl AsRef<Path>, reports: &[LossReport]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace_csv(reports)).map_err(|e| Error::io(path, e))
}

fn check_same(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::param(format!(
            "{what}: shape [{}, {}] vs [{}, {}]",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Mean squared error over all `n` cells and its gradient `2 (pred - target) / n`.
pub fn mse(pred: &Mat, target: &Mat) -> Result<(f64, Mat)> {
    check_same(pred, target, "mse")?;
    let n = pred.data.len() as f64;
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    let mut sum = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Mean of squared differences over the compressed wavelet spectrogram.
pub fn wavelet_loss(pred: &Mat, target: &Mat) -> Result<(f64, Mat)> {
    mse(pred, target)
}

pub struct BaselineLoss {
    pub value: f64,
    pub grad_post: Mat,
    pub grad_trunk: Mat,
}

/// MSE before Post-Net plus MSE after it, both against the ground-truth Mel.
pub fn baseline_loss(mel_post: &Mat, mel_trunk: &Mat, mel_gt: &Mat) -> Result<BaselineLoss> {
    let (post, grad_post) = mse(mel_post, mel_gt)?;
    let (pre, grad_trunk) = mse(mel_trunk, mel_gt)?;
    Ok(BaselineLoss {
        value: pre + post,
        grad_post,
        grad_trunk,
    })
}

pub fn total_loss(baseline: f64, wavelet: f64) -> Result<f64> {
    if !baseline.is_finite() || !wavelet.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss (baseline {baseline}, wavelet {wavelet})"
        )));
    }
    Ok(baseline + wavelet)
}

/// First and second moments per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t, _)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update using the gradients held in `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::param("optimizer state does not match parameters"));
    }
    if let Some((name, _, _)) = params
        .iter()
        .find(|(_, _, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Divergence(format!("non-finite gradient in {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((_, value, grad), m), v) in params
        .iter_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((p, &g), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let update = cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    Ok(())
}

/// One utterance, padded so Mel, target and scalogram share `T`.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    /// `[n_mels, T]` log-Mel.
    pub mel: Tensor,
    /// `[k, T]` compressed scalogram coefficients.
    pub target: Tensor,
    /// `[n_scales, T]` full scalogram.
    pub scalogram: Tensor,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Rejects inconsistent dimensions before any training happens.
    pub fn validate(&self, model: &Model) -> Result<()> {
        let first = self
            .utterances
            .first()
            .ok_or_else(|| Error::Validation("empty corpus".into()))?;
        let t_len = first.mel.dims2()?.1;
        for u in &self.utterances {
            let (mr, mt) = u.mel.dims2()?;
            let (kr, kt) = u.target.dims2()?;
            let (_, st) = u.scalogram.dims2()?;
            if mr != model.n_mels {
                return Err(Error::Validation(format!(
                    "{}: mel has {mr} bands, model expects {}",
                    u.id, model.n_mels
                )));
            }
            if kr != model.k {
                return Err(Error::Validation(format!(
                    "{}: target rank {kr}, model expects {}",
                    u.id, model.k
                )));
            }
            if mt != t_len || kt != t_len || st != t_len {
                return Err(Error::Validation(format!(
                    "{}: frame counts mel {mt}, target {kt}, scalogram {st}, expected {t_len}",
                    u.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Stand-in decoder output for `step`: Mel plus `sigma` times Gaussian noise.
/// Noise for a step depends only on `(seed, step)` and the utterance order.
fn decoder_outputs(corpus: &Corpus, idx: &[usize], sigma: f64, seed: u64, step: usize) -> Result<Vec<Mat>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    idx.iter()
        .map(|&i| {
            let mut m = Mat::from_tensor(&corpus.utterances[i].mel)?;
            if sigma > 0.0 {
                for v in &mut m.data {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * n;
                }
            }
            Ok(m)
        })
        .collect()
}

fn batch_indices(corpus: &Corpus, cfg: &TrainConfig, step: usize) -> Vec<usize> {
    let n = corpus.len();
    if cfg.batch_size == 0 || cfg.batch_size >= n {
        return (0..n).collect();
    }
    // deterministic round-robin over the corpus
    let start = (step * cfg.batch_size) % n;
    (0..cfg.batch_size).map(|j| (start + j) % n).collect()
}

/// Forward pass for `step` (and backward when `backprop`), with gradients
/// accumulated into `store` averaged over the batch.
pub fn step_losses(
    model: &Model,
    store: &mut ParamStore,
    corpus: &Corpus,
    cfg: &TrainConfig,
    step: usize,
    backprop: bool,
) -> Result<LossReport> {
    let idx = batch_indices(corpus, cfg, step);
    let inputs = decoder_outputs(corpus, &idx, cfg.noise_sigma, cfg.seed, step)?;
    let scale = 1.0 / idx.len() as f64;
    if backprop {
        store.zero_grads();
    }
    let (mut lb_sum, mut lw_sum) = (0.0, 0.0);
    for (&i, input) in idx.iter().zip(&inputs) {
        let utt = &corpus.utterances[i];
        let gt = Mat::from_tensor(&utt.mel)?;
        let (trunk_out, trunk_tape) = model.trunk.forward(store, input)?;
        let (post_out, post_tape) = model.postnet.forward(store, &trunk_out)?;
        let base = baseline_loss(&post_out, &trunk_out, &gt)?;
        lb_sum += base.value;
        let mut grad_trunk = base.grad_trunk;
        let mut wavelet_grad = None;
        let mut wavelet_tape = None;
        if cfg.aux_enabled {
            let target = Mat::from_tensor(&utt.target)?;
            let (pred, tape) = model.cwtnet.forward(store, &trunk_out)?;
            let (lw, g) = wavelet_loss(&pred, &target)?;
            lw_sum += cfg.aux_weight * lw;
            wavelet_grad = Some(g);
            wavelet_tape = Some(tape);
        }
        if backprop {
            let mut g_post = base.grad_post;
            g_post.data.iter_mut().for_each(|v| *v *= scale);
            let from_post = model.postnet.backward(store, &post_tape, &g_post)?;
            for (a, b) in grad_trunk.data.iter_mut().zip(&from_post.data) {
                *a = *a * scale + b;
            }
            if let (Some(mut g), Some(tape)) = (wavelet_grad, wavelet_tape) {
                let w = scale * cfg.aux_weight;
                g.data.iter_mut().for_each(|v| *v *= w);
                let from_cwt = model.cwtnet.backward(store, &tape, &g)?;
                for (a, b) in grad_trunk.data.iter_mut().zip(&from_cwt.data) {
                    *a += b;
                }
            }
            model.trunk.backward(store, &trunk_tape, &grad_trunk)?;
        }
    }
    let loss_baseline = lb_sum * scale;
    let loss_wavelet = lw_sum * scale;
    Ok(LossReport {
        step,
        loss_baseline,
        loss_wavelet,
        loss_total: total_loss(loss_baseline, loss_wavelet)?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub params: ParamStore,
    pub adam: AdamState,
}

/// Initial parameters for a run: seeded init, optionally with identity residuals.
pub fn initial_params(model: &Model, cfg: &TrainConfig) -> Result<ParamStore> {
    let mut store = model.init_params(cfg.seed);
    if cfg.zero_init_residual {
        model.zero_residual_branches(&mut store)?;
    }
    Ok(store)
}

/// Runs `cfg.steps` Adam updates. The trace has `steps + 1` rows: row `s`
/// holds the losses after `s` updates, so the last row describes the
/// returned parameters.
pub fn train_loop(
    model: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_report: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    corpus.validate(model)?;
    let mut params = initial_params(model, cfg)?;
    let mut adam = AdamState::new(&params);
    let mut reports = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let training = step < cfg.steps;
        let report = step_losses(model, &mut params, corpus, cfg, step, training)?;
        on_report(&report);
        reports.push(report);
        if training {
            adam_step(&mut params, &mut adam, cfg)?;
        }
    }
    Ok(TrainOutcome {
        reports,
        params,
        adam,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Post-Net output against ground-truth Mel.
    pub mel_mse: f64,
    /// CWT-Net coefficients against the compressed target.
    pub wavelet_mse: f64,
    /// Scalogram rebuilt from CWT-Net applied to the Post-Net output, against
    /// the full target scalogram.
    pub scalogram_mse: f64,
}

impl EvalReport {
    pub fn lines(&self) -> String {
        format!(
            "mel_mse={:.8e}\nwavelet_mse={:.8e}\nscalogram_mse={:.8e}\n",
            self.mel_mse, self.wavelet_mse, self.scalogram_mse
        )
    }
}

/// Forward-only metrics using the decoder noise drawn for `step`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    corpus: &Corpus,
    basis: &Basis,
    cfg: &TrainConfig,
    step: usize,
) -> Result<EvalReport> {
    corpus.validate(model)?;
    model.validate(store)?;
    if basis.k() != model.k {
        return Err(Error::Validation(format!(
            "basis rank {} vs model rank {}",
            basis.k(),
            model.k
        )));
    }
    let u = Mat::from_tensor(&basis.u)?;
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let inputs = decoder_outputs(corpus, &idx, cfg.noise_sigma, cfg.seed, step)?;
    let (mut mel, mut wav, mut scal) = (0.0, 0.0, 0.0);
    for (utt, input) in corpus.utterances.iter().zip(&inputs) {
        let gt = Mat::from_tensor(&utt.mel)?;
        let (trunk_out, _) = model.trunk.forward(store, input)?;
        let (post_out, _) = model.postnet.forward(store, &trunk_out)?;
        mel += mse(&post_out, &gt)?.0;
        let (pred, _) = model.cwtnet.forward(store, &trunk_out)?;
        wav += mse(&pred, &Mat::from_tensor(&utt.target)?)?.0;
        let (from_post, _) = model.cwtnet.forward(store, &post_out)?;
        let rebuilt = matmul(&u, &from_post);
        scal += mse(&rebuilt, &Mat::from_tensor(&utt.scalogram)?)?.0;
    }
    let n = corpus.len() as f64;
    Ok(EvalReport {
        mel_mse: mel / n,
        wavelet_mse: wav / n,
        scalogram_mse: scal / n,
    })
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for r in 0..a.cols {
            let w = a.at(i, r);
            let src = &b.data[r * b.cols..(r + 1) * b.cols];
            for (d, s) in out.data[i * b.cols..(i + 1) * b.cols].iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}
