//! Shared trunk, Post-Net and CWT-Net with explicit backward passes.
//!
//! Activations are `[channels, T]` matrices in `f64`. Parameters live in a
//! [`ParamStore`] as `f32` tensors; gradients accumulate in `f64`.
//! Convolutions are lowered to GEMM via im2col.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const KERNEL: usize = 5;
pub const HIDDEN: usize = 128;
pub const MANIFEST: &str = "manifest.txt";

/// Dense row-major `[rows, cols]` matrix of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Ok(Self {
            rows,
            cols,
            data: t.to_f64(),
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(vec![self.rows, self.cols], &self.data)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = a * b + beta * c` with arbitrary strides on `a` and `b`; `c` is
/// row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches for the
    // row/column-major strides used in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Ordered named parameters with parallel `f64` gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let grad = vec![0.0; value.numel()];
        if let Some(&i) = self.index.get(&name) {
            self.params[i] = Param { name, value, grad };
        } else {
            self.index.insert(name.clone(), self.params.len());
            self.params.push(Param { name, value, grad });
        }
    }

    fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::param(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.slot(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.slot(name)?;
        Ok(&mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.params[self.slot(name)?].grad)
    }

    fn grad_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let i = self.slot(name)?;
        Ok(&mut self.params[i].grad)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// `(name, value, gradient)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &[f64])> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value, p.grad.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Vec<f64>)> {
        self.params
            .iter_mut()
            .map(|p| (p.name.as_str(), &mut p.value, &mut p.grad))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// One `<name>.ftn` per parameter plus a `name dims` manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for p in &self.params {
            write_tensor(dir.join(format!("{}.ftn", p.name)), &p.value)?;
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(manifest, "{} {}", p.name, dims.join("x"));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = ParamStore::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, dims) = line
                .split_once(' ')
                .ok_or_else(|| Error::format("manifest", format!("bad line {line:?}")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format("manifest", format!("bad dims {dims:?}")))?;
            let t = read_tensor(dir.join(format!("{name}.ftn")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    "manifest",
                    format!("{name}: manifest says {shape:?}, file has {:?}", t.shape()),
                ));
            }
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// 1-D cross-correlation with zero same-padding; odd kernel.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: String,
    pub bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

/// Gradients of one convolution call.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub grad_x: Mat,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
}

impl Conv1d {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_ch,
            out_ch,
            kernel,
        }
    }

    fn check(&self, store: &ParamStore, x: &Mat) -> Result<()> {
        if x.rows != self.in_ch {
            return Err(Error::param(format!(
                "{}: expected {} input channels, got {}",
                self.weight, self.in_ch, x.rows
            )));
        }
        let w = store.get(&self.weight)?;
        if w.shape() != [self.out_ch, self.in_ch, self.kernel] {
            return Err(Error::param(format!(
                "{} has shape {:?}",
                self.weight,
                w.shape()
            )));
        }
        Ok(())
    }

    /// `[in_ch * kernel, T]` patch matrix.
    fn im2col(&self, x: &Mat) -> Vec<f64> {
        let t_len = x.cols;
        let pad = self.kernel / 2;
        let mut cols = vec![0.0; self.in_ch * self.kernel * t_len];
        for i in 0..self.in_ch {
            let src = &x.data[i * t_len..(i + 1) * t_len];
            for k in 0..self.kernel {
                let dst = &mut cols[(i * self.kernel + k) * t_len..][..t_len];
                // dst[t] = src[t + k - pad]
                let lo = pad.saturating_sub(k);
                let hi = (t_len + pad).saturating_sub(k).min(t_len);
                if lo < hi {
                    dst[lo..hi].copy_from_slice(&src[lo + k - pad..hi + k - pad]);
                }
            }
        }
        cols
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Result<Mat> {
        self.check(store, x)?;
        let cols = self.im2col(x);
        self.forward_cols(store, &cols, x.cols)
    }

    fn forward_cols(&self, store: &ParamStore, cols: &[f64], t_len: usize) -> Result<Mat> {
        let w = store.get(&self.weight)?.to_f64();
        let b = store.get(&self.bias)?.data();
        let mut out = Mat::zeros(self.out_ch, t_len);
        for (o, &bv) in b.iter().enumerate() {
            out.data[o * t_len..(o + 1) * t_len].fill(bv as f64);
        }
        let ik = self.in_ch * self.kernel;
        gemm(
            self.out_ch,
            ik,
            t_len,
            &w,
            (ik as isize, 1),
            cols,
            (t_len as isize, 1),
            1.0,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn backward(&self, store: &ParamStore, x: &Mat, grad_out: &Mat) -> Result<ConvGrads> {
        self.check(store, x)?;
        let cols = self.im2col(x);
        self.backward_cols(store, &cols, x.cols, grad_out)
    }

    fn backward_cols(
        &self,
        store: &ParamStore,
        cols: &[f64],
        t_len: usize,
        grad_out: &Mat,
    ) -> Result<ConvGrads> {
        if grad_out.rows != self.out_ch || grad_out.cols != t_len {
            return Err(Error::param(format!(
                "{}: grad shape [{}, {}] != [{}, {t_len}]",
                self.weight, grad_out.rows, grad_out.cols, self.out_ch
            )));
        }
        let w = store.get(&self.weight)?.to_f64();
        let ik = self.in_ch * self.kernel;
        let g = &grad_out.data;
        let grad_b = (0..self.out_ch)
            .map(|o| g[o * t_len..(o + 1) * t_len].iter().sum())
            .collect();
        // dW = G cols^T
        let mut grad_w = vec![0.0; self.out_ch * ik];
        gemm(
            self.out_ch,
            t_len,
            ik,
            g,
            (t_len as isize, 1),
            cols,
            (1, t_len as isize),
            0.0,
            &mut grad_w,
        );
        // dcols = W^T G
        let mut dcols = vec![0.0; ik * t_len];
        gemm(
            ik,
            self.out_ch,
            t_len,
            &w,
            (1, ik as isize),
            g,
            (t_len as isize, 1),
            0.0,
            &mut dcols,
        );
        let pad = self.kernel / 2;
        let mut grad_x = Mat::zeros(self.in_ch, t_len);
        for i in 0..self.in_ch {
            let dst = &mut grad_x.data[i * t_len..(i + 1) * t_len];
            for k in 0..self.kernel {
                let src = &dcols[(i * self.kernel + k) * t_len..][..t_len];
                let lo = pad.saturating_sub(k);
                let hi = (t_len + pad).saturating_sub(k).min(t_len);
                for t in lo..hi {
                    dst[t + k - pad] += src[t];
                }
            }
        }
        Ok(ConvGrads {
            grad_x,
            grad_w,
            grad_b,
        })
    }
}

/// Time-distributed affine map `W x + b` applied to every frame.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Result<Mat> {
        if x.rows != self.in_dim {
            return Err(Error::param(format!(
                "{}: expected {} inputs, got {}",
                self.weight, self.in_dim, x.rows
            )));
        }
        let w = store.get(&self.weight)?.to_f64();
        let b = store.get(&self.bias)?.data();
        let t_len = x.cols;
        let mut out = Mat::zeros(self.out_dim, t_len);
        for (o, &bv) in b.iter().enumerate() {
            out.data[o * t_len..(o + 1) * t_len].fill(bv as f64);
        }
        gemm(
            self.out_dim,
            self.in_dim,
            t_len,
            &w,
            (self.in_dim as isize, 1),
            &x.data,
            (t_len as isize, 1),
            1.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// Returns `(grad_x, grad_w, grad_b)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Mat,
        grad_out: &Mat,
    ) -> Result<(Mat, Vec<f64>, Vec<f64>)> {
        let w = store.get(&self.weight)?.to_f64();
        let t_len = x.cols;
        if grad_out.rows != self.out_dim || grad_out.cols != t_len {
            return Err(Error::param(format!("{}: gradient shape mismatch", self.weight)));
        }
        let g = &grad_out.data;
        let grad_b = (0..self.out_dim)
            .map(|o| g[o * t_len..(o + 1) * t_len].iter().sum())
            .collect();
        let mut grad_w = vec![0.0; self.out_dim * self.in_dim];
        gemm(
            self.out_dim,
            t_len,
            self.in_dim,
            g,
            (t_len as isize, 1),
            &x.data,
            (1, t_len as isize),
            0.0,
            &mut grad_w,
        );
        let mut grad_x = Mat::zeros(self.in_dim, t_len);
        gemm(
            self.in_dim,
            self.out_dim,
            t_len,
            &w,
            (1, self.in_dim as isize),
            g,
            (t_len as isize, 1),
            0.0,
            &mut grad_x.data,
        );
        Ok((grad_x, grad_w, grad_b))
    }
}

/// Per-frame normalization across channels followed by a per-channel affine.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gain: String,
    pub shift: String,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    /// Normalized input before the affine.
    pub xhat: Mat,
    /// `1 / sqrt(var + eps)` per frame.
    pub inv_std: Vec<f64>,
}

impl ChannelNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gain: format!("{prefix}.gain"),
            shift: format!("{prefix}.shift"),
            channels,
        }
    }

    pub fn normalize(&self, x: &Mat) -> Result<NormCache> {
        if x.rows != self.channels {
            return Err(Error::param(format!(
                "{}: expected {} channels, got {}",
                self.gain, self.channels, x.rows
            )));
        }
        let (c, t_len) = (x.rows, x.cols);
        let mut xhat = Mat::zeros(c, t_len);
        let mut inv_std = vec![0.0; t_len];
        for (t, inv_t) in inv_std.iter_mut().enumerate() {
            let mean = (0..c).map(|i| x.data[i * t_len + t]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|i| (x.data[i * t_len + t] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            *inv_t = inv;
            for i in 0..c {
                xhat.data[i * t_len + t] = (x.data[i * t_len + t] - mean) * inv;
            }
        }
        Ok(NormCache { xhat, inv_std })
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Result<(Mat, NormCache)> {
        let cache = self.normalize(x)?;
        let g = store.get(&self.gain)?.data();
        let b = store.get(&self.shift)?.data();
        let t_len = x.cols;
        let mut out = cache.xhat.clone();
        for i in 0..self.channels {
            let (gi, bi) = (g[i] as f64, b[i] as f64);
            out.data[i * t_len..(i + 1) * t_len]
                .iter_mut()
                .for_each(|v| *v = gi * *v + bi);
        }
        Ok((out, cache))
    }

    /// Returns `(grad_x, grad_gain, grad_shift)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &NormCache,
        grad_out: &Mat,
    ) -> Result<(Mat, Vec<f64>, Vec<f64>)> {
        let g = store.get(&self.gain)?.data();
        let (c, t_len) = (grad_out.rows, grad_out.cols);
        let xh = &cache.xhat.data;
        let dy = &grad_out.data;
        let mut grad_gain = vec![0.0; c];
        let mut grad_shift = vec![0.0; c];
        for i in 0..c {
            for t in 0..t_len {
                grad_gain[i] += dy[i * t_len + t] * xh[i * t_len + t];
                grad_shift[i] += dy[i * t_len + t];
            }
        }
        let mut grad_x = Mat::zeros(c, t_len);
        for t in 0..t_len {
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for i in 0..c {
                let d = dy[i * t_len + t] * g[i] as f64;
                mean_d += d;
                mean_dx += d * xh[i * t_len + t];
            }
            mean_d /= c as f64;
            mean_dx /= c as f64;
            for i in 0..c {
                let d = dy[i * t_len + t] * g[i] as f64;
                grad_x.data[i * t_len + t] =
                    cache.inv_std[t] * (d - mean_d - xh[i * t_len + t] * mean_dx);
            }
        }
        Ok((grad_x, grad_gain, grad_shift))
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv1d),
    Linear(Linear),
    Norm(ChannelNorm),
    Relu,
    Tanh,
}

/// Per-layer state kept for the backward pass.
#[derive(Debug, Clone)]
enum Cache {
    Conv { cols: Vec<f64>, t_len: usize },
    Linear { x: Mat },
    Norm(NormCache),
    Relu { x: Mat },
    Tanh { y: Mat },
}

/// Recorded forward pass of a [`Stack`].
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
}

/// Layers applied in order.
#[derive(Debug, Clone)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Result<(Mat, Tape)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) => {
                    c.check(store, &h)?;
                    let cols = c.im2col(&h);
                    let y = c.forward_cols(store, &cols, h.cols)?;
                    (y, Cache::Conv { cols, t_len: h.cols })
                }
                Layer::Linear(l) => (l.forward(store, &h)?, Cache::Linear { x: h }),
                Layer::Norm(n) => {
                    let (y, c) = n.forward(store, &h)?;
                    (y, Cache::Norm(c))
                }
                Layer::Relu => {
                    let mut y = h.clone();
                    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    (y, Cache::Relu { x: h })
                }
                Layer::Tanh => {
                    let mut y = h;
                    y.data.iter_mut().for_each(|v| *v = v.tanh());
                    (y.clone(), Cache::Tanh { y })
                }
            };
            caches.push(cache);
            h = next;
        }
        Ok((h, Tape { caches }))
    }

    /// Accumulates parameter gradients into `store` and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, tape: &Tape, grad_out: &Mat) -> Result<Mat> {
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            g = match (layer, cache) {
                (Layer::Conv(c), Cache::Conv { cols, t_len }) => {
                    let grads = c.backward_cols(store, cols, *t_len, &g)?;
                    accumulate(store, &c.weight, &grads.grad_w)?;
                    accumulate(store, &c.bias, &grads.grad_b)?;
                    grads.grad_x
                }
                (Layer::Linear(l), Cache::Linear { x }) => {
                    let (gx, gw, gb) = l.backward(store, x, &g)?;
                    accumulate(store, &l.weight, &gw)?;
                    accumulate(store, &l.bias, &gb)?;
                    gx
                }
                (Layer::Norm(n), Cache::Norm(c)) => {
                    let (gx, gg, gs) = n.backward(store, c, &g)?;
                    accumulate(store, &n.gain, &gg)?;
                    accumulate(store, &n.shift, &gs)?;
                    gx
                }
                (Layer::Relu, Cache::Relu { x }) => {
                    for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                (Layer::Tanh, Cache::Tanh { y }) => {
                    for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
                        *gv *= 1.0 - yv * yv;
                    }
                    g
                }
                _ => unreachable!("tape does not match stack"),
            };
        }
        Ok(g)
    }

    /// Parameter shapes and init bounds: `(name, shape, bound)`.
    fn param_specs(&self) -> Vec<(String, Vec<usize>, Option<f64>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    let s = (1.0 / (c.in_ch * c.kernel) as f64).sqrt();
                    out.push((c.weight.clone(), vec![c.out_ch, c.in_ch, c.kernel], Some(s)));
                    out.push((c.bias.clone(), vec![c.out_ch], Some(s)));
                }
                Layer::Linear(l) => {
                    let s = (1.0 / l.in_dim as f64).sqrt();
                    out.push((l.weight.clone(), vec![l.out_dim, l.in_dim], Some(s)));
                    out.push((l.bias.clone(), vec![l.out_dim], Some(s)));
                }
                Layer::Norm(n) => {
                    out.push((n.gain.clone(), vec![n.channels], None));
                    out.push((n.shift.clone(), vec![n.channels], None));
                }
                Layer::Relu | Layer::Tanh => {}
            }
        }
        out
    }
}

fn accumulate(store: &mut ParamStore, name: &str, g: &[f64]) -> Result<()> {
    let dst = store.grad_mut(name)?;
    if dst.len() != g.len() {
        return Err(Error::param(format!("{name}: gradient length mismatch")));
    }
    for (d, v) in dst.iter_mut().zip(g) {
        *d += v;
    }
    Ok(())
}

/// `y = x + tanh(conv(x))`, shape-preserving.
#[derive(Debug, Clone)]
pub struct SharedTrunk {
    pub stack: Stack,
}

impl SharedTrunk {
    pub fn new(n_mels: usize) -> Self {
        Self {
            stack: Stack {
                layers: vec![
                    Layer::Conv(Conv1d::new("trunk.conv", n_mels, n_mels, KERNEL)),
                    Layer::Tanh,
                ],
            },
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Result<(Mat, Tape)> {
        let (mut y, tape) = self.stack.forward(store, x)?;
        y.add_assign(x);
        Ok((y, tape))
    }

    pub fn backward(&self, store: &mut ParamStore, tape: &Tape, grad_out: &Mat) -> Result<Mat> {
        let mut gx = self.stack.backward(store, tape, grad_out)?;
        gx.add_assign(grad_out);
        Ok(gx)
    }

    pub fn output_conv(&self) -> &Conv1d {
        match &self.stack.layers[0] {
            Layer::Conv(c) => c,
            _ => unreachable!(),
        }
    }
}

/// Five convolutions (conv, norm, tanh on the first four) with a residual add.
#[derive(Debug, Clone)]
pub struct PostNet {
    pub stack: Stack,
}

impl PostNet {
    pub fn new(n_mels: usize) -> Self {
        let mut layers = Vec::new();
        let widths = [n_mels, HIDDEN, HIDDEN, HIDDEN, HIDDEN, n_mels];
        for i in 0..5 {
            let prefix = format!("postnet.conv{}", i + 1);
            layers.push(Layer::Conv(Conv1d::new(&prefix, widths[i], widths[i + 1], KERNEL)));
            if i < 4 {
                layers.push(Layer::Norm(ChannelNorm::new(
                    &format!("postnet.norm{}", i + 1),
                    widths[i + 1],
                )));
                layers.push(Layer::Tanh);
            }
        }
        Self {
            stack: Stack { layers },
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Result<(Mat, Tape)> {
        let (mut y, tape) = self.stack.forward(store, x)?;
        y.add_assign(x);
        Ok((y, tape))
    }

    pub fn backward(&self, store: &mut ParamStore, tape: &Tape, grad_out: &Mat) -> Result<Mat> {
        let mut gx = self.stack.backward(store, tape, grad_out)?;
        gx.add_assign(grad_out);
        Ok(gx)
    }

    pub fn output_conv(&self) -> &Conv1d {
        match self.stack.layers.last() {
            Some(Layer::Conv(c)) => c,
            _ => unreachable!(),
        }
    }
}

/// Mel `[n_mels, T]` to compressed wavelet coefficients `[k, T]`.
#[derive(Debug, Clone)]
pub struct CwtNet {
    pub stack: Stack,
    pub k: usize,
}

impl CwtNet {
    pub fn new(n_mels: usize, k: usize) -> Self {
        let layers = vec![
            Layer::Conv(Conv1d::new("cwtnet.conv1", n_mels, HIDDEN, KERNEL)),
            Layer::Norm(ChannelNorm::new("cwtnet.norm1", HIDDEN)),
            Layer::Relu,
            Layer::Conv(Conv1d::new("cwtnet.conv2", HIDDEN, HIDDEN, KERNEL)),
            Layer::Norm(ChannelNorm::new("cwtnet.norm2", HIDDEN)),
            Layer::Relu,
            Layer::Linear(Linear::new("cwtnet.linear1", HIDDEN, HIDDEN)),
            Layer::Relu,
            Layer::Linear(Linear::new("cwtnet.linear2", HIDDEN, k)),
        ];
        Self {
            stack: Stack { layers },
            k,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Result<(Mat, Tape)> {
        self.stack.forward(store, x)
    }

    pub fn backward(&self, store: &mut ParamStore, tape: &Tape, grad_out: &Mat) -> Result<Mat> {
        self.stack.backward(store, tape, grad_out)
    }
}

/// The three trainable components sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub n_mels: usize,
    pub k: usize,
    pub trunk: SharedTrunk,
    pub postnet: PostNet,
    pub cwtnet: CwtNet,
}

impl Model {
    pub fn new(n_mels: usize, k: usize) -> Self {
        Self {
            n_mels,
            k,
            trunk: SharedTrunk::new(n_mels),
            postnet: PostNet::new(n_mels),
            cwtnet: CwtNet::new(n_mels, k),
        }
    }

    fn stacks(&self) -> [&Stack; 3] {
        [&self.trunk.stack, &self.postnet.stack, &self.cwtnet.stack]
    }

    /// Uniform `(-s, s)` with `s = sqrt(1 / (in_ch * kernel))` for weights and
    /// biases; norm gains 1 and shifts 0. Bit-deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for stack in self.stacks() {
            for (name, shape, bound) in stack.param_specs() {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = match bound {
                    Some(s) => (0..n)
                        .map(|_| rng.gen_range(-s..s) as f32)
                        .map(|v| v.clamp(-(s as f32), s as f32))
                        .collect(),
                    None if name.ends_with(".gain") => vec![1.0; n],
                    None => vec![0.0; n],
                };
                store.insert(name, Tensor::new(shape, data).expect("finite init"));
            }
        }
        store
    }

    /// Init bound of the layer owning `name`, if it has one.
    pub fn init_bound(&self, name: &str) -> Option<f64> {
        self.stacks()
            .iter()
            .flat_map(|s| s.param_specs())
            .find(|(n, _, _)| n == name)
            .and_then(|(_, _, b)| b)
    }

    /// Zeroes the trunk convolution and the last Post-Net convolution so both
    /// residual paths start as exact identities.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) -> Result<()> {
        for conv in [self.trunk.output_conv(), self.postnet.output_conv()] {
            store.get_mut(&conv.weight)?.data_mut().fill(0.0);
            store.get_mut(&conv.bias)?.data_mut().fill(0.0);
        }
        Ok(())
    }

    /// Checks that `store` holds exactly this model's parameters.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let specs: Vec<_> = self.stacks().iter().flat_map(|s| s.param_specs()).collect();
        if specs.len() != store.len() {
            return Err(Error::Validation(format!(
                "model has {} parameters, store {}",
                specs.len(),
                store.len()
            )));
        }
        for (name, shape, _) in specs {
            let t = store
                .get(&name)
                .map_err(|_| Error::Validation(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn trunk_param_names(&self) -> Vec<String> {
        self.trunk
            .stack
            .param_specs()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect()
    }
}
