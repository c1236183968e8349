//! Central finite-difference oracle for the hand-written backward passes.
//!
//! The probe loss is `L = sum(r * f(x))` for a fixed random `r`, so the
//! analytic input gradient is `backward(r)`. Derivatives are estimated with
//! central differences at steps `h` and `2h`, combined by Richardson
//! extrapolation to cancel the `h^2` term. Parameters are stored as `f32`, so
//! the effective steps are taken from the actually stored perturbed values.

#![allow(dead_code)]

use cwtmel::nets::{Layer, Mat, ParamStore, Stack};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rand_mat(rows: usize, cols: usize, scale: f64, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    }
}

pub fn dot(a: &Mat, b: &Mat) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Probes whose perturbation flipped the sign of a ReLU input.
    pub kinks: usize,
}

impl FdReport {
    pub fn record(&mut self, analytic: f64, probe: &FdProbe) {
        if probe.kink {
            self.kinks += 1;
        } else {
            self.max_rel = self.max_rel.max(rel_err(analytic, probe.derivative));
            self.checked += 1;
        }
    }
}

/// Outcome of one extrapolated finite-difference probe.
pub struct FdProbe {
    pub derivative: f64,
    /// Some evaluation crossed a ReLU kink.
    pub kink: bool,
}

fn richardson(d1: f64, h1: f64, d2: f64, h2: f64) -> f64 {
    (h2 * h2 * d1 - h1 * h1 * d2) / (h2 * h2 - h1 * h1)
}

/// Derivative of `eval` with respect to one `f32` parameter coordinate.
/// `eval` returns the loss and whether that evaluation hit a kink.
pub fn fd_param(
    store: &mut ParamStore,
    name: &str,
    coord: usize,
    eval: &mut dyn FnMut(&ParamStore) -> (f64, bool),
) -> FdProbe {
    let orig = store.get(name).unwrap().data()[coord];
    let mut kink = false;
    let mut central = |h: f64, store: &mut ParamStore| {
        let up = (orig as f64 + h) as f32;
        let dn = (orig as f64 - h) as f32;
        store.get_mut(name).unwrap().data_mut()[coord] = up;
        let (lp, kp) = eval(store);
        store.get_mut(name).unwrap().data_mut()[coord] = dn;
        let (lm, km) = eval(store);
        kink |= kp || km;
        let width = up as f64 - dn as f64;
        ((lp - lm) / width, width / 2.0)
    };
    let (d1, h1) = central(STEP, store);
    let (d2, h2) = central(2.0 * STEP, store);
    store.get_mut(name).unwrap().data_mut()[coord] = orig;
    FdProbe {
        derivative: richardson(d1, h1, d2, h2),
        kink,
    }
}

/// Derivative of `eval` with respect to one `f64` input coordinate.
pub fn fd_input(x: &Mat, coord: usize, eval: &mut dyn FnMut(&Mat) -> (f64, bool)) -> FdProbe {
    let mut kink = false;
    let mut central = |h: f64| {
        let mut xp = x.clone();
        xp.data[coord] += h;
        let mut xm = x.clone();
        xm.data[coord] -= h;
        let (lp, kp) = eval(&xp);
        let (lm, km) = eval(&xm);
        kink |= kp || km;
        (lp - lm) / (2.0 * h)
    };
    let d1 = central(STEP);
    let d2 = central(2.0 * STEP);
    FdProbe {
        derivative: richardson(d1, STEP, d2, 2.0 * STEP),
        kink,
    }
}

/// A differentiable map under test.
pub struct Probe<'a> {
    pub forward: &'a dyn Fn(&ParamStore, &Mat) -> Mat,
    /// Zeroes grads, runs forward+backward with `grad_out`, returns grad wrt input.
    pub backward: &'a dyn Fn(&mut ParamStore, &Mat, &Mat) -> Mat,
    /// Pre-activation values of every ReLU; empty for smooth maps.
    pub relu_inputs: &'a dyn Fn(&ParamStore, &Mat) -> Vec<f64>,
}

pub fn signs_match(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0))
}

fn coords(n: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        sample(rng, n, limit).into_vec()
    }
}

/// Checks `per_tensor` sampled coordinates of every parameter (all of them
/// when the tensor is smaller) and `input_coords` sampled input coordinates.
pub fn check(
    probe: &Probe,
    store: &mut ParamStore,
    x: &Mat,
    per_tensor: usize,
    input_coords: usize,
    seed: u64,
) -> FdReport {
    let y = (probe.forward)(store, x);
    let r = rand_mat(y.rows, y.cols, 1.0, seed ^ 0xA5A5);
    let grad_x = (probe.backward)(store, x, &r);
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(n, _, g)| (n.to_string(), g.to_vec()))
        .collect();
    let base_relu = (probe.relu_inputs)(store, x);
    let eval = |s: &ParamStore, xx: &Mat| {
        let loss = dot(&(probe.forward)(s, xx), &r);
        (loss, !signs_match(&base_relu, &(probe.relu_inputs)(s, xx)))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();

    for (name, grad) in &analytic {
        for c in coords(grad.len(), per_tensor, &mut rng) {
            let fd = fd_param(store, name, c, &mut |s| eval(s, x));
            report.record(grad[c], &fd);
        }
    }
    let frozen: &ParamStore = store;
    for c in coords(x.data.len(), input_coords, &mut rng) {
        let fd = fd_input(x, c, &mut |xx| eval(frozen, xx));
        report.record(grad_x.data[c], &fd);
    }
    report
}

/// Pre-activation values feeding each ReLU of `stack`, recomputed by running
/// prefixes of the stack forward.
pub fn stack_relu_inputs(stack: &Stack, store: &ParamStore, x: &Mat) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, layer) in stack.layers.iter().enumerate() {
        if matches!(layer, Layer::Relu) {
            let prefix = Stack {
                layers: stack.layers[..i].to_vec(),
            };
            let (h, _) = prefix.forward(store, x).unwrap();
            out.extend(h.data);
        }
    }
    out
}

pub fn no_relu(_: &ParamStore, _: &Mat) -> Vec<f64> {
    Vec::new()
}

// ---- seeded cases shared by the gradient tests and the acceptance suite ----

use cwtmel::nets::{ChannelNorm, Conv1d, Linear, Model};
use cwtmel::Tensor;

pub const TOL: f64 = 1e-4;

pub fn random_tensor(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Parameters of `model` whose names start with `prefix`, with norm gains and
/// shifts jittered away from their 1/0 init.
pub fn sub_store(model: &Model, prefix: &str, seed: u64) -> ParamStore {
    let full = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut out = ParamStore::new();
    for (name, t, _) in full.iter().filter(|(n, _, _)| n.starts_with(prefix)) {
        let t = if name.ends_with(".gain") {
            random_tensor(t.shape().to_vec(), 0.5, 1.5, &mut rng)
        } else if name.ends_with(".shift") {
            random_tensor(t.shape().to_vec(), -0.3, 0.3, &mut rng)
        } else {
            t.clone()
        };
        out.insert(name, t);
    }
    out
}

fn check_stack(stack: &Stack, store: &mut ParamStore, x: &Mat, seed: u64) -> FdReport {
    let fwd = |s: &ParamStore, x: &Mat| stack.forward(s, x).unwrap().0;
    let bwd = |s: &mut ParamStore, x: &Mat, g: &Mat| {
        s.zero_grads();
        let (_, tape) = stack.forward(s, x).unwrap();
        stack.backward(s, &tape, g).unwrap()
    };
    let relu = |s: &ParamStore, x: &Mat| stack_relu_inputs(stack, s, x);
    let probe = Probe {
        forward: &fwd,
        backward: &bwd,
        relu_inputs: &relu,
    };
    check(&probe, store, x, usize::MAX, usize::MAX, seed)
}

fn single(layer: Layer) -> Stack {
    Stack {
        layers: vec![layer],
    }
}

pub fn conv1d_case() -> FdReport {
    let conv = Conv1d::new("c", 3, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.insert(&conv.weight, random_tensor(vec![4, 3, 5], -0.5, 0.5, &mut rng));
    store.insert(&conv.bias, random_tensor(vec![4], -0.5, 0.5, &mut rng));
    check_stack(&single(Layer::Conv(conv)), &mut store, &rand_mat(3, 7, 1.0, 2), 3)
}

pub fn linear_case() -> FdReport {
    let lin = Linear::new("l", 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    store.insert(&lin.weight, random_tensor(vec![3, 6], -0.5, 0.5, &mut rng));
    store.insert(&lin.bias, random_tensor(vec![3], -0.5, 0.5, &mut rng));
    check_stack(&single(Layer::Linear(lin)), &mut store, &rand_mat(6, 5, 1.0, 5), 6)
}

pub fn channel_norm_case() -> FdReport {
    let norm = ChannelNorm::new("n", 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    store.insert(&norm.gain, random_tensor(vec![7], 0.5, 1.5, &mut rng));
    store.insert(&norm.shift, random_tensor(vec![7], -0.5, 0.5, &mut rng));
    check_stack(&single(Layer::Norm(norm)), &mut store, &rand_mat(7, 6, 2.0, 8), 9)
}

pub fn tanh_case() -> FdReport {
    check_stack(&single(Layer::Tanh), &mut ParamStore::new(), &rand_mat(4, 6, 1.5, 10), 11)
}

pub fn relu_case() -> FdReport {
    check_stack(&single(Layer::Relu), &mut ParamStore::new(), &rand_mat(4, 6, 1.5, 12), 13)
}

/// `[80, 8]` input through one of the model's three networks.
macro_rules! net_case {
    ($fn_name:ident, $field:ident, $prefix:literal, $relu:expr, $per_tensor:expr, $seed:expr) => {
        pub fn $fn_name() -> FdReport {
            let model = Model::new(80, 16);
            let mut store = sub_store(&model, $prefix, $seed);
            let x = rand_mat(80, 8, 1.0, $seed + 1);
            let net = &model.$field;
            let fwd = |s: &ParamStore, x: &Mat| net.forward(s, x).unwrap().0;
            let bwd = |s: &mut ParamStore, x: &Mat, g: &Mat| {
                s.zero_grads();
                let (_, tape) = net.forward(s, x).unwrap();
                net.backward(s, &tape, g).unwrap()
            };
            let relu = |s: &ParamStore, x: &Mat| {
                if $relu {
                    stack_relu_inputs(&net.stack, s, x)
                } else {
                    Vec::new()
                }
            };
            let probe = Probe {
                forward: &fwd,
                backward: &bwd,
                relu_inputs: &relu,
            };
            check(&probe, &mut store, &x, $per_tensor, 200, $seed + 2)
        }
    };
}

net_case!(shared_trunk_case, trunk, "trunk.", false, 400, 20);
net_case!(postnet_case, postnet, "postnet.", false, 60, 30);
net_case!(cwtnet_case, cwtnet, "cwtnet.", true, 60, 40);

pub type Case = (&'static str, fn() -> FdReport);

/// Every layer type, then the three networks end to end.
pub fn all_cases() -> Vec<Case> {
    vec![
        ("conv1d", conv1d_case as fn() -> FdReport),
        ("linear", linear_case),
        ("channel_norm", channel_norm_case),
        ("tanh", tanh_case),
        ("relu", relu_case),
        ("shared_trunk", shared_trunk_case),
        ("postnet", postnet_case),
        ("cwtnet", cwtnet_case),
    ]
}
