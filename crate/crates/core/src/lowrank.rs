//! Truncated SVD compression of scalograms.
//!
//! The SVD is a one-sided Jacobi (Hestenes) iteration in `f64` with a fixed
//! cyclic sweep order, so results are bit-reproducible. Columns of the
//! scalogram (frames) are the samples and scales are the features: the basis
//! spans the scale axis and compression keeps the time axis intact.

use std::fs;
use std::path::Path;

use crate::cwt::Scalogram;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

const MAX_SWEEPS: usize = 80;
const ROTATION_TOL: f64 = 1e-15;
/// Singular values below this fraction of the largest get a completed left vector.
const NULL_TOL: f64 = 1e-10;

pub const U_FILE: &str = "U.ftn";
pub const SINGULAR_VALUES_FILE: &str = "singular_values.ftn";

/// Thin SVD `M = U diag(S) V^T` of an `m x n` matrix, `r = min(m, n)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub m: usize,
    pub n: usize,
    /// Row-major `[m, r]`.
    pub u: Vec<f64>,
    /// Descending, length `r`.
    pub s: Vec<f64>,
    /// Row-major `[n, r]`.
    pub v: Vec<f64>,
}

impl Svd {
    pub fn rank_dim(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) V^T`, row-major `[m, n]`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let r = self.rank_dim();
        let mut out = vec![0.0; self.m * self.n];
        for i in 0..self.m {
            for j in 0..self.n {
                out[i * self.n + j] = (0..r)
                    .map(|k| self.u[i * r + k] * self.s[k] * self.v[j * r + k])
                    .sum();
            }
        }
        out
    }
}

pub fn svd_full(m: &Tensor) -> Result<Svd> {
    let (rows, cols) = m.dims2()?;
    svd_f64(rows, cols, &m.to_f64())
}

/// SVD of a row-major `rows x cols` matrix.
pub fn svd_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Svd> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(Error::param(format!(
            "bad matrix: {rows}x{cols} with {} values",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("matrix has non-finite entries"));
    }
    // Orthogonalize the columns of a tall matrix A (p x q, p >= q). Columns
    // are stored contiguously. For a wide input we work on its transpose.
    let tall = rows >= cols;
    let (p, q) = if tall { (rows, cols) } else { (cols, rows) };
    let mut a = vec![0.0; p * q];
    for i in 0..rows {
        for j in 0..cols {
            let (col, row) = if tall { (j, i) } else { (i, j) };
            a[col * p + row] = data[i * cols + j];
        }
    }
    let mut v = vec![0.0; q * q];
    for i in 0..q {
        v[i * q + i] = 1.0;
    }
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let (ci, cj) = two_cols(&mut a, p, i, j);
                let alpha: f64 = ci.iter().map(|x| x * x).sum();
                let beta: f64 = cj.iter().map(|x| x * x).sum();
                let gamma: f64 = ci.iter().zip(cj.iter()).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(ci, cj, c, s);
                let (vi, vj) = two_cols(&mut v, q, i, j);
                rotate(vi, vj, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..q)
        .map(|k| a[k * p..(k + 1) * p].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let smax = norms[order[0]];

    // left vectors as columns of length p, in sorted order
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut s = Vec::with_capacity(q);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(q);
    for &k in &order {
        let sigma = norms[k];
        let col = &a[k * p..(k + 1) * p];
        let u = if sigma > NULL_TOL * smax && sigma > 0.0 {
            col.iter().map(|x| x / sigma).collect()
        } else {
            complete_orthonormal(&left, p)
        };
        left.push(u);
        s.push(sigma);
        right.push(v[k * q..(k + 1) * q].to_vec());
    }

    let (mut ucols, mut vcols) = if tall { (left, right) } else { (right, left) };
    // sign convention: largest-magnitude entry of each left vector is positive
    for (u, w) in ucols.iter_mut().zip(vcols.iter_mut()) {
        let big = u
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) })
            .0;
        if u[big] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            w.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let r = q;
    let pack = |cols_: &[Vec<f64>], len: usize| {
        let mut out = vec![0.0; len * r];
        for (k, c) in cols_.iter().enumerate() {
            for (i, &x) in c.iter().enumerate() {
                out[i * r + k] = x;
            }
        }
        out
    };
    let u = pack(&ucols, rows);
    let vv = pack(&vcols, cols);
    Ok(Svd {
        m: rows,
        n: cols,
        u,
        s,
        v: vv,
    })
}

fn two_cols(a: &mut [f64], len: usize, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (lo, hi) = a.split_at_mut(j * len);
    (&mut lo[i * len..(i + 1) * len], &mut hi[..len])
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xi, *yi);
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

/// First standard basis vector, Gram-Schmidt'd (twice) against `basis`,
/// that leaves a usable residual.
fn complete_orthonormal(basis: &[Vec<f64>], len: usize) -> Vec<f64> {
    for e in 0..len {
        let mut cand = vec![0.0; len];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = b.iter().zip(&cand).map(|(x, y)| x * y).sum();
                cand.iter_mut().zip(b).for_each(|(c, x)| *c -= d * x);
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cand.iter_mut().for_each(|x| *x /= norm);
            return cand;
        }
    }
    unreachable!("basis already spans the space")
}

/// Orthonormal `[n_scales, k]` basis with its singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    pub u: Tensor,
    pub singular_values: Tensor,
}

impl Basis {
    pub fn k(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn n_scales(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(dir.join(U_FILE), &self.u)?;
        write_tensor(dir.join(SINGULAR_VALUES_FILE), &self.singular_values)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let u = read_tensor(dir.join(U_FILE))?;
        let singular_values = read_tensor(dir.join(SINGULAR_VALUES_FILE))?;
        let (_, k) = u.dims2()?;
        if singular_values.shape() != [k] {
            return Err(Error::format(
                "singular_values",
                format!("shape {:?} does not match rank {k}", singular_values.shape()),
            ));
        }
        Ok(Self { u, singular_values })
    }
}

/// Top-`k` left singular vectors of the concatenated training frames.
pub fn fit_global_basis(frames: &Tensor, k: usize) -> Result<Basis> {
    fit_basis_with_energy(frames, k).map(|(b, _)| b)
}

/// Like [`fit_global_basis`], also returning `sum_{i<k} s_i^2 / sum_i s_i^2`
/// evaluated on the `f64` spectrum.
pub fn fit_basis_with_energy(frames: &Tensor, k: usize) -> Result<(Basis, f64)> {
    let (n_scales, total_t) = frames.dims2()?;
    if k == 0 || k > n_scales || k > total_t {
        return Err(Error::param(format!(
            "rank {k} outside 1..={}",
            n_scales.min(total_t)
        )));
    }
    let svd = svd_full(frames)?;
    let r = svd.rank_dim();
    let mut u = Vec::with_capacity(n_scales * k);
    for i in 0..n_scales {
        u.extend_from_slice(&svd.u[i * r..i * r + k]);
    }
    let total: f64 = svd.s.iter().map(|s| s * s).sum();
    let kept: f64 = svd.s[..k].iter().map(|s| s * s).sum();
    let energy = if total == 0.0 { 1.0 } else { kept / total };
    let basis = Basis {
        u: Tensor::from_f64(vec![n_scales, k], &u)?,
        singular_values: Tensor::from_f64(vec![k], &svd.s[..k])?,
    };
    Ok((basis, energy))
}

/// Fraction of the frames' Frobenius energy kept by the basis.
pub fn retained_energy(basis: &Basis, frames: &Tensor) -> Result<f64> {
    let total: f64 = frames.data().iter().map(|&x| (x as f64).powi(2)).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let kept: f64 = basis
        .singular_values
        .data()
        .iter()
        .map(|&s| (s as f64).powi(2))
        .sum();
    Ok((kept / total).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedScalogram {
    pub coeffs: Tensor,
}

/// `U^T values` for a `[n_scales, T]` tensor.
pub fn project_values(values: &Tensor, b: &Basis) -> Result<Tensor> {
    let (rows, t) = values.dims2()?;
    let (n_scales, k) = b.u.dims2()?;
    if rows != n_scales {
        return Err(Error::param(format!(
            "scalogram has {rows} scales, basis {n_scales}"
        )));
    }
    let u = b.u.data();
    let x = values.data();
    let mut out = vec![0.0f64; k * t];
    for i in 0..n_scales {
        for c in 0..k {
            let w = u[i * k + c] as f64;
            let dst = &mut out[c * t..(c + 1) * t];
            for (d, &v) in dst.iter_mut().zip(&x[i * t..(i + 1) * t]) {
                *d += w * v as f64;
            }
        }
    }
    Tensor::from_f64(vec![k, t], &out)
}

pub fn project(s: &Scalogram, b: &Basis) -> Result<CompressedScalogram> {
    Ok(CompressedScalogram {
        coeffs: project_values(&s.values, b)?,
    })
}

/// `U coeffs`, shape `[n_scales, T]`.
pub fn reconstruct(c: &CompressedScalogram, b: &Basis) -> Result<Tensor> {
    let (k, t) = c.coeffs.dims2()?;
    let (n_scales, kb) = b.u.dims2()?;
    if k != kb {
        return Err(Error::param(format!("coefficients have rank {k}, basis {kb}")));
    }
    let u = b.u.data();
    let x = c.coeffs.data();
    let mut out = vec![0.0f64; n_scales * t];
    for i in 0..n_scales {
        let dst = &mut out[i * t..(i + 1) * t];
        for r in 0..k {
            let w = u[i * k + r] as f64;
            for (d, &v) in dst.iter_mut().zip(&x[r * t..(r + 1) * t]) {
                *d += w * v as f64;
            }
        }
    }
    Tensor::from_f64(vec![n_scales, t], &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    fn frob(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn gram_dev(mat: &[f64], rows: usize, cols: usize) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..cols {
            for b in 0..cols {
                let d: f64 = (0..rows).map(|i| mat[i * cols + a] * mat[i * cols + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((d - want).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_spectrum() {
        let mut d = vec![0.0f32; 9];
        d[0] = 1.0;
        d[4] = 1.0;
        d[8] = 1.0;
        let svd = svd_full(&Tensor::new(vec![3, 3], d).unwrap()).unwrap();
        assert_eq!(svd.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn rank_one_outer_product() {
        let a = [1.0f64, -2.0, 0.5, 3.0];
        let b = [2.0f64, 0.0, -1.0];
        let data: Vec<f32> = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| (x * y) as f32))
            .collect();
        let svd = svd_full(&Tensor::new(vec![4, 3], data).unwrap()).unwrap();
        let expected = frob(&a) * frob(&b);
        assert!((svd.s[0] - expected).abs() < 1e-12 * expected);
        assert!(svd.s[1..].iter().all(|&s| s < 1e-12));
        assert!(gram_dev(&svd.u, 4, 3) < 1e-12);
        assert!(gram_dev(&svd.v, 3, 3) < 1e-12);
    }

    #[test]
    fn random_defining_identities() {
        for (r, c, seed) in [(20, 30, 1), (30, 20, 2), (64, 500, 3)] {
            let m = random(r, c, seed);
            let svd = svd_full(&m).unwrap();
            let x = m.to_f64();
            let rec = svd.reconstruct();
            let diff: Vec<f64> = x.iter().zip(&rec).map(|(a, b)| a - b).collect();
            assert!(frob(&diff) / frob(&x) <= 1e-5);
            let k = r.min(c);
            assert!(gram_dev(&svd.u, r, k) <= 1e-6);
            assert!(gram_dev(&svd.v, c, k) <= 1e-6);
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(svd_f64(1, 2, &[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn rank_one_frames_are_exact_with_k1() {
        let col = [0.5f32, 1.0, 2.0, 0.1];
        let w = [1.0f32, -2.0, 0.3, 4.0, 0.7];
        let data: Vec<f32> = col.iter().flat_map(|c| w.iter().map(move |v| c * v)).collect();
        let m = Tensor::new(vec![4, 5], data).unwrap();
        let b = fit_global_basis(&m, 1).unwrap();
        let rec = reconstruct(&project_values_c(&m, &b), &b).unwrap();
        let err: f64 = rec
            .data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-6 * frob(&m.to_f64()));
    }

    fn project_values_c(m: &Tensor, b: &Basis) -> CompressedScalogram {
        CompressedScalogram {
            coeffs: project_values(m, b).unwrap(),
        }
    }

    fn residual_energy(m: &Tensor, b: &Basis) -> f64 {
        let rec = reconstruct(&project_values_c(m, b), b).unwrap();
        rec.data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum()
    }

    #[test]
    fn eckart_young_residual() {
        let m = random(64, 500, 4);
        let spectrum = svd_full(&m).unwrap().s;
        for k in [1, 8, 16, 40] {
            let b = fit_global_basis(&m, k).unwrap();
            let tail: f64 = spectrum[k..].iter().map(|s| s * s).sum();
            let got = residual_energy(&m, &b);
            assert!((got - tail).abs() <= 1e-4 * tail, "k={k}: {got} vs {tail}");
        }
        let full = fit_global_basis(&m, 64).unwrap();
        assert!(residual_energy(&m, &full) <= 1e-10 * frob(&m.to_f64()).powi(2));
        assert!((retained_energy(&full, &m).unwrap() - 1.0).abs() < 1e-6);
        let (_, e) = fit_basis_with_energy(&m, 64).unwrap();
        assert!((e - 1.0).abs() < 1e-9);
        let energies: Vec<f64> = (1..=64)
            .map(|k| fit_basis_with_energy(&m, k).unwrap().1)
            .collect();
        assert!(energies.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn error_decreases_with_rank_and_basis_is_deterministic() {
        let m = random(16, 120, 5);
        let errs: Vec<f64> = (1..=16)
            .map(|k| residual_energy(&m, &fit_global_basis(&m, k).unwrap()))
            .collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        let a = fit_global_basis(&m, 6).unwrap();
        let b = fit_global_basis(&m, 6).unwrap();
        assert_eq!(a.u.to_bytes(), b.u.to_bytes());
    }

    #[test]
    fn sign_convention() {
        let b = fit_global_basis(&random(12, 40, 6), 5).unwrap();
        for c in 0..5 {
            let col: Vec<f32> = (0..12).map(|i| b.u.get2(i, c)).collect();
            let big = col.iter().fold(0.0f32, |m, v| if v.abs() > m.abs() { *v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn projection_properties() {
        let m = random(10, 50, 7);
        let b = fit_global_basis(&m, 4).unwrap();
        // column equal to basis column j projects to e_j
        let mut data = vec![0.0f32; 10 * 3];
        for i in 0..10 {
            data[i * 3 + 1] = b.u.get2(i, 2);
        }
        let c = project_values(&Tensor::new(vec![10, 3], data).unwrap(), &b).unwrap();
        for r in 0..4 {
            let want = if r == 2 { 1.0 } else { 0.0 };
            assert!((c.get2(r, 1) - want).abs() < 1e-6);
            assert_eq!(c.get2(r, 0), 0.0);
        }
        // non-expansive
        let other = random(10, 30, 8);
        let p = project_values(&other, &b).unwrap();
        assert!(frob(&p.to_f64()) <= frob(&other.to_f64()) + 1e-6);
        assert!(project_values(&random(9, 3, 1), &b).is_err());
    }

    #[test]
    fn coefficient_round_trip() {
        let b = fit_global_basis(&random(32, 80, 9), 8).unwrap();
        let coeffs = random(8, 20, 10);
        let field = reconstruct(&CompressedScalogram { coeffs: coeffs.clone() }, &b).unwrap();
        let back = project_values(&field, &b).unwrap();
        for (x, y) in back.data().iter().zip(coeffs.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
        let zero = reconstruct(
            &CompressedScalogram {
                coeffs: Tensor::zeros(vec![8, 3]),
            },
            &b,
        )
        .unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_out_of_range() {
        let m = random(8, 20, 11);
        assert!(fit_global_basis(&m, 0).is_err());
        assert!(fit_global_basis(&m, 9).is_err());
    }

    #[test]
    fn basis_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = fit_global_basis(&random(8, 20, 12), 3).unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(Basis::load(dir.path()).unwrap(), b);
    }
}
