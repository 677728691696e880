//! Truncated SVD: one-sided Jacobi as the exact method, randomized subspace
//! iteration for large layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAX_SWEEPS: usize = 80;

/// Leading `rank` singular triplets, singular values non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    rows: usize,
    cols: usize,
    /// `rows × rank`, row-major, orthonormal columns.
    u: Vec<f64>,
    sigma: Vec<f64>,
    /// `cols × rank`, row-major, orthonormal columns.
    v: Vec<f64>,
}

impl SvdResult {
    pub fn new(rows: usize, cols: usize, u: Vec<f64>, sigma: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let r = sigma.len();
        if r == 0 || u.len() != rows * r || v.len() != cols * r {
            return Err(Error::ShapeMismatch(format!(
                "svd factors u={} sigma={} v={} for {rows}x{cols}",
                u.len(),
                r,
                v.len()
            )));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Format("singular values must be non-negative and non-increasing".into()));
        }
        Ok(Self { rows, cols, u, sigma, v })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn u(&self, i: usize, c: usize) -> f64 {
        self.u[i * self.rank() + c]
    }

    pub fn v(&self, i: usize, c: usize) -> f64 {
        self.v[i * self.rank() + c]
    }

    /// `u · diag(sigma) · vᵀ` in `f64`, row-major `rows × cols`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let r = self.rank();
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i * self.cols + j] = (0..r).map(|c| self.u(i, c) * self.sigma[c] * self.v(j, c)).sum();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMethod {
    Jacobi,
    Randomized {
        oversample: usize,
        power_iters: usize,
        seed: u64,
    },
}

impl SvdMethod {
    pub fn randomized(seed: u64) -> Self {
        SvdMethod::Randomized {
            oversample: 8,
            power_iters: 2,
            seed,
        }
    }

    /// Jacobi up to `threshold` on the smaller dimension, randomized above.
    pub fn auto(rows: usize, cols: usize, threshold: usize) -> Self {
        if rows.min(cols) <= threshold {
            SvdMethod::Jacobi
        } else {
            SvdMethod::randomized(0x5eed)
        }
    }
}

pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<SvdResult> {
    truncated_svd_with(m, rank, SvdMethod::Jacobi)
}

pub fn truncated_svd_with(m: &Matrix, rank: usize, method: SvdMethod) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    let max = rows.min(cols);
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    let a = Dense::from_matrix(m);
    let full = match method {
        SvdMethod::Jacobi => jacobi_svd(&a),
        SvdMethod::Randomized {
            oversample,
            power_iters,
            seed,
        } => randomized_svd(&a, rank, oversample, power_iters, seed),
    };
    Ok(full.truncate(rank))
}

/// Column-major dense `f64` matrix used internally.
#[derive(Debug, Clone)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    fn from_matrix(m: &Matrix) -> Self {
        let mut d = Dense::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                d.data[j * m.rows() + i] = v as f64;
            }
        }
        d
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    fn transpose(&self) -> Dense {
        let mut t = Dense::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                t.data[i * self.cols + j] = self.get(i, j);
            }
        }
        t
    }

    /// `self · rhs`.
    fn mul(&self, rhs: &Dense) -> Dense {
        assert_eq!(self.cols, rhs.rows);
        let mut out = Dense::zeros(self.rows, rhs.cols);
        for j in 0..rhs.cols {
            let dst = &mut out.data[j * self.rows..(j + 1) * self.rows];
            for (p, &b) in rhs.col(j).iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                for (d, &a) in dst.iter_mut().zip(self.col(p)) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs`.
    fn t_mul(&self, rhs: &Dense) -> Dense {
        assert_eq!(self.rows, rhs.rows);
        let mut out = Dense::zeros(self.cols, rhs.cols);
        for j in 0..rhs.cols {
            for i in 0..self.cols {
                out.data[j * self.cols + i] = dot(self.col(i), rhs.col(j));
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full thin decomposition before truncation.
struct FullSvd {
    u: Dense,
    sigma: Vec<f64>,
    v: Dense,
}

impl FullSvd {
    fn truncate(self, rank: usize) -> SvdResult {
        let (rows, cols) = (self.u.rows, self.v.rows);
        let mut u = vec![0.0; rows * rank];
        let mut v = vec![0.0; cols * rank];
        for c in 0..rank {
            for i in 0..rows {
                u[i * rank + c] = self.u.get(i, c);
            }
            for i in 0..cols {
                v[i * rank + c] = self.v.get(i, c);
            }
        }
        SvdResult {
            rows,
            cols,
            u,
            sigma: self.sigma[..rank].to_vec(),
            v,
        }
    }
}

fn jacobi_svd(a: &Dense) -> FullSvd {
    if a.rows < a.cols {
        let t = jacobi_svd(&a.transpose());
        return FullSvd { u: t.v, sigma: t.sigma, v: t.u };
    }
    let n = a.cols;
    let mut u = a.clone();
    let mut v = Dense::zeros(n, n);
    for i in 0..n {
        v.data[i * n + i] = 1.0;
    }

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(u.col(p), u.col(p));
                let beta = dot(u.col(q), u.col(q));
                let gamma = dot(u.col(p), u.col(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n).map(|j| dot(u.col(j), u.col(j)).sqrt()).collect();
    let scale = sigma.iter().cloned().fold(0.0, f64::max);
    let tiny = scale * f64::EPSILON * (a.rows as f64);
    let mut degenerate = Vec::new();
    for (j, s) in sigma.iter_mut().enumerate() {
        if *s > tiny && *s > 0.0 {
            let inv = 1.0 / *s;
            u.col_mut(j).iter_mut().for_each(|x| *x *= inv);
        } else {
            *s = 0.0;
            degenerate.push(j);
        }
    }
    complete_orthonormal(&mut u, &degenerate);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let mut su = Dense::zeros(u.rows, n);
    let mut sv = Dense::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        su.col_mut(dst).copy_from_slice(u.col(src));
        sv.col_mut(dst).copy_from_slice(v.col(src));
    }
    let sigma = order.iter().map(|&j| sigma[j]).collect();
    FullSvd { u: su, sigma, v: sv }
}

fn rotate(m: &mut Dense, p: usize, q: usize, c: f64, s: f64) {
    let rows = m.rows;
    let (head, tail) = m.data.split_at_mut(q * rows);
    let cp = &mut head[p * rows..(p + 1) * rows];
    let cq = &mut tail[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Replaces the listed columns with unit vectors orthogonal to every other column.
fn complete_orthonormal(u: &mut Dense, columns: &[usize]) {
    let mut candidate = 0usize;
    for (done, &j) in columns.iter().enumerate() {
        let pending = &columns[done..];
        while candidate < u.rows {
            let mut e = vec![0.0; u.rows];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for k in (0..u.cols).filter(|k| !pending.contains(k)) {
                    let d = dot(&e, u.col(k));
                    e.iter_mut().zip(u.col(k)).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                u.col_mut(j).copy_from_slice(&e);
                break;
            }
        }
    }
}

/// Modified Gram-Schmidt, applied twice; dependent columns are replaced.
fn orthonormalize(m: &mut Dense) {
    let mut dropped = Vec::new();
    for j in 0..m.cols {
        for _ in 0..2 {
            for k in 0..j {
                if dropped.contains(&k) {
                    continue;
                }
                let d = dot(m.col(j), m.col(k));
                let (head, tail) = m.data.split_at_mut(j * m.rows);
                let ck = &head[k * m.rows..(k + 1) * m.rows];
                tail[..m.rows].iter_mut().zip(ck).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = dot(m.col(j), m.col(j)).sqrt();
        if norm > 1e-12 {
            m.col_mut(j).iter_mut().for_each(|x| *x /= norm);
        } else {
            dropped.push(j);
        }
    }
    complete_orthonormal(m, &dropped);
}

fn randomized_svd(a: &Dense, rank: usize, oversample: usize, power_iters: usize, seed: u64) -> FullSvd {
    let l = (rank + oversample).min(a.rows.min(a.cols));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = Dense::zeros(a.cols, l);
    omega.data.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));

    let mut q = a.mul(&omega);
    orthonormalize(&mut q);
    for _ in 0..power_iters {
        let mut z = a.t_mul(&q);
        orthonormalize(&mut z);
        q = a.mul(&z);
        orthonormalize(&mut q);
    }
    // B = Qᵀ A is l × cols; its SVD lifts back through Q.
    let b = q.t_mul(a);
    let small = jacobi_svd(&b);
    FullSvd {
        u: q.mul(&small.u),
        sigma: small.sigma,
        v: small.v,
    }
}
