//! Low-rank compensation of weight quantization error.
//!
//! The residual `E = W - Ŵ` between a weight and its dequantized core is
//! approximated by its leading singular triplets and stored as a binary16
//! factor pair `A = U_r Σ_r^½`, `B = V_r Σ_r^½`, so the effective weight is
//! `Ŵ + A·Bᵀ`.

mod svd;

pub use svd::{truncated_svd, truncated_svd_with, SvdMethod, SvdResult};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{to_f16_saturating, HalfMatrix, Matrix};

pub const DEFAULT_RANK: usize = 16;

/// Smaller dimension above which [`build_adapter`] switches to the randomized SVD.
pub const JACOBI_LIMIT: usize = 512;

pub fn residual(w: &Matrix, w_hat: &Matrix) -> Result<Matrix> {
    w.sub(w_hat)
}

/// Binary16 factor pair; `a` is `k × r`, `b` is `m × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    a: HalfMatrix,
    b: HalfMatrix,
    sigma: Vec<f64>,
    a32: Matrix,
    b32: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSidecar {
    pub rank: usize,
    pub sigma: Vec<f64>,
}

impl LowRankAdapter {
    pub fn new(a: HalfMatrix, b: HalfMatrix, sigma: Vec<f64>) -> Result<Self> {
        let r = a.cols();
        if b.cols() != r || sigma.len() != r {
            return Err(Error::ShapeMismatch(format!(
                "adapter factors {}x{} and {}x{} with {} singular values",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols(),
                sigma.len()
            )));
        }
        if r > a.rows().min(b.rows()) {
            return Err(Error::RankOutOfRange {
                rank: r,
                max: a.rows().min(b.rows()),
            });
        }
        let (a32, b32) = (a.to_matrix(), b.to_matrix());
        Ok(Self { a, b, sigma, a32, b32 })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn input_channels(&self) -> usize {
        self.a.rows()
    }

    pub fn output_channels(&self) -> usize {
        self.b.rows()
    }

    pub fn a(&self) -> &HalfMatrix {
        &self.a
    }

    pub fn b(&self) -> &HalfMatrix {
        &self.b
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sidecar(&self) -> AdapterSidecar {
        AdapterSidecar {
            rank: self.rank(),
            sigma: self.sigma.clone(),
        }
    }

    /// Storage bytes: two binary16 factors.
    pub fn footprint_bytes(&self) -> usize {
        (self.a.rows() + self.b.rows()) * self.rank() * 2
    }

    /// `A·Bᵀ` (`k × m`) evaluated in `f64` from the stored binary16 values.
    pub fn product(&self) -> Matrix {
        let (k, m, r) = (self.a.rows(), self.b.rows(), self.rank());
        let a = self.a32.data();
        let b = self.b32.data();
        let mut out = Vec::with_capacity(k * m);
        for i in 0..k {
            for j in 0..m {
                let v: f64 = (0..r).map(|c| a[i * r + c] as f64 * b[j * r + c] as f64).sum();
                out.push(v as f32);
            }
        }
        Matrix::new(k, m, out).expect("binary16 products are finite")
    }

    /// `B · (Aᵀ · x)` for an activation `x` laid out `k × n`; result is `m × n`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let projected = self.a32.t_matmul(x)?;
        self.b32.matmul(&projected)
    }
}

/// `A = U·diag(√σ)`, `B = V·diag(√σ)`, rounded to binary16 with saturation.
pub fn factorize(svd: &SvdResult) -> LowRankAdapter {
    let r = svd.rank();
    let roots: Vec<f64> = svd.sigma().iter().map(|s| s.sqrt()).collect();
    let round = |v: f64| {
        let max = f16::MAX.to_f64();
        if v.abs() > max {
            to_f16_saturating(v as f32)
        } else {
            f16::from_f64(v)
        }
    };
    let mut a = Vec::with_capacity(svd.rows() * r);
    for i in 0..svd.rows() {
        a.extend((0..r).map(|c| round(svd.u(i, c) * roots[c])));
    }
    let mut b = Vec::with_capacity(svd.cols() * r);
    for i in 0..svd.cols() {
        b.extend((0..r).map(|c| round(svd.v(i, c) * roots[c])));
    }
    LowRankAdapter::new(
        HalfMatrix::new(svd.rows(), r, a).expect("finite binary16 factors"),
        HalfMatrix::new(svd.cols(), r, b).expect("finite binary16 factors"),
        svd.sigma().to_vec(),
    )
    .expect("factor shapes follow the decomposition")
}

/// Adapter compensating `w - w_hat` at the given rank.
pub fn build_adapter(w: &Matrix, w_hat: &Matrix, rank: usize) -> Result<LowRankAdapter> {
    let e = residual(w, w_hat)?;
    let method = SvdMethod::auto(e.rows(), e.cols(), JACOBI_LIMIT);
    Ok(factorize(&truncated_svd_with(&e, rank, method)?))
}
