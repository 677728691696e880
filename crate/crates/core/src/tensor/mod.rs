//! Dense row-major matrices and per-channel reductions.
//!
//! Activations are stored channels × tokens (`k × n`) and weights
//! input-channels × output-channels (`k × m`), so [`ChannelAxis::InputChannel`]
//! always indexes rows and [`ChannelAxis::OutputChannel`] always indexes columns.

mod io;

pub use io::{read_tensor, write_tensor, DType, TensorFile, FORMAT_VERSION, MAGIC};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which matrix dimension a per-channel quantity runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAxis {
    /// Rows: the contraction dimension shared by activations and weights.
    InputChannel,
    /// Columns of a weight matrix.
    OutputChannel,
}

impl ChannelAxis {
    pub fn code(self) -> u8 {
        match self {
            ChannelAxis::InputChannel => 0,
            ChannelAxis::OutputChannel => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ChannelAxis::InputChannel),
            1 => Some(ChannelAxis::OutputChannel),
            _ => None,
        }
    }
}

/// Immutable dense 2-D matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Validates shape, length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                actual: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Panics if either dimension is zero or `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("from_fn produced a non-finite value")
    }

    /// Internal constructor for results of arithmetic on valid matrices.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn channel_count(&self, axis: ChannelAxis) -> usize {
        match axis {
            ChannelAxis::InputChannel => self.rows,
            ChannelAxis::OutputChannel => self.cols,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_parts(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f32]) -> Result<Matrix> {
        self.check_row_factors(factors)?;
        let mut data = self.data.clone();
        for (row, &f) in data.chunks_exact_mut(self.cols).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Matrix::new(self.rows, self.cols, data)
    }

    /// Divides row `i` by `divisors[i]`.
    pub fn div_rows(&self, divisors: &[f32]) -> Result<Matrix> {
        self.check_row_factors(divisors)?;
        let mut data = self.data.clone();
        for (row, &d) in data.chunks_exact_mut(self.cols).zip(divisors) {
            row.iter_mut().for_each(|v| *v /= d);
        }
        Matrix::new(self.rows, self.cols, data)
    }

    fn check_row_factors(&self, factors: &[f32]) -> Result<()> {
        if factors.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "{} row factors for a matrix with {} rows",
                factors.len(),
                self.rows
            )));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f32, f32) -> f32) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    /// `self · rhs` with `f32` accumulation.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} · {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = rhs.cols;
        let mut out = vec![0.0f32; self.rows * n];
        for i in 0..self.rows {
            let acc = &mut out[i * n..(i + 1) * n];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in acc.iter_mut().zip(rhs.row(p)) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(self.rows, n, out)
    }

    /// `selfᵀ · rhs` with `f32` accumulation; both operands share their row count.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "transposed matmul ({}x{})ᵀ · {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, n) = (self.cols, rhs.cols);
        let mut out = vec![0.0f32; m * n];
        for p in 0..self.rows {
            let x = rhs.row(p);
            for (c, &a) in self.row(p).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out[c * n..(c + 1) * n].iter_mut().zip(x) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(m, n, out)
    }

    /// `selfᵀ · rhs` accumulated in `f64` and rounded once at the end.
    pub fn t_matmul_f64(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "transposed matmul ({}x{})ᵀ · {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, n) = (self.cols, rhs.cols);
        let mut acc = vec![0.0f64; m * n];
        for p in 0..self.rows {
            let x = rhs.row(p);
            for (c, &a) in self.row(p).iter().enumerate() {
                let a = a as f64;
                for (o, &b) in acc[c * n..(c + 1) * n].iter_mut().zip(x) {
                    *o += a * b as f64;
                }
            }
        }
        Matrix::new(m, n, acc.into_iter().map(|v| v as f32).collect())
    }
}

/// Row-major binary16 storage, used for the low-rank adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f16>,
}

impl HalfMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f16>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                actual: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Self { rows, cols, data })
    }

    /// Round-to-nearest-even, subnormals kept, overflow saturates at ±65504.
    pub fn from_matrix(m: &Matrix) -> Self {
        let data = m.data().iter().map(|&v| to_f16_saturating(v)).collect();
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f16] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.data.iter().map(|v| v.to_f32()).collect())
    }
}

pub fn to_f16_saturating(v: f32) -> f16 {
    let max = f16::MAX.to_f32();
    f16::from_f32(v.clamp(-max, max))
}

/// Per-channel maximum absolute value along `axis`.
pub fn absmax_per_channel(m: &Matrix, axis: ChannelAxis) -> Vec<f32> {
    match axis {
        ChannelAxis::InputChannel => (0..m.rows())
            .map(|i| m.row(i).iter().fold(0.0f32, |acc, v| acc.max(v.abs())))
            .collect(),
        ChannelAxis::OutputChannel => {
            let mut out = vec![0.0f32; m.cols()];
            for i in 0..m.rows() {
                for (o, v) in out.iter_mut().zip(m.row(i)) {
                    *o = o.max(v.abs());
                }
            }
            out
        }
    }
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data()
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}
