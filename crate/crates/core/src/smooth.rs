//! Per-channel smoothing factors and their folding into activations/weights.
//!
//! For input channel `j` at timestep `t`,
//! `s = max(x_absmax, ε)^α / max(w_absmax, ε)^(1-α)`; activations are divided
//! by `s` and weight rows multiplied by it, which leaves `Wᵀ X` unchanged.

use serde::{Deserialize, Serialize};

use crate::calib::ActivationStats;
use crate::error::{Error, Result};
use crate::quant::SCALE_EPS;
use crate::tensor::{absmax_per_channel, ChannelAxis, Matrix};

pub const DEFAULT_ALPHA: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// One row of factors per timestep.
    Dynamic,
    /// A single row derived from the per-channel global maximum.
    Static,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingScales {
    mode: SmoothingMode,
    alpha: f32,
    rows: usize,
    channels: usize,
    s: Vec<f32>,
}

/// JSON sidecar for the serialized scale table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalesSidecar {
    pub mode: SmoothingMode,
    pub alpha: f32,
}

pub fn smoothing_factor(x_absmax: f32, w_absmax: f32, alpha: f32) -> f32 {
    let a = alpha as f64;
    let x = x_absmax.max(SCALE_EPS) as f64;
    let w = w_absmax.max(SCALE_EPS) as f64;
    (x.powf(a) / w.powf(1.0 - a)) as f32
}

fn check_alpha(alpha: f32) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::AlphaOutOfRange(alpha))
    }
}

pub fn compute_scales(
    stats: &ActivationStats,
    w: &Matrix,
    alpha: f32,
    mode: SmoothingMode,
) -> Result<SmoothingScales> {
    check_alpha(alpha)?;
    if w.rows() != stats.channels() {
        return Err(Error::ShapeMismatch(format!(
            "weight has {} input channels, statistics track {}",
            w.rows(),
            stats.channels()
        )));
    }
    let w_absmax = absmax_per_channel(w, ChannelAxis::InputChannel);
    let row = |x_absmax: &[f32]| -> Vec<f32> {
        x_absmax
            .iter()
            .zip(&w_absmax)
            .map(|(&x, &w)| smoothing_factor(x, w, alpha))
            .collect()
    };
    let s = match mode {
        SmoothingMode::Static => row(&stats.global_absmax()?),
        SmoothingMode::Dynamic => {
            let mut s = Vec::with_capacity(stats.timesteps() * stats.channels());
            for t in 0..stats.timesteps() {
                s.extend(row(&stats.effective_absmax(t)?));
            }
            s
        }
    };
    let rows = match mode {
        SmoothingMode::Static => 1,
        SmoothingMode::Dynamic => stats.timesteps(),
    };
    SmoothingScales::new(mode, alpha, rows, stats.channels(), s)
}

impl SmoothingScales {
    pub fn new(
        mode: SmoothingMode,
        alpha: f32,
        rows: usize,
        channels: usize,
        s: Vec<f32>,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        if rows == 0 || channels == 0 || s.len() != rows * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} smoothing factors for {rows}x{channels}",
                s.len()
            )));
        }
        if mode == SmoothingMode::Static && rows != 1 {
            return Err(Error::ShapeMismatch(format!(
                "static smoothing needs exactly one row, got {rows}"
            )));
        }
        if let Some(v) = s.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Format(format!("smoothing factor {v} is not positive and finite")));
        }
        Ok(Self {
            mode,
            alpha,
            rows,
            channels,
            s,
        })
    }

    /// All-ones static factors: no smoothing.
    pub fn identity(channels: usize) -> Self {
        Self::new(SmoothingMode::Static, DEFAULT_ALPHA, 1, channels, vec![1.0; channels])
            .expect("ones are valid factors")
    }

    pub fn mode(&self) -> SmoothingMode {
        self.mode
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Factors in effect at timestep `t`; static tables ignore `t`.
    pub fn at(&self, t: usize) -> Result<&[f32]> {
        let row = match self.mode {
            SmoothingMode::Static => 0,
            SmoothingMode::Dynamic if t < self.rows => t,
            SmoothingMode::Dynamic => {
                return Err(Error::TimestepOutOfRange {
                    t,
                    timesteps: self.rows,
                })
            }
        };
        Ok(&self.s[row * self.channels..(row + 1) * self.channels])
    }

    /// Per-channel maximum over timesteps, the factor a single stored weight copy is folded with.
    pub fn fold_max(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.channels];
        for row in self.s.chunks_exact(self.channels) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = o.max(v);
            }
        }
        out
    }

    pub fn to_matrix(&self) -> (Matrix, ScalesSidecar) {
        (
            Matrix::from_parts(self.rows, self.channels, self.s.clone()),
            ScalesSidecar {
                mode: self.mode,
                alpha: self.alpha,
            },
        )
    }

    pub fn from_matrix(m: &Matrix, sidecar: &ScalesSidecar) -> Result<Self> {
        Self::new(sidecar.mode, sidecar.alpha, m.rows(), m.cols(), m.data().to_vec())
    }
}

fn check_channels(m: &Matrix, scales: &SmoothingScales, what: &str) -> Result<()> {
    if m.rows() != scales.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{what} has {} input channels, smoothing has {}",
            m.rows(),
            scales.channels()
        )));
    }
    Ok(())
}

/// `X̂_j = X_j / s_j` on an activation laid out channels × tokens.
pub fn apply_to_activation(x: &Matrix, scales: &SmoothingScales, t: usize) -> Result<Matrix> {
    check_channels(x, scales, "activation")?;
    x.div_rows(scales.at(t)?)
}

/// `Ŵ_j = W_j · s_j` on a weight laid out input × output channels.
pub fn apply_to_weight(w: &Matrix, scales: &SmoothingScales, t: usize) -> Result<Matrix> {
    check_channels(w, scales, "weight")?;
    w.scale_rows(scales.at(t)?)
}

/// Post-smoothing `(activation absmax, weight absmax)` per channel at `t`.
pub fn equalized_absmax_check(
    stats: &ActivationStats,
    w: &Matrix,
    scales: &SmoothingScales,
    t: usize,
) -> Result<Vec<(f32, f32)>> {
    check_channels(w, scales, "weight")?;
    let x_absmax = match scales.mode() {
        SmoothingMode::Static => stats.global_absmax()?,
        SmoothingMode::Dynamic => stats.effective_absmax(t)?,
    };
    let w_absmax = absmax_per_channel(w, ChannelAxis::InputChannel);
    Ok(scales
        .at(t)?
        .iter()
        .zip(x_absmax.iter().zip(&w_absmax))
        .map(|(&s, (&x, &w))| (x / s, w * s))
        .collect())
}
