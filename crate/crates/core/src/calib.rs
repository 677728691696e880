//! Per-layer activation statistics gathered over calibration runs.
//!
//! Each collector tracks, for every timestep, the per-input-channel absmax of
//! the activations it saw, and across all timesteps the running per-channel
//! minimum and maximum used by the static variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{absmax_per_channel, ChannelAxis, Matrix};

/// Default number of sampler steps statistics are keyed by.
pub const DEFAULT_TIMESTEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    timesteps: usize,
    channels: usize,
    /// `timesteps × channels`, row-major.
    absmax: Vec<f32>,
    run_min: Vec<f32>,
    run_max: Vec<f32>,
    samples_seen: Vec<u64>,
}

/// JSON sidecar written next to the tensor form of the statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSidecar {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub k: usize,
    pub samples_seen: Vec<u64>,
}

impl ActivationStats {
    pub fn new(timesteps: usize, channels: usize) -> Result<Self> {
        if timesteps == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "statistics need T >= 1 and k >= 1, got T={timesteps} k={channels}"
            )));
        }
        Ok(Self {
            timesteps,
            channels,
            absmax: vec![0.0; timesteps * channels],
            run_min: vec![f32::INFINITY; channels],
            run_max: vec![f32::NEG_INFINITY; channels],
            samples_seen: vec![0; timesteps],
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples_seen(&self) -> &[u64] {
        &self.samples_seen
    }

    pub fn total_samples(&self) -> u64 {
        self.samples_seen.iter().sum()
    }

    /// Absmax row for timestep `t` (zeros if never recorded).
    pub fn absmax_at(&self, t: usize) -> &[f32] {
        &self.absmax[t * self.channels..(t + 1) * self.channels]
    }

    /// Running per-channel minimum; `+inf` before the first record.
    pub fn run_min(&self) -> &[f32] {
        &self.run_min
    }

    /// Running per-channel maximum; `-inf` before the first record.
    pub fn run_max(&self) -> &[f32] {
        &self.run_max
    }

    /// Folds one activation matrix (channels × tokens) seen at timestep `t`.
    pub fn record(&mut self, t: usize, x: &Matrix) -> Result<()> {
        if t >= self.timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                timesteps: self.timesteps,
            });
        }
        if x.rows() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "activation has {} channels, statistics track {}",
                x.rows(),
                self.channels
            )));
        }
        let k = self.channels;
        let row = &mut self.absmax[t * k..(t + 1) * k];
        for (slot, a) in row.iter_mut().zip(absmax_per_channel(x, ChannelAxis::InputChannel)) {
            *slot = slot.max(a);
        }
        for j in 0..k {
            for &v in x.row(j) {
                self.run_min[j] = self.run_min[j].min(v);
                self.run_max[j] = self.run_max[j].max(v);
            }
        }
        self.samples_seen[t] += 1;
        Ok(())
    }

    /// Per-channel maximum over all timesteps.
    pub fn global_absmax(&self) -> Result<Vec<f32>> {
        if self.total_samples() == 0 {
            return Err(Error::EmptyStats);
        }
        let mut out = vec![0.0f32; self.channels];
        for t in 0..self.timesteps {
            for (o, &a) in out.iter_mut().zip(self.absmax_at(t)) {
                *o = o.max(a);
            }
        }
        Ok(out)
    }

    /// Absmax used for scale derivation at `t`: the recorded row, or the
    /// global absmax when timestep `t` never received a sample.
    pub fn effective_absmax(&self, t: usize) -> Result<Vec<f32>> {
        if t >= self.timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                timesteps: self.timesteps,
            });
        }
        if self.samples_seen[t] == 0 {
            self.global_absmax()
        } else {
            Ok(self.absmax_at(t).to_vec())
        }
    }

    /// `max(|run_min|, |run_max|)` per channel.
    pub fn static_range(&self) -> Result<Vec<f32>> {
        if self.total_samples() == 0 {
            return Err(Error::EmptyStats);
        }
        Ok(self
            .run_min
            .iter()
            .zip(&self.run_max)
            .map(|(lo, hi)| lo.abs().max(hi.abs()))
            .collect())
    }

    pub fn merge(&self, other: &ActivationStats) -> Result<ActivationStats> {
        if self.timesteps != other.timesteps || self.channels != other.channels {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge stats T={} k={} with T={} k={}",
                self.timesteps, self.channels, other.timesteps, other.channels
            )));
        }
        let zip = |a: &[f32], b: &[f32], f: fn(f32, f32) -> f32| -> Vec<f32> {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(ActivationStats {
            timesteps: self.timesteps,
            channels: self.channels,
            absmax: zip(&self.absmax, &other.absmax, f32::max),
            run_min: zip(&self.run_min, &other.run_min, f32::min),
            run_max: zip(&self.run_max, &other.run_max, f32::max),
            samples_seen: self
                .samples_seen
                .iter()
                .zip(&other.samples_seen)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Tensor form: absmax (`T × k`) and min/max (`2 × k`, zeros while empty).
    pub fn to_matrices(&self) -> (Matrix, Matrix, StatsSidecar) {
        let absmax = Matrix::from_parts(self.timesteps, self.channels, self.absmax.clone());
        let finite = |v: f32| if v.is_finite() { v } else { 0.0 };
        let mut minmax: Vec<f32> = self.run_min.iter().map(|&v| finite(v)).collect();
        minmax.extend(self.run_max.iter().map(|&v| finite(v)));
        let minmax = Matrix::from_parts(2, self.channels, minmax);
        let sidecar = StatsSidecar {
            timesteps: self.timesteps,
            k: self.channels,
            samples_seen: self.samples_seen.clone(),
        };
        (absmax, minmax, sidecar)
    }

    pub fn from_matrices(absmax: &Matrix, minmax: &Matrix, sidecar: &StatsSidecar) -> Result<Self> {
        let (t, k) = (sidecar.timesteps, sidecar.k);
        if absmax.shape() != (t, k) || minmax.shape() != (2, k) || sidecar.samples_seen.len() != t {
            return Err(Error::ShapeMismatch(format!(
                "stats tensors {:?} / {:?} do not match sidecar T={t} k={k}",
                absmax.shape(),
                minmax.shape()
            )));
        }
        if absmax.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Format("negative absmax in statistics".into()));
        }
        let mut stats = ActivationStats::new(t, k)?;
        stats.absmax = absmax.data().to_vec();
        stats.samples_seen = sidecar.samples_seen.clone();
        if stats.total_samples() > 0 {
            stats.run_min = minmax.row(0).to_vec();
            stats.run_max = minmax.row(1).to_vec();
        }
        Ok(stats)
    }
}
