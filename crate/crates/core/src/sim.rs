//! Synthetic DiT-like workload and the evaluation harness built on it.
//!
//! Each block owns two linear layers that read the same input: a fused
//! QKV-style projection `k → 3m` and an FFN-style projection `k → 4k`.
//! Activations are per-channel scaled Gaussians with a handful of salient
//! channels, and every value at step `t` is multiplied by the envelope
//! `1 + beta·(1 − t/T)` so ranges widen as denoising runs from `T−1` to `0`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::ActivationStats;
use crate::error::{Error, Result};
use crate::qlayer::{
    forward_reference, ErrorAccumulator, ErrorReport, ExecMode, Footprint, LayerConfig, QuantLinearLayer,
};
use crate::quant::BitWidth;
use crate::tensor::{frobenius_norm, Matrix};

/// Per-channel base activation scales are drawn from `[1 − x, 1 + x]`.
const BASE_SCALE_JITTER: f32 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockOverride {
    pub block: usize,
    #[serde(default)]
    pub outlier_channels: Option<f64>,
    #[serde(default)]
    pub outlier_gain: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub blocks: usize,
    pub k: usize,
    pub m: usize,
    pub tokens: usize,
    #[serde(rename = "T")]
    pub timesteps: usize,
    /// Fraction of input channels that carry the outlier gain.
    pub outlier_channels: f64,
    pub outlier_gain: f32,
    pub widening_beta: f32,
    pub weight_spread: f32,
    pub calibration_traces: usize,
    pub eval_traces: usize,
    pub alpha: f32,
    pub block_overrides: Vec<BlockOverride>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            blocks: 2,
            k: 64,
            m: 64,
            tokens: 16,
            timesteps: 10,
            outlier_channels: 0.05,
            outlier_gain: 100.0,
            widening_beta: 4.0,
            weight_spread: 1.0,
            calibration_traces: 50,
            eval_traces: 200,
            alpha: crate::smooth::DEFAULT_ALPHA,
            block_overrides: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("blocks", self.blocks),
            ("k", self.k),
            ("m", self.m),
            ("tokens", self.tokens),
            ("T", self.timesteps),
            ("calibration_traces", self.calibration_traces),
            ("eval_traces", self.eval_traces),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.outlier_channels) {
            return Err(Error::Config(format!(
                "outlier_channels must lie in [0, 1], got {}",
                self.outlier_channels
            )));
        }
        if !(self.outlier_gain.is_finite() && self.outlier_gain >= 1.0) {
            return Err(Error::Config(format!("outlier_gain must be >= 1, got {}", self.outlier_gain)));
        }
        if !(self.widening_beta.is_finite() && self.widening_beta >= 0.0) {
            return Err(Error::Config(format!("widening_beta must be >= 0, got {}", self.widening_beta)));
        }
        if !(self.weight_spread.is_finite() && self.weight_spread > 0.0) {
            return Err(Error::Config(format!("weight_spread must be positive, got {}", self.weight_spread)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::AlphaOutOfRange(self.alpha));
        }
        for o in &self.block_overrides {
            if o.block >= self.blocks {
                return Err(Error::Config(format!("override for block {} of {}", o.block, self.blocks)));
            }
            if o.outlier_channels.is_some_and(|f| !(0.0..=1.0).contains(&f))
                || o.outlier_gain.is_some_and(|g| !(g.is_finite() && g >= 1.0))
            {
                return Err(Error::Config(format!("invalid override for block {}", o.block)));
            }
        }
        Ok(())
    }

    /// Multiplier applied to every activation at step `t`.
    pub fn envelope(&self, t: usize) -> f32 {
        1.0 + self.widening_beta * (1.0 - t as f32 / self.timesteps as f32)
    }

    pub fn calibration_ids(&self) -> std::ops::Range<usize> {
        0..self.calibration_traces
    }

    pub fn evaluation_ids(&self) -> std::ops::Range<usize> {
        self.calibration_traces..self.calibration_traces + self.eval_traces
    }

    fn block_outliers(&self, block: usize) -> (f64, f32) {
        let o = self.block_overrides.iter().rev().find(|o| o.block == block);
        (
            o.and_then(|o| o.outlier_channels).unwrap_or(self.outlier_channels),
            o.and_then(|o| o.outlier_gain).unwrap_or(self.outlier_gain),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Qkv,
    Ffn,
}

impl LayerKind {
    pub const ALL: [LayerKind; 2] = [LayerKind::Qkv, LayerKind::Ffn];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Qkv => "qkv",
            LayerKind::Ffn => "ffn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBlock {
    pub qkv: Matrix,
    pub ffn: Matrix,
    /// Standard deviation of each input channel before the envelope.
    pub channel_scale: Vec<f32>,
    pub outliers: Vec<usize>,
}

impl SynthBlock {
    pub fn weight(&self, kind: LayerKind) -> &Matrix {
        match kind {
            LayerKind::Qkv => &self.qkv,
            LayerKind::Ffn => &self.ffn,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthModel {
    pub config: SynthConfig,
    pub blocks: Vec<SynthBlock>,
}

/// One prompt's activations: `x(t, b)` is the `k × tokens` input of block `b` at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub id: usize,
    timesteps: usize,
    blocks: usize,
    x: Vec<Matrix>,
}

impl Trace {
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn x(&self, t: usize, block: usize) -> &Matrix {
        &self.x[t * self.blocks + block]
    }

    /// All steps of one block stacked vertically, step `t` at rows `t·k..(t+1)·k`.
    pub fn stacked(&self, block: usize) -> Matrix {
        let first = self.x(0, block);
        let (k, n) = first.shape();
        let mut data = Vec::with_capacity(self.timesteps * k * n);
        for t in 0..self.timesteps {
            data.extend_from_slice(self.x(t, block).data());
        }
        Matrix::new(self.timesteps * k, n, data).expect("trace matrices are finite")
    }

    pub fn from_stacked(id: usize, timesteps: usize, per_block: &[Matrix]) -> Result<Self> {
        if per_block.is_empty() || timesteps == 0 {
            return Err(Error::Format("trace needs at least one block and one step".into()));
        }
        let (rows, n) = per_block[0].shape();
        if rows % timesteps != 0 || per_block.iter().any(|m| m.shape() != (rows, n)) {
            return Err(Error::ShapeMismatch(format!(
                "stacked trace blocks must all be (T·k)×n with T = {timesteps}"
            )));
        }
        let k = rows / timesteps;
        let mut x = Vec::with_capacity(timesteps * per_block.len());
        for t in 0..timesteps {
            for m in per_block {
                x.push(Matrix::new(k, n, m.data()[t * k * n..(t + 1) * k * n].to_vec())?);
            }
        }
        Ok(Self {
            id,
            timesteps,
            blocks: per_block.len(),
            x,
        })
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weight_dist = Normal::new(0.0f32, cfg.weight_spread / (cfg.k as f32).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Uniform::new_inclusive(1.0 - BASE_SCALE_JITTER, 1.0 + BASE_SCALE_JITTER);
    let blocks = (0..cfg.blocks)
        .map(|b| {
            let mut weights = |cols: usize| {
                let data = (0..cfg.k * cols).map(|_| weight_dist.sample(&mut rng)).collect();
                Matrix::new(cfg.k, cols, data)
            };
            let qkv = weights(3 * cfg.m)?;
            let ffn = weights(4 * cfg.k)?;
            let mut channel_scale: Vec<f32> = (0..cfg.k).map(|_| jitter.sample(&mut rng)).collect();
            let (fraction, gain) = cfg.block_outliers(b);
            let count = if fraction > 0.0 {
                ((fraction * cfg.k as f64).round() as usize).clamp(1, cfg.k)
            } else {
                0
            };
            let mut outliers = sample(&mut rng, cfg.k, count).into_vec();
            outliers.sort_unstable();
            for &j in &outliers {
                channel_scale[j] *= gain;
            }
            Ok(SynthBlock {
                qkv,
                ffn,
                channel_scale,
                outliers,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SynthModel {
        config: cfg.clone(),
        blocks,
    })
}

impl SynthModel {
    /// Activation trace `id`; each id has its own random stream.
    pub fn trace(&self, id: usize) -> Trace {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64 + 1);
        let mut x = vec![None; cfg.timesteps * cfg.blocks];
        for t in (0..cfg.timesteps).rev() {
            let env = cfg.envelope(t);
            for (b, block) in self.blocks.iter().enumerate() {
                let mut data = Vec::with_capacity(cfg.k * cfg.tokens);
                for &c in &block.channel_scale {
                    let scale = c * env;
                    data.extend((0..cfg.tokens).map(|_| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        z * scale
                    }));
                }
                x[t * cfg.blocks + b] = Some(Matrix::new(cfg.k, cfg.tokens, data).expect("finite samples"));
            }
        }
        Trace {
            id,
            timesteps: cfg.timesteps,
            blocks: cfg.blocks,
            x: x.into_iter().map(|m| m.expect("every step generated")).collect(),
        }
    }

    /// Collects one statistics table per block from the given traces.
    pub fn calibrate<'a>(&self, traces: impl IntoIterator<Item = &'a Trace>) -> Result<Vec<ActivationStats>> {
        let cfg = &self.config;
        let mut stats = (0..cfg.blocks)
            .map(|_| ActivationStats::new(cfg.timesteps, cfg.k))
            .collect::<Result<Vec<_>>>()?;
        for trace in traces {
            if trace.timesteps != cfg.timesteps || trace.blocks != cfg.blocks {
                return Err(Error::ShapeMismatch(format!(
                    "trace {} has {} steps × {} blocks, model expects {} × {}",
                    trace.id, trace.timesteps, trace.blocks, cfg.timesteps, cfg.blocks
                )));
            }
            for t in (0..cfg.timesteps).rev() {
                for (b, s) in stats.iter_mut().enumerate() {
                    s.record(t, trace.x(t, b))?;
                }
            }
        }
        Ok(stats)
    }
}

/// One column of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridCell {
    Fp32,
    Quantized {
        mode: ExecMode,
        weight_bits: BitWidth,
        act_bits: BitWidth,
        rank: Option<usize>,
    },
}

impl GridCell {
    pub fn quantized(mode: ExecMode, weight_bits: BitWidth, act_bits: BitWidth, rank: Option<usize>) -> Self {
        GridCell::Quantized {
            mode,
            weight_bits,
            act_bits,
            rank,
        }
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

fn mode_tag(mode: ExecMode) -> &'static str {
    match mode {
        ExecMode::SqdReference => "sqd",
        ExecMode::SqdFolded => "sqdf",
        ExecMode::Sqs => "sqs",
        ExecMode::Unsmoothed => "naive",
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridCell::Fp32 => f.write_str("fp32"),
            GridCell::Quantized {
                mode,
                weight_bits,
                act_bits,
                rank,
            } => {
                write!(f, "{}-w{}a{}", mode_tag(*mode), weight_bits.bits(), act_bits.bits())?;
                if let Some(r) = rank {
                    write!(f, "-r{r}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for GridCell {
    type Err = Error;

    /// Parses `fp32` or `<naive|sqd|sqdf|sqs>-w<8|4>a<8|4>[-r<rank>]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse grid cell {s:?}"));
        let s_lower = s.trim().to_ascii_lowercase();
        if s_lower == "fp32" {
            return Ok(GridCell::Fp32);
        }
        let mut parts = s_lower.split('-');
        let mode = match parts.next().ok_or_else(bad)? {
            "sqd" => ExecMode::SqdReference,
            "sqdf" => ExecMode::SqdFolded,
            "sqs" => ExecMode::Sqs,
            "naive" => ExecMode::Unsmoothed,
            _ => return Err(bad()),
        };
        let bits = parts.next().ok_or_else(bad)?;
        let (w, a) = bits
            .strip_prefix('w')
            .and_then(|b| b.split_once('a'))
            .ok_or_else(bad)?;
        let parse_bits = |v: &str| v.parse::<u8>().ok().and_then(BitWidth::from_bits).ok_or_else(bad);
        let (weight_bits, act_bits) = (parse_bits(w)?, parse_bits(a)?);
        let rank = match parts.next() {
            None => None,
            Some(r) => {
                let r: usize = r.strip_prefix('r').and_then(|r| r.parse().ok()).ok_or_else(bad)?;
                if r == 0 {
                    return Err(Error::Config(format!("rank must be positive in {s:?}")));
                }
                Some(r)
            }
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(GridCell::quantized(mode, weight_bits, act_bits, rank))
    }
}

pub fn parse_grid(spec: &str) -> Result<Vec<GridCell>> {
    let cells: Vec<GridCell> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if cells.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(cells)
}

/// Full-precision baseline plus SQD, SQS and SQD with a rank-16 adapter at W8A8 and W4A8.
pub fn default_grid() -> Vec<GridCell> {
    let r = Some(crate::lowrank::DEFAULT_RANK);
    let mut grid = vec![GridCell::Fp32];
    for w in [BitWidth::W8, BitWidth::W4] {
        grid.push(GridCell::quantized(ExecMode::SqdReference, w, BitWidth::W8, None));
        grid.push(GridCell::quantized(ExecMode::Sqs, w, BitWidth::W8, None));
        grid.push(GridCell::quantized(ExecMode::SqdReference, w, BitWidth::W8, r));
    }
    grid
}

/// Quantized layers of every block, in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayers {
    pub qkv: QuantLinearLayer,
    pub ffn: QuantLinearLayer,
}

impl BlockLayers {
    pub fn layer(&self, kind: LayerKind) -> &QuantLinearLayer {
        match kind {
            LayerKind::Qkv => &self.qkv,
            LayerKind::Ffn => &self.ffn,
        }
    }
}

/// A grid cell materialized against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct CellModel {
    pub label: String,
    pub cell: GridCell,
    /// `None` for the full-precision baseline.
    pub layers: Option<Vec<BlockLayers>>,
}

impl CellModel {
    pub fn build(model: &SynthModel, stats: &[ActivationStats], cell: GridCell) -> Result<Self> {
        let layers = match cell {
            GridCell::Fp32 => None,
            GridCell::Quantized {
                mode,
                weight_bits,
                act_bits,
                rank,
            } => {
                if stats.len() != model.blocks.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} statistics tables for {} blocks",
                        stats.len(),
                        model.blocks.len()
                    )));
                }
                let cfg = LayerConfig::new(mode, weight_bits, act_bits)
                    .with_alpha(model.config.alpha)
                    .with_rank(rank);
                let layers = model
                    .blocks
                    .iter()
                    .zip(stats)
                    .map(|(block, s)| {
                        Ok(BlockLayers {
                            qkv: QuantLinearLayer::build(&block.qkv, s, &cfg)?,
                            ffn: QuantLinearLayer::build(&block.ffn, s, &cfg)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Some(layers)
            }
        };
        Ok(Self {
            label: cell.label(),
            cell,
            layers,
        })
    }

    fn forward(&self, model: &SynthModel, block: usize, kind: LayerKind, x: &Matrix, t: usize) -> Result<Matrix> {
        match &self.layers {
            None => forward_reference(model.blocks[block].weight(kind), x),
            Some(layers) => layers[block].layer(kind).forward(x, t),
        }
    }

    fn footprint(&self, model: &SynthModel) -> Footprint {
        match &self.layers {
            None => model
                .blocks
                .iter()
                .flat_map(|b| LayerKind::ALL.map(|kind| b.weight(kind).shape()))
                .map(|(k, m)| Footprint::fp32_linear(k, m))
                .sum(),
            Some(layers) => layers
                .iter()
                .flat_map(|b| LayerKind::ALL.map(|kind| b.layer(kind).footprint()))
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub block: usize,
    pub layer: LayerKind,
    pub error: ErrorReport,
    pub weight_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub cell: GridCell,
    pub end_to_end: ErrorReport,
    pub layers: Vec<LayerReport>,
    /// `‖W − W̃‖_F / ‖W‖_F` pooled over every layer.
    pub weight_rel_error: f64,
    pub footprint: Footprint,
    pub footprint_bytes: u64,
    /// Summed time spent inside forward calls.
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SynthConfig,
    pub calibration_traces: Vec<usize>,
    pub eval_traces: Vec<usize>,
    pub cells: Vec<CellReport>,
}

impl RunReport {
    pub fn cell(&self, label: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// Copy with every wall-clock field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for c in &mut r.cells {
            c.wall_clock_s = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row for each cell's end-to-end result followed by one per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "cell,scope,rel_frobenius,sqnr_db,max_abs,cosine,weight_rel_error,footprint_bytes,wall_clock_s\n",
        );
        for c in &self.cells {
            let mut row = |scope: &str, e: &ErrorReport, w: f64| {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    c.label, scope, e.rel_frobenius, e.sqnr_db, e.max_abs, e.cosine, w, c.footprint_bytes, c.wall_clock_s
                ));
            };
            row("end_to_end", &c.end_to_end, c.weight_rel_error);
            for l in &c.layers {
                row(&format!("block{}.{}", l.block, l.layer.name()), &l.error, l.weight_rel_error);
            }
        }
        out
    }
}

struct TracePartial {
    acc: Vec<ErrorAccumulator>,
    seconds: Vec<f64>,
}

/// Runs every cell over the evaluation traces and compares against the fp32 oracle.
///
/// Traces are processed in parallel; partial sums are combined in trace order
/// so the metrics do not depend on scheduling.
pub fn evaluate<F>(model: &SynthModel, cells: &[CellModel], eval_ids: &[usize], load: F) -> Result<RunReport>
where
    F: Fn(usize) -> Result<Trace> + Sync,
{
    let cfg = &model.config;
    let slots = cfg.blocks * LayerKind::ALL.len();
    let partials = eval_ids
        .par_iter()
        .map(|&id| -> Result<TracePartial> {
            let trace = load(id)?;
            if trace.timesteps != cfg.timesteps || trace.blocks != cfg.blocks {
                return Err(Error::ShapeMismatch(format!("trace {id} does not match the model")));
            }
            let mut p = TracePartial {
                acc: vec![ErrorAccumulator::default(); cells.len() * slots],
                seconds: vec![0.0; cells.len()],
            };
            for t in (0..cfg.timesteps).rev() {
                for (b, block) in model.blocks.iter().enumerate() {
                    let x = trace.x(t, b);
                    for (l, kind) in LayerKind::ALL.into_iter().enumerate() {
                        let y_ref = forward_reference(block.weight(kind), x)?;
                        for (c, cell) in cells.iter().enumerate() {
                            let start = Instant::now();
                            let y = cell.forward(model, b, kind, x, t)?;
                            p.seconds[c] += start.elapsed().as_secs_f64();
                            p.acc[c * slots + b * LayerKind::ALL.len() + l].add(&y_ref, &y)?;
                        }
                    }
                }
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut acc = vec![ErrorAccumulator::default(); cells.len() * slots];
    let mut seconds = vec![0.0; cells.len()];
    for p in &partials {
        for (a, b) in acc.iter_mut().zip(&p.acc) {
            a.merge(b);
        }
        for (a, b) in seconds.iter_mut().zip(&p.seconds) {
            *a += b;
        }
    }

    let reports = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let mut total = ErrorAccumulator::default();
            let (mut err_sq, mut ref_sq) = (0.0f64, 0.0f64);
            let mut layers = Vec::with_capacity(slots);
            for (b, block) in model.blocks.iter().enumerate() {
                for (l, kind) in LayerKind::ALL.into_iter().enumerate() {
                    let a = &acc[c * slots + b * LayerKind::ALL.len() + l];
                    total.merge(a);
                    let w = block.weight(kind);
                    let w_norm = frobenius_norm(w);
                    let w_err = match &cell.layers {
                        None => 0.0,
                        Some(ls) => ls[b].layer(kind).weight_error(w)?,
                    };
                    err_sq += w_err * w_err;
                    ref_sq += w_norm * w_norm;
                    layers.push(LayerReport {
                        block: b,
                        layer: kind,
                        error: a.report(),
                        weight_rel_error: relative(w_err, w_norm),
                    });
                }
            }
            let footprint = cell.footprint(model);
            Ok(CellReport {
                label: cell.label.clone(),
                cell: cell.cell,
                end_to_end: total.report(),
                layers,
                weight_rel_error: relative(err_sq.sqrt(), ref_sq.sqrt()),
                footprint,
                footprint_bytes: footprint.total(),
                wall_clock_s: seconds[c],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RunReport {
        config: cfg.clone(),
        calibration_traces: cfg.calibration_ids().collect(),
        eval_traces: eval_ids.to_vec(),
        cells: reports,
    })
}

fn relative(err: f64, norm: f64) -> f64 {
    if norm > 0.0 {
        err / norm
    } else {
        err
    }
}

/// Generates the model, calibrates on the calibration traces, builds every
/// cell and evaluates it on the held-out traces.
pub fn run_pipeline(cfg: &SynthConfig, grid: &[GridCell]) -> Result<RunReport> {
    if grid.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let model = generate(cfg)?;
    let calibration: Vec<Trace> = cfg.calibration_ids().map(|id| model.trace(id)).collect();
    let stats = model.calibrate(&calibration)?;
    drop(calibration);
    let cells = grid
        .iter()
        .map(|&cell| CellModel::build(&model, &stats, cell))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = cfg.evaluation_ids().collect();
    evaluate(&model, &cells, &ids, |id| Ok(model.trace(id)))
}

/// Deterministic `u64` derived from a seed and a label, for drawing sub-seeds.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(32));
    rng.gen()
}
