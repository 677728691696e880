//! Quantized linear layer: smoothing, quantized core, optional low-rank adapter.
//!
//! Activations enter as `k × n` (channels × tokens) and outputs leave as
//! `m × n`, i.e. every layer computes `Wᵀ X` for a `k × m` weight. The
//! quantized path is simulated: integers are dequantized and the matmul is
//! accumulated in `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::ActivationStats;
use crate::error::{Error, Result};
use crate::lowrank::{build_adapter, LowRankAdapter};
use crate::quant::{dequantize, fake_quant, quantize, quantize_value, symmetric_scale, BitWidth, QuantizedTensor};
use crate::smooth::{compute_scales, ScalesSidecar, SmoothingMode, SmoothingScales};
use crate::tensor::{absmax_per_channel, frobenius_norm, read_tensor, write_tensor, ChannelAxis, Matrix, TensorFile};

/// Upper (and negated lower) bound on reported SQNR.
pub const SQNR_CAP_DB: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    /// Per-timestep factors; the weight is re-folded with `s(t)` and
    /// re-quantized on every call.
    SqdReference,
    /// Per-timestep factors; one core quantized against the per-channel
    /// maximum factor, with `s(t)/s̄` carried in the activation dequant scale.
    SqdFolded,
    /// One static factor row and fixed activation scales from calibration.
    Sqs,
    /// No smoothing; dynamic per-channel activation scales.
    Unsmoothed,
}

impl ExecMode {
    pub fn smoothing_mode(self) -> Option<SmoothingMode> {
        match self {
            ExecMode::SqdReference | ExecMode::SqdFolded => Some(SmoothingMode::Dynamic),
            ExecMode::Sqs => Some(SmoothingMode::Static),
            ExecMode::Unsmoothed => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub mode: ExecMode,
    pub weight_bits: BitWidth,
    pub act_bits: BitWidth,
    pub alpha: f32,
    /// Adapter rank; `None` builds no adapter.
    pub rank: Option<usize>,
    /// Skip every quantizer. Used to check the smoothing algebra in isolation.
    pub bypass_quantization: bool,
}

impl LayerConfig {
    pub fn new(mode: ExecMode, weight_bits: BitWidth, act_bits: BitWidth) -> Self {
        Self {
            mode,
            weight_bits,
            act_bits,
            alpha: crate::smooth::DEFAULT_ALPHA,
            rank: None,
            bypass_quantization: false,
        }
    }

    pub fn with_rank(mut self, rank: Option<usize>) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn bypassed(mut self) -> Self {
        self.bypass_quantization = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
enum WeightCore {
    Quantized(QuantizedTensor),
    Exact(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLinearLayer {
    mode: ExecMode,
    weight_bits: BitWidth,
    act_bits: BitWidth,
    core: WeightCore,
    smoothing: SmoothingScales,
    /// Factor the stored core was folded with (`max_t s(t)` per channel).
    storage_scale: Vec<f32>,
    /// Fixed activation quantization scales on smoothed activations (SQS only).
    act_scales: Option<Vec<f32>>,
    adapter: Option<LowRankAdapter>,
    /// Full-precision weight kept by the reference path for per-call re-folding.
    master: Option<Matrix>,
    core_dequant: Matrix,
}

impl QuantLinearLayer {
    pub fn build(w: &Matrix, stats: &ActivationStats, cfg: &LayerConfig) -> Result<Self> {
        if w.rows() != stats.channels() {
            return Err(Error::ShapeMismatch(format!(
                "weight has {} input channels, statistics track {}",
                w.rows(),
                stats.channels()
            )));
        }
        let smoothing = match cfg.mode.smoothing_mode() {
            Some(mode) => compute_scales(stats, w, cfg.alpha, mode)?,
            None => SmoothingScales::identity(w.rows()),
        };
        Self::build_with_scales(w, stats, smoothing, cfg)
    }

    /// Like [`build`](Self::build) but with precomputed smoothing factors.
    /// `cfg.alpha` is ignored in favour of the factors' own.
    pub fn build_with_scales(
        w: &Matrix,
        stats: &ActivationStats,
        smoothing: SmoothingScales,
        cfg: &LayerConfig,
    ) -> Result<Self> {
        if w.rows() != stats.channels() || smoothing.channels() != w.rows() {
            return Err(Error::ShapeMismatch(format!(
                "weight has {} input channels, statistics track {}, smoothing covers {}",
                w.rows(),
                stats.channels(),
                smoothing.channels()
            )));
        }
        let smoothing = match cfg.mode.smoothing_mode() {
            Some(_) => smoothing,
            None => SmoothingScales::identity(w.rows()),
        };
        let act_scales = match cfg.mode {
            ExecMode::Sqs => {
                let s = smoothing.at(0)?;
                Some(
                    stats
                        .static_range()?
                        .iter()
                        .zip(s)
                        .map(|(&r, &s)| symmetric_scale(r / s, cfg.act_bits))
                        .collect(),
                )
            }
            _ => None,
        };
        let storage_scale = smoothing.fold_max();
        let folded = w.scale_rows(&storage_scale)?;
        let core = if cfg.bypass_quantization {
            WeightCore::Exact(folded)
        } else {
            WeightCore::Quantized(quantize(&folded, cfg.weight_bits, ChannelAxis::OutputChannel))
        };
        let mut layer = Self::assemble(
            cfg.mode,
            cfg.weight_bits,
            cfg.act_bits,
            core,
            smoothing,
            act_scales,
            None,
            (cfg.mode == ExecMode::SqdReference).then(|| w.clone()),
        )?;
        if let Some(rank) = cfg.rank {
            layer.adapter = Some(build_adapter(w, &layer.stored_weight()?, rank)?);
        }
        Ok(layer)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        mode: ExecMode,
        weight_bits: BitWidth,
        act_bits: BitWidth,
        core: WeightCore,
        smoothing: SmoothingScales,
        act_scales: Option<Vec<f32>>,
        adapter: Option<LowRankAdapter>,
        master: Option<Matrix>,
    ) -> Result<Self> {
        let core_dequant = match &core {
            WeightCore::Quantized(q) => {
                if q.axis() != ChannelAxis::OutputChannel {
                    return Err(Error::Format("weight core must be quantized per output channel".into()));
                }
                dequantize(q)
            }
            WeightCore::Exact(m) => m.clone(),
        };
        let (k, m) = core_dequant.shape();
        if smoothing.channels() != k {
            return Err(Error::ShapeMismatch(format!(
                "smoothing covers {} channels, core has {k}",
                smoothing.channels()
            )));
        }
        if mode.smoothing_mode().is_some_and(|sm| sm != smoothing.mode()) {
            return Err(Error::Format(format!("{mode:?} layer with {:?} smoothing", smoothing.mode())));
        }
        if (mode == ExecMode::Sqs) != act_scales.is_some() || act_scales.as_ref().is_some_and(|a| a.len() != k) {
            return Err(Error::Format("activation scales must be present exactly for SQS layers".into()));
        }
        if (mode == ExecMode::SqdReference) != master.is_some()
            || master.as_ref().is_some_and(|w| w.shape() != (k, m))
        {
            return Err(Error::Format("master weight must be present exactly for reference layers".into()));
        }
        if let Some(ad) = &adapter {
            if ad.input_channels() != k || ad.output_channels() != m {
                return Err(Error::ShapeMismatch(format!(
                    "adapter {}x{} for a {k}x{m} layer",
                    ad.input_channels(),
                    ad.output_channels()
                )));
            }
        }
        let storage_scale = smoothing.fold_max();
        Ok(Self {
            mode,
            weight_bits,
            act_bits,
            core,
            smoothing,
            storage_scale,
            act_scales,
            adapter,
            master,
            core_dequant,
        })
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn weight_bits(&self) -> BitWidth {
        self.weight_bits
    }

    pub fn act_bits(&self) -> BitWidth {
        self.act_bits
    }

    pub fn input_channels(&self) -> usize {
        self.core_dequant.rows()
    }

    pub fn output_channels(&self) -> usize {
        self.core_dequant.cols()
    }

    pub fn smoothing(&self) -> &SmoothingScales {
        &self.smoothing
    }

    pub fn adapter(&self) -> Option<&LowRankAdapter> {
        self.adapter.as_ref()
    }

    pub fn core(&self) -> Option<&QuantizedTensor> {
        match &self.core {
            WeightCore::Quantized(q) => Some(q),
            WeightCore::Exact(_) => None,
        }
    }

    pub fn act_scales(&self) -> Option<&[f32]> {
        self.act_scales.as_deref()
    }

    pub fn is_bypassed(&self) -> bool {
        matches!(self.core, WeightCore::Exact(_))
    }

    pub fn without_adapter(&self) -> Self {
        Self {
            adapter: None,
            ..self.clone()
        }
    }

    /// Dequantized core mapped back to unsmoothed coordinates (`Ŵ`).
    pub fn stored_weight(&self) -> Result<Matrix> {
        self.core_dequant.div_rows(&self.storage_scale)
    }

    /// `Ŵ + A·Bᵀ`, the weight the layer effectively applies.
    pub fn effective_weight(&self) -> Result<Matrix> {
        let base = self.stored_weight()?;
        match &self.adapter {
            Some(ad) => base.add(&ad.product()),
            None => Ok(base),
        }
    }

    /// `‖W − W̃‖_F` against the original weight.
    pub fn weight_error(&self, w: &Matrix) -> Result<f64> {
        Ok(frobenius_norm(&w.sub(&self.effective_weight()?)?))
    }

    pub fn forward(&self, x: &Matrix, t: usize) -> Result<Matrix> {
        let k = self.input_channels();
        if x.rows() != k {
            return Err(Error::ShapeMismatch(format!(
                "activation has {} channels, layer expects {k}",
                x.rows()
            )));
        }
        let s = self.smoothing.at(t)?;
        let bypass = self.is_bypassed();
        let y = match self.mode {
            ExecMode::SqdReference => {
                let master = self.master.as_ref().expect("reference layers keep the master weight");
                let refolded = master.scale_rows(s)?;
                let w_t = if bypass {
                    refolded
                } else {
                    fake_quant(&refolded, self.weight_bits, ChannelAxis::OutputChannel)
                };
                let xq = self.quantize_activation_dynamic(&x.div_rows(s)?, None, bypass)?;
                w_t.t_matmul(&xq)?
            }
            ExecMode::SqdFolded => {
                let correction: Vec<f32> = s.iter().zip(&self.storage_scale).map(|(a, b)| a / b).collect();
                let xq = self.quantize_activation_dynamic(&x.div_rows(s)?, Some(&correction), bypass)?;
                self.core_dequant.t_matmul(&xq)?
            }
            ExecMode::Sqs => {
                let x_hat = x.div_rows(s)?;
                let xq = if bypass {
                    x_hat
                } else {
                    let scales = self.act_scales.as_ref().expect("SQS layers carry activation scales");
                    crate::quant::fake_quant_with_scales(&x_hat, self.act_bits, ChannelAxis::InputChannel, scales)?
                };
                self.core_dequant.t_matmul(&xq)?
            }
            ExecMode::Unsmoothed => {
                let xq = self.quantize_activation_dynamic(x, None, bypass)?;
                self.core_dequant.t_matmul(&xq)?
            }
        };
        match &self.adapter {
            Some(ad) => y.add(&ad.apply(x)?),
            None => Ok(y),
        }
    }

    /// Per-input-channel quantization with scales taken from `x` itself; the
    /// dequantized row `j` is multiplied by `dequant_factor[j]` when given.
    fn quantize_activation_dynamic(&self, x: &Matrix, dequant_factor: Option<&[f32]>, bypass: bool) -> Result<Matrix> {
        if bypass {
            return match dequant_factor {
                Some(f) => x.scale_rows(f),
                None => Ok(x.clone()),
            };
        }
        let bits = self.act_bits;
        let absmax = absmax_per_channel(x, ChannelAxis::InputChannel);
        let mut data = Vec::with_capacity(x.len());
        for (j, &a) in absmax.iter().enumerate() {
            let scale = symmetric_scale(a, bits);
            let deq = dequant_factor.map_or(scale, |f| scale * f[j]);
            data.extend(x.row(j).iter().map(|&v| quantize_value(v, scale, bits) as f32 * deq));
        }
        Matrix::new(x.rows(), x.cols(), data)
    }

    pub fn footprint(&self) -> Footprint {
        let (k, m) = (self.input_channels(), self.output_channels());
        let mut fp = Footprint::default();
        match &self.core {
            WeightCore::Quantized(q) => {
                fp.core_payload = q.payload().len() as u64;
                fp.weight_scales = q.scales().len() as u64 * 4;
            }
            WeightCore::Exact(_) => fp.unquantized += (k * m * 4) as u64,
        }
        if self.mode != ExecMode::Unsmoothed {
            fp.smoothing = (self.smoothing.rows() * k * 4) as u64;
        }
        fp.act_scales = self.act_scales.as_ref().map_or(0, |a| a.len() as u64 * 4);
        fp.adapter = self.adapter.as_ref().map_or(0, |a| a.footprint_bytes() as u64);
        if self.master.is_some() {
            fp.unquantized += (k * m * 4) as u64;
        }
        fp
    }

    /// Writes `manifest.json` plus DITQ tensors into `dir`.
    pub fn save_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let core = self
            .core()
            .ok_or_else(|| Error::Config("bypassed layers cannot be serialized".into()))?;
        fs::create_dir_all(dir)?;
        write_tensor(&TensorFile::Quantized(core.clone()), dir.join("core.ditq"))?;
        let (s, _) = self.smoothing.to_matrix();
        write_tensor(&TensorFile::F32(s), dir.join("smoothing.ditq"))?;
        if let Some(a) = &self.act_scales {
            let m = Matrix::new(1, a.len(), a.clone())?;
            write_tensor(&TensorFile::F32(m), dir.join("scales.ditq"))?;
        }
        if let Some(ad) = &self.adapter {
            write_tensor(&TensorFile::F16(ad.a().clone()), dir.join("adapter_a.ditq"))?;
            write_tensor(&TensorFile::F16(ad.b().clone()), dir.join("adapter_b.ditq"))?;
        }
        if let Some(w) = &self.master {
            write_tensor(&TensorFile::F32(w.clone()), dir.join("master.ditq"))?;
        }
        let manifest = BundleManifest {
            mode: self.mode,
            bits: BundleBits {
                weight: self.weight_bits.bits(),
                activation: self.act_bits.bits(),
            },
            k: self.input_channels(),
            m: self.output_channels(),
            rank: self.adapter.as_ref().map(|a| a.rank()),
            alpha: self.smoothing.alpha(),
            timesteps: self.smoothing.rows(),
            smoothing_mode: self.smoothing.mode(),
            sigma: self.adapter.as_ref().map(|a| a.sigma().to_vec()),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: BundleManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let bits = |b: u8| BitWidth::from_bits(b).ok_or_else(|| Error::Format(format!("unsupported bit width {b}")));
        let core = read_tensor(dir.join("core.ditq"))?.into_quantized()?;
        if core.bits() != bits(manifest.bits.weight)? || (core.rows(), core.cols()) != (manifest.k, manifest.m) {
            return Err(Error::Format("core tensor disagrees with manifest".into()));
        }
        let s = read_tensor(dir.join("smoothing.ditq"))?.into_f32()?;
        let smoothing = SmoothingScales::from_matrix(
            &s,
            &ScalesSidecar {
                mode: manifest.smoothing_mode,
                alpha: manifest.alpha,
            },
        )?;
        if smoothing.rows() != manifest.timesteps {
            return Err(Error::Format("smoothing table disagrees with manifest T".into()));
        }
        let act_scales = match manifest.mode {
            ExecMode::Sqs => Some(read_tensor(dir.join("scales.ditq"))?.into_f32()?.into_data()),
            _ => None,
        };
        let adapter = match (&manifest.rank, &manifest.sigma) {
            (Some(r), Some(sigma)) => {
                let a = read_tensor(dir.join("adapter_a.ditq"))?.into_f16()?;
                let b = read_tensor(dir.join("adapter_b.ditq"))?.into_f16()?;
                let ad = LowRankAdapter::new(a, b, sigma.clone())?;
                if ad.rank() != *r {
                    return Err(Error::Format("adapter rank disagrees with manifest".into()));
                }
                Some(ad)
            }
            (None, None) => None,
            _ => return Err(Error::Format("manifest rank and sigma must be given together".into())),
        };
        let master = match manifest.mode {
            ExecMode::SqdReference => Some(read_tensor(dir.join("master.ditq"))?.into_f32()?),
            _ => None,
        };
        Self::assemble(
            manifest.mode,
            bits(manifest.bits.weight)?,
            bits(manifest.bits.activation)?,
            WeightCore::Quantized(core),
            smoothing,
            act_scales,
            adapter,
            master,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleBits {
    pub weight: u8,
    pub activation: u8,
}

/// `manifest.json` of a serialized layer bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub mode: ExecMode,
    pub bits: BundleBits,
    pub k: usize,
    pub m: usize,
    pub rank: Option<usize>,
    pub alpha: f32,
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub smoothing_mode: SmoothingMode,
    pub sigma: Option<Vec<f64>>,
}

/// Full-precision `Wᵀ X` accumulated in `f64`.
pub fn forward_reference(w: &Matrix, x: &Matrix) -> Result<Matrix> {
    w.t_matmul_f64(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rel_frobenius: f64,
    pub sqnr_db: f64,
    pub max_abs: f64,
    pub cosine: f64,
}

/// Running sums from which an [`ErrorReport`] over many output pairs is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorAccumulator {
    ref_energy: f64,
    quant_energy: f64,
    err_energy: f64,
    dot: f64,
    max_abs: f64,
}

impl ErrorAccumulator {
    pub fn add(&mut self, y_ref: &Matrix, y_quant: &Matrix) -> Result<()> {
        if y_ref.shape() != y_quant.shape() {
            return Err(Error::ShapeMismatch(format!(
                "reference {:?} vs quantized {:?}",
                y_ref.shape(),
                y_quant.shape()
            )));
        }
        for (&r, &q) in y_ref.data().iter().zip(y_quant.data()) {
            let (r, q) = (r as f64, q as f64);
            let e = q - r;
            self.ref_energy += r * r;
            self.quant_energy += q * q;
            self.err_energy += e * e;
            self.dot += r * q;
            self.max_abs = self.max_abs.max(e.abs());
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ErrorAccumulator) {
        self.ref_energy += other.ref_energy;
        self.quant_energy += other.quant_energy;
        self.err_energy += other.err_energy;
        self.dot += other.dot;
        self.max_abs = self.max_abs.max(other.max_abs);
    }

    pub fn report(&self) -> ErrorReport {
        let rel_frobenius = if self.ref_energy > 0.0 {
            (self.err_energy / self.ref_energy).sqrt()
        } else {
            self.err_energy.sqrt()
        };
        let sqnr_db = if self.err_energy == 0.0 {
            SQNR_CAP_DB
        } else if self.ref_energy == 0.0 {
            -SQNR_CAP_DB
        } else {
            (10.0 * (self.ref_energy / self.err_energy).log10()).clamp(-SQNR_CAP_DB, SQNR_CAP_DB)
        };
        let cosine = match (self.ref_energy > 0.0, self.quant_energy > 0.0) {
            (false, false) => 1.0,
            (true, true) => (self.dot / (self.ref_energy.sqrt() * self.quant_energy.sqrt())).clamp(-1.0, 1.0),
            _ => 0.0,
        };
        ErrorReport {
            rel_frobenius,
            sqnr_db,
            max_abs: self.max_abs,
            cosine,
        }
    }
}

pub fn error_report(y_ref: &Matrix, y_quant: &Matrix) -> Result<ErrorReport> {
    let mut acc = ErrorAccumulator::default();
    acc.add(y_ref, y_quant)?;
    Ok(acc.report())
}

/// Byte-exact storage breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub core_payload: u64,
    pub weight_scales: u64,
    pub smoothing: u64,
    pub act_scales: u64,
    pub adapter: u64,
    pub unquantized: u64,
}

impl Footprint {
    pub fn total(&self) -> u64 {
        self.core_payload + self.weight_scales + self.smoothing + self.act_scales + self.adapter + self.unquantized
    }

    pub fn fp32_linear(k: usize, m: usize) -> Self {
        Self {
            unquantized: (k * m * 4) as u64,
            ..Self::default()
        }
    }

    /// Quantized `k × m` layer with per-output-channel fp32 scales.
    pub fn quantized_linear(k: usize, m: usize, bits: BitWidth, rank: Option<usize>, smoothing_rows: usize) -> Self {
        Self {
            core_payload: bits.payload_bytes(k * m) as u64,
            weight_scales: (m * 4) as u64,
            smoothing: (smoothing_rows * k * 4) as u64,
            adapter: rank.map_or(0, |r| ((k + m) * r * 2) as u64),
            ..Self::default()
        }
    }
}

impl std::ops::Add for Footprint {
    type Output = Footprint;

    fn add(self, o: Footprint) -> Footprint {
        Footprint {
            core_payload: self.core_payload + o.core_payload,
            weight_scales: self.weight_scales + o.weight_scales,
            smoothing: self.smoothing + o.smoothing,
            act_scales: self.act_scales + o.act_scales,
            adapter: self.adapter + o.adapter,
            unquantized: self.unquantized + o.unquantized,
        }
    }
}

impl std::iter::Sum for Footprint {
    fn sum<I: Iterator<Item = Footprint>>(iter: I) -> Footprint {
        iter.fold(Footprint::default(), |a, b| a + b)
    }
}

/// Layer shapes of a model plus the parameters that stay in fp32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub linear_layers: Vec<(usize, usize)>,
    pub other_fp32_params: u64,
}

impl ModelManifest {
    pub fn fp32_footprint(&self) -> Footprint {
        let mut fp: Footprint = self.linear_layers.iter().map(|&(k, m)| Footprint::fp32_linear(k, m)).sum();
        fp.unquantized += self.other_fp32_params * 4;
        fp
    }

    pub fn quantized_footprint(&self, bits: BitWidth, rank: Option<usize>, smoothing_rows: usize) -> Footprint {
        let mut fp: Footprint = self
            .linear_layers
            .iter()
            .map(|&(k, m)| Footprint::quantized_linear(k, m, bits, rank, smoothing_rows))
            .sum();
        fp.unquantized += self.other_fp32_params * 4;
        fp
    }
}
