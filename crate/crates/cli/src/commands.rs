use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ditq::calib::{ActivationStats, StatsSidecar};
use ditq::lowrank::DEFAULT_RANK;
use ditq::qlayer::{ExecMode, Footprint, LayerConfig, QuantLinearLayer};
use ditq::quant::BitWidth;
use ditq::sim::{
    default_grid, evaluate, generate, parse_grid, run_pipeline, BlockLayers, CellModel, GridCell, LayerKind,
    RunReport, SynthBlock, SynthConfig, SynthModel, Trace,
};
use ditq::smooth::{compute_scales, ScalesSidecar, SmoothingMode, SmoothingScales};
use ditq::tensor::{Matrix, TensorFile};

use crate::error::{CliError, CliResult};
use crate::layout::{load_json, load_tensor, read_file, store_json, store_tensor, write_file, Layout};
use crate::manifest::ManifestBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Per-block data that the weights alone do not carry.
#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    channel_scale: Vec<Vec<f32>>,
    outliers: Vec<Vec<usize>>,
}

/// Reads `path` relative to `--out`, falling back to the working directory.
fn locate_config(layout: &Layout, path: &Path) -> PathBuf {
    let under_out = layout.resolve(path);
    if under_out.exists() {
        under_out
    } else {
        path.to_path_buf()
    }
}

pub fn load_config(layout: &Layout, path: Option<&Path>, seed: Option<u64>) -> CliResult<(SynthConfig, Option<PathBuf>)> {
    let (mut cfg, used) = match path {
        Some(p) => {
            let p = locate_config(layout, p);
            let bytes = read_file(&p)?;
            let cfg: SynthConfig = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Usage(format!("cannot parse config {}: {e}", p.display())))?;
            (cfg, Some(p))
        }
        None => (SynthConfig::default(), None),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, used))
}

fn trace_paths(layout: &Layout, cfg: &SynthConfig, ids: impl Iterator<Item = usize>) -> Vec<PathBuf> {
    ids.flat_map(|id| (0..cfg.blocks).map(move |b| (id, b)))
        .map(|(id, b)| layout.trace(id, b))
        .collect()
}

fn model_paths(layout: &Layout, cfg: &SynthConfig) -> Vec<PathBuf> {
    let mut paths = vec![layout.config(), layout.model_meta()];
    for b in 0..cfg.blocks {
        for kind in LayerKind::ALL {
            paths.push(layout.weight(b, kind));
        }
    }
    paths
}

pub fn cmd_gen(layout: &Layout, config: Option<&Path>, seed: Option<u64>) -> CliResult<()> {
    let (cfg, used) = load_config(layout, config, seed)?;
    let mut manifest = ManifestBuilder::start("gen", cfg.seed, used.as_deref());
    if let Some(p) = &used {
        manifest.inputs(layout, std::slice::from_ref(p))?;
    }
    let model = generate(&cfg)?;
    store_json(&layout.config(), &cfg)?;
    store_json(
        &layout.model_meta(),
        &ModelMeta {
            channel_scale: model.blocks.iter().map(|b| b.channel_scale.clone()).collect(),
            outliers: model.blocks.iter().map(|b| b.outliers.clone()).collect(),
        },
    )?;
    for (b, block) in model.blocks.iter().enumerate() {
        for kind in LayerKind::ALL {
            store_tensor(&layout.weight(b, kind), &TensorFile::F32(block.weight(kind).clone()))?;
        }
    }
    let ids: Vec<usize> = cfg.calibration_ids().chain(cfg.evaluation_ids()).collect();
    ids.par_iter().try_for_each(|&id| -> CliResult<()> {
        let trace = model.trace(id);
        for b in 0..cfg.blocks {
            store_tensor(&layout.trace(id, b), &TensorFile::F32(trace.stacked(b)))?;
        }
        Ok(())
    })?;
    let mut outputs = model_paths(layout, &cfg);
    outputs.extend(trace_paths(layout, &cfg, ids.into_iter()));
    manifest.outputs(layout, &outputs)?;
    manifest.finish(layout)?;
    println!(
        "generated {} blocks (k={}, m={}) and {} traces of T={} steps in {}",
        cfg.blocks,
        cfg.k,
        cfg.m,
        cfg.calibration_traces + cfg.eval_traces,
        cfg.timesteps,
        layout.root().display()
    );
    Ok(())
}

pub fn load_model(layout: &Layout) -> CliResult<SynthModel> {
    let cfg: SynthConfig = load_json(&layout.config())?;
    cfg.validate()?;
    let meta: ModelMeta = load_json(&layout.model_meta())?;
    if meta.channel_scale.len() != cfg.blocks || meta.outliers.len() != cfg.blocks {
        return Err(ditq::Error::Format("model metadata does not match the block count".into()).into());
    }
    let blocks = (0..cfg.blocks)
        .map(|b| {
            let qkv = load_tensor(&layout.weight(b, LayerKind::Qkv))?.into_f32()?;
            let ffn = load_tensor(&layout.weight(b, LayerKind::Ffn))?.into_f32()?;
            if qkv.shape() != (cfg.k, 3 * cfg.m) || ffn.shape() != (cfg.k, 4 * cfg.k) {
                return Err(ditq::Error::ShapeMismatch(format!("block {b} weights do not match the config")).into());
            }
            Ok(SynthBlock {
                qkv,
                ffn,
                channel_scale: meta.channel_scale[b].clone(),
                outliers: meta.outliers[b].clone(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(SynthModel { config: cfg, blocks })
}

pub fn load_trace(layout: &Layout, cfg: &SynthConfig, id: usize) -> CliResult<Trace> {
    let per_block = (0..cfg.blocks)
        .map(|b| Ok(load_tensor(&layout.trace(id, b))?.into_f32()?))
        .collect::<CliResult<Vec<Matrix>>>()?;
    let trace = Trace::from_stacked(id, cfg.timesteps, &per_block)?;
    if trace.x(0, 0).shape() != (cfg.k, cfg.tokens) {
        return Err(ditq::Error::ShapeMismatch(format!("trace {id} does not match the config")).into());
    }
    Ok(trace)
}

pub fn cmd_calibrate(layout: &Layout, alpha: Option<f32>, mode: SmoothingMode) -> CliResult<()> {
    let model = load_model(layout)?;
    let cfg = &model.config;
    let alpha = alpha.unwrap_or(cfg.alpha);
    let mut manifest = ManifestBuilder::start("calibrate", cfg.seed, None);
    let mut inputs = model_paths(layout, cfg);
    inputs.extend(trace_paths(layout, cfg, cfg.calibration_ids()));
    manifest.inputs(layout, &inputs)?;

    let traces = cfg
        .calibration_ids()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&id| load_trace(layout, cfg, id))
        .collect::<CliResult<Vec<_>>>()?;
    let stats = model.calibrate(&traces)?;

    let mut outputs = vec![layout.smoothing_sidecar()];
    for (b, (s, block)) in stats.iter().zip(&model.blocks).enumerate() {
        let (absmax, minmax, sidecar) = s.to_matrices();
        store_tensor(&layout.stats_absmax(b), &TensorFile::F32(absmax))?;
        store_tensor(&layout.stats_minmax(b), &TensorFile::F32(minmax))?;
        store_json(&layout.stats_sidecar(b), &sidecar)?;
        outputs.extend([layout.stats_absmax(b), layout.stats_minmax(b), layout.stats_sidecar(b)]);
        for kind in LayerKind::ALL {
            let scales = compute_scales(s, block.weight(kind), alpha, mode)?;
            store_tensor(&layout.smoothing(b, kind), &TensorFile::F32(scales.to_matrix().0))?;
            outputs.push(layout.smoothing(b, kind));
        }
    }
    store_json(&layout.smoothing_sidecar(), &ScalesSidecar { mode, alpha })?;
    manifest.outputs(layout, &outputs)?;
    manifest.finish(layout)?;
    println!(
        "calibrated {} blocks on {} traces ({mode:?} smoothing, alpha {alpha})",
        cfg.blocks, cfg.calibration_traces
    );
    Ok(())
}

fn load_stats(layout: &Layout, cfg: &SynthConfig) -> CliResult<Vec<ActivationStats>> {
    (0..cfg.blocks)
        .map(|b| {
            let absmax = load_tensor(&layout.stats_absmax(b))?.into_f32()?;
            let minmax = load_tensor(&layout.stats_minmax(b))?.into_f32()?;
            let sidecar: StatsSidecar = load_json(&layout.stats_sidecar(b))?;
            let stats = ActivationStats::from_matrices(&absmax, &minmax, &sidecar)?;
            if stats.channels() != cfg.k || stats.timesteps() != cfg.timesteps {
                return Err(ditq::Error::ShapeMismatch(format!("block {b} statistics do not match the config")).into());
            }
            Ok(stats)
        })
        .collect()
}

fn stats_paths(layout: &Layout, cfg: &SynthConfig) -> Vec<PathBuf> {
    (0..cfg.blocks)
        .flat_map(|b| [layout.stats_absmax(b), layout.stats_minmax(b), layout.stats_sidecar(b)])
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerFootprint {
    block: usize,
    layer: LayerKind,
    footprint: Footprint,
    total: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FootprintSummary {
    cell: String,
    layers: Vec<LayerFootprint>,
    total_bytes: u64,
    fp32_bytes: u64,
    reduction: f64,
}

pub fn default_exec_for(mode: SmoothingMode) -> ExecMode {
    match mode {
        SmoothingMode::Dynamic => ExecMode::SqdReference,
        SmoothingMode::Static => ExecMode::Sqs,
    }
}

pub fn cmd_quantize(
    layout: &Layout,
    weight_bits: BitWidth,
    act_bits: BitWidth,
    rank: Option<usize>,
    no_lora: bool,
    exec: Option<ExecMode>,
) -> CliResult<()> {
    let model = load_model(layout)?;
    let cfg = &model.config;
    let mut manifest = ManifestBuilder::start("quantize", cfg.seed, None);
    let sidecar: ScalesSidecar = load_json(&layout.smoothing_sidecar())?;
    let mode = exec.unwrap_or_else(|| default_exec_for(sidecar.mode));
    if mode.smoothing_mode().is_some_and(|m| m != sidecar.mode) {
        return Err(CliError::Usage(format!(
            "{mode:?} needs {:?} smoothing factors but calibration produced {:?}; rerun calibrate with the matching --mode",
            mode.smoothing_mode().unwrap(),
            sidecar.mode
        )));
    }
    let rank = if no_lora { None } else { Some(rank.unwrap_or(DEFAULT_RANK)) };
    let stats = load_stats(layout, cfg)?;
    let mut inputs = model_paths(layout, cfg);
    inputs.extend(stats_paths(layout, cfg));
    inputs.push(layout.smoothing_sidecar());

    let cell = GridCell::quantized(mode, weight_bits, act_bits, rank);
    let label = cell.label();
    let layer_cfg = LayerConfig::new(mode, weight_bits, act_bits).with_alpha(sidecar.alpha).with_rank(rank);
    let set_dir = layout.bundle_set(&label);
    if set_dir.exists() {
        std::fs::remove_dir_all(&set_dir).map_err(|e| CliError::io(&set_dir, e))?;
    }
    let mut outputs = Vec::new();
    let mut layers = Vec::new();
    for (b, (block, s)) in model.blocks.iter().zip(&stats).enumerate() {
        for kind in LayerKind::ALL {
            let path = layout.smoothing(b, kind);
            inputs.push(path.clone());
            let smoothing = SmoothingScales::from_matrix(&load_tensor(&path)?.into_f32()?, &sidecar)?;
            let layer = QuantLinearLayer::build_with_scales(block.weight(kind), s, smoothing, &layer_cfg)?;
            let dir = layout.bundle(&label, b, kind);
            layer.save_bundle(&dir)?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| CliError::io(&dir, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(&dir, err)))
                .collect::<CliResult<_>>()?;
            files.sort();
            outputs.extend(files);
            let footprint = layer.footprint();
            layers.push(LayerFootprint {
                block: b,
                layer: kind,
                footprint,
                total: footprint.total(),
            });
        }
    }
    let total_bytes: u64 = layers.iter().map(|l| l.total).sum();
    let fp32_bytes: u64 = model
        .blocks
        .iter()
        .flat_map(|b| LayerKind::ALL.map(|k| b.weight(k).len() as u64 * 4))
        .sum();
    let summary = FootprintSummary {
        cell: label.clone(),
        layers,
        total_bytes,
        fp32_bytes,
        reduction: 1.0 - total_bytes as f64 / fp32_bytes as f64,
    };
    let summary_path = set_dir.join("footprint.json");
    store_json(&summary_path, &summary)?;
    outputs.push(summary_path);
    manifest.inputs(layout, &inputs)?;
    manifest.outputs(layout, &outputs)?;
    manifest.finish(layout)?;
    println!(
        "{label}: {} bytes, {:.1}% of the {} fp32 bytes",
        summary.total_bytes,
        100.0 * summary.total_bytes as f64 / summary.fp32_bytes as f64,
        summary.fp32_bytes
    );
    Ok(())
}

fn matches_cell(layer: &QuantLinearLayer, cell: &GridCell) -> bool {
    match cell {
        GridCell::Fp32 => false,
        GridCell::Quantized {
            mode,
            weight_bits,
            act_bits,
            rank,
        } => {
            layer.mode() == *mode
                && layer.weight_bits() == *weight_bits
                && layer.act_bits() == *act_bits
                && layer.adapter().map(|a| a.rank()) == *rank
        }
    }
}

fn check_report(report: &RunReport, grid: &[GridCell]) -> CliResult<()> {
    if report.cells.len() != grid.len() {
        return Err(CliError::Assertion(format!(
            "report has {} cells for a grid of {}",
            report.cells.len(),
            grid.len()
        )));
    }
    for c in &report.cells {
        let e = &c.end_to_end;
        if ![e.rel_frobenius, e.sqnr_db, e.max_abs, e.cosine, c.weight_rel_error]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(CliError::Assertion(format!("{} has non-finite metrics", c.label)));
        }
        if c.cell == GridCell::Fp32 && e.rel_frobenius != 0.0 {
            return Err(CliError::Assertion(format!(
                "fp32 baseline differs from the oracle ({})",
                e.rel_frobenius
            )));
        }
    }
    Ok(())
}

fn write_report(layout: &Layout, report: &RunReport, format: ReportFormat) -> CliResult<PathBuf> {
    let path = match format {
        ReportFormat::Json => {
            let path = layout.report("json");
            let mut text = report.to_json()?;
            text.push('\n');
            write_file(&path, text.as_bytes())?;
            path
        }
        ReportFormat::Csv => {
            let path = layout.report("csv");
            write_file(&path, report.to_csv().as_bytes())?;
            path
        }
    };
    Ok(path)
}

fn print_summary(report: &RunReport) {
    println!(
        "{:<16} {:>12} {:>10} {:>10} {:>12} {:>12} {:>10}",
        "cell", "rel_frob", "sqnr_db", "cosine", "weight_rel", "bytes", "seconds"
    );
    for c in &report.cells {
        println!(
            "{:<16} {:>12.4e} {:>10.2} {:>10.6} {:>12.4e} {:>12} {:>10.3}",
            c.label,
            c.end_to_end.rel_frobenius,
            c.end_to_end.sqnr_db,
            c.end_to_end.cosine,
            c.weight_rel_error,
            c.footprint_bytes,
            c.wall_clock_s
        );
    }
}

pub fn cmd_eval(layout: &Layout, grid: Option<&str>, format: ReportFormat) -> CliResult<()> {
    let mut model = load_model(layout)?;
    let grid = match grid {
        Some(g) => parse_grid(g)?,
        None => default_grid(),
    };
    let mut manifest = ManifestBuilder::start("eval", model.config.seed, None);
    let mut inputs = model_paths(layout, &model.config);
    inputs.extend(trace_paths(layout, &model.config, model.config.evaluation_ids()));

    let needs_stats = grid
        .iter()
        .any(|c| *c != GridCell::Fp32 && !layout.bundle_set(&c.label()).exists());
    let stats = if needs_stats {
        let sidecar: ScalesSidecar = load_json(&layout.smoothing_sidecar())?;
        model.config.alpha = sidecar.alpha;
        inputs.push(layout.smoothing_sidecar());
        inputs.extend(stats_paths(layout, &model.config));
        load_stats(layout, &model.config)?
    } else {
        Vec::new()
    };

    let mut cells = Vec::with_capacity(grid.len());
    for cell in &grid {
        let label = cell.label();
        let built = if *cell != GridCell::Fp32 && layout.bundle_set(&label).exists() {
            let layers = (0..model.config.blocks)
                .map(|b| {
                    let mut load = |kind| -> CliResult<QuantLinearLayer> {
                        let dir = layout.bundle(&label, b, kind);
                        let layer = QuantLinearLayer::load_bundle(&dir)?;
                        if !matches_cell(&layer, cell) {
                            return Err(ditq::Error::Format(format!("bundle {} is not a {label} layer", dir.display())).into());
                        }
                        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                            .map_err(|e| CliError::io(&dir, e))?
                            .filter_map(|e| e.ok().map(|e| e.path()))
                            .collect();
                        files.sort();
                        inputs.extend(files);
                        Ok(layer)
                    };
                    Ok(BlockLayers {
                        qkv: load(LayerKind::Qkv)?,
                        ffn: load(LayerKind::Ffn)?,
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            CellModel {
                label,
                cell: *cell,
                layers: Some(layers),
            }
        } else {
            CellModel::build(&model, &stats, *cell)?
        };
        cells.push(built);
    }

    let ids: Vec<usize> = model.config.evaluation_ids().collect();
    let cfg = model.config.clone();
    let load_err = std::sync::Mutex::new(None);
    let report = evaluate(&model, &cells, &ids, |id| {
        load_trace(layout, &cfg, id).map_err(|e| {
            let msg = e.to_string();
            load_err.lock().unwrap().get_or_insert(e);
            ditq::Error::Format(msg)
        })
    });
    let report = match (report, load_err.into_inner().unwrap()) {
        (Err(_), Some(e)) => return Err(e),
        (r, _) => r?,
    };
    check_report(&report, &grid)?;
    let path = write_report(layout, &report, format)?;
    manifest.inputs(layout, &inputs)?;
    manifest.outputs(layout, &[path])?;
    manifest.finish(layout)?;
    print_summary(&report);
    Ok(())
}

pub fn cmd_run(
    layout: &Layout,
    config: Option<&Path>,
    seed: Option<u64>,
    grid: Option<&str>,
    format: ReportFormat,
) -> CliResult<()> {
    let (cfg, used) = load_config(layout, config, seed)?;
    let grid = match grid {
        Some(g) => parse_grid(g)?,
        None => default_grid(),
    };
    let mut manifest = ManifestBuilder::start("run", cfg.seed, used.as_deref());
    if let Some(p) = &used {
        manifest.inputs(layout, std::slice::from_ref(p))?;
    }
    let report = run_pipeline(&cfg, &grid)?;
    check_report(&report, &grid)?;
    let path = write_report(layout, &report, format)?;
    manifest.outputs(layout, &[path])?;
    manifest.finish(layout)?;
    print_summary(&report);
    Ok(())
}
