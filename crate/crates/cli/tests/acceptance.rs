//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ditq::calib::ActivationStats;
use ditq::lowrank::{build_adapter, residual, truncated_svd};
use ditq::qlayer::{ExecMode, Footprint, LayerConfig, ModelManifest, QuantLinearLayer};
use ditq::quant::{fake_quant, pack_int4, symmetric_scale, unpack_int4, BitWidth};
use ditq::sim::{parse_grid, run_pipeline, GridCell, RunReport, SynthConfig};
use ditq::smooth::{apply_to_activation, apply_to_weight, compute_scales, SmoothingMode, SmoothingScales};
use ditq::tensor::{absmax_per_channel, frobenius_norm, ChannelAxis, Matrix};
use nalgebra::DMatrix;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> Result<(), String> {
    check(elapsed < budget, || format!("took {elapsed:.1?}, budget {budget:?}"))
}

/// Entries of magnitude in `[0.1, 1]` with random sign, so every channel absmax is at least 0.1.
fn nonvanishing_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let v = rng.gen_range(0.1f32..=1.0);
        if rng.gen() { v } else { -v }
    })
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f32..=1.0))
}

/// `Wᵀ X` by a plain triple loop in f64.
fn naive_product(w: &Matrix, x: &Matrix) -> Vec<f64> {
    let (k, m) = w.shape();
    let n = x.cols();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| w.get(p, i) as f64 * x.get(p, j) as f64).sum();
        }
    }
    out
}

fn rel_frobenius(reference: &[f64], got: &Matrix) -> f64 {
    let (mut err, mut norm) = (0.0f64, 0.0f64);
    for (&r, &g) in reference.iter().zip(got.data()) {
        err += (g as f64 - r).powi(2);
        norm += r * r;
    }
    if norm > 0.0 {
        (err / norm).sqrt()
    } else {
        err.sqrt()
    }
}

fn c1_smoothing_invariance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let (k, m, n) = (rng.gen_range(1..=64), rng.gen_range(1..=64), rng.gen_range(1..=64));
        let w = uniform_matrix(&mut rng, k, m);
        let x = uniform_matrix(&mut rng, k, n);
        let s: Vec<f32> = (0..k).map(|_| 2f32.powf(rng.gen_range(-6.0..6.0))).collect();
        let scales = SmoothingScales::new(SmoothingMode::Static, 0.5, 1, k, s).map_err(|e| e.to_string())?;
        let y = apply_to_weight(&w, &scales, 0)
            .and_then(|ws| ws.t_matmul(&apply_to_activation(&x, &scales, 0)?))
            .map_err(|e| e.to_string())?;
        let rel = rel_frobenius(&naive_product(&w, &x), &y);
        worst = worst.max(rel);
        check(rel <= 1e-4, || format!("trial {trial} ({k}x{m}x{n}): rel {rel:.3e}"))?;
    }

    // The same property through full layers with every quantizer bypassed.
    let mut worst_layer = 0.0f64;
    for trial in 0..100 {
        let (k, m, n, t_count) = (rng.gen_range(1..=64), rng.gen_range(1..=64), rng.gen_range(1..=32), rng.gen_range(1..=4));
        let w = uniform_matrix(&mut rng, k, m);
        let xs: Vec<Matrix> = (0..t_count)
            .map(|t| {
                let gain: Vec<f32> = (0..k).map(|_| 2f32.powf(rng.gen_range(-4.0..4.0)) * (1 + t) as f32).collect();
                uniform_matrix(&mut rng, k, n).scale_rows(&gain).unwrap()
            })
            .collect();
        let mut stats = ActivationStats::new(t_count, k).unwrap();
        for (t, x) in xs.iter().enumerate() {
            stats.record(t, x).unwrap();
        }
        for mode in [ExecMode::SqdReference, ExecMode::SqdFolded, ExecMode::Sqs] {
            let layer = QuantLinearLayer::build(&w, &stats, &LayerConfig::new(mode, BitWidth::W8, BitWidth::W8).bypassed())
                .map_err(|e| e.to_string())?;
            for (t, x) in xs.iter().enumerate() {
                let rel = rel_frobenius(&naive_product(&w, x), &layer.forward(x, t).map_err(|e| e.to_string())?);
                worst_layer = worst_layer.max(rel);
                check(rel <= 1e-4, || format!("layer trial {trial} {mode:?} t={t}: rel {rel:.3e}"))?;
            }
        }
    }

    // Exact rational oracle: small integers with power-of-two factors.
    type Q = Ratio<i128>;
    for trial in 0..1000 {
        let (k, m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let wi: Vec<i32> = (0..k * m).map(|_| rng.gen_range(-32..=32)).collect();
        let xi: Vec<i32> = (0..k * n).map(|_| rng.gen_range(-32..=32)).collect();
        let e: Vec<i32> = (0..k).map(|_| rng.gen_range(-5..=5)).collect();
        let w = Matrix::new(k, m, wi.iter().map(|&v| v as f32).collect()).unwrap();
        let x = Matrix::new(k, n, xi.iter().map(|&v| v as f32).collect()).unwrap();
        let s: Vec<f32> = e.iter().map(|&e| 2f32.powi(e)).collect();
        let scales = SmoothingScales::new(SmoothingMode::Static, 0.5, 1, k, s).unwrap();
        let y = apply_to_weight(&w, &scales, 0).unwrap().t_matmul(&apply_to_activation(&x, &scales, 0).unwrap()).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = Q::from_integer(0);
                for p in 0..k {
                    let sp = if e[p] >= 0 { Q::from_integer(1 << e[p]) } else { Q::new(1, 1 << -e[p]) };
                    acc += (Q::from_integer(wi[p * m + i] as i128) * sp) * (Q::from_integer(xi[p * n + j] as i128) / sp);
                }
                let got = y.get(i, j);
                check(got.fract() == 0.0 && acc == Q::from_integer(got as i128), || {
                    format!("rational trial {trial}: {got} vs {acc}")
                })?;
            }
        }
    }
    let elapsed = start.elapsed();
    within_budget(elapsed, Duration::from_secs(10))?;
    Ok(format!(
        "1000 triples worst {worst:.2e}, 300 bypassed layer checks worst {worst_layer:.2e}, 1000 rational instances exact, {elapsed:.1?}"
    ))
}

fn c2_equalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let (k, m, n, t_count) = (rng.gen_range(1..=64), rng.gen_range(1..=64), rng.gen_range(1..=32), rng.gen_range(1..=5));
        let col_gain: Vec<f32> = (0..k).map(|_| 10f32.powf(rng.gen_range(-1.9..2.5))).collect();
        let row_gain: Vec<f32> = (0..k).map(|_| 10f32.powf(rng.gen_range(-1.9..1.0))).collect();
        let w = nonvanishing_matrix(&mut rng, k, m).scale_rows(&row_gain).unwrap();
        let xs: Vec<Matrix> = (0..t_count).map(|_| nonvanishing_matrix(&mut rng, k, n).scale_rows(&col_gain).unwrap()).collect();
        let raw_w = absmax_per_channel(&w, ChannelAxis::InputChannel);
        let mut stats = ActivationStats::new(t_count, k).unwrap();
        for (t, x) in xs.iter().enumerate() {
            stats.record(t, x).unwrap();
        }
        if raw_w.iter().chain(stats.global_absmax().unwrap().iter()).any(|&a| a < 1e-3)
            || (0..t_count).any(|t| stats.absmax_at(t).iter().any(|&a| a < 1e-3))
        {
            return Err(format!("trial {trial}: generator produced an absmax below 1e-3"));
        }
        let scales = compute_scales(&stats, &w, 0.5, SmoothingMode::Dynamic).map_err(|e| e.to_string())?;
        for (t, x) in xs.iter().enumerate() {
            let xa = absmax_per_channel(&apply_to_activation(x, &scales, t).unwrap(), ChannelAxis::InputChannel);
            let wa = absmax_per_channel(&apply_to_weight(&w, &scales, t).unwrap(), ChannelAxis::InputChannel);
            for j in 0..k {
                let rel = ((xa[j] - wa[j]).abs() / wa[j].max(xa[j])) as f64;
                worst = worst.max(rel);
                check(rel <= 1e-5, || format!("trial {trial} t={t} channel {j}: {} vs {}", xa[j], wa[j]))?;
            }
        }
    }
    Ok(format!("100 instances, worst relative gap {worst:.2e}"))
}

fn c3_quantizer_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_ratio = 0.0f64;
    let mut elements = 0usize;
    for bits in [BitWidth::W8, BitWidth::W4] {
        for channel in 0..1000 {
            let len = rng.gen_range(1..=256);
            let magnitude = 10f32.powf(rng.gen_range(-4.0..4.0));
            let row = Matrix::from_fn(1, len, |_, _| rng.gen_range(-1.0f32..=1.0) * magnitude);
            let fq = fake_quant(&row, bits, ChannelAxis::InputChannel);
            let scale = symmetric_scale(absmax_per_channel(&row, ChannelAxis::InputChannel)[0], bits) as f64;
            for (&v, &q) in row.data().iter().zip(fq.data()) {
                let err = (q as f64 - v as f64).abs();
                worst_ratio = worst_ratio.max(err / scale);
                check(err <= scale / 2.0, || {
                    format!("{bits:?} channel {channel}: |{q} - {v}| = {err:e} > scale/2 = {:e}", scale / 2.0)
                })?;
                elements += 1;
            }
        }
    }

    let mut vectors = 0usize;
    for len in 0..=4u32 {
        for code in 0..15usize.pow(len) {
            let values: Vec<i8> = (0..len).map(|i| ((code / 15usize.pow(i)) % 15) as i8 - 7).collect();
            let packed = pack_int4(&values).map_err(|e| e.to_string())?;
            check(packed.len() == (len as usize).div_ceil(2), || format!("{values:?} packed to {} bytes", packed.len()))?;
            let back = unpack_int4(&packed, values.len()).map_err(|e| e.to_string())?;
            check(back == values, || format!("{values:?} came back as {back:?}"))?;
            vectors += 1;
        }
    }
    Ok(format!(
        "2000 channels / {elements} elements, worst |err|/scale {worst_ratio:.4}; {vectors} int4 vectors round-trip"
    ))
}

fn c4_svd_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_sigma, mut worst_tail) = (0.0f64, 0.0f64);
    for trial in 0..200 {
        let (rows, cols) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let m = uniform_matrix(&mut rng, rows, cols);
        let r = rng.gen_range(1..=rows.min(cols));
        let svd = truncated_svd(&m, r).map_err(|e| e.to_string())?;
        let dense = DMatrix::from_fn(rows, cols, |i, j| m.get(i, j) as f64);
        let mut oracle: Vec<f64> = dense.singular_values().iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (i, (&got, &want)) in svd.sigma().iter().zip(&oracle).enumerate() {
            let rel = (got - want).abs() / want;
            worst_sigma = worst_sigma.max(rel);
            check(rel <= 1e-6, || format!("trial {trial} ({rows}x{cols}) σ{i}: {got} vs {want}"))?;
        }
        let tail = oracle[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let approx = svd.reconstruct();
        let compensated = m
            .data()
            .iter()
            .zip(&approx)
            .map(|(&a, &b)| (a as f64 - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if tail > 0.0 {
            let rel = (compensated - tail).abs() / tail;
            worst_tail = worst_tail.max(rel);
            check(rel <= 1e-4, || format!("trial {trial} ({rows}x{cols}, r={r}): {compensated} vs tail {tail}"))?;
        } else {
            let norm = frobenius_norm(&m);
            check(compensated <= 1e-9 * norm.max(1.0), || format!("trial {trial}: full-rank residual {compensated}"))?;
        }
    }
    let elapsed = start.elapsed();
    within_budget(elapsed, Duration::from_secs(30))?;
    Ok(format!(
        "200 matrices, worst σ gap {worst_sigma:.2e}, worst tail gap {worst_tail:.2e}, {elapsed:.1?}"
    ))
}

fn c5_adapter_improvement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut strict = 0usize;
    let mut worst_ratio = 0.0f64;
    for trial in 0..100 {
        let (k, m) = (rng.gen_range(2..=64), rng.gen_range(2..=64));
        let bits = if trial % 2 == 0 { BitWidth::W8 } else { BitWidth::W4 };
        let w = uniform_matrix(&mut rng, k, m);
        let x = uniform_matrix(&mut rng, k, 16);
        let mut stats = ActivationStats::new(1, k).unwrap();
        stats.record(0, &x).unwrap();
        let layer = QuantLinearLayer::build(&w, &stats, &LayerConfig::new(ExecMode::SqdFolded, bits, BitWidth::W8))
            .map_err(|e| e.to_string())?;
        let w_hat = layer.stored_weight().map_err(|e| e.to_string())?;
        let r = rng.gen_range(1..=k.min(m));
        let adapter = build_adapter(&w, &w_hat, r).map_err(|e| e.to_string())?;
        let before = frobenius_norm(&residual(&w, &w_hat).unwrap());
        let after = frobenius_norm(&w.sub(&w_hat.add(&adapter.product()).unwrap()).unwrap());
        let sigma1 = adapter.sigma()[0];
        worst_ratio = worst_ratio.max(after / before);
        check(after <= before * (1.0 + 1e-3), || format!("trial {trial}: {after} > {before}"))?;
        if sigma1 > 0.0 {
            check(after < before, || format!("trial {trial}: σ1 = {sigma1} but {after} !< {before}"))?;
            strict += 1;
        }
    }
    Ok(format!("100 trials, {strict} strict improvements, worst after/before {worst_ratio:.4}"))
}

fn c6_table_ordering() -> Outcome {
    let start = Instant::now();
    let base = SynthConfig::default();
    check(base.outlier_gain >= 50.0 && base.widening_beta >= 4.0, || "default config is not adversarial".into())?;
    let grid = parse_grid("naive-w8a8,sqd-w8a8,sqd-w8a8-r16,sqd-w4a8,sqs-w4a8").map_err(|e| e.to_string())?;
    let (mut a, mut b, mut c) = (0, 0, 0);
    let seeds = 10;
    let mut margins = Vec::new();
    for seed in 0..seeds {
        let report = run_pipeline(&SynthConfig { seed, ..base.clone() }, &grid).map_err(|e| e.to_string())?;
        let get = |label: &str| report.cell(label).expect("grid cell present").clone();
        let (naive, sqd8, lora8, sqd4, sqs4) = (get("naive-w8a8"), get("sqd-w8a8"), get("sqd-w8a8-r16"), get("sqd-w4a8"), get("sqs-w4a8"));
        a += (sqd8.end_to_end.rel_frobenius <= naive.end_to_end.rel_frobenius) as usize;
        b += (sqs4.end_to_end.rel_frobenius > sqd4.end_to_end.rel_frobenius) as usize;
        c += (lora8.weight_rel_error < sqd8.weight_rel_error) as usize;
        margins.push(sqs4.end_to_end.rel_frobenius / sqd4.end_to_end.rel_frobenius);
    }
    let elapsed = start.elapsed();
    let min_margin = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    let summary = format!(
        "(a) SQD<=naive {a}/{seeds}, (b) SQS>SQD at W4A8 {b}/{seeds} (min ratio {min_margin:.4}), (c) LoRA weight error lower {c}/{seeds}, {elapsed:.1?}"
    );
    check(a >= 9 && b >= 9 && c == seeds as usize, || summary.clone())?;
    within_budget(elapsed, Duration::from_secs(300)).map_err(|e| format!("{summary}; {e}"))?;
    Ok(summary)
}

fn c7_size_accounting() -> Outcome {
    check(Footprint::fp32_linear(1024, 1024).total() == 4_194_304, || "fp32 1024x1024".into())?;
    let w8 = Footprint::quantized_linear(1024, 1024, BitWidth::W8, None, 0);
    check(w8.core_payload == 1_048_576 && w8.weight_scales == 4_096 && w8.total() == 1_052_672, || format!("{w8:?}"))?;
    let ad = Footprint::quantized_linear(1024, 1024, BitWidth::W8, Some(16), 0);
    check(ad.adapter == 65_536, || format!("{ad:?}"))?;

    // A built layer against hand arithmetic: 48x40 at W4, rank 8, 3 smoothing rows.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = uniform_matrix(&mut rng, 48, 40);
    let mut stats = ActivationStats::new(3, 48).unwrap();
    for t in 0..3 {
        stats.record(t, &uniform_matrix(&mut rng, 48, 8)).unwrap();
    }
    let layer = QuantLinearLayer::build(&w, &stats, &LayerConfig::new(ExecMode::SqdFolded, BitWidth::W4, BitWidth::W8).with_rank(Some(8)))
        .map_err(|e| e.to_string())?;
    let fp = layer.footprint();
    let hand = 960 + 160 + 3 * 48 * 4 + (48 + 40) * 8 * 2;
    check(fp.total() == hand && fp.core_payload == 960 && fp.adapter == 1408, || format!("{fp:?} vs {hand}"))?;
    let bundle = tempfile::tempdir().map_err(|e| e.to_string())?;
    layer.save_bundle(bundle.path()).map_err(|e| e.to_string())?;
    let header = 4 + 4 + 1 + 1 + 16;
    let file = |name: &str| fs::metadata(bundle.path().join(name)).map(|m| m.len() as usize).unwrap_or(0);
    check(file("core.ditq") == header + 960 + 8 + 160 + 1, || format!("core file {} bytes", file("core.ditq")))?;
    check(file("adapter_a.ditq") + file("adapter_b.ditq") == 2 * header + 1408, || "adapter files".into())?;

    let blocks = 24;
    let manifest = ModelManifest {
        linear_layers: (0..blocks).flat_map(|_| [(1024, 3 * 1024), (1024, 4 * 1024)]).collect(),
        other_fp32_params: 0,
    };
    let fp32 = manifest.fp32_footprint().total() as f64;
    let mut parts = Vec::new();
    for (name, rows) in [("static smoothing", 1), ("100-step smoothing table", 100)] {
        let q = manifest.quantized_footprint(BitWidth::W4, Some(16), rows).total() as f64;
        let reduction = 1.0 - q / fp32;
        check((0.75..=0.88).contains(&reduction), || format!("{name}: reduction {reduction:.4}"))?;
        parts.push(format!("{name} {:.1}%", 100.0 * reduction));
    }
    Ok(format!("hand-computed layers exact; 24-block W4 r16 model: {}", parts.join(", ")))
}

fn c8_latency_ordering() -> Outcome {
    let grid = vec![
        GridCell::quantized(ExecMode::SqdReference, BitWidth::W8, BitWidth::W8, None),
        GridCell::quantized(ExecMode::Sqs, BitWidth::W8, BitWidth::W8, None),
    ];
    let mut lines = Vec::new();
    for run in 0..5 {
        let report = run_pipeline(&SynthConfig::default(), &grid).map_err(|e| e.to_string())?;
        let (sqd, sqs) = (report.cells[0].wall_clock_s, report.cells[1].wall_clock_s);
        lines.push(format!("{sqd:.2}s/{sqs:.2}s"));
        check(sqd >= sqs, || format!("run {run}: SQD {sqd:.3}s < SQS {sqs:.3}s"))?;
    }
    Ok(format!("SQD-reference/SQS per run: {}", lines.join(", ")))
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let key = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(key, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn c9_determinism() -> Outcome {
    let config = r#"{"seed": 42, "k": 32, "m": 32, "tokens": 16, "T": 6, "calibration_traces": 20, "eval_traces": 40}"#;
    let run = |dir: &Path| -> Result<(), String> {
        fs::write(dir.join("config.in.json"), config).map_err(|e| e.to_string())?;
        let steps: [&[&str]; 5] = [
            &["gen", "--config", "config.in.json", "--seed", "42"],
            &["calibrate", "--alpha", "0.5", "--mode", "dynamic"],
            &["quantize", "--wbits", "4", "--abits", "8", "--rank", "16"],
            &["quantize", "--wbits", "8", "--abits", "8", "--no-lora"],
            &["eval"],
        ];
        for args in steps {
            let out = Command::new(env!("CARGO_BIN_EXE_ditq"))
                .arg("--out")
                .arg(dir)
                .args(args)
                .output()
                .map_err(|e| e.to_string())?;
            check(out.status.success(), || {
                format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
            })?;
        }
        Ok(())
    };
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    run(a.path())?;
    run(b.path())?;

    let artifacts = |root: &Path| {
        let mut h = hash_tree(root);
        h.retain(|k, _| !k.starts_with("manifests") && k != "report.json");
        h
    };
    let (ha, hb) = (artifacts(a.path()), artifacts(b.path()));
    check(ha == hb, || {
        let diff: Vec<_> = ha.iter().filter(|(k, v)| hb.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect();
        format!("artifacts differ: {diff:?}")
    })?;

    let report = |root: &Path| -> Result<RunReport, String> {
        let r: RunReport = serde_json::from_slice(&fs::read(root.join("report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        Ok(r.without_timing())
    };
    let (ra, rb) = (report(a.path())?, report(b.path())?);
    check(ra == rb, || "report metrics differ between runs".into())?;

    // Every manifest hash must match the file on disk.
    let mut verified = 0;
    for command in ["gen", "calibrate", "quantize", "eval"] {
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(a.path().join("manifests").join(format!("{command}.json"))).unwrap()).unwrap();
        for section in ["inputs", "outputs"] {
            for (path, hash) in m[section].as_object().unwrap() {
                let on_disk = hex::encode(Sha256::digest(fs::read(a.path().join(path)).map_err(|e| format!("{path}: {e}"))?));
                check(hash.as_str() == Some(on_disk.as_str()), || format!("{command} {section} {path} hash mismatch"))?;
                verified += 1;
            }
        }
    }
    Ok(format!(
        "{} artifacts bit-identical, {} report cells identical, {verified} manifest hashes verified",
        ha.len(),
        ra.cells.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 smoothing invariance", c1_smoothing_invariance),
        ("2 alpha=0.5 equalization", c2_equalization),
        ("3 quantizer bound and int4 packing", c3_quantizer_bound),
        ("4 SVD oracle and Eckart-Young tail", c4_svd_oracle),
        ("5 adapter improvement", c5_adapter_improvement),
        ("6 quality ordering at desk scale", c6_table_ordering),
        ("7 size accounting", c7_size_accounting),
        ("8 latency ordering", c8_latency_ordering),
        ("9 pipeline determinism", c9_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] criterion {name}: {detail} ({secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {name}: {why} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
