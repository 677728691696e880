//! `ditq`: generate a synthetic workload, calibrate, quantize and evaluate.

mod commands;
mod error;
mod layout;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ditq::qlayer::ExecMode;
use ditq::quant::BitWidth;
use ditq::smooth::SmoothingMode;

use crate::commands::ReportFormat;
use crate::error::{CliError, CliResult};
use crate::layout::Layout;

#[derive(Parser)]
#[command(name = "ditq", version, about = "Timestep-aware post-training quantization toolkit")]
struct Cli {
    /// Working directory for every artifact; relative paths resolve against it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic weights and activation traces.
    Gen {
        /// JSON simulator config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Collect activation statistics and smoothing factors.
    Calibrate {
        /// Migration strength in [0, 1]; defaults to the config value.
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long, value_enum, default_value_t = ModeArg::Dynamic)]
        mode: ModeArg,
    },
    /// Build quantized layer bundles from calibration artifacts.
    Quantize {
        #[arg(long, default_value_t = 8, value_parser = parse_bits)]
        wbits: u8,
        #[arg(long, default_value_t = 8, value_parser = parse_bits)]
        abits: u8,
        /// Low-rank compensation rank [default: 16].
        #[arg(long, conflicts_with = "no_lora")]
        rank: Option<usize>,
        /// Skip the low-rank adapter.
        #[arg(long)]
        no_lora: bool,
        /// Execution path; defaults to `sqd` after dynamic and `sqs` after static calibration.
        #[arg(long, value_enum)]
        exec: Option<ExecArg>,
    },
    /// Evaluate a grid of configurations against the fp32 oracle.
    Eval {
        /// Comma-separated cells such as `fp32,sqd-w8a8,sqs-w4a8-r16`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
    /// Generate, calibrate, quantize and evaluate in memory.
    Run {
        /// JSON simulator config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated cells such as `fp32,sqd-w8a8,sqs-w4a8-r16`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dynamic,
    Static,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sqd,
    Sqdf,
    Sqs,
    Naive,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

fn parse_bits(s: &str) -> Result<u8, String> {
    match s.parse::<u8>() {
        Ok(b) if BitWidth::from_bits(b).is_some() => Ok(b),
        _ => Err(format!("unsupported bit width {s:?}; expected 8 or 4")),
    }
}

fn bits(b: u8) -> BitWidth {
    BitWidth::from_bits(b).expect("validated by the argument parser")
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("DITQ_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DITQ_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let layout = Layout::new(cli.out);
    match cli.command {
        Command::Gen { config, seed } => commands::cmd_gen(&layout, config.as_deref(), seed),
        Command::Calibrate { alpha, mode } => {
            let mode = match mode {
                ModeArg::Dynamic => SmoothingMode::Dynamic,
                ModeArg::Static => SmoothingMode::Static,
            };
            commands::cmd_calibrate(&layout, alpha, mode)
        }
        Command::Quantize {
            wbits,
            abits,
            rank,
            no_lora,
            exec,
        } => {
            let exec = exec.map(|e| match e {
                ExecArg::Sqd => ExecMode::SqdReference,
                ExecArg::Sqdf => ExecMode::SqdFolded,
                ExecArg::Sqs => ExecMode::Sqs,
                ExecArg::Naive => ExecMode::Unsmoothed,
            });
            commands::cmd_quantize(&layout, bits(wbits), bits(abits), rank, no_lora, exec)
        }
        Command::Eval { grid, format } => commands::cmd_eval(&layout, grid.as_deref(), format.into()),
        Command::Run {
            config,
            seed,
            grid,
            format,
        } => commands::cmd_run(&layout, config.as_deref(), seed, grid.as_deref(), format.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
