//! Command-line front end: `synth`, `train`, `eval`, `sweep`, `gradcheck`.
//!
//! Any `--section.key value` flag overrides the matching config entry. Exit
//! codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{extract_overrides, RunConfig};
use crate::dataio::{synth_regime_series, write_kpi_csv, write_labels};
use crate::error::{Error, ExitClass, Result};
use crate::evaluation::{sweep_components, sweep_latent_dims, write_sweep_csv, SweepRow};
use crate::pipeline::{prepare_data, prepare_with_scaler, run_pipeline};
use crate::trainer::{gradient_check, linearized, tiny_problem, GradCheckOptions, GradCheckReport, Hyperparams};

pub const SYNTH_CSV: &str = "synth.csv";
pub const SYNTH_LABELS: &str = "synth_labels.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const TRAIN_METRICS_FILE: &str = "metrics.json";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Debug, Parser)]
#[command(
    name = "esn-dagmm",
    version,
    about = "Reservoir-encoder Gaussian mixture clustering of KPI time series",
    after_help = "Any config entry can be overridden with a dotted flag, e.g. --train.epochs 50 --model.kind pca_gmm.\nThe ESN_DAGMM_OUTPUT_DIR environment variable replaces output.dir."
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    LatentDim,
    Components,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-regime trace and its label file.
    Synth,
    /// Fit the configured model and write checkpoint, per-epoch report and test metrics.
    Train,
    /// Score a checkpoint on a data split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path; defaults to eval_metrics.json in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latent-dimension and/or component-count sweeps as a long-format CSV.
    Sweep {
        #[arg(long, value_enum, default_value = "both")]
        axis: SweepAxis,
        /// Comma-separated model names; defaults to sweep.models.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        components: Option<Vec<usize>>,
    },
    /// Finite-difference check of the analytic gradients on a tiny seeded model.
    Gradcheck {
        /// Encoder family: esn, mlp or rnn.
        #[arg(long, default_value = "esn")]
        encoder: String,
        #[arg(long, default_value_t = 20)]
        samples_per_block: usize,
        /// Defaults to 1e-4, or 1e-8 with --linear.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Central-difference step; defaults to 1e-5, or 1e-3 with --linear
        /// (the linear loss is quadratic in each weight, so a larger step
        /// only reduces rounding error).
        #[arg(long)]
        step: Option<f64>,
        /// Reuse one sampled set of dropout masks instead of disabling dropout.
        #[arg(long)]
        frozen_dropout: bool,
        /// Identity hidden activations and zero mixture weights.
        #[arg(long)]
        linear: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let (rest, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitClass::Usage as i32;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitClass::Usage as i32 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match dispatch(&cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_class() as i32
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path, overrides)?;
    cfg.apply_env();
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn dispatch(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    match &cli.command {
        Command::Synth => {
            let cfg = load_config(cli.config.as_deref(), overrides)?;
            cmd_synth(&cfg).map(|_| ())
        }
        Command::Train => {
            let cfg = load_config(cli.config.as_deref(), overrides)?;
            cmd_train(&cfg).map(|_| ())
        }
        Command::Eval { checkpoint, split, out } => {
            cmd_eval(checkpoint, cli.config.as_deref(), overrides, split, out.as_deref()).map(|_| ())
        }
        Command::Sweep {
            axis,
            models,
            dims,
            components,
        } => {
            let mut cfg = load_config(cli.config.as_deref(), overrides)?;
            if let Some(m) = models {
                cfg.sweep.models = m.iter().filter(|s| !s.trim().is_empty()).map(|s| s.trim().to_string()).collect();
            }
            if let Some(d) = dims {
                cfg.sweep.latent_dims = d.clone();
            }
            if let Some(k) = components {
                cfg.sweep.components = k.clone();
            }
            cfg.validate_structure()?;
            cmd_sweep(&cfg, *axis).map(|_| ())
        }
        Command::Gradcheck {
            encoder,
            samples_per_block,
            tolerance,
            step,
            frozen_dropout,
            linear,
            seed,
        } => {
            let opts = GradCheckOptions {
                samples_per_block: *samples_per_block,
                step: step.unwrap_or(if *linear { LINEAR_STEP } else { 1e-5 }),
                tolerance: tolerance.unwrap_or(if *linear { LINEAR_TOLERANCE } else { 1e-4 }),
                frozen_dropout: *frozen_dropout,
                seed: *seed,
                ..GradCheckOptions::default()
            };
            let cfg = load_config(cli.config.as_deref(), overrides)?;
            let report = cmd_gradcheck(encoder, &opts, *linear)?;
            ensure_dir(&cfg.output.dir)?;
            write_json(&cfg.output.dir.join(GRADCHECK_FILE), &report)?;
            for b in &report.blocks {
                println!("{:<28} checked {:>3}  max rel error {:.3e}", b.name, b.checked, b.max_rel_error);
            }
            println!(
                "overall max rel error {:.3e} (tolerance {:.1e}): {}",
                report.max_rel_error,
                report.tolerance,
                if report.passed() { "PASS" } else { "FAIL" }
            );
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Numerical(format!("{} gradient entries over tolerance", report.failures.len())))
            }
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Writes the synthetic trace and labels; returns their paths.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let (trace, labels) =
        synth_regime_series(&cfg.synth.to_config(), cfg.seeds.data).map_err(|e| e.in_stage("synth"))?;
    ensure_dir(&cfg.output.dir)?;
    let csv = cfg.output.dir.join(SYNTH_CSV);
    let lab = cfg.output.dir.join(SYNTH_LABELS);
    write_kpi_csv(&csv, &trace, &cfg.data.timestamp_column)?;
    write_labels(&lab, &labels)?;
    log::info!("wrote {} rows to {}", trace.total_steps(), csv.display());
    Ok((csv, lab))
}

/// Ingest, scale, window, split, fit, freeze and write all artifacts.
pub fn cmd_train(cfg: &RunConfig) -> Result<crate::evaluation::MetricsReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let run = run_pipeline(cfg, &data)?;
    ensure_dir(&cfg.output.dir)?;
    let dir = &cfg.output.dir;
    let ckpt = Checkpoint::new(
        &cfg.model.kind,
        cfg,
        data.trace.feature_names.clone(),
        data.scaler.clone(),
        &run.fitted,
    );
    ckpt.save(dir.join(CHECKPOINT_FILE)).map_err(|e| e.in_stage("checkpoint"))?;
    let report = run.report.unwrap_or_default();
    report.write_csv(dir.join(TRAIN_REPORT_FILE))?;
    run.test_metrics.write_json(dir.join(TRAIN_METRICS_FILE))?;
    log::info!(
        "{}: test mse {:.6}, silhouette {:?}",
        cfg.model.kind,
        run.test_metrics.reconstruction_mse,
        run.test_metrics.silhouette
    );
    Ok(run.test_metrics)
}

/// Restores a checkpoint and scores it. The stored configuration is used,
/// with an optional config file replacing it and dotted overrides on top.
pub fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[(String, String)],
    split: &str,
    out: Option<&Path>,
) -> Result<crate::evaluation::MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(Some(p), overrides)?,
        None => RunConfig::from_toml_str(&ckpt.config.to_toml()?, overrides)?,
    };
    cfg.apply_env();
    cfg.validate()?;
    let fitted = ckpt.restore().map_err(|e| e.in_stage("restore"))?;
    let data = prepare_with_scaler(&cfg, ckpt.scaler.clone())?;
    if data.trace.feature_names != ckpt.feature_names {
        return Err(Error::Data(format!(
            "data columns {:?} differ from checkpoint columns {:?}",
            data.trace.feature_names, ckpt.feature_names
        )));
    }
    let windows = data.windows_for(split)?;
    let report = fitted
        .evaluate(&ckpt.model, &windows, split, &cfg)
        .map_err(|e| e.in_stage("evaluate"))?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            ensure_dir(&cfg.output.dir)?;
            cfg.output.dir.join(EVAL_METRICS_FILE)
        }
    };
    report.write_json(&path)?;
    Ok(report)
}

/// Runs the requested sweeps and writes one CSV. Fails only when every cell failed.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.sweep.models.is_empty() {
        return Err(Error::Config("sweep needs at least one model".into()));
    }
    let data = prepare_data(cfg)?;
    let mut rows = Vec::new();
    if matches!(axis, SweepAxis::LatentDim | SweepAxis::Both) {
        rows.extend(sweep_latent_dims(cfg, &data, &cfg.sweep.models, &cfg.sweep.latent_dims)?);
    }
    if matches!(axis, SweepAxis::Components | SweepAxis::Both) {
        rows.extend(sweep_components(cfg, &data, &cfg.sweep.models, &cfg.sweep.components)?);
    }
    ensure_dir(&cfg.output.dir)?;
    write_sweep_csv(cfg.output.dir.join(SWEEP_FILE), &rows)?;
    if rows.iter().all(|r| r.status.starts_with("error")) {
        return Err(Error::Numerical("every sweep cell failed".into()));
    }
    Ok(rows)
}

pub const LINEAR_STEP: f64 = 1e-3;
pub const LINEAR_TOLERANCE: f64 = 1e-8;

/// Gradient check on the seeded tiny problem. `linear` swaps hidden
/// activations for the identity and zeroes both mixture weights.
pub fn cmd_gradcheck(encoder: &str, opts: &GradCheckOptions, linear: bool) -> Result<GradCheckReport> {
    let (model, windows, hp) = tiny_problem(encoder, opts.seed)?;
    let (model, hp) = if linear {
        (
            linearized(&model),
            Hyperparams {
                lambda_energy: 0.0,
                lambda_cov: 0.0,
                ..hp
            },
        )
    } else {
        (model, hp)
    };
    gradient_check(&model, &windows, &hp, opts)
}
