//! The `vitfreeze` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::gradcheck::{run_suite, GradCheckOptions};
use crate::io::{
    emit_reports, emit_schedule, ensure_writable, load_dataset, parse_config, parse_config_str,
    write_resolved_config, RunConfig,
};
use crate::schedule::LayerSchedule;
use crate::trainer::{predict_speedup, train_with_model, FlopProfile};

pub const THREADS_ENV: &str = "VITFREEZE_THREADS";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SPEEDUP_JSON: &str = "speedup.json";
pub const GRADCHECK_JSON: &str = "gradcheck.json";

/// Progressive layer freezing for ViTs with multi-scale masked image modeling.
#[derive(Debug, Parser)]
#[command(name = "vitfreeze", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with the freeze schedule and write reports and a checkpoint.
    Train(Common),
    /// Write the learning-rate schedule as CSV and SVG without training.
    Schedule(Common),
    /// Evaluate the analytic cost model for the configured schedule.
    PredictSpeedup(Common),
    /// Run the finite-difference gradient suite.
    GradCheck(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; omitted means all defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `trainer.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model preset the config's `model` section is layered over.
    #[arg(long, value_parser = ["vit-toy", "vit-b"])]
    pub preset: Option<String>,
}

impl Common {
    /// Parses the config and applies command-line and environment overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let preset = self.preset.as_deref();
        let mut cfg = match &self.config {
            Some(p) => parse_config(p, preset)?,
            None => parse_config_str("{}", preset)?,
        };
        if let Some(seed) = self.seed {
            cfg.trainer.seed = seed;
        }
        if let Some(threads) = threads_from_env()? {
            cfg.trainer.threads = threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV} must be a non-negative integer, got `{v}`"))?,
        )),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(THREADS_ENV),
    }
}

fn schedule_for(cfg: &RunConfig) -> Result<LayerSchedule> {
    let alpha = cfg.trainer.effective_lr(cfg.schedule.base_lr);
    Ok(LayerSchedule::new(&cfg.schedule, cfg.num_layers(), alpha)?)
}

fn title(cfg: &RunConfig) -> String {
    format!(
        "{} layers, t0 = {}, {:?} spacing, warm-up {}",
        cfg.num_layers(),
        cfg.schedule.t0,
        cfg.schedule.spacing,
        cfg.schedule.warmup_fraction
    )
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_writable(out).with_context(|| format!("output directory {} is not writable", out.display()))?;
    write_resolved_config(cfg, out)?;
    Ok(())
}

#[derive(Serialize)]
struct SpeedupSummary {
    steps: usize,
    freeze_times: Vec<f64>,
    freeze_steps: Vec<usize>,
    predicted_ratio: f64,
    predicted_reduction_pct: f64,
    profile: FlopProfile,
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.resolve()?;
            prepare_out(&cfg, &c.out)?;
            let seed = cfg.trainer.seed;
            let data = load_dataset(&cfg, seed)?;
            let (report, model) = train_with_model(&cfg, &data, seed)?;
            emit_reports(&report, &title(&cfg), &c.out)?;
            model.save_checkpoint(&c.out.join(CHECKPOINT_FILE))?;
            let losses = report.losses();
            println!(
                "steps {}/{}  loss {:.5} -> {:.5}  freezes {}  prunes {}  predicted work ratio {:.4}",
                report.steps_run,
                report.total_steps,
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN),
                report.freeze_events.len(),
                report.prune_events.len(),
                report.predicted_work_ratio
            );
            if let Some(a) = &report.abort {
                eprintln!("aborted at step {}: non-finite loss, terms {:?}", a.step, a.loss_terms);
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Schedule(c) => {
            let cfg = c.resolve()?;
            prepare_out(&cfg, &c.out)?;
            let sched = schedule_for(&cfg)?;
            for p in emit_schedule(&sched, &title(&cfg), &c.out)? {
                println!("wrote {}", p.display());
            }
            for (i, (t, a)) in sched.freeze_times.iter().zip(&sched.initial_lrs).enumerate() {
                println!(
                    "layer {i:2}  t_freeze {t:.6}  alpha0 {a:.6e}  step {}",
                    sched.freeze_step(i, cfg.trainer.steps)
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::PredictSpeedup(c) => {
            let cfg = c.resolve()?;
            prepare_out(&cfg, &c.out)?;
            let sched = schedule_for(&cfg)?;
            let profile = FlopProfile::from_config(&cfg.model, cfg.trainer.batch_size, cfg.trainer.backward_factor);
            let steps = cfg.trainer.steps;
            let ratio = predict_speedup(&profile, &sched, steps);
            let summary = SpeedupSummary {
                steps,
                freeze_steps: (0..sched.num_layers()).map(|i| sched.freeze_step(i, steps)).collect(),
                freeze_times: sched.freeze_times.clone(),
                predicted_ratio: ratio,
                predicted_reduction_pct: 100.0 * (1.0 - ratio),
                profile,
            };
            std::fs::write(c.out.join(SPEEDUP_JSON), serde_json::to_string_pretty(&summary)? + "\n")?;
            println!(
                "predicted work ratio {ratio:.4} ({:.1}% less work than never freezing)",
                summary.predicted_reduction_pct
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck(c) => {
            let cfg = c.resolve()?;
            prepare_out(&cfg, &c.out)?;
            let report = run_suite(&GradCheckOptions::default())?;
            for case in &report.cases {
                let verdict = if case.max_rel_err < report.tolerance { "ok  " } else { "FAIL" };
                println!(
                    "{verdict} {:<20} max rel err {:.3e}  ({} coords over {} seeds)",
                    case.name, case.max_rel_err, case.coords, case.seeds
                );
            }
            std::fs::write(c.out.join(GRADCHECK_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
