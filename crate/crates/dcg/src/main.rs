use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dcg::config::{Config, ConfigError};
use dcg::pipeline::{self, AcceptanceFailure};

#[derive(Debug, Parser)]
#[command(
    name = "dcg",
    version,
    about = "Debiased contrastive retrieval toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a biased click log with a ground-truth sidecar.
    Simulate(Common),
    /// Train a two-tower model and write a checkpoint plus per-epoch history.
    Train(Common),
    /// Evaluate a checkpoint: metrics.json and histogram.csv.
    Eval(Common),
    /// Check the contrastive/IPW equivalence on random tabular instances.
    VerifyTheorem(Common),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(Common),
    /// Encoder-cost counters per training mode.
    Bench(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines. Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Training mode, e.g. clrec_queue_cached.
    #[arg(long)]
    mode: Option<String>,
}

impl Common {
    fn load(&self) -> Result<Config, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        if let Some(w) = self.workers {
            cfg.set("train.workers", &w.to_string())?;
        }
        if let Some(mode) = &self.mode {
            cfg.set("train.mode", mode)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, name) = match &cli.command {
        Command::Simulate(c) => (c, "simulate"),
        Command::Train(c) => (c, "train"),
        Command::Eval(c) => (c, "eval"),
        Command::VerifyTheorem(c) => (c, "verify-theorem"),
        Command::Gradcheck(c) => (c, "gradcheck"),
        Command::Bench(c) => (c, "bench"),
    };
    let cfg = common.load()?;
    let out = &common.out;
    log::info!("{name}: config hash {}", cfg.hash());
    match cli.command {
        Command::Simulate(_) => {
            let s = pipeline::simulate(&cfg, out)?;
            println!(
                "simulated {} users, {} items, {} clicks (exposure gini {:.3}) -> {}",
                s.users,
                s.items,
                s.records,
                s.exposure_gini,
                out.display()
            );
        }
        Command::Train(_) => {
            let s = pipeline::train(&cfg, out)?;
            println!(
                "mode {}: {} train / {} valid instances",
                cfg.train.mode.name(),
                s.train_instances,
                s.valid_instances
            );
            println!(
                "{:>5} {:>12} {:>8} {:>10}",
                "epoch", "mean_loss", "steps", "valid_hr"
            );
            for e in &s.history.epochs {
                let hr = e
                    .valid_hit_rate
                    .map_or("-".to_string(), |h| format!("{h:.4}"));
                println!(
                    "{:>5} {:>12.6} {:>8} {:>10}",
                    e.epoch, e.mean_loss, e.steps, hr
                );
            }
        }
        Command::Eval(_) => {
            let ev = pipeline::eval(&cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&ev.metrics)?);
        }
        Command::VerifyTheorem(_) => {
            let cases = pipeline::verify_theorem(&cfg, out)?;
            let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
            println!(
                "{:>8} {:>10} {:>10} {:>10} {:>6}",
                "instance", "max_tv", "agreement", "ipw_kl", "pass"
            );
            for c in &cases {
                println!(
                    "{:>8} {:>10.5} {:>10.5} {:>10.2e} {:>6}",
                    c.instance,
                    max(&c.tv_contrastive),
                    max(&c.tv_agreement),
                    max(&c.kl_ipw_descent),
                    c.passed
                );
            }
            let failed = cases.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(AcceptanceFailure(format!("{failed} theorem instances failed")).into());
            }
        }
        Command::Gradcheck(_) => {
            let cases = pipeline::gradcheck(&cfg, out)?;
            let tol = cfg.gradcheck.tolerance;
            println!(
                "{:<16} {:<14} {:<14} {:>12} {:>6}",
                "loss", "candidates", "similarity", "max_rel_err", "pass"
            );
            for c in &cases {
                println!(
                    "{:<16} {:<14} {:<14} {:>12.3e} {:>6}",
                    c.loss.name(),
                    c.candidates.name(),
                    c.similarity.name(),
                    c.max_rel_error,
                    c.max_rel_error <= tol
                );
            }
            let failed = cases
                .iter()
                .filter(|c| c.max_rel_error > tol || c.max_rel_error.is_nan())
                .count();
            if failed > 0 {
                return Err(
                    AcceptanceFailure(format!("{failed} gradient checks above {tol:e}")).into(),
                );
            }
        }
        Command::Bench(_) => {
            let r = pipeline::bench(&cfg, out)?;
            println!("B = {}, |Q| = {}", r.batch_size, r.queue_capacity);
            println!(
                "{:<20} {:>10} {:>14} {:>14} {:>16}",
                "mode", "negatives", "item_fwd", "user_fwd", "bytes"
            );
            for row in &r.rows {
                println!(
                    "{:<20} {:>10} {:>14.1} {:>14.1} {:>16.1}",
                    row.mode.name(),
                    row.negatives,
                    row.item_encoder_forwards,
                    row.user_encoder_forwards,
                    row.candidate_bytes_moved
                );
            }
            println!(
                "forward ratio {:.6} (bound {:.6})",
                r.forward_ratio, r.ratio_bound
            );
            if !r.passed() {
                return Err(
                    AcceptanceFailure("cached-queue forward ratio above bound".into()).into(),
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DCG_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else if e.downcast_ref::<AcceptanceFailure>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
