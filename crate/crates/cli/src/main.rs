use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tdr_core::commands::{run, Command, Overrides, RunConfig, RunSummary};
use tdr_core::training::Variant;

/// Targeted doubly robust experiments.
#[derive(Parser, Debug)]
#[command(name = "tdr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Worker threads for replicate and seed fan-out.
    #[arg(long, global = true, env = "TDR_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Semi-synthetic relative-error table.
    Synth(Common),
    /// Monte-Carlo bias and variance checks; exits nonzero on failure.
    Mc(Common),
    /// Train variants and evaluate on the test set.
    Train(Common),
    /// Evaluate saved checkpoints.
    Eval(Common),
    /// Propensity clipping sweep.
    Sweep(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variant name such as TDR_CL.
    #[arg(long)]
    variant: Option<Variant>,
    /// Propensity clipping threshold.
    #[arg(long)]
    clip: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<bool> {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let (command, common) = match cli.command {
        Cmd::Synth(c) => (Command::Synth, c),
        Cmd::Mc(c) => (Command::Mc, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
    };
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        command: Some(command),
        seed: common.seed,
        out: common.out,
        variant: common.variant,
        clip: common.clip,
    });
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(command.to_string()));
    let summary = run(&cfg, &out).with_context(|| format!("{command} run"))?;
    report(&summary);
    println!("results in {}", out.display());
    Ok(summary.passed())
}

fn report(summary: &RunSummary) {
    match summary {
        RunSummary::Synth(tables) => {
            for (seed, t) in tables {
                println!("seed {seed}");
                for row in &t.summary {
                    println!(
                        "  {:<7} {:<6} {:.4} ± {:.4}",
                        row.scenario.to_string(),
                        row.estimator.to_string(),
                        row.mean_re,
                        row.sd_re
                    );
                }
            }
        }
        RunSummary::Mc(o) => {
            for c in &o.checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} seed {} [{}] {}: {}", c.seed, c.group, c.check, c.detail);
            }
        }
        RunSummary::Train(rows) | RunSummary::Sweep(tdr_core::commands::SweepOutcome { rows, .. }) => {
            for r in rows {
                println!(
                    "{:<9} seed {:<3} clip {:.2}  MSE {:.4}  AUC {:.4}  N@5 {:.4}  N@10 {:.4}",
                    r.variant, r.seed, r.clip, r.mse, r.auc, r.ndcg5, r.ndcg10
                );
            }
            if let RunSummary::Sweep(o) = summary {
                for f in &o.flags {
                    println!(
                        "clip {:.2}: {} >= {} in {}/{} seeds",
                        f.clip, f.focus, f.comparator, f.wins, f.seeds
                    );
                }
            }
        }
        RunSummary::Eval(rows) => {
            for r in rows {
                println!(
                    "{} seed {}  MSE {:.4}  AUC {:.4}  N@5 {:.4}  N@10 {:.4}",
                    r.checkpoint, r.seed, r.mse, r.auc, r.ndcg5, r.ndcg10
                );
            }
        }
    }
}
