use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use commformer::{
    config::ConfigError, evaluate_checkpoint, plot, resume, train, HarnessError, RunConfig,
};
use commformer_core::gradsuite::{run_suite, SUITE_TOL};
use commformer_core::relformer::ActMode;

#[derive(Parser)]
#[command(
    name = "commformer",
    version,
    about = "Learned sparse communication graphs for cooperative MARL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and its communication graph.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on fresh episodes.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Turn a run's metrics and snapshots into CSV tables and SVG frames.
    PlotData {
        /// Run directory.
        run: PathBuf,
        /// Output directory (default: <run>/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    /// Edges per row; overrides the sparsity-derived budget.
    #[arg(long)]
    k: Option<usize>,
    /// Stage-1 env-step budget.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// 1, 2 or both.
    #[arg(long)]
    stage: Option<String>,
    /// Evaluate with dynamic gating at the end of the run.
    #[arg(long)]
    dyn_gate: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// f32 or f64.
    #[arg(long)]
    dtype: Option<String>,
    /// Any config key, e.g. `--set train.lr=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue the run in this directory from its latest checkpoint.
    #[arg(long, conflicts_with_all = ["config", "env", "agents", "sparsity", "k", "steps", "seed", "stage", "out", "dtype", "overrides"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, or a run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Apply the trained gates at every step.
    #[arg(long)]
    dyn_gate: bool,
    /// Sample actions instead of taking the most likely one.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn build_config(a: &TrainArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_file(p)?;
    }
    let flags = [
        ("env", a.env.clone()),
        ("agents", a.agents.map(|v| v.to_string())),
        ("sparsity", a.sparsity.map(|v| v.to_string())),
        ("k", a.k.map(|v| v.to_string())),
        ("steps", a.steps.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("stage", a.stage.clone()),
        ("dtype", a.dtype.clone()),
        ("dyn_gate", a.dyn_gate.then(|| "true".to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: kv.clone(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(out) = &a.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) -> Result<(), HarnessError> {
    let s = serde_json::to_string_pretty(v).map_err(|source| HarnessError::Json {
        path: "<stdout>".into(),
        source,
    })?;
    println!("{s}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(a) => {
            let (dir, manifest) = match &a.resume {
                Some(dir) => (dir.clone(), resume(dir)?),
                None => train(&build_config(&a)?)?,
            };
            eprintln!("run written to {}", dir.display());
            print_json(&manifest)
        }
        Command::Eval(a) => {
            let mode = if a.sample {
                ActMode::Sample
            } else {
                ActMode::Greedy
            };
            print_json(&evaluate_checkpoint(
                &a.checkpoint,
                a.episodes,
                a.dyn_gate,
                mode,
                a.seed,
            )?)
        }
        Command::Gradcheck { seed } => {
            let outcomes = run_suite(seed)?;
            let mut failed = 0;
            for o in &outcomes {
                let status = if o.report.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!o.report.passed());
                println!(
                    "{status:4} {:32} max_rel_err={:.3e} entries={} {:.2}s",
                    o.name, o.report.max_rel_err, o.report.entries_checked, o.seconds
                );
                if let (false, Some((name, idx))) = (o.report.passed(), &o.report.worst) {
                    println!(
                        "     worst {name}[{idx}]: analytic {:.6e}, numeric {:.6e}",
                        o.report.analytic_at_worst, o.report.numeric_at_worst
                    );
                }
            }
            if failed > 0 {
                eprintln!("{failed} check(s) above the {SUITE_TOL:e} tolerance");
                return Err(commformer_core::Error::Numeric("gradient check failed".into()).into());
            }
            Ok(())
        }
        Command::PlotData { run, out } => {
            let out = out.unwrap_or_else(|| run.join("plots"));
            let written = plot::export(&run, &out)?;
            eprintln!("{} files written to {}", written.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
