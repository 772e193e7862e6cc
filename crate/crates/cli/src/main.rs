//! `wpcn` — experiment driver for the multi-cell WPCN simulator.
//!
//! Subcommands: `train` (distributed agents), `eval` (frozen
//! checkpoints), `baseline` (naive / pgd per slot), `oracle` (grid
//! search per slot), `aggregate` (multi-seed statistics), `selftest`
//! (invariant suite).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wpcn_core::error::Result;
use wpcn_core::runner::{
    self, evaluate, run_baseline, train, ExperimentConfig, Policy, TrainOutput,
};

#[derive(Parser)]
#[command(name = "wpcn", version, about = "Multi-cell WPCN resource-allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the distributed actor-critic agents.
    Train(RunArgs),
    /// Evaluate trained checkpoints on fresh test slots.
    Eval(EvalArgs),
    /// Run a centralized baseline (naive or pgd) slot by slot.
    Baseline(BaselineArgs),
    /// Run the brute-force grid oracle slot by slot.
    Oracle(RunArgs),
    /// Aggregate per-seed metric files into mean/sd columns.
    Aggregate(AggregateArgs),
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of cells.
    #[arg(long)]
    n_cells: Option<usize>,
    /// Energy-harvesting model: linear | nonlinear.
    #[arg(long)]
    eh_model: Option<String>,
    /// Policy: madrl | naive | pgd | oracle.
    #[arg(long)]
    policy: Option<String>,
    /// Single master seed (replaces the config seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training slots.
    #[arg(long)]
    train_slots: Option<usize>,
    /// Additional key=value overrides (any config key).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(n) = self.n_cells {
            config.n_cells = n;
        }
        if let Some(m) = &self.eh_model {
            config.apply_kv("eh_model", m)?;
        }
        if let Some(p) = &self.policy {
            config.apply_kv("policy", p)?;
        }
        if let Some(s) = self.seed {
            config.seeds = vec![s];
        }
        if let Some(t) = self.train_slots {
            config.train_slots = t;
        }
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                wpcn_core::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'"))
            })?;
            config.apply_kv(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (one seed<N> subdirectory per run).
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory holding the trained seed<N> run directories.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Pick the per-head argmax instead of sampling.
    #[arg(long)]
    greedy_eval: bool,
    /// Number of test slots.
    #[arg(long)]
    test_slots: Option<usize>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Slots to run (alias for train_slots).
    #[arg(long)]
    slots: Option<usize>,
}

#[derive(Args)]
struct AggregateArgs {
    /// Metric CSV files of one policy across seeds.
    files: Vec<PathBuf>,
    /// Output CSV path.
    #[arg(long, default_value = "aggregate.csv")]
    out: PathBuf,
}

fn print_summary(out: &TrainOutput) {
    let s = &out.summary;
    println!(
        "seed {}: policy {} slots {} mean sum rate {:.4} nats/s, final MA {:.4}, skipped {}/{} updates{}",
        s.seed,
        s.policy,
        s.slots,
        s.mean_sum_rate,
        s.final_ma_sum_rate,
        s.skipped_updates,
        s.total_updates,
        if s.failed { " [FAILED]" } else { "" }
    );
}

fn cmd_train(args: &RunArgs) -> Result<bool> {
    let config = args.config.resolve()?;
    let mut all_ok = true;
    for &seed in &config.seeds {
        let out = train(&config, seed, &args.out_dir)?;
        print_summary(&out);
        println!("  metrics: {}", out.metrics_path.display());
        all_ok &= !out.summary.failed;
    }
    Ok(all_ok)
}

fn cmd_eval(args: &EvalArgs) -> Result<bool> {
    let mut config = args.config.resolve()?;
    if args.greedy_eval {
        config.greedy_eval = true;
    }
    if let Some(t) = args.test_slots {
        config.test_slots = t;
    }
    let mut means = Vec::new();
    for &seed in &config.seeds {
        let run_dir = args.out_dir.join(format!("seed{seed}"));
        // Reuse the resolved config the training run dumped, unless one
        // was passed explicitly.
        let mut eval_config = if args.config.config.is_none() && run_dir.join("config.txt").exists()
        {
            let mut c = ExperimentConfig::from_file(&run_dir.join("config.txt"))?;
            c.greedy_eval = config.greedy_eval;
            c.test_slots = config.test_slots;
            c
        } else {
            config.clone()
        };
        eval_config.seeds = vec![seed];
        let summary = evaluate(&eval_config, seed, &run_dir)?;
        println!(
            "seed {}: mean sum rate {:.4} nats/s over {} slots (naive on same trajectory: {:.4})",
            seed, summary.mean_sum_rate, summary.slots, summary.naive_mean_sum_rate
        );
        means.push((summary.mean_sum_rate, summary.naive_mean_sum_rate));
    }
    if !means.is_empty() {
        let m: f64 = means.iter().map(|v| v.0).sum::<f64>() / means.len() as f64;
        let nv: f64 = means.iter().map(|v| v.1).sum::<f64>() / means.len() as f64;
        println!(
            "overall: {:.4} nats/s across {} seeds ({:.3}x naive)",
            m,
            means.len(),
            m / nv
        );
    }
    Ok(true)
}

fn cmd_baseline(args: &BaselineArgs, policy_override: Option<Policy>) -> Result<bool> {
    let mut config = args.config.resolve()?;
    if let Some(s) = args.slots {
        config.train_slots = s;
    }
    let policy = match policy_override {
        Some(p) => p,
        None => match config.policy {
            Policy::Madrl => Policy::Naive,
            p => p,
        },
    };
    let mut all_ok = true;
    for &seed in &config.seeds {
        let out = run_baseline(&config, seed, policy, &args.out_dir)?;
        print_summary(&out);
        all_ok &= !out.summary.failed;
    }
    Ok(all_ok)
}

fn cmd_aggregate(args: &AggregateArgs) -> Result<bool> {
    let rows = runner::aggregate(&args.files, &args.out)?;
    println!(
        "aggregated {} files over {} slots -> {}",
        args.files.len(),
        rows.len(),
        args.out.display()
    );
    Ok(true)
}

fn cmd_selftest() -> bool {
    let results = runner::selftest();
    let mut all_ok = true;
    for r in &results {
        println!(
            "{} {:<28} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        all_ok &= r.passed;
    }
    all_ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Baseline(args) => cmd_baseline(args, None),
        Command::Oracle(args) => cmd_baseline(
            &BaselineArgs {
                config: ConfigArgs {
                    config: args.config.config.clone(),
                    n_cells: args.config.n_cells,
                    eh_model: args.config.eh_model.clone(),
                    policy: args.config.policy.clone(),
                    seed: args.config.seed,
                    train_slots: args.config.train_slots,
                    set: args.config.set.clone(),
                },
                out_dir: args.out_dir.clone(),
                slots: None,
            },
            Some(Policy::Oracle),
        ),
        Command::Aggregate(args) => cmd_aggregate(args),
        Command::Selftest => Ok(cmd_selftest()),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
