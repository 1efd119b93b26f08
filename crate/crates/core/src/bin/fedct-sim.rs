use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedct_core::config::ExperimentConfig;
use fedct_core::exec::{configure_threads_from_env, ExecMode};
use fedct_core::experiment::{
    ablation_table, run_ablation, run_experiment, AblationAxis, RunOptions,
};
use fedct_core::gradcheck::{gradient_suite, GRAD_TOLERANCE};

/// Deterministic federated cross-training simulator.
#[derive(Parser)]
#[command(name = "fedct-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over a list of seeds.
    Run(RunArgs),
    /// Sweep one axis and print a comparison table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// strategy, lambda_fuse, exchange_iterations or modules.
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Validate a configuration and print its resolved form.
    Check(ConfigArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` with a dotted key, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seeds; defaults to `run.master_seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory, replacing `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run clients one after another instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
    /// Log one line per round to stderr.
    #[arg(long, short)]
    verbose: bool,
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    Ok(match &args.config {
        Some(path) => ExperimentConfig::load(path, &args.overrides)?,
        None => ExperimentConfig::parse_with_overrides("", &args.overrides)?,
    })
}

fn prepare(
    args: &RunArgs,
) -> Result<(ExperimentConfig, Vec<u64>, RunOptions), Box<dyn std::error::Error>> {
    let mut cfg = load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.run.output_dir = out.clone();
    }
    let seeds = if args.seeds.is_empty() {
        vec![cfg.run.master_seed]
    } else {
        args.seeds.clone()
    };
    let opts = RunOptions {
        exec: if args.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        },
        verbose: args.verbose,
    };
    Ok((cfg, seeds, opts))
}

fn execute(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, seeds, opts) = prepare(&args)?;
            let summary = run_experiment(&cfg, &seeds, opts)?;
            println!(
                "config {}  strategy {}  final accuracy {:.2} ± {:.2} % over {} seed(s)",
                summary.config_hash,
                summary.strategy,
                100.0 * summary.final_accuracy_mean,
                100.0 * summary.final_accuracy_std,
                summary.seeds.len()
            );
            if let Some(r) = summary.mean_rounds_to_target {
                println!("mean rounds to target: {r:.1}");
            }
            println!(
                "outputs in {}",
                cfg.run.output_dir.join(&summary.config_hash).display()
            );
            Ok(true)
        }
        Command::Ablate { run, axis, values } => {
            let (cfg, seeds, opts) = prepare(&run)?;
            let rows = run_ablation(&cfg, axis, &values, &seeds, opts)?;
            print!("{}", ablation_table(axis, &rows));
            Ok(true)
        }
        Command::Check(args) => {
            let cfg = load(&args)?;
            println!("# config hash {}", cfg.hash());
            print!("{}", cfg.to_toml());
            Ok(true)
        }
        Command::GradCheck { seeds } => {
            let cases = gradient_suite(seeds)?;
            let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).collect();
            for c in &failed {
                println!(
                    "FAIL {} seed {}: {:.3e}",
                    c.objective, c.seed, c.max_rel_error
                );
            }
            println!(
                "{} cases, worst relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:.0e})",
                cases.len()
            );
            Ok(failed.is_empty())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads_from_env();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
