use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use hdmole::config::ExperimentConfig;
use hdmole::experiment::{run_ablation_suite, run_methods, RunRecord, Suite};
use hdmole::report;

#[derive(Parser)]
#[command(name = "hdmole", version, about = "Train and evaluate mixtures of LoRA experts on a synthetic multi-domain task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the configured methods.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run one of the ablation sweeps and write a combined table.
    Ablate {
        config: PathBuf,
        /// table1, table2 or table3.
        #[arg(long)]
        suite: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print per-layer activation statistics from a results directory.
    Stats { results_dir: PathBuf },
}

#[derive(clap::Args)]
struct Overrides {
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(path: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)
        .with_context(|| format!("loading {}", path.display()))?
        .with_seed_override(o.seed);
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print_records(records: &[RunRecord]) {
    println!(
        "{:<22} {:>4} {:<22} {:>9} {:>10} {:>10} {:>10}",
        "method", "seed", "cell", "params", "target", "source", "forgetting"
    );
    for r in records {
        println!(
            "{:<22} {:>4} {:<22} {:>9} {:>10.5} {:>10.5} {:>+10.5}",
            r.method.name(),
            r.seed,
            r.cell,
            r.trainable_params,
            r.target_loss,
            r.source_loss,
            r.forgetting_delta
        );
    }
}

fn finish(cfg: &ExperimentConfig, records: &[RunRecord], suite: Option<Suite>) -> Result<()> {
    print_records(records);
    let written = report::write_reports(&cfg.output_dir, cfg, records, suite)
        .with_context(|| format!("writing reports to {}", cfg.output_dir.display()))?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let records = run_methods(&cfg)?;
            finish(&cfg, &records, None)
        }
        Command::Ablate {
            config,
            suite,
            overrides,
        } => {
            let suite: Suite = suite.parse()?;
            let cfg = load(&config, &overrides)?;
            let records = run_ablation_suite(&cfg, suite)?;
            finish(&cfg, &records, Some(suite))
        }
        Command::Stats { results_dir } => {
            print!("{}", report::write_stats(&results_dir)?);
            Ok(())
        }
    }
}

/// 2 for bad input (config, suite, missing results), 3 for divergence, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    use hdmole::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config { .. } | E::InvalidArgument(_) | E::MissingResults(_) | E::Json(_)) => 2,
        Some(E::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => 2,
        Some(E::Divergence { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
