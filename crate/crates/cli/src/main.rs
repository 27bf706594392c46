use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use radar_core::acceptance::{self, CriterionResult};
use radar_core::drivers::EpochMode;
use radar_core::harness::{
    group_rows, load_trace_csv, parse_algorithms, rate_report, run_experiment,
    save_summary_and_rates, summarize, ExperimentSpec, RateReport,
};
use radar_core::Result;

#[derive(Parser)]
#[command(
    name = "radar",
    version,
    about = "Annealed multi-epoch dual averaging experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write traces, summary and rate report.
    Run(RunArgs),
    /// Summarize existing trace CSVs and report fitted rates.
    Fit(FitArgs),
    /// Check the closed-form prox step against the numerical minimizer.
    ProxCheck(ProxArgs),
    /// Run the acceptance suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated algorithms, or `all`.
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    budget: Option<u64>,
    /// `theoretical` or `oracle-halving`.
    #[arg(long)]
    epoch_mode: Option<EpochMode>,
}

#[derive(Args)]
struct FitArgs {
    /// Trace CSVs; defaults to `<out>/traces.csv`.
    traces: Vec<PathBuf>,
    /// Directory for `summary.csv` and `rates.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProxArgs {
    /// Instances per dimension.
    #[arg(long, default_value_t = acceptance::PROX_INSTANCES)]
    instances: usize,
}

#[derive(Args)]
struct SelftestArgs {
    /// Scratch directory; a temporary one when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_spec(args: &RunArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::from_config_file(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(v) = &args.out {
        spec.out_dir = v.clone();
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.trials {
        spec.trials = v;
    }
    if let Some(v) = &args.algo {
        spec.algorithms = parse_algorithms(v)?;
    }
    if let Some(v) = args.dim {
        spec.dim = v;
    }
    if let Some(v) = args.budget {
        spec.budget = v;
    }
    if let Some(v) = args.epoch_mode {
        spec.epoch_mode = v;
    }
    spec.validate()?;
    Ok(spec)
}

fn print_rates(rates: &[RateReport]) {
    println!(
        "{:<12} {:>10} {:>16} {:>8}",
        "algorithm", "iteration", "mean_error_l2_sq", "slope"
    );
    for r in rates {
        let slope = r
            .slope
            .map(|s| format!("{s:.3}"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "{:<12} {:>10} {:>16.6e} {:>8}",
            r.algorithm, r.final_iteration, r.final_mean_error, slope
        );
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let spec = build_spec(&args)?;
    let output = run_experiment(&spec)?;
    println!(
        "wrote {} run traces, summary and rates to {}",
        output.trace_files.len(),
        spec.out_dir.display()
    );
    print_rates(&output.rates);
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let paths = if args.traces.is_empty() {
        let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        vec![dir.join("traces.csv")]
    } else {
        args.traces.clone()
    };
    let mut rows = Vec::new();
    for p in &paths {
        rows.extend(load_trace_csv(p)?);
    }
    let summary = summarize(&group_rows(rows))?;
    let rates = rate_report(&summary);
    if let Some(dir) = &args.out {
        save_summary_and_rates(dir, &summary, &rates)?;
    }
    print_rates(&rates);
    Ok(())
}

fn report(results: &[CriterionResult]) -> ExitCode {
    for r in results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Fit(a) => cmd_fit(a),
        Command::ProxCheck(a) => return report(&[acceptance::prox_equivalence(a.instances)]),
        Command::Selftest(a) => {
            let dir = a.out.unwrap_or_else(|| {
                std::env::temp_dir().join(format!("radar-selftest-{}", std::process::id()))
            });
            return report(&acceptance::run_all(&dir));
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
