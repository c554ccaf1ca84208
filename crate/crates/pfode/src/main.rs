//! Command-line front end: run experiments described by a JSON config.
//!
//! Exit codes: 0 on success, 2 for config problems (unreadable file, schema
//! violations, misaligned grids, incompatible subcommand), 3 for failures
//! during execution (divergent runs, unfittable slopes, output I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pfode::harness::{write_outputs, Experiment, ExperimentConfig, StudyKind};

#[derive(Parser)]
#[command(
    name = "pfode",
    version,
    about = "Deterministic diffusion sampling experiments on Gaussian-mixture targets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every configured (scheme, step count, amplitude) combination.
    Run(CommonArgs),
    /// Sweep step counts and fit a convergence order per scheme.
    Convergence(CommonArgs),
    /// Sweep score-error amplitudes at one step count and fit the scaling.
    ScoreError(CommonArgs),
    /// Check the config (schema, target, grid alignment) without running.
    Validate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment description.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread count (default: all cores). Affects speed only; results
    /// are bit-identical for any value.
    #[arg(long)]
    threads: Option<usize>,
    /// Allow solver stage times off the score lattice.
    #[arg(long)]
    no_strict_alignment: bool,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Run(args) => (Some(StudyKind::Run), args),
        Command::Convergence(args) => (Some(StudyKind::Convergence), args),
        Command::ScoreError(args) => (Some(StudyKind::ScoreError), args),
        Command::Validate(args) => (None, args),
    };

    if let Some(threads) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(EXIT_RUN);
        }
    }

    // Config phase: everything here exits 2.
    let text = match std::fs::read_to_string(&args.config) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut config = match ExperimentConfig::from_json(&text) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.output = Some(out);
    }
    if args.no_strict_alignment {
        config.grid.strict_alignment = false;
    }
    let experiment = match Experiment::from_config(config) {
        Ok(experiment) => experiment,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let Some(kind) = kind else {
        // `validate`: report what would run and stop.
        print!("{}", experiment.manifest());
        println!("\nconfig OK");
        return ExitCode::SUCCESS;
    };
    if let Err(e) = experiment.check_compatible(kind) {
        eprintln!("config error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }

    // Run phase: everything here exits 3.
    let result = match experiment.run_study(kind) {
        Ok(result) => result,
        Err(e) => {
            eprintln!("run failed: {e}");
            return ExitCode::from(EXIT_RUN);
        }
    };
    match experiment.config().output.clone() {
        Some(path) => match write_outputs(&experiment, &result, &path) {
            Ok(manifest) => {
                eprintln!(
                    "wrote {} runs + {} summaries to {} (manifest: {})",
                    result.runs.len(),
                    result.summaries.len(),
                    path.display(),
                    manifest.display()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("run failed: could not write outputs: {e}");
                ExitCode::from(EXIT_RUN)
            }
        },
        None => {
            print!("{}", pfode::harness::render_csv(&result));
            ExitCode::SUCCESS
        }
    }
}
