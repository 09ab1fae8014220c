use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use stgcn::evaluation::report_table;
use stgcn::experiment::{
    gradcheck_suite, run_build_graph, run_eval, run_predict, run_synth, run_train, RunManifest,
};
use stgcn::synth::SynthConfig;
use stgcn::StgcnError;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "stgcn", version, about = "Spatio-temporal graph convolutional traffic forecasting")]
struct Cli {
    /// Increase log verbosity (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArgs {
    /// Run manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Override a manifest field, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ManifestArgs {
    fn load(&self) -> Result<RunManifest, StgcnError> {
        RunManifest::load_with_overrides(&self.manifest, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the weighted adjacency matrix and report its spectrum.
    BuildGraph(ManifestArgs),
    /// Train a model and write the best checkpoint and the loss history.
    Train(ManifestArgs),
    /// Report test metrics for a checkpoint and the historical average.
    Eval {
        #[command(flatten)]
        manifest: ManifestArgs,
        /// Checkpoint to score; defaults to `<output_dir>/checkpoint.stgc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only report the historical-average baseline.
        #[arg(long, conflicts_with = "checkpoint")]
        baseline_only: bool,
    },
    /// Forecast from one test window.
    Predict {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the test windows; defaults to the last one.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Check analytic gradients of every layer type against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset and a manifest for it.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 40)]
        days: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode, StgcnError> {
    match cli.command {
        Command::BuildGraph(args) => {
            let m = args.load()?;
            let s = run_build_graph(&m)?;
            println!("n={} edges={} lambda_max={}", s.n, s.edges, s.lambda_max);
            println!("wrote {}", m.output_dir.join("adjacency.csv").display());
        }
        Command::Train(args) => {
            let m = args.load()?;
            let outcome = run_train(&m)?;
            let best = outcome.best.descriptor.epoch.map_or("-".to_string(), |e| e.to_string());
            println!("trained {} epochs ({} steps); best epoch {best}", outcome.history.len(), outcome.steps);
            println!("wrote {}", m.checkpoint_path().display());
        }
        Command::Eval { manifest, checkpoint, baseline_only } => {
            let m = manifest.load()?;
            let ckpt = if baseline_only {
                None
            } else {
                Some(checkpoint.unwrap_or_else(|| m.checkpoint_path()))
            };
            let rows = run_eval(&m, ckpt.as_deref())?;
            print!("{}", report_table(&rows));
        }
        Command::Predict { manifest, checkpoint, window } => {
            let m = manifest.load()?;
            let ckpt = checkpoint.unwrap_or_else(|| m.checkpoint_path());
            print!("{}", run_predict(&m, &ckpt, window)?);
        }
        Command::Gradcheck { seed } => {
            let mut ok = true;
            for r in gradcheck_suite(seed)? {
                let pass = r.passes(GRADCHECK_TOLERANCE);
                ok &= pass;
                println!(
                    "{:<26} {}  max relative error {:.3e}",
                    r.label,
                    if pass { "PASS" } else { "FAIL" },
                    r.max_relative_error()
                );
            }
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Synth { out, nodes, days, seed } => {
            let cfg = SynthConfig { nodes, workdays: days, seed, ..SynthConfig::default() };
            run_synth(&cfg, &out)?;
            info!("synthetic data for {nodes} stations over {days} workdays");
            println!("wrote {}", out.join("manifest.json").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
