//! `nest` command-line tool: simulation batches, weight search, component
//! maps, Fisher-energy calibration and the session service.

mod settings;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use nest_core::bench::{component_map, fisher_analysis, run_batch, weight_search, FunctionSpec};
use nest_core::session::default_baseline;
use nest_core::NestError;
use nest_service::{ApiError, ServiceConfig};

use settings::{parse_weight_grid, SimSettings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Nest(#[from] NestError),
    #[error(transparent)]
    Service(#[from] ApiError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Parser, Debug)]
#[command(name = "nest", version, about = "Neural adaptive psychometric estimation")]
struct Cli {
    /// TOML file with default values for the simulation flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a batch of sessions and write per-trial rows and a summary.
    Simulate(SimSettings),
    /// Rank acquisition weight tuples by mean AUC of the RMSE.
    WeightSearch {
        /// One grad,prox,unc,la tuple per line.
        #[arg(long)]
        grid_file: PathBuf,
        #[command(flatten)]
        sim: SimSettings,
    },
    /// Emit per-point acquisition components after a number of trials.
    Components {
        /// Trials simulated before scoring.
        #[arg(long)]
        trial: usize,
        /// Which run of the batch to simulate.
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[command(flatten)]
        sim: SimSettings,
    },
    /// Windowed Fisher differences of an observer against the random-observer
    /// baseline, with the resulting SNR and rank correlation to the RMSE.
    FisherCalibration {
        /// Stimulus dimensions of the random observer.
        #[arg(long, default_value_t = 2)]
        dims: usize,
        /// First trial of the averaging range.
        #[arg(long, default_value_t = 101)]
        from: usize,
        /// Last trial of the averaging range.
        #[arg(long, default_value_t = 150)]
        to: usize,
        #[command(flatten)]
        sim: SimSettings,
    },
    /// Run the HTTP service.
    Serve {
        /// Overrides NEST_PORT.
        #[arg(long)]
        port: Option<u16>,
        /// Overrides NEST_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Overrides NEST_STATIC_DIR.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

/// Path of the JSON summary written next to a CSV output.
fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("summary.json")
}

fn simulate(sim: SimSettings) -> Result<(), CliError> {
    let cfg = sim.benchmark()?;
    let report = run_batch(&cfg)?;
    match &cfg.output {
        Some(path) => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            write_text(path, &String::from_utf8(buf).expect("csv is utf-8"))?;
            write_text(&summary_path(path), &report.summary_json())?;
            eprintln!(
                "{} runs: AUC(RMSE) {:.4} ± {:.4}; rows in {}, summary in {}",
                cfg.runs,
                report.auc_rmse.mean,
                report.auc_rmse.stderr,
                path.display(),
                summary_path(path).display()
            );
        }
        None => emit(None, &report.summary_json())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Simulate(sim) => simulate(sim.resolve(config)?),
        Command::WeightSearch { grid_file, sim } => {
            let sim = sim.resolve(config)?;
            let text =
                fs::read_to_string(&grid_file).map_err(|e| CliError::Io(format!("{}: {e}", grid_file.display())))?;
            let grid = parse_weight_grid(&text)?;
            let table = weight_search(&sim.benchmark()?, &grid)?;
            let json = serde_json::to_string_pretty(&table).expect("table serializes");
            emit(sim.out.as_deref(), &json)
        }
        Command::Components { trial, run, sim } => {
            let sim = sim.resolve(config)?;
            let map = component_map(&sim.benchmark()?, run, trial)?;
            emit(sim.out.as_deref(), &serde_json::to_string(&map).expect("map serializes"))
        }
        Command::FisherCalibration { dims, from, to, sim } => {
            let sim = sim.resolve(config)?;
            let mut cfg = sim.benchmark()?;
            cfg.brier = false;
            cfg.trials_per_run = cfg.trials_per_run.max(to);
            cfg.output = None;
            let mut baseline_cfg = cfg.clone();
            baseline_cfg.function = FunctionSpec::Random { dims };
            let baseline = fisher_analysis(&run_batch(&baseline_cfg)?, (from, to))?;
            let observer = if matches!(cfg.function, FunctionSpec::Random { .. }) {
                None
            } else {
                Some(fisher_analysis(&run_batch(&cfg)?, (from, to))?)
            };
            let snr = observer.as_ref().map(|o| baseline.windowed_mean / o.windowed_mean);
            let json = serde_json::json!({
                "dims": dims,
                "trial_range": [from, to],
                "tabulated_baseline": default_baseline(dims),
                "baseline": baseline,
                "observer": observer,
                "snr": snr,
            });
            emit(sim.out.as_deref(), &serde_json::to_string_pretty(&json).expect("json"))
        }
        Command::Serve {
            port,
            data_dir,
            static_dir,
        } => {
            let mut cfg = ServiceConfig::from_env()?;
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(d) = data_dir {
                cfg.data_dir = d;
            }
            if let Some(d) = static_dir {
                cfg.static_dir = Some(d);
            }
            tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).init();
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
            rt.block_on(nest_service::serve(cfg))?;
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
