//! Simulation settings merged from an optional TOML file and command-line
//! flags; a flag always wins over the file.
//!
//! The file uses the flag names with underscores, for example:
//!
//! ```toml
//! function = "nv2d"
//! mode = "detection"
//! trials = 150
//! runs = 20
//! seed = 1
//! weights = [0.8, 10.6, 6.0, 4.0]
//! ablation = "grad,prox,unc,la"
//! random = false
//! grid_levels = 32
//! test_set_size = 4096
//! brier = true
//! out = "results/nv2d.csv"
//! ```

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use nest_core::acquisition::{AcquisitionWeights, ComponentSet};
use nest_core::bench::{BenchmarkConfig, FunctionSpec};
use nest_core::psychfun::Mode;

use crate::CliError;

pub const DEFAULT_FUNCTION: &str = "wei2d";
pub const DEFAULT_TRIALS: usize = 150;
pub const DEFAULT_RUNS: usize = 1;

#[derive(Args, Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    /// Observer: wei1d..wei4d, sin2d, max2d, dn2d, nv2d, hart6, ps8d, sphere or random.
    #[arg(long)]
    pub function: Option<String>,
    /// detection or discrimination.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Acquisition weights grad,prox,unc,la.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub weights: Option<Vec<f64>>,
    /// Enabled components, e.g. grad,prox.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Query the Sobol sequence only.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub random: Option<bool>,
    #[arg(long)]
    pub grid_levels: Option<usize>,
    #[arg(long)]
    pub test_set_size: Option<usize>,
    /// Score the Brier metric every trial.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub brier: Option<bool>,
    /// Draw function parameters per run from the documented ranges.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub randomize: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl SimSettings {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set here take precedence over `base`.
    pub fn over(self, base: SimSettings) -> SimSettings {
        SimSettings {
            function: self.function.or(base.function),
            mode: self.mode.or(base.mode),
            trials: self.trials.or(base.trials),
            runs: self.runs.or(base.runs),
            seed: self.seed.or(base.seed),
            weights: self.weights.or(base.weights),
            ablation: self.ablation.or(base.ablation),
            random: self.random.or(base.random),
            grid_levels: self.grid_levels.or(base.grid_levels),
            test_set_size: self.test_set_size.or(base.test_set_size),
            brier: self.brier.or(base.brier),
            randomize: self.randomize.or(base.randomize),
            out: self.out.or(base.out),
        }
    }

    /// Flags merged over the file at `config`, if given.
    pub fn resolve(self, config: Option<&Path>) -> Result<SimSettings, CliError> {
        match config {
            Some(path) => Ok(self.over(SimSettings::from_file(path)?)),
            None => Ok(self),
        }
    }

    pub fn mode(&self) -> Result<Mode, CliError> {
        Ok(self.mode.as_deref().unwrap_or("detection").parse::<Mode>()?)
    }

    pub fn function_spec(&self) -> Result<FunctionSpec, CliError> {
        let name = self.function.as_deref().unwrap_or(DEFAULT_FUNCTION);
        let mut spec = FunctionSpec::parse(name, self.mode()?)?;
        if let FunctionSpec::Named { randomize, .. } = &mut spec {
            *randomize = self.randomize.unwrap_or(false);
        }
        Ok(spec)
    }

    pub fn benchmark(&self) -> Result<BenchmarkConfig, CliError> {
        let mut cfg = BenchmarkConfig::new(
            self.function_spec()?,
            self.runs.unwrap_or(DEFAULT_RUNS),
            self.trials.unwrap_or(DEFAULT_TRIALS),
            self.seed.unwrap_or(0),
        );
        if let Some(w) = &self.weights {
            let [g, p, u, l] = w[..] else {
                return Err(CliError::Config(format!("weights need 4 values, got {}", w.len())));
            };
            cfg.acq.weights = AcquisitionWeights::new(g, p, u, l);
            cfg.acq.weights.validate()?;
        }
        if let Some(list) = &self.ablation {
            cfg.components = ComponentSet::parse(list)?;
        }
        cfg.pure_random = self.random.unwrap_or(false) || cfg.components.is_empty();
        cfg.grid_levels = self.grid_levels;
        cfg.test_set_size = self.test_set_size;
        cfg.brier = self.brier.unwrap_or(true);
        cfg.output = self.out.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads a weight grid: one `grad,prox,unc,la` tuple per line; blank lines
/// and lines starting with `#` are skipped.
pub fn parse_weight_grid(text: &str) -> Result<Vec<AcquisitionWeights>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("grid line {}: {e}", n + 1)))?;
        let [g, p, u, l] = vals[..] else {
            return Err(CliError::Config(format!("grid line {}: expected 4 values", n + 1)));
        };
        let w = AcquisitionWeights::new(g, p, u, l);
        w.validate()?;
        out.push(w);
    }
    Ok(out)
}
