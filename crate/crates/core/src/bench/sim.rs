//! Monte-Carlo simulation of complete sessions against simulated observers,
//! batch aggregation, weight search, Fisher-energy analysis and result
//! emission.

use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, brier, default_mu_star, mean_and_stderr, rmse, spearman};
use super::observer::{make_test_set, FunctionSpec, Observer};
use crate::acquisition::{AcquisitionConfig, AcquisitionWeights, ComponentSet, RawComponents, TrialScorer};
use crate::error::{NestError, Result};
use crate::net::{PsychScaleConfig, TrainConfig};
use crate::session::{new_session, windowed_series, ConvergenceConfig, SessionConfig, SessionState};
use crate::util::{derive_seed, rng_from};

const TAG_RUN: u64 = 0x5255_4e;
const TAG_RESPONSES: u64 = 0x5245_5350;
const TAG_HEATMAP: u64 = 0x4845_4154;

/// Everything that defines a batch of simulated sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub function: FunctionSpec,
    pub runs: usize,
    pub trials_per_run: usize,
    pub seed: u64,
    /// Enabled acquisition components.
    #[serde(default)]
    pub components: ComponentSet,
    /// Sobol-only sampling; overrides `components`.
    #[serde(default)]
    pub pure_random: bool,
    #[serde(default)]
    pub grid_levels: Option<usize>,
    /// Number of Sobol test points; `None` selects the dimension default.
    #[serde(default)]
    pub test_set_size: Option<usize>,
    /// Whether to compute the Brier score every trial.
    #[serde(default = "default_true")]
    pub brier: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub acq: AcquisitionConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
}

fn default_true() -> bool {
    true
}

impl BenchmarkConfig {
    /// Full NEST configuration with default hyperparameters.
    pub fn new(function: FunctionSpec, runs: usize, trials_per_run: usize, seed: u64) -> Self {
        Self {
            function,
            runs,
            trials_per_run,
            seed,
            components: ComponentSet::all(),
            pure_random: false,
            grid_levels: None,
            test_set_size: None,
            brier: true,
            output: None,
            train: TrainConfig::default(),
            acq: AcquisitionConfig::default(),
            convergence: ConvergenceConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(NestError::config("runs", "must be at least 1"));
        }
        if self.trials_per_run == 0 {
            return Err(NestError::config("trials_per_run", "must be at least 1"));
        }
        if self.test_set_size == Some(0) {
            return Err(NestError::config("test_set_size", "must be positive"));
        }
        self.function.validate()
    }

    /// Seed of run `run_index`: splitmix64 of the batch seed mixed with the
    /// run index.
    pub fn run_seed(&self, run_index: usize) -> u64 {
        derive_seed(self.seed, &[TAG_RUN, run_index as u64])
    }

    /// Session configuration for one run against `observer`.
    pub fn session_config(&self, observer: &Observer, run_seed: u64) -> SessionConfig {
        let mut s = SessionConfig::new(observer.bounds().to_vec());
        s.scale = PsychScaleConfig {
            alpha: observer.alpha(),
            gamma_lapse: observer.gamma_lapse(),
            ..PsychScaleConfig::default()
        };
        s.train = self.train.clone();
        s.acq = self.acq.clone();
        s.convergence = self.convergence.clone();
        s.seed = run_seed;
        s.grid_levels = self.grid_levels;
        s.components = self.components;
        s.pure_random = self.pure_random;
        s
    }
}

/// Per-trial results of one simulated session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub run_id: usize,
    pub seed: u64,
    pub rmse: Vec<f64>,
    /// Empty when Brier scoring is disabled.
    pub brier: Vec<f64>,
    pub fisher_energy: Vec<f64>,
    pub converged: Vec<bool>,
    pub auc_rmse: f64,
    pub auc_brier: f64,
    pub convergence_trial: Option<usize>,
    /// Set when the run stopped early; the series then cover the completed trials.
    pub error: Option<String>,
}

impl MetricSeries {
    pub fn trials(&self) -> usize {
        self.rmse.len()
    }

    /// Mean RMSE over the first `n` trials.
    pub fn head_mean(&self, n: usize) -> f64 {
        let n = n.min(self.rmse.len()).max(1);
        self.rmse[..n].iter().sum::<f64>() / n as f64
    }

    /// Mean RMSE over the last `n` trials.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.rmse.len()).max(1);
        self.rmse[self.rmse.len() - n..].iter().sum::<f64>() / n as f64
    }
}

/// Runs one simulated session and scores the model after every trial on a
/// test set fixed for the whole batch.
pub fn run_simulation(cfg: &BenchmarkConfig, run_index: usize) -> Result<MetricSeries> {
    cfg.validate()?;
    let run_seed = cfg.run_seed(run_index);
    let observer = cfg.function.resolve(run_seed)?;
    let test = make_test_set(observer.bounds(), cfg.test_set_size, cfg.seed)?;
    let truth = test.iter().map(|x| observer.eval(x)).collect::<Result<Vec<f64>>>()?;
    let mu_star = default_mu_star(observer.alpha());
    let mut session = new_session(cfg.session_config(&observer, run_seed))?;
    let mut responses = rng_from(run_seed, &[TAG_RESPONSES]);
    let mut series = MetricSeries {
        run_id: run_index,
        seed: run_seed,
        rmse: Vec::with_capacity(cfg.trials_per_run),
        brier: Vec::new(),
        fisher_energy: Vec::with_capacity(cfg.trials_per_run),
        converged: Vec::with_capacity(cfg.trials_per_run),
        auc_rmse: 0.0,
        auc_brier: 0.0,
        convergence_trial: None,
        error: None,
    };
    for _ in 0..cfg.trials_per_run {
        let x = session.pending.stimulus.clone();
        let y = observer.respond(&x, &mut responses)?;
        match session.record_response(&x, y) {
            Ok(()) => {}
            Err(e @ NestError::SingularKernel { .. }) => {
                series.error = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
        if cfg.brier {
            let est = session.evaluate(&test)?;
            let prob: Vec<f64> = est.iter().map(|e| e.prob).collect();
            series.rmse.push(rmse(&prob, &truth)?);
            let mc: Vec<(f64, f64)> = est.iter().map(|e| (e.mc_mean, e.mc_std)).collect();
            series.brier.push(brier(&mc, &truth, mu_star)?);
        } else {
            series.rmse.push(rmse(&session.predict(&test)?, &truth)?);
        }
        series.fisher_energy.push(*session.fisher_history.last().expect("one value per trial"));
        series.converged.push(session.converged);
    }
    series.convergence_trial = session.convergence_trial;
    series.auc_rmse = auc(&series.rmse);
    series.auc_brier = auc(&series.brier);
    Ok(series)
}

/// Mean and standard error of a per-run statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        let (mean, stderr) = mean_and_stderr(values)?;
        Ok(Self { mean, stderr })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub config: BenchmarkConfig,
    pub runs: Vec<MetricSeries>,
    pub auc_rmse: Aggregate,
    pub auc_brier: Aggregate,
}

/// One run's entry in the JSON batch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: usize,
    pub seed: u64,
    pub trials: usize,
    pub auc_rmse: f64,
    pub auc_brier: f64,
    pub convergence_trial: Option<usize>,
    pub error: Option<String>,
}

/// The JSON batch summary: configuration echo, per-run AUCs and aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub config: BenchmarkConfig,
    pub runs: Vec<RunSummary>,
    pub auc_rmse: Aggregate,
    pub auc_brier: Aggregate,
}

/// One CSV row per (run, trial).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: usize,
    pub trial: usize,
    pub rmse: f64,
    pub brier: Option<f64>,
    pub fisher_energy: f64,
    pub converged: bool,
}

impl BatchReport {
    pub fn from_runs(config: BenchmarkConfig, runs: Vec<MetricSeries>) -> Result<Self> {
        let auc_rmse = Aggregate::of(&runs.iter().map(|r| r.auc_rmse).collect::<Vec<_>>())?;
        let auc_brier = Aggregate::of(&runs.iter().map(|r| r.auc_brier).collect::<Vec<_>>())?;
        Ok(Self {
            config,
            runs,
            auc_rmse,
            auc_brier,
        })
    }

    pub fn summary(&self) -> BatchSummary {
        BatchSummary {
            config: self.config.clone(),
            runs: self
                .runs
                .iter()
                .map(|r| RunSummary {
                    run_id: r.run_id,
                    seed: r.seed,
                    trials: r.trials(),
                    auc_rmse: r.auc_rmse,
                    auc_brier: r.auc_brier,
                    convergence_trial: r.convergence_trial,
                    error: r.error.clone(),
                })
                .collect(),
            auc_rmse: self.auc_rmse,
            auc_brier: self.auc_brier,
        }
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.runs
            .iter()
            .flat_map(|r| {
                (0..r.trials()).map(move |t| CsvRow {
                    run_id: r.run_id,
                    trial: t + 1,
                    rmse: r.rmse[t],
                    brier: r.brier.get(t).copied(),
                    fisher_energy: r.fisher_energy[t],
                    converged: r.converged[t],
                })
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.csv_rows() {
            w.serialize(row).map_err(|e| NestError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| NestError::Io(e.to_string()))
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }
}

/// Runs every simulation of the batch, in parallel across runs.
pub fn run_batch(cfg: &BenchmarkConfig) -> Result<BatchReport> {
    cfg.validate()?;
    let runs = (0..cfg.runs)
        .into_par_iter()
        .map(|i| run_simulation(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    BatchReport::from_runs(cfg.clone(), runs)
}

/// One row of a weight-search table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightScore {
    pub weights: AcquisitionWeights,
    pub auc_rmse: Aggregate,
}

/// Evaluates each weight tuple with a full batch and returns the rows sorted
/// by mean AUC of the RMSE, lowest first. Ties keep the input order.
pub fn weight_search(base: &BenchmarkConfig, grid: &[AcquisitionWeights]) -> Result<Vec<WeightScore>> {
    if grid.is_empty() {
        return Err(NestError::config("grid", "no weight tuples given"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for w in grid {
        w.validate()?;
        let mut cfg = base.clone();
        cfg.acq.weights = *w;
        cfg.brier = false;
        let report = run_batch(&cfg)?;
        rows.push(WeightScore {
            weights: *w,
            auc_rmse: report.auc_rmse,
        });
    }
    rows.sort_by(|a, b| a.auc_rmse.mean.total_cmp(&b.auc_rmse.mean));
    Ok(rows)
}

/// Fisher-energy statistics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherRun {
    pub run_id: usize,
    /// Mean windowed Fisher difference over the analysis trial range.
    pub windowed_mean: f64,
    /// Rank correlation between the windowed difference and the RMSE over
    /// the trials where the window is defined; absent for constant series.
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherAnalysis {
    pub function: String,
    pub dim: usize,
    pub window: usize,
    /// Inclusive 1-based trial range averaged for `windowed_mean`.
    pub trial_range: (usize, usize),
    pub runs: Vec<FisherRun>,
    pub windowed_mean: f64,
    pub spearman_mean: Option<f64>,
}

/// Windowed Fisher-difference statistics of a finished run.
pub fn fisher_run(series: &MetricSeries, window: usize, trial_range: (usize, usize)) -> Result<FisherRun> {
    let (lo, hi) = trial_range;
    if lo == 0 || lo > hi {
        return Err(NestError::config("trial_range", "must be a nonempty 1-based range"));
    }
    let w = windowed_series(&series.fisher_energy, window);
    let in_range: Vec<f64> = w
        .iter()
        .enumerate()
        .filter(|(i, _)| (lo..=hi).contains(&(i + 1)))
        .filter_map(|(_, v)| *v)
        .collect();
    if in_range.is_empty() {
        return Err(NestError::InvalidArgument(format!(
            "no windowed Fisher values in trials {lo}..={hi} of a {}-trial run",
            series.trials()
        )));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = w
        .iter()
        .zip(&series.rmse)
        .filter_map(|(v, r)| v.map(|v| (v, *r)))
        .unzip();
    Ok(FisherRun {
        run_id: series.run_id,
        windowed_mean: in_range.iter().sum::<f64>() / in_range.len() as f64,
        spearman: spearman(&xs, &ys).ok(),
    })
}

/// Fisher-energy analysis of a finished batch.
pub fn fisher_analysis(report: &BatchReport, trial_range: (usize, usize)) -> Result<FisherAnalysis> {
    let window = report.config.convergence.window;
    let runs = report
        .runs
        .iter()
        .map(|s| fisher_run(s, window, trial_range))
        .collect::<Result<Vec<_>>>()?;
    let windowed_mean = runs.iter().map(|r| r.windowed_mean).sum::<f64>() / runs.len() as f64;
    let rhos: Vec<f64> = runs.iter().filter_map(|r| r.spearman).collect();
    let spearman_mean = (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64);
    let observer = report.config.function.resolve(report.config.seed)?;
    Ok(FisherAnalysis {
        function: report.config.function.name(),
        dim: observer.dim(),
        window,
        trial_range,
        runs,
        windowed_mean,
        spearman_mean,
    })
}

/// Component values at one stimulus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub x: Vec<f64>,
    pub grad: f64,
    pub prox: f64,
    pub unc: f64,
    pub la: f64,
    pub combined: f64,
}

/// Acquisition components over the test set after a number of trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentMap {
    pub function: String,
    pub trial: usize,
    pub normalizers: RawComponents,
    pub points: Vec<ComponentRecord>,
}

/// Simulates run `run_index` for `trials` trials, then scores every test-set
/// point with all enabled components, normalized over the test set.
pub fn component_map(cfg: &BenchmarkConfig, run_index: usize, trials: usize) -> Result<ComponentMap> {
    if trials == 0 {
        return Err(NestError::config("trial", "components need at least one recorded trial"));
    }
    let run_seed = cfg.run_seed(run_index);
    let observer = cfg.function.resolve(run_seed)?;
    let mut session = new_session(cfg.session_config(&observer, run_seed))?;
    simulate_responses(&mut session, &observer, trials, run_seed)?;
    let points = make_test_set(observer.bounds(), cfg.test_set_size, cfg.seed)?;
    let enabled = if cfg.pure_random { ComponentSet::all() } else { cfg.components };
    let mut scorer = TrialScorer::new(
        &session.net,
        &session.dataset,
        &session.config.scale,
        &session.config.acq,
        enabled,
        session.config.train.dropout_p,
        derive_seed(run_seed, &[TAG_HEATMAP]),
    )?;
    let raws = scorer.raw_batch(&points)?;
    scorer.fit_normalizers(&raws);
    let records = raws
        .iter()
        .zip(points)
        .map(|(r, x)| {
            let (c, combined) = scorer.score(r);
            ComponentRecord {
                x,
                grad: c.grad,
                prox: c.prox,
                unc: c.unc,
                la: c.la,
                combined,
            }
        })
        .collect();
    Ok(ComponentMap {
        function: cfg.function.name(),
        trial: trials,
        normalizers: scorer.normalizers(),
        points: records,
    })
}

fn simulate_responses(session: &mut SessionState, observer: &Observer, trials: usize, run_seed: u64) -> Result<()> {
    let mut rng = rng_from(run_seed, &[TAG_RESPONSES]);
    for _ in 0..trials {
        let x = session.pending.stimulus.clone();
        let y = observer.respond(&x, &mut rng)?;
        session.record_response(&x, y)?;
    }
    Ok(())
}
