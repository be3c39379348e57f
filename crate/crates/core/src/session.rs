//! The adaptive estimation loop: record a response, retrain, track the
//! Fisher energy and convergence, and choose the next stimulus.

use serde::{Deserialize, Serialize};

use crate::acquisition::{select_next, AcquisitionConfig, ComponentSet, SelectRequest, Selection, Sobol};
use crate::error::{NestError, Result};
use crate::net::data::{fit_normalization, validate_bounds, Bound, STD_FLOOR};
use crate::net::mc::McDropout;
use crate::net::network::{init_network, NetworkState};
use crate::net::psych::PsychScaleConfig;
use crate::net::snapshot::NetworkSnapshot;
use crate::net::train::{train_trial, TrainConfig};
use crate::net::TrialDataset;
use crate::acquisition::snap_to_grid;
use crate::util::derive_seed;

const TAG_INIT: u64 = 0x494e_4954;
const TAG_TRAIN: u64 = 0x5452_4149_4e;
const TAG_SELECT: u64 = 0x5345_4c45_4354;
const TAG_PREDICT: u64 = 0x5052_4544;

/// Session document format identifier and version.
pub const DOCUMENT_FORMAT: &str = "nest-session";
pub const DOCUMENT_VERSION: u32 = 1;

/// Windowed Fisher-energy differences of a random-response observer, by
/// stimulus dimension.
const BASELINES: [(usize, f64); 5] = [(2, 9e-4), (3, 7e-4), (4, 6e-4), (5, 5e-4), (6, 4e-4)];

/// Default baseline level for `dim`; outside the tabulated 2..=6 range the
/// value is extrapolated log-linearly from the nearest table segment.
pub fn default_baseline(dim: usize) -> f64 {
    if let Some(&(_, v)) = BASELINES.iter().find(|(d, _)| *d == dim) {
        return v;
    }
    let (lo, hi) = if dim < 2 { (BASELINES[0], BASELINES[1]) } else { (BASELINES[3], BASELINES[4]) };
    let slope = (hi.1.ln() - lo.1.ln()) / (hi.0 as f64 - lo.0 as f64);
    (lo.1.ln() + slope * (dim as f64 - lo.0 as f64)).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub window: usize,
    /// Random-observer baseline; `None` selects the per-dimension default.
    pub baseline_level: Option<f64>,
    pub snr_cutoff: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            window: 15,
            baseline_level: None,
            snr_cutoff: 10.0,
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(NestError::config("convergence.window", "must be at least 2"));
        }
        if let Some(b) = self.baseline_level {
            if !(b > 0.0 && b.is_finite()) {
                return Err(NestError::config("convergence.baseline_level", "must be positive"));
            }
        }
        if !(self.snr_cutoff >= 1.0) {
            return Err(NestError::config("convergence.snr_cutoff", "must be at least 1"));
        }
        Ok(())
    }

    pub fn baseline_for(&self, dim: usize) -> f64 {
        self.baseline_level.unwrap_or_else(|| default_baseline(dim))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub bounds: Vec<Bound>,
    #[serde(default)]
    pub scale: PsychScaleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub acq: AcquisitionConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub seed: u64,
    /// Snap every query to an endpoint-inclusive grid with this many levels.
    #[serde(default)]
    pub grid_levels: Option<usize>,
    /// Enabled acquisition components.
    #[serde(default)]
    pub components: ComponentSet,
    /// Ignore the acquisition function and query the Sobol sequence only.
    #[serde(default)]
    pub pure_random: bool,
}

impl SessionConfig {
    pub fn new(bounds: Vec<Bound>) -> Self {
        Self {
            bounds,
            scale: PsychScaleConfig::default(),
            train: TrainConfig::default(),
            acq: AcquisitionConfig::default(),
            convergence: ConvergenceConfig::default(),
            seed: 0,
            grid_levels: None,
            components: ComponentSet::all(),
            pure_random: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_bounds(&self.bounds)?;
        Sobol::new(self.dim())?;
        self.scale.validate()?;
        self.train.validate()?;
        self.acq.validate()?;
        self.convergence.validate()?;
        if let Some(levels) = self.grid_levels {
            if levels < 2 {
                return Err(NestError::config("grid_levels", "must be at least 2"));
            }
        }
        if !self.pure_random {
            if self.components.is_empty() {
                return Err(NestError::config(
                    "components",
                    "at least one acquisition component is required unless pure_random is set",
                ));
            }
            if self.acq.weights.masked(&self.components).as_array().iter().sum::<f64>() <= 0.0 {
                return Err(NestError::config("acq.weights", "all enabled components have zero weight"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub stimulus: Vec<f64>,
    /// Whether the stimulus came from the exploration Sobol sequence.
    pub explored: bool,
}

/// Model estimate at one stimulus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointEstimate {
    /// Deterministic (no dropout) probability.
    pub prob: f64,
    pub mc_mean: f64,
    pub mc_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStatus {
    pub converged: bool,
    /// Baseline over windowed mean; absent until enough data exist. A zero
    /// window mean reports `f64::MAX`.
    pub snr: Option<f64>,
    pub window_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionState {
    pub config: SessionConfig,
    pub trial_count: usize,
    pub dataset: TrialDataset,
    pub net: NetworkState,
    pub fisher_history: Vec<f64>,
    pub pending: PendingQuery,
    pub converged: bool,
    /// First trial at which the convergence rule fired.
    pub convergence_trial: Option<usize>,
    /// Next unused index of the exploration Sobol sequence.
    pub sobol_index: u64,
}

/// Mean absolute successive difference of the last `window` differences.
pub fn windowed_difference(history: &[f64], window: usize) -> Option<f64> {
    if window == 0 || history.len() < window + 1 {
        return None;
    }
    let tail = &history[history.len() - window - 1..];
    Some(tail.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / window as f64)
}

/// Windowed statistic for every trial index at which it is defined.
pub fn windowed_series(history: &[f64], window: usize) -> Vec<Option<f64>> {
    (1..=history.len())
        .map(|n| windowed_difference(&history[..n], window))
        .collect()
}

/// Convergence rule from the Fisher history and class counts.
pub fn convergence_from_history(
    history: &[f64],
    class_counts: (usize, usize),
    dim: usize,
    cfg: &ConvergenceConfig,
) -> ConvergenceStatus {
    let not_yet = ConvergenceStatus {
        converged: false,
        snr: None,
        window_mean: None,
    };
    if class_counts.0 == 0 || class_counts.1 == 0 {
        return not_yet;
    }
    let Some(wm) = windowed_difference(history, cfg.window) else {
        return not_yet;
    };
    let baseline = cfg.baseline_for(dim);
    let snr = if wm > 0.0 { (baseline / wm).min(f64::MAX) } else { f64::MAX };
    ConvergenceStatus {
        converged: snr >= cfg.snr_cutoff,
        snr: Some(snr),
        window_mean: Some(wm),
    }
}

pub fn convergence_check(state: &SessionState) -> ConvergenceStatus {
    convergence_from_history(
        &state.fisher_history,
        state.dataset.class_counts(),
        state.config.dim(),
        &state.config.convergence,
    )
}

pub fn new_session(config: SessionConfig) -> Result<SessionState> {
    config.validate()?;
    let dim = config.dim();
    let net = init_network(dim, derive_seed(config.seed, &[TAG_INIT]))?;
    let dataset = TrialDataset::new(config.bounds.clone())?;
    let first = Sobol::new(dim)?.unit_point(1);
    let mut stimulus: Vec<f64> = first.iter().zip(&config.bounds).map(|(&u, b)| b.from_unit(u)).collect();
    if let Some(levels) = config.grid_levels {
        stimulus = snap_to_grid(&stimulus, levels, &config.bounds)?;
    }
    Ok(SessionState {
        config,
        trial_count: 0,
        dataset,
        net,
        fisher_history: Vec::new(),
        pending: PendingQuery {
            stimulus,
            explored: true,
        },
        converged: false,
        convergence_trial: None,
        sobol_index: 2,
    })
}

impl SessionState {
    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Appends a response, retrains, updates convergence and computes the
    /// next query. On error the state is left unchanged.
    pub fn record_response(&mut self, x: &[f64], response: bool) -> Result<()> {
        let mut next = self.clone();
        next.apply_response(x, response)?;
        *self = next;
        Ok(())
    }

    fn apply_response(&mut self, x: &[f64], response: bool) -> Result<()> {
        self.dataset.push(x.to_vec(), response)?;
        self.trial_count += 1;
        let t = self.trial_count;
        let freeze = self.config.train.normalization_freeze_trial;
        if t <= freeze {
            let (mean, mut std) = fit_normalization(&self.dataset, t, freeze)?;
            // A dimension whose recorded values are all identical keeps the
            // bounds-based scale instead of the floored one.
            for (s, b) in std.iter_mut().zip(&self.config.bounds) {
                if *s <= STD_FLOOR {
                    *s = 0.5 * b.span();
                }
            }
            self.dataset.norm_mean = mean;
            self.dataset.norm_std = std;
        }
        let report = train_trial(
            &mut self.net,
            &self.dataset,
            &self.config.train,
            &self.config.scale,
            derive_seed(self.config.seed, &[TAG_TRAIN, t as u64]),
        )?;
        self.fisher_history.push(report.fisher_energy);
        let status = convergence_check(self);
        self.converged = status.converged;
        if status.converged && self.convergence_trial.is_none() {
            self.convergence_trial = Some(t);
        }
        let sel = self.select()?;
        if sel.explored {
            self.sobol_index += 1;
        }
        self.pending = PendingQuery {
            stimulus: sel.x,
            explored: sel.explored,
        };
        Ok(())
    }

    /// Runs the acquisition step for the upcoming trial without mutating the
    /// session. Exposes per-candidate diagnostics.
    pub fn select(&self) -> Result<Selection> {
        let components = if self.config.pure_random {
            ComponentSet::none()
        } else {
            self.config.components
        };
        let req = SelectRequest {
            bounds: &self.config.bounds,
            trial: self.trial_count + 1,
            sobol_index: self.sobol_index,
            seed: derive_seed(self.config.seed, &[TAG_SELECT, self.trial_count as u64]),
            components,
            grid_levels: self.config.grid_levels,
            dropout_p: self.config.train.dropout_p,
            force_explore: None,
        };
        select_next(&self.net, &self.dataset, &self.config.scale, &self.config.acq, &req)
    }

    pub fn snapshot(&self) -> NetworkSnapshot {
        NetworkSnapshot::capture(&self.net, &self.config.scale, &self.dataset)
    }

    /// Deterministic predicted probabilities at native-unit stimuli.
    pub fn predict(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_points(points)?;
        let z = self.dataset.normalize_rows(points.iter().map(Vec::as_slice));
        let pass = self.net.forward_batch(z.view(), None);
        Ok(pass.raw.iter().map(|&u| self.config.scale.output(u)).collect())
    }

    /// Monte-Carlo dropout mean and standard deviation at native-unit
    /// stimuli, with a mask set fixed per trial.
    pub fn predict_with_std(&self, points: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        Ok(self.evaluate(points)?.into_iter().map(|e| (e.mc_mean, e.mc_std)).collect())
    }

    /// Deterministic prediction together with the Monte-Carlo dropout mean
    /// and standard deviation, sharing one pass up to the last hidden layer.
    pub fn evaluate(&self, points: &[Vec<f64>]) -> Result<Vec<PointEstimate>> {
        self.check_points(points)?;
        let width = *self.net.hidden_widths().last().expect("hidden layer");
        let mc = McDropout::new(
            width,
            self.config.train.dropout_p,
            self.config.acq.mc_samples,
            derive_seed(self.config.seed, &[TAG_PREDICT, self.trial_count as u64]),
        )?;
        let z = self.dataset.normalize_rows(points.iter().map(Vec::as_slice));
        let hidden = self.net.last_hidden(z.view());
        let out = self.net.layers().last().expect("output layer");
        let raw = hidden.dot(&out.weight.row(0)) + out.bias[0];
        let stats = mc.stats_from_hidden(&self.net, hidden.view(), &self.config.scale);
        Ok(raw
            .iter()
            .zip(stats)
            .map(|(&u, (m, v))| PointEstimate {
                prob: self.config.scale.output(u),
                mc_mean: m,
                mc_std: v.max(0.0).sqrt(),
            })
            .collect())
    }

    fn check_points(&self, points: &[Vec<f64>]) -> Result<()> {
        for p in points {
            if p.len() != self.dim() {
                return Err(NestError::Shape {
                    expected: self.dim(),
                    got: p.len(),
                });
            }
        }
        Ok(())
    }

    pub fn export_state(&self) -> SessionDocument {
        SessionDocument {
            format: DOCUMENT_FORMAT.into(),
            version: DOCUMENT_VERSION,
            config: self.config.clone(),
            trial_count: self.trial_count,
            records: self.dataset.records.clone(),
            norm_mean: self.dataset.norm_mean.clone(),
            norm_std: self.dataset.norm_std.clone(),
            network: self.snapshot(),
            fisher_history: self.fisher_history.clone(),
            pending: self.pending.clone(),
            converged: self.converged,
            convergence_trial: self.convergence_trial,
            sobol_index: self.sobol_index,
        }
    }

    pub fn export_json(&self) -> String {
        serde_json::to_string_pretty(&self.export_state()).expect("session document serializes")
    }
}

/// Versioned, self-describing session document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionDocument {
    pub format: String,
    pub version: u32,
    pub config: SessionConfig,
    pub trial_count: usize,
    pub records: Vec<crate::net::TrialRecord>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub network: NetworkSnapshot,
    pub fisher_history: Vec<f64>,
    pub pending: PendingQuery,
    pub converged: bool,
    pub convergence_trial: Option<usize>,
    pub sobol_index: u64,
}

impl SessionDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| NestError::Parse(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    /// Structural checks beyond what the schema enforces.
    pub fn validate(&self) -> Result<()> {
        let parse = |m: String| Err(NestError::Parse(m));
        if self.format != DOCUMENT_FORMAT {
            return parse(format!("unexpected format '{}'", self.format));
        }
        if self.version != DOCUMENT_VERSION {
            return parse(format!("unsupported version {}", self.version));
        }
        self.config.validate().map_err(|e| NestError::Parse(e.to_string()))?;
        let k = self.config.dim();
        if self.records.len() != self.trial_count || self.fisher_history.len() != self.trial_count {
            return parse("record and Fisher history lengths must equal trial_count".into());
        }
        if self.norm_mean.len() != k || self.norm_std.len() != k || self.norm_std.iter().any(|s| !(*s > 0.0)) {
            return parse("normalization statistics do not match the dimension".into());
        }
        for r in &self.records {
            crate::net::data::check_in_bounds(&r.stimulus, &self.config.bounds)
                .map_err(|e| NestError::Parse(e.to_string()))?;
        }
        crate::net::data::check_in_bounds(&self.pending.stimulus, &self.config.bounds)
            .map_err(|e| NestError::Parse(e.to_string()))?;
        if self.network.dim() != k {
            return parse("network input width does not match the dimension".into());
        }
        self.network.validate().map_err(|e| NestError::Parse(e.to_string()))?;
        Ok(())
    }
}

pub fn import_state(doc: &SessionDocument) -> Result<SessionState> {
    doc.validate()?;
    let net = doc.network.restore().map_err(|e| NestError::Parse(e.to_string()))?;
    let dataset = TrialDataset {
        records: doc.records.clone(),
        norm_mean: doc.norm_mean.clone(),
        norm_std: doc.norm_std.clone(),
        bounds: doc.config.bounds.clone(),
    };
    Ok(SessionState {
        config: doc.config.clone(),
        trial_count: doc.trial_count,
        dataset,
        net,
        fisher_history: doc.fisher_history.clone(),
        pending: doc.pending.clone(),
        converged: doc.converged,
        convergence_trial: doc.convergence_trial,
        sobol_index: doc.sobol_index,
    })
}

pub fn import_json(text: &str) -> Result<SessionState> {
    import_state(&SessionDocument::from_json(text)?)
}

/// Equal-weight average of several trained networks, each evaluated with its
/// own normalization.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<(NetworkState, NetworkSnapshot)>,
}

pub fn ensemble_average(snapshots: &[NetworkSnapshot]) -> Result<Ensemble> {
    let first = snapshots
        .first()
        .ok_or_else(|| NestError::Mismatch("ensemble needs at least one member".into()))?;
    let mut members = Vec::with_capacity(snapshots.len());
    for s in snapshots {
        if s.dim() != first.dim() {
            return Err(NestError::Mismatch(format!("dimension {} vs {}", s.dim(), first.dim())));
        }
        if s.bounds != first.bounds {
            return Err(NestError::Mismatch("members use different bounds".into()));
        }
        if s.scale != first.scale {
            return Err(NestError::Mismatch("members use different output scaling".into()));
        }
        members.push((s.restore()?, s.clone()));
    }
    Ok(Ensemble { members })
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut sum = 0.0;
        for (net, snap) in &self.members {
            sum += snap.predict(net, x)?;
        }
        Ok(sum / self.members.len() as f64)
    }
}
