//! Request handlers and the shared session registry.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::Json;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use nest_core::session::{convergence_check, import_state, new_session, SessionConfig, SessionDocument, SessionState};

use crate::error::ApiError;
use crate::store::{DimensionLabel, Store, StoredSession};

/// Largest number of trailing entries returned in status payloads.
pub const STATUS_TAIL: usize = 50;
/// Per-coordinate tolerance when matching a response to the pending query.
pub const STIMULUS_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_SLICE_RESOLUTION: usize = 64;
pub const MAX_SLICE_RESOLUTION: usize = 512;

/// One live session. Reads take the committed state; writers hold `writer`
/// for the whole retrain-persist-commit sequence.
pub struct SessionSlot {
    pub id: String,
    pub created_at: u64,
    pub labels: Vec<DimensionLabel>,
    committed: RwLock<Arc<SessionState>>,
    writer: Mutex<()>,
}

impl SessionSlot {
    fn new(id: String, created_at: u64, labels: Vec<DimensionLabel>, state: SessionState) -> Self {
        Self {
            id,
            created_at,
            labels,
            committed: RwLock::new(Arc::new(state)),
            writer: Mutex::new(()),
        }
    }

    pub fn state(&self) -> Arc<SessionState> {
        self.committed.read().expect("session lock poisoned").clone()
    }

    fn commit(&self, state: SessionState) {
        *self.committed.write().expect("session lock poisoned") = Arc::new(state);
    }

    fn stored(&self, state: &SessionState) -> StoredSession {
        StoredSession {
            id: self.id.clone(),
            created_at: self.created_at,
            labels: self.labels.clone(),
            document: state.export_state(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<SessionSlot>>>>,
    store: Option<Store>,
}

impl AppState {
    /// Registry persisted to `store` (if any), preloaded with its live sessions.
    pub fn new(store: Option<Store>) -> Result<Self, ApiError> {
        let mut map = HashMap::new();
        if let Some(s) = &store {
            for stored in s.load_all()? {
                let state = import_state(&stored.document)?;
                let slot = SessionSlot::new(stored.id.clone(), stored.created_at, stored.labels, state);
                map.insert(stored.id, Arc::new(slot));
            }
        }
        Ok(Self {
            sessions: Arc::new(RwLock::new(map)),
            store,
        })
    }

    pub fn in_memory() -> Self {
        Self {
            sessions: Arc::default(),
            store: None,
        }
    }

    pub fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.sessions
            .read()
            .expect("registry lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    async fn persist(&self, stored: StoredSession) -> Result<(), ApiError> {
        let Some(store) = self.store.clone() else {
            return Ok(());
        };
        tokio::task::spawn_blocking(move || store.save(&stored))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
    }

    async fn register(&self, labels: Vec<DimensionLabel>, state: SessionState) -> Result<Arc<SessionSlot>, ApiError> {
        if !labels.is_empty() && labels.len() != state.dim() {
            return Err(ApiError::BadRequest {
                message: format!("{} labels for {} dimensions", labels.len(), state.dim()),
                field: Some("labels".into()),
            });
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let slot = Arc::new(SessionSlot::new(id.clone(), now_millis(), labels, state));
        self.persist(slot.stored(&slot.state())).await?;
        self.sessions
            .write()
            .expect("registry lock poisoned")
            .insert(id, slot.clone());
        Ok(slot)
    }
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub config: SessionConfig,
    #[serde(default)]
    pub labels: Vec<DimensionLabel>,
}

#[derive(Debug, Deserialize)]
pub struct ImportRequest {
    pub document: SessionDocument,
    #[serde(default)]
    pub labels: Vec<DimensionLabel>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub status: StatusRecord,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub created_at: u64,
    pub dim: usize,
    pub trial_count: usize,
    pub converged: bool,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub stimulus: Vec<f64>,
    pub trial_index: usize,
    pub was_random_exploration: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResponseRequest {
    pub stimulus: Vec<f64>,
    /// 0 or 1.
    pub response: u8,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub trial: usize,
    pub stimulus: Vec<f64>,
    pub response: u8,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusRecord {
    pub id: String,
    pub dim: usize,
    pub labels: Vec<DimensionLabel>,
    pub bounds: Vec<nest_core::net::Bound>,
    pub trial_count: usize,
    pub converged: bool,
    pub convergence_trial: Option<usize>,
    pub snr: Option<f64>,
    pub window_mean: Option<f64>,
    pub snr_cutoff: f64,
    pub baseline: f64,
    pub window: usize,
    /// Fisher energies of the most recent trials, oldest first.
    pub fisher_history_tail: Vec<f64>,
    pub class_counts: ClassCounts,
    /// Most recent trials, oldest first.
    pub recent_trials: Vec<TrialEntry>,
}

fn status_of(slot: &SessionSlot, s: &SessionState) -> StatusRecord {
    let conv = convergence_check(s);
    let (positive, negative) = s.dataset.class_counts();
    let n = s.fisher_history.len();
    let start = n.saturating_sub(STATUS_TAIL);
    let records = &s.dataset.records;
    StatusRecord {
        id: slot.id.clone(),
        dim: s.dim(),
        labels: slot.labels.clone(),
        bounds: s.config.bounds.clone(),
        trial_count: s.trial_count,
        converged: s.converged,
        convergence_trial: s.convergence_trial,
        snr: conv.snr,
        window_mean: conv.window_mean,
        snr_cutoff: s.config.convergence.snr_cutoff,
        baseline: s.config.convergence.baseline_for(s.dim()),
        window: s.config.convergence.window,
        fisher_history_tail: s.fisher_history[start..].to_vec(),
        class_counts: ClassCounts { positive, negative },
        recent_trials: records
            .iter()
            .enumerate()
            .skip(records.len().saturating_sub(STATUS_TAIL))
            .map(|(i, r)| TrialEntry {
                trial: i + 1,
                stimulus: r.stimulus.clone(),
                response: u8::from(r.response),
            })
            .collect(),
    }
}

pub async fn create_session(
    State(app): State<AppState>,
    Json(req): Json<CreateRequest>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    req.config.scale.validate()?;
    let state = new_session(req.config)?;
    let slot = app.register(req.labels, state).await?;
    let status = status_of(&slot, &slot.state());
    Ok((StatusCode::CREATED, Json(Created { id: slot.id.clone(), status })))
}

pub async fn import_session(
    State(app): State<AppState>,
    Json(req): Json<ImportRequest>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let state = import_state(&req.document)?;
    let slot = app.register(req.labels, state).await?;
    let status = status_of(&slot, &slot.state());
    Ok((StatusCode::CREATED, Json(Created { id: slot.id.clone(), status })))
}

pub async fn list_sessions(State(app): State<AppState>) -> Json<Vec<SessionSummary>> {
    let slots: Vec<Arc<SessionSlot>> = app
        .sessions
        .read()
        .expect("registry lock poisoned")
        .values()
        .cloned()
        .collect();
    let mut out: Vec<SessionSummary> = slots
        .iter()
        .map(|slot| {
            let s = slot.state();
            SessionSummary {
                id: slot.id.clone(),
                created_at: slot.created_at,
                dim: s.dim(),
                trial_count: s.trial_count,
                converged: s.converged,
            }
        })
        .collect();
    out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
    Json(out)
}

pub async fn get_next(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<QueryRecord>, ApiError> {
    let s = app.slot(&id)?.state();
    Ok(Json(QueryRecord {
        stimulus: s.pending.stimulus.clone(),
        trial_index: s.trial_count + 1,
        was_random_exploration: s.pending.explored,
    }))
}

pub async fn post_response(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ResponseRequest>,
) -> Result<Json<StatusRecord>, ApiError> {
    let slot = app.slot(&id)?;
    let response = match req.response {
        0 => false,
        1 => true,
        other => {
            return Err(ApiError::BadRequest {
                message: format!("response must be 0 or 1, got {other}"),
                field: Some("response".into()),
            })
        }
    };
    let _guard = slot.writer.lock().await;
    let current = slot.state();
    let pending = &current.pending.stimulus;
    let matches = req.stimulus.len() == pending.len()
        && req
            .stimulus
            .iter()
            .zip(pending)
            .all(|(a, b)| (a - b).abs() <= STIMULUS_TOLERANCE);
    if !matches {
        return Err(ApiError::Conflict(format!(
            "stimulus {:?} does not match the pending query {:?}; fetch /next again",
            req.stimulus, pending
        )));
    }
    // The pending stimulus itself is recorded so the stored history is exact.
    let x = pending.clone();
    let mut next = (*current).clone();
    let next = tokio::task::spawn_blocking(move || next.record_response(&x, response).map(|_| next))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    app.persist(slot.stored(&next)).await?;
    let status = status_of(&slot, &next);
    slot.commit(next);
    Ok(Json(status))
}

pub async fn get_status(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<StatusRecord>, ApiError> {
    let slot = app.slot(&id)?;
    let state = slot.state();
    Ok(Json(status_of(&slot, &state)))
}

#[derive(Debug, Default, Deserialize)]
pub struct SliceQuery {
    pub dim_x: Option<usize>,
    pub dim_y: Option<usize>,
    /// Comma-separated values for every dimension; entries for the sliced
    /// dimensions are ignored. Defaults to the bound midpoints.
    pub fixed: Option<String>,
    pub resolution: Option<usize>,
    /// Include the Monte-Carlo dropout standard deviation per cell.
    #[serde(default)]
    pub std: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrialMarker {
    pub x: f64,
    pub y: Option<f64>,
    pub response: u8,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SliceGrid {
    pub dim_x: usize,
    pub dim_y: Option<usize>,
    pub resolution: usize,
    pub x_values: Vec<f64>,
    pub y_values: Vec<f64>,
    /// Values of the dimensions held fixed, in dimension order.
    pub fixed: Vec<f64>,
    /// Row-major over `y_values` (rows) and `x_values` (columns).
    pub values: Vec<f64>,
    pub std: Option<Vec<f64>>,
    pub alpha: f64,
    pub upper: f64,
    pub trials: Vec<TrialMarker>,
}

fn axis(b: &nest_core::net::Bound, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { b.high } else { b.low + b.span() * i as f64 / (n - 1) as f64 })
        .collect()
}

/// Predicted probabilities over a plane through the stimulus space.
pub fn compute_slice(s: &SessionState, q: &SliceQuery) -> Result<SliceGrid, ApiError> {
    let k = s.dim();
    let bounds = &s.config.bounds;
    let field = |f: &str, m: String| ApiError::BadRequest {
        message: m,
        field: Some(f.into()),
    };
    let dim_x = q.dim_x.unwrap_or(0);
    let dim_y = match (q.dim_y, k) {
        (Some(d), _) => Some(d),
        (None, 1) => None,
        (None, _) => Some(if dim_x == 1 { 0 } else { 1 }),
    };
    if dim_x >= k || dim_y.is_some_and(|d| d >= k) {
        return Err(field("dim_x", format!("slice dimensions must be below {k}")));
    }
    if dim_y == Some(dim_x) {
        return Err(field("dim_y", "dim_x and dim_y must differ".into()));
    }
    let resolution = q.resolution.unwrap_or(DEFAULT_SLICE_RESOLUTION);
    if !(2..=MAX_SLICE_RESOLUTION).contains(&resolution) {
        return Err(field("resolution", format!("must be in 2..={MAX_SLICE_RESOLUTION}")));
    }
    let mut fixed: Vec<f64> = bounds.iter().map(|b| 0.5 * (b.low + b.high)).collect();
    if let Some(text) = q.fixed.as_deref().filter(|t| !t.trim().is_empty()) {
        let vals = text
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| field("fixed", e.to_string()))?;
        if vals.len() != k {
            return Err(field("fixed", format!("expected {k} values, got {}", vals.len())));
        }
        for (i, (v, b)) in vals.iter().zip(bounds).enumerate() {
            if i != dim_x && Some(i) != dim_y && !b.contains(*v) {
                return Err(field("fixed", format!("value {v} outside [{}, {}]", b.low, b.high)));
            }
        }
        fixed = vals;
    }
    let x_values = axis(&bounds[dim_x], resolution);
    let y_values = match dim_y {
        Some(d) => axis(&bounds[d], resolution),
        None => Vec::new(),
    };
    let rows = if dim_y.is_some() { resolution } else { 1 };
    let mut points = Vec::with_capacity(rows * resolution);
    for r in 0..rows {
        for &xv in &x_values {
            let mut p = fixed.clone();
            p[dim_x] = xv;
            if let Some(d) = dim_y {
                p[d] = y_values[r];
            }
            points.push(p);
        }
    }
    let (values, std) = if q.std {
        let est = s.evaluate(&points)?;
        (
            est.iter().map(|e| e.prob).collect(),
            Some(est.iter().map(|e| e.mc_std).collect()),
        )
    } else {
        (s.predict(&points)?, None)
    };
    let trials = s
        .dataset
        .records
        .iter()
        .map(|r| TrialMarker {
            x: r.stimulus[dim_x],
            y: dim_y.map(|d| r.stimulus[d]),
            response: u8::from(r.response),
        })
        .collect();
    let fixed = fixed
        .into_iter()
        .enumerate()
        .filter(|(i, _)| *i != dim_x && Some(*i) != dim_y)
        .map(|(_, v)| v)
        .collect();
    Ok(SliceGrid {
        dim_x,
        dim_y,
        resolution,
        fixed,
        x_values,
        y_values,
        values,
        std,
        alpha: s.config.scale.alpha,
        upper: 1.0 - s.config.scale.gamma_lapse,
        trials,
    })
}

pub async fn get_slice(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> Result<Json<SliceGrid>, ApiError> {
    let state = app.slot(&id)?.state();
    let grid = tokio::task::spawn_blocking(move || compute_slice(&state, &q))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(grid))
}

pub async fn export_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionDocument>, ApiError> {
    Ok(Json(app.slot(&id)?.state().export_state()))
}

pub async fn finish_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionDocument>, ApiError> {
    let slot = app.slot(&id)?;
    let _guard = slot.writer.lock().await;
    let removed = app.sessions.write().expect("registry lock poisoned").remove(&id);
    if removed.is_none() {
        return Err(ApiError::NotFound(id));
    }
    if let Some(store) = app.store.clone() {
        let rid = id.clone();
        tokio::task::spawn_blocking(move || store.retire(&rid))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))??;
    }
    Ok(Json(slot.state().export_state()))
}
