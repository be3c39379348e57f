//! Next-stimulus selection: exploration draw, candidate sweep, normalizer
//! estimation and multi-start projected quasi-Newton refinement.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::components::{
    combine, exploration_probability, grad_component, lookahead_component, prox_component, unc_component,
    AcquisitionConfig, AcquisitionWeights, ComponentSet,
};
use super::ntk::{LookaheadCache, NtkFeatures};
use super::sampling::{blue_noise_subsample, snap_to_grid};
use super::sobol::Sobol;
use crate::error::{NestError, Result};
use crate::net::data::{validate_bounds, Bound};
use crate::net::mc::McDropout;
use crate::net::network::NetworkState;
use crate::net::psych::PsychScaleConfig;
use crate::net::TrialDataset;
use crate::util::{derive_seed, rng_from, squared_distance};

const TAG_EXPLORE: u64 = 0x4558_504c;
const TAG_SHIFT: u64 = 0x5348_4946_54;
const TAG_EVAL: u64 = 0x4556_414c;
const TAG_MC: u64 = 0x4d43;

/// Component values in `[0, 1]` for one scored stimulus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentValues {
    pub grad: f64,
    pub prox: f64,
    pub unc: f64,
    pub la: f64,
}

impl ComponentValues {
    pub fn as_array(&self) -> [f64; 4] {
        [self.grad, self.prox, self.unc, self.la]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub x: Vec<f64>,
    pub components: ComponentValues,
    pub combined: f64,
}

/// Unnormalized component statistics of one stimulus: input-gradient norm,
/// Parzen density, dropout standard deviation and lookahead statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawComponents {
    pub grad_norm: f64,
    pub density: f64,
    pub std: f64,
    pub f_la: f64,
}

/// Per-trial scorer. Everything that depends only on the trained network and
/// the history is computed once; normalizers are frozen after the sweep.
pub struct TrialScorer<'a> {
    net: &'a NetworkState,
    dataset: &'a TrialDataset,
    scale: &'a PsychScaleConfig,
    cfg: &'a AcquisitionConfig,
    enabled: ComponentSet,
    weights: AcquisitionWeights,
    x_norm: Array2<f64>,
    mc: Option<McDropout>,
    lookahead: Option<LookaheadCache>,
    normalizers: RawComponents,
}

impl<'a> TrialScorer<'a> {
    pub fn new(
        net: &'a NetworkState,
        dataset: &'a TrialDataset,
        scale: &'a PsychScaleConfig,
        cfg: &'a AcquisitionConfig,
        enabled: ComponentSet,
        dropout_p: f64,
        seed: u64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(NestError::EmptyHistory);
        }
        if enabled.is_empty() {
            return Err(NestError::config("ablation", "no acquisition component enabled"));
        }
        let weights = cfg.weights.masked(&enabled);
        if weights.as_array().iter().sum::<f64>() <= 0.0 {
            return Err(NestError::config("acq.weights", "all enabled components have zero weight"));
        }
        let x_norm = dataset.normalized_stimuli();
        let mc = if enabled.unc {
            let width = *net.hidden_widths().last().ok_or_else(|| {
                NestError::InvalidDimension("network has no hidden layer".into())
            })?;
            Some(McDropout::new(width, dropout_p, cfg.mc_samples, derive_seed(seed, &[TAG_MC]))?)
        } else {
            None
        };
        let lookahead = if enabled.la {
            let eval = blue_noise_subsample(
                &dataset.bounds,
                cfg.lookahead_subsample,
                dataset.dim(),
                derive_seed(seed, &[TAG_EVAL]),
            )?;
            let u_norm = dataset.normalize_rows(eval.points.iter().map(Vec::as_slice));
            Some(LookaheadCache::new(
                net,
                x_norm.view(),
                &dataset.labels(),
                u_norm.view(),
                scale,
                cfg.ntk_jitter,
            )?)
        } else {
            None
        };
        Ok(Self {
            net,
            dataset,
            scale,
            cfg,
            enabled,
            weights,
            x_norm,
            mc,
            lookahead,
            normalizers: RawComponents {
                grad_norm: 0.0,
                density: 0.0,
                std: 0.0,
                f_la: 0.0,
            },
        })
    }

    /// Raw statistics for a batch of native-unit stimuli. Disabled
    /// components are reported as zero.
    pub fn raw_batch(&self, points: &[Vec<f64>]) -> Result<Vec<RawComponents>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.dataset.normalize_rows(points.iter().map(Vec::as_slice));
        let feats = NtkFeatures::compute(self.net, z.view(), self.scale);
        let grad_norms: Vec<f64> = if self.enabled.grad {
            feats
                .input_gradients(self.net)
                .axis_iter(Axis(0))
                .map(|r| r.dot(&r).sqrt())
                .collect()
        } else {
            vec![0.0; points.len()]
        };
        let stds: Vec<f64> = match &self.mc {
            Some(mc) => mc
                .stats_from_hidden(self.net, feats.last_hidden(), self.scale)
                .into_iter()
                .map(|(_, v)| v.max(0.0).sqrt())
                .collect(),
            None => vec![0.0; points.len()],
        };
        let f_la = match &self.lookahead {
            Some(la) => la.f_la(&feats)?,
            None => vec![0.0; points.len()],
        };
        let h = self.cfg.parzen_h;
        let k = self.dataset.dim() as f64;
        let norm = self.x_norm.nrows() as f64 * h.powf(k) * (2.0 * std::f64::consts::PI).powf(k / 2.0);
        let mut out = Vec::with_capacity(points.len());
        for (i, zi) in z.axis_iter(Axis(0)).enumerate() {
            let density = if self.enabled.prox {
                let zi = zi.as_slice().expect("contiguous row");
                self.x_norm
                    .axis_iter(Axis(0))
                    .map(|xr| (-squared_distance(zi, xr.as_slice().expect("contiguous")) / (2.0 * h * h)).exp())
                    .sum::<f64>()
                    / norm
            } else {
                0.0
            };
            out.push(RawComponents {
                grad_norm: grad_norms[i],
                density,
                std: stds[i],
                f_la: f_la[i],
            });
        }
        Ok(out)
    }

    /// Sets every normalizer to the maximum of its statistic over `raws`.
    pub fn fit_normalizers(&mut self, raws: &[RawComponents]) {
        let max = |f: fn(&RawComponents) -> f64| raws.iter().map(f).fold(0.0, f64::max);
        self.normalizers = RawComponents {
            grad_norm: max(|r| r.grad_norm),
            density: max(|r| r.density),
            std: max(|r| r.std),
            f_la: max(|r| r.f_la),
        };
    }

    pub fn normalizers(&self) -> RawComponents {
        self.normalizers
    }

    /// Normalized components and combined score. Disabled components read 1.
    pub fn score(&self, raw: &RawComponents) -> (ComponentValues, f64) {
        let n = &self.normalizers;
        let e = &self.enabled;
        let comps = ComponentValues {
            grad: if e.grad { grad_component(raw.grad_norm, n.grad_norm) } else { 1.0 },
            prox: if e.prox { prox_component(raw.density, n.density) } else { 1.0 },
            unc: if e.unc { unc_component(raw.std, n.std) } else { 1.0 },
            la: if e.la { lookahead_component(raw.f_la, n.f_la) } else { 1.0 },
        };
        (comps, combine(comps.as_array(), &self.weights))
    }

    pub fn score_points(&self, points: &[Vec<f64>]) -> Result<Vec<CandidateScore>> {
        Ok(self
            .raw_batch(points)?
            .iter()
            .zip(points)
            .map(|(r, x)| {
                let (components, combined) = self.score(r);
                CandidateScore {
                    x: x.clone(),
                    components,
                    combined,
                }
            })
            .collect())
    }
}

/// Inputs of one selection step besides the network and history.
#[derive(Clone, Debug)]
pub struct SelectRequest<'a> {
    pub bounds: &'a [Bound],
    /// Index (starting at 1) of the trial the selected stimulus is for.
    pub trial: usize,
    /// Next unused index of the exploration Sobol sequence.
    pub sobol_index: u64,
    pub seed: u64,
    pub components: ComponentSet,
    pub grid_levels: Option<usize>,
    pub dropout_p: f64,
    /// Overrides the random exploration draw when set.
    pub force_explore: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub x: Vec<f64>,
    /// Whether the stimulus is the exploration Sobol point (the cursor advances).
    pub explored: bool,
    pub score: Option<CandidateScore>,
    pub candidates: Vec<CandidateScore>,
    pub normalizers: Option<RawComponents>,
}

/// Chooses the next stimulus.
pub fn select_next(
    net: &NetworkState,
    dataset: &TrialDataset,
    scale: &PsychScaleConfig,
    cfg: &AcquisitionConfig,
    req: &SelectRequest<'_>,
) -> Result<Selection> {
    validate_bounds(req.bounds)?;
    if req.bounds.len() != dataset.dim() {
        return Err(NestError::Shape {
            expected: dataset.dim(),
            got: req.bounds.len(),
        });
    }
    let dim = req.bounds.len();
    let sobol = Sobol::new(dim)?;
    let explore = match req.force_explore {
        Some(f) => f,
        None => {
            let p = exploration_probability(req.trial.max(1), &cfg.exploration)?;
            rng_from(req.seed, &[TAG_EXPLORE]).random::<f64>() < p
        }
    };
    if explore || req.components.is_empty() || dataset.is_empty() {
        let u = sobol.unit_point(req.sobol_index);
        let x = finish_point(to_native(&u, req.bounds), req)?;
        return Ok(Selection {
            x,
            explored: true,
            score: None,
            candidates: Vec::new(),
            normalizers: None,
        });
    }

    let mut scorer = TrialScorer::new(net, dataset, scale, cfg, req.components, req.dropout_p, req.seed)?;
    let mut rng = rng_from(req.seed, &[TAG_SHIFT]);
    let shift: Vec<u32> = (0..dim).map(|_| rng.random::<u32>()).collect();
    let unit_cands: Vec<Vec<f64>> = (0..cfg.candidate_count as u64)
        .map(|i| sobol.shifted_unit_point(i, &shift))
        .collect();
    let native: Vec<Vec<f64>> = unit_cands.iter().map(|u| to_native(u, req.bounds)).collect();
    let raws = scorer.raw_batch(&native)?;
    scorer.fit_normalizers(&raws);
    let candidates: Vec<CandidateScore> = raws
        .iter()
        .zip(&native)
        .map(|(r, x)| {
            let (components, combined) = scorer.score(r);
            CandidateScore {
                x: x.clone(),
                components,
                combined,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].combined.total_cmp(&candidates[a].combined).then(a.cmp(&b)));
    let mut best_unit = unit_cands[order[0]].clone();
    let mut best_score = candidates[order[0]].combined;
    for &start in order.iter().take(cfg.restarts) {
        let (u, s) = refine(&scorer, &unit_cands[start], candidates[start].combined, req.bounds, cfg)?;
        if s > best_score {
            best_score = s;
            best_unit = u;
        }
    }
    let x = finish_point(to_native(&best_unit, req.bounds), req)?;
    let score = scorer.score_points(std::slice::from_ref(&x))?.pop();
    Ok(Selection {
        x,
        explored: false,
        score,
        candidates,
        normalizers: Some(scorer.normalizers()),
    })
}

fn to_native(u: &[f64], bounds: &[Bound]) -> Vec<f64> {
    u.iter().zip(bounds).map(|(&v, b)| b.clamp(b.from_unit(v))).collect()
}

fn finish_point(x: Vec<f64>, req: &SelectRequest<'_>) -> Result<Vec<f64>> {
    let x: Vec<f64> = x.iter().zip(req.bounds).map(|(&v, b)| b.clamp(v)).collect();
    match req.grid_levels {
        Some(levels) => snap_to_grid(&x, levels, req.bounds),
        None => Ok(x),
    }
}

/// Log of the combined score at unit-cube points.
fn log_scores(scorer: &TrialScorer<'_>, units: &[Vec<f64>], bounds: &[Bound]) -> Result<Vec<f64>> {
    let native: Vec<Vec<f64>> = units.iter().map(|u| to_native(u, bounds)).collect();
    Ok(scorer
        .raw_batch(&native)?
        .iter()
        .map(|r| {
            let s = scorer.score(r).1;
            if s > 0.0 {
                s.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

/// Forward-difference gradient of the log score; steps that would leave the
/// cube go backwards instead.
fn fd_gradient(
    scorer: &TrialScorer<'_>,
    u: &[f64],
    f0: f64,
    bounds: &[Bound],
    h: f64,
) -> Result<Vec<f64>> {
    let steps: Vec<f64> = u.iter().map(|&v| if v + h <= 1.0 { h } else { -h }).collect();
    let probes: Vec<Vec<f64>> = (0..u.len())
        .map(|i| {
            let mut p = u.to_vec();
            p[i] += steps[i];
            p
        })
        .collect();
    let vals = log_scores(scorer, &probes, bounds)?;
    Ok(vals
        .iter()
        .zip(&steps)
        .map(|(&v, &s)| if v.is_finite() { (v - f0) / s } else { 0.0 })
        .collect())
}

/// Projected BFGS ascent on the log score inside the unit cube. Returns the
/// best point found and its (non-log) combined score; never worse than the start.
fn refine(
    scorer: &TrialScorer<'_>,
    start: &[f64],
    start_score: f64,
    bounds: &[Bound],
    cfg: &AcquisitionConfig,
) -> Result<(Vec<f64>, f64)> {
    let k = start.len();
    if !(start_score > 0.0) || cfg.refine_iterations == 0 {
        return Ok((start.to_vec(), start_score));
    }
    let mut u = start.to_vec();
    let mut f = start_score.ln();
    let mut g = fd_gradient(scorer, &u, f, bounds, cfg.fd_step)?;
    // Inverse Hessian approximation of the negated objective.
    let mut hinv = vec![vec![0.0; k]; k];
    for (i, row) in hinv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..cfg.refine_iterations {
        let mut d: Vec<f64> = (0..k).map(|i| (0..k).map(|j| hinv[i][j] * g[j]).sum()).collect();
        // Freeze coordinates pinned at a face and pushing outward.
        for i in 0..k {
            if (u[i] <= 0.0 && d[i] < 0.0) || (u[i] >= 1.0 && d[i] > 0.0) {
                d[i] = 0.0;
            }
        }
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dmax < 1e-12 {
            break;
        }
        let mut step = (0.1 / dmax).min(1.0);
        let mut accepted = None;
        for _ in 0..8 {
            let cand: Vec<f64> = u.iter().zip(&d).map(|(&ui, &di)| (ui + step * di).clamp(0.0, 1.0)).collect();
            let fc = log_scores(scorer, std::slice::from_ref(&cand), bounds)?[0];
            let gain: f64 = g.iter().zip(cand.iter().zip(&u)).map(|(gi, (c, ui))| gi * (c - ui)).sum();
            if fc.is_finite() && fc >= f + 1e-4 * gain && fc > f {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((u_new, f_new)) = accepted else {
            break;
        };
        let g_new = fd_gradient(scorer, &u_new, f_new, bounds, cfg.fd_step)?;
        let s: Vec<f64> = u_new.iter().zip(&u).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let hy: Vec<f64> = (0..k).map(|i| (0..k).map(|j| hinv[i][j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for i in 0..k {
                for j in 0..k {
                    hinv[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
        let improvement = f_new - f;
        u = u_new;
        f = f_new;
        g = g_new;
        if improvement < 1e-10 {
            break;
        }
    }
    Ok((u, f.exp()))
}
