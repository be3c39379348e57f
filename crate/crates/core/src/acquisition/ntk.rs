//! Empirical neural tangent kernel and NTK-linearized lookahead.
//!
//! The kernel `Theta(a, b) = grad_theta q(a) . grad_theta q(b)` is evaluated
//! without materializing parameter gradients: for a dense layer the weight
//! gradient is the outer product of the backpropagated delta and the layer
//! input, so `Theta(a, b) = sum_l (delta_l(a) . delta_l(b)) * (in_l(a) . in_l(b) + 1)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{NestError, Result};
use crate::net::network::NetworkState;
use crate::net::psych::PsychScaleConfig;
use crate::net::TrialDataset;

/// Number of times the jitter is multiplied by 10 before giving up.
pub const JITTER_ESCALATIONS: usize = 3;

const SMALL_BATCH: usize = 8;

/// Per-layer inputs and output deltas of the scaled probability for a batch.
#[derive(Clone, Debug)]
pub struct NtkFeatures {
    inputs: Vec<Array2<f64>>,
    deltas: Vec<Array2<f64>>,
    pub raw: Array1<f64>,
    pub prob: Array1<f64>,
}

impl NtkFeatures {
    /// Deterministic forward and backward pass over the rows of `x` (normalized).
    pub fn compute(net: &NetworkState, x: ArrayView2<f64>, scale: &PsychScaleConfig) -> Self {
        let mut pass = net.forward_batch(x, None);
        let seed = pass.raw.mapv(|u| scale.output_derivative(u));
        let deltas = pass.backward(net, seed.view());
        let prob = pass.raw.mapv(|u| scale.output(u));
        let raw = std::mem::take(&mut pass.raw);
        Self {
            inputs: std::mem::take(&mut pass.acts),
            deltas,
            raw,
            prob,
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Gradient of the scaled probability with respect to each input row.
    pub fn input_gradients(&self, net: &NetworkState) -> Array2<f64> {
        self.deltas[0].dot(&net.layers()[0].weight)
    }

    /// Activations of the last hidden layer.
    pub fn last_hidden(&self) -> ArrayView2<'_, f64> {
        self.inputs.last().expect("output layer input").view()
    }

    /// Diagonal `Theta(a, a)` for every row.
    pub fn self_kernel(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.len());
        for (d, a) in self.deltas.iter().zip(&self.inputs) {
            let dd = d.map_axis(Axis(1), |r| r.dot(&r));
            let aa = a.map_axis(Axis(1), |r| r.dot(&r));
            Zip::from(&mut out).and(&dd).and(&aa).for_each(|o, &x, &y| *o += x * (y + 1.0));
        }
        out
    }
}

/// Cross kernel matrix `Theta(A, B)` of shape `|A| x |B|`.
pub fn ntk_cross(a: &NtkFeatures, b: &NtkFeatures) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    if a.is_empty() || b.is_empty() {
        return out;
    }
    // Matrix-vector products avoid GEMM packing overhead for a few rows.
    if a.len() <= SMALL_BATCH {
        for ((da, ia), (db, ib)) in a.deltas.iter().zip(&a.inputs).zip(b.deltas.iter().zip(&b.inputs)) {
            for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                let dd = db.dot(&da.row(i));
                let ii = ib.dot(&ia.row(i));
                Zip::from(&mut row).and(&dd).and(&ii).for_each(|o, &x, &y| *o += x * (y + 1.0));
            }
        }
        return out;
    }
    for ((da, ia), (db, ib)) in a.deltas.iter().zip(&a.inputs).zip(b.deltas.iter().zip(&b.inputs)) {
        let dd = da.dot(&db.t());
        let mut ii = ia.dot(&ib.t());
        ii += 1.0;
        Zip::from(&mut out).and(&dd).and(&ii).for_each(|o, &x, &y| *o += x * y);
    }
    out
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Cholesky factor of `gram + jitter I`, multiplying the jitter by 10 up to
/// [`JITTER_ESCALATIONS`] times. Returns the factor and the jitter used.
pub fn factor_with_jitter(gram: &DMatrix<f64>, jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut j = jitter;
    for attempt in 0..=JITTER_ESCALATIONS {
        let mut m = gram.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += j;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok((ch, j));
        }
        if attempt < JITTER_ESCALATIONS {
            j *= 10.0;
        }
    }
    Err(NestError::SingularKernel { jitter: j })
}

/// Predictions after one NTK-linearized step on the augmented set
/// `X+ = X u {x_new}`: `q(u) + Theta(u, X+) (Theta(X+, X+) + jI)^-1 (Y+ - q(X+))`.
///
/// All points are native-unit stimuli, normalized with the dataset statistics.
pub fn ntk_lookahead_predict(
    net: &NetworkState,
    dataset: &TrialDataset,
    scale: &PsychScaleConfig,
    x_new: &[f64],
    y_new: bool,
    eval_points: &[Vec<f64>],
    jitter: f64,
) -> Result<Vec<f64>> {
    if !(jitter > 0.0) {
        return Err(NestError::InvalidArgument("jitter must be positive".into()));
    }
    if x_new.len() != dataset.dim() {
        return Err(NestError::Shape {
            expected: dataset.dim(),
            got: x_new.len(),
        });
    }
    let mut plus: Vec<&[f64]> = dataset.records.iter().map(|r| r.stimulus.as_slice()).collect();
    plus.push(x_new);
    let mut labels = dataset.labels();
    labels.push(if y_new { 1.0 } else { 0.0 });
    let xp = NtkFeatures::compute(net, dataset.normalize_rows(plus).view(), scale);
    let u = NtkFeatures::compute(
        net,
        dataset.normalize_rows(eval_points.iter().map(Vec::as_slice)).view(),
        scale,
    );
    let gram = to_dmatrix(&ntk_cross(&xp, &xp));
    let resid = DVector::from_iterator(labels.len(), labels.iter().zip(&xp.prob).map(|(y, q)| y - q));
    let k_ux = to_dmatrix(&ntk_cross(&u, &xp));
    let delta = kernel_correction(&k_ux, &gram, &resid, jitter)?;
    Ok(u.prob.iter().zip(delta.iter()).map(|(q, d)| q + d).collect())
}

/// `K_ux (gram + jI)^-1 resid`.
pub fn kernel_correction(
    k_ux: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    resid: &DVector<f64>,
    jitter: f64,
) -> Result<DVector<f64>> {
    let (chol, _) = factor_with_jitter(gram, jitter)?;
    Ok(k_ux * chol.solve(resid))
}

/// Per-trial cache for the lookahead statistic. The Gram matrix of the
/// training stimuli is factorized once; each candidate extends it by one row
/// and column through the Schur complement.
pub struct LookaheadCache {
    gram: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    jitter: f64,
    base_jitter: f64,
    x_feats: NtkFeatures,
    u_feats: NtkFeatures,
    resid: DVector<f64>,
    /// `Theta(U, X)`, `|U| x N`.
    k_ux: DMatrix<f64>,
    /// Change at `U` caused by the existing residuals alone.
    base_delta: DVector<f64>,
    /// `A^-1 r`.
    alpha: DVector<f64>,
}

impl LookaheadCache {
    /// `x_norm` and `u_norm` are normalized training and evaluation stimuli.
    pub fn new(
        net: &NetworkState,
        x_norm: ArrayView2<f64>,
        labels: &[f64],
        u_norm: ArrayView2<f64>,
        scale: &PsychScaleConfig,
        jitter: f64,
    ) -> Result<Self> {
        if u_norm.nrows() == 0 {
            return Err(NestError::InvalidArgument("lookahead needs at least one evaluation point".into()));
        }
        let x_feats = NtkFeatures::compute(net, x_norm, scale);
        let u_feats = NtkFeatures::compute(net, u_norm, scale);
        let n = x_feats.len();
        let gram = to_dmatrix(&ntk_cross(&x_feats, &x_feats));
        let (chol, used) = if n > 0 {
            let (c, j) = factor_with_jitter(&gram, jitter)?;
            (Some(c), j)
        } else {
            (None, jitter)
        };
        let resid = DVector::from_iterator(n, labels.iter().zip(&x_feats.prob).map(|(y, q)| y - q));
        let alpha = match &chol {
            Some(c) => c.solve(&resid),
            None => DVector::zeros(0),
        };
        let k_ux = to_dmatrix(&ntk_cross(&u_feats, &x_feats));
        let base_delta = &k_ux * &alpha;
        Ok(Self {
            gram,
            chol,
            jitter: used,
            base_jitter: jitter,
            x_feats,
            u_feats,
            resid,
            k_ux,
            base_delta,
            alpha,
        })
    }

    pub fn eval_count(&self) -> usize {
        self.u_feats.len()
    }

    /// Lookahead statistic `min_y (1/|U|) sum_u (q_{D+(x,y)}(u) - q_D(u))^2`
    /// for every candidate in `cands`.
    pub fn f_la(&self, cands: &NtkFeatures) -> Result<Vec<f64>> {
        let b = cands.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let k_cx = to_dmatrix(&ntk_cross(cands, &self.x_feats));
        let k_cu = to_dmatrix(&ntk_cross(cands, &self.u_feats));
        let kappa = cands.self_kernel();
        let n = self.x_feats.len();
        // w = A^-1 k_x for every candidate, one column each.
        let w = match &self.chol {
            Some(c) => c.solve(&k_cx.transpose()),
            None => DMatrix::zeros(0, b),
        };
        // Theta(U, X) w, |U| x B.
        let uw = &self.k_ux * &w;
        let m = self.u_feats.len() as f64;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let wi = w.column(i);
            let s = kappa[i] + self.jitter - k_cx.row(i).transpose().dot(&wi);
            if !(s > 0.0 && s.is_finite()) || n > 0 && s <= self.jitter * 1e-6 {
                out.push(self.f_la_direct(&k_cx, &k_cu, kappa[i], cands.prob[i], i)?);
                continue;
            }
            let wr = wi.dot(&self.resid);
            let q = cands.prob[i];
            let e: DVector<f64> = k_cu.row(i).transpose() - uw.column(i);
            let mut best = f64::INFINITY;
            for y in [0.0, 1.0] {
                let c = (y - q - wr) / s;
                let sum: f64 = self
                    .base_delta
                    .iter()
                    .zip(e.iter())
                    .map(|(bd, ev)| {
                        let d = bd + ev * c;
                        d * d
                    })
                    .sum();
                best = best.min(sum);
            }
            out.push(best / m);
        }
        Ok(out)
    }

    /// Full refactorization of the augmented Gram matrix, used when the
    /// Schur complement is not safely positive.
    fn f_la_direct(&self, k_cx: &DMatrix<f64>, k_cu: &DMatrix<f64>, kappa: f64, q: f64, i: usize) -> Result<f64> {
        let n = self.x_feats.len();
        let mut aug = DMatrix::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(&self.gram);
        for j in 0..n {
            aug[(n, j)] = k_cx[(i, j)];
            aug[(j, n)] = k_cx[(i, j)];
        }
        aug[(n, n)] = kappa;
        let (chol, _) = factor_with_jitter(&aug, self.base_jitter)?;
        let mut k_uplus = DMatrix::zeros(self.u_feats.len(), n + 1);
        k_uplus.view_mut((0, 0), (self.u_feats.len(), n)).copy_from(&self.k_ux);
        for u in 0..self.u_feats.len() {
            k_uplus[(u, n)] = k_cu[(i, u)];
        }
        let mut best = f64::INFINITY;
        for y in [0.0, 1.0] {
            let mut r = DVector::zeros(n + 1);
            r.rows_mut(0, n).copy_from(&self.resid);
            r[n] = y - q;
            let delta = &k_uplus * chol.solve(&r);
            best = best.min(delta.norm_squared());
        }
        Ok(best / self.u_feats.len() as f64)
    }

    /// Existing-residual coefficients `A^-1 r`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::data::Bound;
    use crate::net::network::{init_network, param_gradient};

    #[test]
    fn factorized_kernel_matches_explicit_gradients() {
        let net = init_network(3, 5).unwrap();
        let scale = PsychScaleConfig::with_asymptotes(0.5, 0.02);
        let pts = [[0.1, -0.4, 0.9], [1.2, 0.3, -0.7], [-0.5, -0.5, 0.2]];
        let x = Array2::from_shape_fn((3, 3), |(i, j)| pts[i][j]);
        let feats = NtkFeatures::compute(&net, x.view(), &scale);
        let k = ntk_cross(&feats, &feats);
        let diag = feats.self_kernel();
        for i in 0..3 {
            let gi = param_gradient(&net, &pts[i], &scale).unwrap();
            for j in 0..3 {
                let gj = param_gradient(&net, &pts[j], &scale).unwrap();
                let explicit: f64 = gi.iter().zip(&gj).map(|(a, b)| a * b).sum();
                assert!((k[[i, j]] - explicit).abs() <= 1e-12 * explicit.abs().max(1e-12));
            }
            assert!((diag[i] - k[[i, i]]).abs() <= 1e-12 * diag[i]);
        }
    }

    #[test]
    fn zero_residual_gives_zero_correction() {
        let gram = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let k_ux = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.3, -0.1, 5.0, 4.0]);
        let d = kernel_correction(&k_ux, &gram, &DVector::zeros(2), 1e-6).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lookahead_interpolates_new_point() {
        let net = init_network(2, 2).unwrap();
        let scale = PsychScaleConfig::default();
        let data = TrialDataset::new(vec![Bound::new(-1.0, 1.0); 2]).unwrap();
        let x_new = [0.2, 0.3];
        let at_new = ntk_lookahead_predict(&net, &data, &scale, &x_new, true, &[x_new.to_vec()], 1e-6).unwrap();
        assert!((at_new[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn indefinite_matrix_is_singular_after_escalation() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        assert!(matches!(factor_with_jitter(&m, 1e-6), Err(NestError::SingularKernel { .. })));
        let (_, j) = factor_with_jitter(&DMatrix::from_row_slice(1, 1, &[-5e-6]), 1e-6).unwrap();
        assert!((j - 1e-5).abs() < 1e-20 || (j - 1e-4).abs() < 1e-20);
    }
}
