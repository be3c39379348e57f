//! Fully connected ReLU network with a scalar output.
//!
//! Weight matrices are stored `out x in`. The flat parameter order used by
//! [`NetworkState::to_flat`], [`param_gradient`] and the snapshot format is
//! layer-major: for each layer, the weight matrix in row-major order followed
//! by the bias vector.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::psych::PsychScaleConfig;
use crate::error::{NestError, Result};

/// Hidden layer widths of the estimator.
pub const HIDDEN_WIDTHS: [usize; 3] = [256, 128, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    layers: Vec<Dense>,
    pub rng_seed: u64,
}

/// He-initialized network with layer sizes `[dim, 256, 128, 32, 1]`.
pub fn init_network(dim: usize, seed: u64) -> Result<NetworkState> {
    if dim < 1 {
        return Err(NestError::InvalidDimension(
            "stimulus dimension must be at least 1".into(),
        ));
    }
    let mut sizes = vec![dim];
    sizes.extend_from_slice(&HIDDEN_WIDTHS);
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(&mut rng));
            Dense {
                weight,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(NetworkState {
        layers,
        rng_seed: seed,
    })
}

/// Activations recorded by a batched forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct BatchPass {
    /// `acts[0]` is the input batch; `acts[l]` is the output of hidden layer `l`.
    pub acts: Vec<Array2<f64>>,
    /// Per hidden layer, `relu'(pre) * dropout multiplier`.
    gates: Vec<Array2<f64>>,
    pub raw: Array1<f64>,
}

impl NetworkState {
    pub fn from_layers(layers: Vec<Dense>, rng_seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(NestError::InvalidDimension("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(NestError::Shape {
                    expected: l.fan_out(),
                    got: l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                return Err(NestError::Shape {
                    expected: layers[i - 1].fan_out(),
                    got: l.fan_in(),
                });
            }
        }
        let last = layers.last().expect("nonempty");
        if last.fan_out() != 1 {
            return Err(NestError::Shape {
                expected: 1,
                got: last.fan_out(),
            });
        }
        if layers[0].fan_in() < 1 {
            return Err(NestError::InvalidDimension("input width is zero".into()));
        }
        let net = Self { layers, rng_seed };
        if !net.is_finite() {
            return Err(NestError::Domain("non-finite network parameter".into()));
        }
        Ok(net)
    }

    /// Rebuilds a network from layer sizes and a flat parameter vector.
    pub fn from_flat(layer_sizes: &[usize], params: &[f64], rng_seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(NestError::InvalidDimension(
                "need at least input and output sizes".into(),
            ));
        }
        let expected = flat_len(layer_sizes);
        if params.len() != expected {
            return Err(NestError::Shape {
                expected,
                got: params.len(),
            });
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let n_w = fan_in * fan_out;
            let weight = Array2::from_shape_vec(
                (fan_out, fan_in),
                params[offset..offset + n_w].to_vec(),
            )
            .expect("sizes checked");
            offset += n_w;
            let bias = Array1::from(params[offset..offset + fan_out].to_vec());
            offset += fan_out;
            layers.push(Dense { weight, bias });
        }
        Self::from_layers(layers, rng_seed)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::fan_out));
        sizes
    }

    pub fn param_count(&self) -> usize {
        flat_len(&self.layer_sizes())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Dense::fan_out)
            .collect()
    }

    /// Batched forward pass over the rows of `x`.
    ///
    /// `masks`, when given, holds one `batch x width` multiplier matrix per
    /// hidden layer, applied after the ReLU.
    pub fn forward_batch(&self, x: ArrayView2<f64>, masks: Option<&[Array2<f64>]>) -> BatchPass {
        assert_eq!(x.ncols(), self.input_dim(), "input width mismatch");
        let n_hidden = self.layers.len() - 1;
        if let Some(m) = masks {
            assert_eq!(m.len(), n_hidden, "one mask per hidden layer");
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(n_hidden);
        acts.push(x.to_owned());
        for (l, layer) in self.layers[..n_hidden].iter().enumerate() {
            let mut pre = mul_transposed(acts[l].view(), &layer.weight);
            pre += &layer.bias;
            let mut gate = pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            if let Some(m) = masks {
                gate *= &m[l];
            }
            pre *= &gate;
            acts.push(pre);
            gates.push(gate);
        }
        let last = &self.layers[n_hidden];
        let raw = acts[n_hidden].dot(&last.weight.row(0)) + last.bias[0];
        BatchPass { acts, gates, raw }
    }

    /// Activations of the last hidden layer without dropout.
    pub fn last_hidden(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut pass = self.forward_batch(x, None);
        pass.acts.pop().expect("at least one activation")
    }

    pub fn forward_raw(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(NestError::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let pass = match mask {
            Some(m) => {
                let rows = m.as_batch_rows(&self.hidden_widths())?;
                self.forward_batch(view, Some(&rows))
            }
            None => self.forward_batch(view, None),
        };
        Ok(pass.raw[0])
    }
}

/// Dropout multipliers for a single forward pass, one vector per hidden layer.
/// Dropped units carry 0 and kept units carry `1 / (1 - p)` when sampled; an
/// all-ones mask is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Array1<f64>>,
}

impl DropoutMask {
    pub fn ones(widths: &[usize]) -> Self {
        Self {
            layers: widths.iter().map(|&w| Array1::ones(w)).collect(),
        }
    }

    fn as_batch_rows(&self, widths: &[usize]) -> Result<Vec<Array2<f64>>> {
        if self.layers.len() != widths.len() {
            return Err(NestError::Shape {
                expected: widths.len(),
                got: self.layers.len(),
            });
        }
        self.layers
            .iter()
            .zip(widths)
            .map(|(m, &w)| {
                if m.len() != w {
                    return Err(NestError::Shape {
                        expected: w,
                        got: m.len(),
                    });
                }
                Ok(m.clone().insert_axis(Axis(0)))
            })
            .collect()
    }
}

impl BatchPass {
    /// Backpropagates `d_raw` (one seed per row) and returns the gradient with
    /// respect to each layer's pre-activation, `batch x out` per layer.
    pub fn backward(&self, net: &NetworkState, d_raw: ArrayView1<f64>) -> Vec<Array2<f64>> {
        let n_layers = net.layers.len();
        let mut deltas: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        let mut delta = d_raw.to_owned().insert_axis(Axis(1));
        for l in (0..n_layers).rev() {
            let next = if l > 0 {
                let mut d = mul_plain(delta.view(), &net.layers[l].weight);
                d *= &self.gates[l - 1];
                Some(d)
            } else {
                None
            };
            deltas.push(delta);
            match next {
                Some(d) => delta = d,
                None => break,
            }
        }
        deltas.reverse();
        deltas
    }

    pub fn batch_len(&self) -> usize {
        self.raw.len()
    }
}

/// Row count up to which products are formed row by row; GEMM packing
/// dominates for such small batches.
const SMALL_BATCH: usize = 8;

/// `a W^T` for a row-major weight matrix `W` (out x in).
fn mul_transposed(a: ArrayView2<f64>, w: &Array2<f64>) -> Array2<f64> {
    if a.nrows() > SMALL_BATCH {
        return a.dot(&w.t());
    }
    let mut out = Array2::zeros((a.nrows(), w.nrows()));
    for (mut o, row) in out.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
        o.assign(&w.dot(&row));
    }
    out
}

/// `a W` for a row-major weight matrix `W` (out x in).
fn mul_plain(a: ArrayView2<f64>, w: &Array2<f64>) -> Array2<f64> {
    if a.nrows() > SMALL_BATCH {
        return a.dot(w);
    }
    let mut out = Array2::zeros((a.nrows(), w.ncols()));
    for (mut o, row) in out.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
        for (&c, w_row) in row.iter().zip(w.axis_iter(Axis(0))) {
            if c != 0.0 {
                o.scaled_add(c, &w_row);
            }
        }
    }
    out
}

/// Summed parameter gradient over the batch, per layer `(dW, db)`.
pub fn sum_param_grads(pass: &BatchPass, deltas: &[Array2<f64>]) -> Vec<(Array2<f64>, Array1<f64>)> {
    deltas
        .iter()
        .zip(&pass.acts)
        .map(|(d, a)| (d.t().dot(a), d.sum_axis(Axis(0))))
        .collect()
}

/// Input gradient for every row of the batch.
pub fn input_grads(net: &NetworkState, deltas: &[Array2<f64>]) -> Array2<f64> {
    deltas[0].dot(&net.layers[0].weight)
}

pub fn flat_len(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn single_row_pass(net: &NetworkState, x: &[f64], scale: &PsychScaleConfig) -> Result<(BatchPass, Vec<Array2<f64>>)> {
    if x.len() != net.input_dim() {
        return Err(NestError::Shape {
            expected: net.input_dim(),
            got: x.len(),
        });
    }
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let pass = net.forward_batch(view, None);
    let seed = Array1::from_elem(1, scale.output_derivative(pass.raw[0]));
    let deltas = pass.backward(net, seed.view());
    Ok((pass, deltas))
}

/// Raw output and scaled probability for one normalized stimulus.
pub fn forward(
    net: &NetworkState,
    x: &[f64],
    scale: &PsychScaleConfig,
    mask: Option<&DropoutMask>,
) -> Result<(f64, f64)> {
    let raw = net.forward_raw(x, mask)?;
    Ok((raw, scale.output(raw)))
}

/// Gradient of the scaled probability with respect to all parameters, in flat order.
pub fn param_gradient(net: &NetworkState, x: &[f64], scale: &PsychScaleConfig) -> Result<Vec<f64>> {
    let (pass, deltas) = single_row_pass(net, x, scale)?;
    let mut out = Vec::with_capacity(net.param_count());
    for (d, a) in deltas.iter().zip(&pass.acts) {
        let d = d.row(0);
        let a = a.row(0);
        for &dv in d.iter() {
            out.extend(a.iter().map(|&av| dv * av));
        }
        out.extend(d.iter().copied());
    }
    Ok(out)
}

/// Gradient of the scaled probability with respect to the (normalized) input.
pub fn input_gradient(net: &NetworkState, x: &[f64], scale: &PsychScaleConfig) -> Result<Vec<f64>> {
    let (_, deltas) = single_row_pass(net, x, scale)?;
    Ok(input_grads(net, &deltas).slice(s![0, ..]).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn zero_net(dim: usize) -> NetworkState {
        let mut net = init_network(dim, 1).unwrap();
        for l in net.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        net
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_network(2, 7).unwrap();
        let b = init_network(2, 7).unwrap();
        assert_eq!(a, b);
        let c = init_network(6, 7).unwrap();
        assert_eq!(c.layers()[0].weight.dim(), (256, 6));
        assert_eq!(c.layer_sizes(), vec![6, 256, 128, 32, 1]);
        assert!(c.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(init_network(0, 1).is_err());
    }

    #[test]
    fn he_variance_for_wide_fan_in() {
        let net = init_network(3, 11).unwrap();
        let w = &net.layers()[1].weight;
        assert_eq!(w.ncols(), 256);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = 2.0 / 256.0;
        assert!((var / target - 1.0).abs() < 0.2, "variance {var} vs {target}");
    }

    #[test]
    fn zero_network_output() {
        let net = zero_net(2);
        let (raw, prob) = forward(&net, &[0.3, -1.0], &PsychScaleConfig::default(), None).unwrap();
        assert_eq!(raw, 0.0);
        assert!((prob - 0.632_120_558_828_557_7).abs() < 1e-12);
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let net = init_network(3, 5).unwrap();
        let x = [0.2, -0.7, 1.1];
        let mask = DropoutMask::ones(&net.hidden_widths());
        let scale = PsychScaleConfig::default();
        let a = forward(&net, &x, &scale, None).unwrap();
        let b = forward(&net, &x, &scale, Some(&mask)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_built_relu_identity() {
        let layers = vec![
            Dense { weight: array![[1.0]], bias: array![0.0] },
            Dense { weight: array![[1.0]], bias: array![0.0] },
        ];
        let net = NetworkState::from_layers(layers, 0).unwrap();
        let (raw, _) = forward(&net, &[2.0], &PsychScaleConfig::default(), None).unwrap();
        assert_eq!(raw, 2.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = init_network(2, 1).unwrap();
        assert!(matches!(
            forward(&net, &[1.0], &PsychScaleConfig::default(), None),
            Err(NestError::Shape { .. })
        ));
    }

    #[test]
    fn zero_network_input_gradient_uses_chain_rule() {
        // Only the first layer weights are nonzero, so raw = 0 everywhere and
        // d prob / d raw = e^-1 ln(10) / 20.
        let net = zero_net(2);
        let g = input_gradient(&net, &[0.5, 0.5], &PsychScaleConfig::default()).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let d = PsychScaleConfig::default().output_derivative(0.0);
        let analytic = (-1.0f64).exp() * 10f64.ln() / 20.0;
        assert!((d - analytic).abs() < 1e-15);
        assert!((d - 0.042_353_7).abs() < 1e-7);

        // A linear 1-1 net: raw = 3x, so d prob/dx = 3 * q'(raw).
        let layers = vec![Dense { weight: array![[3.0]], bias: array![0.0] }];
        let lin = NetworkState::from_layers(layers, 0).unwrap();
        let g = input_gradient(&lin, &[0.0], &PsychScaleConfig::default()).unwrap();
        assert!((g[0] - 3.0 * d).abs() < 1e-15);
    }

    #[test]
    fn flat_round_trip() {
        let net = init_network(4, 3).unwrap();
        let flat = net.to_flat();
        assert_eq!(flat.len(), net.param_count());
        let back = NetworkState::from_flat(&net.layer_sizes(), &flat, 3).unwrap();
        assert_eq!(back, net);
        assert!(NetworkState::from_flat(&net.layer_sizes(), &flat[1..], 3).is_err());
    }

    #[test]
    fn param_gradient_is_deterministic() {
        let net = init_network(2, 9).unwrap();
        let s = PsychScaleConfig::default();
        let a = param_gradient(&net, &[0.1, 0.4], &s).unwrap();
        let b = param_gradient(&net, &[0.1, 0.4], &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), net.param_count());
    }
}
