//! Dense feed-forward networks with the analytic derivatives the interface
//! constraints need.
//!
//! A network with widths `[m0, m1, ..., mL]` is the composition
//! `A_L ∘ a ∘ A_{L-1} ∘ ... ∘ a ∘ A_1` where each `A_k(x) = W_k x + b_k` and
//! `a` is applied element-wise to every hidden layer. The output layer is
//! purely affine.
//!
//! # Parameter layout
//!
//! All parameters live in one flat `Vec<f64>`, layer-major. For layer `k`
//! the block is `W_k` (shape `m_k × m_{k-1}`, row-major) followed by `b_k`
//! (length `m_k`).
//!
//! Three derivative routes are provided and all are exact:
//! - parameter gradients by reverse mode ([`MlpNetwork::grad_params`]),
//! - directional input derivatives by forward tangent propagation
//!   ([`MlpNetwork::normal_derivative`]),
//! - the parameter Jacobian of the directional derivative by reverse mode
//!   through the tangent pass ([`MlpNetwork::mixed_derivative`]).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Swish => swish(x),
            Activation::Identity => x,
        }
    }

    /// Value, first and second derivative at `x`.
    #[inline]
    fn eval_d2(self, x: f64) -> (f64, f64, f64) {
        match self {
            Activation::Swish => {
                let s = sigmoid(x);
                let ds = s * (1.0 - s);
                (x * s, s + x * ds, ds * (2.0 + x * (1.0 - 2.0 * s)))
            }
            Activation::Identity => (x, 1.0, 0.0),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · sigmoid(x)`.
#[inline]
pub fn swish(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Unit direction in input space. Only the leading (spatial) components are
/// stored; any remaining input components (parameter samples) are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalDirection {
    spatial: Vec<f64>,
}

impl NormalDirection {
    pub fn new(spatial: Vec<f64>) -> Result<Self> {
        if spatial.is_empty() || spatial.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidNormal(format!("{spatial:?}")));
        }
        let norm = spatial.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidNormal(format!(
                "norm {norm} is not 1 for {spatial:?}"
            )));
        }
        Ok(Self { spatial })
    }

    /// Unit vector along coordinate `axis` of a `dim`-dimensional space.
    pub fn axis(dim: usize, axis: usize) -> Result<Self> {
        if axis >= dim {
            return Err(Error::InvalidNormal(format!("axis {axis} >= dim {dim}")));
        }
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Ok(Self { spatial: v })
    }

    pub fn spatial(&self) -> &[f64] {
        &self.spatial
    }

    pub fn dim(&self) -> usize {
        self.spatial.len()
    }

    /// Index of the single nonzero component, when axis-aligned.
    pub fn axis_index(&self) -> Option<usize> {
        let nonzero: Vec<usize> = (0..self.spatial.len())
            .filter(|&i| self.spatial[i] != 0.0)
            .collect();
        match nonzero.as_slice() {
            [i] => Some(*i),
            _ => None,
        }
    }
}

/// Number of parameters for the given widths.
pub fn param_count(layer_widths: &[usize]) -> usize {
    layer_widths
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

fn validate_widths(layer_widths: &[usize]) -> Result<()> {
    if layer_widths.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least input and output widths, got {layer_widths:?}"
        )));
    }
    if layer_widths.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArchitecture(format!(
            "zero width in {layer_widths:?}"
        )));
    }
    Ok(())
}

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn init_params(layer_widths: &[usize], seed: u64) -> Result<Vec<f64>> {
    validate_widths(layer_widths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count(layer_widths));
    for w in layer_widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::InvalidArchitecture(e.to_string()))?;
        params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(params)
}

/// One subdomain (or interface) network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layer_widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    seed: u64,
    /// Start of each layer's weight block in `params`.
    offsets: Vec<usize>,
}

/// On-disk form of a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCheckpoint {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
    pub seed: u64,
}

fn layer_offsets(layer_widths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(layer_widths.len() - 1);
    let mut at = 0;
    for w in layer_widths.windows(2) {
        offsets.push(at);
        at += w[0] * w[1] + w[1];
    }
    offsets
}

impl MlpNetwork {
    /// Network with He-normal initialized parameters.
    pub fn new(layer_widths: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let params = init_params(&layer_widths, seed)?;
        Self::from_params(layer_widths, activation, params, seed)
    }

    pub fn from_params(
        layer_widths: Vec<usize>,
        activation: Activation,
        params: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        validate_widths(&layer_widths)?;
        let expected = param_count(&layer_widths);
        if params.len() != expected {
            return Err(Error::Shape {
                context: "network parameters",
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericalFailure("non-finite network parameter".into()));
        }
        let offsets = layer_offsets(&layer_widths);
        Ok(Self {
            layer_widths,
            activation,
            params,
            seed,
            offsets,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Replace the parameter vector. Length must match; values must be finite.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape {
                context: "network parameters",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericalFailure("non-finite network parameter".into()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Same architecture, different parameters. Not validated; for use by
    /// optimizers that probe arbitrary points.
    pub(crate) fn with_params_unchecked(&self, params: &[f64]) -> Self {
        let mut net = self.clone();
        net.params.copy_from_slice(params);
        net
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    fn check_normal(&self, normal: &NormalDirection) -> Result<()> {
        if normal.dim() > self.input_dim() {
            return Err(Error::Shape {
                context: "normal direction",
                expected: self.input_dim(),
                got: normal.dim(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut tape = Tape::new(&self.layer_widths);
        self.run_forward(input, &mut tape);
        Ok(tape.output().to_vec())
    }

    /// `d output_c / d θ`, one row per output component.
    pub fn grad_params(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(input)?;
        let mut tape = Tape::new(&self.layer_widths);
        self.run_forward(input, &mut tape);
        let n_out = self.output_dim();
        let mut seed = vec![0.0; n_out];
        (0..n_out)
            .map(|c| {
                seed.fill(0.0);
                seed[c] = 1.0;
                let mut row = vec![0.0; self.n_params()];
                self.backprop(&mut tape, &seed, None, &mut row);
                Ok(row)
            })
            .collect()
    }

    /// Directional derivative of every output component along `normal`.
    pub fn normal_derivative(&self, input: &[f64], normal: &NormalDirection) -> Result<Vec<f64>> {
        self.check_input(input)?;
        self.check_normal(normal)?;
        let mut tape = Tape::new(&self.layer_widths);
        self.run_tangent(input, normal.spatial(), &mut tape);
        Ok(tape.output_tangent().to_vec())
    }

    /// `d(∂_η output_c)/dθ`, one row per output component.
    pub fn mixed_derivative(
        &self,
        input: &[f64],
        normal: &NormalDirection,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_input(input)?;
        self.check_normal(normal)?;
        let mut tape = Tape::new(&self.layer_widths);
        self.run_tangent(input, normal.spatial(), &mut tape);
        let n_out = self.output_dim();
        let zeros = vec![0.0; n_out];
        let mut seed = vec![0.0; n_out];
        (0..n_out)
            .map(|c| {
                seed.fill(0.0);
                seed[c] = 1.0;
                let mut row = vec![0.0; self.n_params()];
                self.backprop(&mut tape, &zeros, Some(&seed), &mut row);
                Ok(row)
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> NetworkCheckpoint {
        NetworkCheckpoint {
            layer_widths: self.layer_widths.clone(),
            activation: self.activation,
            params: self.params.clone(),
            seed: self.seed,
        }
    }

    pub fn from_checkpoint(ckpt: NetworkCheckpoint) -> Result<Self> {
        Self::from_params(ckpt.layer_widths, ckpt.activation, ckpt.params, ckpt.seed)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }

    // ----- hot path -------------------------------------------------------
    //
    // These skip shape checks; callers inside the crate validate once per
    // dataset rather than once per row.

    /// Weight block and bias of layer `k` (0-based).
    #[inline]
    fn layer(&self, k: usize) -> (&[f64], &[f64], usize, usize) {
        let (n_in, n_out) = (self.layer_widths[k], self.layer_widths[k + 1]);
        let at = self.offsets[k];
        let w = &self.params[at..at + n_in * n_out];
        let b = &self.params[at + n_in * n_out..at + n_in * n_out + n_out];
        (w, b, n_in, n_out)
    }

    pub(crate) fn run_forward(&self, input: &[f64], tape: &mut Tape) {
        tape.has_tangent = false;
        let n_layers = self.n_layers();
        for k in 0..n_layers {
            let (w, b, n_in, n_out) = self.layer(k);
            let (before, after) = tape.act.split_at_mut(k + 1);
            let src: &[f64] = if k == 0 { input } else { &before[k] };
            let pre = &mut tape.pre[k];
            for (j, out) in pre.iter_mut().enumerate().take(n_out) {
                let row = &w[j * n_in..(j + 1) * n_in];
                *out = b[j] + dot(row, src);
            }
            if k + 1 < n_layers {
                let z = &mut after[0];
                for (zj, &hj) in z.iter_mut().zip(tape.pre[k].iter()) {
                    *zj = self.activation.eval(hj);
                }
            }
        }
        if n_layers > 0 {
            tape.act[0].clear();
            tape.act[0].extend_from_slice(input);
        }
    }

    pub(crate) fn run_tangent(&self, input: &[f64], normal: &[f64], tape: &mut Tape) {
        self.run_forward(input, tape);
        tape.has_tangent = true;
        let n_layers = self.n_layers();
        tape.tan[0].fill(0.0);
        tape.tan[0][..normal.len()].copy_from_slice(normal);
        for k in 0..n_layers {
            let (w, _, n_in, n_out) = self.layer(k);
            let (before, after) = tape.tan.split_at_mut(k + 1);
            let src = &before[k];
            let dpre = &mut tape.dpre[k];
            for (j, out) in dpre.iter_mut().enumerate().take(n_out) {
                *out = dot(&w[j * n_in..(j + 1) * n_in], src);
            }
            if k + 1 < n_layers {
                let t = &mut after[0];
                for j in 0..n_out {
                    let (_, d1, _) = self.activation.eval_d2(tape.pre[k][j]);
                    t[j] = d1 * tape.dpre[k][j];
                }
            }
        }
    }

    /// Accumulate `d(value_seed · u + deriv_seed · ∂_η u)/dθ` into `grad`.
    /// `deriv_seed` requires a tape filled by [`Self::run_tangent`].
    pub(crate) fn backprop(
        &self,
        tape: &mut Tape,
        value_seed: &[f64],
        deriv_seed: Option<&[f64]>,
        grad: &mut [f64],
    ) {
        let n_layers = self.n_layers();
        let with_tan = deriv_seed.is_some();
        debug_assert!(!with_tan || tape.has_tangent);

        // Adjoints of the current layer's pre-activation (value and tangent).
        tape.adj_h.clear();
        tape.adj_h.extend_from_slice(value_seed);
        tape.adj_dh.clear();
        match deriv_seed {
            Some(s) => tape.adj_dh.extend_from_slice(s),
            None => tape.adj_dh.resize(value_seed.len(), 0.0),
        }

        for k in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_widths[k], self.layer_widths[k + 1]);
            let at = self.offsets[k];
            let (w_grad, rest) = grad[at..].split_at_mut(n_in * n_out);
            let b_grad = &mut rest[..n_out];
            let z_prev = &tape.act[k];
            let t_prev = &tape.tan[k];
            for j in 0..n_out {
                let gh = tape.adj_h[j];
                let gdh = tape.adj_dh[j];
                b_grad[j] += gh;
                let row = &mut w_grad[j * n_in..(j + 1) * n_in];
                if gh != 0.0 {
                    axpy(gh, z_prev, row);
                }
                if with_tan && gdh != 0.0 {
                    axpy(gdh, t_prev, row);
                }
            }
            if k == 0 {
                break;
            }
            // Propagate to the previous layer's activations / tangents.
            let w = &self.params[at..at + n_in * n_out];
            tape.adj_z.clear();
            tape.adj_z.resize(n_in, 0.0);
            tape.adj_t.clear();
            tape.adj_t.resize(n_in, 0.0);
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let gh = tape.adj_h[j];
                if gh != 0.0 {
                    axpy(gh, row, &mut tape.adj_z);
                }
                if with_tan {
                    let gdh = tape.adj_dh[j];
                    if gdh != 0.0 {
                        axpy(gdh, row, &mut tape.adj_t);
                    }
                }
            }
            // Through the activation of layer k-1.
            let pre = &tape.pre[k - 1];
            let dpre = &tape.dpre[k - 1];
            tape.adj_h.clear();
            tape.adj_dh.clear();
            for i in 0..n_in {
                let (_, d1, d2) = self.activation.eval_d2(pre[i]);
                let mut gh = d1 * tape.adj_z[i];
                if with_tan {
                    gh += d2 * dpre[i] * tape.adj_t[i];
                    tape.adj_dh.push(d1 * tape.adj_t[i]);
                } else {
                    tape.adj_dh.push(0.0);
                }
                tape.adj_h.push(gh);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Reusable evaluation buffers for one network architecture.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Layer inputs: `act[0]` is the network input, `act[k]` the activated
    /// output of hidden layer `k-1`.
    act: Vec<Vec<f64>>,
    dpre: Vec<Vec<f64>>,
    tan: Vec<Vec<f64>>,
    has_tangent: bool,
    adj_h: Vec<f64>,
    adj_dh: Vec<f64>,
    adj_z: Vec<f64>,
    adj_t: Vec<f64>,
}

impl Tape {
    pub(crate) fn new(layer_widths: &[usize]) -> Self {
        let n_layers = layer_widths.len() - 1;
        let pre: Vec<Vec<f64>> = layer_widths[1..].iter().map(|&w| vec![0.0; w]).collect();
        let act: Vec<Vec<f64>> = layer_widths[..n_layers].iter().map(|&w| vec![0.0; w]).collect();
        Self {
            dpre: pre.clone(),
            tan: act.clone(),
            pre,
            act,
            has_tangent: false,
            adj_h: Vec::new(),
            adj_dh: Vec::new(),
            adj_z: Vec::new(),
            adj_t: Vec::new(),
        }
    }

    pub(crate) fn output(&self) -> &[f64] {
        self.pre.last().unwrap()
    }

    pub(crate) fn output_tangent(&self) -> &[f64] {
        self.dpre.last().unwrap()
    }
}
