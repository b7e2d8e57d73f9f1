//! Dense layers and multi-layer perceptrons.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{MathError, MathResult, Tensor};

/// Power iterations run when spectral normalization is switched on.
pub const SPECTRAL_WARMUP_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> MathResult<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Softplus => g.softplus(x),
            Activation::Identity => Ok(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "softplus" => Activation::Softplus,
            "identity" => Activation::Identity,
            _ => return None,
        })
    }
}

/// Persistent power-iteration state for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    /// Right singular vector estimate, length `out_dim`.
    pub u: Vec<f64>,
    /// Current estimate of the largest singular value.
    pub sigma: f64,
}

/// Estimates the largest singular value of `weights` (`[in × out]`) by
/// power iteration warm-started from `u`, which is updated in place.
///
/// Returns `W / σ̂` and `σ̂`. A zero matrix is returned unchanged with
/// `σ̂ = 1`.
pub fn spectral_normalize(weights: &Tensor, u: &mut [f64], n_iters: usize) -> MathResult<(Tensor, f64)> {
    let sigma = power_iterate(weights, u, n_iters)?;
    let scaled: Vec<f64> = weights.data().iter().map(|w| w / sigma).collect();
    Ok((Tensor::new(weights.shape().to_vec(), scaled)?, sigma))
}

fn power_iterate(weights: &Tensor, u: &mut [f64], n_iters: usize) -> MathResult<f64> {
    let shape = weights.shape();
    if shape.len() != 2 || u.len() != shape[1] {
        return Err(MathError::ShapeMismatch {
            op: "spectral_normalize",
            lhs: shape.to_vec(),
            rhs: vec![u.len()],
        });
    }
    if n_iters == 0 {
        return Err(MathError::InvalidArgument {
            op: "spectral_normalize",
            reason: "n_iters must be at least 1".into(),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    let w = weights.data();
    if w.iter().all(|&x| x == 0.0) {
        return Ok(1.0);
    }
    if norm(u) == 0.0 {
        return Err(MathError::InvalidArgument {
            op: "spectral_normalize",
            reason: "power iteration vector is zero".into(),
        });
    }
    let mut v = vec![0.0; rows];
    let mut sigma = 1.0;
    for _ in 0..n_iters {
        // v = W u / |W u|
        for (r, vr) in v.iter_mut().enumerate() {
            *vr = w[r * cols..(r + 1) * cols].iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        }
        let nv = norm(&v);
        if nv == 0.0 {
            // u fell into the null space; restart from the first row
            u.copy_from_slice(&w[..cols]);
            normalize(u);
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        // u = Wᵀ v / |Wᵀ v|, σ = |Wᵀ v| = vᵀ W u
        u.iter_mut().for_each(|x| *x = 0.0);
        for (r, &vr) in v.iter().enumerate() {
            for (uc, &wrc) in u.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *uc += vr * wrc;
            }
        }
        sigma = norm(u);
        normalize(u);
    }
    if sigma > 0.0 && sigma.is_finite() {
        Ok(sigma)
    } else {
        Ok(1.0)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize(x: &mut [f64]) {
    let n = norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

/// `activation(x·W + b)` with an optional spectrally normalized `W`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    spectral: Option<SpectralState>,
}

/// Graph handles for a bound [`DenseLayer`].
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weights: Var,
    pub bias: Var,
}

impl DenseLayer {
    /// A zero-initialized layer.
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Tensor::zeros(&[in_dim, out_dim]).with_requires_grad(true),
            bias: Tensor::zeros(&[out_dim]).with_requires_grad(true),
            activation,
            spectral: None,
        }
    }

    pub fn from_parts(weights: Tensor, bias: Tensor, activation: Activation) -> MathResult<Self> {
        let ws = weights.shape();
        if ws.len() != 2 || bias.shape() != [ws[1]] {
            return Err(MathError::ShapeMismatch {
                op: "DenseLayer::from_parts",
                lhs: ws.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weights: weights.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
            activation,
            spectral: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn spectral(&self) -> Option<&SpectralState> {
        self.spectral.as_ref()
    }

    pub fn spectral_norm_enabled(&self) -> bool {
        self.spectral.is_some()
    }

    /// Turns spectral normalization on (running the warm-up iterations) or off.
    pub fn set_spectral_norm(&mut self, enabled: bool) -> MathResult<()> {
        if !enabled {
            self.spectral = None;
            return Ok(());
        }
        let n = self.out_dim();
        let mut u = vec![1.0 / (n as f64).sqrt(); n];
        let sigma = power_iterate(&self.weights, &mut u, SPECTRAL_WARMUP_ITERS)?;
        self.spectral = Some(SpectralState { u, sigma });
        Ok(())
    }

    pub fn set_spectral_state(&mut self, state: Option<SpectralState>) {
        self.spectral = state;
    }

    /// Runs `n_iters` warm-started power iterations against the current weights.
    pub fn refresh_spectral_norm(&mut self, n_iters: usize) -> MathResult<()> {
        if let Some(state) = &mut self.spectral {
            state.sigma = power_iterate(&self.weights, &mut state.u, n_iters)?;
        }
        Ok(())
    }

    /// The matrix actually used in the forward pass.
    pub fn effective_weights(&self) -> Tensor {
        match &self.spectral {
            Some(s) => {
                let data = self.weights.data().iter().map(|w| w / s.sigma).collect();
                Tensor::from_parts(self.weights.shape().to_vec(), data)
            }
            None => self.weights.clone().with_requires_grad(false),
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> DenseVars {
        DenseVars {
            weights: g.param(&self.weights, trainable),
            bias: g.param(&self.bias, trainable),
        }
    }

    /// Forward pass; `σ̂` is a constant of the step, not differentiated.
    pub fn forward(&self, g: &mut Graph<'_>, vars: DenseVars, x: Var) -> MathResult<Var> {
        let w = match &self.spectral {
            Some(s) => g.scale(vars.weights, 1.0 / s.sigma)?,
            None => vars.weights,
        };
        let xw = g.matmul(x, w)?;
        let pre = g.add(xw, vars.bias)?;
        self.activation.apply(g, pre)
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: DenseVars) -> MathResult<()> {
        grads.accumulate_into(vars.weights, &mut self.weights)?;
        grads.accumulate_into(vars.bias, &mut self.bias)
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (i, o) = (self.in_dim(), self.out_dim());
        let a = (6.0 / (i + o) as f64).sqrt();
        for w in self.weights.data_mut() {
            *w = rng.random_range(-a..=a);
        }
        self.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Zero-initialized MLP over `dims = [in, h₁, …, out]`; hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation) -> MathResult<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(MathError::InvalidArgument {
                op: "Mlp::new",
                reason: format!("invalid layer dims {dims:?}"),
            });
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::new(w[0], w[1], if i == last { output } else { hidden }))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> MathResult<Self> {
        if layers.is_empty() {
            return Err(MathError::InvalidArgument {
                op: "Mlp::from_layers",
                reason: "no layers".into(),
            });
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(MathError::ShapeMismatch {
                    op: "Mlp::from_layers",
                    lhs: pair[0].weights.shape().to_vec(),
                    rhs: pair[1].weights.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            layer.init(rng);
        }
    }

    pub fn set_spectral_norm(&mut self, enabled: bool) -> MathResult<()> {
        self.layers.iter_mut().try_for_each(|l| l.set_spectral_norm(enabled))
    }

    pub fn refresh_spectral_norm(&mut self, n_iters: usize) -> MathResult<()> {
        self.layers.iter_mut().try_for_each(|l| l.refresh_spectral_norm(n_iters))
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<DenseVars> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    pub fn forward(&self, g: &mut Graph<'_>, vars: &[DenseVars], x: Var) -> MathResult<Var> {
        let in_dim = g.value(x).cols();
        if in_dim != self.input_dim() {
            return Err(MathError::ShapeMismatch {
                op: "Mlp::forward",
                lhs: vec![self.input_dim()],
                rhs: g.value(x).shape().to_vec(),
            });
        }
        self.layers
            .iter()
            .zip(vars)
            .try_fold(x, |h, (layer, &v)| layer.forward(g, v, h))
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &[DenseVars]) -> MathResult<()> {
        self.layers
            .iter_mut()
            .zip(vars)
            .try_for_each(|(l, &v)| l.accumulate_grads(grads, v))
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }
}
