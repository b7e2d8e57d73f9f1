//! Negative-sample sources and the joint / adversarial objectives.
//!
//! The joint objective for a batch `x` with negatives `x̄` is
//!
//! ```text
//! mean(−elbo(x)) + mean(KL(q(z|x̄) ‖ N(c·1, I))) + α · mean(−log p(x̄ | z̄))
//! ```
//!
//! In the adversarial scheme the negatives are the model's own samples `x̂`.
//! The encoder minimizes the joint objective with `x̂` held fixed, while the
//! generator minimizes the same expression with gradients flowing through
//! `x̂` plus `mean(KL(q(z|x̂) ‖ N(0, I)))`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::distributions::{kl_rows, snap_to_grid, standard_normal_tensor, NoiseKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ModelVars, Scope, VaeModel};
use crate::tensor::Tensor;

/// Where the negatives of a training run come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    /// Plain VAE training.
    None,
    Auxiliary,
    UniformNoise,
    AdditiveNoise,
    /// The model's own samples, always detached.
    Generated,
    /// The model's own samples with the alternating encoder/generator game.
    Adversarial,
}

impl NegativeSource {
    pub const ALL: [NegativeSource; 6] = [
        NegativeSource::None,
        NegativeSource::Auxiliary,
        NegativeSource::UniformNoise,
        NegativeSource::AdditiveNoise,
        NegativeSource::Generated,
        NegativeSource::Adversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NegativeSource::None => "none",
            NegativeSource::Auxiliary => "auxiliary",
            NegativeSource::UniformNoise => "uniform_noise",
            NegativeSource::AdditiveNoise => "additive_noise",
            NegativeSource::Generated => "generated",
            NegativeSource::Adversarial => "adversarial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// What a [`NegativeBatch`] was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Auxiliary,
    UniformNoise,
    AdditiveNoise,
    Generated,
}

#[derive(Debug, Clone)]
pub struct NegativeBatch {
    pub samples: Tensor,
    pub kind: SampleKind,
    /// Whether the samples are cut off from their producer's parameters.
    pub detached: bool,
    /// Latent codes of generated samples, kept so the generator path can be
    /// rebuilt inside a graph.
    pub latents: Option<Tensor>,
}

impl NegativeBatch {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// `c` of the negative prior `N(c·1, I)`.
    pub shift: f64,
    /// Weight of the negative-sample reconstruction term.
    pub alpha: f64,
    pub adversarial: bool,
    /// Standard deviation of the additive-noise source.
    pub noise_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            shift: 8.0,
            alpha: 0.0,
            adversarial: false,
            noise_sigma: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return Err(Error::config("loss.shift", format!("must be finite and ≥ 0, got {}", self.shift)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("loss.alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "negative.noise_sigma",
                format!("must be finite and ≥ 0, got {}", self.noise_sigma),
            ));
        }
        Ok(())
    }
}

/// Draws auxiliary rows without replacement, reshuffling whenever the
/// current pass over the auxiliary set runs out.
#[derive(Debug, Clone)]
pub struct AuxiliarySampler {
    perm: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl AuxiliarySampler {
    /// A sampler over `n` items whose shuffles are fixed by `(seed, epoch)`.
    pub fn new(n: usize, seed: u64, epoch: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("auxiliary set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        Ok(Self { perm, cursor: 0, rng })
    }

    pub fn draw(&mut self, m: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            if self.cursor == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (m - out.len()).min(self.perm.len() - self.cursor);
            out.extend_from_slice(&self.perm[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

pub fn auxiliary_batch(aux: &Dataset, sampler: &mut AuxiliarySampler, m: usize) -> NegativeBatch {
    NegativeBatch {
        samples: aux.images.gather_rows(&sampler.draw(m)),
        kind: SampleKind::Auxiliary,
        detached: true,
        latents: None,
    }
}

/// `m × dim` pixels drawn uniformly from the 256 grey levels.
pub fn uniform_noise_batch<R: Rng + ?Sized>(m: usize, dim: usize, rng: &mut R) -> NegativeBatch {
    let data = (0..m * dim).map(|_| f64::from(rng.random_range(0u8..=255)) / 255.0).collect();
    NegativeBatch {
        samples: Tensor::from_parts(vec![m, dim], data),
        kind: SampleKind::UniformNoise,
        detached: true,
        latents: None,
    }
}

/// `x + N(0, σ²)` per pixel, clamped to `[0, 1]` and snapped to the grid.
pub fn additive_noise_batch<R: Rng + ?Sized>(inliers: &Tensor, sigma: f64, rng: &mut R) -> Result<NegativeBatch> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(format!("noise sigma: {e}")))?;
    let data = inliers
        .data()
        .iter()
        .map(|&v| if sigma == 0.0 { v } else { snap_to_grid(v + normal.sample(rng)) })
        .collect();
    Ok(NegativeBatch {
        samples: Tensor::from_parts(inliers.shape().to_vec(), data),
        kind: SampleKind::AdditiveNoise,
        detached: true,
        latents: None,
    })
}

/// Maps decoder output to valid model input: clamped to `[0, 1]` for the
/// Gaussian models and additionally snapped to the pixel grid for the
/// quantized one. Bernoulli means pass through unchanged.
fn to_input_range(kind: NoiseKind, v: f64) -> f64 {
    match kind {
        NoiseKind::Bernoulli => v,
        NoiseKind::Gaussian => v.clamp(0.0, 1.0),
        NoiseKind::QuantizedGaussian => snap_to_grid(v),
    }
}

/// Detached model samples `decode(z)` for the given latent codes.
pub fn generated_batch(model: &VaeModel, z: Tensor) -> Result<NegativeBatch> {
    let mut samples = model.decode(&z)?;
    let kind = model.noise.kind;
    samples.data_mut().iter_mut().for_each(|v| *v = to_input_range(kind, *v));
    Ok(NegativeBatch {
        samples,
        kind: SampleKind::Generated,
        detached: true,
        latents: Some(z),
    })
}

/// Inputs needed by [`make_negative_batch`] for each source.
pub enum NegativeInput<'s> {
    Auxiliary {
        data: &'s Dataset,
        sampler: &'s mut AuxiliarySampler,
    },
    UniformNoise {
        dim: usize,
    },
    AdditiveNoise {
        inliers: &'s Tensor,
    },
    Generated {
        model: &'s VaeModel,
    },
}

/// Builds `m` negatives (`m` is ignored for additive noise, which perturbs
/// every inlier row it is given).
pub fn make_negative_batch<R: Rng + ?Sized>(
    input: NegativeInput<'_>,
    m: usize,
    config: &LossConfig,
    rng: &mut R,
) -> Result<NegativeBatch> {
    if m == 0 {
        return Err(Error::InvalidInput("negative batch size must be ≥ 1".into()));
    }
    match input {
        NegativeInput::Auxiliary { data, sampler } => Ok(auxiliary_batch(data, sampler, m)),
        NegativeInput::UniformNoise { dim } => Ok(uniform_noise_batch(m, dim, rng)),
        NegativeInput::AdditiveNoise { inliers } => additive_noise_batch(inliers, config.noise_sigma, rng),
        NegativeInput::Generated { model } => {
            let z = standard_normal_tensor(&[m, model.latent_dim()], rng);
            generated_batch(model, z)
        }
    }
}

/// Reparameterization noise for one evaluation of the objective.
#[derive(Debug, Clone)]
pub struct LossNoise {
    pub eps_pos: Tensor,
    /// Only needed when `alpha > 0`.
    pub eps_neg: Option<Tensor>,
}

impl LossNoise {
    pub fn draw<R: Rng + ?Sized>(n: usize, m: usize, latent_dim: usize, config: &LossConfig, rng: &mut R) -> Self {
        let eps_pos = standard_normal_tensor(&[n, latent_dim], rng);
        let eps_neg = (m > 0 && config.alpha > 0.0).then(|| standard_normal_tensor(&[m, latent_dim], rng));
        Self { eps_pos, eps_neg }
    }
}

/// Scalar graph nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: Var,
    /// `mean(−elbo(x))`.
    pub neg_elbo: Var,
    /// `mean(KL(q(z|x) ‖ N(0, I)))`.
    pub kl_pos: Var,
    /// `mean(KL(q(z|x̄) ‖ N(c·1, I)))`.
    pub kl_neg: Option<Var>,
    /// `mean(−log p(x̄ | z̄))`, present when `alpha > 0`.
    pub recon_neg: Option<Var>,
    /// `mean(KL(q(z|x̂) ‖ N(0, I)))`, present for the generator objective.
    pub kl_gen_prior: Option<Var>,
}

/// Builds the joint objective. `neg` holds negatives already in the graph.
pub fn joint_loss_graph(
    model: &VaeModel,
    g: &mut Graph<'_>,
    vars: &ModelVars,
    x: Var,
    neg: Option<Var>,
    noise: &LossNoise,
    config: &LossConfig,
) -> Result<(LossTerms, Option<(Var, Var)>)> {
    let rows = model.elbo_rows(g, vars, x, noise.eps_pos.clone())?;
    let neg_elbo = g.mean(rows.elbo)?;
    let neg_elbo = g.neg(neg_elbo)?;
    let kl_pos = g.mean(rows.kl)?;
    let mut terms = LossTerms {
        loss: neg_elbo,
        neg_elbo,
        kl_pos,
        kl_neg: None,
        recon_neg: None,
        kl_gen_prior: None,
    };
    let Some(xn) = neg else {
        return Ok((terms, None));
    };
    let (mean, log_var) = model.encode_graph(g, vars, xn)?;
    let kl = kl_rows(g, mean, log_var, config.shift)?;
    let kl_neg = g.mean(kl)?;
    terms.kl_neg = Some(kl_neg);
    terms.loss = g.add(terms.loss, kl_neg)?;
    if config.alpha > 0.0 {
        let eps = noise
            .eps_neg
            .clone()
            .ok_or_else(|| Error::InvalidInput("alpha > 0 needs negative-sample noise".into()))?;
        let z = crate::distributions::reparameterize_rows(g, mean, log_var, eps)?;
        let decoded = model.decode_graph(g, vars, z)?;
        let recon = model.recon_rows(g, vars, xn, decoded)?;
        let recon = g.mean(recon)?;
        let recon_neg = g.neg(recon)?;
        terms.recon_neg = Some(recon_neg);
        let weighted = g.scale(recon_neg, config.alpha)?;
        terms.loss = g.add(terms.loss, weighted)?;
    }
    Ok((terms, Some((mean, log_var))))
}

/// Rebuilds generated negatives `x̂ = decode(z)` inside the graph so that
/// gradients reach the generator. Values match [`generated_batch`] exactly;
/// grid snapping for the quantized model is passed straight through.
pub fn generator_path(model: &VaeModel, g: &mut Graph<'_>, vars: &ModelVars, z: &Tensor) -> Result<Var> {
    let vz = g.constant(z.clone());
    let out = model.decode_graph(g, vars, vz)?;
    match model.noise.kind {
        NoiseKind::Bernoulli => Ok(out),
        NoiseKind::Gaussian => Ok(g.clamp(out, 0.0, 1.0)?),
        NoiseKind::QuantizedGaussian => {
            let clamped = g.clamp(out, 0.0, 1.0)?;
            let cv = g.value(clamped);
            let delta = cv.data().iter().map(|&v| snap_to_grid(v) - v).collect();
            let delta = g.constant(Tensor::from_parts(cv.shape().to_vec(), delta));
            Ok(g.add(clamped, delta)?)
        }
    }
}

/// Generator objective: the joint objective on in-graph `x̂` plus
/// `mean(KL(q(z|x̂) ‖ N(0, I)))`.
pub fn generator_loss_graph(
    model: &VaeModel,
    g: &mut Graph<'_>,
    vars: &ModelVars,
    x: Var,
    latents: &Tensor,
    noise: &LossNoise,
    config: &LossConfig,
) -> Result<LossTerms> {
    let xhat = generator_path(model, g, vars, latents)?;
    let (mut terms, posterior) = joint_loss_graph(model, g, vars, x, Some(xhat), noise, config)?;
    let (mean, log_var) = posterior.expect("negatives were supplied");
    let kl = kl_rows(g, mean, log_var, 0.0)?;
    let kl = g.mean(kl)?;
    terms.kl_gen_prior = Some(kl);
    terms.loss = g.add(terms.loss, kl)?;
    Ok(terms)
}

/// Value of the joint objective.
pub fn joint_loss(
    model: &VaeModel,
    x: &Tensor,
    neg: Option<&NegativeBatch>,
    config: &LossConfig,
    noise: &LossNoise,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Scope::Frozen);
    let vx = g.leaf(x);
    let vn = neg.map(|n| g.leaf(&n.samples));
    let (terms, _) = joint_loss_graph(model, &mut g, &vars, vx, vn, noise, config)?;
    Ok(g.value(terms.loss).item())
}

/// Values of `(L_enc, L_gen)` for generated negatives `xhat`.
pub fn adversarial_losses(
    model: &VaeModel,
    x: &Tensor,
    xhat: &NegativeBatch,
    config: &LossConfig,
    noise: &LossNoise,
) -> Result<(f64, f64)> {
    let latents = match (&xhat.kind, &xhat.latents) {
        (SampleKind::Generated, Some(z)) => z,
        _ => return Err(Error::InvalidInput("adversarial losses need generated negatives".into())),
    };
    let l_enc = joint_loss(model, x, Some(xhat), config, noise)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Scope::Frozen);
    let vx = g.leaf(x);
    let terms = generator_loss_graph(model, &mut g, &vars, vx, latents, noise, config)?;
    Ok((l_enc, g.value(terms.loss).item()))
}
