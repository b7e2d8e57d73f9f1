//! The encoder/decoder pair and per-example ELBO.

use rand::Rng;

use crate::distributions::{
    self, kl_rows, reparameterize_rows, standard_normal_tensor, DiagGaussian, NoiseKind, NoiseModel, LOG_VAR_MAX,
    LOG_VAR_MIN,
};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::nn::{Activation, DenseVars, Mlp};
use crate::tensor::Tensor;

/// Architecture of a [`VaeModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub noise: NoiseModel,
}

impl ModelConfig {
    pub fn new(input_dim: usize, latent_dim: usize, noise: NoiseModel) -> Self {
        Self {
            input_dim,
            latent_dim,
            encoder_hidden: vec![512, 256],
            decoder_hidden: vec![256, 512],
            activation: Activation::Softplus,
            noise,
        }
    }
}

/// Single-sample ELBO decomposition for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub recon_ll: f64,
    pub kl: f64,
    pub elbo: f64,
}

impl ElboParts {
    fn new(recon_ll: f64, kl: f64) -> Self {
        Self {
            recon_ll,
            kl,
            elbo: recon_ll - kl,
        }
    }
}

/// Which half of the model receives gradients when bound to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Encoder,
    Decoder,
    Both,
    Frozen,
}

impl Scope {
    fn encoder(self) -> bool {
        matches!(self, Scope::Encoder | Scope::Both)
    }

    fn decoder(self) -> bool {
        matches!(self, Scope::Decoder | Scope::Both)
    }
}

/// Graph handles of a bound model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: Vec<DenseVars>,
    pub decoder: Vec<DenseVars>,
    pub obs_log_var: Var,
}

/// Graph nodes of a batch ELBO, one entry per row.
#[derive(Debug, Clone, Copy)]
pub struct ElboRows {
    pub mean: Var,
    pub log_var: Var,
    pub recon_ll: Var,
    pub kl: Var,
    pub elbo: Var,
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub noise: NoiseModel,
    /// Scalar observation log-variance used by the Gaussian noise models.
    pub obs_log_var: Tensor,
}

impl VaeModel {
    /// A zero-initialized model; call [`VaeModel::init`] before training.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let (d_in, d_z) = (config.input_dim, config.latent_dim);
        if d_in == 0 || d_z == 0 {
            return Err(Error::InvalidInput("input and latent dims must be positive".into()));
        }
        let enc_dims: Vec<usize> = std::iter::once(d_in)
            .chain(config.encoder_hidden.iter().copied())
            .chain(std::iter::once(2 * d_z))
            .collect();
        let dec_dims: Vec<usize> = std::iter::once(d_z)
            .chain(config.decoder_hidden.iter().copied())
            .chain(std::iter::once(d_in))
            .collect();
        let out_act = match config.noise.kind {
            NoiseKind::Bernoulli => Activation::Sigmoid,
            NoiseKind::Gaussian | NoiseKind::QuantizedGaussian => Activation::Identity,
        };
        Ok(Self {
            encoder: Mlp::new(&enc_dims, config.activation, Activation::Identity)?,
            decoder: Mlp::new(&dec_dims, config.activation, out_act)?,
            noise: config.noise,
            obs_log_var: Tensor::scalar(config.noise.obs_log_var).with_requires_grad(config.noise.learn_obs_var),
        })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, noise: NoiseModel) -> Result<Self> {
        if encoder.output_dim() != 2 * decoder.input_dim() || encoder.input_dim() != decoder.output_dim() {
            return Err(Error::InvalidInput(format!(
                "encoder {:?} and decoder {:?} do not form a VAE",
                encoder.dims(),
                decoder.dims()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            noise,
            obs_log_var: Tensor::scalar(noise.obs_log_var).with_requires_grad(noise.learn_obs_var),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.encoder.init(rng);
        self.decoder.init(rng);
    }

    /// Encoder parameters in a fixed order.
    pub fn encoder_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder.params_mut().collect()
    }

    /// Decoder parameters in a fixed order, followed by the observation
    /// log-variance when it is learned.
    pub fn decoder_params_mut(&mut self) -> Vec<&mut Tensor> {
        let learn = self.noise.learn_obs_var && self.noise.kind != NoiseKind::Bernoulli;
        let mut out: Vec<&mut Tensor> = self.decoder.params_mut().collect();
        if learn {
            out.push(&mut self.obs_log_var);
        }
        out
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, scope: Scope) -> ModelVars {
        let learn = self.noise.learn_obs_var && self.noise.kind != NoiseKind::Bernoulli;
        ModelVars {
            encoder: self.encoder.bind(g, scope.encoder()),
            decoder: self.decoder.bind(g, scope.decoder()),
            obs_log_var: g.param(&self.obs_log_var, learn && scope.decoder()),
        }
    }

    /// Gradients in the order of [`VaeModel::encoder_params_mut`].
    pub fn encoder_grads(&self, grads: &Gradients, vars: &ModelVars) -> Vec<Vec<f64>> {
        collect_grads(grads, &self.encoder, &vars.encoder)
    }

    /// Gradients in the order of [`VaeModel::decoder_params_mut`].
    pub fn decoder_grads(&self, grads: &Gradients, vars: &ModelVars) -> Vec<Vec<f64>> {
        let mut out = collect_grads(grads, &self.decoder, &vars.decoder);
        if self.noise.learn_obs_var && self.noise.kind != NoiseKind::Bernoulli {
            out.push(grads.get(vars.obs_log_var).map_or_else(|| vec![0.0], <[f64]>::to_vec));
        }
        out
    }

    /// Posterior mean and clamped log-variance, each `[rows × d]`.
    pub fn encode_graph(&self, g: &mut Graph<'_>, vars: &ModelVars, x: Var) -> Result<(Var, Var)> {
        let h = self.encoder.forward(g, &vars.encoder, x)?;
        let d = self.latent_dim();
        let mean = g.slice_last(h, 0, d)?;
        let raw = g.slice_last(h, d, 2 * d)?;
        let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok((mean, log_var))
    }

    pub fn decode_graph(&self, g: &mut Graph<'_>, vars: &ModelVars, z: Var) -> Result<Var> {
        Ok(self.decoder.forward(g, &vars.decoder, z)?)
    }

    /// Per-row `log p(x | decoded)`. The quantized model reads the values of
    /// `x` to place its pixel bins and does not differentiate through them.
    pub fn recon_rows(&self, g: &mut Graph<'_>, vars: &ModelVars, x: Var, decoded: Var) -> Result<Var> {
        match self.noise.kind {
            NoiseKind::Bernoulli => Ok(distributions::bernoulli_ll_rows(g, x, decoded)?),
            NoiseKind::Gaussian => Ok(distributions::gaussian_ll_rows(g, x, decoded, vars.obs_log_var)?),
            NoiseKind::QuantizedGaussian => {
                let xv = g.value(x).clone();
                distributions::quantized_gaussian_ll_rows(g, &xv, decoded, vars.obs_log_var)
            }
        }
    }

    /// Single-sample per-row ELBO with externally drawn `eps` `[rows × d]`.
    pub fn elbo_rows(&self, g: &mut Graph<'_>, vars: &ModelVars, x: Var, eps: Tensor) -> Result<ElboRows> {
        let (mean, log_var) = self.encode_graph(g, vars, x)?;
        let z = reparameterize_rows(g, mean, log_var, eps)?;
        let decoded = self.decode_graph(g, vars, z)?;
        let recon_ll = self.recon_rows(g, vars, x, decoded)?;
        let kl = kl_rows(g, mean, log_var, 0.0)?;
        let elbo = g.sub(recon_ll, kl)?;
        Ok(ElboRows {
            mean,
            log_var,
            recon_ll,
            kl,
            elbo,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "expected rows of {} values, got shape {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("inputs must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Posterior mean and log-variance tensors for a batch.
    pub fn encode_tensors(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Scope::Frozen);
        let vx = g.leaf(x);
        let (m, lv) = self.encode_graph(&mut g, &vars, vx)?;
        Ok((g.value(m).clone(), g.value(lv).clone()))
    }

    /// One posterior per row of `x`.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<DiagGaussian>> {
        let (m, lv) = self.encode_tensors(x)?;
        let d = self.latent_dim();
        Ok(m.data()
            .chunks(d)
            .zip(lv.data().chunks(d))
            .map(|(m, lv)| DiagGaussian {
                mean: m.to_vec(),
                log_var: lv.to_vec(),
            })
            .collect())
    }

    /// Decoder output: pixel probabilities (Bernoulli) or means (Gaussian).
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.latent_dim() {
            return Err(Error::InvalidInput(format!(
                "expected latent rows of {} values, got shape {:?}",
                self.latent_dim(),
                z.shape()
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Scope::Frozen);
        let vz = g.leaf(z);
        let out = self.decode_graph(&mut g, &vars, vz)?;
        Ok(g.value(out).clone())
    }

    /// ELBO decomposition of every row of `x` with the given noise `eps`.
    pub fn elbo_batch_with(&self, x: &Tensor, eps: Tensor) -> Result<Vec<ElboParts>> {
        self.check_input(x)?;
        if eps.shape() != [x.rows(), self.latent_dim()] {
            return Err(Error::InvalidInput(format!("noise shape {:?} does not match batch", eps.shape())));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Scope::Frozen);
        let vx = g.leaf(x);
        let rows = self.elbo_rows(&mut g, &vars, vx, eps)?;
        let (r, k) = (g.value(rows.recon_ll).data(), g.value(rows.kl).data());
        Ok(r.iter().zip(k).map(|(&r, &k)| ElboParts::new(r, k)).collect())
    }

    pub fn elbo_batch<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Vec<ElboParts>> {
        let eps = standard_normal_tensor(&[x.rows(), self.latent_dim()], rng);
        self.elbo_batch_with(x, eps)
    }

    /// Single-sample ELBO of one example.
    pub fn elbo<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<ElboParts> {
        let x = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.elbo_batch(&x, rng)?[0])
    }

    /// `decode(z)` for `z ~ N(0, I)`; pixel means, not binary samples.
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::InvalidInput("generate needs n ≥ 1".into()));
        }
        let z = standard_normal_tensor(&[n, self.latent_dim()], rng);
        self.decode(&z)
    }
}

fn collect_grads(grads: &Gradients, mlp: &Mlp, vars: &[DenseVars]) -> Vec<Vec<f64>> {
    mlp.layers
        .iter()
        .zip(vars)
        .flat_map(|(layer, v)| {
            [
                grads.get(v.weights).map_or_else(|| vec![0.0; layer.weights.numel()], <[f64]>::to_vec),
                grads.get(v.bias).map_or_else(|| vec![0.0; layer.bias.numel()], <[f64]>::to_vec),
            ]
        })
        .collect()
}
