//! Optimizers and the alternating encoder/decoder training loop.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchIterator, Dataset};
use crate::distributions::NoiseModel;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ModelConfig, Scope, VaeModel};
use crate::negative::{
    self, AuxiliarySampler, LossConfig, LossNoise, LossTerms, NegativeBatch, NegativeSource,
};
use crate::nn::Activation;
use crate::tensor::{MathError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rmsprop" => Some(OptimizerKind::RmsProp),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

pub const RMSPROP_RHO: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const OPTIMIZER_EPS: f64 = 1e-8;

/// RMSProp or Adam over an ordered list of parameter tensors.
///
/// Moment buffers are created on the first step; RMSProp keeps its squared
/// accumulator in `second`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or the shapes disagree.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        let op = match self.kind {
            OptimizerKind::RmsProp => "rmsprop_step",
            OptimizerKind::Adam => "adam_step",
        };
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.numel() != g.len()) {
            return Err(MathError::InvalidArgument {
                op,
                reason: "parameter and gradient shapes differ".into(),
            }
            .into());
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(MathError::NonFinite { op }.into());
        }
        if self.second.is_empty() {
            self.second = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.first = self.second.clone();
            }
        } else if self.second.len() != grads.len() || self.second.iter().zip(grads).any(|(s, g)| s.len() != g.len()) {
            return Err(MathError::InvalidArgument {
                op,
                reason: "optimizer state does not match the parameters".into(),
            }
            .into());
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::RmsProp => {
                for ((p, g), cache) in params.iter_mut().zip(grads).zip(&mut self.second) {
                    for ((w, &gi), c) in p.data_mut().iter_mut().zip(g).zip(cache.iter_mut()) {
                        *c = RMSPROP_RHO * *c + (1.0 - RMSPROP_RHO) * gi * gi;
                        *w -= lr * gi / (c.sqrt() + OPTIMIZER_EPS);
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + OPTIMIZER_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything that determines a training run apart from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub noise: NoiseModel,
    pub optimizer: OptimizerKind,
    pub negative: NegativeSource,
    pub loss: LossConfig,
    /// `None` enables spectral normalization exactly for adversarial runs.
    pub spectral_norm: Option<bool>,
    /// Warm-started power iterations before every update.
    pub spectral_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 50,
            lr: 1e-4,
            seed: 0,
            latent_dim: 10,
            encoder_hidden: vec![512, 256],
            decoder_hidden: vec![256, 512],
            activation: Activation::Softplus,
            noise: NoiseModel::bernoulli(),
            optimizer: OptimizerKind::RmsProp,
            negative: NegativeSource::None,
            loss: LossConfig::default(),
            spectral_norm: None,
            spectral_iters: 1,
        }
    }
}

impl TrainConfig {
    pub fn spectral_norm_enabled(&self) -> bool {
        self.spectral_norm.unwrap_or(self.negative == NegativeSource::Adversarial)
    }

    /// The loss settings with `adversarial` following the negative source.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            adversarial: self.negative == NegativeSource::Adversarial,
            ..self.loss
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            activation: self.activation,
            noise: self.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("model.latent_dim", self.latent_dim),
            ("train.spectral_iters", self.spectral_iters),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*key, "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(Error::config("model.encoder_hidden", "hidden sizes must be positive"));
        }
        self.loss.validate()
    }
}

/// Mean training statistics of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean objective minimized by the encoder step.
    pub loss: f64,
    /// Mean ELBO of the inlier batches.
    pub elbo: f64,
    pub kl_pos: f64,
    /// Mean `KL(q(z|x̄) ‖ N(c·1, I))`; absent without negatives.
    pub kl_neg: Option<f64>,
    pub wallclock: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss,elbo,kl_pos,kl_neg,wallclock";

    pub fn csv_row(&self) -> String {
        let kl_neg = self.kl_neg.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.loss, self.elbo, self.kl_pos, kl_neg, self.wallclock
        )
    }
}

/// Snapshot of a ChaCha stream sufficient to resume it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Stream id of the auxiliary sampler shuffles, kept apart from batching.
const AUX_SEED_SALT: u64 = 0x6e65_6761_7469_7665;

/// Model, optimizers and RNG of a run; resumable at epoch boundaries.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: VaeModel,
    pub encoder_opt: Optimizer,
    pub decoder_opt: Optimizer,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

struct StepStats {
    loss: f64,
    neg_elbo: f64,
    kl_pos: f64,
    kl_neg: Option<f64>,
}

impl Trainer {
    /// A freshly initialized model for inputs of `input_dim` values.
    pub fn new(config: TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut model = VaeModel::new(&config.model_config(input_dim))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        model.init(&mut rng);
        if config.spectral_norm_enabled() {
            model.encoder.set_spectral_norm(true)?;
        }
        Ok(Self {
            model,
            encoder_opt: Optimizer::new(config.optimizer, config.lr),
            decoder_opt: Optimizer::new(config.optimizer, config.lr),
            config,
            epoch: 0,
            rng,
        })
    }

    /// Reassembles a trainer from checkpointed parts.
    pub fn from_parts(
        model: VaeModel,
        encoder_opt: Optimizer,
        decoder_opt: Optimizer,
        config: TrainConfig,
        epoch: usize,
        rng: RngState,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            encoder_opt,
            decoder_opt,
            config,
            epoch,
            rng: rng.restore(),
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    fn negatives(&mut self, x: &Tensor, aux: Option<(&Dataset, &mut AuxiliarySampler)>) -> Result<Option<NegativeBatch>> {
        let m = x.rows();
        let loss = self.config.loss_config();
        let input = match self.config.negative {
            NegativeSource::None => return Ok(None),
            NegativeSource::Auxiliary => {
                let (data, sampler) =
                    aux.ok_or_else(|| Error::config("data.auxiliary.images_path", "auxiliary negatives need a dataset"))?;
                negative::NegativeInput::Auxiliary { data, sampler }
            }
            NegativeSource::UniformNoise => negative::NegativeInput::UniformNoise { dim: x.cols() },
            NegativeSource::AdditiveNoise => negative::NegativeInput::AdditiveNoise { inliers: x },
            NegativeSource::Generated | NegativeSource::Adversarial => {
                negative::NegativeInput::Generated { model: &self.model }
            }
        };
        negative::make_negative_batch(input, m, &loss, &mut self.rng).map(Some)
    }

    fn refresh_spectral(&mut self) -> Result<()> {
        if self.config.spectral_norm_enabled() {
            self.model.encoder.refresh_spectral_norm(self.config.spectral_iters)?;
        }
        Ok(())
    }

    /// Encoder update on the joint objective with negatives held fixed.
    pub fn encoder_step(&mut self, x: &Tensor, neg: Option<&NegativeBatch>, noise: &LossNoise) -> Result<f64> {
        Ok(self.encoder_step_stats(x, neg, noise)?.loss)
    }

    fn encoder_step_stats(&mut self, x: &Tensor, neg: Option<&NegativeBatch>, noise: &LossNoise) -> Result<StepStats> {
        self.refresh_spectral()?;
        let loss_cfg = self.config.loss_config();
        let (stats, grads) = {
            let mut g = Graph::new();
            let vars = self.model.bind(&mut g, Scope::Encoder);
            let vx = g.leaf(x);
            let vn = neg.map(|n| g.leaf(&n.samples));
            let (terms, _) = negative::joint_loss_graph(&self.model, &mut g, &vars, vx, vn, noise, &loss_cfg)?;
            let grads = g.backward_scalar(terms.loss)?;
            (stats_of(&g, &terms), self.model.encoder_grads(&grads, &vars))
        };
        self.encoder_opt.step(&mut self.model.encoder_params_mut(), &grads)?;
        Ok(stats)
    }

    /// Decoder update: the joint objective, or the generator objective in
    /// the adversarial scheme.
    pub fn decoder_step(&mut self, x: &Tensor, neg: Option<&NegativeBatch>, noise: &LossNoise) -> Result<f64> {
        self.refresh_spectral()?;
        let loss_cfg = self.config.loss_config();
        let (loss, grads) = {
            let mut g = Graph::new();
            let vars = self.model.bind(&mut g, Scope::Decoder);
            let vx = g.leaf(x);
            let terms = match neg {
                Some(n) if loss_cfg.adversarial => {
                    let z = n
                        .latents
                        .as_ref()
                        .ok_or_else(|| Error::InvalidInput("adversarial step needs generated negatives".into()))?;
                    negative::generator_loss_graph(&self.model, &mut g, &vars, vx, z, noise, &loss_cfg)?
                }
                _ => {
                    let vn = neg.map(|n| g.leaf(&n.samples));
                    negative::joint_loss_graph(&self.model, &mut g, &vars, vx, vn, noise, &loss_cfg)?.0
                }
            };
            let grads = g.backward_scalar(terms.loss)?;
            (g.value(terms.loss).item(), self.model.decoder_grads(&grads, &vars))
        };
        self.decoder_opt.step(&mut self.model.decoder_params_mut(), &grads)?;
        Ok(loss)
    }

    /// One pass over `inliers`: per batch, build negatives, update the
    /// encoder, then update the decoder on the same batch and noise.
    pub fn train_epoch(&mut self, inliers: &Dataset, aux: Option<&Dataset>) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.epoch as u64;
        let mut batches = BatchIterator::new(inliers.len(), self.config.batch_size, self.config.seed)?;
        if batches.batches_per_epoch() == 0 {
            return Err(Error::config(
                "train.batch_size",
                format!("batch size {} exceeds the {} training items", self.config.batch_size, inliers.len()),
            ));
        }
        batches.start_epoch(epoch);
        let mut sampler = match aux {
            Some(a) => Some(AuxiliarySampler::new(a.len(), self.config.seed ^ AUX_SEED_SALT, epoch)?),
            None => None,
        };
        let d = self.model.latent_dim();
        let (mut sum, mut count) = ([0.0; 4], 0usize);
        let mut last = String::from("none");
        while let Some(x) = batches.next_batch(inliers) {
            let batch_no = count;
            let result = (|| {
                let aux_pair = aux.zip(sampler.as_mut());
                let neg = self.negatives(&x, aux_pair)?;
                let m = neg.as_ref().map_or(0, NegativeBatch::len);
                let noise = LossNoise::draw(x.rows(), m, d, &self.config.loss_config(), &mut self.rng);
                let stats = self.encoder_step_stats(&x, neg.as_ref(), &noise)?;
                self.decoder_step(&x, neg.as_ref(), &noise)?;
                Ok::<_, Error>(stats)
            })();
            let stats = result.map_err(|e| match e {
                Error::Math(MathError::NonFinite { op }) => Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: batch_no,
                    diagnostics: format!("non-finite value in `{op}`; previous batch {last}"),
                },
                other => other,
            })?;
            last = format!(
                "loss={} neg_elbo={} kl_pos={} kl_neg={:?}",
                stats.loss, stats.neg_elbo, stats.kl_pos, stats.kl_neg
            );
            sum[0] += stats.loss;
            sum[1] -= stats.neg_elbo;
            sum[2] += stats.kl_pos;
            sum[3] += stats.kl_neg.unwrap_or(0.0);
            count += 1;
        }
        let n = count as f64;
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: sum[0] / n,
            elbo: sum[1] / n,
            kl_pos: sum[2] / n,
            kl_neg: (self.config.negative != NegativeSource::None).then_some(sum[3] / n),
            wallclock: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `config.epochs` epochs are complete, reporting each one.
    pub fn fit(
        &mut self,
        inliers: &Dataset,
        aux: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        if inliers.dim() != self.model.input_dim() || aux.is_some_and(|a| a.dim() != inliers.dim()) {
            return Err(Error::InvalidInput("dataset dimensions do not match the model".into()));
        }
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.train_epoch(inliers, aux)?;
            on_epoch(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

fn stats_of(g: &Graph<'_>, t: &LossTerms) -> StepStats {
    StepStats {
        loss: g.value(t.loss).item(),
        neg_elbo: g.value(t.neg_elbo).item(),
        kl_pos: g.value(t.kl_pos).item(),
        kl_neg: t.kl_neg.map(|v| g.value(v).item()),
    }
}
