//! Versioned, checksummed binary checkpoints.
//!
//! The byte layout is documented in `docs/checkpoint-format.md`. All
//! integers and floats are little-endian; floats are stored bit-exactly.

use std::fs;
use std::path::Path;

use crate::distributions::{NoiseKind, NoiseModel};
use crate::error::{Error, Result};
use crate::model::VaeModel;
use crate::nn::{Activation, DenseLayer, Mlp, SpectralState};
use crate::tensor::Tensor;
use crate::train::{Optimizer, OptimizerKind, RngState, Trainer};

pub const MAGIC: &[u8; 8] = b"NEGVAECK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

/// Everything needed to resume training or evaluate a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: VaeModel,
    pub encoder_opt: Optimizer,
    pub decoder_opt: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    /// Resolved run configuration in `key = value` form.
    pub config_text: String,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config_text: impl Into<String>) -> Self {
        Self {
            model: trainer.model.clone(),
            encoder_opt: trainer.encoder_opt.clone(),
            decoder_opt: trainer.decoder_opt.clone(),
            epoch: trainer.epoch,
            rng: trainer.rng_state(),
            config_text: config_text.into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u64(self.epoch as u64);
        w.buf.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.str(&self.config_text);
        let noise = &self.model.noise;
        w.str(noise.kind.name());
        w.buf.push(u8::from(noise.learn_obs_var));
        w.f64(noise.obs_log_var);
        w.f64(self.model.obs_log_var.item());
        w.mlp(&self.model.encoder);
        w.mlp(&self.model.decoder);
        w.optimizer(&self.encoder_opt);
        w.optimizer(&self.decoder_opt);

        let payload = w.buf;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: &str| Error::Checkpoint(why.to_string());
        if bytes.len() < HEADER_LEN + 4 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| corrupt("payload length overflow"))?;
        if bytes.len() != HEADER_LEN + len.checked_add(4).ok_or_else(|| corrupt("payload length overflow"))? {
            return Err(corrupt("file length does not match the header"));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
        let stored = u32::from_le_bytes(bytes[HEADER_LEN + len..].try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(corrupt("checksum mismatch"));
        }

        let mut r = Reader { buf: payload, pos: 0 };
        let epoch = r.usize()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let config_text = r.str()?;
        let kind_name = r.str()?;
        let kind = NoiseKind::parse(&kind_name).ok_or_else(|| corrupt("unknown noise model"))?;
        let learn_obs_var = r.u8()? != 0;
        let noise = NoiseModel {
            kind,
            obs_log_var: r.f64()?,
            learn_obs_var,
        };
        let obs_now = r.f64()?;
        let encoder = r.mlp()?;
        let decoder = r.mlp()?;
        let encoder_opt = r.optimizer()?;
        let decoder_opt = r.optimizer()?;
        if r.pos != payload.len() {
            return Err(corrupt("trailing bytes in payload"));
        }
        let mut model = VaeModel::from_parts(encoder, decoder, noise)?;
        model.obs_log_var.data_mut()[0] = obs_now;
        Ok(Self {
            model,
            encoder_opt,
            decoder_opt,
            epoch,
            rng: RngState { seed, stream, word_pos },
            config_text,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }

    fn mlp(&mut self, mlp: &Mlp) {
        self.u64(mlp.layers.len() as u64);
        for layer in &mlp.layers {
            self.u64(layer.in_dim() as u64);
            self.u64(layer.out_dim() as u64);
            self.str(layer.activation.name());
            self.floats(layer.weights.data());
            self.floats(layer.bias.data());
            match layer.spectral() {
                Some(s) => {
                    self.buf.push(1);
                    self.floats(&s.u);
                    self.f64(s.sigma);
                }
                None => self.buf.push(0),
            }
        }
    }

    fn optimizer(&mut self, opt: &Optimizer) {
        self.str(opt.kind.name());
        self.f64(opt.lr);
        self.u64(opt.step);
        for bufs in [&opt.first, &opt.second] {
            self.u64(bufs.len() as u64);
            bufs.iter().for_each(|b| self.floats(b));
        }
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.usize()?;
        let mut layers = Vec::new();
        for _ in 0..n {
            let (i, o) = (self.usize()?, self.usize()?);
            let act_name = self.str()?;
            let activation =
                Activation::parse(&act_name).ok_or_else(|| Error::Checkpoint(format!("unknown activation `{act_name}`")))?;
            let weights = Tensor::new(vec![i, o], self.floats()?)?;
            let bias = Tensor::new(vec![o], self.floats()?)?;
            let mut layer = DenseLayer::from_parts(weights, bias, activation)?;
            if self.u8()? == 1 {
                let u = self.floats()?;
                let sigma = self.f64()?;
                if u.len() != o {
                    return Err(Error::Checkpoint("power-iteration vector has the wrong length".into()));
                }
                layer.set_spectral_state(Some(SpectralState { u, sigma }));
            }
            layers.push(layer);
        }
        Ok(Mlp::from_layers(layers)?)
    }

    fn optimizer(&mut self) -> Result<Optimizer> {
        let name = self.str()?;
        let kind = OptimizerKind::parse(&name).ok_or_else(|| Error::Checkpoint(format!("unknown optimizer `{name}`")))?;
        let lr = self.f64()?;
        let step = self.u64()?;
        let mut bufs = [Vec::new(), Vec::new()];
        for b in &mut bufs {
            let n = self.usize()?;
            for _ in 0..n {
                b.push(self.floats()?);
            }
        }
        let [first, second] = bufs;
        Ok(Optimizer {
            kind,
            lr,
            step,
            first,
            second,
        })
    }
}
