//! Flat `key = value` run configuration.
//!
//! Every key has a default; files and `--set` overrides may only name keys
//! from [`KEYS`]. The resolved configuration is written back in key order,
//! so a run is reproduced by feeding its `resolved.cfg` back in.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{DataSource, Dataset, Split};
use crate::distributions::{NoiseKind, NoiseModel};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::negative::{LossConfig, NegativeSource};
use crate::nn::Activation;
use crate::train::{OptimizerKind, TrainConfig};

/// All recognised keys with their defaults, in resolved-file order.
pub const KEYS: &[(&str, &str)] = &[
    ("data.inlier.images_path", ""),
    ("data.inlier.max_items", "10000"),
    ("data.inlier_test.images_path", ""),
    ("data.inlier_test.max_items", "0"),
    ("data.ood.images_path", ""),
    ("data.ood.max_items", "0"),
    ("data.auxiliary.images_path", ""),
    ("data.auxiliary.max_items", "10000"),
    ("model.latent_dim", "10"),
    ("model.encoder_hidden", "512,256"),
    ("model.decoder_hidden", "256,512"),
    ("model.activation", "softplus"),
    ("model.noise", "bernoulli"),
    ("model.obs_log_var", "0"),
    ("model.learn_obs_var", "true"),
    ("train.epochs", "20"),
    ("train.batch_size", "50"),
    ("train.lr", "0.0001"),
    ("train.optimizer", "rmsprop"),
    ("train.seed", "0"),
    ("train.spectral_norm", "auto"),
    ("train.spectral_iters", "1"),
    ("negative.kind", "none"),
    ("negative.noise_sigma", "0.25"),
    ("loss.shift", "8"),
    ("loss.alpha", "0"),
    ("eval.seed", "0"),
    ("eval.samples", "1"),
    ("export.samples", "64"),
    ("export.grid_cols", "8"),
];

/// Dataset roles and the split each is drawn from.
pub const ROLES: &[(&str, Split)] = &[
    ("inlier", Split::Train),
    ("inlier_test", Split::Test),
    ("ood", Split::Test),
    ("auxiliary", Split::Train),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

fn canonical_key(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .map(|&(k, _)| k)
        .find(|&k| k == key)
        .ok_or_else(|| Error::config(key, "unknown key"))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key)?;
        self.values.insert(key, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(pair, "override must look like key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    /// The full configuration in key order.
    pub fn resolved_text(&self) -> String {
        KEYS.iter().map(|&(k, _)| format!("{k} = {}\n", self.values[k])).collect()
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::config(key, format!("expected a comma-separated list of sizes, got `{v}`"))))
            .collect()
    }

    fn choice<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>, allowed: &str) -> Result<T> {
        let v = self.get(key);
        parse(v).ok_or_else(|| Error::config(key, format!("`{v}` is not one of {allowed}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let noise_kind = self.choice(
            "model.noise",
            NoiseKind::parse,
            "bernoulli, gaussian, quantized_gaussian",
        )?;
        let spectral_norm = match self.get("train.spectral_norm") {
            "auto" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => return Err(Error::config("train.spectral_norm", format!("`{other}` is not one of auto, true, false"))),
        };
        let cfg = TrainConfig {
            epochs: self.parse_as("train.epochs")?,
            batch_size: self.parse_as("train.batch_size")?,
            lr: self.parse_as("train.lr")?,
            seed: self.parse_as("train.seed")?,
            latent_dim: self.parse_as("model.latent_dim")?,
            encoder_hidden: self.list("model.encoder_hidden")?,
            decoder_hidden: self.list("model.decoder_hidden")?,
            activation: self.choice(
                "model.activation",
                Activation::parse,
                "relu, tanh, sigmoid, softplus, identity",
            )?,
            noise: NoiseModel {
                kind: noise_kind,
                obs_log_var: self.parse_as("model.obs_log_var")?,
                learn_obs_var: self.parse_as("model.learn_obs_var")?,
            },
            optimizer: self.choice("train.optimizer", OptimizerKind::parse, "rmsprop, adam")?,
            negative: self.choice(
                "negative.kind",
                NegativeSource::parse,
                "none, auxiliary, uniform_noise, additive_noise, generated, adversarial",
            )?,
            loss: LossConfig {
                shift: self.parse_as("loss.shift")?,
                alpha: self.parse_as("loss.alpha")?,
                adversarial: false,
                noise_sigma: self.parse_as("negative.noise_sigma")?,
            },
            spectral_norm,
            spectral_iters: self.parse_as("train.spectral_iters")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let cfg = EvalConfig {
            seed: self.parse_as("eval.seed")?,
            samples: self.parse_as("eval.samples")?,
        };
        if cfg.samples == 0 {
            return Err(Error::config("eval.samples", "must be ≥ 1"));
        }
        Ok(cfg)
    }

    pub fn export_settings(&self) -> Result<(usize, usize)> {
        let n: usize = self.parse_as("export.samples")?;
        let cols: usize = self.parse_as("export.grid_cols")?;
        if n == 0 || cols == 0 {
            return Err(Error::config("export.samples", "sample count and grid columns must be ≥ 1"));
        }
        Ok((n, cols))
    }

    pub fn has_role(&self, role: &str) -> bool {
        !self.get(&format!("data.{role}.images_path")).trim().is_empty()
    }

    /// Loads the dataset of a role; errors name the configuration key.
    pub fn load_role(&self, role: &str) -> Result<Dataset> {
        let split = ROLES
            .iter()
            .find(|(r, _)| *r == role)
            .map(|&(_, s)| s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown data role `{role}`")))?;
        let key = format!("data.{role}.images_path");
        let spec = self.get(&key).trim().to_string();
        if spec.is_empty() {
            return Err(Error::config(key, "required but not set"));
        }
        let max: usize = self.parse_as(&format!("data.{role}.max_items"))?;
        let source = DataSource::parse(&spec).map_err(|e| Error::config(key.clone(), e.to_string()))?;
        source.load(role, split, (max > 0).then_some(max)).map_err(|e| match e {
            Error::Data { path, reason } => Error::Data {
                path,
                reason: format!("{key}: {reason}"),
            },
            Error::Io { path, source } => Error::Data {
                reason: format!("{key}: {source}"),
                path,
            },
            other => other,
        })
    }

    /// Name of a role's dataset as it appears in reports.
    pub fn role_label(&self, role: &str) -> String {
        let spec = self.get(&format!("data.{role}.images_path"));
        let name = PathBuf::from(spec)
            .file_name()
            .map_or_else(|| spec.to_string(), |f| f.to_string_lossy().into_owned());
        format!("{role}:{name}")
    }
}
