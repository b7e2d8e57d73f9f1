//! Out-of-distribution scores, rank AUC, reports and image/latent exports.
//!
//! Both scores grow as an input looks less like the training data: bits per
//! dimension `−elbo / (D ln 2)` and the posterior divergence
//! `KL(q(z|x) ‖ N(0, I))`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_bytes, Dataset};
use crate::distributions::{kl_diag_gaussian_to_shifted_standard, standard_normal_tensor, NoiseKind};
use crate::error::{Error, Result};
use crate::model::VaeModel;
use crate::tensor::Tensor;

/// Rows scored per graph evaluation.
const SCORE_CHUNK: usize = 500;

/// `−elbo / (D ln 2)`.
pub fn bpd_from_elbo(elbo: f64, dim: usize) -> f64 {
    -elbo / (dim as f64 * std::f64::consts::LN_2)
}

/// Noise for one example: a ChaCha stream selected by the example's bytes,
/// so a score depends only on the model, the input and the seed.
fn example_rng(eval_seed: u64, x: &[f64]) -> ChaCha8Rng {
    let mut h = crc32fast::Hasher::new();
    x.iter().for_each(|v| h.update(&v.to_le_bytes()));
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    rng.set_stream(u64::from(h.finalize()) | ((x.len() as u64) << 32));
    rng
}

/// BPD of every row of `x`, averaging the ELBO over `samples` draws.
pub fn bpd_scores(model: &VaeModel, x: &Tensor, eval_seed: u64, samples: usize) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::config("eval.samples", "must be ≥ 1"));
    }
    let d = model.latent_dim();
    let mut out = Vec::with_capacity(x.rows());
    for start in (0..x.rows()).step_by(SCORE_CHUNK) {
        let chunk = x.slice_rows(start, (start + SCORE_CHUNK).min(x.rows()));
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.rows()).map(|r| example_rng(eval_seed, chunk.row(r))).collect();
        let mut elbo = vec![0.0; chunk.rows()];
        for _ in 0..samples {
            let eps: Vec<f64> = rngs
                .iter_mut()
                .flat_map(|rng| standard_normal_tensor(&[d], rng).into_data())
                .collect();
            let eps = Tensor::new(vec![chunk.rows(), d], eps)?;
            for (acc, p) in elbo.iter_mut().zip(model.elbo_batch_with(&chunk, eps)?) {
                *acc += p.elbo;
            }
        }
        out.extend(elbo.iter().map(|e| bpd_from_elbo(e / samples as f64, model.input_dim())));
    }
    Ok(out)
}

pub fn bpd_score(model: &VaeModel, x: &[f64], eval_seed: u64) -> Result<f64> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(bpd_scores(model, &t, eval_seed, 1)?[0])
}

/// `KL(q(z|x) ‖ N(0, I))` of every row; deterministic.
pub fn kl_scores(model: &VaeModel, x: &Tensor) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.rows());
    for start in (0..x.rows()).step_by(SCORE_CHUNK) {
        let chunk = x.slice_rows(start, (start + SCORE_CHUNK).min(x.rows()));
        out.extend(model.encode(&chunk)?.iter().map(|q| kl_diag_gaussian_to_shifted_standard(q, 0.0)));
    }
    Ok(out)
}

pub fn kl_score(model: &VaeModel, x: &[f64]) -> Result<f64> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(kl_scores(model, &t)?[0])
}

/// Probability that an OOD score exceeds an inlier score, ties counting ½.
///
/// Computed from the rank sum of the OOD scores (Mann–Whitney U) in exact
/// integer arithmetic, so the result equals pair counting bit for bit.
pub fn auc(inlier: &[f64], ood: &[f64]) -> Result<f64> {
    if inlier.is_empty() || ood.is_empty() {
        return Err(Error::InvalidInput("AUC needs two non-empty score lists".into()));
    }
    if inlier.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("AUC scores must not be NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = inlier.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the mid-rank of a tie group spanning sorted positions i..j is i + 1 + j
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let in_group = all[i..j].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += in_group * (i + 1 + j) as u128;
        i = j;
    }
    let (n, m) = (inlier.len() as u128, ood.len() as u128);
    let twice_u = twice_rank_sum - m * (m + 1);
    Ok(twice_u as f64 / (2 * n * m) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(v: &[f64]) -> Self {
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inlier_name: String,
    pub ood_name: String,
    pub eval_seed: u64,
    pub auc_bpd: f64,
    pub auc_kl: f64,
    pub inlier_bpd_summary: Summary,
    pub ood_bpd_summary: Summary,
    pub inlier_kl_summary: Summary,
    pub ood_kl_summary: Summary,
    pub inlier_bpd: Vec<f64>,
    pub ood_bpd: Vec<f64>,
    pub inlier_kl: Vec<f64>,
    pub ood_kl: Vec<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are always serializable") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("malformed report: {e}")))
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = format!("inlier: {}  ood: {}  eval_seed: {}\n", self.inlier_name, self.ood_name, self.eval_seed);
        let _ = writeln!(s, "{:<10} {:>12} {:>12}", "", "mean", "std");
        for (label, sum) in [
            ("Test BPD", self.inlier_bpd_summary),
            ("OOD BPD", self.ood_bpd_summary),
            ("Test KL", self.inlier_kl_summary),
            ("OOD KL", self.ood_kl_summary),
        ] {
            let _ = writeln!(s, "{label:<10} {:>12.4} {:>12.4}", sum.mean, sum.std);
        }
        let _ = writeln!(s, "{:<10} {:>12.4}", "AUC BPD", self.auc_bpd);
        let _ = writeln!(s, "{:<10} {:>12.4}", "AUC KL", self.auc_kl);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    /// ELBO samples averaged per BPD score.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, samples: 1 }
    }
}

/// Scores both test sets and assembles the report.
pub fn evaluate_pair(model: &VaeModel, inlier: &Dataset, ood: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    for set in [inlier, ood] {
        if set.dim() != model.input_dim() {
            return Err(Error::Data {
                path: set.name.clone().into(),
                reason: format!("{} values per item, the model expects {}", set.dim(), model.input_dim()),
            });
        }
    }
    let inlier_bpd = bpd_scores(model, &inlier.images, config.seed, config.samples)?;
    let ood_bpd = bpd_scores(model, &ood.images, config.seed, config.samples)?;
    let inlier_kl = kl_scores(model, &inlier.images)?;
    let ood_kl = kl_scores(model, &ood.images)?;
    Ok(EvalReport {
        inlier_name: inlier.name.clone(),
        ood_name: ood.name.clone(),
        eval_seed: config.seed,
        auc_bpd: auc(&inlier_bpd, &ood_bpd)?,
        auc_kl: auc(&inlier_kl, &ood_kl)?,
        inlier_bpd_summary: Summary::of(&inlier_bpd),
        ood_bpd_summary: Summary::of(&ood_bpd),
        inlier_kl_summary: Summary::of(&inlier_kl),
        ood_kl_summary: Summary::of(&ood_kl),
        inlier_bpd,
        ood_bpd,
        inlier_kl,
        ood_kl,
    })
}

/// Binary PGM (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses the files written by [`encode_pgm`]: `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::InvalidInput("not a P5 image with maxval 255".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    let (w, h): (usize, usize) = (fields[1].parse().map_err(|_| bad())?, fields[2].parse().map_err(|_| bad())?);
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + 1 + w * h {
        return Err(bad());
    }
    Ok((w, h, bytes[pos + 1..].to_vec()))
}

/// Tiles square images into a grid with `cols` columns and a 1-pixel dark
/// gutter between tiles. Values are clamped to `[0, 1]` and rounded half up.
pub fn image_grid(images: &Tensor, cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    let side = (images.cols() as f64).sqrt().round() as usize;
    if side * side != images.cols() || cols == 0 {
        return Err(Error::InvalidInput(format!(
            "cannot tile {}-value images into {cols} columns",
            images.cols()
        )));
    }
    let n = images.rows();
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (w, h) = (cols * side + cols - 1, rows * side + rows - 1);
    let mut px = vec![0u8; w * h];
    for k in 0..n {
        let bytes = to_bytes(images.row(k));
        let (ty, tx) = ((k / cols) * (side + 1), (k % cols) * (side + 1));
        for r in 0..side {
            let dst = (ty + r) * w + tx;
            px[dst..dst + side].copy_from_slice(&bytes[r * side..(r + 1) * side]);
        }
    }
    Ok((w, h, px))
}

pub fn write_image_grid(images: &Tensor, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h, px) = image_grid(images, cols)?;
    fs::write(path, encode_pgm(w, h, &px)).map_err(|e| Error::io(path, e))
}

/// Writes `n` generated images as a PGM grid.
pub fn export_samples<R: Rng + ?Sized>(
    model: &VaeModel,
    n: usize,
    cols: usize,
    path: impl AsRef<Path>,
    rng: &mut R,
) -> Result<()> {
    let mut samples = model.generate(n, rng)?;
    if model.noise.kind != NoiseKind::Bernoulli {
        samples.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    write_image_grid(&samples, cols, path)
}

/// Reconstructions `decode(μ(x))` of the given rows.
pub fn reconstruct(model: &VaeModel, x: &Tensor) -> Result<Tensor> {
    let (mean, _) = model.encode_tensors(x)?;
    let mut out = model.decode(&mean)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// CSV `label,mu_0,mu_1` of posterior means over labelled sets.
pub fn latents_csv(model: &VaeModel, sets: &[(&str, &Tensor)]) -> Result<String> {
    if model.latent_dim() < 2 {
        return Err(Error::InvalidInput("latent export needs latent_dim ≥ 2".into()));
    }
    let mut out = String::from("label,mu_0,mu_1\n");
    for (label, x) in sets {
        let (mean, _) = model.encode_tensors(x)?;
        for r in 0..mean.rows() {
            let mu = mean.row(r);
            let _ = writeln!(out, "{label},{},{}", mu[0], mu[1]);
        }
    }
    Ok(out)
}

pub fn export_latents(model: &VaeModel, sets: &[(&str, &Tensor)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, latents_csv(model, sets)?).map_err(|e| Error::io(path, e))
}
