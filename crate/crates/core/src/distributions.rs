//! Diagonal Gaussians, KL divergences and the observation likelihoods.
//!
//! Each quantity exists twice: a plain `f64` evaluation used for scoring
//! and as a test reference, and a graph-level builder (suffix `_rows`) that
//! produces one value per batch row and is differentiated during training.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};
use crate::tensor::{MathResult, Tensor};

/// Bounds for log-variances; `σ² ∈ [1e-12, 1e12]`.
pub const LOG_VAR_MIN: f64 = -27.6;
pub const LOG_VAR_MAX: f64 = 27.6;

/// Bernoulli means are clamped to `[BERNOULLI_EPS, 1 − BERNOULLI_EPS]`.
pub const BERNOULLI_EPS: f64 = 1e-7;

/// Number of intensity levels of 8-bit images.
pub const PIXEL_LEVELS: usize = 256;

/// Rounds `[0, 1]`-clamped values to the nearest of the 256 grid levels.
pub fn snap_to_grid(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A diagonal Gaussian `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Builds the distribution, clamping `log_var` into
    /// `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::InvalidInput(format!(
                "mean has {} coordinates, log_var {}",
                mean.len(),
                log_var.len()
            )));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite Gaussian parameter".into()));
        }
        let log_var = log_var.into_iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    /// `N(shift·1, I)`.
    pub fn shifted_standard(dim: usize, shift: f64) -> Self {
        Self {
            mean: vec![shift; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((&m, &lv), &zi)| -0.5 * (LN_2PI + lv + (zi - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// The negative prior `N(shift·1, I)` over a `dim`-dimensional latent space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativePrior {
    pub shift: f64,
    pub dim: usize,
}

impl NegativePrior {
    pub fn new(shift: f64, dim: usize) -> Self {
        Self { shift, dim }
    }

    /// `KL(p̄ ‖ p) = d·c²/2`.
    pub fn kl_to_standard(&self) -> f64 {
        self.dim as f64 * self.shift * self.shift / 2.0
    }

    pub fn as_gaussian(&self) -> DiagGaussian {
        DiagGaussian::shifted_standard(self.dim, self.shift)
    }
}

/// `KL(q ‖ N(shift·1, I)) = ½ Σ [σ² + (μ − c)² − 1 − ln σ²]`.
pub fn kl_diag_gaussian_to_shifted_standard(q: &DiagGaussian, shift: f64) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(&m, &lv)| lv.exp() + (m - shift).powi(2) - 1.0 - lv)
        .sum::<f64>()
        * 0.5
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// `(1/n) Σ [log q(zⱼ) − log p̄(zⱼ)]` with `zⱼ ~ q`.
pub fn kl_monte_carlo<R: Rng + ?Sized>(q: &DiagGaussian, shift: f64, n: usize, rng: &mut R) -> Result<McEstimate> {
    if n == 0 {
        return Err(Error::InvalidInput("Monte-Carlo KL needs at least one sample".into()));
    }
    let prior = DiagGaussian::shifted_standard(q.dim(), shift);
    let mut z = vec![0.0; q.dim()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        for ((zi, &m), &lv) in z.iter_mut().zip(&q.mean).zip(&q.log_var) {
            let eps: f64 = rng.sample(StandardNormal);
            *zi = m + (0.5 * lv).exp() * eps;
        }
        let term = q.log_density(&z) - prior.log_density(&z);
        sum += term;
        sum_sq += term * term;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 { (sum_sq - nf * mean * mean).max(0.0) / (nf - 1.0) } else { 0.0 };
    Ok(McEstimate {
        mean,
        std_err: (var / nf).sqrt(),
    })
}

/// `z = μ + exp(½·log_var) ⊙ ε` for a given `ε`.
pub fn reparameterize_with(q: &DiagGaussian, eps: &[f64]) -> Vec<f64> {
    q.mean
        .iter()
        .zip(&q.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect()
}

pub fn reparameterize<R: Rng + ?Sized>(q: &DiagGaussian, rng: &mut R) -> Vec<f64> {
    let eps: Vec<f64> = (0..q.dim()).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize_with(q, &eps)
}

/// Standard-normal noise of the given shape.
pub fn standard_normal_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Bernoulli,
    Gaussian,
    QuantizedGaussian,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Bernoulli => "bernoulli",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::QuantizedGaussian => "quantized_gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "bernoulli" => NoiseKind::Bernoulli,
            "gaussian" => NoiseKind::Gaussian,
            "quantized_gaussian" => NoiseKind::QuantizedGaussian,
            _ => return None,
        })
    }
}

/// Observation model `p(x|z)`; `obs_log_var` is used by the Gaussian kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub obs_log_var: f64,
    pub learn_obs_var: bool,
}

impl NoiseModel {
    pub fn bernoulli() -> Self {
        Self {
            kind: NoiseKind::Bernoulli,
            obs_log_var: 0.0,
            learn_obs_var: false,
        }
    }

    pub fn gaussian(obs_log_var: f64, learn_obs_var: bool) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            obs_log_var,
            learn_obs_var,
        }
    }

    pub fn quantized_gaussian(obs_log_var: f64, learn_obs_var: bool) -> Self {
        Self {
            kind: NoiseKind::QuantizedGaussian,
            obs_log_var,
            learn_obs_var,
        }
    }
}

fn check_unit_interval(x: &[f64]) -> Result<()> {
    match x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// `Σ [x ln λ + (1 − x) ln(1 − λ)]` with `λ` clamped away from 0 and 1.
pub fn bernoulli_log_likelihood(x: &[f64], probs: &[f64]) -> Result<f64> {
    check_unit_interval(x)?;
    if x.len() != probs.len() {
        return Err(Error::InvalidInput("bernoulli: length mismatch".into()));
    }
    Ok(x.iter()
        .zip(probs)
        .map(|(&xi, &p)| {
            let p = p.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
            xi * p.ln() + (1.0 - xi) * (1.0 - p).ln()
        })
        .sum())
}

/// `Σ [−½ ln(2πσ²) − (x − μ)²/(2σ²)]`, `σ² = exp(obs_log_var)`.
pub fn gaussian_log_likelihood(x: &[f64], mean: &[f64], obs_log_var: f64) -> f64 {
    let var = obs_log_var.exp();
    x.iter()
        .zip(mean)
        .map(|(&xi, &m)| -0.5 * (LN_2PI + obs_log_var) - (xi - m).powi(2) / (2.0 * var))
        .sum()
}

/// Bin `[(k − ½)/255, (k + ½)/255]` of grid value `x = k/255`; the outermost
/// bins extend to ±∞. Fails when `x` is not on the 256-level grid.
pub fn pixel_bin(x: f64) -> Result<(f64, f64)> {
    let k = (x * 255.0).round();
    if !(0.0..=255.0).contains(&k) || (x * 255.0 - k).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("value {x} is not on the 256-level grid")));
    }
    let lo = if k == 0.0 { f64::NEG_INFINITY } else { (k - 0.5) / 255.0 };
    let hi = if k == 255.0 { f64::INFINITY } else { (k + 0.5) / 255.0 };
    Ok((lo, hi))
}

/// `Σ ln[Φ((b₊ − μ)/σ) − Φ((b₋ − μ)/σ)]` over the pixel bins of `x`.
pub fn quantized_gaussian_log_likelihood(x: &[f64], mean: &[f64], obs_log_var: f64) -> Result<f64> {
    let sigma = (0.5 * obs_log_var).exp();
    x.iter().zip(mean).try_fold(0.0, |acc, (&xi, &m)| {
        let (lo, hi) = pixel_bin(xi)?;
        let p = graph::bin_probability((lo - m) / sigma, (hi - m) / sigma);
        Ok(acc + p.max(graph::LOG_FLOOR).ln())
    })
}

// ── graph builders ───────────────────────────────────────────────────

/// Per-row `KL(N(mean, exp(log_var)) ‖ N(shift·1, I))`, shape `[rows]`.
pub fn kl_rows(g: &mut Graph<'_>, mean: Var, log_var: Var, shift: f64) -> MathResult<Var> {
    let var = g.exp(log_var)?;
    let centred = if shift == 0.0 { mean } else { g.add_const(mean, -shift)? };
    let sq = g.square(centred)?;
    let t = g.add(var, sq)?;
    let t = g.sub(t, log_var)?;
    let t = g.add_const(t, -1.0)?;
    let s = g.sum_last_axis(t)?;
    g.scale(s, 0.5)
}

/// Reparameterized sample with externally drawn `eps`.
pub fn reparameterize_rows(g: &mut Graph<'_>, mean: Var, log_var: Var, eps: Tensor) -> MathResult<Var> {
    let half = g.scale(log_var, 0.5)?;
    let std = g.exp(half)?;
    let e = g.constant(eps);
    let noise = g.mul(std, e)?;
    g.add(mean, noise)
}

/// Per-row Bernoulli log-likelihood of `x` under means `probs`.
pub fn bernoulli_ll_rows(g: &mut Graph<'_>, x: Var, probs: Var) -> MathResult<Var> {
    let p = g.clamp(probs, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)?;
    let log_p = g.log(p)?;
    let one_minus_p = g.scale(p, -1.0)?;
    let one_minus_p = g.add_const(one_minus_p, 1.0)?;
    let log_q = g.log(one_minus_p)?;
    let one_minus_x = g.scale(x, -1.0)?;
    let one_minus_x = g.add_const(one_minus_x, 1.0)?;
    let a = g.mul(x, log_p)?;
    let b = g.mul(one_minus_x, log_q)?;
    let s = g.add(a, b)?;
    g.sum_last_axis(s)
}

/// Per-row Gaussian log-likelihood with a scalar `obs_log_var` node.
pub fn gaussian_ll_rows(g: &mut Graph<'_>, x: Var, mean: Var, obs_log_var: Var) -> MathResult<Var> {
    let d = g.value(x).cols() as f64;
    let diff = g.sub(x, mean)?;
    let sq = g.square(diff)?;
    let neg_lv = g.neg(obs_log_var)?;
    let inv_var = g.exp(neg_lv)?;
    let scaled = g.mul(sq, inv_var)?;
    let rows = g.sum_last_axis(scaled)?;
    let rows = g.scale(rows, -0.5)?;
    // −½·D·(ln 2π + log σ²), shared by every row
    let norm = g.add_const(obs_log_var, LN_2PI)?;
    let norm = g.scale(norm, -0.5 * d)?;
    g.add(rows, norm)
}

/// Per-row quantized-Gaussian log-likelihood of grid-valued `x`.
pub fn quantized_gaussian_ll_rows(g: &mut Graph<'_>, x: &Tensor, mean: Var, obs_log_var: Var) -> Result<Var> {
    if x.shape() != g.value(mean).shape() {
        return Err(Error::InvalidInput("quantized gaussian: x/mean shape mismatch".into()));
    }
    let edges = x.data().iter().map(|&v| pixel_bin(v)).collect::<Result<Vec<_>>>()?;
    let lp = g.gaussian_bin_log_prob(mean, obs_log_var, edges)?;
    Ok(g.sum_last_axis(lp)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{finite_difference, grads_close};

    #[test]
    fn kl_closed_form_examples() {
        let q = DiagGaussian::standard(3);
        assert_eq!(kl_diag_gaussian_to_shifted_standard(&q, 0.0), 0.0);
        let q = DiagGaussian::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(kl_diag_gaussian_to_shifted_standard(&q, 0.0), 0.5);
        let q = DiagGaussian::standard(10);
        assert_eq!(kl_diag_gaussian_to_shifted_standard(&q, 8.0), 320.0);
        assert_eq!(NegativePrior::new(8.0, 10).kl_to_standard(), 320.0);
    }

    #[test]
    fn kl_monte_carlo_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let q = DiagGaussian::standard(4);
        let est = kl_monte_carlo(&q, 0.0, n, &mut rng).unwrap();
        // log q − log p is identically zero here
        assert_eq!(est.mean, 0.0);
        let q = DiagGaussian::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let est = kl_monte_carlo(&q, 0.0, n, &mut rng).unwrap();
        assert!((est.mean - 0.5).abs() <= 3.0 * est.std_err, "{est:?}");
        let q = DiagGaussian::standard(10);
        let est = kl_monte_carlo(&q, 8.0, n, &mut rng).unwrap();
        assert!((est.mean - 320.0).abs() <= 3.0 * est.std_err, "{est:?}");
        assert!(kl_monte_carlo(&q, 8.0, 0, &mut rng).is_err());
    }

    #[test]
    fn kl_is_zero_only_at_the_prior() {
        let at = DiagGaussian::new(vec![2.5; 3], vec![0.0; 3]).unwrap();
        assert!(kl_diag_gaussian_to_shifted_standard(&at, 2.5).abs() <= 1e-12);
        let off = DiagGaussian::new(vec![2.5, 2.5, 2.5 + 1e-3], vec![0.0; 3]).unwrap();
        assert!(kl_diag_gaussian_to_shifted_standard(&off, 2.5) > 1e-12);
        let wide = DiagGaussian::new(vec![2.5; 3], vec![0.0, 0.0, 1e-2]).unwrap();
        assert!(kl_diag_gaussian_to_shifted_standard(&wide, 2.5) > 1e-12);
    }

    #[test]
    fn negative_prior_kl_grows_with_dim() {
        let mut prev = 0.0;
        for d in 1..=512 {
            let p = NegativePrior::new(8.0, d);
            let kl = kl_diag_gaussian_to_shifted_standard(&DiagGaussian::standard(d), 8.0);
            assert_eq!(kl, p.kl_to_standard());
            assert!(kl > prev);
            prev = kl;
        }
    }

    #[test]
    fn log_var_is_clamped() {
        let q = DiagGaussian::new(vec![0.0, 0.0], vec![-100.0, 100.0]).unwrap();
        assert_eq!(q.log_var, vec![LOG_VAR_MIN, LOG_VAR_MAX]);
        assert!(DiagGaussian::new(vec![0.0], vec![f64::NAN]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let q = DiagGaussian::new(vec![1.0, -2.0], vec![0.3, 1.0]).unwrap();
        assert_eq!(reparameterize_with(&q, &[0.0, 0.0]), q.mean);
        let tight = DiagGaussian::new(vec![1.0, -2.0], vec![2.0 * 1e-6f64.ln(); 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = reparameterize(&tight, &mut rng);
        assert!(z.iter().zip(&tight.mean).all(|(a, b)| (a - b).abs() < 1e-5));

        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let z = reparameterize(&q, &mut rng);
            sums[0] += z[0];
            sums[1] += z[1];
        }
        for (i, sum) in sums.iter().enumerate() {
            let sd = (0.5 * q.log_var[i]).exp();
            assert!((sum / n as f64 - q.mean[i]).abs() < 4.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn bernoulli_examples() {
        let v = bernoulli_log_likelihood(&[1.0], &[1.0 - 1e-7]).unwrap();
        assert!((v + 1e-7).abs() < 1e-12);
        let v = bernoulli_log_likelihood(&[0.5], &[0.5]).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
        assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        let v = bernoulli_log_likelihood(&[1.0, 0.0], &[0.8, 0.2]).unwrap();
        assert!((v - 2.0 * 0.8f64.ln()).abs() < 1e-15);
        assert!((v + 0.446287).abs() < 1e-6);
        assert!(bernoulli_log_likelihood(&[1.2], &[0.5]).is_err());
        assert!(bernoulli_log_likelihood(&[-0.1], &[0.5]).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let v = gaussian_log_likelihood(&[0.3], &[0.3], 0.0);
        assert!((v + 0.918939).abs() < 1e-6);
        let v = gaussian_log_likelihood(&[1.3], &[0.3], 0.0);
        assert!((v + 1.418939).abs() < 1e-6);
        let a = gaussian_log_likelihood(&[0.1, 0.9], &[0.7, -0.2], 0.4);
        let b = gaussian_log_likelihood(&[0.7, -0.2], &[0.1, 0.9], 0.4);
        assert_eq!(a, b);
    }

    /// Composite Simpson quadrature of the standard normal density, used as
    /// an oracle independent of `erfc`.
    fn normal_mass(a: f64, b: f64) -> f64 {
        let n = 2000;
        let h = (b - a) / n as f64;
        let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn quantized_gaussian_examples() {
        // interior bin at x = 1/255 with μ = 1/255 has the same mass as the
        // bin [−1/510, 1/510] under N(0, 1)
        let x = 1.0 / 255.0;
        let v = quantized_gaussian_log_likelihood(&[x], &[x], 0.0).unwrap();
        let oracle = normal_mass(-1.0 / 510.0, 1.0 / 510.0);
        assert!((v - oracle.ln()).abs() < 1e-7);
        assert!((v + 6.4602).abs() < 1e-4, "{v}");

        // the 256 bins partition the real line
        for (mu, lv) in [(0.3, 0.0), (-0.5, -2.0), (1.4, 1.0), (0.5, -6.0)] {
            let total: f64 = (0..PIXEL_LEVELS)
                .map(|k| quantized_gaussian_log_likelihood(&[k as f64 / 255.0], &[mu], lv).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }

        // flat-density limit
        let lv = 2.0 * 1e3f64.ln();
        let p = |k: usize| quantized_gaussian_log_likelihood(&[k as f64 / 255.0], &[0.5], lv).unwrap().exp();
        let p1 = p(1);
        for k in [2, 50, 128, 200, 254] {
            assert!((p(k) / p1 - 1.0).abs() < 1e-3);
        }

        assert!(quantized_gaussian_log_likelihood(&[0.5], &[0.5], 0.0).is_err());
    }

    fn graph_ll(kind: NoiseKind, x: &Tensor, mean: &Tensor, lv: &Tensor) -> MathResult<(f64, Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let vm = g.param(mean, true);
        let vlv = g.param(lv, true);
        let vx = g.leaf(x);
        let rows = match kind {
            NoiseKind::Bernoulli => {
                let p = g.sigmoid(vm)?;
                bernoulli_ll_rows(&mut g, vx, p)?
            }
            NoiseKind::Gaussian => gaussian_ll_rows(&mut g, vx, vm, vlv)?,
            NoiseKind::QuantizedGaussian => quantized_gaussian_ll_rows(&mut g, x, vm, vlv).unwrap(),
        };
        let s = g.sum(rows)?;
        let grads = g.backward_scalar(s)?;
        let gm = grads.get(vm).unwrap().to_vec();
        let glv = grads.get(vlv).map(<[f64]>::to_vec).unwrap_or(vec![0.0]);
        Ok((g.value(s).item(), gm, glv))
    }

    #[test]
    fn graph_likelihoods_match_scalar_versions_and_gradients() {
        let x = Tensor::from_rows(&[vec![0.0, 10.0 / 255.0, 1.0], vec![128.0 / 255.0, 1.0, 3.0 / 255.0]]).unwrap();
        let mean = Tensor::from_rows(&[vec![0.1, -0.2, 0.9], vec![0.4, 1.3, 0.05]]).unwrap();
        let lv = Tensor::scalar(-1.3);
        for kind in [NoiseKind::Bernoulli, NoiseKind::Gaussian, NoiseKind::QuantizedGaussian] {
            let (v, gm, glv) = graph_ll(kind, &x, &mean, &lv).unwrap();
            let reference: f64 = (0..2)
                .map(|r| match kind {
                    NoiseKind::Bernoulli => {
                        let p: Vec<f64> = mean.row(r).iter().map(|&m| graph::sigmoid(m)).collect();
                        bernoulli_log_likelihood(x.row(r), &p).unwrap()
                    }
                    NoiseKind::Gaussian => gaussian_log_likelihood(x.row(r), mean.row(r), lv.item()),
                    NoiseKind::QuantizedGaussian => {
                        quantized_gaussian_log_likelihood(x.row(r), mean.row(r), lv.item()).unwrap()
                    }
                })
                .sum();
            assert!((v - reference).abs() < 1e-12, "{kind:?}");
            let fm = finite_difference(|m| graph_ll(kind, &x, m, &lv).map(|r| r.0), &mean, 1e-5).unwrap();
            grads_close(&gm, fm.data(), 1e-5, 1e-7).unwrap();
            if kind != NoiseKind::Bernoulli {
                let fl = finite_difference(|l| graph_ll(kind, &x, &mean, l).map(|r| r.0), &lv, 1e-5).unwrap();
                grads_close(&glv, fl.data(), 1e-5, 1e-7).unwrap();
            }
        }
    }

    #[test]
    fn graph_kl_matches_closed_form_and_gradients() {
        let mean = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap();
        let lv = Tensor::from_rows(&[vec![-0.4, 0.8], vec![0.1, -1.5]]).unwrap();
        let run = |m: &Tensor, l: &Tensor| -> MathResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let mut g = Graph::new();
            let (vm, vl) = (g.param(m, true), g.param(l, true));
            let k = kl_rows(&mut g, vm, vl, 3.0)?;
            let rows = g.value(k).data().to_vec();
            let s = g.sum(k)?;
            let gr = g.backward_scalar(s)?;
            Ok((rows, gr.get(vm).unwrap().to_vec(), gr.get(vl).unwrap().to_vec()))
        };
        let (rows, gm, gl) = run(&mean, &lv).unwrap();
        for (r, row) in rows.iter().enumerate() {
            let q = DiagGaussian::new(mean.row(r).to_vec(), lv.row(r).to_vec()).unwrap();
            assert!((row - kl_diag_gaussian_to_shifted_standard(&q, 3.0)).abs() < 1e-12);
        }
        let total = |m: &Tensor, l: &Tensor| run(m, l).map(|r| r.0.iter().sum());
        let fm = finite_difference(|m| total(m, &lv), &mean, 1e-5).unwrap();
        let fl = finite_difference(|l| total(&mean, l), &lv, 1e-5).unwrap();
        grads_close(&gm, fm.data(), 1e-5, 1e-7).unwrap();
        grads_close(&gl, fl.data(), 1e-5, 1e-7).unwrap();
    }
}
