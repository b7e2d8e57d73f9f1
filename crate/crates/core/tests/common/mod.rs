//! Oracles shared by the integration tests and the acceptance runner. Each
//! check returns a one-line detail on success and a diagnostic on failure.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use negvae::config::RunConfig;
use negvae::distributions::{
    self, kl_diag_gaussian_to_shifted_standard, kl_monte_carlo, kl_rows, reparameterize_rows, DiagGaussian,
    NoiseKind, NoiseModel,
};
use negvae::eval::{self, EvalReport};
use negvae::gradcheck::{finite_difference, grads_close};
use negvae::model::{ModelConfig, ModelVars, Scope, VaeModel};
use negvae::negative::{
    generated_batch, generator_loss_graph, joint_loss, joint_loss_graph, LossConfig, LossNoise, NegativeBatch,
    SampleKind,
};
use negvae::nn::{Activation, DenseLayer, DenseVars};
use negvae::run;
use negvae::{Graph, MathResult, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-7;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(what: &str, analytic: &[f64], numeric: &Tensor) -> Result<(), String> {
    grads_close(analytic, numeric.data(), REL_TOL, ABS_TOL).map_err(|e| format!("{what}: {e}"))
}

fn fd<F: FnMut(&Tensor) -> MathResult<f64>>(what: &str, f: F, at: &Tensor) -> Result<Tensor, String> {
    finite_difference(f, at, FD_STEP).map_err(|e| format!("{what}: {e}"))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-2.0..2.0);
            if positive {
                v.abs() + 0.1
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Rows of values on the 256-level pixel grid.
pub fn grid_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| f64::from(r.random_range(0u8..=255)) / 255.0).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

// ── gradient integrity ───────────────────────────────────────────────

type Build = fn(&mut Graph, Var, Var) -> MathResult<Var>;

type OpCase = (&'static str, Build, Vec<usize>, Vec<usize>, bool);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |g, a, b| g.matmul(a, b), vec![3, 4], vec![4, 2], false),
        ("add", |g, a, b| g.add(a, b), vec![3, 4], vec![3, 4], false),
        ("add_row", |g, a, b| g.add(a, b), vec![3, 4], vec![4], false),
        ("add_scalar", |g, a, b| g.add(a, b), vec![3, 4], vec![], false),
        ("sub", |g, a, b| g.sub(a, b), vec![3, 4], vec![3, 4], false),
        ("sub_row", |g, a, b| g.sub(a, b), vec![3, 4], vec![4], false),
        ("mul", |g, a, b| g.mul(a, b), vec![3, 4], vec![3, 4], false),
        ("mul_row", |g, a, b| g.mul(a, b), vec![3, 4], vec![4], false),
        ("mul_scalar", |g, a, b| g.mul(a, b), vec![3, 4], vec![], false),
        ("exp", |g, a, _| g.exp(a), vec![3, 4], vec![1], false),
        ("log", |g, a, _| g.log(a), vec![3, 4], vec![1], true),
        ("square", |g, a, _| g.square(a), vec![3, 4], vec![1], false),
        ("neg", |g, a, _| g.neg(a), vec![3, 4], vec![1], false),
        ("scale", |g, a, _| g.scale(a, -1.7), vec![3, 4], vec![1], false),
        ("add_const", |g, a, _| g.add_const(a, 0.3), vec![3, 4], vec![1], false),
        ("sum", |g, a, _| g.sum(a), vec![3, 4], vec![1], false),
        ("mean", |g, a, _| g.mean(a), vec![3, 4], vec![1], false),
        ("sum_last_axis", |g, a, _| g.sum_last_axis(a), vec![3, 4], vec![1], false),
        ("sigmoid", |g, a, _| g.sigmoid(a), vec![3, 4], vec![1], false),
        ("softplus", |g, a, _| g.softplus(a), vec![3, 4], vec![1], false),
        ("tanh", |g, a, _| g.tanh(a), vec![3, 4], vec![1], false),
        ("relu", |g, a, _| g.relu(a), vec![3, 4], vec![1], false),
        ("clamp", |g, a, _| g.clamp(a, -1.0, 1.0), vec![3, 4], vec![1], false),
        ("slice_last", |g, a, _| g.slice_last(a, 1, 3), vec![3, 4], vec![1], false),
        ("concat_last", |g, a, b| g.concat_last(&[a, b, a]), vec![3, 4], vec![3, 2], false),
        (
            "gaussian_bin_log_prob",
            |g, a, b| {
                let edges = vec![
                    (f64::NEG_INFINITY, 0.1),
                    (-0.3, 0.2),
                    (0.5, 0.9),
                    (1.0, f64::INFINITY),
                    (-1.2, -0.4),
                    (0.0, 0.05),
                ];
                g.gaussian_bin_log_prob(a, b, edges)
            },
            vec![2, 3],
            vec![],
            false,
        ),
    ]
}

fn check_op(name: &str, build: Build, sa: &[usize], sb: &[usize], positive: bool, r: &mut ChaCha8Rng) -> Result<(), String> {
    let a = random_tensor(r, sa, positive);
    let b = random_tensor(r, sb, positive);
    // a random projection makes the scalar depend on every output element
    let eval = |a: &Tensor, b: &Tensor, w: Option<&Tensor>| -> MathResult<(f64, Vec<f64>, Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a), g.leaf(b));
        let out = build(&mut g, va, vb)?;
        let out_val = g.value(out).clone();
        let Some(w) = w else { return Ok((0.0, vec![], vec![], out_val)) };
        let vw = g.leaf(w);
        let prod = g.mul(out, vw)?;
        let s = g.sum(prod)?;
        let grads = g.backward_scalar(s)?;
        let ga = grads.get(va).map_or(vec![0.0; a.numel()], <[f64]>::to_vec);
        let gb = grads.get(vb).map_or(vec![0.0; b.numel()], <[f64]>::to_vec);
        Ok((g.value(s).item(), ga, gb, out_val))
    };
    let a = a.with_requires_grad(true);
    let b = b.with_requires_grad(true);
    let shape = eval(&a, &b, None).map_err(|e| format!("{name}: {e}"))?.3;
    let w = random_tensor(r, shape.shape(), false);
    let (_, ga, gb, _) = eval(&a, &b, Some(&w)).map_err(|e| format!("{name}: {e}"))?;
    let fa = fd(name, |x| eval(x, &b, Some(&w)).map(|r| r.0), &a)?;
    let fb = fd(name, |x| eval(&a, x, Some(&w)).map(|r| r.0), &b)?;
    close(&format!("{name} lhs"), &ga, &fa)?;
    close(&format!("{name} rhs"), &gb, &fb)
}

/// Every graph op against central differences, `trials` random draws each.
pub fn check_ops(trials: usize) -> Check {
    let mut r = rng(17);
    let cases = op_cases();
    for (name, build, sa, sb, positive) in &cases {
        for _ in 0..trials {
            check_op(name, *build, sa, sb, *positive, &mut r)?;
        }
    }
    Ok(format!("{} ops × {trials} draws", cases.len()))
}

/// Dense layers for every activation, with and without spectral norm.
pub fn check_layers() -> Check {
    let acts = [
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Softplus,
        Activation::Identity,
    ];
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 0.2, 1.5], vec![-0.3, 0.8, -1.1, 0.0], vec![1.0, 1.0, -1.0, 0.4]]).unwrap();
    for act in acts {
        for spectral in [false, true] {
            let mut l = DenseLayer::new(4, 3, act);
            l.init(&mut rng(5));
            l.bias.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
            l.set_spectral_norm(spectral).map_err(|e| e.to_string())?;
            let loss = |w: &Tensor, b: &Tensor| -> MathResult<(f64, Vec<f64>, Vec<f64>)> {
                let mut g = Graph::new();
                let vars = DenseVars {
                    weights: g.param(w, true),
                    bias: g.param(b, true),
                };
                let vx = g.leaf(&x);
                let y = l.forward(&mut g, vars, vx)?;
                let y2 = g.square(y)?;
                let s = g.sum(y2)?;
                let gr = g.backward_scalar(s)?;
                Ok((g.value(s).item(), gr.get(vars.weights).unwrap().to_vec(), gr.get(vars.bias).unwrap().to_vec()))
            };
            let what = format!("dense {} spectral={spectral}", act.name());
            let (_, gw, gb) = loss(&l.weights, &l.bias).map_err(|e| e.to_string())?;
            close(&what, &gw, &fd(&what, |w| loss(w, &l.bias).map(|r| r.0), &l.weights)?)?;
            close(&what, &gb, &fd(&what, |b| loss(&l.weights, b).map(|r| r.0), &l.bias)?)?;
        }
    }
    Ok("5 activations × spectral on/off".into())
}

/// The three observation likelihoods, w.r.t. decoder output and
/// observation log-variance.
pub fn check_likelihoods() -> Check {
    let x = grid_batch(3, 4, 21);
    let mut r = rng(22);
    for kind in [NoiseKind::Bernoulli, NoiseKind::Gaussian, NoiseKind::QuantizedGaussian] {
        let out = random_tensor(&mut r, &[3, 4], false);
        let lv = Tensor::scalar(-1.3);
        let ll = |out: &Tensor, lv: &Tensor| -> negvae::Result<(f64, Vec<f64>, Vec<f64>)> {
            let mut g = Graph::new();
            let (vo, vl) = (g.param(out, true), g.param(lv, true));
            let vx = g.leaf(&x);
            let rows = match kind {
                NoiseKind::Bernoulli => {
                    let p = g.sigmoid(vo)?;
                    distributions::bernoulli_ll_rows(&mut g, vx, p)?
                }
                NoiseKind::Gaussian => distributions::gaussian_ll_rows(&mut g, vx, vo, vl)?,
                NoiseKind::QuantizedGaussian => distributions::quantized_gaussian_ll_rows(&mut g, &x, vo, vl)?,
            };
            let s = g.sum(rows)?;
            let gr = g.backward_scalar(s)?;
            Ok((
                g.value(s).item(),
                gr.get(vo).unwrap().to_vec(),
                gr.get(vl).map_or(vec![0.0], <[f64]>::to_vec),
            ))
        };
        let value = |o: &Tensor, l: &Tensor| ll(o, l).map(|r| r.0).map_err(|_| negvae::MathError::NonFinite { op: "ll" });
        let what = format!("{} likelihood", kind.name());
        let (_, go, gl) = ll(&out, &lv).map_err(|e| e.to_string())?;
        close(&what, &go, &fd(&what, |o| value(o, &lv), &out)?)?;
        close(&what, &gl, &fd(&what, |l| value(&out, l), &lv)?)?;
    }
    Ok("bernoulli, gaussian, quantized_gaussian".into())
}

/// Closed-form KL to the prior and to the shifted negative prior.
pub fn check_kl() -> Check {
    let mut r = rng(23);
    for shift in [0.0, 3.0, 8.0] {
        let mean = random_tensor(&mut r, &[3, 2], false);
        let lv = random_tensor(&mut r, &[3, 2], false);
        type KlRun = (f64, Vec<f64>, Vec<f64>, Vec<f64>);
        let run = |m: &Tensor, l: &Tensor| -> MathResult<KlRun> {
            let mut g = Graph::new();
            let (vm, vl) = (g.param(m, true), g.param(l, true));
            let k = kl_rows(&mut g, vm, vl, shift)?;
            let rows = g.value(k).data().to_vec();
            let s = g.sum(k)?;
            let gr = g.backward_scalar(s)?;
            Ok((g.value(s).item(), rows, gr.get(vm).unwrap().to_vec(), gr.get(vl).unwrap().to_vec()))
        };
        let (_, rows, gm, gl) = run(&mean, &lv).map_err(|e| e.to_string())?;
        for (i, &row) in rows.iter().enumerate() {
            let q = DiagGaussian::new(mean.row(i).to_vec(), lv.row(i).to_vec()).map_err(|e| e.to_string())?;
            let want = kl_diag_gaussian_to_shifted_standard(&q, shift);
            if (row - want).abs() > 1e-12 {
                return Err(format!("kl row {i} shift {shift}: graph {row} vs closed form {want}"));
            }
        }
        let what = format!("kl shift {shift}");
        close(&what, &gm, &fd(&what, |m| run(m, &lv).map(|r| r.0), &mean)?)?;
        close(&what, &gl, &fd(&what, |l| run(&mean, l).map(|r| r.0), &lv)?)?;
    }
    Ok("shifts 0, 3, 8".into())
}

/// A small model on the toy dimensions (D = 4, d = 2).
pub fn toy_model(kind: NoiseKind, seed: u64, spectral: bool) -> VaeModel {
    let noise = NoiseModel {
        kind,
        obs_log_var: -1.0,
        learn_obs_var: true,
    };
    let mut cfg = ModelConfig::new(4, 2, noise);
    cfg.encoder_hidden = vec![5];
    cfg.decoder_hidden = vec![5];
    let mut m = VaeModel::new(&cfg).unwrap();
    m.init(&mut rng(seed));
    // non-zero biases so every parameter influences the loss
    let mut r = rng(seed + 1000);
    for layer in m.encoder.layers.iter_mut().chain(m.decoder.layers.iter_mut()) {
        layer.bias.data_mut().iter_mut().for_each(|b| *b = r.random_range(-0.3..0.3));
    }
    m.encoder.set_spectral_norm(spectral).unwrap();
    m
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Half {
    Encoder,
    Decoder,
}

fn with_param(model: &VaeModel, half: Half, index: usize, value: &Tensor) -> VaeModel {
    let mut m = model.clone();
    {
        let mut params = match half {
            Half::Encoder => m.encoder_params_mut(),
            Half::Decoder => m.decoder_params_mut(),
        };
        params[index].data_mut().copy_from_slice(value.data());
    }
    m
}

fn param_values(model: &VaeModel, half: Half) -> Vec<Tensor> {
    let mut m = model.clone();
    let params = match half {
        Half::Encoder => m.encoder_params_mut(),
        Half::Decoder => m.decoder_params_mut(),
    };
    params.into_iter().map(|t| t.clone()).collect()
}

/// Compares the gradients of `analytic` (built on the model as bound to the
/// graph) with central differences of `value` over every parameter.
fn check_model_objective<A, V>(what: &str, model: &VaeModel, analytic: A, value: V) -> Result<usize, String>
where
    A: for<'a> Fn(&'a VaeModel, &mut Graph<'a>, &ModelVars) -> negvae::Result<Var>,
    V: Fn(&VaeModel) -> negvae::Result<f64>,
{
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Scope::Both);
    let loss = analytic(model, &mut g, &vars).map_err(|e| format!("{what}: {e}"))?;
    let base = g.value(loss).item();
    let direct = value(model).map_err(|e| format!("{what}: {e}"))?;
    if (base - direct).abs() > 1e-12 * base.abs().max(1.0) {
        return Err(format!("{what}: graph value {base} vs evaluated {direct}"));
    }
    let grads = g.backward_scalar(loss).map_err(|e| format!("{what}: {e}"))?;
    let mut checked = 0;
    for (half, analytic) in [
        (Half::Encoder, model.encoder_grads(&grads, &vars)),
        (Half::Decoder, model.decoder_grads(&grads, &vars)),
    ] {
        for (i, (p, ga)) in param_values(model, half).iter().zip(&analytic).enumerate() {
            let f = |t: &Tensor| {
                value(&with_param(model, half, i, t)).map_err(|_| negvae::MathError::NonFinite { op: "objective" })
            };
            let label = format!("{what} {} param {i}", if half == Half::Encoder { "encoder" } else { "decoder" });
            close(&label, ga, &fd(&label, f, p)?)?;
            checked += p.numel();
        }
    }
    Ok(checked)
}

/// Generator objective with the snapping offset of the quantized model held
/// fixed at `delta` and pixel bins fixed at `xhat_bins`, written out term by
/// term; its gradient is what the straight-through estimator promises.
#[allow(clippy::too_many_arguments)]
fn generator_surrogate<'a>(
    model: &'a VaeModel,
    g: &mut Graph<'a>,
    vars: &ModelVars,
    x: &Tensor,
    z: &Tensor,
    frozen: Option<(&Tensor, &Tensor)>,
    noise: &LossNoise,
    cfg: &LossConfig,
) -> negvae::Result<Var> {
    let vx = g.constant(x.clone());
    let rows = model.elbo_rows(g, vars, vx, noise.eps_pos.clone())?;
    let elbo = g.mean(rows.elbo)?;
    let mut loss = g.neg(elbo)?;
    let vz = g.constant(z.clone());
    let out = model.decode_graph(g, vars, vz)?;
    let xhat = match (model.noise.kind, frozen) {
        (NoiseKind::Bernoulli, _) => out,
        (_, None) => g.clamp(out, 0.0, 1.0)?,
        (_, Some((delta, _))) => {
            let c = g.clamp(out, 0.0, 1.0)?;
            let d = g.constant(delta.clone());
            g.add(c, d)?
        }
    };
    let (mean, log_var) = model.encode_graph(g, vars, xhat)?;
    let kl_neg = kl_rows(g, mean, log_var, cfg.shift)?;
    let kl_neg = g.mean(kl_neg)?;
    loss = g.add(loss, kl_neg)?;
    if cfg.alpha > 0.0 {
        let zn = reparameterize_rows(g, mean, log_var, noise.eps_neg.clone().unwrap())?;
        let dec = model.decode_graph(g, vars, zn)?;
        let recon = match frozen {
            Some((_, bins)) => distributions::quantized_gaussian_ll_rows(g, bins, dec, vars.obs_log_var)?,
            None => model.recon_rows(g, vars, xhat, dec)?,
        };
        let recon = g.mean(recon)?;
        let recon = g.scale(recon, -cfg.alpha)?;
        loss = g.add(loss, recon)?;
    }
    let kl_gen = kl_rows(g, mean, log_var, 0.0)?;
    let kl_gen = g.mean(kl_gen)?;
    Ok(g.add(loss, kl_gen)?)
}

/// Full joint objective (no negatives, auxiliary and generated negatives,
/// α ∈ {0, 1}) and the generator objective, for all three noise models.
pub fn check_losses() -> Check {
    let x = grid_batch(3, 4, 31);
    let aux = grid_batch(3, 4, 32);
    let mut total = 0;
    for (k, kind) in [NoiseKind::Bernoulli, NoiseKind::Gaussian, NoiseKind::QuantizedGaussian]
        .into_iter()
        .enumerate()
    {
        for alpha in [0.0, 1.0] {
            let cfg = LossConfig {
                shift: 3.0,
                alpha,
                ..LossConfig::default()
            };
            let mut r = rng(40 + k as u64);
            let plain = toy_model(kind, 7 + k as u64, false);
            let noise = LossNoise::draw(3, 3, 2, &cfg, &mut r);
            let aux_batch = NegativeBatch {
                samples: aux.clone(),
                kind: SampleKind::Auxiliary,
                detached: true,
                latents: None,
            };
            for neg in [None, Some(&aux_batch)] {
                let what = format!("{} joint α={alpha} negatives={}", kind.name(), neg.is_some());
                total += check_model_objective(
                    &what,
                    &plain,
                    |m, g, vars| {
                        let vx = g.constant(x.clone());
                        let vn = neg.map(|n| g.constant(n.samples.clone()));
                        Ok(joint_loss_graph(m, g, vars, vx, vn, &noise, &cfg)?.0.loss)
                    },
                    |m| joint_loss(m, &x, neg, &cfg, &noise),
                )?;
            }

            // adversarial scheme: spectrally normalized encoder, generated negatives
            let adv_cfg = LossConfig { adversarial: true, ..cfg };
            let model = toy_model(kind, 11 + k as u64, true);
            let z = negvae::distributions::standard_normal_tensor(&[3, 2], &mut r);
            let generated = generated_batch(&model, z.clone()).map_err(|e| e.to_string())?;
            let what = format!("{} encoder objective α={alpha}", kind.name());
            total += check_model_objective(
                &what,
                &model,
                |m, g, vars| {
                    let vx = g.constant(x.clone());
                    let vn = g.constant(generated.samples.clone());
                    Ok(joint_loss_graph(m, g, vars, vx, Some(vn), &noise, &adv_cfg)?.0.loss)
                },
                |m| joint_loss(m, &x, Some(&generated), &adv_cfg, &noise),
            )?;

            let what = format!("{} generator objective α={alpha}", kind.name());
            let (delta, bins) = match kind {
                NoiseKind::QuantizedGaussian => {
                    let raw = model.decode(&z).map_err(|e| e.to_string())?;
                    let delta: Vec<f64> = raw
                        .data()
                        .iter()
                        .zip(generated.samples.data())
                        .map(|(&o, &s)| s - o.clamp(0.0, 1.0))
                        .collect();
                    (Some(Tensor::new(raw.shape().to_vec(), delta).unwrap()), Some(generated.samples.clone()))
                }
                _ => (None, None),
            };
            let frozen = delta.as_ref().zip(bins.as_ref());
            total += check_model_objective(
                &what,
                &model,
                |m, g, vars| {
                    let vx = g.constant(x.clone());
                    Ok(generator_loss_graph(m, g, vars, vx, &z, &noise, &adv_cfg)?.loss)
                },
                |m| {
                    let mut g = Graph::new();
                    let vars = m.bind(&mut g, Scope::Frozen);
                    let loss = generator_surrogate(m, &mut g, &vars, &x, &z, frozen, &noise, &adv_cfg)?;
                    Ok(g.value(loss).item())
                },
            )?;
        }
    }
    Ok(format!("{total} parameter coordinates across 24 objectives"))
}

// ── KL oracle ────────────────────────────────────────────────────────

/// Closed-form KL against a Monte-Carlo estimate on random (μ, log σ², c)
/// triples, plus the exact value at q = p̄.
pub fn check_kl_monte_carlo(triples: usize, samples: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 0..triples {
        let d = r.random_range(1..=10);
        let mean = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let log_var = (0..d).map(|_| r.random_range(-2.0..1.5)).collect();
        let shift = r.random_range(0.0..8.0);
        let q = DiagGaussian::new(mean, log_var).map_err(|e| e.to_string())?;
        let closed = kl_diag_gaussian_to_shifted_standard(&q, shift);
        let mc = kl_monte_carlo(&q, shift, samples, &mut r).map_err(|e| e.to_string())?;
        let z = (closed - mc.mean).abs() / mc.std_err;
        worst = worst.max(z);
        if z > 3.0 {
            return Err(format!(
                "triple {t} (d={d}, c={shift:.3}): closed form {closed} vs MC {} ± {} ({z:.2} s.e.)",
                mc.mean, mc.std_err
            ));
        }
    }
    let at_prior = kl_diag_gaussian_to_shifted_standard(&DiagGaussian::shifted_standard(10, 8.0), 0.0);
    if at_prior != 320.0 {
        return Err(format!("KL(N(8·1, I) ‖ N(0, I)) at d = 10 is {at_prior}, expected 320"));
    }
    Ok(format!("{triples} triples, worst {worst:.2} s.e.; d=10 c=8 → 320"))
}

// ── AUC oracle ───────────────────────────────────────────────────────

/// `P(ood > inlier) + ½ P(tie)` by counting every pair.
pub fn brute_force_auc(inlier: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in inlier {
        for &b in ood {
            twice += match b.partial_cmp(&a).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * inlier.len() * ood.len()) as f64
}

pub fn check_auc(pairs: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for p in 0..pairs {
        let levels = r.random_range(1..=60);
        let draw = |r: &mut ChaCha8Rng| {
            let n = r.random_range(1..=500);
            (0..n).map(|_| f64::from(r.random_range(0..levels)) * 0.25).collect::<Vec<_>>()
        };
        let a = draw(&mut r);
        let b = draw(&mut r);
        let fast = eval::auc(&a, &b).map_err(|e| e.to_string())?;
        let slow = brute_force_auc(&a, &b);
        if fast != slow {
            return Err(format!("pair {p} ({}×{}): rank AUC {fast} vs pair count {slow}", a.len(), b.len()));
        }
    }
    Ok(format!("{pairs} random pairs, exact equality"))
}

// ── upper bound ──────────────────────────────────────────────────────

/// Checks `joint(α=0) = −mean ELBO + mean KL_neg ≥ −mean ELBO` on random
/// models, and equality when negatives map exactly onto the negative prior.
pub fn check_bound(models: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let kinds = [NoiseKind::Bernoulli, NoiseKind::Gaussian, NoiseKind::QuantizedGaussian];
    let cfg = LossConfig::default();
    for i in 0..models {
        let kind = kinds[i % 3];
        let (dim, d, n, m) = (r.random_range(2..12), r.random_range(1..5), r.random_range(1..6), r.random_range(1..6));
        let mut mc = ModelConfig::new(dim, d, NoiseModel { kind, obs_log_var: r.random_range(-3.0..1.0), learn_obs_var: true });
        mc.encoder_hidden = vec![r.random_range(2..10)];
        mc.decoder_hidden = vec![r.random_range(2..10)];
        let mut model = VaeModel::new(&mc).map_err(|e| e.to_string())?;
        model.init(&mut r);
        let x = grid_batch(n, dim, r.random());
        let neg = NegativeBatch {
            samples: grid_batch(m, dim, r.random()),
            kind: SampleKind::Auxiliary,
            detached: true,
            latents: None,
        };
        let noise = LossNoise::draw(n, m, d, &cfg, &mut r);
        let (gap, kl_neg) = check_bound_case(&model, &x, &neg, &cfg, &noise).map_err(|e| format!("model {i}: {e}"))?;
        if kl_neg <= 0.0 || gap <= 0.0 {
            return Err(format!("model {i}: KL term {kl_neg} and gap {gap} should both be strictly positive"));
        }

        // encoder that outputs exactly (c·1, 0) for every input
        let last = model.encoder.layers.last_mut().unwrap();
        last.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        for (j, b) in last.bias.data_mut().iter_mut().enumerate() {
            *b = if j < d { cfg.shift } else { 0.0 };
        }
        let (gap, kl_neg) = check_bound_case(&model, &x, &neg, &cfg, &noise).map_err(|e| format!("model {i} at p̄: {e}"))?;
        if kl_neg != 0.0 || gap.abs() > 1e-10 {
            return Err(format!("model {i}: negatives at the negative prior give KL {kl_neg} and gap {gap}"));
        }
    }
    Ok(format!("{models} random models; equality exactly at q = p̄"))
}

/// Returns the gap `joint − (−mean ELBO)` and the mean negative KL after
/// checking that they agree within 1e-10.
fn check_bound_case(
    model: &VaeModel,
    x: &Tensor,
    neg: &NegativeBatch,
    cfg: &LossConfig,
    noise: &LossNoise,
) -> Result<(f64, f64), String> {
    let joint = joint_loss(model, x, Some(neg), cfg, noise).map_err(|e| e.to_string())?;
    let parts = model.elbo_batch_with(x, noise.eps_pos.clone()).map_err(|e| e.to_string())?;
    let neg_elbo = -parts.iter().map(|p| p.elbo).sum::<f64>() / parts.len() as f64;
    let kl_neg: f64 = model
        .encode(&neg.samples)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|q| kl_diag_gaussian_to_shifted_standard(q, cfg.shift))
        .sum::<f64>()
        / neg.len() as f64;
    if joint < neg_elbo - 1e-10 {
        return Err(format!("joint {joint} below −ELBO {neg_elbo}"));
    }
    let gap = joint - neg_elbo;
    if (gap - kl_neg).abs() > 1e-10 * joint.abs().max(1.0) {
        return Err(format!("gap {gap} differs from mean negative KL {kl_neg}"));
    }
    Ok((gap, kl_neg))
}

// ── end-to-end runs ──────────────────────────────────────────────────

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn shipped_config(name: &str) -> RunConfig {
    RunConfig::load(repo_root().join("configs").join(name)).unwrap()
}

/// Trains and evaluates `cfg` in `out`, returning the report and wallclock.
pub fn train_and_evaluate(cfg: &RunConfig, out: &Path) -> negvae::Result<(EvalReport, f64)> {
    let start = Instant::now();
    let report = run::train_and_evaluate(cfg, out)?;
    Ok((report, start.elapsed().as_secs_f64()))
}

/// A two-epoch run on 6×6 synthetic images; takes well under a second.
pub const TINY_CONFIG: &str = "\
data.inlier.images_path = synthetic:bars:200:6:1
data.auxiliary.images_path = synthetic:blobs:200:6:2
data.inlier_test.images_path = synthetic:bars:100:6:3
data.ood.images_path = synthetic:blobs:100:6:4
model.latent_dim = 2
model.encoder_hidden = 16
model.decoder_hidden = 16
train.epochs = 2
train.batch_size = 20
train.lr = 0.001
negative.kind = auxiliary
export.samples = 12
export.grid_cols = 4
";

pub fn tiny_config(overrides: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig::parse(TINY_CONFIG).unwrap();
    for (k, v) in overrides {
        cfg.set(k, v).unwrap();
    }
    cfg
}

/// Metrics CSV without the wallclock column.
pub fn metrics_without_time(text: &str) -> String {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}
