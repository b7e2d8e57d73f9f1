//! End-to-end commands shared by the binary and the tests: train, evaluate,
//! sweep and export, each writing its artifacts into an output directory.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::distributions::NegativePrior;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::negative::NegativeSource;
use crate::tensor::Tensor;
use crate::train::{EpochMetrics, Trainer};

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";
pub const SWEEP_CSV: &str = "summary.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains per `cfg`, writing the resolved config, per-epoch metrics and a
/// checkpoint (refreshed after every epoch) into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<Checkpoint> {
    let train_cfg = cfg.train_config()?;
    let inliers = cfg.load_role("inlier")?;
    let aux = match train_cfg.negative {
        NegativeSource::Auxiliary => Some(cfg.load_role("auxiliary")?),
        _ => None,
    };
    ensure_dir(out)?;
    let resolved = cfg.resolved_text();
    write(&out.join(RESOLVED_CONFIG), &resolved)?;

    let metrics_path = out.join(METRICS_CSV);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{}", EpochMetrics::CSV_HEADER).map_err(|e| Error::io(&metrics_path, e))?;

    let mut trainer = Trainer::new(train_cfg, inliers.dim())?;
    let ckpt_path = out.join(CHECKPOINT);
    trainer.fit(&inliers, aux.as_ref(), |t, m| {
        writeln!(metrics, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        Checkpoint::from_trainer(t, resolved.clone()).save(&ckpt_path)
    })?;
    Ok(Checkpoint::from_trainer(&trainer, resolved))
}

/// Scores the inlier and OOD test sets of `cfg` under the checkpointed model
/// and writes the JSON report and the summary table into `out`.
pub fn evaluate(ckpt: &Checkpoint, cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let eval_cfg = cfg.eval_config()?;
    let mut inlier = cfg.load_role("inlier_test")?;
    let mut ood = cfg.load_role("ood")?;
    inlier.name = cfg.role_label("inlier_test");
    ood.name = cfg.role_label("ood");
    let report = eval::evaluate_pair(&ckpt.model, &inlier, &ood, &eval_cfg)?;
    ensure_dir(out)?;
    write(&out.join(REPORT_JSON), report.to_json())?;
    write(&out.join(REPORT_TABLE), report.table())?;
    Ok(report)
}

/// Train followed by evaluation in the same directory.
pub fn train_and_evaluate(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let ckpt = train(cfg, out)?;
    evaluate(&ckpt, cfg, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Shift,
    LatentDim,
    Alpha,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shift" => Some(SweepAxis::Shift),
            "latent_dim" => Some(SweepAxis::LatentDim),
            "alpha" => Some(SweepAxis::Alpha),
            _ => None,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Shift => "loss.shift",
            SweepAxis::LatentDim => "model.latent_dim",
            SweepAxis::Alpha => "loss.alpha",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Shift => "shift",
            SweepAxis::LatentDim => "latent_dim",
            SweepAxis::Alpha => "alpha",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: Option<EvalReport>,
    /// `KL(N(c·1, I) ‖ N(0, I)) = d·c²/2` of the run's configuration.
    pub kl_neg_prior: Option<f64>,
    pub status: String,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "value,auc_bpd,auc_kl,test_bpd,ood_bpd,kl_neg_prior,status";

    pub fn csv_row(&self) -> String {
        let num = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let r = self.report.as_ref();
        format!(
            "{},{},{},{},{},{},{}",
            self.value,
            num(r.map(|r| r.auc_bpd)),
            num(r.map(|r| r.auc_kl)),
            num(r.map(|r| r.inlier_bpd_summary.mean)),
            num(r.map(|r| r.ood_bpd_summary.mean)),
            num(self.kl_neg_prior),
            self.status
        )
    }
}

fn point_dir(out: &Path, axis: SweepAxis, value: &str) -> PathBuf {
    out.join(format!("{}={value}", axis.name()))
}

fn point_config(base: &RunConfig, axis: SweepAxis, value: &str) -> Result<(RunConfig, Option<f64>)> {
    let mut cfg = base.clone();
    cfg.set(axis.key(), value)?;
    let t = cfg.train_config()?;
    Ok((cfg, Some(NegativePrior::new(t.loss.shift, t.latent_dim).kl_to_standard())))
}

fn status_of(e: &Error) -> String {
    let s = e.to_string().replace([',', '\n'], ";");
    format!("failed: {s}")
}

/// One train+evaluate run per value. Failures are recorded and the sweep
/// continues. With `parallel = Some(exe)` each point runs as a separate
/// `exe run` process.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[String], out: &Path, parallel: Option<&Path>) -> Result<Vec<SweepRow>> {
    ensure_dir(out)?;
    let mut rows = Vec::with_capacity(values.len());
    let mut children = Vec::new();
    for value in values {
        let dir = point_dir(out, axis, value);
        match point_config(base, axis, value) {
            Err(e) => rows.push(SweepRow {
                value: value.clone(),
                report: None,
                kl_neg_prior: None,
                status: status_of(&e),
            }),
            Ok((cfg, kl)) => match parallel {
                None => {
                    let (report, status) = match train_and_evaluate(&cfg, &dir) {
                        Ok(r) => (Some(r), "ok".to_string()),
                        Err(e) => (None, status_of(&e)),
                    };
                    rows.push(SweepRow {
                        value: value.clone(),
                        report,
                        kl_neg_prior: kl,
                        status,
                    });
                }
                Some(exe) => {
                    ensure_dir(&dir)?;
                    let cfg_path = dir.join("point.cfg");
                    write(&cfg_path, cfg.resolved_text())?;
                    let child = Command::new(exe)
                        .arg("run")
                        .arg("--config")
                        .arg(&cfg_path)
                        .arg("--out")
                        .arg(&dir)
                        .spawn()
                        .map_err(|e| Error::io(exe, e))?;
                    children.push((rows.len(), child));
                    rows.push(SweepRow {
                        value: value.clone(),
                        report: None,
                        kl_neg_prior: kl,
                        status: String::new(),
                    });
                }
            },
        }
    }
    for (i, mut child) in children {
        let status = child.wait().map_err(|e| Error::io("sweep child", e))?;
        let row = &mut rows[i];
        let dir = point_dir(out, axis, &row.value);
        row.status = if status.success() {
            match fs::read_to_string(dir.join(REPORT_JSON)).map_err(|e| Error::io(dir.join(REPORT_JSON), e)) {
                Ok(text) => match EvalReport::from_json(&text) {
                    Ok(r) => {
                        row.report = Some(r);
                        "ok".into()
                    }
                    Err(e) => status_of(&e),
                },
                Err(e) => status_of(&e),
            }
        } else {
            format!("failed: exit code {}", status.code().unwrap_or(-1))
        };
    }
    let mut csv = String::from(SweepRow::CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        let _ = writeln!(csv, "{}", row.csv_row());
    }
    write(&out.join(SWEEP_CSV), csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    /// Grid of unconditional samples.
    Samples,
    /// CSV of the first two posterior-mean coordinates.
    Latents,
    /// Grid of `decode(μ(x))` for the auxiliary (or OOD) set.
    Reconstructions,
}

impl ExportKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "samples" => Some(ExportKind::Samples),
            "latents" => Some(ExportKind::Latents),
            "reconstructions" => Some(ExportKind::Reconstructions),
            _ => None,
        }
    }
}

/// Writes the requested export of a checkpointed model to `path`.
pub fn export(ckpt: &Checkpoint, cfg: &RunConfig, what: ExportKind, path: &Path) -> Result<()> {
    let (n, cols) = cfg.export_settings()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_config()?.seed);
    let model = &ckpt.model;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    match what {
        ExportKind::Samples => eval::export_samples(model, n, cols, path, &mut rng),
        ExportKind::Latents => {
            let mut owned = Vec::new();
            for (role, label) in [("inlier_test", "inlier"), ("ood", "ood"), ("auxiliary", "negative")] {
                if cfg.has_role(role) {
                    owned.push((label, cfg.load_role(role)?.images));
                }
            }
            let mut generated = model.generate(n, &mut rng)?;
            generated.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            owned.push(("generated", generated));
            let sets: Vec<(&str, &Tensor)> = owned.iter().map(|(l, t)| (*l, t)).collect();
            eval::export_latents(model, &sets, path)
        }
        ExportKind::Reconstructions => {
            let role = if cfg.has_role("auxiliary") { "auxiliary" } else { "ood" };
            let data = cfg.load_role(role)?;
            let x = data.images.slice_rows(0, n.min(data.len()));
            eval::write_image_grid(&eval::reconstruct(model, &x)?, cols, path)
        }
    }
}

/// Process exit code for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::Data { .. } | Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::NonFiniteLoss { .. } | Error::Math(crate::tensor::MathError::NonFinite { .. }) => 4,
        Error::Math(_) | Error::InvalidInput(_) => 1,
    }
}
