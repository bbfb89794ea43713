//! Multi-head training: configuration, the epoch loop, regularization
//! scheduling, transfer learning against a frozen body, evaluation against
//! the classical oracles, and crash-safe checkpointing.
//!
//! A run is fully described by a [`TrainConfig`]; everything downstream —
//! network initialization, per-epoch collocation sampling, the
//! regularization cadence — derives deterministically from its seed, so two
//! runs with identical configs produce byte-identical records and
//! checkpoints. Per-epoch rows log each head's DE loss, the regularizer
//! when it fires, and the batch sqrt-determinant statistics; the total-loss
//! column is exactly the sum of its parts, in recorded order, which keeps
//! the CSV auditable after the fact. Wall-clock time is quarantined into a
//! separate metadata file so the record itself stays reproducible.

mod checkpoint;
mod engine;
mod eval;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use engine::{resolve_bundle, train_body, transfer, TrainedArtifacts, TransferArtifacts};
pub use eval::{
    evaluate_efe, evaluate_flame, evaluate_vdp, EfeEval, HeadView, OracleKind, TrajectoryEval,
};

use crate::autodiff::AdError;
use crate::nn::Activation;
use crate::optim::OptimError;
use crate::problems::{ProblemError, ProblemKind};
use crate::reference::ReferenceError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    Io(std::io::Error),
    Json(serde_json::Error),
    Ad(AdError),
    Optim(OptimError),
    Problem(ProblemError),
    Reference(ReferenceError),
    Checkpoint(String),
    /// Training hit a non-finite loss or gradient; the most recent cadence
    /// checkpoint (if any) is still on disk.
    NonFinite {
        epoch: usize,
        what: String,
        last_checkpoint: Option<PathBuf>,
    },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "invalid config: {msg}"),
            TrainError::Io(e) => write!(f, "io error: {e}"),
            TrainError::Json(e) => write!(f, "json error: {e}"),
            TrainError::Ad(e) => write!(f, "autodiff error: {e}"),
            TrainError::Optim(e) => write!(f, "optimizer error: {e}"),
            TrainError::Problem(e) => write!(f, "problem error: {e}"),
            TrainError::Reference(e) => write!(f, "reference solver error: {e}"),
            TrainError::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            TrainError::NonFinite {
                epoch,
                what,
                last_checkpoint,
            } => {
                write!(f, "aborted at epoch {epoch}: {what}")?;
                match last_checkpoint {
                    Some(p) => write!(f, "; last checkpoint retained at {}", p.display()),
                    None => write!(f, "; no checkpoint had been written yet"),
                }
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}
impl From<serde_json::Error> for TrainError {
    fn from(e: serde_json::Error) -> Self {
        TrainError::Json(e)
    }
}
impl From<AdError> for TrainError {
    fn from(e: AdError) -> Self {
        TrainError::Ad(e)
    }
}
impl From<OptimError> for TrainError {
    fn from(e: OptimError) -> Self {
        TrainError::Optim(e)
    }
}
impl From<ProblemError> for TrainError {
    fn from(e: ProblemError) -> Self {
        TrainError::Problem(e)
    }
}
impl From<ReferenceError> for TrainError {
    fn from(e: ReferenceError) -> Self {
        TrainError::Reference(e)
    }
}

/// Architecture of one body network: hidden widths, latent (output) width,
/// and activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub activation: Activation,
}

/// Architecture of a head network; input width comes from the body latent,
/// output width from the problem (always 1 here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

/// Unimodular-regularization settings. `every_n` is the epoch cadence; the
/// term applies on epochs divisible by it (including epoch 0). The same
/// cadence drives sqrt-determinant statistics collection even when the
/// penalty itself is disabled, so matched runs stay comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UrConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub every_n: usize,
}

impl Default for UrConfig {
    fn default() -> Self {
        UrConfig {
            enabled: false,
            lambda: 0.0,
            every_n: 100,
        }
    }
}

/// Jacobian-regularization baseline (the ablation alternative to the
/// unimodular term); same cadence semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JrConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub every_n: usize,
}

impl Default for JrConfig {
    fn default() -> Self {
        JrConfig {
            enabled: false,
            lambda: 0.0,
            every_n: 100,
        }
    }
}

/// Synthetic bundle parameters for desk-scale EFE runs: an even temperature
/// grid with entropies from the asymptotic S = pi T^3 law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    /// CSV file with columns (i, T, S); takes precedence when set.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub synthetic_points: Option<usize>,
    #[serde(default)]
    pub t_range: Option<(f64, f64)>,
}

fn default_noise() -> f64 {
    1.0
}
fn default_checkpoint_every() -> usize {
    10_000
}

/// Everything a body-training run needs. Serialize/deserialize round-trips
/// exactly; the config hash is the SHA-256 of the canonical JSON encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub problem: ProblemKind,
    pub seed: u64,
    pub epochs: usize,
    /// Collocation points per epoch along the independent variable.
    pub points: usize,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    pub body: NetConfig,
    pub head: HeadConfig,
    /// EFE only: the potential network's body and head.
    #[serde(default)]
    pub v_body: Option<NetConfig>,
    #[serde(default)]
    pub v_head: Option<HeadConfig>,
    /// Family-parameter values, one head each; defaults to the problem's
    /// standard grid.
    #[serde(default)]
    pub head_grid: Option<Vec<f64>>,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_period: u64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub ur: UrConfig,
    #[serde(default)]
    pub jr: JrConfig,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// EFE only: boundary-condition bundle source.
    #[serde(default)]
    pub bundle: Option<BundleConfig>,
}

/// Empirical operating band for the regularization strength; values
/// outside it are legal but warned about.
pub const LAMBDA_GUARDRAIL: (f64, f64) = (1e-8, 5e-5);

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hard validation; returns human-readable warnings for soft issues
    /// (currently the lambda guardrail).
    pub fn validate(&self) -> Result<Vec<String>, TrainError> {
        let mut warnings = Vec::new();
        let cfg = |msg: String| Err(TrainError::Config(msg));
        if self.points < 2 {
            return cfg(format!("points must be >= 2, got {}", self.points));
        }
        if self.noise_scale < 0.0 {
            return cfg(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        if self.body.latent == 0 || self.body.hidden.iter().any(|&w| w == 0) {
            return cfg("body widths must all be >= 1".into());
        }
        if self.head.hidden.iter().any(|&w| w == 0) {
            return cfg("head widths must all be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return cfg(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return cfg(format!("lr_decay must lie in [0, 1), got {}", self.lr_decay));
        }
        if self.lr_period == 0 {
            return cfg("lr_period must be >= 1".into());
        }
        if self.ur.every_n == 0 || self.jr.every_n == 0 {
            return cfg("regularization cadence must be >= 1".into());
        }
        if self.ur.enabled && self.jr.enabled {
            return cfg("ur and jr are mutually exclusive; ablate one at a time".into());
        }
        if self.ur.enabled && self.ur.lambda < 0.0 {
            return cfg(format!("ur.lambda must be >= 0, got {}", self.ur.lambda));
        }
        if self.jr.enabled && self.jr.lambda < 0.0 {
            return cfg(format!("jr.lambda must be >= 0, got {}", self.jr.lambda));
        }
        if self.checkpoint_every == 0 {
            return cfg("checkpoint_every must be >= 1".into());
        }
        let spec = self.problem.spec();
        if let Some(grid) = &self.head_grid {
            if grid.is_empty() {
                return cfg("head_grid must not be empty".into());
            }
            let (lo, hi) = spec.family_range;
            if grid.iter().any(|v| !v.is_finite() || *v < lo || *v > hi) {
                return cfg(format!(
                    "head_grid values must lie within the training range [{lo}, {hi}]"
                ));
            }
        }
        match self.problem {
            ProblemKind::Efe => {
                if self.v_body.is_none() || self.v_head.is_none() {
                    return cfg("efe requires v_body and v_head".into());
                }
                let b = self.bundle.as_ref();
                let has_source = b.map_or(false, |b| {
                    b.path.is_some() || (b.synthetic_points.is_some() && b.t_range.is_some())
                });
                if !has_source {
                    return cfg(
                        "efe requires a bundle: either a csv path or synthetic_points + t_range"
                            .into(),
                    );
                }
            }
            _ => {
                if self.v_body.is_some() || self.v_head.is_some() {
                    return cfg("v_body/v_head only apply to efe".into());
                }
                if self.bundle.is_some() {
                    return cfg("bundle only applies to efe".into());
                }
            }
        }
        let (g_lo, g_hi) = LAMBDA_GUARDRAIL;
        if self.ur.enabled && !(g_lo..=g_hi).contains(&self.ur.lambda) {
            warnings.push(format!(
                "ur.lambda = {} lies outside the usual operating range [{g_lo}, {g_hi}]",
                self.ur.lambda
            ));
        }
        if self.jr.enabled && !(g_lo..=g_hi).contains(&self.jr.lambda) {
            warnings.push(format!(
                "jr.lambda = {} lies outside the usual operating range [{g_lo}, {g_hi}]",
                self.jr.lambda
            ));
        }
        Ok(warnings)
    }

    /// The effective head grid.
    pub fn grid(&self) -> Vec<f64> {
        self.head_grid
            .clone()
            .unwrap_or_else(|| self.problem.spec().head_grid)
    }

    /// A short label distinguishing sibling runs in file names.
    pub fn run_label(&self) -> &'static str {
        if self.ur.enabled {
            "_ur"
        } else if self.jr.enabled {
            "_jr"
        } else {
            ""
        }
    }
}

/// Transfer-learning settings: the new family-parameter value's training
/// loop. The body stays frozen; only fresh heads train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub seed: u64,
    pub epochs: usize,
    pub points: usize,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_period: u64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// EFE only: boundary-condition bundle for the transfer run.
    #[serde(default)]
    pub bundle: Option<BundleConfig>,
}

impl TransferConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.points < 2 {
            return Err(TrainError::Config(format!(
                "points must be >= 2, got {}",
                self.points
            )));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.lr_decay) || self.lr_period == 0 {
            return Err(TrainError::Config(
                "transfer scheduler wants lr > 0, lr_decay in [0, 1), lr_period >= 1".into(),
            ));
        }
        if self.noise_scale < 0.0 || self.checkpoint_every == 0 {
            return Err(TrainError::Config(
                "noise_scale must be >= 0 and checkpoint_every >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON encoding, as lowercase hex.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Batch statistics of sqrt(det g) on a geometry epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqrtGStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl SqrtGStats {
    pub fn from_values(vals: &[f64]) -> Option<SqrtGStats> {
        if vals.is_empty() {
            return None;
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in vals {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Some(SqrtGStats {
            min,
            mean: sum / vals.len() as f64,
            max,
        })
    }
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub l_de: Vec<f64>,
    /// Regularization term value on epochs where it applied (UR or JR).
    pub l_reg: Option<f64>,
    pub l_tot: f64,
    pub sqrtg: Option<SqrtGStats>,
}

/// The full per-epoch log of one run.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub n_heads: usize,
    pub rows: Vec<EpochRow>,
}

impl RunRecord {
    pub fn new(n_heads: usize) -> Self {
        RunRecord {
            n_heads,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["epoch".to_string(), "lr".to_string()];
        for a in 0..self.n_heads {
            cols.push(format!("l_de_head_{a}"));
        }
        cols.extend(
            ["l_ur", "l_tot", "sqrtg_min", "sqrtg_mean", "sqrtg_max"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols.join(",")
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", self.header())?;
        for row in &self.rows {
            let mut cols = vec![row.epoch.to_string(), row.lr.to_string()];
            for v in &row.l_de {
                cols.push(v.to_string());
            }
            cols.push(row.l_reg.map(|v| v.to_string()).unwrap_or_default());
            cols.push(row.l_tot.to_string());
            match row.sqrtg {
                Some(s) => {
                    cols.push(s.min.to_string());
                    cols.push(s.mean.to_string());
                    cols.push(s.max.to_string());
                }
                None => cols.extend([String::new(), String::new(), String::new()]),
            }
            writeln!(f, "{}", cols.join(","))?;
        }
        Ok(())
    }

    /// Writes just the metric statistics: one row per epoch on which the
    /// sqrt-determinant was sampled.
    pub fn write_geometry_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,sqrtg_min,sqrtg_mean,sqrtg_max")?;
        for row in &self.rows {
            if let Some(s) = row.sqrtg {
                writeln!(f, "{},{},{},{}", row.epoch, s.min, s.mean, s.max)?;
            }
        }
        Ok(())
    }

    /// The last recorded sqrt-determinant statistics; training always samples
    /// the final epoch, so a completed run has them.
    pub fn final_sqrtg(&self) -> Option<SqrtGStats> {
        self.rows.iter().rev().find_map(|r| r.sqrtg)
    }

    /// Checks the row-exact additivity invariant: l_tot equals the sum of
    /// the per-head losses plus the regularizer, in recorded order.
    pub fn additivity_ok(&self, tol: f64) -> bool {
        self.rows.iter().all(|row| {
            let mut acc = 0.0;
            for &v in &row.l_de {
                acc += v;
            }
            if let Some(r) = row.l_reg {
                acc += r;
            }
            (acc - row.l_tot).abs() <= tol
        })
    }

    /// Median of l_tot over a slice of rows, for trend checks.
    pub fn median_l_tot(rows: &[EpochRow]) -> f64 {
        assert!(!rows.is_empty());
        let mut vals: Vec<f64> = rows.iter().map(|r| r.l_tot).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len();
        if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        }
    }
}

/// Run metadata that must not contaminate the deterministic record:
/// wall-clock time, plus provenance for convenience.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub problem: String,
    pub config_hash: String,
    pub completed_epochs: usize,
    pub final_checkpoint: String,
    pub wall_time_s: f64,
}

impl RunMeta {
    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flame_config() -> TrainConfig {
        TrainConfig {
            problem: ProblemKind::Flame,
            seed: 7,
            epochs: 10,
            points: 16,
            noise_scale: 1.0,
            body: NetConfig {
                hidden: vec![8, 8],
                latent: 8,
                activation: Activation::Tanh,
            },
            head: HeadConfig {
                hidden: vec![8],
                activation: Activation::Tanh,
            },
            v_body: None,
            v_head: None,
            head_grid: None,
            lr: 1e-3,
            lr_decay: 0.05,
            lr_period: 15_000,
            clip_norm: None,
            ur: UrConfig {
                enabled: true,
                lambda: 5e-7,
                every_n: 100,
            },
            jr: JrConfig::default(),
            checkpoint_every: 10_000,
            bundle: None,
        }
    }

    #[test]
    fn config_round_trips_and_hashes_stably() {
        let cfg = flame_config();
        let json = serde_json::to_string(&cfg).unwrap();
        let back = TrainConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(config_hash(&cfg), config_hash(&back));
        assert_eq!(config_hash(&cfg).len(), 64);

        let mut other = cfg.clone();
        other.seed = 8;
        assert_ne!(config_hash(&cfg), config_hash(&other));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::to_value(flame_config()).unwrap();
        v["untracked"] = serde_json::json!(1);
        let err = TrainConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, TrainError::Json(_)));
    }

    #[test]
    fn validation_catches_bad_configs() {
        let ok = flame_config();
        assert!(ok.validate().unwrap().is_empty());

        let mut both = ok.clone();
        both.jr.enabled = true;
        assert!(matches!(both.validate(), Err(TrainError::Config(_))));

        let mut zero_n = ok.clone();
        zero_n.ur.every_n = 0;
        assert!(zero_n.validate().is_err());

        let mut grid = ok.clone();
        grid.head_grid = Some(vec![0.5]); // outside [0.02, 0.04]
        assert!(grid.validate().is_err());

        let mut efe_missing = ok.clone();
        efe_missing.problem = ProblemKind::Efe;
        assert!(efe_missing.validate().is_err());

        let mut stray_bundle = ok.clone();
        stray_bundle.bundle = Some(BundleConfig {
            path: None,
            synthetic_points: Some(5),
            t_range: Some((0.8, 1.2)),
        });
        assert!(stray_bundle.validate().is_err());
    }

    #[test]
    fn lambda_guardrail_warns_but_passes() {
        let mut cfg = flame_config();
        cfg.ur.lambda = 1e-3;
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("operating range"));
        // In-range values stay silent.
        cfg.ur.lambda = 5e-7;
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn run_record_csv_layout() {
        let mut rec = RunRecord::new(2);
        rec.rows.push(EpochRow {
            epoch: 0,
            lr: 1e-3,
            l_de: vec![1.5, 2.5],
            l_reg: Some(0.25),
            l_tot: 4.25,
            sqrtg: Some(SqrtGStats {
                min: 1.0,
                mean: 1.5,
                max: 2.0,
            }),
        });
        rec.rows.push(EpochRow {
            epoch: 1,
            lr: 1e-3,
            l_de: vec![1.0, 2.0],
            l_reg: None,
            l_tot: 3.0,
            sqrtg: None,
        });
        assert!(rec.additivity_ok(0.0));
        assert_eq!(
            rec.header(),
            "epoch,lr,l_de_head_0,l_de_head_1,l_ur,l_tot,sqrtg_min,sqrtg_mean,sqrtg_max"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        rec.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0,0.001,1.5,2.5,0.25,4.25,1,1.5,2");
        assert_eq!(lines[2], "1,0.001,1,2,,3,,,");

        // The geometry view keeps only rows that sampled the metric.
        let gpath = dir.path().join("geometry.csv");
        rec.write_geometry_csv(&gpath).unwrap();
        let gtext = std::fs::read_to_string(&gpath).unwrap();
        let glines: Vec<&str> = gtext.lines().collect();
        assert_eq!(glines, ["epoch,sqrtg_min,sqrtg_mean,sqrtg_max", "0,1,1.5,2"]);
        assert_eq!(rec.final_sqrtg().unwrap().mean, 1.5);
    }

    #[test]
    fn sqrtg_stats_summarize() {
        let s = SqrtGStats::from_values(&[1.0, 2.0, 6.0]).unwrap();
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 6.0);
        assert_eq!(s.mean, 3.0);
        assert!(SqrtGStats::from_values(&[]).is_none());
    }

    #[test]
    fn median_handles_even_and_odd() {
        let row = |l: f64| EpochRow {
            epoch: 0,
            lr: 0.0,
            l_de: vec![],
            l_reg: None,
            l_tot: l,
            sqrtg: None,
        };
        let rows: Vec<EpochRow> = [3.0, 1.0, 2.0].iter().map(|&l| row(l)).collect();
        assert_eq!(RunRecord::median_l_tot(&rows), 2.0);
        let rows: Vec<EpochRow> = [4.0, 1.0, 2.0, 3.0].iter().map(|&l| row(l)).collect();
        assert_eq!(RunRecord::median_l_tot(&rows), 2.5);
    }
}
