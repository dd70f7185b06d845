//! Classification heads and the distillation objective.
//!
//! Three margin heads share one cosine-logit layer over a removable matrix of
//! class prototypes:
//!
//! * ArcFace: the target logit is `s·cos(θ_y + m)`.
//! * ElasticArcFace: the same with `m` drawn from `N(m, std)` per call.
//! * AdaFace: the margin adapts to the raw feature norm through running
//!   norm statistics ([`NormStats`]).
//!
//! The student objective is `cls + λ·kd`, where `kd` is the mean squared
//! error between teacher and student embeddings.

mod heads;
mod kd;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{l2_normalize, norm};
use crate::rng::Rng;

pub use heads::{
    adaface_margins, cross_entropy, cross_entropy_with_grad, head_backward, loss_gradients,
    margin_logits, margin_logits_adaface, margin_logits_arcface, margin_logits_elastic,
    sample_elastic_margin, HeadGradients, TargetMargin, COS_CLAMP_EPS,
};
pub use kd::{
    kd_embedding_grad, kd_embedding_loss, kd_embedding_loss_with, total_loss, KdGradient,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginKind {
    Arcface,
    ElasticArcface,
    Adaface,
}

impl MarginKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MarginKind::Arcface => "arcface",
            MarginKind::ElasticArcface => "elastic_arcface",
            MarginKind::Adaface => "adaface",
        }
    }
}

impl std::fmt::Display for MarginKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub kind: MarginKind,
    /// Logit scale `s`.
    pub s: f64,
    /// Angular margin `m` in radians.
    pub m: f64,
    /// Margin standard deviation, elastic head only.
    #[serde(default)]
    pub std: f64,
    /// Norm concentration, AdaFace only.
    #[serde(default = "default_h")]
    pub h: f64,
    /// EMA momentum for the AdaFace norm statistics.
    #[serde(default = "default_ema")]
    pub ema_momentum: f64,
}

fn default_h() -> f64 {
    0.333
}

fn default_ema() -> f64 {
    0.01
}

impl MarginConfig {
    pub fn arcface(s: f64, m: f64) -> Self {
        MarginConfig {
            kind: MarginKind::Arcface,
            s,
            m,
            std: 0.0,
            h: default_h(),
            ema_momentum: default_ema(),
        }
    }

    pub fn elastic_arcface(s: f64, m: f64, std: f64) -> Self {
        MarginConfig {
            kind: MarginKind::ElasticArcface,
            std,
            ..Self::arcface(s, m)
        }
    }

    pub fn adaface(s: f64, m: f64) -> Self {
        MarginConfig {
            kind: MarginKind::Adaface,
            ..Self::arcface(s, m)
        }
    }

    /// s = 64, m = 0.5, std = 0.05.
    pub fn elastic_default() -> Self {
        Self::elastic_arcface(64.0, 0.5, 0.05)
    }

    /// s = 60, m = 0.4 with h = 0.333 and EMA momentum 0.01.
    pub fn adaface_default() -> Self {
        Self::adaface(60.0, 0.4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.s > 0.0 && self.s.is_finite()) {
            return bad(format!("margin scale s must be positive, got {}", self.s));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.m) {
            return bad(format!("margin m must lie in [0, pi/2), got {}", self.m));
        }
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return bad(format!("margin std must be non-negative, got {}", self.std));
        }
        if self.kind == MarginKind::Adaface {
            if !(self.h > 0.0) {
                return bad(format!("adaface h must be positive, got {}", self.h));
            }
            if !(self.ema_momentum > 0.0 && self.ema_momentum <= 1.0) {
                return bad(format!(
                    "adaface ema_momentum must lie in (0, 1], got {}",
                    self.ema_momentum
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub margin: MarginConfig,
    /// Weight of the distillation term.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Distil on unit-normalized embeddings instead of raw ones.
    #[serde(default)]
    pub kd_on_normalized: bool,
    #[serde(default)]
    pub kd_reduction: KdReduction,
}

fn default_lambda() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(margin: MarginConfig) -> Self {
        LossConfig {
            margin,
            lambda: default_lambda(),
            kd_on_normalized: false,
            kd_reduction: KdReduction::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::new(MarginConfig::adaface_default())
    }
}

/// The removable classification layer: one raw weight row per identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl ClassPrototypes {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        let mut weights = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            weights.extend_from_slice(row);
        }
        Self::from_flat(rows.len(), dim, weights)
    }

    pub fn from_flat(classes: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != classes * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {classes}x{dim} prototypes",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite { what: "prototypes" });
        }
        Ok(ClassPrototypes {
            classes,
            dim,
            weights,
        })
    }

    /// Gaussian rows, unit-normalized.
    pub fn random(classes: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut weights = Vec::with_capacity(classes * dim);
        for _ in 0..classes {
            let mut row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = norm(&row).max(f64::MIN_POSITIVE);
            row.iter_mut().for_each(|x| *x /= n);
            weights.extend(row);
        }
        ClassPrototypes {
            classes,
            dim,
            weights,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn unit(&self) -> Result<UnitPrototypes> {
        UnitPrototypes::new(self)
    }
}

/// Unit-normalized view of [`ClassPrototypes`] with the original row norms,
/// computed once per batch.
#[derive(Debug, Clone)]
pub struct UnitPrototypes {
    dim: usize,
    rows: Vec<f64>,
    norms: Vec<f64>,
}

impl UnitPrototypes {
    pub fn new(p: &ClassPrototypes) -> Result<Self> {
        let mut rows = Vec::with_capacity(p.weights.len());
        let mut norms = Vec::with_capacity(p.classes);
        for j in 0..p.classes {
            let r = p.row(j);
            rows.extend(l2_normalize(r)?);
            norms.push(norm(r));
        }
        Ok(UnitPrototypes {
            dim: p.dim,
            rows,
            norms,
        })
    }

    pub fn classes(&self) -> usize {
        self.norms.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.dim..(j + 1) * self.dim]
    }

    pub fn raw_norm(&self, j: usize) -> f64 {
        self.norms[j]
    }
}

/// Lower and upper clip for raw feature norms before they enter the statistics.
pub const NORM_CLIP: (f64, f64) = (0.001, 100.0);

/// Running mean and standard deviation of raw embedding norms for AdaFace.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormStats {
    state: Option<(f64, f64)>,
}

impl NormStats {
    pub fn uninitialized() -> Self {
        NormStats { state: None }
    }

    pub fn new(mean_norm: f64, std_norm: f64) -> Result<Self> {
        if !(std_norm > 0.0) || !mean_norm.is_finite() || !std_norm.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "norm statistics need finite mean and positive std, got ({mean_norm}, {std_norm})"
            )));
        }
        Ok(NormStats {
            state: Some((mean_norm, std_norm)),
        })
    }

    /// Seeds the statistics from a first batch of raw norms.
    pub fn from_batch(norms: &[f64]) -> Result<Self> {
        let (mean, std) = batch_moments(norms).ok_or(Error::EmptyInput)?;
        NormStats::new(mean, std.filter(|s| *s > 0.0).unwrap_or(1.0))
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    pub fn get(&self) -> Result<(f64, f64)> {
        self.state.ok_or(Error::UninitializedStats)
    }

    pub fn mean_norm(&self) -> Option<f64> {
        self.state.map(|s| s.0)
    }

    pub fn std_norm(&self) -> Option<f64> {
        self.state.map(|s| s.1)
    }

    /// EMA update with a batch of raw norms. A single-norm batch moves only
    /// the mean; a batch with zero spread leaves the std unchanged.
    pub fn update(&mut self, norms: &[f64], momentum: f64) -> Result<()> {
        let (mean, std) = self.get()?;
        let Some((batch_mean, batch_std)) = batch_moments(norms) else {
            return Ok(());
        };
        let new_mean = momentum * batch_mean + (1.0 - momentum) * mean;
        let new_std = match batch_std {
            Some(bs) if bs > 0.0 => momentum * bs + (1.0 - momentum) * std,
            _ => std,
        };
        self.state = Some((new_mean, new_std));
        Ok(())
    }
}

pub(crate) fn clip_norm(n: f64) -> f64 {
    n.clamp(NORM_CLIP.0, NORM_CLIP.1)
}

/// Mean and sample std of clipped norms; std is `None` for a single norm.
fn batch_moments(norms: &[f64]) -> Option<(f64, Option<f64>)> {
    if norms.is_empty() {
        return None;
    }
    let clipped: Vec<f64> = norms.iter().map(|&n| clip_norm(n)).collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let std = (clipped.len() > 1)
        .then(|| (clipped.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(MarginConfig::elastic_default().validate().is_ok());
        assert!(MarginConfig::adaface_default().validate().is_ok());
        assert!(MarginConfig::arcface(0.0, 0.5).validate().is_err());
        assert!(MarginConfig::arcface(64.0, 1.6).validate().is_err());
        assert!(MarginConfig::arcface(64.0, -0.1).validate().is_err());
        assert!(MarginConfig::elastic_arcface(64.0, 0.5, -1.0)
            .validate()
            .is_err());
        let mut lc = LossConfig::default();
        assert_eq!(lc.lambda, 1.0);
        assert!(!lc.kd_on_normalized);
        lc.lambda = -1.0;
        assert!(lc.validate().is_err());
    }

    #[test]
    fn reported_hyperparameters() {
        let e = MarginConfig::elastic_default();
        assert_eq!((e.s, e.m, e.std), (64.0, 0.5, 0.05));
        let a = MarginConfig::adaface_default();
        assert_eq!((a.s, a.m, a.h, a.ema_momentum), (60.0, 0.4, 0.333, 0.01));
    }

    #[test]
    fn norm_stats_lifecycle() {
        let mut s = NormStats::uninitialized();
        assert!(matches!(
            s.update(&[1.0], 0.1),
            Err(Error::UninitializedStats)
        ));
        s = NormStats::from_batch(&[2.0, 4.0]).unwrap();
        let (m, sd) = s.get().unwrap();
        assert_eq!(m, 3.0);
        assert!((sd - 2f64.sqrt()).abs() < 1e-15);
        s.update(&[13.0], 0.1).unwrap();
        assert!((s.mean_norm().unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(s.std_norm().unwrap(), sd);
        // clipping before statistics
        let c = NormStats::from_batch(&[1000.0]).unwrap();
        assert_eq!(c.get().unwrap(), (100.0, 1.0));
    }

    #[test]
    fn prototypes_shape_checks() {
        assert!(ClassPrototypes::from_rows(&[vec![1.0, 0.0], vec![0.0]]).is_err());
        assert!(ClassPrototypes::from_flat(2, 2, vec![0.0; 3]).is_err());
        let p = ClassPrototypes::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        let u = p.unit().unwrap();
        assert_eq!(u.row(0), &[0.6, 0.8]);
        assert_eq!(u.raw_norm(1), 2.0);
    }
}
