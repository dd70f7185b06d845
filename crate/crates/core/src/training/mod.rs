//! Minibatch SGD training of toy encoders, from scratch or distilled from a
//! frozen teacher.

mod checkpoint;
mod encoder;
mod trainer;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{Activation, Encoder, EncoderSpec, ForwardCache};
pub use trainer::{
    distill, train_from_scratch, EpochRecord, Teacher, TrainTrace, TrainedModel, TrainingSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs from which the learning rate is divided by `lr_factor` once more.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// 26 epochs, lr 0.1 divided by 10 at epochs 8, 14, 20 and 25, SGD with
    /// momentum 0.9, horizontal flips with probability 0.5. The batch size is
    /// the desk-scale 64 rather than 256.
    fn default() -> Self {
        TrainConfig {
            epochs: 26,
            batch_size: 64,
            base_lr: 0.1,
            lr_milestones: vec![8, 14, 20, 25],
            lr_factor: 10.0,
            momentum: 0.9,
            weight_decay: 0.0,
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_factor > 1.0) {
            return bad(format!("lr_factor must exceed 1, got {}", self.lr_factor));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_milestones must be strictly increasing: {:?}",
                self.lr_milestones
            ));
        }
        if let Some(&m) = self.lr_milestones.last() {
            if m >= self.epochs {
                return bad(format!(
                    "milestone {m} is not below epochs = {}",
                    self.epochs
                ));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad(format!(
                "hflip_prob must lie in [0, 1], got {}",
                self.hflip_prob
            ));
        }
        Ok(())
    }
}

/// `base_lr / factor^k` where `k` counts the milestones at or before `epoch`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let decays = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(cfg.base_lr / cfg.lr_factor.powi(decays as i32))
}

/// Reverses the feature coordinates with probability `p`. One uniform draw
/// is consumed per call regardless of `p`.
pub fn hflip_augment(feature: &[f64], p: f64, rng: &mut Rng) -> Vec<f64> {
    let u: f64 = rng.random();
    if u < p {
        feature.iter().rev().copied().collect()
    } else {
        feature.to_vec()
    }
}

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    velocity: &mut [f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}
