//! Reward shaping, the moving-average baseline and the REINFORCE estimator.

pub mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Controller, ControllerError, Trajectory};
use crate::numeric::ParamSet;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("metric history is empty")]
    EmptyHistory,
    #[error("accuracy {0} is outside [0, 1]")]
    Accuracy(f64),
    #[error("perplexity must be positive, got {0}")]
    Perplexity(f64),
}

/// Epochs the accuracy reward looks back over.
pub const REWARD_WINDOW: usize = 5;

/// Cube of the best accuracy among the last five epochs (or all of them
/// when fewer were run).
pub fn shape_reward_accuracy(history: &[f64]) -> Result<f64, RewardError> {
    if history.is_empty() {
        return Err(RewardError::EmptyHistory);
    }
    if let Some(&bad) = history.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(RewardError::Accuracy(bad));
    }
    let tail = &history[history.len().saturating_sub(REWARD_WINDOW)..];
    let best = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(best * best * best)
}

/// `c / ppl^2`.
pub fn shape_reward_perplexity(ppl: f64, c: f64) -> Result<f64, RewardError> {
    if ppl.is_nan() || ppl <= 0.0 {
        return Err(RewardError::Perplexity(ppl));
    }
    Ok(c / (ppl * ppl))
}

/// Perplexity reward from a per-epoch history, scored on the best of the
/// last five epochs.
pub fn shape_reward_perplexity_history(history: &[f64], c: f64) -> Result<f64, RewardError> {
    if history.is_empty() {
        return Err(RewardError::EmptyHistory);
    }
    let tail = &history[history.len().saturating_sub(REWARD_WINDOW)..];
    let best = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    shape_reward_perplexity(best, c)
}

/// Exponential moving average of consumed rewards. The first reward
/// initializes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    value: Option<f64>,
    decay: f64,
    count: u64,
}

impl Baseline {
    pub const DEFAULT_DECAY: f64 = 0.95;

    pub fn new(decay: f64) -> Self {
        Baseline {
            value: None,
            decay,
            count: 0,
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, reward: f64) -> f64 {
        let b = match self.value {
            None => reward,
            Some(b) => self.decay * b + (1.0 - self.decay) * reward,
        };
        self.value = Some(b);
        self.count += 1;
        b
    }
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::new(Baseline::DEFAULT_DECAY)
    }
}

/// One consumed reward and the baseline it was compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    /// Validation accuracy or perplexity, before shaping.
    pub metric: f64,
    pub reward: f64,
    pub baseline: f64,
    pub trajectory: u64,
    pub replica: usize,
}

/// Mean over the batch of `(R_k - b) * grad log p(trajectory_k)`: the
/// ascent direction for expected reward.
pub fn policy_gradient(
    controller: &Controller,
    params: &ParamSet,
    batch: &[(&Trajectory, f64)],
    baseline: f64,
) -> Result<ParamSet, ControllerError> {
    let mut total = params.zeros_like();
    for (trajectory, reward) in batch {
        let (_, grad) = controller.log_prob(params, trajectory)?;
        total.add_scaled(&grad, reward - baseline);
    }
    if !batch.is_empty() {
        total.scale(1.0 / batch.len() as f64);
    }
    Ok(total)
}

/// Default global-norm bound applied before the optimizer step.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shaping_examples() {
        let r = shape_reward_accuracy(&[0.1, 0.8, 0.9, 0.85, 0.88, 0.87]).unwrap();
        assert_eq!(r, 0.9f64 * 0.9 * 0.9);
        assert_eq!(shape_reward_accuracy(&[0.0; 7]).unwrap(), 0.0);
        assert_eq!(shape_reward_accuracy(&[0.2, 0.5, 0.1]).unwrap(), 0.125);
        assert_eq!(shape_reward_perplexity(80.0, 80.0).unwrap(), 0.0125);
        assert!((shape_reward_perplexity(80f64.sqrt(), 80.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(shape_reward_perplexity(0.0, 80.0), Err(RewardError::Perplexity(0.0)));
        assert!(shape_reward_accuracy(&[]).is_err());
        assert!(shape_reward_accuracy(&[1.5]).is_err());
    }

    #[test]
    fn baseline_examples() {
        let mut b = Baseline::default();
        assert_eq!(b.update(0.5), 0.5);
        assert!((b.update(0.7) - 0.51).abs() < 1e-15);
        let mut c = Baseline::default();
        for _ in 0..2000 {
            c.update(0.3);
        }
        assert!((c.value().unwrap() - 0.3).abs() < 1e-12);
    }
}
