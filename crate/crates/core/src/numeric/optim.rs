use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamSet, Tensor};
use super::NumericError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Momentum { momentum: f64, nesterov: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Added to the loss gradient as `weight_decay * w`.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    /// Controller optimizer: Adam, learning rate 0.0006.
    pub fn controller() -> Self {
        Self::adam(0.0006)
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
            weight_decay: 0.0,
        }
    }

    /// Child-model optimizer: Nesterov momentum 0.9, lr 0.1, weight decay 1e-4.
    pub fn child_momentum() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum {
                momentum: 0.9,
                nesterov: true,
            },
            learning_rate: 0.1,
            weight_decay: 1e-4,
        }
    }

    pub fn momentum(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum {
                momentum,
                nesterov: false,
            },
            learning_rate,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    first: Tensor,
    second: Option<Tensor>,
}

/// Optimizer hyperparameters plus per-slot moment tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    config: OptimizerConfig,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let adam = matches!(config.kind, OptimizerKind::Adam { .. });
        let moments = params
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    Moments {
                        first: Tensor::zeros(t.shape()),
                        second: adam.then(|| Tensor::zeros(t.shape())),
                    },
                )
            })
            .collect();
        OptimizerState {
            config,
            moments,
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Slots this state tracks.
    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// The state of the slots `keep` accepts, for one parameter partition.
    pub fn restrict(&self, keep: impl Fn(&str) -> bool) -> OptimizerState {
        OptimizerState {
            config: self.config,
            moments: self
                .moments
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, m)| (k.clone(), m.clone()))
                .collect(),
            step: self.step,
        }
    }

    /// Joins partition states back together. Parts must agree on config
    /// and step count and must not overlap.
    pub fn merge(parts: Vec<OptimizerState>) -> Result<OptimizerState, NumericError> {
        let mut it = parts.into_iter();
        let mut out = it
            .next()
            .ok_or_else(|| NumericError::SlotMismatch("no optimizer parts to merge".into()))?;
        for part in it {
            if part.config != out.config || part.step != out.step {
                return Err(NumericError::SlotMismatch("optimizer parts disagree on config or step".into()));
            }
            for (k, m) in part.moments {
                if out.moments.insert(k.clone(), m).is_some() {
                    return Err(NumericError::SlotMismatch(format!("slot \"{k}\" appears in two parts")));
                }
            }
        }
        Ok(out)
    }

    /// Applies one update in place. `grads` must cover exactly the tracked
    /// slots; non-finite gradients reject the whole update and leave
    /// `params` untouched.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), NumericError> {
        if grads.len() != self.moments.len() || params.len() != self.moments.len() {
            return Err(NumericError::SlotMismatch(format!(
                "optimizer tracks {} slots, got {} params and {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        for (name, m) in &self.moments {
            let g = grads
                .get(name)
                .ok_or_else(|| NumericError::SlotMismatch(format!("no gradient for \"{name}\"")))?;
            let p = params
                .get(name)
                .ok_or_else(|| NumericError::SlotMismatch(format!("no parameter \"{name}\"")))?;
            if g.shape() != m.first.shape() || p.shape() != m.first.shape() {
                return Err(NumericError::ParamShape {
                    name: name.clone(),
                    expected: m.first.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumericError::NonFinite(name.clone()));
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        let wd = self.config.weight_decay;
        let t = self.step as i32;
        for (name, m) in self.moments.iter_mut() {
            let g = grads.get(name).unwrap().data();
            let w = params.get_mut(name).unwrap().data_mut();
            match self.config.kind {
                OptimizerKind::Adam { beta1, beta2, epsilon } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let v = m.second.as_mut().expect("adam keeps second moments").data_mut();
                    let mo = m.first.data_mut();
                    for i in 0..w.len() {
                        let gi = g[i] + wd * w[i];
                        mo[i] = beta1 * mo[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mhat = mo[i] / c1;
                        let vhat = v[i] / c2;
                        w[i] -= lr * mhat / (vhat.sqrt() + epsilon);
                    }
                }
                OptimizerKind::Momentum { momentum, nesterov } => {
                    let vel = m.first.data_mut();
                    for i in 0..w.len() {
                        let gi = g[i] + wd * w[i];
                        vel[i] = momentum * vel[i] + gi;
                        let step = if nesterov { gi + momentum * vel[i] } else { vel[i] };
                        w[i] -= lr * step;
                    }
                }
            }
        }
        Ok(())
    }
}
