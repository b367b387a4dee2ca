//! Small enumerable policies with closed-form expected-reward gradients,
//! used to check the score-function estimator exactly.

use rand::Rng;

use crate::numeric::softmax_row;

/// A stochastic policy over finitely many outcomes with a flat parameter
/// vector.
pub trait ToyPolicy {
    fn num_params(&self) -> usize;
    fn outcomes(&self) -> usize;
    fn prob(&self, theta: &[f64], outcome: usize) -> f64;
    fn grad_log_prob(&self, theta: &[f64], outcome: usize) -> Vec<f64>;
    /// Gradient of `sum_o p(o) r(o)`, derived directly rather than through
    /// the log-derivative identity.
    fn exact_gradient(&self, theta: &[f64], rewards: &[f64]) -> Vec<f64>;
    fn sample<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> usize;

    fn expected_reward(&self, theta: &[f64], rewards: &[f64]) -> f64 {
        (0..self.outcomes()).map(|o| self.prob(theta, o) * rewards[o]).sum()
    }
}

/// Exact expectation of the single-sample estimator `(R - b) grad log p`.
pub fn enumerated_estimator<P: ToyPolicy>(policy: &P, theta: &[f64], rewards: &[f64], baseline: f64) -> Vec<f64> {
    let mut out = vec![0.0; policy.num_params()];
    for (o, r) in (0..policy.outcomes()).zip(rewards) {
        let w = policy.prob(theta, o) * (r - baseline);
        for (acc, g) in out.iter_mut().zip(policy.grad_log_prob(theta, o)) {
            *acc += w * g;
        }
    }
    out
}

/// Sample mean of the estimator over `n` draws.
pub fn monte_carlo_estimator<P: ToyPolicy, R: Rng + ?Sized>(
    policy: &P,
    theta: &[f64],
    rewards: &[f64],
    baseline: f64,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = vec![0.0; policy.num_params()];
    for _ in 0..n {
        let o = policy.sample(theta, rng);
        let w = rewards[o] - baseline;
        for (acc, g) in out.iter_mut().zip(policy.grad_log_prob(theta, o)) {
            *acc += w * g;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One softmax over `n` arms, one logit per arm.
#[derive(Clone, Copy, Debug)]
pub struct CategoricalBandit {
    pub arms: usize,
}

impl ToyPolicy for CategoricalBandit {
    fn num_params(&self) -> usize {
        self.arms
    }

    fn outcomes(&self) -> usize {
        self.arms
    }

    fn prob(&self, theta: &[f64], outcome: usize) -> f64 {
        softmax_row(theta)[outcome]
    }

    fn grad_log_prob(&self, theta: &[f64], outcome: usize) -> Vec<f64> {
        let p = softmax_row(theta);
        (0..self.arms).map(|j| (j == outcome) as u8 as f64 - p[j]).collect()
    }

    fn exact_gradient(&self, theta: &[f64], rewards: &[f64]) -> Vec<f64> {
        let p = softmax_row(theta);
        let mean: f64 = p.iter().zip(rewards).map(|(a, b)| a * b).sum();
        (0..self.arms).map(|j| p[j] * (rewards[j] - mean)).collect()
    }

    fn sample<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> usize {
        draw(&softmax_row(theta), rng)
    }
}

/// Two dependent decisions: a first softmax over `first` choices, then a
/// second softmax over `second` choices whose logits depend on the first
/// choice. Parameters: `first` logits, then a `first x second` table.
#[derive(Clone, Copy, Debug)]
pub struct TwoStepBandit {
    pub first: usize,
    pub second: usize,
}

impl TwoStepBandit {
    fn split(&self, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let p1 = softmax_row(&theta[..self.first]);
        let p2 = (0..self.first)
            .map(|i| {
                let at = self.first + i * self.second;
                softmax_row(&theta[at..at + self.second])
            })
            .collect();
        (p1, p2)
    }
}

impl ToyPolicy for TwoStepBandit {
    fn num_params(&self) -> usize {
        self.first + self.first * self.second
    }

    fn outcomes(&self) -> usize {
        self.first * self.second
    }

    fn prob(&self, theta: &[f64], outcome: usize) -> f64 {
        let (p1, p2) = self.split(theta);
        let (i, j) = (outcome / self.second, outcome % self.second);
        p1[i] * p2[i][j]
    }

    fn grad_log_prob(&self, theta: &[f64], outcome: usize) -> Vec<f64> {
        let (p1, p2) = self.split(theta);
        let (i, j) = (outcome / self.second, outcome % self.second);
        let mut g = vec![0.0; self.num_params()];
        for k in 0..self.first {
            g[k] = (k == i) as u8 as f64 - p1[k];
        }
        for k in 0..self.second {
            g[self.first + i * self.second + k] = (k == j) as u8 as f64 - p2[i][k];
        }
        g
    }

    fn exact_gradient(&self, theta: &[f64], rewards: &[f64]) -> Vec<f64> {
        let (p1, p2) = self.split(theta);
        let value: Vec<f64> = (0..self.first)
            .map(|i| (0..self.second).map(|j| p2[i][j] * rewards[i * self.second + j]).sum())
            .collect();
        let mean: f64 = p1.iter().zip(&value).map(|(a, b)| a * b).sum();
        let mut g = vec![0.0; self.num_params()];
        for i in 0..self.first {
            g[i] = p1[i] * (value[i] - mean);
            for j in 0..self.second {
                g[self.first + i * self.second + j] = p1[i] * p2[i][j] * (rewards[i * self.second + j] - value[i]);
            }
        }
        g
    }

    fn sample<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> usize {
        let (p1, p2) = self.split(theta);
        let i = draw(&p1, rng);
        i * self.second + draw(&p2[i], rng)
    }
}

/// Independent coin flips, one sigmoid parameter per bit; outcomes are the
/// bit patterns.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliBits {
    pub bits: usize,
}

fn sigmoid(x: f64) -> f64 {
    crate::numeric::sigmoid(x)
}

impl ToyPolicy for BernoulliBits {
    fn num_params(&self) -> usize {
        self.bits
    }

    fn outcomes(&self) -> usize {
        1 << self.bits
    }

    fn prob(&self, theta: &[f64], outcome: usize) -> f64 {
        (0..self.bits)
            .map(|k| {
                let q = sigmoid(theta[k]);
                if outcome >> k & 1 == 1 {
                    q
                } else {
                    1.0 - q
                }
            })
            .product()
    }

    fn grad_log_prob(&self, theta: &[f64], outcome: usize) -> Vec<f64> {
        (0..self.bits)
            .map(|k| (outcome >> k & 1) as f64 - sigmoid(theta[k]))
            .collect()
    }

    fn exact_gradient(&self, theta: &[f64], rewards: &[f64]) -> Vec<f64> {
        // d/dθ_k of sum_o p(o) r(o): p factors, so differentiate bit k's
        // factor (dq/dθ = q(1-q), sign by the bit) and keep the others.
        (0..self.bits)
            .map(|k| {
                let q = sigmoid(theta[k]);
                let dq = q * (1.0 - q);
                (0..self.outcomes())
                    .map(|o| {
                        let rest: f64 = (0..self.bits)
                            .filter(|&m| m != k)
                            .map(|m| {
                                let qm = sigmoid(theta[m]);
                                if o >> m & 1 == 1 {
                                    qm
                                } else {
                                    1.0 - qm
                                }
                            })
                            .product();
                        let sign = if o >> k & 1 == 1 { 1.0 } else { -1.0 };
                        sign * dq * rest * rewards[o]
                    })
                    .sum()
            })
            .collect()
    }

    fn sample<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> usize {
        (0..self.bits)
            .map(|k| ((rng.random::<f64>() < sigmoid(theta[k])) as usize) << k)
            .sum()
    }
}
