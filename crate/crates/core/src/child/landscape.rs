use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ChildError, Evaluator, Metric, Outcome};
use crate::arch::{encode, sample_uniform, Action, ArchDescription, CellSearchSpace, SearchSpace};

/// An analytic reward over a cell space with one planted optimum:
/// `floor + gap * agreement + noise`, clamped to `[0, 1]`, where agreement
/// is the fraction of tokens equal to the planted ones. No training.
#[derive(Clone, Debug, PartialEq)]
pub struct RiggedLandscape {
    space: SearchSpace,
    planted: Vec<Action>,
    pub floor: f64,
    pub gap: f64,
    pub noise: f64,
    seed: u64,
}

impl RiggedLandscape {
    pub const FLOOR: f64 = 0.5;
    pub const GAP: f64 = 0.3;
    pub const NOISE: f64 = 0.05;

    /// Base-2 cell space with the optimum drawn uniformly from `seed`.
    pub fn new(seed: u64) -> Self {
        let space = SearchSpace::Cell(CellSearchSpace::with_base(2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planted = sample_uniform(&space, 0, &mut rng);
        Self::with_planted(space, &planted, seed).expect("sampled descriptions are valid")
    }

    pub fn with_planted(space: SearchSpace, planted: &ArchDescription, seed: u64) -> Result<Self, ChildError> {
        let planted = encode(planted, &space).map_err(|e| ChildError::Task(format!("planted optimum: {e}")))?;
        Ok(RiggedLandscape {
            space,
            planted,
            floor: Self::FLOOR,
            gap: Self::GAP,
            noise: Self::NOISE,
            seed,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn planted(&self) -> &[Action] {
        &self.planted
    }

    /// Fraction of planted tokens `desc` reproduces. Skip vectors count
    /// bit by bit.
    pub fn agreement(&self, desc: &ArchDescription) -> Result<f64, ChildError> {
        let actions = encode(desc, &self.space).map_err(|e| ChildError::Task(e.to_string()))?;
        let (mut hit, mut total) = (0usize, 0usize);
        for (a, p) in actions.iter().zip(&self.planted) {
            match (a, p) {
                (Action::Token(x), Action::Token(y)) => {
                    hit += (x == y) as usize;
                    total += 1;
                }
                (Action::Skips(x), Action::Skips(y)) => {
                    hit += x.iter().zip(y).filter(|(u, v)| u == v).count();
                    total += y.len();
                }
                _ => total += 1,
            }
        }
        Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
    }

    /// Reward without noise.
    pub fn mean_reward(&self, desc: &ArchDescription) -> Result<f64, ChildError> {
        Ok((self.floor + self.gap * self.agreement(desc)?).clamp(0.0, 1.0))
    }
}

impl Evaluator for RiggedLandscape {
    fn name(&self) -> &str {
        "rigged"
    }

    fn metric(&self) -> Metric {
        Metric::Accuracy
    }

    fn evaluate(&self, desc: &ArchDescription, seed: u64) -> Result<Outcome, ChildError> {
        let mean = self.floor + self.gap * self.agreement(desc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.seed);
        let eps = if self.noise > 0.0 {
            Normal::new(0.0, self.noise).expect("positive std").sample(&mut rng)
        } else {
            0.0
        };
        let reward = (mean + eps).clamp(0.0, 1.0);
        Ok(Outcome {
            metric: reward,
            reward,
            history: vec![reward],
            param_count: 0,
            diverged: false,
        })
    }
}
