//! Child models: tasks, training, grid search and the evaluators that turn
//! a description into a reward.

pub mod data;
mod landscape;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{
    augment_batch, builtin_tasks, char_toy, char_toy_vocab, cifar10, constant_label, copy_memory, read_cifar_records,
    separable_images, synthetic_shapes, CatalogEntry, Dataset, ImageSet, Metric, SearchView, SequenceSet, Split,
    Task, TaskKind, Test, Train, Valid, CHAR_TOY_TEXT, COPY_LENGTH, COPY_MAX_GAP, COPY_VOCAB, TASK_NAMES,
};
pub use landscape::RiggedLandscape;
pub use train::{fit, train_child, ChildModel, EvalResult, TrainConfig, TrainedModel};

use crate::arch::{ArchDescription, SearchSpace};
use crate::compiler::{CompileError, ConvOptions, RecurrentCell};
use crate::numeric::NumericError;
use crate::reinforce::{shape_reward_accuracy, shape_reward_perplexity_history, RewardError};

/// Perplexity reported for diverged or hopeless children.
pub const PERPLEXITY_CAP: f64 = 1e6;

/// Default numerator of the perplexity reward.
pub const PERPLEXITY_REWARD_C: f64 = 80.0;

#[derive(Debug, Error)]
pub enum ChildError {
    #[error("task: {0}")]
    Task(String),
    #[error("config: {0}")]
    Config(String),
    #[error("model family does not fit the task")]
    Mismatch,
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// One hyperparameter setting of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub norm_epsilon: f64,
    pub decay_epoch: Option<usize>,
}

impl GridPoint {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.optimizer.learning_rate = self.learning_rate;
        cfg.optimizer.weight_decay = self.weight_decay;
        cfg.norm_epsilon = self.norm_epsilon;
        cfg.decay_epoch = self.decay_epoch;
        cfg
    }
}

/// Axes of a hyperparameter grid; points enumerate their product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub norm_epsilons: Vec<f64>,
    pub decay_epochs: Vec<Option<usize>>,
}

impl Grid {
    /// A one-point grid holding the values already in `cfg`.
    pub fn single(cfg: &TrainConfig) -> Self {
        Grid {
            learning_rates: vec![cfg.optimizer.learning_rate],
            weight_decays: vec![cfg.optimizer.weight_decay],
            norm_epsilons: vec![cfg.norm_epsilon],
            decay_epochs: vec![cfg.decay_epoch],
        }
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &weight_decay in &self.weight_decays {
                for &norm_epsilon in &self.norm_epsilons {
                    for &decay_epoch in &self.decay_epochs {
                        out.push(GridPoint {
                            learning_rate,
                            weight_decay,
                            norm_epsilon,
                            decay_epoch,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Result of a grid search: every trial, plus the winner with its test
/// metric filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub trials: Vec<(GridPoint, EvalResult)>,
    pub winner: usize,
    pub config: TrainConfig,
    pub result: EvalResult,
}

/// Trains every grid point, picks the best validation metric (earliest on
/// ties) and evaluates the test split once, for the winner only.
pub fn grid_search(model: &ChildModel, task: &Task, base: &TrainConfig, grid: &Grid) -> Result<GridOutcome, ChildError> {
    let points = grid.points();
    if points.is_empty() {
        return Err(ChildError::Config("grid has no points".into()));
    }
    let view = task.view();
    let mut trials = Vec::with_capacity(points.len());
    let mut best: Option<(usize, f64, TrainedModel)> = None;
    for (i, p) in points.iter().enumerate() {
        let (result, trained) = fit(model, &view, &p.apply(base))?;
        let score = result.selection_metric();
        let wins = match &best {
            None => true,
            Some((_, s, _)) => task.metric.better(score, *s),
        };
        if wins {
            best = Some((i, score, trained));
        }
        trials.push((*p, result));
    }
    let (winner, _, mut trained) = best.expect("grid is non-empty");
    let mut result = trials[winner].1.clone();
    result.test = Some(trained.test_metric(task.test())?);
    Ok(GridOutcome {
        config: points[winner].apply(base),
        trials,
        winner,
        result,
    })
}

/// What an evaluator reports for one description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// Validation metric the reward is computed from.
    pub metric: f64,
    pub reward: f64,
    pub history: Vec<f64>,
    pub param_count: usize,
    pub diverged: bool,
}

/// Turns descriptions into rewards. Implementations must be deterministic
/// in `(desc, seed)`.
pub trait Evaluator: Send + Sync {
    fn name(&self) -> &str;
    fn metric(&self) -> Metric;
    fn evaluate(&self, desc: &ArchDescription, seed: u64) -> Result<Outcome, ChildError>;
}

/// Trains each child from scratch on a task's search view.
#[derive(Clone, Debug)]
pub struct TaskEvaluator {
    task: Task,
    space: SearchSpace,
    config: TrainConfig,
    perplexity_c: f64,
}

impl TaskEvaluator {
    pub fn new(task: Task, space: SearchSpace, config: TrainConfig) -> Result<Self, ChildError> {
        let fits = matches!(
            (&task.kind, &space),
            (TaskKind::ImageClassify { .. }, SearchSpace::Conv(_)) | (TaskKind::SequenceModel { .. }, SearchSpace::Cell(_))
        );
        if !fits {
            return Err(ChildError::Mismatch);
        }
        Ok(TaskEvaluator {
            task,
            space,
            config,
            perplexity_c: PERPLEXITY_REWARD_C,
        })
    }

    pub fn with_perplexity_c(mut self, c: f64) -> Self {
        self.perplexity_c = c;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model_for(&self, desc: &ArchDescription) -> Result<ChildModel, ChildError> {
        match (desc, &self.space) {
            (ArchDescription::Conv(arch), SearchSpace::Conv(space)) => Ok(ChildModel::Conv {
                arch: arch.clone(),
                options: ConvOptions::from_space(space),
            }),
            (ArchDescription::Cell(cell), SearchSpace::Cell(_)) => Ok(ChildModel::Recurrent(RecurrentCell::Tree(cell.clone()))),
            _ => Err(ChildError::Mismatch),
        }
    }

    /// Trains an arbitrary model with the evaluator's settings.
    pub fn train(&self, model: &ChildModel, seed: u64) -> Result<EvalResult, ChildError> {
        let cfg = TrainConfig {
            seed,
            ..self.config.clone()
        };
        train_child(model, &self.task.view(), &cfg)
    }

    pub fn reward_for(&self, result: &EvalResult) -> Result<f64, ChildError> {
        Ok(match result.metric {
            Metric::Accuracy => shape_reward_accuracy(&result.history)?,
            Metric::Perplexity => shape_reward_perplexity_history(&result.history, self.perplexity_c)?,
        })
    }
}

impl Evaluator for TaskEvaluator {
    fn name(&self) -> &str {
        &self.task.name
    }

    fn metric(&self) -> Metric {
        self.task.metric
    }

    fn evaluate(&self, desc: &ArchDescription, seed: u64) -> Result<Outcome, ChildError> {
        let model = self.model_for(desc)?;
        let result = self.train(&model, seed)?;
        Ok(Outcome {
            metric: result.selection_metric(),
            reward: self.reward_for(&result)?,
            history: result.history,
            param_count: result.param_count,
            diverged: result.diverged,
        })
    }
}
