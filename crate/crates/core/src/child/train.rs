//! Minibatch training and evaluation of child models.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{augment_batch, Dataset, Metric, SearchView, Split, TaskKind, Test};
use super::{ChildError, PERPLEXITY_CAP};
use crate::arch::ConvArch;
use crate::compiler::{
    compile_conv, compile_sequence_model, hidden_for_budget, CompiledGraph, ConvOptions, RecurrentCell,
    SequenceShape,
};
use crate::numeric::{Feed, Mode, NumericError, OptimizerConfig, OptimizerState, ParamSet, Tensor};

/// Momentum of running normalization statistics.
const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Epoch (0-based) at which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub norm_epsilon: f64,
    pub clip_norm: Option<f64>,
    /// Embedding width of sequence children.
    pub embed_dim: usize,
    /// Parameter budget that fixes the hidden width of sequence children.
    pub param_budget: usize,
    /// Pixels of padding before random crops on augmented tasks.
    pub crop_pad: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale image defaults: 10 epochs, minibatch 32, Nesterov momentum.
    pub fn desk_images() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::child_momentum(),
            decay_epoch: None,
            decay_factor: 0.1,
            norm_epsilon: 1e-5,
            clip_norm: None,
            embed_dim: 8,
            param_budget: 2000,
            crop_pad: 4,
            seed: 0,
        }
    }

    /// Desk-scale sequence defaults: 10 epochs, minibatch 32, Adam, clipped.
    pub fn desk_sequences() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::adam(0.01),
            clip_norm: Some(5.0),
            ..TrainConfig::desk_images()
        }
    }

    /// Desk defaults for whichever metric a task reports.
    pub fn desk_for(metric: Metric) -> Self {
        match metric {
            Metric::Accuracy => TrainConfig::desk_images(),
            Metric::Perplexity => TrainConfig::desk_sequences(),
        }
    }

    /// 50 epochs per child, as in the large image search.
    pub fn paper_cifar() -> Self {
        TrainConfig {
            epochs: 50,
            ..TrainConfig::desk_images()
        }
    }

    /// 35 epochs per child, as in the large language-model search.
    pub fn paper_ptb() -> Self {
        TrainConfig {
            epochs: 35,
            ..TrainConfig::desk_sequences()
        }
    }

    pub fn preset(name: &str, metric: Metric) -> Option<Self> {
        match name {
            "desk" => Some(TrainConfig::desk_for(metric)),
            "paper-cifar" => Some(TrainConfig::paper_cifar()),
            "paper-ptb" => Some(TrainConfig::paper_ptb()),
            _ => None,
        }
    }
}

/// What to train.
#[derive(Clone, Debug, PartialEq)]
pub enum ChildModel {
    Conv { arch: ConvArch, options: ConvOptions },
    Recurrent(RecurrentCell),
}

/// Outcome of training one child. Equality ignores wall time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: Metric,
    /// Validation metric after each epoch.
    pub history: Vec<f64>,
    /// Filled in only by the one-time test evaluation.
    pub test: Option<f64>,
    pub param_count: usize,
    pub diverged: bool,
    pub wall_seconds: f64,
}

impl PartialEq for EvalResult {
    fn eq(&self, other: &Self) -> bool {
        self.metric == other.metric
            && self.history == other.history
            && self.test == other.test
            && self.param_count == other.param_count
            && self.diverged == other.diverged
    }
}

impl EvalResult {
    /// Best value among the last five epochs, the figure rewards and
    /// selection are based on.
    pub fn selection_metric(&self) -> f64 {
        let tail = &self.history[self.history.len().saturating_sub(crate::reinforce::REWARD_WINDOW)..];
        tail.iter().cloned().fold(self.metric.worst(), |best, v| {
            if self.metric.better(v, best) {
                v
            } else {
                best
            }
        })
    }
}

/// A trained model kept long enough for a single test evaluation.
pub struct TrainedModel {
    runner: Runner,
    params: ParamSet,
    buffers: ParamSet,
}

impl TrainedModel {
    pub fn test_metric(&mut self, test: &Split<Test>) -> Result<f64, ChildError> {
        self.runner.evaluate(&self.params, &self.buffers, test.data())
    }
}

enum Runner {
    Conv {
        arch: ConvArch,
        options: ConvOptions,
        shape: [usize; 3],
        classes: usize,
        graphs: HashMap<usize, CompiledGraph>,
    },
    Sequence {
        cell: RecurrentCell,
        shape: SequenceShape,
        graphs: HashMap<usize, CompiledGraph>,
    },
}

impl Runner {
    fn new(model: &ChildModel, kind: &TaskKind, valid: &Dataset, cfg: &TrainConfig) -> Result<Self, ChildError> {
        match (model, kind, valid) {
            (ChildModel::Conv { arch, options }, TaskKind::ImageClassify { shape, classes }, _) => {
                let mut options = options.clone();
                options.norm_epsilon = cfg.norm_epsilon;
                Ok(Runner::Conv {
                    arch: arch.clone(),
                    options,
                    shape: *shape,
                    classes: *classes,
                    graphs: HashMap::new(),
                })
            }
            (ChildModel::Recurrent(cell), TaskKind::SequenceModel { vocab, length }, Dataset::Sequences(s)) => {
                let hidden = hidden_for_budget(cell, *vocab, cfg.embed_dim, cfg.param_budget);
                Ok(Runner::Sequence {
                    cell: cell.clone(),
                    shape: SequenceShape {
                        vocab: *vocab,
                        embed: cfg.embed_dim,
                        hidden,
                        length: *length,
                        scored: s.scored.clone(),
                    },
                    graphs: HashMap::new(),
                })
            }
            _ => Err(ChildError::Mismatch),
        }
    }

    fn graph(&mut self, batch: usize) -> Result<&CompiledGraph, ChildError> {
        use std::collections::hash_map::Entry;
        match self {
            Runner::Conv {
                arch,
                options,
                shape,
                classes,
                graphs,
            } => match graphs.entry(batch) {
                Entry::Occupied(e) => Ok(e.into_mut()),
                Entry::Vacant(e) => Ok(e.insert(compile_conv(arch, options, *shape, *classes, batch)?)),
            },
            Runner::Sequence { cell, shape, graphs } => match graphs.entry(batch) {
                Entry::Occupied(e) => Ok(e.into_mut()),
                Entry::Vacant(e) => Ok(e.insert(compile_sequence_model(cell, shape, batch)?)),
            },
        }
    }

    fn feed(&self, data: &Dataset, idx: &[usize]) -> Feed {
        let mut feed = Feed::new();
        match data {
            Dataset::Images(s) => {
                let (x, y) = s.batch(idx);
                feed.insert("image".into(), x);
                feed.insert("labels".into(), y);
            }
            Dataset::Sequences(s) => {
                let (xs, ys) = s.batch(idx);
                for (t, (x, y)) in xs.into_iter().zip(ys).enumerate() {
                    feed.insert(format!("x{t}"), x);
                    if s.scored.contains(&t) {
                        feed.insert(format!("y{t}"), y);
                    }
                }
            }
        }
        feed
    }

    /// Validation accuracy, or perplexity capped at the divergence value.
    fn evaluate(&mut self, params: &ParamSet, buffers: &ParamSet, data: &Dataset) -> Result<f64, ChildError> {
        let n = data.len();
        if n == 0 {
            return Err(ChildError::Task("evaluation split is empty".into()));
        }
        let chunk = 64.min(n);
        let mut score = 0.0;
        let mut at = 0;
        while at < n {
            let idx: Vec<usize> = (at..(at + chunk).min(n)).collect();
            let feed = self.feed(data, &idx);
            let g = self.graph(idx.len())?;
            let eval = g.graph.forward(params, &feed, Mode::Eval(buffers))?;
            match data {
                Dataset::Images(s) => {
                    let logits = g.graph.output_value(&eval, "logits")?;
                    let classes = logits.shape()[1];
                    for (row, &i) in idx.iter().enumerate() {
                        let r = &logits.data()[row * classes..(row + 1) * classes];
                        let mut best = 0;
                        for k in 1..classes {
                            if r[k] > r[best] {
                                best = k;
                            }
                        }
                        if best == s.labels[i] && r.iter().all(|v| v.is_finite()) {
                            score += 1.0;
                        }
                    }
                }
                Dataset::Sequences(_) => {
                    let loss = g.graph.output_value(&eval, "loss")?.item();
                    score += loss * idx.len() as f64;
                }
            }
            at += idx.len();
        }
        Ok(match data {
            Dataset::Images(_) => score / n as f64,
            Dataset::Sequences(_) => {
                let ppl = (score / n as f64).exp();
                if ppl.is_finite() {
                    ppl.min(PERPLEXITY_CAP)
                } else {
                    PERPLEXITY_CAP
                }
            }
        })
    }
}

enum Step {
    Ok,
    Diverged,
}

fn train_step(
    runner: &mut Runner,
    params: &mut ParamSet,
    buffers: &mut ParamSet,
    opt: &mut OptimizerState,
    feed: &Feed,
    batch: usize,
    clip: Option<f64>,
) -> Result<Step, ChildError> {
    let g = runner.graph(batch)?;
    let eval = g.graph.forward(params, feed, Mode::Train)?;
    let loss_id = g.graph.output("loss")?;
    if !eval.value(loss_id).item().is_finite() {
        return Ok(Step::Diverged);
    }
    let mut grads = g.graph.backward(&eval, loss_id, &Tensor::scalar(1.0))?;
    if !grads.is_finite() {
        return Ok(Step::Diverged);
    }
    if let Some(c) = clip {
        grads.clip_global_norm(c);
    }
    for (name, stats) in eval.batch_stats().iter() {
        if let Some(run) = buffers.get_mut(name) {
            run.scale_in_place(RUNNING_MOMENTUM);
            run.add_scaled(stats, 1.0 - RUNNING_MOMENTUM);
        }
    }
    match opt.apply(params, &grads) {
        Ok(()) => {}
        Err(NumericError::NonFinite(_)) => return Ok(Step::Diverged),
        Err(e) => return Err(e.into()),
    }
    if !params.is_finite() {
        return Ok(Step::Diverged);
    }
    Ok(Step::Ok)
}

/// Trains a fresh child on the view's training split and scores each epoch
/// on validation. Parameters are dropped on return.
pub fn train_child(model: &ChildModel, view: &SearchView<'_>, cfg: &TrainConfig) -> Result<EvalResult, ChildError> {
    fit(model, view, cfg).map(|(r, _)| r)
}

/// Like [`train_child`] but keeps the trained model.
pub fn fit(model: &ChildModel, view: &SearchView<'_>, cfg: &TrainConfig) -> Result<(EvalResult, TrainedModel), ChildError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ChildError::Config("epochs and batch size must be at least 1".into()));
    }
    let start = Instant::now();
    let train = view.train.data();
    let valid = view.valid.data();
    let mut runner = Runner::new(model, view.kind, valid, cfg)?;
    let batch = cfg.batch_size.min(train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut params, mut buffers, param_count) = {
        let g = runner.graph(batch)?;
        (g.init_params(&mut rng), g.init_buffers(), g.param_count())
    };
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        if diverged {
            history.push(view.metric.worst());
            continue;
        }
        if cfg.decay_epoch == Some(epoch) {
            opt.set_learning_rate(cfg.optimizer.learning_rate * cfg.decay_factor);
        }
        order.shuffle(&mut rng);
        for idx in order.chunks_exact(batch) {
            let mut feed = runner.feed(train, idx);
            if view.augment {
                if let Some(img) = feed.get_mut("image") {
                    augment_batch(img, cfg.crop_pad, &mut rng);
                }
            }
            if let Step::Diverged = train_step(&mut runner, &mut params, &mut buffers, &mut opt, &feed, batch, cfg.clip_norm)? {
                diverged = true;
                break;
            }
        }
        history.push(if diverged {
            view.metric.worst()
        } else {
            runner.evaluate(&params, &buffers, valid)?
        });
    }
    let result = EvalResult {
        metric: view.metric,
        history,
        test: None,
        param_count,
        diverged,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((result, TrainedModel { runner, params, buffers }))
}
