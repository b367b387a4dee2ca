//! Experiment configuration files, written in the same restricted JSON
//! profile as architecture files.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::arch::{sample_uniform, Activation, CellSearchSpace, Combiner, ConvSearchSpace, SearchSpace};
use crate::child::{
    char_toy, cifar10, copy_memory, synthetic_shapes, ChildError, Evaluator, Grid, Metric, RiggedLandscape, Task,
    TaskEvaluator, TrainConfig, PERPLEXITY_REWARD_C, TASK_NAMES,
};
use crate::controller::ControllerConfig;
use crate::dist::{ClusterConfig, DepthSchedule, SearchSettings};
use crate::numeric::OptimizerConfig;
use crate::profile::{self, as_real, as_str, as_usize, Obj, Path, ProfileError};
use crate::report::DEFAULT_WINDOW;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Child(#[from] ChildError),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Everything one `search` or `randsearch` invocation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: String,
    pub space: SearchSpace,
    pub settings: SearchSettings,
    pub cluster: ClusterConfig,
    /// Training preset name plus overrides.
    pub training: TrainConfig,
    pub preset: String,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub top_k: usize,
    pub window: usize,
    pub perplexity_c: f64,
    /// Examples in each split for generated tasks; `None` keeps the
    /// task's defaults.
    pub sizes: Option<[usize; 3]>,
    /// Seed of the rigged landscape's planted optimum.
    pub landscape_seed: u64,
}

impl ExperimentConfig {
    /// Defaults for a task: conv space for image tasks, base-2 cells
    /// otherwise.
    pub fn for_task(task: &str) -> Result<Self, ConfigError> {
        if !TASK_NAMES.contains(&task) {
            return Err(invalid("task", format!("unknown task \"{task}\"; known: {}", TASK_NAMES.join(", "))));
        }
        let images = matches!(task, "synthetic-shapes" | "cifar10");
        let metric = task_metric(task);
        Ok(ExperimentConfig {
            task: task.to_string(),
            space: if images {
                SearchSpace::Conv(ConvSearchSpace::default())
            } else {
                SearchSpace::Cell(CellSearchSpace::with_base(2))
            },
            settings: SearchSettings {
                checkpoint_every: 10,
                ..if task == "rigged" {
                    SearchSettings::short_budget()
                } else {
                    SearchSettings::default()
                }
            },
            cluster: ClusterConfig::default(),
            training: TrainConfig::desk_for(metric),
            preset: "desk".to_string(),
            seeds: vec![0],
            out: PathBuf::from("nasforge-out"),
            top_k: 5,
            window: DEFAULT_WINDOW,
            perplexity_c: PERPLEXITY_REWARD_C,
            sizes: None,
            landscape_seed: 0,
        })
    }

    pub fn metric(&self) -> Metric {
        task_metric(&self.task)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let value = profile::parse(text)?;
        let mut o = Obj::new(&value, Path::root())?;
        let task = o.str("task")?;
        let mut cfg = ExperimentConfig::for_task(task)?;
        if let Some((v, p)) = o.optional("space") {
            cfg.space = parse_space(v, p)?;
        }
        if let Some((v, _)) = o.optional("budget") {
            cfg.settings.budget = v.as_u64().ok_or_else(|| invalid("budget", "expected a positive integer"))?;
        }
        if let Some((v, p)) = o.optional("seeds") {
            let Value::Array(items) = v else {
                return Err(invalid("seeds", "expected an array"));
            };
            cfg.seeds = items
                .iter()
                .enumerate()
                .map(|(i, s)| s.as_u64().ok_or_else(|| ProfileError::field(&p.index(i), "expected a seed")))
                .collect::<Result<_, _>>()?;
        }
        if let Some((v, p)) = o.optional("out") {
            cfg.out = PathBuf::from(as_str(v, &p)?);
        }
        if let Some((v, p)) = o.optional("top_k") {
            cfg.top_k = as_usize(v, &p)?;
        }
        if let Some((v, p)) = o.optional("window") {
            cfg.window = as_usize(v, &p)?;
        }
        if let Some((v, p)) = o.optional("perplexity_c") {
            cfg.perplexity_c = as_real(v, &p)?;
        }
        if let Some((v, p)) = o.optional("landscape_seed") {
            cfg.landscape_seed = v.as_u64().ok_or_else(|| ProfileError::field(&p, "expected a seed"))?;
        }
        if let Some((v, p)) = o.optional("sizes") {
            let Value::Array(items) = v else {
                return Err(invalid("sizes", "expected [train, valid, test]"));
            };
            if items.len() != 3 {
                return Err(invalid("sizes", "expected [train, valid, test]"));
            }
            let mut s = [0; 3];
            for (i, item) in items.iter().enumerate() {
                s[i] = as_usize(item, &p.index(i))?;
            }
            cfg.sizes = Some(s);
        }
        if let Some((v, p)) = o.optional("schedule") {
            let mut s = Obj::new(v, p)?;
            cfg.settings.schedule = DepthSchedule {
                start: s.usize("start")?,
                step: s.usize("step")?,
                every: s.usize("every")?,
            };
            s.finish()?;
        }
        if let Some((v, p)) = o.optional("controller") {
            parse_controller(v, p, &mut cfg.settings)?;
        }
        if let Some((v, p)) = o.optional("cluster") {
            cfg.cluster = parse_cluster(v, p)?;
        }
        if let Some((v, p)) = o.optional("training") {
            parse_training(v, p, &mut cfg)?;
        }
        o.finish()?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.settings.budget == 0 {
            return Err(invalid("budget", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "must list at least one seed"));
        }
        if self.top_k == 0 || self.window == 0 || self.settings.schedule.every == 0 {
            return Err(invalid("top_k", "top_k, window and schedule.every must be positive"));
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(invalid("training", "epochs and batch_size must be positive"));
        }
        self.space.check().map_err(|e| invalid("space", e.to_string()))?;
        self.cluster
            .check()
            .map_err(|e| invalid("cluster", e.to_string()))?;
        let images = matches!(self.task.as_str(), "synthetic-shapes" | "cifar10");
        if images != matches!(self.space, SearchSpace::Conv(_)) {
            return Err(invalid(
                "space",
                format!("task {} needs a {} space", self.task, if images { "conv" } else { "cell" }),
            ));
        }
        Ok(())
    }

    /// Builds the task's evaluator. Tasks needing data that is absent are
    /// reported as unavailable.
    pub fn evaluator(&self) -> Result<Box<dyn Evaluator>, ConfigError> {
        if self.task == "rigged" {
            let mut rng = ChaCha8Rng::seed_from_u64(self.landscape_seed);
            let planted = sample_uniform(&self.space, 0, &mut rng);
            return Ok(Box::new(RiggedLandscape::with_planted(
                self.space.clone(),
                &planted,
                self.landscape_seed,
            )?));
        }
        let task = self.load_task()?;
        Ok(Box::new(
            TaskEvaluator::new(task, self.space.clone(), self.training.clone())?.with_perplexity_c(self.perplexity_c),
        ))
    }

    pub fn load_task(&self) -> Result<Task, ConfigError> {
        let seed = self.landscape_seed;
        Ok(match self.task.as_str() {
            "synthetic-shapes" => synthetic_shapes(seed, self.sizes.unwrap_or([4000, 800, 800]))?,
            "copy-memory" => copy_memory(seed, self.sizes.unwrap_or([2048, 256, 256]), 3)?,
            "char-toy" => char_toy(self.sizes.map_or(35, |s| s[0]))?,
            "cifar10" => {
                let dir = std::env::var_os("NASFORGE_DATA")
                    .ok_or_else(|| invalid("task", "cifar10 needs NASFORGE_DATA to point at the data directory"))?;
                cifar10(std::path::Path::new(&dir))?
                    .ok_or_else(|| invalid("task", "cifar10 batches not found under NASFORGE_DATA"))?
            }
            other => return Err(invalid("task", format!("{other} has no dataset"))),
        })
    }

    /// The effective configuration in profile form, for run directories.
    pub fn to_text(&self) -> String {
        let real = profile::real;
        let space = match &self.space {
            SearchSpace::Conv(s) => {
                let mut v = json!({
                    "family": "conv",
                    "filter_heights": s.filter_heights,
                    "filter_widths": s.filter_widths,
                    "num_filters": s.num_filters,
                    "skip_connections": s.skip_connections,
                    "pool_after": s.pool_after,
                });
                if let Some(st) = &s.strides {
                    v["strides"] = json!(st);
                }
                v
            }
            SearchSpace::Cell(s) => json!({
                "family": "cell",
                "base": s.base,
                "combiners": s.combiners.iter().map(|c| c.name()).collect::<Vec<_>>(),
                "activations": s.activations.iter().map(|a| a.name()).collect::<Vec<_>>(),
            }),
        };
        let st = &self.settings;
        let mut controller = json!({
            "hidden": st.controller.hidden,
            "layers": st.controller.lstm_layers,
            "init_range": real(st.controller.init_range),
            "learning_rate": real(st.optimizer.learning_rate),
            "baseline_decay": real(st.baseline_decay),
            "checkpoint_every": st.checkpoint_every,
        });
        controller["clip_norm"] = st.clip_norm.map_or(json!("none"), real);
        let c = &self.cluster;
        let mut cluster = json!({
            "shards": c.shards,
            "replicas": c.replicas,
            "children_per_replica": c.children_per_replica,
            "threshold": c.threshold,
            "workers": c.workers,
            "deterministic": c.deterministic,
            "crash_rate": real(c.crash_rate),
        });
        if let Some(s) = c.staleness {
            cluster["staleness"] = json!(s);
        }
        let t = &self.training;
        let mut training = json!({
            "preset": self.preset,
            "epochs": t.epochs,
            "batch_size": t.batch_size,
            "learning_rate": real(t.optimizer.learning_rate),
            "weight_decay": real(t.optimizer.weight_decay),
            "norm_epsilon": real(t.norm_epsilon),
            "param_budget": t.param_budget,
        });
        if let Some(d) = t.decay_epoch {
            training["decay_epoch"] = json!(d);
        }
        let mut v = json!({
            "task": self.task,
            "space": space,
            "budget": st.budget,
            "seeds": self.seeds,
            "out": self.out.to_string_lossy(),
            "top_k": self.top_k,
            "window": self.window,
            "perplexity_c": real(self.perplexity_c),
            "landscape_seed": self.landscape_seed,
            "schedule": {"start": st.schedule.start, "step": st.schedule.step, "every": st.schedule.every},
            "controller": controller,
            "cluster": cluster,
            "training": training,
        });
        if let Some(s) = self.sizes {
            v["sizes"] = json!(s);
        }
        profile::to_text(&v)
    }
}

fn task_metric(task: &str) -> Metric {
    match task {
        "synthetic-shapes" | "cifar10" | "rigged" => Metric::Accuracy,
        _ => Metric::Perplexity,
    }
}

fn usize_list(v: &Value, p: &Path) -> Result<Vec<usize>, ProfileError> {
    match v {
        Value::Array(items) => items.iter().enumerate().map(|(i, x)| as_usize(x, &p.index(i))).collect(),
        _ => Err(ProfileError::field(p, "expected an array of integers")),
    }
}

fn parse_space(v: &Value, p: Path) -> Result<SearchSpace, ConfigError> {
    let mut o = Obj::new(v, p)?;
    let space = match o.str("family")? {
        "conv" => {
            let mut s = ConvSearchSpace::default();
            if let Some((v, p)) = o.optional("filter_heights") {
                s.filter_heights = usize_list(v, &p)?;
            }
            if let Some((v, p)) = o.optional("filter_widths") {
                s.filter_widths = usize_list(v, &p)?;
            }
            if let Some((v, p)) = o.optional("num_filters") {
                s.num_filters = usize_list(v, &p)?;
            }
            if let Some((v, p)) = o.optional("strides") {
                s.strides = Some(usize_list(v, &p)?);
            }
            if let Some((v, p)) = o.optional("pool_after") {
                s.pool_after = usize_list(v, &p)?;
            }
            if o.optional("skip_connections").is_some() {
                s.skip_connections = o.bool("skip_connections")?;
            }
            SearchSpace::Conv(s)
        }
        "cell" => {
            let mut s = CellSearchSpace::with_base(2);
            if let Some((v, p)) = o.optional("base") {
                s.base = as_usize(v, &p)?;
            }
            if let Some((v, p)) = o.optional("combiners") {
                let (items, p) = (v.as_array().ok_or_else(|| ProfileError::field(&p, "expected an array"))?, p);
                s.combiners = items
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let path = p.index(i);
                        as_str(x, &path)?.parse::<Combiner>().map_err(|e| invalid(&path.to_string(), e.to_string()))
                    })
                    .collect::<Result<_, _>>()?;
            }
            if let Some((v, p)) = o.optional("activations") {
                let (items, p) = (v.as_array().ok_or_else(|| ProfileError::field(&p, "expected an array"))?, p);
                s.activations = items
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let path = p.index(i);
                        as_str(x, &path)?.parse::<Activation>().map_err(|e| invalid(&path.to_string(), e.to_string()))
                    })
                    .collect::<Result<_, _>>()?;
            }
            SearchSpace::Cell(s)
        }
        other => return Err(invalid("space.family", format!("expected conv or cell, got \"{other}\""))),
    };
    o.finish()?;
    Ok(space)
}

fn parse_controller(v: &Value, p: Path, settings: &mut SearchSettings) -> Result<(), ConfigError> {
    let mut o = Obj::new(v, p)?;
    let mut c: ControllerConfig = settings.controller.clone();
    if let Some((v, p)) = o.optional("hidden") {
        c.hidden = as_usize(v, &p)?;
    }
    if let Some((v, p)) = o.optional("layers") {
        c.lstm_layers = as_usize(v, &p)?;
    }
    if let Some((v, p)) = o.optional("init_range") {
        c.init_range = as_real(v, &p)?;
    }
    if let Some((v, p)) = o.optional("learning_rate") {
        settings.optimizer = OptimizerConfig::adam(as_real(v, &p)?);
    }
    if let Some((v, p)) = o.optional("baseline_decay") {
        settings.baseline_decay = as_real(v, &p)?;
    }
    if let Some((v, p)) = o.optional("clip_norm") {
        settings.clip_norm = match v {
            Value::String(s) if s == "none" => None,
            _ => Some(as_real(v, &p)?),
        };
    }
    if let Some((v, _)) = o.optional("checkpoint_every") {
        settings.checkpoint_every = v
            .as_u64()
            .ok_or_else(|| invalid("controller.checkpoint_every", "expected an integer"))?;
    }
    o.finish()?;
    settings.controller = c;
    Ok(())
}

fn parse_cluster(v: &Value, p: Path) -> Result<ClusterConfig, ConfigError> {
    let mut o = Obj::new(v, p)?;
    let mut c = match o.optional("preset") {
        Some((v, p)) => match as_str(v, &p)? {
            "paper-cifar" => ClusterConfig::paper_cifar(),
            "paper-ptb" => ClusterConfig::paper_ptb(),
            "local" => ClusterConfig::default(),
            other => return Err(invalid("cluster.preset", format!("unknown preset \"{other}\""))),
        },
        None => ClusterConfig::default(),
    };
    for (key, slot) in [
        ("shards", &mut c.shards),
        ("replicas", &mut c.replicas),
        ("children_per_replica", &mut c.children_per_replica),
        ("threshold", &mut c.threshold),
        ("workers", &mut c.workers),
    ] {
        if let Some((v, p)) = o.optional(key) {
            *slot = as_usize(v, &p)?;
        }
    }
    if o.optional("deterministic").is_some() {
        c.deterministic = o.bool("deterministic")?;
    }
    if let Some((v, p)) = o.optional("staleness") {
        c.staleness = Some(v.as_u64().ok_or_else(|| ProfileError::field(&p, "expected an integer"))?);
    }
    if let Some((v, p)) = o.optional("crash_rate") {
        c.crash_rate = as_real(v, &p)?;
    }
    o.finish()?;
    Ok(c)
}

fn parse_training(v: &Value, p: Path, cfg: &mut ExperimentConfig) -> Result<(), ConfigError> {
    let mut o = Obj::new(v, p)?;
    if let Some((v, p)) = o.optional("preset") {
        let name = as_str(v, &p)?;
        cfg.training = TrainConfig::preset(name, cfg.metric())
            .ok_or_else(|| invalid("training.preset", format!("unknown preset \"{name}\"")))?;
        cfg.preset = name.to_string();
    }
    let t = &mut cfg.training;
    if let Some((v, p)) = o.optional("epochs") {
        t.epochs = as_usize(v, &p)?;
    }
    if let Some((v, p)) = o.optional("batch_size") {
        t.batch_size = as_usize(v, &p)?;
    }
    if let Some((v, p)) = o.optional("learning_rate") {
        t.optimizer.learning_rate = as_real(v, &p)?;
    }
    if let Some((v, p)) = o.optional("weight_decay") {
        t.optimizer.weight_decay = as_real(v, &p)?;
    }
    if let Some((v, p)) = o.optional("norm_epsilon") {
        t.norm_epsilon = as_real(v, &p)?;
    }
    if let Some((v, p)) = o.optional("decay_epoch") {
        t.decay_epoch = Some(as_usize(v, &p)?);
    }
    if let Some((v, p)) = o.optional("param_budget") {
        t.param_budget = as_usize(v, &p)?;
    }
    o.finish()?;
    Ok(())
}

/// Parses a grid file. Missing axes keep the single value from `base`;
/// `decay_epochs` entries are integers or `"none"`.
pub fn parse_grid(text: &str, base: &TrainConfig) -> Result<Grid, ConfigError> {
    let value = profile::parse(text)?;
    let mut o = Obj::new(&value, Path::root())?;
    let mut grid = Grid::single(base);
    let reals = |v: &Value, p: &Path| -> Result<Vec<f64>, ConfigError> {
        let items = v.as_array().ok_or_else(|| ProfileError::field(p, "expected an array"))?;
        Ok(items
            .iter()
            .enumerate()
            .map(|(i, x)| as_real(x, &p.index(i)))
            .collect::<Result<_, _>>()?)
    };
    if let Some((v, p)) = o.optional("learning_rates") {
        grid.learning_rates = reals(v, &p)?;
    }
    if let Some((v, p)) = o.optional("weight_decays") {
        grid.weight_decays = reals(v, &p)?;
    }
    if let Some((v, p)) = o.optional("norm_epsilons") {
        grid.norm_epsilons = reals(v, &p)?;
    }
    if let Some((v, p)) = o.optional("decay_epochs") {
        let items = v.as_array().ok_or_else(|| ProfileError::field(&p, "expected an array"))?;
        grid.decay_epochs = items
            .iter()
            .enumerate()
            .map(|(i, x)| match x {
                Value::String(s) if s == "none" => Ok(None),
                _ => as_usize(x, &p.index(i)).map(Some),
            })
            .collect::<Result<_, _>>()?;
    }
    o.finish()?;
    if grid.points().is_empty() {
        return Err(invalid("grid", "every axis needs at least one value"));
    }
    Ok(grid)
}
