//! Lowering of architecture descriptions to executable graphs.

mod cell;
mod conv;
mod sequence;

pub use cell::{compile_cell, reference_lstm, CellParams, LstmParams, RecurrentCell, RecurrentParams};
pub use conv::{compile_conv, ConvOptions};
pub use sequence::{compile_sequence_model, hidden_for_budget, sequence_param_count, SequenceShape};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::arch::Violation;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numeric::gradcheck::{check_graph, GradCheckOptions, GradCheckReport};
use crate::numeric::{Feed, Graph, NumericError, ParamSet, Tensor};

fn labels<R: Rng + ?Sized>(n: usize, classes: usize, rng: &mut R) -> Tensor {
    Tensor::new(vec![n], (0..n).map(|_| rng.random_range(0..classes) as f64).collect()).expect("shape matches")
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("description is invalid: {}", .0.first().map(ToString::to_string).unwrap_or_default())]
    Invalid(Vec<Violation>),
    #[error("{what} must be at least 1")]
    Dimension { what: &'static str },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// How a parameter slot is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform { limit: f64 },
    Normal { std: f64 },
    /// Zeros except `value` on the flat range `start..start + len`.
    Band { start: usize, len: usize, value: f64 },
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Uniform { limit } => Tensor::uniform(shape, -limit, limit, rng),
            Init::Normal { std } => Tensor::normal(shape, std, rng),
            Init::Band { start, len, value } => {
                let mut t = Tensor::zeros(shape);
                t.data_mut()[start..start + len].fill(value);
                t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Shapes a compiled graph expects and produces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IoSignature {
    /// Inputs `image` `[batch, h, w, c]` and `labels` `[batch]`; outputs
    /// `logits` `[batch, classes]` and `loss` `[1]`.
    Conv {
        batch: usize,
        image: [usize; 3],
        classes: usize,
    },
    /// Inputs `x` `[batch, input_dim]`, `h_prev` and `c_prev`
    /// `[batch, hidden]`; outputs `h` and `c` `[batch, hidden]`.
    Cell {
        batch: usize,
        input_dim: usize,
        hidden: usize,
    },
    /// Inputs `x{t}` `[batch, vocab]` one-hot and `y{t}` `[batch]` targets
    /// for each step; output `loss` `[1]`.
    Sequence {
        batch: usize,
        vocab: usize,
        length: usize,
    },
}

#[derive(Clone, Debug)]
pub struct CompiledGraph {
    pub graph: Graph,
    pub manifest: BTreeMap<String, SlotSpec>,
    pub signature: IoSignature,
    /// Structural notes printed ahead of the node list.
    pub summary: Vec<String>,
}

impl CompiledGraph {
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        self.manifest
            .iter()
            .map(|(name, spec)| (name.clone(), spec.init.sample(&spec.shape, rng)))
            .collect()
    }

    /// Running normalization statistics at their starting values: mean 0,
    /// variance 1.
    pub fn init_buffers(&self) -> ParamSet {
        self.graph
            .buffers()
            .iter()
            .map(|(name, &c)| {
                let mut data = vec![0.0; 2 * c];
                data[c..].fill(1.0);
                (name.clone(), Tensor::new(vec![2, c], data).expect("c >= 1"))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.manifest.values().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Random inputs matching the signature: uniform reals, valid class
    /// labels, and one-hot tokens for sequence models.
    pub fn random_feed<R: Rng + ?Sized>(&self, rng: &mut R) -> Feed {
        let mut feed = Feed::new();
        for (name, _) in self.graph.inputs() {
            let shape = self.graph.input_shape(name).expect("declared input").to_vec();
            let value = match (&self.signature, name.as_str()) {
                (IoSignature::Conv { classes, .. }, "labels") => labels(shape[0], *classes, rng),
                (IoSignature::Sequence { vocab, .. }, n) if n.starts_with('y') => labels(shape[0], *vocab, rng),
                (IoSignature::Sequence { vocab, .. }, _) => {
                    let mut t = Tensor::zeros(&shape);
                    for r in 0..shape[0] {
                        t.data_mut()[r * vocab + rng.random_range(0..*vocab)] = 1.0;
                    }
                    t
                }
                _ => Tensor::uniform(&shape, -1.0, 1.0, rng),
            };
            feed.insert(name.clone(), value);
        }
        feed
    }

    /// Finite-difference check of every output at freshly initialized
    /// parameters and random inputs; returns the worst report.
    pub fn check_gradients(&self, opts: &GradCheckOptions) -> Result<GradCheckReport, NumericError> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let params = self.init_params(&mut rng);
        let feed = self.random_feed(&mut rng);
        let mut worst = GradCheckReport::default();
        for (name, _) in self.graph.outputs() {
            if name == "logits" {
                continue;
            }
            let r = check_graph(&self.graph, &params, &feed, name, opts)?;
            worst.checked += r.checked;
            worst.max_abs_error = worst.max_abs_error.max(r.max_abs_error);
            if r.max_rel_error >= worst.max_rel_error {
                worst.max_rel_error = r.max_rel_error;
                worst.worst = r.worst.map(|(slot, i)| (format!("{name}: {slot}"), i));
            }
        }
        Ok(worst)
    }

    /// Text dump: signature, structure summary, node list, parameter manifest.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        match &self.signature {
            IoSignature::Conv { batch, image, classes } => {
                let _ = writeln!(out, "signature: conv image [{batch}, {}, {}, {}] -> logits [{batch}, {classes}]", image[0], image[1], image[2]);
            }
            IoSignature::Cell { batch, input_dim, hidden } => {
                let _ = writeln!(
                    out,
                    "signature: cell x [{batch}, {input_dim}], h_prev [{batch}, {hidden}], c_prev [{batch}, {hidden}] -> h, c [{batch}, {hidden}]"
                );
            }
            IoSignature::Sequence { batch, vocab, length } => {
                let _ = writeln!(out, "signature: sequence {length} x [{batch}, {vocab}] -> loss [1]");
            }
        }
        for line in &self.summary {
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out, "nodes: {}", self.graph.nodes().len());
        out.push_str(&self.graph.dump());
        let _ = writeln!(out, "parameters: {} in {} slots", self.param_count(), self.manifest.len());
        for (name, spec) in &self.manifest {
            let n: usize = spec.shape.iter().product();
            let _ = writeln!(out, "  {name} {:?} ({n})", spec.shape);
        }
        out
    }
}

/// Manifest entries for every slot of `graph`, with inits chosen by `init`.
pub(crate) fn manifest_for(graph: &Graph, init: impl Fn(&str, &[usize]) -> Init) -> BTreeMap<String, SlotSpec> {
    graph
        .slots()
        .iter()
        .map(|(name, shape)| {
            (
                name.clone(),
                SlotSpec {
                    shape: shape.clone(),
                    init: init(name, shape),
                },
            )
        })
        .collect()
}
