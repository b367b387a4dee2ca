//! The action schedule a controller rollout follows, and the mapping
//! between action sequences and descriptions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    validate, ArchDescription, ArchError, Block, CellDescription, CellIndices, CellSearchSpace,
    ConvArch, ConvLayerSpec, ConvSearchSpace, SearchSpace,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    FilterHeight,
    FilterWidth,
    StrideHeight,
    StrideWidth,
    NumFilters,
    Combiner,
    Activation,
    CellIndex,
}

impl TokenClass {
    pub const ALL: [TokenClass; 8] = [
        TokenClass::FilterHeight,
        TokenClass::FilterWidth,
        TokenClass::StrideHeight,
        TokenClass::StrideWidth,
        TokenClass::NumFilters,
        TokenClass::Combiner,
        TokenClass::Activation,
        TokenClass::CellIndex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenClass::FilterHeight => "filter_height",
            TokenClass::FilterWidth => "filter_width",
            TokenClass::StrideHeight => "stride_height",
            TokenClass::StrideWidth => "stride_width",
            TokenClass::NumFilters => "num_filters",
            TokenClass::Combiner => "combiner",
            TokenClass::Activation => "activation",
            TokenClass::CellIndex => "cell_index",
        }
    }

    /// Number of choices for this class, or `None` if the space never emits it.
    pub fn width(self, space: &SearchSpace) -> Option<usize> {
        match (self, space) {
            (TokenClass::FilterHeight, SearchSpace::Conv(s)) => Some(s.filter_heights.len()),
            (TokenClass::FilterWidth, SearchSpace::Conv(s)) => Some(s.filter_widths.len()),
            (TokenClass::StrideHeight | TokenClass::StrideWidth, SearchSpace::Conv(s)) => {
                s.strides.as_ref().map(Vec::len)
            }
            (TokenClass::NumFilters, SearchSpace::Conv(s)) => Some(s.num_filters.len()),
            (TokenClass::Combiner, SearchSpace::Cell(s)) => Some(s.combiners.len()),
            (TokenClass::Activation, SearchSpace::Cell(s)) => Some(s.activations.len()),
            (TokenClass::CellIndex, SearchSpace::Cell(s)) => Some(s.nodes()),
            _ => None,
        }
    }
}

/// One decision of a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Token(TokenClass),
    /// Skip decisions for `layer` against each of the layers before it.
    Skips { layer: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Position within the class's search-space list.
    Token(usize),
    /// One bit per earlier layer, in ascending layer order.
    Skips(Vec<bool>),
}

fn conv_layer_tokens(space: &ConvSearchSpace) -> Vec<TokenClass> {
    let mut t = vec![TokenClass::FilterHeight, TokenClass::FilterWidth];
    if space.strides.is_some() {
        t.extend([TokenClass::StrideHeight, TokenClass::StrideWidth]);
    }
    t.push(TokenClass::NumFilters);
    t
}

/// Steps of a conv rollout for one layer. The first layer has no earlier
/// layers and therefore no skip step.
pub(crate) fn conv_layer_steps(space: &ConvSearchSpace, layer: usize) -> Vec<Step> {
    let mut steps: Vec<Step> = conv_layer_tokens(space).into_iter().map(Step::Token).collect();
    if space.skip_connections && layer > 0 {
        steps.push(Step::Skips { layer });
    }
    steps
}

pub(crate) fn cell_steps(space: &CellSearchSpace) -> Vec<Step> {
    let mut steps = Vec::with_capacity(2 * space.nodes() + 4);
    for _ in 0..space.nodes() + 1 {
        steps.push(Step::Token(TokenClass::Combiner));
        steps.push(Step::Token(TokenClass::Activation));
    }
    steps.push(Step::Token(TokenClass::CellIndex));
    steps.push(Step::Token(TokenClass::CellIndex));
    steps
}

/// The full step sequence. `depth` is the conv layer count; cells ignore it.
pub fn schedule(space: &SearchSpace, depth: usize) -> Vec<Step> {
    match space {
        SearchSpace::Conv(s) => (0..depth).flat_map(|i| conv_layer_steps(s, i)).collect(),
        SearchSpace::Cell(s) => cell_steps(s),
    }
}

fn index_of<T: PartialEq + std::fmt::Debug>(list: &[T], v: &T) -> Result<usize, ArchError> {
    list.iter()
        .position(|x| x == v)
        .ok_or_else(|| ArchError::Decode(format!("{v:?} not in {list:?}")))
}

/// Actions that reproduce `desc`. The description must be valid.
pub fn encode(desc: &ArchDescription, space: &SearchSpace) -> Result<Vec<Action>, ArchError> {
    let violations = validate(desc, space);
    if !violations.is_empty() {
        return Err(ArchError::Invalid(violations));
    }
    let mut out = Vec::new();
    match (desc, space) {
        (ArchDescription::Conv(arch), SearchSpace::Conv(s)) => {
            for (i, l) in arch.layers.iter().enumerate() {
                for step in conv_layer_steps(s, i) {
                    out.push(match step {
                        Step::Token(TokenClass::FilterHeight) => {
                            Action::Token(index_of(&s.filter_heights, &l.filter_height)?)
                        }
                        Step::Token(TokenClass::FilterWidth) => {
                            Action::Token(index_of(&s.filter_widths, &l.filter_width)?)
                        }
                        Step::Token(TokenClass::StrideHeight) => {
                            Action::Token(index_of(s.stride_list(), &l.stride_height)?)
                        }
                        Step::Token(TokenClass::StrideWidth) => {
                            Action::Token(index_of(s.stride_list(), &l.stride_width)?)
                        }
                        Step::Token(TokenClass::NumFilters) => {
                            Action::Token(index_of(&s.num_filters, &l.num_filters)?)
                        }
                        Step::Skips { layer } => {
                            Action::Skips((0..layer).map(|j| l.skip_inputs.contains(&j)).collect())
                        }
                        Step::Token(other) => unreachable!("{other:?} in a conv schedule"),
                    });
                }
            }
        }
        (ArchDescription::Cell(cell), SearchSpace::Cell(s)) => {
            for b in cell.nodes.iter().chain(std::iter::once(&cell.inject)) {
                out.push(Action::Token(index_of(&s.combiners, &b.combiner)?));
                out.push(Action::Token(index_of(&s.activations, &b.activation)?));
            }
            out.push(Action::Token(cell.indices.output));
            out.push(Action::Token(cell.indices.target));
        }
        _ => unreachable!("validate rejects family mismatches"),
    }
    Ok(out)
}

fn token(actions: &[Action], at: usize, width: usize) -> Result<usize, ArchError> {
    match actions.get(at) {
        Some(Action::Token(v)) if *v < width => Ok(*v),
        Some(Action::Token(v)) => Err(ArchError::Decode(format!(
            "action {at}: token {v} out of range for {width} choices"
        ))),
        Some(Action::Skips(_)) => Err(ArchError::Decode(format!("action {at}: expected a token"))),
        None => Err(ArchError::Decode(format!("sequence ends before action {at}"))),
    }
}

/// Rebuilds a description from actions. Conv depth is implied by the
/// sequence length.
pub fn decode(space: &SearchSpace, actions: &[Action]) -> Result<ArchDescription, ArchError> {
    match space {
        SearchSpace::Conv(s) => decode_conv(s, actions).map(ArchDescription::Conv),
        SearchSpace::Cell(s) => decode_cell(s, actions).map(ArchDescription::Cell),
    }
}

fn decode_conv(s: &ConvSearchSpace, actions: &[Action]) -> Result<ConvArch, ArchError> {
    let strides = s.stride_list();
    let mut layers = Vec::new();
    let mut at = 0;
    while at < actions.len() {
        let i = layers.len();
        let mut l = ConvLayerSpec {
            filter_height: 0,
            filter_width: 0,
            stride_height: 1,
            stride_width: 1,
            num_filters: 0,
            skip_inputs: Default::default(),
        };
        for step in conv_layer_steps(s, i) {
            match step {
                Step::Token(TokenClass::FilterHeight) => {
                    l.filter_height = s.filter_heights[token(actions, at, s.filter_heights.len())?]
                }
                Step::Token(TokenClass::FilterWidth) => {
                    l.filter_width = s.filter_widths[token(actions, at, s.filter_widths.len())?]
                }
                Step::Token(TokenClass::StrideHeight) => {
                    l.stride_height = strides[token(actions, at, strides.len())?]
                }
                Step::Token(TokenClass::StrideWidth) => {
                    l.stride_width = strides[token(actions, at, strides.len())?]
                }
                Step::Token(TokenClass::NumFilters) => {
                    l.num_filters = s.num_filters[token(actions, at, s.num_filters.len())?]
                }
                Step::Skips { layer } => match actions.get(at) {
                    Some(Action::Skips(bits)) if bits.len() == layer => {
                        l.skip_inputs = (0..layer).filter(|&j| bits[j]).collect();
                    }
                    other => {
                        return Err(ArchError::Decode(format!(
                            "action {at}: expected {layer} skip bits, got {other:?}"
                        )))
                    }
                },
                Step::Token(other) => unreachable!("{other:?} in a conv schedule"),
            }
            at += 1;
        }
        layers.push(l);
    }
    if layers.is_empty() {
        return Err(ArchError::Decode("empty action sequence".into()));
    }
    Ok(ConvArch { layers })
}

fn decode_cell(s: &CellSearchSpace, actions: &[Action]) -> Result<CellDescription, ArchError> {
    let n = s.nodes();
    if actions.len() != 2 * n + 4 {
        return Err(ArchError::Decode(format!(
            "base {} cells take {} actions, got {}",
            s.base,
            2 * n + 4,
            actions.len()
        )));
    }
    let block = |k: usize| -> Result<Block, ArchError> {
        Ok(Block {
            combiner: s.combiners[token(actions, 2 * k, s.combiners.len())?],
            activation: s.activations[token(actions, 2 * k + 1, s.activations.len())?],
        })
    };
    Ok(CellDescription {
        nodes: (0..n).map(block).collect::<Result<_, _>>()?,
        inject: block(n)?,
        indices: CellIndices {
            output: token(actions, 2 * n + 2, n)?,
            target: token(actions, 2 * n + 3, n)?,
        },
    })
}

/// Uniform random description: every token uniform over its list, every
/// skip bit a fair coin.
pub fn sample_uniform<R: Rng + ?Sized>(space: &SearchSpace, depth: usize, rng: &mut R) -> ArchDescription {
    let actions: Vec<Action> = schedule(space, depth)
        .into_iter()
        .map(|step| match step {
            Step::Token(class) => {
                let w = class.width(space).expect("schedule only emits classes the space has");
                Action::Token(rng.random_range(0..w))
            }
            Step::Skips { layer } => Action::Skips((0..layer).map(|_| rng.random_bool(0.5)).collect()),
        })
        .collect();
    decode(space, &actions).expect("sampled actions follow the schedule")
}
