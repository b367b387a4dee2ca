//! Architecture descriptions for the two families the controller emits,
//! their search spaces, validation, and counting.

mod text;
mod tokens;

pub use text::{parse, parse_any, serialize, FORMAT_VERSION};
pub use tokens::{
    decode, encode, sample_uniform, schedule, Action, Step, TokenClass,
};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::Unary;
use crate::profile::ProfileError;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ArchError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("unknown {kind} \"{name}\"")]
    UnknownOp { kind: &'static str, name: String },
    #[error("{kind} \"{name}\" is already in the space")]
    DuplicateOp { kind: &'static str, name: String },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("{}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("cannot decode actions: {0}")]
    Decode(String),
}

fn format_violations(v: &[Violation]) -> String {
    match v {
        [] => "no violations".into(),
        [one] => one.to_string(),
        [first, rest @ ..] => format!("{first} (and {} more)", rest.len()),
    }
}

/// Binary function joining two node inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Add,
    ElemMult,
    Max,
}

impl Combiner {
    pub const ALL: [Combiner; 3] = [Combiner::Add, Combiner::ElemMult, Combiner::Max];

    pub fn name(self) -> &'static str {
        match self {
            Combiner::Add => "add",
            Combiner::ElemMult => "elem_mult",
            Combiner::Max => "max",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
    Sin,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Identity,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Relu,
        Activation::Sin,
    ];

    pub fn name(self) -> &'static str {
        self.unary().name()
    }

    pub fn unary(self) -> Unary {
        match self {
            Activation::Identity => Unary::Identity,
            Activation::Tanh => Unary::Tanh,
            Activation::Sigmoid => Unary::Sigmoid,
            Activation::Relu => Unary::Relu,
            Activation::Sin => Unary::Sin,
        }
    }
}

impl FromStr for Combiner {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Combiner::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ArchError::UnknownOp {
                kind: "combiner",
                name: s.to_string(),
            })
    }
}

impl FromStr for Activation {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ArchError::UnknownOp {
                kind: "activation",
                name: s.to_string(),
            })
    }
}

impl fmt::Display for Combiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSearchSpace {
    pub filter_heights: Vec<usize>,
    pub filter_widths: Vec<usize>,
    pub num_filters: Vec<usize>,
    /// Candidate strides for both axes; `None` fixes every stride to 1.
    pub strides: Option<Vec<usize>>,
    pub skip_connections: bool,
    /// Layers followed by a fixed 2x2 max pool. Never predicted.
    pub pool_after: Vec<usize>,
}

impl Default for ConvSearchSpace {
    fn default() -> Self {
        ConvSearchSpace {
            filter_heights: vec![1, 3, 5, 7],
            filter_widths: vec![1, 3, 5, 7],
            num_filters: vec![24, 36, 48, 64],
            strides: None,
            skip_connections: true,
            pool_after: Vec::new(),
        }
    }
}

fn check_list(name: &str, list: &[usize]) -> Result<(), ArchError> {
    if list.is_empty() {
        return Err(ArchError::Space(format!("{name} is empty")));
    }
    if list[0] == 0 {
        return Err(ArchError::Space(format!("{name} contains 0")));
    }
    if list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ArchError::Space(format!("{name} is not strictly increasing: {list:?}")));
    }
    Ok(())
}

impl ConvSearchSpace {
    pub fn check(&self) -> Result<(), ArchError> {
        check_list("filter_heights", &self.filter_heights)?;
        check_list("filter_widths", &self.filter_widths)?;
        check_list("num_filters", &self.num_filters)?;
        if let Some(s) = &self.strides {
            check_list("strides", s)?;
        }
        Ok(())
    }

    /// Stride candidates, `[1]` when strides are fixed.
    pub fn stride_list(&self) -> &[usize] {
        self.strides.as_deref().unwrap_or(&[1])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSearchSpace {
    pub combiners: Vec<Combiner>,
    pub activations: Vec<Activation>,
    /// Number of leaves in the cell tree.
    pub base: usize,
}

impl Default for CellSearchSpace {
    fn default() -> Self {
        CellSearchSpace {
            combiners: vec![Combiner::Add, Combiner::ElemMult],
            activations: vec![
                Activation::Identity,
                Activation::Tanh,
                Activation::Sigmoid,
                Activation::Relu,
            ],
            base: 8,
        }
    }
}

impl CellSearchSpace {
    pub fn with_base(base: usize) -> Self {
        CellSearchSpace {
            base,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<(), ArchError> {
        if self.base < 2 || !self.base.is_power_of_two() {
            return Err(ArchError::Space(format!(
                "base must be a power of two and at least 2, got {}",
                self.base
            )));
        }
        if self.combiners.is_empty() || self.activations.is_empty() {
            return Err(ArchError::Space("combiner and activation lists must be non-empty".into()));
        }
        if self.combiners.iter().collect::<BTreeSet<_>>().len() != self.combiners.len()
            || self.activations.iter().collect::<BTreeSet<_>>().len() != self.activations.len()
        {
            return Err(ArchError::Space("combiner and activation lists must not repeat".into()));
        }
        Ok(())
    }

    /// Number of tree nodes, `2 * base - 1`.
    pub fn nodes(&self) -> usize {
        2 * self.base - 1
    }
}

/// Appends operations to a cell space. Names must be known ops that are not
/// already present.
pub fn extend_space(
    space: &CellSearchSpace,
    extra_combiners: &[&str],
    extra_activations: &[&str],
) -> Result<CellSearchSpace, ArchError> {
    let mut out = space.clone();
    for name in extra_combiners {
        let c: Combiner = name.parse()?;
        if out.combiners.contains(&c) {
            return Err(ArchError::DuplicateOp {
                kind: "combiner",
                name: name.to_string(),
            });
        }
        out.combiners.push(c);
    }
    for name in extra_activations {
        let a: Activation = name.parse()?;
        if out.activations.contains(&a) {
            return Err(ArchError::DuplicateOp {
                kind: "activation",
                name: name.to_string(),
            });
        }
        out.activations.push(a);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchSpace {
    Conv(ConvSearchSpace),
    Cell(CellSearchSpace),
}

impl SearchSpace {
    pub fn check(&self) -> Result<(), ArchError> {
        match self {
            SearchSpace::Conv(s) => s.check(),
            SearchSpace::Cell(s) => s.check(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            SearchSpace::Conv(_) => "conv",
            SearchSpace::Cell(_) => "cell",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub filter_height: usize,
    pub filter_width: usize,
    pub stride_height: usize,
    pub stride_width: usize,
    pub num_filters: usize,
    /// Earlier layers feeding this one.
    pub skip_inputs: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConvArch {
    pub layers: Vec<ConvLayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Block {
    pub combiner: Combiner,
    pub activation: Activation,
}

impl Block {
    pub fn new(combiner: Combiner, activation: Activation) -> Self {
        Block { combiner, activation }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndices {
    /// Node whose pre-activation value becomes `c_t`.
    pub output: usize,
    /// Node that receives `c_{t-1}`.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellDescription {
    /// One block per tree node: leaves `0..base`, then internal nodes.
    pub nodes: Vec<Block>,
    pub inject: Block,
    pub indices: CellIndices,
}

impl CellDescription {
    pub fn base(&self) -> usize {
        self.nodes.len().div_ceil(2)
    }

    /// The base-2 worked example: blocks (add, tanh), (elem_mult, relu),
    /// (elem_mult, sigmoid); inject (add, relu); c_t from node 1, c_{t-1}
    /// into node 0.
    pub fn worked_example() -> Self {
        CellDescription {
            nodes: vec![
                Block::new(Combiner::Add, Activation::Tanh),
                Block::new(Combiner::ElemMult, Activation::Relu),
                Block::new(Combiner::ElemMult, Activation::Sigmoid),
            ],
            inject: Block::new(Combiner::Add, Activation::Relu),
            indices: CellIndices { output: 1, target: 0 },
        }
    }

    /// A plain tanh recurrence in cell form: every node adds, only the root
    /// squashes, and `c_{t-1}` is added into leaf 1 whose pre-activation is
    /// carried as `c_t`.
    pub fn tanh_rnn(base: usize) -> Self {
        let n = 2 * base - 1;
        let mut nodes = vec![Block::new(Combiner::Add, Activation::Identity); n];
        nodes[n - 1].activation = Activation::Tanh;
        CellDescription {
            nodes,
            inject: Block::new(Combiner::Add, Activation::Identity),
            indices: CellIndices { output: 1, target: 1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchDescription {
    Conv(ConvArch),
    Cell(CellDescription),
}

impl ArchDescription {
    pub fn family(&self) -> &'static str {
        match self {
            ArchDescription::Conv(_) => "conv",
            ArchDescription::Cell(_) => "cell",
        }
    }
}

/// One failed constraint: where, what value, and why.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub value: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}: {}", self.path, self.value, self.reason)
    }
}

fn violation(path: String, value: impl fmt::Display, reason: &str) -> Violation {
    Violation {
        path,
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

/// Checks every structural invariant and space membership. An empty list
/// means the description is valid.
pub fn validate(desc: &ArchDescription, space: &SearchSpace) -> Vec<Violation> {
    match (desc, space) {
        (ArchDescription::Conv(a), SearchSpace::Conv(s)) => validate_conv(a, s),
        (ArchDescription::Cell(c), SearchSpace::Cell(s)) => validate_cell(c, s),
        (d, s) => vec![violation(
            "family".into(),
            d.family(),
            &format!("description family does not match the {} space", s.family()),
        )],
    }
}

pub fn validate_conv(arch: &ConvArch, space: &ConvSearchSpace) -> Vec<Violation> {
    let mut out = Vec::new();
    if arch.layers.is_empty() {
        out.push(violation("layers".into(), "[]", "at least one layer is required"));
    }
    let strides = space.stride_list();
    for (i, l) in arch.layers.iter().enumerate() {
        let fields: [(&str, usize, &[usize]); 5] = [
            ("filter_height", l.filter_height, &space.filter_heights),
            ("filter_width", l.filter_width, &space.filter_widths),
            ("stride_height", l.stride_height, strides),
            ("stride_width", l.stride_width, strides),
            ("num_filters", l.num_filters, &space.num_filters),
        ];
        for (name, v, list) in fields {
            if !list.contains(&v) {
                out.push(violation(format!("layers[{i}].{name}"), v, "not in the search space"));
            }
        }
        for &j in &l.skip_inputs {
            if j >= i {
                out.push(violation(
                    format!("layers[{i}].skip_inputs"),
                    j,
                    "skip references later layer",
                ));
            }
        }
        if !space.skip_connections && !l.skip_inputs.is_empty() {
            out.push(violation(
                format!("layers[{i}].skip_inputs"),
                format!("{:?}", l.skip_inputs),
                "skip connections are disabled in this space",
            ));
        }
    }
    out
}

pub fn validate_cell(cell: &CellDescription, space: &CellSearchSpace) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = space.nodes();
    if cell.nodes.len() != n {
        out.push(violation(
            "nodes".into(),
            cell.nodes.len(),
            &format!("base {} requires {n} node blocks", space.base),
        ));
    }
    let mut check_block = |path: String, b: &Block| {
        if !space.combiners.contains(&b.combiner) {
            out.push(violation(format!("{path}.combiner"), b.combiner, "not in the search space"));
        }
        if !space.activations.contains(&b.activation) {
            out.push(violation(format!("{path}.activation"), b.activation, "not in the search space"));
        }
    };
    for (i, b) in cell.nodes.iter().enumerate() {
        check_block(format!("nodes[{i}]"), b);
    }
    check_block("inject".into(), &cell.inject);
    for (name, v) in [("output", cell.indices.output), ("target", cell.indices.target)] {
        if v >= n {
            out.push(violation(format!("cell_indices.{name}"), v, "not a tree node index"));
        }
    }
    out
}

/// Exact number of distinct descriptions. `depth` is the layer count for
/// conv spaces and ignored for cells.
pub fn count_search_space(space: &SearchSpace, depth: usize) -> BigUint {
    match space {
        SearchSpace::Conv(s) => count_conv(s, depth),
        SearchSpace::Cell(s) => count_cell(s),
    }
}

pub fn count_conv(space: &ConvSearchSpace, depth: usize) -> BigUint {
    let s = space.stride_list().len();
    let per_layer = BigUint::from(
        space.filter_heights.len() * space.filter_widths.len() * space.num_filters.len() * s * s,
    );
    let mut total = BigUint::from(1u32);
    for i in 0..depth {
        total *= &per_layer;
        if space.skip_connections {
            total <<= i;
        }
    }
    total
}

pub fn count_cell(space: &CellSearchSpace) -> BigUint {
    let block = BigUint::from(space.combiners.len() * space.activations.len());
    let n = space.nodes();
    block.pow(n as u32 + 1) * BigUint::from(n * n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_counts() {
        let base8 = count_cell(&CellSearchSpace::default());
        assert_eq!(base8, BigUint::from(8u32).pow(16) * BigUint::from(225u32));
        assert_eq!(count_cell(&CellSearchSpace::with_base(2)), BigUint::from(36_864u32));
        let extended = extend_space(&CellSearchSpace::with_base(2), &["max"], &["sin"]).unwrap();
        assert_eq!(count_cell(&extended), BigUint::from(455_625u32));
    }

    #[test]
    fn conv_count_single_layer() {
        let space = ConvSearchSpace {
            skip_connections: false,
            ..Default::default()
        };
        assert_eq!(count_conv(&space, 1), BigUint::from(64u32));
        let skips = ConvSearchSpace::default();
        assert_eq!(count_conv(&skips, 3), BigUint::from(64u64.pow(3) * 8));
    }

    #[test]
    fn extend_space_rejects_unknown_and_duplicates() {
        let base = CellSearchSpace::default();
        assert_eq!(extend_space(&base, &[], &[]).unwrap(), base);
        let ext = extend_space(&base, &["max"], &["sin"]).unwrap();
        assert_eq!(ext.combiners, vec![Combiner::Add, Combiner::ElemMult, Combiner::Max]);
        assert_eq!(ext.activations.last(), Some(&Activation::Sin));
        assert!(matches!(
            extend_space(&base, &["sub"], &[]),
            Err(ArchError::UnknownOp { .. })
        ));
        assert!(matches!(
            extend_space(&base, &["add"], &[]),
            Err(ArchError::DuplicateOp { .. })
        ));
    }

    #[test]
    fn space_checks() {
        assert!(CellSearchSpace::with_base(3).check().is_err());
        assert!(CellSearchSpace::with_base(1).check().is_err());
        assert!(CellSearchSpace::with_base(4).check().is_ok());
        let s = ConvSearchSpace {
            num_filters: vec![24, 24],
            ..Default::default()
        };
        assert!(s.check().is_err());
    }

    #[test]
    fn validation_messages() {
        let space = SearchSpace::Conv(ConvSearchSpace::default());
        let layer = |skips: &[usize]| ConvLayerSpec {
            filter_height: 1,
            filter_width: 1,
            stride_height: 1,
            stride_width: 1,
            num_filters: 24,
            skip_inputs: skips.iter().copied().collect(),
        };
        let ok = ArchDescription::Conv(ConvArch { layers: vec![layer(&[])] });
        assert!(validate(&ok, &space).is_empty());
        let bad = ArchDescription::Conv(ConvArch {
            layers: vec![layer(&[]), layer(&[0]), layer(&[5])],
        });
        let v = validate(&bad, &space);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "layers[2].skip_inputs");
        assert_eq!(v[0].value, "5");
        assert_eq!(v[0].reason, "skip references later layer");

        let fig = ArchDescription::Cell(CellDescription::worked_example());
        assert!(validate(&fig, &SearchSpace::Cell(CellSearchSpace::with_base(2))).is_empty());
        assert!(!validate(&fig, &SearchSpace::Cell(CellSearchSpace::default())).is_empty());
        assert!(!validate(&fig, &space).is_empty());
    }
}
