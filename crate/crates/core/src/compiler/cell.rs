use super::{manifest_for, CompileError, CompiledGraph, Init, IoSignature};
use crate::arch::{validate_cell, Activation, CellDescription, CellSearchSpace, Combiner};
use crate::numeric::{GraphBuilder, GraphOps, NodeId, NumericError};

/// Children of internal node `b + k` are `2k` and `2k + 1`; the root is
/// node `2b - 2`.
pub(crate) fn children(base: usize, node: usize) -> Option<(usize, usize)> {
    (node >= base).then(|| {
        let k = node - base;
        (2 * k, 2 * k + 1)
    })
}

fn combine<G: GraphOps>(g: &mut G, c: Combiner, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
    match c {
        Combiner::Add => g.add(a, b),
        Combiner::ElemMult => g.mul(a, b),
        Combiner::Max => g.max(a, b),
    }
}

fn activate<G: GraphOps>(g: &mut G, a: Activation, x: NodeId) -> Result<NodeId, NumericError> {
    g.unary(a.unary(), x)
}

/// Leaf weights of a tree cell: leaf `i` owns `w{2i+1}` (input) and
/// `w{2i+2}` (hidden).
#[derive(Clone, Debug)]
pub struct CellParams {
    pub leaves: Vec<(NodeId, NodeId)>,
}

impl CellParams {
    pub fn declare<G: GraphOps>(
        g: &mut G,
        prefix: &str,
        base: usize,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Self, NumericError> {
        let leaves = (0..base)
            .map(|i| {
                let wx = g.param(&format!("{prefix}.w{}", 2 * i + 1), &[input_dim, hidden])?;
                let wh = g.param(&format!("{prefix}.w{}", 2 * i + 2), &[hidden, hidden])?;
                Ok((wx, wh))
            })
            .collect::<Result<_, NumericError>>()?;
        Ok(CellParams { leaves })
    }

    /// Emits one step; returns `(h_t, c_t)`.
    pub fn step<G: GraphOps>(
        &self,
        g: &mut G,
        desc: &CellDescription,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId), NumericError> {
        let base = self.leaves.len();
        let n = desc.nodes.len();
        let mut post: Vec<NodeId> = Vec::with_capacity(n);
        let mut c_t = None;
        for (node, block) in desc.nodes.iter().enumerate() {
            let (a, b) = match children(base, node) {
                None => {
                    let (wx, wh) = self.leaves[node];
                    (g.matmul(x, wx)?, g.matmul(h, wh)?)
                }
                Some((l, r)) => (post[l], post[r]),
            };
            let pre = combine(g, block.combiner, a, b)?;
            g.set_label(pre, &format!("node{node}.pre"));
            let mut value = activate(g, block.activation, pre)?;
            if node == desc.indices.output {
                c_t = Some(pre);
            }
            if node == desc.indices.target {
                let joined = combine(g, desc.inject.combiner, value, c)?;
                g.set_label(joined, "inject.pre");
                if node == desc.indices.output {
                    c_t = Some(joined);
                }
                value = activate(g, desc.inject.activation, joined)?;
                g.set_label(value, "inject");
            }
            g.set_label(value, &format!("node{node}"));
            post.push(value);
        }
        let c_t = c_t.expect("output index is a node");
        Ok((post[n - 1], c_t))
    }
}

/// Standard LSTM step with gates `i, f, g, o` packed along the last axis.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub wx: NodeId,
    pub wh: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn declare<G: GraphOps>(
        g: &mut G,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Self, NumericError> {
        Ok(LstmParams {
            wx: g.param(&format!("{prefix}.wx"), &[input_dim, 4 * hidden])?,
            wh: g.param(&format!("{prefix}.wh"), &[hidden, 4 * hidden])?,
            b: g.param(&format!("{prefix}.b"), &[4 * hidden])?,
            hidden,
        })
    }

    pub fn step<G: GraphOps>(
        &self,
        g: &mut G,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId), NumericError> {
        let hd = self.hidden;
        let zx = g.matmul(x, self.wx)?;
        let zh = g.matmul(h, self.wh)?;
        let z = g.add(zx, zh)?;
        let z = g.add_bias(z, self.b)?;
        let axis = g.shape_of(z).len() - 1;
        let i = g.slice(z, axis, 0, hd)?;
        let i = g.sigmoid(i)?;
        let f = g.slice(z, axis, hd, hd)?;
        let f = g.sigmoid(f)?;
        let cand = g.slice(z, axis, 2 * hd, hd)?;
        let cand = g.tanh(cand)?;
        let o = g.slice(z, axis, 3 * hd, hd)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_t = g.add(keep, write)?;
        let squashed = g.tanh(c_t)?;
        let h_t = g.mul(o, squashed)?;
        Ok((h_t, c_t))
    }
}

/// A recurrent step usable inside unrolled sequence models.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RecurrentCell {
    Tree(CellDescription),
    Lstm,
}

#[derive(Clone, Debug)]
pub enum RecurrentParams {
    Tree(CellParams),
    Lstm(LstmParams),
}

impl RecurrentCell {
    pub fn declare<G: GraphOps>(
        &self,
        g: &mut G,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<RecurrentParams, NumericError> {
        Ok(match self {
            RecurrentCell::Tree(d) => {
                RecurrentParams::Tree(CellParams::declare(g, prefix, d.base(), input_dim, hidden)?)
            }
            RecurrentCell::Lstm => RecurrentParams::Lstm(LstmParams::declare(g, prefix, input_dim, hidden)?),
        })
    }

    pub fn step<G: GraphOps>(
        &self,
        g: &mut G,
        params: &RecurrentParams,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId), NumericError> {
        match (self, params) {
            (RecurrentCell::Tree(d), RecurrentParams::Tree(p)) => p.step(g, d, x, h, c),
            (RecurrentCell::Lstm, RecurrentParams::Lstm(p)) => p.step(g, x, h, c),
            _ => panic!("recurrent parameters declared for a different cell kind"),
        }
    }

    /// Learnable scalars for the given dimensions.
    pub fn param_count(&self, input_dim: usize, hidden: usize) -> usize {
        match self {
            RecurrentCell::Tree(d) => d.base() * hidden * (input_dim + hidden),
            RecurrentCell::Lstm => 4 * hidden * (input_dim + hidden + 1),
        }
    }

    /// Default initialization for slots this cell declares.
    pub fn init(shape: &[usize], hidden: usize) -> Init {
        if shape == [4 * hidden] {
            // LSTM gate bias: open the forget gate so early gradients
            // survive long unrolls.
            Init::Band {
                start: hidden,
                len: hidden,
                value: 1.0,
            }
        } else if shape.len() == 1 {
            Init::Zeros
        } else {
            Init::Uniform {
                limit: 1.0 / (hidden as f64).sqrt(),
            }
        }
    }
}

fn check_dims(input_dim: usize, hidden: usize, batch: usize) -> Result<(), CompileError> {
    for (what, v) in [("input_dim", input_dim), ("hidden_dim", hidden), ("batch", batch)] {
        if v == 0 {
            return Err(CompileError::Dimension { what });
        }
    }
    Ok(())
}

fn cell_inputs(
    g: &mut GraphBuilder,
    input_dim: usize,
    hidden: usize,
    batch: usize,
) -> Result<(NodeId, NodeId, NodeId), NumericError> {
    Ok((
        g.input("x", &[batch, input_dim])?,
        g.input("h_prev", &[batch, hidden])?,
        g.input("c_prev", &[batch, hidden])?,
    ))
}

/// One step of a tree cell as a standalone graph.
pub fn compile_cell(
    desc: &CellDescription,
    input_dim: usize,
    hidden: usize,
    batch: usize,
) -> Result<CompiledGraph, CompileError> {
    check_dims(input_dim, hidden, batch)?;
    let base = desc.base();
    let space = CellSearchSpace {
        combiners: Combiner::ALL.to_vec(),
        activations: crate::arch::Activation::ALL.to_vec(),
        base,
    };
    let mut violations = validate_cell(desc, &space);
    if space.check().is_err() || desc.nodes.len().is_multiple_of(2) {
        violations.push(crate::arch::Violation {
            path: "nodes".into(),
            value: desc.nodes.len().to_string(),
            reason: "node count must be 2 * base - 1 for a power-of-two base".into(),
        });
    }
    if !violations.is_empty() {
        return Err(CompileError::Invalid(violations));
    }
    let mut g = GraphBuilder::new();
    let (x, h, c) = cell_inputs(&mut g, input_dim, hidden, batch)?;
    let params = CellParams::declare(&mut g, "cell", base, input_dim, hidden)?;
    let (h_t, c_t) = params.step(&mut g, desc, x, h, c)?;
    g.output("h", h_t)?;
    g.output("c", c_t)?;
    let graph = g.finish();
    let manifest = manifest_for(&graph, |_, shape| RecurrentCell::init(shape, hidden));
    let n = desc.nodes.len();
    let mut summary = vec![format!("leaves: {base}"), format!("internal nodes: {}", base - 1)];
    for (node, b) in desc.nodes.iter().enumerate() {
        let inputs = match children(base, node) {
            None => format!("x @ cell.w{}, h_prev @ cell.w{}", 2 * node + 1, 2 * node + 2),
            Some((l, r)) => format!("node {l}, node {r}"),
        };
        summary.push(format!("node {node}: {}({inputs}) -> {}", b.combiner, b.activation));
    }
    summary.push(format!(
        "inject: c_prev at node {} via {} -> {}",
        desc.indices.target, desc.inject.combiner, desc.inject.activation
    ));
    summary.push(format!("c_t: node {} before activation", desc.indices.output));
    summary.push(format!("h_t: node {} (root)", n - 1));
    Ok(CompiledGraph {
        graph,
        manifest,
        signature: IoSignature::Cell {
            batch,
            input_dim,
            hidden,
        },
        summary,
    })
}

/// One LSTM step as a standalone graph, slots `lstm.wx`, `lstm.wh`, `lstm.b`.
pub fn reference_lstm(input_dim: usize, hidden: usize, batch: usize) -> Result<CompiledGraph, CompileError> {
    check_dims(input_dim, hidden, batch)?;
    let mut g = GraphBuilder::new();
    let (x, h, c) = cell_inputs(&mut g, input_dim, hidden, batch)?;
    let params = LstmParams::declare(&mut g, "lstm", input_dim, hidden)?;
    let (h_t, c_t) = params.step(&mut g, x, h, c)?;
    g.output("h", h_t)?;
    g.output("c", c_t)?;
    let graph = g.finish();
    let manifest = manifest_for(&graph, |_, shape| RecurrentCell::init(shape, hidden));
    Ok(CompiledGraph {
        graph,
        manifest,
        signature: IoSignature::Cell {
            batch,
            input_dim,
            hidden,
        },
        summary: vec!["reference lstm: gates i, f, g, o".into()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_topology() {
        assert_eq!(children(2, 2), Some((0, 1)));
        assert_eq!(children(4, 4), Some((0, 1)));
        assert_eq!(children(4, 6), Some((4, 5)));
        assert_eq!(children(8, 14), Some((12, 13)));
        assert_eq!(children(8, 7), None);
    }
}
