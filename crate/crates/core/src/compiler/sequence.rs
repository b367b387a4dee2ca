use super::{manifest_for, CompileError, CompiledGraph, Init, IoSignature, RecurrentCell};
use crate::numeric::{GraphBuilder, GraphOps, NodeId};

/// Dimensions of an unrolled language model around a recurrent cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceShape {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub length: usize,
    /// Steps whose prediction enters the loss.
    pub scored: Vec<usize>,
}

/// Embedding, `length` cell steps from a zero state, and a softmax read-out
/// at every scored step. `loss` is the mean cross-entropy over scored
/// steps and batch rows.
pub fn compile_sequence_model(
    cell: &RecurrentCell,
    shape: &SequenceShape,
    batch: usize,
) -> Result<CompiledGraph, CompileError> {
    for (what, v) in [
        ("vocab", shape.vocab),
        ("embed", shape.embed),
        ("hidden_dim", shape.hidden),
        ("length", shape.length),
        ("batch", batch),
        ("scored steps", shape.scored.len()),
    ] {
        if v == 0 {
            return Err(CompileError::Dimension { what });
        }
    }
    if shape.scored.iter().any(|&t| t >= shape.length) {
        return Err(CompileError::Dimension { what: "scored step index" });
    }
    if let RecurrentCell::Tree(desc) = cell {
        if let Err(CompileError::Invalid(v)) = super::compile_cell(desc, 1, 1, 1) {
            return Err(CompileError::Invalid(v));
        }
    }
    let (v, d, h) = (shape.vocab, shape.embed, shape.hidden);
    let mut g = GraphBuilder::new();
    let embed = g.param("embed", &[v, d])?;
    let cell_params = cell.declare(&mut g, "cell", d, h)?;
    let out_w = g.param("out.w", &[h, v])?;
    let out_b = g.param("out.b", &[v])?;
    let zero = g.constant(crate::numeric::Tensor::zeros(&[batch, h]));
    let (mut hs, mut cs) = (zero, zero);
    let mut total: Option<NodeId> = None;
    for t in 0..shape.length {
        let x = g.input(&format!("x{t}"), &[batch, v])?;
        let e = g.matmul(x, embed)?;
        let (h_t, c_t) = cell.step(&mut g, &cell_params, e, hs, cs)?;
        hs = h_t;
        cs = c_t;
        if shape.scored.contains(&t) {
            let y = g.input(&format!("y{t}"), &[batch])?;
            let logits = g.matmul(h_t, out_w)?;
            let logits = g.add_bias(logits, out_b)?;
            let ce = g.softmax_cross_entropy(logits, y)?;
            total = Some(match total {
                None => ce,
                Some(acc) => g.add(acc, ce)?,
            });
        }
    }
    let loss = g.scale(total.expect("scored is non-empty"), 1.0 / shape.scored.len() as f64)?;
    g.output("loss", loss)?;
    let graph = g.finish();
    let manifest = manifest_for(&graph, |name, s| match name {
        "embed" => Init::Uniform { limit: 0.1 },
        "out.w" => Init::Uniform {
            limit: 1.0 / (h as f64).sqrt(),
        },
        _ => RecurrentCell::init(s, h),
    });
    Ok(CompiledGraph {
        graph,
        manifest,
        signature: IoSignature::Sequence {
            batch,
            vocab: v,
            length: shape.length,
        },
        summary: vec![format!(
            "sequence model: embed {d}, hidden {h}, {} scored of {} steps",
            shape.scored.len(),
            shape.length
        )],
    })
}

/// Learnable scalars of a sequence model with the given widths.
pub fn sequence_param_count(cell: &RecurrentCell, vocab: usize, embed: usize, hidden: usize) -> usize {
    vocab * embed + cell.param_count(embed, hidden) + hidden * vocab + vocab
}

/// Largest hidden width (at least 2) whose sequence model fits `budget`.
pub fn hidden_for_budget(cell: &RecurrentCell, vocab: usize, embed: usize, budget: usize) -> usize {
    let mut h = 2;
    while sequence_param_count(cell, vocab, embed, h + 1) <= budget {
        h += 1;
    }
    h
}
