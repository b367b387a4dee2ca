use std::collections::BTreeSet;

use super::{manifest_for, CompileError, CompiledGraph, Init, IoSignature};
use crate::arch::{validate_conv, ConvArch, ConvSearchSpace};
use crate::numeric::{GraphBuilder, GraphOps, NodeId, NumericError};

/// Compilation settings taken from the search space plus the norm epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvOptions {
    /// With skips on, a layer reads exactly its skip set (the image when
    /// empty); with skips off, layers form a chain.
    pub skip_connections: bool,
    pub pool_after: Vec<usize>,
    pub norm_epsilon: f64,
}

impl ConvOptions {
    pub fn from_space(space: &ConvSearchSpace) -> Self {
        ConvOptions {
            skip_connections: space.skip_connections,
            pool_after: space.pool_after.clone(),
            norm_epsilon: 1e-5,
        }
    }
}

/// Pads every input to the largest spatial extent among them and
/// concatenates along depth in the given order.
fn join<G: GraphOps>(g: &mut G, inputs: &[NodeId]) -> Result<NodeId, NumericError> {
    if let [only] = inputs {
        return Ok(*only);
    }
    let h = inputs.iter().map(|&i| g.shape_of(i)[1]).max().expect("non-empty");
    let w = inputs.iter().map(|&i| g.shape_of(i)[2]).max().expect("non-empty");
    let padded = inputs
        .iter()
        .map(|&i| {
            let s = g.shape_of(i);
            if s[1] == h && s[2] == w {
                Ok(i)
            } else {
                let p = g.zero_pad(i, h, w)?;
                g.set_label(p, "repair: pad");
                Ok(p)
            }
        })
        .collect::<Result<Vec<_>, NumericError>>()?;
    let out = g.concat(&padded)?;
    g.set_label(out, "repair: concat");
    Ok(out)
}

/// Lowers a conv description for a fixed batch size.
pub fn compile_conv(
    arch: &ConvArch,
    opts: &ConvOptions,
    image: [usize; 3],
    classes: usize,
    batch: usize,
) -> Result<CompiledGraph, CompileError> {
    for (what, v) in [
        ("image height", image[0]),
        ("image width", image[1]),
        ("image channels", image[2]),
        ("classes", classes),
        ("batch", batch),
    ] {
        if v == 0 {
            return Err(CompileError::Dimension { what });
        }
    }
    let space = ConvSearchSpace {
        filter_heights: arch.layers.iter().map(|l| l.filter_height).collect::<BTreeSet<_>>().into_iter().collect(),
        filter_widths: arch.layers.iter().map(|l| l.filter_width).collect::<BTreeSet<_>>().into_iter().collect(),
        num_filters: arch.layers.iter().map(|l| l.num_filters).collect::<BTreeSet<_>>().into_iter().collect(),
        strides: Some(
            arch.layers
                .iter()
                .flat_map(|l| [l.stride_height, l.stride_width])
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        ),
        skip_connections: opts.skip_connections,
        pool_after: opts.pool_after.clone(),
    };
    let mut violations = validate_conv(arch, &space);
    for (i, l) in arch.layers.iter().enumerate() {
        for (name, v) in [
            ("filter_height", l.filter_height),
            ("filter_width", l.filter_width),
            ("stride_height", l.stride_height),
            ("stride_width", l.stride_width),
            ("num_filters", l.num_filters),
        ] {
            if v == 0 {
                violations.push(crate::arch::Violation {
                    path: format!("layers[{i}].{name}"),
                    value: "0".into(),
                    reason: "must be positive".into(),
                });
            }
        }
    }
    if !violations.is_empty() {
        return Err(CompileError::Invalid(violations));
    }

    let mut g = GraphBuilder::new();
    let img = g.input("image", &[batch, image[0], image[1], image[2]])?;
    let labels = g.input("labels", &[batch])?;
    let mut outputs: Vec<NodeId> = Vec::with_capacity(arch.layers.len());
    let mut consumed = vec![false; arch.layers.len()];
    let mut summary = Vec::new();
    for (i, l) in arch.layers.iter().enumerate() {
        let sources: Vec<usize> = if opts.skip_connections {
            l.skip_inputs.iter().copied().collect()
        } else if i > 0 {
            vec![i - 1]
        } else {
            vec![]
        };
        for &s in &sources {
            consumed[s] = true;
        }
        let x = if sources.is_empty() {
            img
        } else {
            let ins: Vec<NodeId> = sources.iter().map(|&s| outputs[s]).collect();
            join(&mut g, &ins)?
        };
        let cin = g.shape_of(x)[3];
        let (kh, kw) = (l.filter_height, l.filter_width);
        let cols = g.im2col(x, (kh, kw), (l.stride_height, l.stride_width))?;
        let w = g.param(&format!("conv{i}.weight"), &[kh * kw * cin, l.num_filters])?;
        let y = g.matmul(cols, w)?;
        let (ho, wo) = {
            let s = g.shape_of(x);
            (s[1].div_ceil(l.stride_height), s[2].div_ceil(l.stride_width))
        };
        let y = g.reshape(y, &[batch, ho, wo, l.num_filters])?;
        let gamma = g.param(&format!("conv{i}.bn.gamma"), &[l.num_filters])?;
        let beta = g.param(&format!("conv{i}.bn.beta"), &[l.num_filters])?;
        let y = g.batch_norm(y, gamma, beta, opts.norm_epsilon, &format!("conv{i}.bn"))?;
        let mut y = g.relu(y)?;
        if opts.pool_after.contains(&i) {
            y = g.max_pool2(y)?;
        }
        g.set_label(y, &format!("layer {i}"));
        let from = if sources.is_empty() {
            "image".to_string()
        } else {
            sources.iter().map(|s| format!("layer {s}")).collect::<Vec<_>>().join(" + ")
        };
        let s = g.shape_of(y);
        summary.push(format!(
            "layer {i}: {from} -> conv {kh}x{kw}/{}x{} x{} -> {:?}",
            l.stride_height, l.stride_width, l.num_filters, &s[1..]
        ));
        outputs.push(y);
    }
    let finals: Vec<NodeId> = (0..outputs.len()).filter(|&i| !consumed[i]).map(|i| outputs[i]).collect();
    summary.push(format!(
        "classifier reads: {}",
        (0..outputs.len())
            .filter(|&i| !consumed[i])
            .map(|i| format!("layer {i}"))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    let top = join(&mut g, &finals)?;
    let features: usize = g.shape_of(top)[1..].iter().product();
    let flat = g.reshape(top, &[batch, features])?;
    let wc = g.param("classifier.weight", &[features, classes])?;
    let bc = g.param("classifier.bias", &[classes])?;
    let logits = g.matmul(flat, wc)?;
    let logits = g.add_bias(logits, bc)?;
    g.set_label(logits, "logits");
    let loss = g.softmax_cross_entropy(logits, labels)?;
    g.output("logits", logits)?;
    g.output("loss", loss)?;
    let graph = g.finish();
    let manifest = manifest_for(&graph, |name, shape| {
        if name.ends_with(".gamma") {
            Init::Ones
        } else if shape.len() == 1 {
            Init::Zeros
        } else if name == "classifier.weight" {
            Init::Uniform {
                limit: 1.0 / (shape[0] as f64).sqrt(),
            }
        } else {
            Init::Normal {
                std: (2.0 / shape[0] as f64).sqrt(),
            }
        }
    });
    Ok(CompiledGraph {
        graph,
        manifest,
        signature: IoSignature::Conv { batch, image, classes },
        summary,
    })
}
