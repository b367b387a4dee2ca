use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::ops::{self, ForwardCtx, Op, Unary};
use super::tensor::{ParamSet, Tensor};
use super::NumericError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub label: Option<String>,
}

/// Named tensors fed to graph inputs.
pub type Feed = BTreeMap<String, Tensor>;

/// How normalization nodes obtain their statistics.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// Minibatch statistics; the evaluation reports them for running averages.
    Train,
    /// Running statistics looked up by buffer name.
    Eval(&'a ParamSet),
}

/// Emits nodes into a graph under construction. Implemented by the static
/// [`GraphBuilder`] and the eagerly evaluating [`Tape`].
pub trait GraphOps {
    fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, NumericError>;

    /// Declares (or reuses) a parameter slot.
    fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericError>;

    fn shape_of(&self, id: NodeId) -> &[usize];

    fn set_label(&mut self, id: NodeId, label: &str);

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t), &[]).expect("constants always have a shape")
    }

    fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::MatMul, &[a, b])
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Add, &[a, b])
    }

    fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Mul, &[a, b])
    }

    fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Max, &[a, b])
    }

    fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::AddBias, &[x, bias])
    }

    fn unary(&mut self, u: Unary, x: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Unary(u), &[x])
    }

    fn tanh(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        self.unary(Unary::Tanh, x)
    }

    fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        self.unary(Unary::Sigmoid, x)
    }

    fn relu(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        self.unary(Unary::Relu, x)
    }

    fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, NumericError> {
        self.push(Op::Scale(factor), &[x])
    }

    fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericError> {
        self.push(Op::Concat, parts)
    }

    fn zero_pad(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId, NumericError> {
        self.push(Op::ZeroPad { height, width }, &[x])
    }

    fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, NumericError> {
        self.push(Op::Slice { axis, start, len }, &[x])
    }

    fn select_row(&mut self, table: NodeId, row: usize) -> Result<NodeId, NumericError> {
        self.push(Op::SelectRow(row), &[table])
    }

    fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NumericError> {
        self.push(Op::Reshape(shape.to_vec()), &[x])
    }

    fn im2col(
        &mut self,
        x: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<NodeId, NumericError> {
        self.push(Op::Im2Col { kernel, stride }, &[x])
    }

    fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        buffer: &str,
    ) -> Result<NodeId, NumericError> {
        self.push(
            Op::BatchNorm {
                eps,
                buffer: buffer.to_string(),
            },
            &[x, gamma, beta],
        )
    }

    fn max_pool2(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::MaxPool2, &[x])
    }

    fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::SoftmaxCrossEntropy, &[logits, labels])
    }

    fn mean(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Mean, &[x])
    }

    fn argmax(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        self.push(Op::Argmax, &[x])
    }
}

/// Shared node storage and shape checking for builders and tapes.
#[derive(Clone, Debug, Default)]
struct NodeList {
    nodes: Vec<Node>,
    slots: BTreeMap<String, (Vec<usize>, NodeId)>,
    buffers: BTreeMap<String, usize>,
}

impl NodeList {
    fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, NumericError> {
        let index = self.nodes.len();
        if let Some(bad) = inputs.iter().find(|id| id.0 >= index) {
            return Err(NumericError::Shape {
                node: index,
                op: op.name(),
                detail: format!("input %{} does not precede this node", bad.0),
            });
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|id| self.nodes[id.0].shape.as_slice()).collect();
        let shape = ops::infer_shape(&op, &shapes).map_err(|detail| NumericError::Shape {
            node: index,
            op: op.name(),
            detail,
        })?;
        if let Op::BatchNorm { buffer, .. } = &op {
            let channels = *shape.last().unwrap();
            match self.buffers.insert(buffer.clone(), channels) {
                Some(prev) if prev != channels => {
                    return Err(NumericError::Shape {
                        node: index,
                        op: op.name(),
                        detail: format!("buffer \"{buffer}\" already used with {prev} channels"),
                    })
                }
                _ => {}
            }
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            shape,
            label: None,
        });
        Ok(NodeId(index))
    }

    fn leaf(&mut self, op: Op, shape: &[usize]) -> Result<NodeId, NumericError> {
        super::tensor::check_shape(shape).map_err(|e| NumericError::Shape {
            node: self.nodes.len(),
            op: op.name(),
            detail: e.to_string(),
        })?;
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            shape: shape.to_vec(),
            label: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericError> {
        if let Some((declared, id)) = self.slots.get(name) {
            if declared != shape {
                return Err(NumericError::ParamShape {
                    name: name.to_string(),
                    expected: declared.clone(),
                    got: shape.to_vec(),
                });
            }
            return Ok(*id);
        }
        let id = self.leaf(Op::Param(name.to_string()), shape)?;
        self.slots.insert(name.to_string(), (shape.to_vec(), id));
        Ok(id)
    }
}

/// Builds a [`Graph`] node by node; shapes are checked as nodes are added.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    list: NodeList,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericError> {
        if self.inputs.iter().any(|(n, _)| n == name) {
            return Err(NumericError::Duplicate(name.to_string()));
        }
        let id = self.list.leaf(Op::Input(name.to_string()), shape)?;
        self.inputs.push((name.to_string(), id));
        Ok(id)
    }

    pub fn output(&mut self, name: &str, id: NodeId) -> Result<(), NumericError> {
        if self.outputs.iter().any(|(n, _)| n == name) {
            return Err(NumericError::Duplicate(name.to_string()));
        }
        self.outputs.push((name.to_string(), id));
        Ok(())
    }

    pub fn finish(self) -> Graph {
        Graph {
            nodes: self.list.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
            slots: self.list.slots.into_iter().map(|(k, (s, _))| (k, s)).collect(),
            buffers: self.list.buffers,
        }
    }
}

impl GraphOps for GraphBuilder {
    fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, NumericError> {
        match op {
            Op::Input(_) | Op::Param(_) => Err(NumericError::Shape {
                node: self.list.nodes.len(),
                op: op.name(),
                detail: "declare inputs and parameters through their own methods".into(),
            }),
            _ => self.list.push(op, inputs),
        }
    }

    fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericError> {
        self.list.param(name, shape)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.list.nodes[id.0].shape
    }

    fn set_label(&mut self, id: NodeId, label: &str) {
        self.list.nodes[id.0].label = Some(label.to_string());
    }
}

/// An immutable, topologically ordered compute graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
    slots: BTreeMap<String, Vec<usize>>,
    buffers: BTreeMap<String, usize>,
}

/// Values of every node from one forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    train: bool,
    running: Option<ParamSet>,
    batch_stats: ParamSet,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Minibatch statistics per normalization buffer (`[2, C]`: mean, variance).
    pub fn batch_stats(&self) -> &ParamSet {
        &self.batch_stats
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn inputs(&self) -> &[(String, NodeId)] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Result<NodeId, NumericError> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| NumericError::UnknownOutput(name.to_string()))
    }

    pub fn input_shape(&self, name: &str) -> Option<&[usize]> {
        self.inputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| self.nodes[id.0].shape.as_slice())
    }

    /// Parameter slots and their shapes.
    pub fn slots(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.slots
    }

    /// Normalization buffers and their channel counts.
    pub fn buffers(&self) -> &BTreeMap<String, usize> {
        &self.buffers
    }

    pub fn forward(&self, params: &ParamSet, feed: &Feed, mode: Mode<'_>) -> Result<Evaluation, NumericError> {
        for (name, shape) in &self.slots {
            let t = params.get(name).ok_or_else(|| NumericError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(NumericError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        let (train, buffers) = match mode {
            Mode::Train => (true, None),
            Mode::Eval(b) => (false, Some(b)),
        };
        let ctx = ForwardCtx { train, buffers };
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut batch_stats = ParamSet::new();
        for (index, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input(name) => {
                    let t = feed.get(name).ok_or_else(|| NumericError::MissingInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(NumericError::InputShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                    t.clone()
                }
                Op::Param(name) => params.get(name).expect("checked above").clone(),
                Op::Const(t) => t.clone(),
                op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
                    let (out, stats) = ops::forward(op, &ins, &node.shape, &ctx).map_err(|detail| {
                        NumericError::Shape {
                            node: index,
                            op: op.name(),
                            detail,
                        }
                    })?;
                    if let (Op::BatchNorm { buffer, .. }, Some(s)) = (op, stats) {
                        batch_stats.insert(buffer.clone(), s);
                    }
                    out
                }
            };
            values.push(value);
        }
        Ok(Evaluation {
            values,
            train,
            running: buffers.cloned(),
            batch_stats,
        })
    }

    pub fn output_value<'e>(&self, eval: &'e Evaluation, name: &str) -> Result<&'e Tensor, NumericError> {
        Ok(eval.value(self.output(name)?))
    }

    /// Gradients of `output` (seeded with `upstream`) for every parameter
    /// slot. Slots the output does not depend on get zero gradients.
    pub fn backward(&self, eval: &Evaluation, output: NodeId, upstream: &Tensor) -> Result<ParamSet, NumericError> {
        let node_grads = backprop(&self.nodes, &eval.values, output, upstream, eval.train, eval.running.as_ref())?;
        let mut grads = ParamSet::new();
        for (name, shape) in &self.slots {
            grads.insert(name.clone(), Tensor::zeros(shape));
        }
        collect_param_grads(&self.nodes, node_grads, &mut grads);
        Ok(grads)
    }

    /// Human-readable node listing with shapes and the parameter manifest.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let args: Vec<String> = node.inputs.iter().map(|id| format!("%{}", id.0)).collect();
            let _ = write!(out, "%{i} = {}", node.op);
            if !args.is_empty() {
                let _ = write!(out, "({})", args.join(", "));
            }
            let _ = write!(out, " : {:?}", node.shape);
            if let Some(label) = &node.label {
                let _ = write!(out, "  # {label}");
            }
            out.push('\n');
        }
        for (name, id) in &self.outputs {
            let _ = writeln!(out, "output \"{name}\" = %{}", id.0);
        }
        out
    }
}

fn collect_param_grads(nodes: &[Node], node_grads: Vec<Option<Tensor>>, grads: &mut ParamSet) {
    for (node, g) in nodes.iter().zip(node_grads) {
        if let (Op::Param(name), Some(g)) = (&node.op, g) {
            match grads.get_mut(name) {
                Some(acc) => acc.add_scaled(&g, 1.0),
                None => {
                    grads.insert(name.clone(), g);
                }
            }
        }
    }
}

fn backprop(
    nodes: &[Node],
    values: &[Tensor],
    output: NodeId,
    upstream: &Tensor,
    train: bool,
    running: Option<&ParamSet>,
) -> Result<Vec<Option<Tensor>>, NumericError> {
    let out_node = nodes.get(output.0).ok_or_else(|| NumericError::UnknownOutput(format!("%{}", output.0)))?;
    if upstream.shape() != out_node.shape.as_slice() {
        return Err(NumericError::Shape {
            node: output.0,
            op: out_node.op.name(),
            detail: format!("upstream gradient {:?} does not match output {:?}", upstream.shape(), out_node.shape),
        });
    }
    // A node needs a gradient if a parameter flows into it.
    let mut needs = vec![false; nodes.len()];
    for (i, node) in nodes.iter().enumerate().take(output.0 + 1) {
        needs[i] = matches!(node.op, Op::Param(_)) || node.inputs.iter().any(|id| needs[id.0]);
    }
    let ctx = ForwardCtx { train, buffers: running };
    let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
    grads[output.0] = Some(upstream.clone());
    for i in (0..=output.0).rev() {
        let node = &nodes[i];
        if node.op.is_leaf() || !needs[i] {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        if !node.op.is_differentiable() {
            return Err(NumericError::Unsupported {
                node: i,
                op: node.op.name(),
            });
        }
        let ins: Vec<&Tensor> = node.inputs.iter().map(|id| &values[id.0]).collect();
        let input_needs: Vec<bool> = node.inputs.iter().map(|id| needs[id.0]).collect();
        let input_grads = ops::backward(&node.op, &ins, &values[i], &g, &input_needs, &ctx).map_err(|detail| {
            NumericError::Shape {
                node: i,
                op: node.op.name(),
                detail,
            }
        })?;
        for (id, ig) in node.inputs.iter().zip(input_grads) {
            if let Some(ig) = ig {
                match &mut grads[id.0] {
                    Some(acc) => acc.add_scaled(&ig, 1.0),
                    slot => *slot = Some(ig),
                }
            }
        }
    }
    Ok(grads)
}

/// A graph that evaluates every node as soon as it is added, so callers can
/// branch on intermediate values (e.g. sampled actions) while still getting
/// reverse-mode gradients afterwards.
#[derive(Debug)]
pub struct Tape<'p> {
    list: NodeList,
    values: Vec<Tensor>,
    params: &'p ParamSet,
    batch_stats: ParamSet,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            list: NodeList::default(),
            values: Vec::new(),
            params,
            batch_stats: ParamSet::new(),
        }
    }

    /// Adds an input node holding `value`.
    pub fn feed(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self
            .list
            .leaf(Op::Input(name.to_string()), value.shape())
            .expect("tensor shapes are valid");
        self.values.push(value);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Gradients for every parameter slot the tape referenced.
    pub fn backward(&self, output: NodeId, upstream: &Tensor) -> Result<ParamSet, NumericError> {
        let node_grads = backprop(&self.list.nodes, &self.values, output, upstream, true, None)?;
        let mut grads = ParamSet::new();
        for (name, (shape, _)) in &self.list.slots {
            grads.insert(name.clone(), Tensor::zeros(shape));
        }
        collect_param_grads(&self.list.nodes, node_grads, &mut grads);
        Ok(grads)
    }

    /// Freezes the recorded nodes into a static graph with the given outputs.
    pub fn into_graph(self, outputs: &[(&str, NodeId)]) -> Graph {
        Graph {
            inputs: self
                .list
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match &n.op {
                    Op::Input(name) => Some((name.clone(), NodeId(i))),
                    _ => None,
                })
                .collect(),
            outputs: outputs.iter().map(|(n, id)| (n.to_string(), *id)).collect(),
            slots: self.list.slots.into_iter().map(|(k, (s, _))| (k, s)).collect(),
            buffers: self.list.buffers,
            nodes: self.list.nodes,
        }
    }
}

impl GraphOps for Tape<'_> {
    fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, NumericError> {
        if matches!(op, Op::Input(_) | Op::Param(_)) {
            return Err(NumericError::Shape {
                node: self.list.nodes.len(),
                op: op.name(),
                detail: "declare inputs and parameters through their own methods".into(),
            });
        }
        let id = self.list.push(op, inputs)?;
        let node = &self.list.nodes[id.0];
        let value = match &node.op {
            Op::Const(t) => t.clone(),
            op => {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &self.values[i.0]).collect();
                let ctx = ForwardCtx {
                    train: true,
                    buffers: None,
                };
                let (out, stats) = ops::forward(op, &ins, &node.shape, &ctx).map_err(|detail| {
                    NumericError::Shape {
                        node: id.0,
                        op: op.name(),
                        detail,
                    }
                })?;
                if let (Op::BatchNorm { buffer, .. }, Some(s)) = (op, stats) {
                    self.batch_stats.insert(buffer.clone(), s);
                }
                out
            }
        };
        self.values.push(value);
        Ok(id)
    }

    fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericError> {
        let bound = self.params.get(name).ok_or_else(|| NumericError::MissingParam(name.to_string()))?;
        if bound.shape() != shape {
            return Err(NumericError::ParamShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: bound.shape().to_vec(),
            });
        }
        let before = self.list.nodes.len();
        let id = self.list.param(name, shape)?;
        if id.0 == before {
            self.values.push(bound.clone());
        }
        Ok(id)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.list.nodes[id.0].shape
    }

    fn set_label(&mut self, id: NodeId, label: &str) {
        self.list.nodes[id.0].label = Some(label.to_string());
    }
}
