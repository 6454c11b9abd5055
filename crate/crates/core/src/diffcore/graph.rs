use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{DiffError, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined node with hand-written forward and backward passes.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String>;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError>;

    /// Gradient contributions for each input; `None` means zero.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>, DiffError>;

    /// Distance of the current evaluation point from the nearest point
    /// where this op is not differentiable.
    fn kink_margin(&self, _inputs: &[&Tensor], _output: &Tensor) -> f64 {
        f64::INFINITY
    }
}

#[derive(Clone)]
pub(crate) enum Op {
    Input { name: String },
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// `x * s` where `s` is a single-element node.
    MulScalar(NodeId, NodeId),
    /// Adds a `[C]` vector along the last axis.
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv { x: NodeId, w: NodeId, geom: ConvGeom, batch: usize },
    Relu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Softmax { x: NodeId, axis: usize },
    SoftmaxCrossEntropy { logits: NodeId, target: NodeId },
    CosineRows { rows: NodeId, v: NodeId },
    Max(NodeId),
    Min(NodeId),
    Rescale(NodeId),
    SmoothL1(NodeId),
    Sum(NodeId),
    MeanAxis { x: NodeId, axis: usize },
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    Repeat { x: NodeId, n: usize },
    AvgPool { x: NodeId, k: usize },
    Pick { x: NodeId, index: usize },
    Custom { op: Arc<dyn CustomOp>, inputs: Vec<NodeId> },
}

impl Op {
    fn kind(&self) -> &str {
        match self {
            Op::Input { .. } => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Conv { .. } => "conv",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Softmax { .. } => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "cross_entropy",
            Op::CosineRows { .. } => "cosine",
            Op::Max(_) => "max",
            Op::Min(_) => "min",
            Op::Rescale(_) => "rescale",
            Op::SmoothL1(_) => "smooth_l1",
            Op::Sum(_) => "sum",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Repeat { .. } => "repeat",
            Op::AvgPool { .. } => "avg_pool",
            Op::Pick { .. } => "pick",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::SoftmaxCrossEntropy { logits, target } => vec![*logits, *target],
            Op::CosineRows { rows, v } => vec![*rows, *v],
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Relu(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Max(x)
            | Op::Min(x)
            | Op::Rescale(x)
            | Op::SmoothL1(x)
            | Op::Sum(x)
            | Op::Reshape(x) => vec![*x],
            Op::Softmax { x, .. } | Op::MeanAxis { x, .. } | Op::Repeat { x, .. } | Op::AvgPool { x, .. } | Op::Pick { x, .. } => {
                vec![*x]
            }
            Op::Concat(xs) => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
    label: String,
}

/// Static computation graph with a forward-value cache.
///
/// Nodes are appended in topological order by the builder methods, so
/// evaluation is a single pass in insertion order. A `Graph` is not shared
/// between threads while evaluating; clone it per worker instead.
#[derive(Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
    values: Vec<Option<Tensor>>,
    evaluated: bool,
}

/// Gradients of the seeded outputs with respect to every gradient-carrying input.
pub type Gradients = BTreeMap<String, Tensor>;

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("outputs", &self.outputs)
            .field("evaluated", &self.evaluated)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Human-readable node name used in error messages.
    pub fn label(&self, id: NodeId) -> String {
        let n = &self.nodes[id.0];
        if n.label.is_empty() {
            format!("{}#{}", n.op.kind(), id.0)
        } else {
            format!("{} ({}#{})", n.label, n.op.kind(), id.0)
        }
    }

    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = label.into();
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Input { .. } => true,
            Op::Const(_) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, shape, requires_grad, label: String::new() });
        self.values.push(None);
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, kind: &str, detail: String) -> DiffError {
        DiffError::ShapeMismatch { node: format!("{kind}#{}", self.nodes.len()), detail }
    }

    /// Named leaf that receives a gradient.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.to_string() }, shape.to_vec())
    }

    /// Named leaf treated as data: no gradient is propagated into it.
    pub fn data_input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.input(name, shape);
        self.nodes[id.0].requires_grad = false;
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape)
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), id));
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    fn same_shape(&mut self, kind: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(self.mismatch(kind, format!("{} is {sa:?} but {} is {sb:?}", self.label(a), self.label(b))));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Scale(x, k), s)
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::AddScalar(x, k), s)
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, DiffError> {
        if self.shape(s).iter().product::<usize>() != 1 {
            return Err(self.mismatch("mul_scalar", format!("{} is not a scalar", self.label(s))));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::MulScalar(x, s), shape))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(self.mismatch("add_bias", format!("bias {sb:?} does not fit {sx:?}")));
        }
        Ok(self.push(Op::AddBias(x, b), sx))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    /// 2-D convolution over `[.., H, W, Ci]` with weights `[kh, kw, Ci, Co]`.
    /// Leading axes are treated as a batch.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId, DiffError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() < 3 || sw.len() != 4 || sw[2] != sx[sx.len() - 1] {
            return Err(self.mismatch("conv2d", format!("input {sx:?} incompatible with kernel {sw:?}")));
        }
        let r = sx.len();
        let batch: usize = sx[..r - 3].iter().product();
        let geom = ConvGeom {
            input: [1, sx[r - 3], sx[r - 2]],
            kernel: [1, sw[0], sw[1]],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
            cin: sw[2],
            cout: sw[3],
        };
        let Some([_, oh, ow]) = geom.output() else {
            return Err(self.mismatch("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        };
        let mut shape = sx[..r - 3].to_vec();
        shape.extend([oh, ow, sw[3]]);
        Ok(self.push(Op::Conv { x, w, geom, batch }, shape))
    }

    /// 3-D convolution over `[T, H, W, Ci]` with weights `[kt, kh, kw, Ci, Co]`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, stride: [usize; 3], pad: [usize; 3]) -> Result<NodeId, DiffError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 5 || sw[3] != sx[3] {
            return Err(self.mismatch("conv3d", format!("input {sx:?} incompatible with kernel {sw:?}")));
        }
        let geom = ConvGeom {
            input: [sx[0], sx[1], sx[2]],
            kernel: [sw[0], sw[1], sw[2]],
            stride,
            pad,
            cin: sw[3],
            cout: sw[4],
        };
        let Some([ot, oh, ow]) = geom.output() else {
            return Err(self.mismatch("conv3d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        };
        Ok(self.push(Op::Conv { x, w, geom, batch: 1 }, vec![ot, oh, ow, sw[4]]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Relu(x), s)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Log(x), s)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Exp(x), s)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(self.mismatch("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        Ok(self.push(Op::Softmax { x, axis }, s))
    }

    /// Per-row cross-entropy `-sum_j t_ij log softmax(l_i)_j` of `[r, c]`
    /// logits against target distributions of the same shape; yields `[r]`.
    /// A rank-1 input is treated as a single row.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape("cross_entropy", logits, target)?;
        if s.len() > 2 {
            return Err(self.mismatch("cross_entropy", format!("expected rank 1 or 2, got {s:?}")));
        }
        let rows = if s.len() == 2 { s[0] } else { 1 };
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, target }, vec![rows]))
    }

    /// Cosine similarity of each row of `rows` (`[a, c]`) with `v` (`c` values).
    pub fn cosine_rows(&mut self, rows: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
        let sr = self.shape(rows).to_vec();
        let nv: usize = self.shape(v).iter().product();
        if sr.len() != 2 || sr[1] != nv {
            return Err(self.mismatch("cosine", format!("rows {sr:?} incompatible with vector of {nv}")));
        }
        Ok(self.push(Op::CosineRows { rows, v }, vec![sr[0]]))
    }

    pub fn max(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Max(x), vec![1])
    }

    pub fn min(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Min(x), vec![1])
    }

    /// Affine rescale of the whole tensor onto `[-1, 1]`.
    pub fn rescale(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Rescale(x), s)
    }

    /// Element-wise smooth-L1 with its kink at `|x| = 1`.
    pub fn smooth_l1(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::SmoothL1(x), s)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1])
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let mut s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(self.mismatch("mean_axis", format!("axis {axis} out of range for {s:?}")));
        }
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        Ok(self.push(Op::MeanAxis { x, axis }, s))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let n: usize = self.shape(x).iter().product();
        if n != shape.iter().product::<usize>() {
            return Err(self.mismatch("reshape", format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        let Some(first) = xs.first() else {
            return Err(self.mismatch("concat", "no inputs".into()));
        };
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(self.mismatch("concat", format!("{} has shape {s:?}, expected [_, {tail:?}]", self.label(x))));
            }
            lead += s[0];
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Op::Concat(xs.to_vec()), shape))
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: NodeId, n: usize) -> NodeId {
        let mut s = vec![n];
        s.extend_from_slice(self.shape(x));
        self.push(Op::Repeat { x, n }, s)
    }

    /// Non-overlapping `k x k` average pooling over the last three axes `[H, W, C]`.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId, DiffError> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 3 || k == 0 || !s[r - 3].is_multiple_of(k) || !s[r - 2].is_multiple_of(k) {
            return Err(self.mismatch("avg_pool", format!("{s:?} not divisible into {k}x{k} cells")));
        }
        let mut out = s.clone();
        out[r - 3] /= k;
        out[r - 2] /= k;
        Ok(self.push(Op::AvgPool { x, k }, out))
    }

    /// Single element at flat `index`.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId, DiffError> {
        let n: usize = self.shape(x).iter().product();
        if index >= n {
            return Err(self.mismatch("pick", format!("index {index} out of range for {n} values")));
        }
        Ok(self.push(Op::Pick { x, index }, vec![1]))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId, DiffError> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.shape(i)).collect();
        let shape = op
            .output_shape(&shapes)
            .map_err(|detail| DiffError::ShapeMismatch { node: format!("{}#{}", op.name(), self.nodes.len()), detail })?;
        Ok(self.push(Op::Custom { op, inputs: inputs.to_vec() }, shape))
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> Result<&Tensor, DiffError> {
        self.values[id.0].as_ref().ok_or(DiffError::NotEvaluated)
    }

    /// Evaluates every node, pulling leaf values from `lookup`.
    pub fn forward_with<'a>(&mut self, lookup: impl Fn(&str) -> Option<&'a Tensor>) -> Result<(), DiffError> {
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, &lookup)?;
            if !value.is_finite() {
                return Err(DiffError::NonFinite { node: self.label(NodeId(i)) });
            }
            self.values[i] = Some(value);
        }
        self.evaluated = true;
        Ok(())
    }

    /// Evaluates the graph on named inputs and returns the marked outputs.
    pub fn forward_eval(&mut self, inputs: &HashMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>, DiffError> {
        self.forward_with(|name| inputs.get(name))?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.values[id.0].clone().expect("evaluated")))
            .collect())
    }

    fn eval_node<'a>(&self, i: usize, lookup: &impl Fn(&str) -> Option<&'a Tensor>) -> Result<Tensor, DiffError> {
        let node = &self.nodes[i];
        let v = |id: &NodeId| self.values[id.0].as_ref().expect("inputs precede node");
        let shape = node.shape.clone();
        let out = match &node.op {
            Op::Input { name } => {
                let t = lookup(name).ok_or_else(|| DiffError::MissingInput { name: name.clone() })?;
                if t.shape() != node.shape.as_slice() {
                    return Err(DiffError::ShapeMismatch {
                        node: self.label(NodeId(i)),
                        detail: format!("declared {:?}, bound {:?}", node.shape, t.shape()),
                    });
                }
                t.clone()
            }
            Op::Const(t) => t.clone(),
            Op::Add(a, b) => zip(v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => zip(v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => zip(v(a), v(b), |x, y| x * y),
            Op::Scale(x, k) => v(x).map(|e| e * k),
            Op::AddScalar(x, k) => v(x).map(|e| e + k),
            Op::MulScalar(x, s) => {
                let s = v(s).data()[0];
                v(x).map(|e| e * s)
            }
            Op::AddBias(x, b) => {
                let b = v(b).data();
                let mut out = v(x).clone();
                for chunk in out.data_mut().chunks_exact_mut(b.len()) {
                    for (o, bi) in chunk.iter_mut().zip(b) {
                        *o += bi;
                    }
                }
                out
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(a), v(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                Tensor::from_parts(shape, kernels::matmul(ta.data(), tb.data(), m, k, n))
            }
            Op::Conv { x, w, geom, batch } => {
                let (tx, tw) = (v(x), v(w));
                let per_in = tx.len() / batch;
                let mut data = Vec::with_capacity(shape.iter().product());
                for b in 0..*batch {
                    data.extend(kernels::conv3d(&tx.data()[b * per_in..(b + 1) * per_in], tw.data(), geom));
                }
                Tensor::from_parts(shape, data)
            }
            Op::Relu(x) => v(x).map(|e| e.max(0.0)),
            Op::Log(x) => v(x).map(f64::ln),
            Op::Exp(x) => v(x).map(f64::exp),
            Op::Softmax { x, axis } => Tensor::from_parts(shape, kernels::softmax_axis(v(x).data(), v(x).shape(), *axis)),
            Op::SoftmaxCrossEntropy { logits, target } => {
                let (l, t) = (v(logits), v(target));
                let c = l.cols();
                let data = l
                    .data()
                    .chunks_exact(c)
                    .zip(t.data().chunks_exact(c))
                    .map(|(lr, tr)| -kernels::dot(&kernels::log_softmax(lr), tr))
                    .collect();
                Tensor::from_parts(shape, data)
            }
            Op::CosineRows { rows, v: vec } => Tensor::from_parts(shape, kernels::cosine_rows(v(rows).data(), v(vec).data())),
            Op::Max(x) => {
                let d = v(x).data();
                Tensor::scalar(d[kernels::argmax(d)])
            }
            Op::Min(x) => {
                let d = v(x).data();
                Tensor::scalar(d[kernels::argmin(d)])
            }
            Op::Rescale(x) => Tensor::from_parts(shape, kernels::rescale(v(x).data())),
            Op::SmoothL1(x) => v(x).map(kernels::smooth_l1),
            Op::Sum(x) => Tensor::scalar(v(x).data().iter().sum()),
            Op::MeanAxis { x, axis } => {
                let t = v(x);
                let (outer, n, inner) = kernels::axis_split(t.shape(), *axis);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                let inv = 1.0 / n as f64;
                data.iter_mut().for_each(|d| *d *= inv);
                Tensor::from_parts(shape, data)
            }
            Op::Reshape(x) => Tensor::from_parts(shape, v(x).data().to_vec()),
            Op::Concat(xs) => {
                let mut data = Vec::with_capacity(shape.iter().product());
                for x in xs {
                    data.extend_from_slice(v(x).data());
                }
                Tensor::from_parts(shape, data)
            }
            Op::Repeat { x, n } => Tensor::from_parts(shape, v(x).data().repeat(*n)),
            Op::AvgPool { x, k } => {
                let t = v(x);
                let (b, h, w, c) = pool_dims(t.shape());
                Tensor::from_parts(shape, kernels::avg_pool(t.data(), b, h, w, c, *k))
            }
            Op::Pick { x, index } => Tensor::scalar(v(x).data()[*index]),
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor> = inputs.iter().map(v).collect();
                let out = op.forward(&ins)?;
                if out.shape() != node.shape.as_slice() {
                    return Err(DiffError::ShapeMismatch {
                        node: self.label(NodeId(i)),
                        detail: format!("custom op produced {:?}, declared {:?}", out.shape(), node.shape),
                    });
                }
                out
            }
        };
        Ok(out)
    }

    /// Back-propagates from a single-element node with seed 1.
    pub fn backward_scalar(&self, out: NodeId) -> Result<Gradients, DiffError> {
        if self.shape(out).iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalar { node: self.label(out), shape: self.shape(out).to_vec() });
        }
        self.backward_from(&[(out, Tensor::full(self.shape(out), 1.0))])
    }

    /// Back-propagates seeds given per named output.
    pub fn backward(&self, seeds: &BTreeMap<String, Tensor>) -> Result<Gradients, DiffError> {
        let mut pairs = Vec::with_capacity(seeds.len());
        for (name, seed) in seeds {
            let id = self
                .output_id(name)
                .ok_or_else(|| DiffError::MissingInput { name: format!("output {name}") })?;
            pairs.push((id, seed.clone()));
        }
        self.backward_from(&pairs)
    }

    pub fn backward_from(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients, DiffError> {
        if !self.evaluated {
            return Err(DiffError::NotEvaluated);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            if seed.shape() != self.shape(*id) {
                return Err(DiffError::ShapeMismatch {
                    node: self.label(*id),
                    detail: format!("seed {:?} for output {:?}", seed.shape(), self.shape(*id)),
                });
            }
            accumulate(&mut grads[id.0], seed.clone());
        }
        let mut leaves = Gradients::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Input { name } = &node.op {
                leaves.insert(name.clone(), g);
                continue;
            }
            for (input, contrib) in self.node_backward(i, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], contrib);
                }
            }
        }
        // leaves never reached still get an explicit zero gradient
        for node in &self.nodes {
            if let Op::Input { name } = &node.op {
                if node.requires_grad && !leaves.contains_key(name) {
                    leaves.insert(name.clone(), Tensor::zeros(&node.shape));
                }
            }
        }
        Ok(leaves)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>, DiffError> {
        let node = &self.nodes[i];
        let v = |id: &NodeId| self.values[id.0].as_ref().expect("evaluated");
        let out = self.values[i].as_ref().expect("evaluated");
        let gd = g.data();
        let like = |id: &NodeId, data: Vec<f64>| Tensor::from_parts(self.nodes[id.0].shape.clone(), data);
        let res = match &node.op {
            Op::Input { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|e| -e))],
            Op::Mul(a, b) => vec![(*a, zip(g, v(b), |x, y| x * y)), (*b, zip(g, v(a), |x, y| x * y))],
            Op::Scale(x, k) => vec![(*x, g.map(|e| e * k))],
            Op::AddScalar(x, _) => vec![(*x, g.clone())],
            Op::MulScalar(x, s) => {
                let sv = v(s).data()[0];
                let gs = kernels::dot(gd, v(x).data());
                vec![(*x, g.map(|e| e * sv)), (*s, like(s, vec![gs]))]
            }
            Op::AddBias(x, b) => {
                let c = self.shape(*b)[0];
                let mut gb = vec![0.0; c];
                for chunk in gd.chunks_exact(c) {
                    for (o, e) in gb.iter_mut().zip(chunk) {
                        *o += e;
                    }
                }
                vec![(*x, g.clone()), (*b, like(b, gb))]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(a), v(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut res = Vec::new();
                if self.wants(*a) {
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            ga[r * k + p] = kernels::dot(&gd[r * n..(r + 1) * n], &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                    res.push((*a, like(a, ga)));
                }
                if self.wants(*b) {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            for c in 0..n {
                                gb[p * n + c] += av * gd[r * n + c];
                            }
                        }
                    }
                    res.push((*b, like(b, gb)));
                }
                res
            }
            Op::Conv { x, w, geom, batch } => {
                let (tx, tw) = (v(x), v(w));
                let per_in = tx.len() / batch;
                let per_out = g.len() / batch;
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let mut gx = want_x.then(|| Vec::with_capacity(tx.len()));
                let mut gw = want_w.then(|| vec![0.0; tw.len()]);
                for b in 0..*batch {
                    let (px, pw) = kernels::conv3d_backward(
                        &tx.data()[b * per_in..(b + 1) * per_in],
                        tw.data(),
                        &gd[b * per_out..(b + 1) * per_out],
                        geom,
                        want_x,
                        want_w,
                    );
                    if let (Some(acc), Some(px)) = (gx.as_mut(), px) {
                        acc.extend(px);
                    }
                    if let (Some(acc), Some(pw)) = (gw.as_mut(), pw) {
                        for (a, p) in acc.iter_mut().zip(pw) {
                            *a += p;
                        }
                    }
                }
                let mut res = Vec::new();
                if let Some(gx) = gx {
                    res.push((*x, like(x, gx)));
                }
                if let Some(gw) = gw {
                    res.push((*w, like(w, gw)));
                }
                res
            }
            Op::Relu(x) => vec![(*x, zip(g, v(x), |ge, xe| if xe > 0.0 { ge } else { 0.0 }))],
            Op::Log(x) => vec![(*x, zip(g, v(x), |ge, xe| ge / xe))],
            Op::Exp(x) => vec![(*x, zip(g, out, |ge, ye| ge * ye))],
            Op::Softmax { x, axis } => {
                vec![(*x, like(x, kernels::softmax_axis_backward(out.data(), gd, out.shape(), *axis)))]
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let (l, t) = (v(logits), v(target));
                let c = l.cols();
                let mut gl = vec![0.0; l.len()];
                let mut gt = vec![0.0; t.len()];
                for (r, (lr, tr)) in l.data().chunks_exact(c).zip(t.data().chunks_exact(c)).enumerate() {
                    let ls = kernels::log_softmax(lr);
                    let mass: f64 = tr.iter().sum();
                    for j in 0..c {
                        gl[r * c + j] = gd[r] * (ls[j].exp() * mass - tr[j]);
                        gt[r * c + j] = -gd[r] * ls[j];
                    }
                }
                vec![(*logits, like(logits, gl)), (*target, like(target, gt))]
            }
            Op::CosineRows { rows, v: vec } => {
                let (gr, gv) = kernels::cosine_rows_backward(v(rows).data(), v(vec).data(), out.data(), gd);
                vec![(*rows, like(rows, gr)), (*vec, like(vec, gv))]
            }
            Op::Max(x) | Op::Min(x) => {
                let d = v(x).data();
                let idx = if matches!(node.op, Op::Max(_)) { kernels::argmax(d) } else { kernels::argmin(d) };
                let mut gx = vec![0.0; d.len()];
                gx[idx] = gd[0];
                vec![(*x, like(x, gx))]
            }
            Op::Rescale(x) => vec![(*x, like(x, kernels::rescale_backward(v(x).data(), out.data(), gd)))],
            Op::SmoothL1(x) => vec![(*x, zip(g, v(x), |ge, xe| ge * kernels::smooth_l1_grad(xe)))],
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::MeanAxis { x, axis } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = kernels::axis_split(sx, *axis);
                let inv = 1.0 / n as f64;
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for j in 0..inner {
                            gx[(o * n + k) * inner + j] = gd[o * inner + j] * inv;
                        }
                    }
                }
                vec![(*x, like(x, gx))]
            }
            Op::Reshape(x) => vec![(*x, like(x, gd.to_vec()))],
            Op::Concat(xs) => {
                let mut off = 0;
                xs.iter()
                    .map(|x| {
                        let n: usize = self.shape(*x).iter().product();
                        let part = like(x, gd[off..off + n].to_vec());
                        off += n;
                        (*x, part)
                    })
                    .collect()
            }
            Op::Repeat { x, n } => {
                let m: usize = self.shape(*x).iter().product();
                let mut gx = vec![0.0; m];
                for r in 0..*n {
                    for (a, e) in gx.iter_mut().zip(&gd[r * m..(r + 1) * m]) {
                        *a += e;
                    }
                }
                vec![(*x, like(x, gx))]
            }
            Op::AvgPool { x, k } => {
                let (b, h, w, c) = pool_dims(self.shape(*x));
                vec![(*x, like(x, kernels::avg_pool_backward(gd, b, h, w, c, *k)))]
            }
            Op::Pick { x, index } => {
                let mut gx = vec![0.0; self.shape(*x).iter().product()];
                gx[*index] = gd[0];
                vec![(*x, like(x, gx))]
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor> = inputs.iter().map(v).collect();
                let contribs = op.backward(&ins, out, g).map_err(|e| match e {
                    DiffError::NotDifferentiable { reason, .. } => {
                        DiffError::NotDifferentiable { node: self.label(NodeId(i)), reason }
                    }
                    other => other,
                })?;
                inputs
                    .iter()
                    .zip(contribs)
                    .filter_map(|(id, c)| c.map(|c| (*id, c)))
                    .collect()
            }
        };
        Ok(res)
    }

    /// Smallest distance, over the last evaluation, from an input of a
    /// piecewise op to one of its non-differentiable points (relu at 0,
    /// smooth-L1 at |x| = 1, ties in max / min / rescale, custom-op kinks).
    pub fn kink_margin(&self) -> Result<f64, DiffError> {
        if !self.evaluated {
            return Err(DiffError::NotEvaluated);
        }
        let v = |id: &NodeId| self.values[id.0].as_ref().expect("evaluated");
        let mut margin = f64::INFINITY;
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let m = match &node.op {
                Op::Relu(x) => v(x).data().iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min),
                Op::SmoothL1(x) => v(x).data().iter().map(|e| (e.abs() - 1.0).abs()).fold(f64::INFINITY, f64::min),
                Op::Max(x) => top_gap(v(x).data()),
                Op::Min(x) => top_gap(&v(x).data().iter().map(|e| -e).collect::<Vec<_>>()),
                Op::Rescale(x) => {
                    let d = v(x).data();
                    let neg: Vec<f64> = d.iter().map(|e| -e).collect();
                    top_gap(d).min(top_gap(&neg))
                }
                Op::Custom { op, inputs } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(v).collect();
                    op.kink_margin(&ins, self.values[i].as_ref().expect("evaluated"))
                }
                _ => f64::INFINITY,
            };
            margin = margin.min(m);
        }
        Ok(margin)
    }

    /// Names and shapes of all gradient-carrying leaves.
    pub fn leaves(&self) -> Vec<(String, Vec<usize>)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name } if n.requires_grad => Some((name.clone(), n.shape.clone())),
                _ => None,
            })
            .collect()
    }
}

/// Gap between the largest and second-largest entry.
pub(crate) fn top_gap(d: &[f64]) -> f64 {
    if d.len() < 2 {
        return f64::INFINITY;
    }
    let i = kernels::argmax(d);
    let second = d
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, e)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    d[i] - second
}

fn pool_dims(s: &[usize]) -> (usize, usize, usize, usize) {
    let r = s.len();
    (s[..r - 3].iter().product(), s[r - 3], s[r - 2], s[r - 1])
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, e) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += e;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use proptest::prelude::*;

    fn bind(pairs: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn identity_returns_input() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 2]);
        g.mark_output("y", x);
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = g.forward_eval(&bind(&[("x", t.clone())])).unwrap();
        assert_eq!(out["y"], t);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]);
        let s = g.softmax(x, 0).unwrap();
        g.mark_output("s", s);
        let out = g.forward_eval(&bind(&[("x", Tensor::zeros(&[3]))])).unwrap();
        for v in out["s"].data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    fn cosine_graph() -> Graph {
        let mut g = Graph::new();
        let u = g.input("u", &[1, 2]);
        let v = g.input("v", &[2]);
        let c = g.cosine_rows(u, v).unwrap();
        let c = g.sum(c);
        g.mark_output("c", c);
        g
    }

    #[test]
    fn cosine_of_3_4_and_4_3() {
        let mut g = cosine_graph();
        let out = g.forward_eval(&bind(&[("u", Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()), ("v", Tensor::vector(vec![4.0, 3.0]))])).unwrap();
        assert!((out["c"].item().unwrap() - 0.96).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3, 2]);
        let s = g.sum(x);
        g.mark_output("s", s);
        g.forward_eval(&bind(&[("x", Tensor::full(&[2, 3, 2], -0.7))])).unwrap();
        let gr = g.backward_scalar(s).unwrap();
        assert_eq!(gr["x"], Tensor::full(&[2, 3, 2], 1.0));
    }

    #[test]
    fn softmax_pick_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let s = g.softmax(x, 0).unwrap();
        let p = g.pick(s, 0).unwrap();
        g.mark_output("p", p);
        g.forward_eval(&bind(&[("x", Tensor::zeros(&[2]))])).unwrap();
        let gr = g.backward_scalar(p).unwrap();
        assert_eq!(gr["x"].data(), &[0.25, -0.25]);
    }

    #[test]
    fn cosine_is_stationary_at_equal_vectors() {
        let mut g = cosine_graph();
        let p = bind(&[("u", Tensor::new(vec![1, 2], vec![0.6, -1.3]).unwrap()), ("v", Tensor::vector(vec![0.6, -1.3]))]);
        g.forward_eval(&p).unwrap();
        let out = g.output_id("c").unwrap();
        let gr = g.backward_scalar(out).unwrap();
        assert!(gr["u"].data().iter().chain(gr["v"].data()).all(|d| d.abs() < 1e-12));
        let r = finite_diff_check(&mut g, "c", &p, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{r}");
        assert!(r.max_abs() < 1e-9);
    }

    #[test]
    fn linear_function_checks_exactly() {
        let mut g = Graph::new();
        let x = g.input("x", &[4]);
        let w = g.constant(Tensor::vector(vec![0.5, -2.0, 3.0, 0.25]));
        let y = g.mul(x, w).unwrap();
        let y = g.sum(y);
        g.mark_output("y", y);
        let r = finite_diff_check(&mut g, "y", &bind(&[("x", Tensor::vector(vec![1.0, 2.0, -1.0, 0.5]))]), 1e-5, 1e-4).unwrap();
        assert!(r.pass);
        assert!(r.max_rel() < 1e-9, "{r}");
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let s = g.sum(x);
        assert_eq!(g.backward_scalar(s).unwrap_err(), DiffError::NotEvaluated);
    }

    #[test]
    fn shape_and_binding_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]);
        let b = g.input("b", &[2, 2]);
        assert!(matches!(g.add(a, b), Err(DiffError::ShapeMismatch { .. })));
        let s = g.sum(a);
        g.mark_output("s", s);
        assert!(matches!(g.forward_eval(&HashMap::new()), Err(DiffError::MissingInput { .. })));
        let wrong = bind(&[("a", Tensor::zeros(&[3, 2])), ("b", Tensor::zeros(&[2, 2]))]);
        assert!(matches!(g.forward_eval(&wrong), Err(DiffError::ShapeMismatch { .. })));
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let l = g.log(x);
        g.mark_output("l", l);
        let e = g.forward_eval(&bind(&[("x", Tensor::vector(vec![1.0, 0.0]))])).unwrap_err();
        assert!(matches!(e, DiffError::NonFinite { .. }), "{e}");
        assert!(matches!(finite_diff_check(&mut g, "l", &bind(&[("x", Tensor::vector(vec![1.0, 2.0]))]), 1e-5, 1e-4), Err(DiffError::NonScalar { .. })));
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let build = || {
            let mut g = Graph::new();
            let x = g.input("x", &[1, 5, 5, 2]);
            let w = g.input("w", &[3, 3, 2, 3]);
            let y = g.conv2d(x, w, 2, 1).unwrap();
            let y = g.relu(y);
            let y = g.reshape(y, &[9, 3]).unwrap();
            let y = g.softmax(y, 1).unwrap();
            let y = g.log(y);
            let y = g.sum(y);
            g.mark_output("y", y);
            g
        };
        let x: Vec<f64> = (0..50).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let w: Vec<f64> = (0..54).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let p = bind(&[("x", Tensor::new(vec![1, 5, 5, 2], x).unwrap()), ("w", Tensor::new(vec![3, 3, 2, 3], w).unwrap())]);
        let run = || {
            let mut g = build();
            let out = g.forward_eval(&p).unwrap();
            let id = g.output_id("y").unwrap();
            let first = g.backward_scalar(id).unwrap();
            assert_eq!(first, g.backward_scalar(id).unwrap());
            (out, first)
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a["y"].data()[0].to_bits(), b["y"].data()[0].to_bits());
        for (k, t) in &ga {
            assert!(t.data().iter().zip(gb[k].data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in proptest::collection::vec(-30.0f64..30.0, 35)) {
            let data: Vec<f64> = seed.iter().cycle().take(rows * cols).copied().collect();
            let mut g = Graph::new();
            let x = g.input("x", &[rows, cols]);
            let s = g.softmax(x, 1).unwrap();
            g.mark_output("s", s);
            let out = g.forward_eval(&bind(&[("x", Tensor::new(vec![rows, cols], data).unwrap())])).unwrap();
            for r in 0..rows {
                let row = out["s"].row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
