use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, Layout};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Exp(NodeId),
    Sqrt(NodeId),
    Log(NodeId),
    Relu(NodeId),
    MatMul { a: NodeId, b: NodeId, trans_a: bool, trans_b: bool },
    Conv2d { input: NodeId, kernel: NodeId },
    Downsample(NodeId),
    Upsample(NodeId, usize),
    Softmax(NodeId, usize),
    SumAxis(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId, Vec<usize>),
    SelectColumns(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Downsample(..) => "downsample",
            Op::Upsample(..) => "upsample",
            Op::Softmax(..) => "softmax",
            Op::SumAxis(..) => "sum_axis",
            Op::Sum(..) => "reduce_sum",
            Op::Mean(..) => "reduce_mean",
            Op::Reshape(..) => "reshape",
            Op::SelectColumns(..) => "select_columns",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    name: Option<String>,
}

/// Topologically ordered record of tensor operations.
///
/// Nodes can only reference earlier nodes, so the insertion order is a valid
/// evaluation order and the graph is acyclic by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of leaves whose tensor requires a gradient, in sorted order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self
            .leaves
            .iter()
            .filter(|(_, id)| self.nodes[id.0].value.is_param())
            .map(|(n, _)| n.clone())
            .collect();
        names.sort();
        names
    }

    /// Attaches an output name, making the node visible in [`Graph::evaluate`] results.
    pub fn set_name(&mut self, id: NodeId, name: impl Into<String>) {
        self.nodes[id.0].name = Some(name.into());
    }

    /// Registers a named leaf. Its `requires_grad` flag decides whether
    /// [`Graph::backpropagate`] reports a gradient for it.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        let name = name.into();
        if self.leaves.contains_key(&name) {
            return Err(TensorError::Invalid { op: "leaf", detail: format!("duplicate leaf `{name}`") });
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let id = self.push_raw(Op::Leaf, value, Some(name.clone()));
        self.leaves.insert(name, id);
        Ok(id)
    }

    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        self.leaf(name, value.requires_grad(false))
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        self.leaf(name, value.requires_grad(true))
    }

    /// Unnamed value that never receives a gradient and is never rebound.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Constant, value.requires_grad(false), None)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, name: Option<String>) -> NodeId {
        self.nodes.push(Node { op, value, name });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.compute(&op)?;
        Ok(self.push_raw(op, value, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> Result<NodeId> {
        self.push(Op::Offset(a, shift))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    /// Matrix product of two rank-2 nodes, optionally transposing either side.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        self.push(Op::MatMul { a, b, trans_a, trans_b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// Same-padded stride-1 convolution of `[c, h, w]` with an odd square
    /// kernel `[o, c, k, k]`, producing `[o, h, w]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2d { input, kernel })
    }

    /// Stride-2 downsampling (2x2 mean) over the trailing two axes.
    pub fn downsample(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Downsample(a))
    }

    /// Nearest-neighbour upsampling over the trailing two axes.
    pub fn upsample(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        self.push(Op::Upsample(a, factor))
    }

    /// Softmax along `axis` (the channel axis for `[k, h, w]` logits is 0).
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::Softmax(a, axis))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::SumAxis(a, axis))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.into()))
    }

    /// Picks columns of a rank-2 node: `[r, n] -> [r, indices.len()]`.
    pub fn select_columns(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.push(Op::SelectColumns(a, indices))
    }

    fn compute(&self, op: &Op) -> Result<Tensor> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let name = op.name();
        let out = match op {
            Op::Leaf | Op::Constant => unreachable!("leaves are not computed"),
            Op::Add(a, b) => binary(name, v(*a), v(*b), |x, y| x + y)?,
            Op::Sub(a, b) => binary(name, v(*a), v(*b), |x, y| x - y)?,
            Op::Mul(a, b) => binary(name, v(*a), v(*b), |x, y| x * y)?,
            Op::Div(a, b) => binary(name, v(*a), v(*b), |x, y| x / y)?,
            Op::Scale(a, s) => v(*a).map(|x| x * s),
            Op::Offset(a, s) => v(*a).map(|x| x + s),
            Op::Exp(a) => v(*a).map(f64::exp),
            Op::Sqrt(a) => v(*a).map(f64::sqrt),
            Op::Log(a) => v(*a).map(f64::ln),
            Op::Relu(a) => v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::MatMul { a, b, trans_a, trans_b } => matmul(v(*a), v(*b), *trans_a, *trans_b)?,
            Op::Conv2d { input, kernel } => conv2d(v(*input), v(*kernel))?,
            Op::Downsample(a) => {
                let x = v(*a);
                let (planes, h, w) = spatial_dims(name, x.shape())?;
                if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                    return Err(shape_err(name, format!("spatial dims {h}x{w} must be even and nonzero")));
                }
                let mut shape = x.shape().to_vec();
                let r = shape.len();
                shape[r - 2] /= 2;
                shape[r - 1] /= 2;
                Tensor::new(shape, kernels::avg_pool2(x.data(), planes, h, w))?
            }
            Op::Upsample(a, f) => {
                let x = v(*a);
                if *f == 0 {
                    return Err(TensorError::Invalid { op: name, detail: "factor must be positive".into() });
                }
                let (planes, h, w) = spatial_dims(name, x.shape())?;
                let mut shape = x.shape().to_vec();
                let r = shape.len();
                shape[r - 2] *= f;
                shape[r - 1] *= f;
                Tensor::new(shape, kernels::upsample_nearest(x.data(), planes, h, w, *f))?
            }
            Op::Softmax(a, axis) => {
                let x = v(*a);
                check_axis(name, x.shape(), *axis)?;
                let (o, l, i) = kernels::split_axis(x.shape(), *axis);
                Tensor::new(x.shape().to_vec(), kernels::softmax_axis(x.data(), o, l, i))?
            }
            Op::SumAxis(a, axis) => {
                let x = v(*a);
                check_axis(name, x.shape(), *axis)?;
                let (o, l, i) = kernels::split_axis(x.shape(), *axis);
                let mut shape = x.shape().to_vec();
                shape.remove(*axis);
                Tensor::new(shape, kernels::sum_axis(x.data(), o, l, i))?
            }
            Op::Sum(a) => Tensor::scalar(v(*a).data().iter().sum()),
            Op::Mean(a) => {
                let x = v(*a);
                if x.numel() == 0 {
                    return Err(shape_err(name, "mean of an empty tensor".into()));
                }
                Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
            }
            Op::Reshape(a, shape) => v(*a).clone().requires_grad(false).reshape(shape.clone())?,
            Op::SelectColumns(a, idx) => {
                let x = v(*a);
                if x.rank() != 2 {
                    return Err(shape_err(name, format!("expected rank 2, got {:?}", x.shape())));
                }
                let (r, n) = (x.shape()[0], x.shape()[1]);
                if let Some(bad) = idx.iter().find(|&&i| i >= n) {
                    return Err(shape_err(name, format!("column {bad} out of range for {n} columns")));
                }
                let mut data = Vec::with_capacity(r * idx.len());
                for row in 0..r {
                    data.extend(idx.iter().map(|&c| x.data()[row * n + c]));
                }
                Tensor::new(vec![r, idx.len()], data)?
            }
        };
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(out.requires_grad(false))
    }

    /// Re-runs the recorded operations with the given leaves rebound.
    ///
    /// Leaves not mentioned keep their recorded values; constants never change.
    /// Returns the values of every named non-leaf node.
    pub fn evaluate(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        for (name, t) in inputs {
            let id = self.leaf_id(name).ok_or_else(|| TensorError::UnknownLeaf(name.clone()))?;
            let node = &mut self.nodes[id.0];
            if node.value.shape() != t.shape() {
                return Err(shape_err(
                    "evaluate",
                    format!("leaf `{name}` recorded as {:?}, rebound as {:?}", node.value.shape(), t.shape()),
                ));
            }
            let flag = node.value.is_param();
            node.value = t.clone().requires_grad(flag);
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let value = self.compute(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(self
            .nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .filter_map(|n| n.name.as_ref().map(|name| (name.clone(), n.value.clone())))
            .collect())
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf.
    /// Parameters the loss does not depend on get an all-zero gradient.
    pub fn backpropagate(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.node_gradients(loss)?;
        Ok(self.collect_leaf_grads(grads, true))
    }

    /// Like [`Graph::backpropagate`] but also reports gradients for non-parameter leaves.
    pub fn leaf_gradients(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.node_gradients(loss)?;
        Ok(self.collect_leaf_grads(grads, false))
    }

    fn collect_leaf_grads(&self, mut grads: Vec<Option<Tensor>>, params_only: bool) -> BTreeMap<String, Tensor> {
        self.leaves
            .iter()
            .filter(|(_, id)| !params_only || self.nodes[id.0].value.is_param())
            .map(|(name, id)| {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    fn node_gradients(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.backward_node(i, &g)? {
                if matches!(self.nodes[input.0].op, Op::Constant) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(grads)
    }

    fn backward_node(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[i];
        let v = |id: NodeId| &self.nodes[id.0].value;
        let out = node.value.shape();
        let like = |id: NodeId, data: Vec<f64>| Tensor::new(v(id).shape().to_vec(), data);
        let res = match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let ga = kernels::reduce_to_shape(g.data(), out, v(*a).shape());
                let mut gb = kernels::reduce_to_shape(g.data(), out, v(*b).shape());
                if matches!(node.op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (v(*a), v(*b));
                let mut ta = vec![0.0; g.numel()];
                let mut tb = vec![0.0; g.numel()];
                kernels::for_each_broadcast(out, va.shape(), vb.shape(), |o, ia, ib| {
                    ta[o] = g.data()[o] * vb.data()[ib];
                    tb[o] = g.data()[o] * va.data()[ia];
                });
                vec![
                    (*a, like(*a, kernels::reduce_to_shape(&ta, out, va.shape()))?),
                    (*b, like(*b, kernels::reduce_to_shape(&tb, out, vb.shape()))?),
                ]
            }
            Op::Div(a, b) => {
                let (va, vb) = (v(*a), v(*b));
                let mut ta = vec![0.0; g.numel()];
                let mut tb = vec![0.0; g.numel()];
                kernels::for_each_broadcast(out, va.shape(), vb.shape(), |o, ia, ib| {
                    let d = vb.data()[ib];
                    ta[o] = g.data()[o] / d;
                    tb[o] = -g.data()[o] * va.data()[ia] / (d * d);
                });
                vec![
                    (*a, like(*a, kernels::reduce_to_shape(&ta, out, va.shape()))?),
                    (*b, like(*b, kernels::reduce_to_shape(&tb, out, vb.shape()))?),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::Offset(a, _) | Op::Reshape(a, _) => vec![(*a, like(*a, g.data().to_vec())?)],
            Op::Exp(a) => vec![(*a, zip_with(g, &node.value, |g, y| g * y))],
            Op::Sqrt(a) => vec![(*a, zip_with(g, &node.value, |g, y| 0.5 * g / y))],
            Op::Log(a) => vec![(*a, zip_with(g, v(*a), |g, x| g / x))],
            Op::Relu(a) => vec![(*a, zip_with(g, v(*a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (ga, gb) = matmul_backward(v(*a), v(*b), *trans_a, *trans_b, g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { input, kernel } => {
                let (gx, gk) = conv2d_backward(v(*input), v(*kernel), g);
                vec![(*input, gx), (*kernel, gk)]
            }
            Op::Downsample(a) => {
                let (planes, h, w) = spatial_dims("downsample", v(*a).shape())?;
                vec![(*a, like(*a, kernels::avg_pool2_backward(g.data(), planes, h, w))?)]
            }
            Op::Upsample(a, f) => {
                let (planes, h, w) = spatial_dims("upsample", v(*a).shape())?;
                vec![(*a, like(*a, kernels::upsample_nearest_backward(g.data(), planes, h, w, *f))?)]
            }
            Op::Softmax(a, axis) => {
                let (o, l, inner) = kernels::split_axis(out, *axis);
                let dx = kernels::softmax_axis_backward(node.value.data(), g.data(), o, l, inner);
                vec![(*a, like(*a, dx)?)]
            }
            Op::SumAxis(a, axis) => {
                let (o, l, inner) = kernels::split_axis(v(*a).shape(), *axis);
                let mut dx = vec![0.0; o * l * inner];
                for oo in 0..o {
                    for ll in 0..l {
                        let dst = &mut dx[(oo * l + ll) * inner..(oo * l + ll + 1) * inner];
                        dst.copy_from_slice(&g.data()[oo * inner..(oo + 1) * inner]);
                    }
                }
                vec![(*a, like(*a, dx)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape().to_vec(), g.item()))],
            Op::Mean(a) => {
                let n = v(*a).numel() as f64;
                vec![(*a, Tensor::full(v(*a).shape().to_vec(), g.item() / n))]
            }
            Op::SelectColumns(a, idx) => {
                let (r, n) = (v(*a).shape()[0], v(*a).shape()[1]);
                let m = idx.len();
                let mut dx = vec![0.0; r * n];
                for row in 0..r {
                    for (j, &c) in idx.iter().enumerate() {
                        dx[row * n + c] += g.data()[row * m + j];
                    }
                }
                vec![(*a, like(*a, dx)?)]
            }
        };
        Ok(res)
    }
}

fn zip_with(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same numel")
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out = kernels::broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| shape_err(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
    let mut data = vec![0.0; out.iter().product()];
    kernels::for_each_broadcast(&out, a.shape(), b.shape(), |o, ia, ib| {
        data[o] = f(a.data()[ia], b.data()[ib]);
    });
    Tensor::new(out, data)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return Err(shape_err(op, format!("needs at least 2 dims, got {shape:?}")));
    }
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

fn mat_dims(t: &Tensor, trans: bool) -> (usize, usize, Layout) {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    if trans {
        (c, r, Layout::transposed(c))
    } else {
        (r, c, Layout::row_major(c))
    }
}

fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err("matmul", format!("operands must be rank 2, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (m, k, la) = mat_dims(a, trans_a);
    let (k2, n, lb) = mat_dims(b, trans_b);
    if k != k2 {
        return Err(shape_err("matmul", format!("inner dims differ: {m}x{k} times {k2}x{n}")));
    }
    let mut c = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), la, b.data(), lb, 0.0, &mut c, Layout::row_major(n));
    Tensor::new(vec![m, n], c)
}

fn matmul_backward(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k, la) = mat_dims(a, trans_a);
    let (_, n, lb) = mat_dims(b, trans_b);
    let lg = Layout::row_major(n);
    // d(op(A)) = G · op(B)^T, written straight into A's storage order.
    let mut ga = vec![0.0; m * k];
    let la_out = if trans_a { Layout::transposed(m) } else { Layout::row_major(k) };
    let lbt = Layout { rs: lb.cs, cs: lb.rs };
    kernels::gemm(m, n, k, g.data(), lg, b.data(), lbt, 0.0, &mut ga, la_out);
    // d(op(B)) = op(A)^T · G
    let mut gb = vec![0.0; k * n];
    let lb_out = if trans_b { Layout::transposed(k) } else { Layout::row_major(n) };
    let lat = Layout { rs: la.cs, cs: la.rs };
    kernels::gemm(k, m, n, a.data(), lat, g.data(), lg, 0.0, &mut gb, lb_out);
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape"),
    )
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(shape_err(
            "conv2d",
            format!("expected input [c,h,w] and kernel [o,c,k,k], got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, ci, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != c {
        return Err(shape_err("conv2d", format!("input has {c} channels, kernel expects {ci}")));
    }
    if k != k2 || k % 2 == 0 {
        return Err(shape_err("conv2d", format!("kernel must be square and odd, got {k}x{k2}")));
    }
    Ok((c, h, wd, o, k))
}

fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (c, h, wd, o, k) = conv_dims(x, w)?;
    let hw = h * wd;
    let ckk = c * k * k;
    let mut out = vec![0.0; o * hw];
    let cols;
    let cols_ref = if k == 1 {
        x.data()
    } else {
        cols = kernels::im2col(x.data(), c, h, wd, k);
        &cols
    };
    kernels::gemm(o, ckk, hw, w.data(), Layout::row_major(ckk), cols_ref, Layout::row_major(hw), 0.0, &mut out, Layout::row_major(hw));
    Tensor::new(vec![o, h, wd], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (c, h, wd, o, k) = conv_dims(x, w).expect("validated in forward");
    let hw = h * wd;
    let ckk = c * k * k;
    let cols;
    let cols_ref = if k == 1 {
        x.data()
    } else {
        cols = kernels::im2col(x.data(), c, h, wd, k);
        &cols
    };
    let mut gw = vec![0.0; o * ckk];
    kernels::gemm(o, hw, ckk, g.data(), Layout::row_major(hw), cols_ref, Layout::transposed(hw), 0.0, &mut gw, Layout::row_major(ckk));
    let mut gcols = vec![0.0; ckk * hw];
    kernels::gemm(ckk, o, hw, w.data(), Layout::transposed(ckk), g.data(), Layout::row_major(hw), 0.0, &mut gcols, Layout::row_major(hw));
    let gx = if k == 1 { gcols } else { kernels::col2im(&gcols, c, h, wd, k) };
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2, 1, 1], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn one_by_one_conv_scales_image() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::full(vec![1, 3, 3], 1.0)).unwrap();
        let w = g.param("w", Tensor::full(vec![1, 1, 1, 1], 2.0)).unwrap();
        let y = g.conv2d(x, w).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn three_by_three_conv_matches_hand_sum() {
        // All-ones 3x3 kernel over all-ones 3x3 image with zero padding counts neighbours.
        let mut g = Graph::new();
        let x = g.input("x", Tensor::full(vec![1, 3, 3], 1.0)).unwrap();
        let w = g.param("w", Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[3], &[0.3, -2.0, 5.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backpropagate(s).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backpropagate(s).unwrap()["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(-1.0)).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.backpropagate(r).unwrap()["x"].item(), 0.0);
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(0.0)).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.backpropagate(r).unwrap()["x"].item(), 0.0);
    }

    #[test]
    fn untouched_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2], &[1.0, 2.0])).unwrap();
        g.param("unused", t(&[2, 2], &[1.0; 4])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backpropagate(s).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backpropagate(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.input("b", Tensor::zeros(vec![4, 2])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("2x3"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn log_of_zero_is_a_numeric_error() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(g.log(a), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn evaluate_rebinds_leaves_and_is_repeatable() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.set_name(s, "loss");
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), t(&[2], &[3.0, 4.0]));
        let first = g.evaluate(&inputs).unwrap();
        let second = g.evaluate(&inputs).unwrap();
        assert_eq!(first["loss"].item(), 25.0);
        assert_eq!(first["loss"].data()[0].to_bits(), second["loss"].data()[0].to_bits());
    }

    #[test]
    fn transposed_matmul_gradients() {
        // loss = sum(A^T B) ; dA = B 1^T per column, checked against explicit values.
        let mut g = Graph::new();
        let a = g.param("a", t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = g.param("b", t(&[2, 2], &[1.0, 0.5, -1.0, 2.0])).unwrap();
        let c = g.matmul_t(a, b, true, false).unwrap();
        assert_eq!(g.shape(c), &[3, 2]);
        assert_eq!(g.value(c).data(), &[-3.0, 8.5, -3.0, 11.0, -3.0, 13.5]);
        let s = g.sum(c).unwrap();
        let grads = g.backpropagate(s).unwrap();
        // d/dA[r][i] = sum_j B[r][j]
        assert_eq!(grads["a"].data(), &[1.5, 1.5, 1.5, 1.0, 1.0, 1.0]);
        // d/dB[r][j] = sum_i A[r][i]
        assert_eq!(grads["b"].data(), &[6.0, 6.0, 15.0, 15.0]);
    }
}
