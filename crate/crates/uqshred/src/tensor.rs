//! Dense row-major f64 tensors with tape-based reverse-mode differentiation.
//!
//! Operations are recorded eagerly: `record` computes the output immediately
//! and appends a node holding the cached value, so the tape is topologically
//! ordered by construction. `backward` walks the tape in reverse, seeding the
//! scalar root with 1 and accumulating vector-Jacobian products into one
//! gradient slot per node.
//!
//! There is no broadcasting except scalar-times-tensor (`scale`); every other
//! binary op requires exactly matching shapes.

use crate::error::{Error, Result};

/// Norm magnitudes below this use the zero subgradient in `smoothed_l2_norm`.
/// The forward value stays the exact norm; only the backward pass is smoothed,
/// which keeps the loss unbiased while avoiding NaN when two noise draws
/// produce nearly identical outputs.
pub const NORM_GRAD_EPS: f64 = 1e-12;

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense multidimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; n],
        }
    }

    /// Rank-0-like scalar, stored as shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Rank-1 tensor from values.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape(
                "item",
                format!("expected scalar, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Operation kinds ──────────────────────────────────────────────────

/// Differentiable operation kinds recordable on a [`Graph`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Input node holding a constant value; never produced by `record`.
    Leaf,
    /// `[a,b] @ [b,c] -> [a,c]`, or `[a,b] @ [b] -> [a]`.
    MatMul,
    Add,
    Subtract,
    /// Elementwise product of identically shaped tensors.
    Hadamard,
    /// Concatenation along `axis`; all other extents must match.
    Concat { axis: usize },
    /// Contiguous range of the flattened input, emitted as a rank-1 tensor.
    Slice { offset: usize, len: usize },
    Sigmoid,
    Tanh,
    Relu,
    /// Multiply every element by a compile-time-known constant.
    Scale { factor: f64 },
    /// Full reduction to a `[1]`-shaped scalar.
    Sum,
    /// Exact Euclidean norm of the flattened input; see [`NORM_GRAD_EPS`].
    SmoothedL2Norm,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Subtract => "subtract",
            OpKind::Hadamard => "hadamard",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Scale { .. } => "scale",
            OpKind::Sum => "sum",
            OpKind::SmoothedL2Norm => "smoothed_l2_norm",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Subtract
            | OpKind::Hadamard
            | OpKind::Concat { .. } => 2,
            OpKind::Leaf => 0,
            _ => 1,
        }
    }
}

// ── Graph ────────────────────────────────────────────────────────────

/// Identifier of a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Node {
    kind: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Append-only tape of eagerly evaluated operations plus one gradient slot
/// per node. A graph is owned by a single forward/backward pass; tensors
/// detached from any graph are plain immutable values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Register an input value, returning its node id.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, Vec::new(), value)
    }

    /// Cached output of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the most recent `backward` root with respect to `id`,
    /// if `id` was reachable from that root.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { kind, inputs, value });
        self.grads.push(None);
        id
    }

    /// Record an operation: validate shapes, compute the output eagerly,
    /// append the node. Inputs must be earlier node ids, which keeps the
    /// tape topologically sorted by construction.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(kind, OpKind::Leaf) {
            return Err(Error::InvalidArgument(
                "leaf nodes are created with Graph::leaf, not record".into(),
            ));
        }
        if inputs.len() != kind.arity() {
            return Err(Error::shape(
                kind.name(),
                format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        for &id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!(
                    "node id {} out of range for {}",
                    id.0,
                    kind.name()
                )));
            }
        }
        let value = self.eval(&kind, inputs)?;
        Ok(self.push(kind, inputs.to_vec(), value))
    }

    fn eval(&self, kind: &OpKind, inputs: &[NodeId]) -> Result<Tensor> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        match kind {
            OpKind::Leaf => unreachable!(),
            OpKind::MatMul => matmul_forward(val(0), val(1)),
            OpKind::Add => elementwise2(kind.name(), val(0), val(1), |a, b| a + b),
            OpKind::Subtract => elementwise2(kind.name(), val(0), val(1), |a, b| a - b),
            OpKind::Hadamard => elementwise2(kind.name(), val(0), val(1), |a, b| a * b),
            OpKind::Concat { axis } => concat_forward(*axis, val(0), val(1)),
            OpKind::Slice { offset, len } => {
                let v = val(0);
                if offset + len > v.numel() {
                    return Err(Error::shape(
                        "slice",
                        format!(
                            "range {}..{} out of bounds for {} elements",
                            offset,
                            offset + len,
                            v.numel()
                        ),
                    ));
                }
                Ok(Tensor {
                    shape: vec![*len],
                    data: v.data[*offset..offset + len].to_vec(),
                })
            }
            OpKind::Sigmoid => Ok(elementwise1(val(0), sigmoid)),
            OpKind::Tanh => Ok(elementwise1(val(0), f64::tanh)),
            OpKind::Relu => Ok(elementwise1(val(0), |x| x.max(0.0))),
            OpKind::Scale { factor } => {
                let c = *factor;
                Ok(elementwise1(val(0), |x| c * x))
            }
            OpKind::Sum => Ok(Tensor::scalar(val(0).data.iter().sum())),
            OpKind::SmoothedL2Norm => {
                let s: f64 = val(0).data.iter().map(|v| v * v).sum();
                Ok(Tensor::scalar(s.sqrt()))
            }
        }
    }

    /// Reverse-accumulate gradients from a scalar-shaped root. Fills the
    /// gradient slot of every node reachable from `root`; slots of
    /// unreachable nodes stay empty. Running twice yields identical slots.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "backward root {} out of range",
                root.0
            )));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be scalar-shaped, got {:?}",
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));

        for i in (0..=root.0).rev() {
            let upstream = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Split borrows: the node being differentiated vs its inputs.
            let (kind, inputs) = {
                let node = &self.nodes[i];
                (node.kind.clone(), node.inputs.clone())
            };
            match &kind {
                OpKind::Leaf => {}
                OpKind::MatMul => {
                    let (ga, gb) = matmul_backward(
                        &upstream,
                        &self.nodes[inputs[0].0].value,
                        &self.nodes[inputs[1].0].value,
                    );
                    self.accumulate(inputs[0], ga);
                    self.accumulate(inputs[1], gb);
                }
                OpKind::Add => {
                    self.accumulate(inputs[0], upstream.clone());
                    self.accumulate(inputs[1], upstream.clone());
                }
                OpKind::Subtract => {
                    self.accumulate(inputs[0], upstream.clone());
                    let neg = elementwise1(&upstream, |x| -x);
                    self.accumulate(inputs[1], neg);
                }
                OpKind::Hadamard => {
                    let a = &self.nodes[inputs[0].0].value;
                    let b = &self.nodes[inputs[1].0].value;
                    let ga = zip_mul(&upstream, b);
                    let gb = zip_mul(&upstream, a);
                    self.accumulate(inputs[0], ga);
                    self.accumulate(inputs[1], gb);
                }
                OpKind::Concat { axis } => {
                    let a_shape = self.nodes[inputs[0].0].value.shape().to_vec();
                    let b_shape = self.nodes[inputs[1].0].value.shape().to_vec();
                    let (ga, gb) = concat_backward(*axis, &upstream, &a_shape, &b_shape);
                    self.accumulate(inputs[0], ga);
                    self.accumulate(inputs[1], gb);
                }
                OpKind::Slice { offset, len } => {
                    let in_shape = self.nodes[inputs[0].0].value.shape().to_vec();
                    let mut g = Tensor::zeros(&in_shape);
                    g.data[*offset..*offset + *len].copy_from_slice(&upstream.data);
                    self.accumulate(inputs[0], g);
                }
                OpKind::Sigmoid => {
                    let out = &self.nodes[i].value;
                    let mut g = upstream.clone();
                    for (gv, &s) in g.data.iter_mut().zip(out.data.iter()) {
                        *gv *= s * (1.0 - s);
                    }
                    self.accumulate(inputs[0], g);
                }
                OpKind::Tanh => {
                    let out = &self.nodes[i].value;
                    let mut g = upstream.clone();
                    for (gv, &t) in g.data.iter_mut().zip(out.data.iter()) {
                        *gv *= 1.0 - t * t;
                    }
                    self.accumulate(inputs[0], g);
                }
                OpKind::Relu => {
                    let inp = &self.nodes[inputs[0].0].value;
                    let mut g = upstream.clone();
                    for (gv, &x) in g.data.iter_mut().zip(inp.data.iter()) {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    self.accumulate(inputs[0], g);
                }
                OpKind::Scale { factor } => {
                    let c = *factor;
                    let g = elementwise1(&upstream, |x| c * x);
                    self.accumulate(inputs[0], g);
                }
                OpKind::Sum => {
                    let in_shape = self.nodes[inputs[0].0].value.shape().to_vec();
                    let u = upstream.data[0];
                    let mut g = Tensor::zeros(&in_shape);
                    g.data.fill(u);
                    self.accumulate(inputs[0], g);
                }
                OpKind::SmoothedL2Norm => {
                    let v = &self.nodes[inputs[0].0].value;
                    let norm = self.nodes[i].value.data[0];
                    let u = upstream.data[0];
                    let mut g = Tensor::zeros(v.shape());
                    if norm >= NORM_GRAD_EPS {
                        for (gv, &x) in g.data.iter_mut().zip(v.data.iter()) {
                            *gv = u * x / norm;
                        }
                    }
                    self.accumulate(inputs[0], g);
                }
            }
            self.grads[i] = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, v) in existing.data.iter_mut().zip(g.data.iter()) {
                    *e += v;
                }
            }
            slot => *slot = Some(g),
        }
    }

    // ── Recording helpers ────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Subtract, &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Hadamard, &[a, b])
    }

    pub fn concat(&mut self, axis: usize, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Concat { axis }, &[a, b])
    }

    pub fn slice(&mut self, a: NodeId, offset: usize, len: usize) -> Result<NodeId> {
        self.record(OpKind::Slice { offset, len }, &[a])
    }

    /// Row `r` of a rank-2 node as a rank-1 node.
    pub fn slice_row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "slice",
                format!("slice_row expects rank-2 input, got {:?}", shape),
            ));
        }
        if r >= shape[0] {
            return Err(Error::shape(
                "slice",
                format!("row {} out of bounds for shape {:?}", r, shape),
            ));
        }
        self.slice(a, r * shape[1], shape[1])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Tanh, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Relu, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.record(OpKind::Scale { factor }, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sum, &[a])
    }

    /// Euclidean norm of the flattened input; exact forward value, smoothed
    /// backward near zero (see [`NORM_GRAD_EPS`]).
    pub fn smoothed_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::SmoothedL2Norm, &[a])
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn elementwise1(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

fn elementwise2(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape, b.shape),
        ));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    })
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| x * y)
            .collect(),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape.as_slice(), b.shape.as_slice()) {
        ([m, k1], [k2, n]) => {
            if k1 != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("inner dims differ: {:?} vs {:?}", a.shape, b.shape),
                ));
            }
            let (m, k, n) = (*m, *k1, *n);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &a.data[i * k..(i + 1) * k];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b.data[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::from_vec(vec![m, n], out)
        }
        ([m, k1], [k2]) => {
            if k1 != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("inner dims differ: {:?} vs {:?}", a.shape, b.shape),
                ));
            }
            let (m, k) = (*m, *k1);
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &a.data[i * k..(i + 1) * k];
                let mut s = 0.0;
                for (&av, &bv) in row.iter().zip(b.data.iter()) {
                    s += av * bv;
                }
                out[i] = s;
            }
            Tensor::from_vec(vec![m], out)
        }
        _ => Err(Error::shape(
            "matmul",
            format!(
                "expected [m,k]@[k,n] or [m,k]@[k], got {:?} and {:?}",
                a.shape, b.shape
            ),
        )),
    }
}

fn matmul_backward(upstream: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    if b.shape.len() == 2 {
        // C = A@B: gA = G @ B^T, gB = A^T @ G
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let mut ga = vec![0.0; m * k];
        let mut gb = vec![0.0; k * n];
        for i in 0..m {
            let grow = &upstream.data[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b.data[p * n..(p + 1) * n];
                let mut s = 0.0;
                for (&g, &bv) in grow.iter().zip(brow.iter()) {
                    s += g * bv;
                }
                ga[i * k + p] = s;
            }
            let arow = &a.data[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let gbrow = &mut gb[p * n..(p + 1) * n];
                for (gbv, &g) in gbrow.iter_mut().zip(grow.iter()) {
                    *gbv += av * g;
                }
            }
        }
        (
            Tensor {
                shape: a.shape.clone(),
                data: ga,
            },
            Tensor {
                shape: b.shape.clone(),
                data: gb,
            },
        )
    } else {
        // y = A@x: gA = g ⊗ x, gx = A^T @ g
        let (m, k) = (a.shape[0], a.shape[1]);
        let mut ga = vec![0.0; m * k];
        let mut gx = vec![0.0; k];
        for i in 0..m {
            let g = upstream.data[i];
            let arow = &a.data[i * k..(i + 1) * k];
            let garow = &mut ga[i * k..(i + 1) * k];
            for p in 0..k {
                garow[p] = g * b.data[p];
                gx[p] += g * arow[p];
            }
        }
        (
            Tensor {
                shape: a.shape.clone(),
                data: ga,
            },
            Tensor {
                shape: b.shape.clone(),
                data: gx,
            },
        )
    }
}

fn concat_forward(axis: usize, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != b.shape.len() {
        return Err(Error::shape(
            "concat",
            format!("ranks differ: {:?} vs {:?}", a.shape, b.shape),
        ));
    }
    if axis >= a.shape.len() {
        return Err(Error::shape(
            "concat",
            format!("axis {} out of range for rank {}", axis, a.shape.len()),
        ));
    }
    for (d, (&ea, &eb)) in a.shape.iter().zip(b.shape.iter()).enumerate() {
        if d != axis && ea != eb {
            return Err(Error::shape(
                "concat",
                format!(
                    "non-axis extents differ at dim {}: {:?} vs {:?}",
                    d, a.shape, b.shape
                ),
            ));
        }
    }
    let mut shape = a.shape.clone();
    shape[axis] = a.shape[axis] + b.shape[axis];
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let a_block = a.shape[axis] * inner;
    let b_block = b.shape[axis] * inner;
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data[o * a_block..(o + 1) * a_block]);
        data.extend_from_slice(&b.data[o * b_block..(o + 1) * b_block]);
    }
    Tensor::from_vec(shape, data)
}

fn concat_backward(
    axis: usize,
    upstream: &Tensor,
    a_shape: &[usize],
    b_shape: &[usize],
) -> (Tensor, Tensor) {
    let outer: usize = a_shape[..axis].iter().product();
    let inner: usize = a_shape[axis + 1..].iter().product();
    let a_block = a_shape[axis] * inner;
    let b_block = b_shape[axis] * inner;
    let mut ga = Vec::with_capacity(outer * a_block);
    let mut gb = Vec::with_capacity(outer * b_block);
    let stride = a_block + b_block;
    for o in 0..outer {
        let base = o * stride;
        ga.extend_from_slice(&upstream.data[base..base + a_block]);
        gb.extend_from_slice(&upstream.data[base + a_block..base + stride]);
    }
    (
        Tensor {
            shape: a_shape.to_vec(),
            data: ga,
        },
        Tensor {
            shape: b_shape.to_vec(),
            data: gb,
        },
    )
}

// ── Finite-difference oracle ─────────────────────────────────────────

/// Max relative disagreement between the autodiff gradient of `build` at `x`
/// and central finite differences with step `h`:
/// `max_i |(f(x+h e_i) - f(x-h e_i))/(2h) - g_i| / (|g_i| + 1e-8)`.
///
/// `build` must record a scalar-shaped root for the given leaf. It is
/// re-invoked on a fresh graph for every evaluation, so the finite-difference
/// side never touches the gradient machinery it checks.
pub fn finite_diff_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.leaf(t.clone());
        let root = build(&mut g, id)?;
        g.value(root).item()
    };

    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let root = build(&mut g, xid)?;
    g.backward(root)?;
    let grad = match g.grad(xid) {
        Some(t) => t.clone(),
        None => Tensor::zeros(x.shape()),
    };

    let mut max_rel = 0.0_f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (eval(&xp)? - eval(&xm)?) / (2.0 * h);
        let gi = grad.data()[i];
        let rel = (fd - gi).abs() / (gi.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, values: &[f64]) -> NodeId {
        g.leaf(Tensor::vector(values))
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![3, 1], vec![1., 1., 1.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[6.0, 15.0]);
    }

    #[test]
    fn matmul_shape_error_names_kind() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![2, 2], vec![0.0; 4]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[0.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn concat_axis0_preserves_order() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[1., 2., 3.]);
        let b = leaf(&mut g, &[4., 5.]);
        let c = g.concat(0, a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[5]);
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4., 5.]);
    }

    #[test]
    fn concat_axis1_interleaves_rows() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![2, 1], vec![9., 8.]).unwrap());
        let c = g.concat(1, a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1., 2., 9., 3., 4., 8.]);
    }

    #[test]
    fn norm_three_four_five() {
        let mut g = Graph::new();
        let v = leaf(&mut g, &[3.0, 4.0]);
        let n = g.smoothed_l2_norm(v).unwrap();
        assert_eq!(g.value(n).data(), &[5.0]);
    }

    #[test]
    fn norm_of_zero_vector_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let v = leaf(&mut g, &[0.0, 0.0, 0.0]);
        let n = g.smoothed_l2_norm(v).unwrap();
        assert_eq!(g.value(n).data(), &[0.0]);
        g.backward(n).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn norm_of_unit_quadruple_is_two() {
        let mut g = Graph::new();
        let v = leaf(&mut g, &[1.0, 1.0, 1.0, 1.0]);
        let n = g.smoothed_l2_norm(v).unwrap();
        assert_eq!(g.value(n).data(), &[2.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, -2.0, 7.0, 0.5]);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_norm_difference() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3.0, 4.0]);
        let y = leaf(&mut g, &[0.0, 0.0]);
        let d = g.sub(x, y).unwrap();
        let n = g.smoothed_l2_norm(d).unwrap();
        g.backward(n).unwrap();
        let gx = g.grad(x).unwrap().data();
        assert!((gx[0] - 0.6).abs() < 1e-15);
        assert!((gx[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_twice_identical() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[0.3, -1.2, 0.8]);
        let t = g.tanh(x).unwrap();
        let h = g.hadamard(t, t).unwrap();
        let s = g.sum(h).unwrap();
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().clone();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &first);
    }

    #[test]
    fn record_does_not_mutate_existing_nodes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0]);
        let y = g.sigmoid(x).unwrap();
        let snapshot = g.value(y).clone();
        let z = g.relu(y).unwrap();
        let _ = g.add(y, z).unwrap();
        assert_eq!(g.value(y), &snapshot);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x ⊙ x) => grad 2x through two uses of the same node
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0]);
        let h = g.hadamard(x, x).unwrap();
        let s = g.sum(h).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn finite_diff_sum_of_squares() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let err = finite_diff_check(
            |g, x| {
                let h = g.hadamard(x, x)?;
                g.sum(h)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel error {err}");
    }

    #[test]
    fn finite_diff_constant_is_exact_zero() {
        let x = Tensor::vector(&[0.4, -0.7]);
        let err = finite_diff_check(
            |g, _x| {
                let c = g.leaf(Tensor::scalar(5.0));
                Ok(c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_all_kinds_composite() {
        // Exercise matmul, concat, slice, activations, scale, sub in one scalar.
        let x = Tensor::vector(&[0.9, -1.4, 0.6, 1.7]);
        let err = finite_diff_check(
            |g, x| {
                let w = g.leaf(
                    Tensor::from_vec(vec![3, 2], vec![0.5, -0.2, 0.1, 0.8, -0.6, 0.3]).unwrap(),
                );
                let a = g.slice(x, 0, 2)?;
                let b = g.slice(x, 2, 2)?;
                let v = g.matmul(w, a)?;
                let t = g.tanh(v)?;
                let s = g.sigmoid(v)?;
                let m = g.hadamard(t, s)?;
                let r = g.relu(m)?;
                let joined = g.concat(0, r, b)?;
                let scaled = g.scale(joined, 1.5)?;
                let shifted = g.sub(scaled, joined)?;
                g.smoothed_l2_norm(shifted)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn empty_concat_supports_zero_width() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[1.0, 2.0]);
        let b = g.leaf(Tensor::vector(&[]));
        let c = g.concat(0, a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);
    }
}
