//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation computes its
//! value eagerly, pushes a node holding that value plus a boxed
//! [`Function`] (the saved-for-backward payload), and hands back a [`Var`]
//! handle. [`Graph::backward`] walks the nodes once in reverse insertion
//! order, which is a valid reverse topological order because inputs always
//! precede the nodes that consume them.
//!
//! There is no broadcasting. The only op that mixes shapes is
//! [`Graph::scalar_mul`], which multiplies a tensor by a one-element tensor.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// An n-dimensional row-major array of `f64`.
///
/// `grad` and `node_id` are only used for tensors that live inside a
/// [`crate::nn::Parameter`]: the optimizer reads `grad`, and `node_id`
/// remembers which leaf of the current graph carries this tensor.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub node_id: Option<Var>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::TensorSize {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulates `g` into the gradient slot (`+=` semantics).
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn graph_id(&self) -> u64 {
        self.graph
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

/// Saved-for-backward state of one recorded operation.
pub trait Function {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product. `needs[i]` says whether input `i` wants a
    /// gradient; implementations may return `None` for the others.
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], output: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    is_leaf: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn Function>>,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Append-only computation tape.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf. The tensor's `requires_grad` flag is honored.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.push(t, requires_grad, true, Vec::new(), None)
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, true, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.graph, self.id);
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedGraph {
                expected: self.id,
                found: v.graph,
            });
        }
        Ok(())
    }

    fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        is_leaf: bool,
        inputs: Vec<usize>,
        op: Option<Box<dyn Function>>,
    ) -> Var {
        let index = self.nodes.len();
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        value.node_id = Some(Var { graph: self.id, index });
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf,
            inputs,
            op,
        });
        Var { graph: self.id, index }
    }

    /// Records an operation whose value has already been computed.
    pub fn apply<F: Function + 'static>(&mut self, op: F, inputs: &[Var], output: Tensor) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if cfg!(debug_assertions) && !output.is_finite() && inputs.iter().all(|&v| self.value(v).is_finite()) {
            debug_assert!(false, "{} produced non-finite output", op.name());
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let op: Option<Box<dyn Function>> = if requires_grad { Some(Box::new(op)) } else { None };
        let idx = inputs.iter().map(|v| v.index).collect();
        Ok(self.push(output, requires_grad, false, idx, op))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.index].requires_grad {
            grads[loss.index] = Some(vec![1.0]);
        }
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = op.backward(&g, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((&j, ig), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(ig), true) = (ig, *need) else { continue };
                debug_assert_eq!(ig.len(), self.nodes[j].value.numel(), "{}", op.name());
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf && n.requires_grad)
            .map(|(i, _)| i)
            .collect();
        let sizes = self.nodes.iter().map(|n| n.value.numel()).collect();
        Ok(Gradients {
            graph: self.id,
            grads,
            sizes,
            leaves,
        })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    leaves: Vec<usize>,
}

impl Gradients {
    /// Gradient of any node reached by the backward pass.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when `v` was not reached.
    pub fn get_or_zero(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.sizes.get(v.index).copied().unwrap_or(0)],
        }
    }

    /// `{node -> grad}` for every grad-requiring leaf; unreachable leaves
    /// map to zeros.
    pub fn leaf_map(&self) -> BTreeMap<Var, Vec<f64>> {
        self.leaves
            .iter()
            .map(|&i| {
                let v = Var {
                    graph: self.graph,
                    index: i,
                };
                (v, self.get_or_zero(v))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Primitive operations

/// Primitive kinds with a uniform calling convention, used by the gradient
/// property tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Add,
    Sub,
    MulElementwise,
    ScalarMul,
    Matmul,
    Reshape,
    Transpose2d,
    ConcatChannels,
    Sum,
    Mean,
    MaxOverAxis,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 11] = [
        PrimitiveKind::Add,
        PrimitiveKind::Sub,
        PrimitiveKind::MulElementwise,
        PrimitiveKind::ScalarMul,
        PrimitiveKind::Matmul,
        PrimitiveKind::Reshape,
        PrimitiveKind::Transpose2d,
        PrimitiveKind::ConcatChannels,
        PrimitiveKind::Sum,
        PrimitiveKind::Mean,
        PrimitiveKind::MaxOverAxis,
    ];
}

struct Binary(&'static str);

impl Function for Binary {
    fn name(&self) -> &'static str {
        self.0
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        match self.0 {
            "add" => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
            "sub" => vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -v).collect()),
            ],
            _ => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
        }
    }
}

struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct ScalarMul;

impl Function for ScalarMul {
    fn name(&self) -> &'static str {
        "scalar_mul"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = inputs[1].data()[0];
        vec![
            needs[0].then(|| g.iter().map(|v| v * s).collect()),
            needs[1].then(|| vec![dot(g, inputs[0].data())]),
        ]
    }
}

struct Matmul {
    m: usize,
    k: usize,
    n: usize,
}

impl Function for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (m, k, n) = (self.m, self.k, self.n);
        let da = needs[0].then(|| {
            // dA = G · Bᵀ
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    da[i * k + p] = dot(&g[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
                }
            }
            da
        });
        let db = needs[1].then(|| {
            // dB = Aᵀ · G
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    axpy(a[i * k + p], &g[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                }
            }
            db
        });
        vec![da, db]
    }
}

struct Reshape;

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct Transpose2d {
    rows: usize,
    cols: usize,
}

impl Function for Transpose2d {
    fn name(&self) -> &'static str {
        "transpose2d"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        // g has shape (cols, rows); transpose back.
        vec![Some(transpose(g, self.cols, self.rows))]
    }
}

struct ConcatChannels {
    channels: Vec<usize>,
    batch: usize,
    plane: usize,
}

impl Function for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            if need {
                let mut gi = Vec::with_capacity(self.batch * c * self.plane);
                for n in 0..self.batch {
                    let start = (n * total + offset) * self.plane;
                    gi.extend_from_slice(&g[start..start + c * self.plane]);
                }
                out.push(Some(gi));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

struct Sum {
    scale: f64,
    len: usize,
}

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; self.len])]
    }
}

struct MaxOverAxis {
    argmax: Vec<usize>,
    len: usize,
}

impl Function for MaxOverAxis {
    fn name(&self) -> &'static str {
        "max_over_axis"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gi = vec![0.0; self.len];
        for (o, &src) in self.argmax.iter().enumerate() {
            gi[src] += g[o];
        }
        vec![Some(gi)]
    }
}

struct SliceRow {
    offset: usize,
    len: usize,
    total: usize,
}

impl Function for SliceRow {
    fn name(&self) -> &'static str {
        "slice_row"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gi = vec![0.0; self.total];
        gi[self.offset..self.offset + self.len].copy_from_slice(g);
        vec![Some(gi)]
    }
}

struct Softmax {
    rows: usize,
    cols: usize,
}

impl Function for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], out: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let y = out.data();
        let mut gi = vec![0.0; y.len()];
        for r in 0..self.rows {
            let s = r * self.cols..(r + 1) * self.cols;
            let inner = dot(&g[s.clone()], &y[s.clone()]);
            for j in s {
                gi[j] = y[j] * (g[j] - inner);
            }
        }
        vec![Some(gi)]
    }
}

struct WeightedSum {
    slots: Vec<usize>,
}

impl Function for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let k = self.slots.len();
        let w = inputs[k].data();
        let mut out: Vec<Option<Vec<f64>>> = (0..k)
            .map(|i| needs[i].then(|| g.iter().map(|v| v * w[self.slots[i]]).collect()))
            .collect();
        out.push(needs[k].then(|| {
            let mut gw = vec![0.0; w.len()];
            for (i, &slot) in self.slots.iter().enumerate() {
                gw[slot] += dot(g, inputs[i].data());
            }
            gw
        }));
        out
    }
}

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.apply(Binary(name), &[a, b], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul_elementwise", a, b, |x, y| x * y)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        self.apply(Scale(c), &[x], out)
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "scalar_mul",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).data()[0];
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        self.apply(ScalarMul, &[x, s], out)
    }

    /// `(m, k) × (k, n) → (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        self.apply(Matmul { m, k, n }, &[a, b], Tensor::from_parts(vec![m, n], c))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.apply(Reshape, &[x], out)
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let [rows, cols] = t.shape() else {
            return Err(Error::Shape {
                op: "transpose2d",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        };
        let (rows, cols) = (*rows, *cols);
        let out = Tensor::from_parts(vec![cols, rows], transpose(t.data(), rows, cols));
        self.apply(Transpose2d { rows, cols }, &[x], out)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        self.check(first)?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 4 {
            return Err(Error::Shape {
                op: "concat_channels",
                lhs: s0,
                rhs: vec![],
            });
        }
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            self.check(x)?;
            let s = self.shape(x);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::Shape {
                    op: "concat_channels",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            channels.push(s[1]);
        }
        let (batch, plane) = (s0[0], s0[2] * s0[3]);
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(batch * total * plane);
        for n in 0..batch {
            for (&x, &c) in xs.iter().zip(&channels) {
                let d = self.value(x).data();
                data.extend_from_slice(&d[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let out = Tensor::from_parts(vec![batch, total, s0[2], s0[3]], data);
        self.apply(ConcatChannels { channels, batch, plane }, xs, out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let len = t.numel();
        let out = Tensor::scalar(t.data().iter().sum());
        self.apply(Sum { scale: 1.0, len }, &[x], out)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let len = t.numel();
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / len as f64);
        self.apply(
            Sum {
                scale: 1.0 / len as f64,
                len,
            },
            &[x],
            out,
        )
    }

    /// Maximum along `axis`, removing that axis. Ties go to the first index.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "max_over_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = t.data();
        let mut vals = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * dim * inner + i;
                for k in 1..dim {
                    let idx = (o * dim + k) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                vals.push(d[best]);
                argmax.push(best);
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let len = t.numel();
        self.apply(MaxOverAxis { argmax, len }, &[x], Tensor::from_parts(out_shape, vals))
    }

    /// Row `r` of a 2-D tensor, as a 1-D tensor.
    pub fn slice_row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let [rows, cols] = *t.shape() else {
            return Err(Error::Shape {
                op: "slice_row",
                lhs: t.shape().to_vec(),
                rhs: vec![r],
            });
        };
        if r >= rows {
            return Err(Error::Shape {
                op: "slice_row",
                lhs: t.shape().to_vec(),
                rhs: vec![r],
            });
        }
        let out = Tensor::from_parts(vec![cols], t.data()[r * cols..(r + 1) * cols].to_vec());
        let total = t.numel();
        self.apply(
            SliceRow {
                offset: r * cols,
                len: cols,
                total,
            },
            &[x],
            out,
        )
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let cols = *t.shape().last().expect("non-empty shape");
        let rows = t.numel() / cols;
        let mut y = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut y[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        self.apply(Softmax { rows, cols }, &[x], out)
    }

    /// `Σ_i weights[slots[i]] · xs[i]` for equally shaped `xs` and a 1-D
    /// weight vector.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: Var, slots: &[usize]) -> Result<Var> {
        self.check(weights)?;
        if xs.is_empty() || xs.len() != slots.len() {
            return Err(Error::invalid("weighted_sum", "need one slot per input"));
        }
        let wlen = self.value(weights).numel();
        if slots.iter().any(|&s| s >= wlen) {
            return Err(Error::invalid("weighted_sum", "slot out of range"));
        }
        for &x in &xs[1..] {
            self.same_shape("weighted_sum", xs[0], x)?;
        }
        let w = self.value(weights).data();
        let shape = self.shape(xs[0]).to_vec();
        let mut acc = vec![0.0; self.value(xs[0]).numel()];
        for (&x, &slot) in xs.iter().zip(slots) {
            axpy(w[slot], self.value(x).data(), &mut acc);
        }
        let mut inputs = xs.to_vec();
        inputs.push(weights);
        self.apply(
            WeightedSum { slots: slots.to_vec() },
            &inputs,
            Tensor::from_parts(shape, acc),
        )
    }

    /// Uniform dispatcher over [`PrimitiveKind`]. Unary kinds use
    /// `inputs[0]`; `Reshape` flattens; `MaxOverAxis` reduces the last axis.
    pub fn primitive(&mut self, kind: PrimitiveKind, inputs: &[Var]) -> Result<Var> {
        let arg = |i: usize| {
            inputs
                .get(i)
                .copied()
                .ok_or_else(|| Error::invalid("primitive", format!("{kind:?} needs {} inputs", i + 1)))
        };
        match kind {
            PrimitiveKind::Add => self.add(arg(0)?, arg(1)?),
            PrimitiveKind::Sub => self.sub(arg(0)?, arg(1)?),
            PrimitiveKind::MulElementwise => self.mul(arg(0)?, arg(1)?),
            PrimitiveKind::ScalarMul => self.scalar_mul(arg(0)?, arg(1)?),
            PrimitiveKind::Matmul => self.matmul(arg(0)?, arg(1)?),
            PrimitiveKind::Reshape => {
                let x = arg(0)?;
                self.check(x)?;
                let n = self.value(x).numel();
                self.reshape(x, &[n])
            }
            PrimitiveKind::Transpose2d => self.transpose2d(arg(0)?),
            PrimitiveKind::ConcatChannels => self.concat_channels(inputs),
            PrimitiveKind::Sum => self.sum(arg(0)?),
            PrimitiveKind::Mean => self.mean(arg(0)?),
            PrimitiveKind::MaxOverAxis => {
                let x = arg(0)?;
                self.check(x)?;
                let axis = self.shape(x).len() - 1;
                self.max_over_axis(x, axis)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dense kernels shared with the layer implementations.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

pub(crate) fn transpose(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

/// `c += a · b` with `a: (m, k)`, `b: (k, n)`, all row-major.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

// ---------------------------------------------------------------------------
// Finite-difference verification

/// Compares analytic gradients of `f` with central differences.
///
/// `f` builds a scalar from the leaves it is handed. Returns the maximum
/// over all coordinates of all inputs of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let eval = |inputs: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = with_grad;
                g.leaf(t)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        let value = g
            .value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(g.shape(out).to_vec()))?;
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(out)?;
        Ok((value, vars.iter().map(|&v| grads.get_or_zero(v)).collect()))
    };

    let (_, analytic) = eval(xs, true)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let (plus, _) = eval(&probe, false)?;
            probe[t].data_mut()[i] = orig - eps;
            let (minus, _) = eval(&probe, false)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}
