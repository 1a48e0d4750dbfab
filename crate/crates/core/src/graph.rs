//! Dynamic compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive
//! application appends a node whose inputs are earlier nodes, so insertion
//! order is a topological order and backward is a single reverse sweep.
//! Nodes that do not depend on any grad-requiring leaf carry no backward
//! record; frozen leaves never receive a gradient buffer.

use std::borrow::Cow;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{kernels, matrix_dims, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set. Variants with fields carry the attributes the
/// primitive needs besides its tensor inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// (m,k)·(k,n)
    MatMul,
    /// (m,k)·(n,k)ᵀ
    MatMulBt,
    Add,
    /// (m,n) + (n) broadcast over rows
    AddRow,
    Mul,
    Scale(f64),
    Relu,
    /// Row-wise over the last axis.
    Softmax,
    /// inputs: x (m,n), gamma (n), beta (n)
    LayerNorm,
    Embedding(Vec<usize>),
    Reshape(Vec<usize>),
    ConcatRows,
    SliceCols { start: usize, len: usize },
    ConcatCols,
    Mean,
    Sum,
    /// Mean token cross-entropy over rows whose target is `Some`.
    CrossEntropy(Vec<Option<usize>>),
    /// Mean binary cross-entropy on logits against targets in [0, 1].
    BceWithLogits(Vec<f64>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulBt => "matmul_bt",
            Primitive::Add => "add",
            Primitive::AddRow => "add_row",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Embedding(_) => "embedding",
            Primitive::Reshape(_) => "reshape",
            Primitive::ConcatRows => "concat_rows",
            Primitive::SliceCols { .. } => "slice_cols",
            Primitive::ConcatCols => "concat_cols",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::CrossEntropy(_) => "cross_entropy",
            Primitive::BceWithLogits(_) => "bce_with_logits",
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    /// Parses the attribute-free primitives by id.
    fn from_str(id: &str) -> Result<Self> {
        Ok(match id {
            "matmul" => Primitive::MatMul,
            "matmul_bt" => Primitive::MatMulBt,
            "add" => Primitive::Add,
            "add_row" => Primitive::AddRow,
            "mul" => Primitive::Mul,
            "relu" => Primitive::Relu,
            "softmax" => Primitive::Softmax,
            "layer_norm" => Primitive::LayerNorm,
            "concat_rows" => Primitive::ConcatRows,
            "concat_cols" => Primitive::ConcatCols,
            "mean" => Primitive::Mean,
            "sum" => Primitive::Sum,
            "scale" | "embedding" | "reshape" | "slice_cols" | "cross_entropy" | "bce_with_logits" => {
                return Err(Error::InvalidInput(format!(
                    "primitive `{id}` needs attributes; construct the `Primitive` variant directly"
                )))
            }
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

struct Record<T> {
    prim: Primitive,
    inputs: Vec<Var>,
    aux: Vec<T>,
    aux2: Vec<T>,
}

struct Node<'a, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    requires_grad: bool,
    is_leaf: bool,
    record: Option<Record<T>>,
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of leaves holding a gradient buffer.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Taped computation for one forward pass.
pub struct Graph<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
    no_grad: bool,
    consumed: bool,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            no_grad: false,
            consumed: false,
        }
    }

    /// A graph that never records backward information, for inference.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            no_grad: true,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a backward record.
    pub fn recorded(&self) -> usize {
        self.nodes.iter().filter(|n| n.record.is_some()).count()
    }

    /// Binds a borrowed parameter as a leaf. Its `requires_grad` flag decides
    /// whether it receives a gradient.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        let requires_grad = t.requires_grad() && !self.no_grad;
        self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), requires_grad)
    }

    /// Adds an owned leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad() && !self.no_grad;
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), requires_grad)
    }

    /// Adds an owned leaf that never requires grad.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            is_leaf: true,
            record: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(&self.nodes[v.0].shape)
    }

    fn expect_inputs(prim: &Primitive, inputs: &[Var], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::shape(
                prim.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    }

    /// Applies a primitive, recording a backward node when any input
    /// requires grad.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape(prim.name(), "no inputs"));
        }
        let name = prim.name();
        let mut aux = Vec::new();
        let mut aux2 = Vec::new();
        let (shape, value): (Vec<usize>, Vec<T>) = match &prim {
            Primitive::MatMul | Primitive::MatMulBt => {
                Self::expect_inputs(&prim, inputs, 2)?;
                let (sa, sb) = (self.shape(inputs[0]), self.shape(inputs[1]));
                if sa.len() != 2 || sb.len() != 2 {
                    return Err(Error::shape(name, format!("operands must be 2-d, got {sa:?} and {sb:?}")));
                }
                let (m, k) = (sa[0], sa[1]);
                let (n, kb) = if prim == Primitive::MatMul { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if k != kb {
                    return Err(Error::shape(name, format!("inner dims {k} vs {kb} ({sa:?} x {sb:?})")));
                }
                let mut out = vec![T::zero(); m * n];
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if prim == Primitive::MatMul {
                    kernels::matmul_acc(a, b, &mut out, m, k, n);
                } else {
                    kernels::matmul_bt_acc(a, b, &mut out, m, k, n);
                }
                (vec![m, n], out)
            }
            Primitive::Add | Primitive::Mul => {
                Self::expect_inputs(&prim, inputs, 2)?;
                let (sa, sb) = (self.shape(inputs[0]), self.shape(inputs[1]));
                if sa != sb {
                    return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
                }
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let out = if prim == Primitive::Add {
                    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
                } else {
                    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
                };
                (sa.to_vec(), out)
            }
            Primitive::AddRow => {
                Self::expect_inputs(&prim, inputs, 2)?;
                let (_, n) = self.dims(inputs[0]);
                let bn = self.value(inputs[1]).len();
                if bn != n {
                    return Err(Error::shape(name, format!("row width {n} vs bias length {bn}")));
                }
                let b = self.value(inputs[1]);
                let mut out = self.value(inputs[0]).to_vec();
                for row in out.chunks_mut(n) {
                    row.iter_mut().zip(b).for_each(|(x, &y)| *x = *x + y);
                }
                (self.shape(inputs[0]).to_vec(), out)
            }
            Primitive::Scale(c) => {
                Self::expect_inputs(&prim, inputs, 1)?;
                let c = T::lit(*c);
                let out = self.value(inputs[0]).iter().map(|&x| x * c).collect();
                (self.shape(inputs[0]).to_vec(), out)
            }
            Primitive::Relu => {
                Self::expect_inputs(&prim, inputs, 1)?;
                let mut out = self.value(inputs[0]).to_vec();
                kernels::relu(&mut out);
                (self.shape(inputs[0]).to_vec(), out)
            }
            Primitive::Softmax => {
                Self::expect_inputs(&prim, inputs, 1)?;
                let (_, n) = self.dims(inputs[0]);
                let mut out = self.value(inputs[0]).to_vec();
                kernels::softmax_rows(&mut out, n);
                (self.shape(inputs[0]).to_vec(), out)
            }
            Primitive::LayerNorm => {
                Self::expect_inputs(&prim, inputs, 3)?;
                let (m, n) = self.dims(inputs[0]);
                let (gl, bl) = (self.value(inputs[1]).len(), self.value(inputs[2]).len());
                if gl != n || bl != n {
                    return Err(Error::shape(name, format!("width {n} vs gamma {gl}, beta {bl}")));
                }
                let mut out = vec![T::zero(); m * n];
                let track = self.any_requires_grad(inputs);
                if track {
                    aux = vec![T::zero(); m * n];
                    aux2 = vec![T::zero(); m];
                }
                kernels::layer_norm_rows(
                    self.value(inputs[0]),
                    self.value(inputs[1]),
                    self.value(inputs[2]),
                    &mut out,
                    n,
                    if track { Some((&mut aux[..], &mut aux2[..])) } else { None },
                );
                (self.shape(inputs[0]).to_vec(), out)
            }
            Primitive::Embedding(ids) => {
                Self::expect_inputs(&prim, inputs, 1)?;
                let s = self.shape(inputs[0]);
                if s.len() != 2 {
                    return Err(Error::shape(name, format!("table must be 2-d, got {s:?}")));
                }
                let (v, d) = (s[0], s[1]);
                if ids.is_empty() {
                    return Err(Error::shape(name, "empty id list"));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
                    return Err(Error::shape(name, format!("id {bad} out of range for table of {v} rows")));
                }
                let table = self.value(inputs[0]);
                let mut out = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    out.extend_from_slice(&table[i * d..(i + 1) * d]);
                }
                (vec![ids.len(), d], out)
            }
            Primitive::Reshape(shape) => {
                Self::expect_inputs(&prim, inputs, 1)?;
                let numel: usize = shape.iter().product();
                let have = self.value(inputs[0]).len();
                if numel != have || shape.iter().any(|&d| d == 0) {
                    return Err(Error::shape(name, format!("cannot view {have} elements as {shape:?}")));
                }
                (shape.clone(), self.value(inputs[0]).to_vec())
            }
            Primitive::ConcatRows => {
                let (_, n) = self.dims(inputs[0]);
                let mut rows = 0;
                let mut out = Vec::new();
                for &v in inputs {
                    let (m, nv) = self.dims(v);
                    if nv != n {
                        return Err(Error::shape(name, format!("row width {nv} vs {n}")));
                    }
                    rows += m;
                    out.extend_from_slice(self.value(v));
                }
                (vec![rows, n], out)
            }
            Primitive::SliceCols { start, len } => {
                Self::expect_inputs(&prim, inputs, 1)?;
                let (m, n) = self.dims(inputs[0]);
                if *len == 0 || start + len > n {
                    return Err(Error::shape(name, format!("columns {start}..{} of width {n}", start + len)));
                }
                let x = self.value(inputs[0]);
                let mut out = Vec::with_capacity(m * len);
                for row in x.chunks(n) {
                    out.extend_from_slice(&row[*start..start + len]);
                }
                (vec![m, *len], out)
            }
            Primitive::ConcatCols => {
                let (m, _) = self.dims(inputs[0]);
                let mut widths = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let (mv, nv) = self.dims(v);
                    if mv != m {
                        return Err(Error::shape(name, format!("row count {mv} vs {m}")));
                    }
                    widths.push(nv);
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(m * total);
                for r in 0..m {
                    for (&v, &w) in inputs.iter().zip(&widths) {
                        out.extend_from_slice(&self.value(v)[r * w..(r + 1) * w]);
                    }
                }
                (vec![m, total], out)
            }
            Primitive::Mean | Primitive::Sum => {
                Self::expect_inputs(&prim, inputs, 1)?;
                let x = self.value(inputs[0]);
                let s: T = x.iter().copied().sum();
                let v = if prim == Primitive::Mean { s / T::from_usize(x.len()).unwrap() } else { s };
                (vec![1], vec![v])
            }
            Primitive::CrossEntropy(targets) => {
                Self::expect_inputs(&prim, inputs, 1)?;
                let (m, c) = self.dims(inputs[0]);
                if targets.len() != m {
                    return Err(Error::shape(name, format!("{m} rows vs {} targets", targets.len())));
                }
                if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
                    return Err(Error::shape(name, format!("target {bad} out of range for {c} classes")));
                }
                let mut probs = self.value(inputs[0]).to_vec();
                kernels::softmax_rows(&mut probs, c);
                let logits = self.value(inputs[0]);
                let mut total = T::zero();
                let mut count = 0usize;
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        // log-sum-exp form keeps -ln p finite when p underflows
                        let row = &logits[r * c..(r + 1) * c];
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                        total = total + (lse - row[t]);
                        count += 1;
                    }
                }
                let loss = if count == 0 { T::zero() } else { total / T::from_usize(count).unwrap() };
                aux = probs;
                (vec![1], vec![loss])
            }
            Primitive::BceWithLogits(targets) => {
                Self::expect_inputs(&prim, inputs, 1)?;
                let x = self.value(inputs[0]);
                if targets.len() != x.len() {
                    return Err(Error::shape(name, format!("{} logits vs {} targets", x.len(), targets.len())));
                }
                let mut total = T::zero();
                for (&xi, &ti) in x.iter().zip(targets) {
                    let t = T::lit(ti);
                    total = total + xi.max(T::zero()) - xi * t + (T::one() + (-xi.abs()).exp()).ln();
                }
                (vec![1], vec![total / T::from_usize(x.len()).unwrap()])
            }
        };
        let requires_grad = self.any_requires_grad(inputs);
        let record = requires_grad.then(|| Record {
            prim,
            inputs: inputs.to_vec(),
            aux,
            aux2,
        });
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            requires_grad,
            is_leaf: false,
            record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMulBt, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::AddRow, &[a, bias])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(Primitive::LayerNorm, &[x, gamma, beta])
    }
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Primitive::Embedding(ids.to_vec()), &[table])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatRows, parts)
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::SliceCols { start, len }, &[a])
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatCols, parts)
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.apply(Primitive::CrossEntropy(targets.to_vec()), &[logits])
    }
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.apply(Primitive::BceWithLogits(targets.to_vec()), &[logits])
    }

    /// `x · wᵀ + b` with `w` laid out (out, in).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_bt(x, w)?;
        self.add_row(y, b)
    }

    /// Runs the reverse sweep from a scalar loss and returns the gradients
    /// of all grad-requiring leaves. Node values are released afterwards;
    /// a second call fails with [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(Error::NoGradPath);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(record) = self.nodes[idx].record.as_ref() else {
                continue;
            };
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, record, &gout, &mut grads);
            // leaves keep their gradient; interior buffers are dropped
        }
        for (i, n) in self.nodes.iter_mut().enumerate() {
            if !n.is_leaf {
                grads[i] = None;
            }
            n.value = Cow::Owned(Vec::new());
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, rec: &Record<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let inputs = &rec.inputs;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out_val = &self.nodes[idx].value;
        match &rec.prim {
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                if wants(a) {
                    // dA = dC · Bᵀ
                    let ga = grad_slot(grads, a, m * k);
                    kernels::matmul_bt_acc(gout, self.value(b), ga, m, n, k);
                }
                if wants(b) {
                    // dB = Aᵀ · dC
                    let gb = grad_slot(grads, b, k * n);
                    kernels::matmul_at_acc(self.value(a), gout, gb, m, k, n);
                }
            }
            Primitive::MatMulBt => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = self.dims(a);
                let n = self.dims(b).0;
                if wants(a) {
                    // dA = dC · B
                    let ga = grad_slot(grads, a, m * k);
                    kernels::matmul_acc(gout, self.value(b), ga, m, n, k);
                }
                if wants(b) {
                    // dB = dCᵀ · A
                    let gb = grad_slot(grads, b, n * k);
                    kernels::matmul_at_acc(gout, self.value(a), gb, m, n, k);
                }
            }
            Primitive::Add => {
                for &v in inputs {
                    if wants(v) {
                        add_into(grad_slot(grads, v, gout.len()), gout);
                    }
                }
            }
            Primitive::AddRow => {
                let (a, b) = (inputs[0], inputs[1]);
                if wants(a) {
                    add_into(grad_slot(grads, a, gout.len()), gout);
                }
                if wants(b) {
                    let n = self.value(b).len();
                    let gb = grad_slot(grads, b, n);
                    for row in gout.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if wants(a) {
                    let bv = self.value(b);
                    let ga = grad_slot(grads, a, gout.len());
                    for i in 0..gout.len() {
                        ga[i] = ga[i] + gout[i] * bv[i];
                    }
                }
                if wants(b) {
                    let av = self.value(a);
                    let gb = grad_slot(grads, b, gout.len());
                    for i in 0..gout.len() {
                        gb[i] = gb[i] + gout[i] * av[i];
                    }
                }
            }
            Primitive::Scale(c) => {
                let c = T::lit(*c);
                let ga = grad_slot(grads, inputs[0], gout.len());
                kernels::axpy(c, gout, ga);
            }
            Primitive::Relu => {
                let ga = grad_slot(grads, inputs[0], gout.len());
                for i in 0..gout.len() {
                    if out_val[i] > T::zero() {
                        ga[i] = ga[i] + gout[i];
                    }
                }
            }
            Primitive::Softmax => {
                let (_, n) = matrix_dims(&self.nodes[idx].shape);
                let ga = grad_slot(grads, inputs[0], gout.len());
                for ((y, gy), gx) in out_val.chunks(n).zip(gout.chunks(n)).zip(ga.chunks_mut(n)) {
                    let s = kernels::dot(y, gy);
                    for j in 0..n {
                        gx[j] = gx[j] + y[j] * (gy[j] - s);
                    }
                }
            }
            Primitive::LayerNorm => {
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let (m, n) = self.dims(x);
                let xhat = &rec.aux;
                let invs = &rec.aux2;
                if wants(gamma) {
                    let gg = grad_slot(grads, gamma, n);
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] = gg[j] + gout[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if wants(beta) {
                    let gb = grad_slot(grads, beta, n);
                    for row in gout.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if wants(x) {
                    let gv = self.value(gamma);
                    let nf = T::from_usize(n).unwrap();
                    let gx = grad_slot(grads, x, m * n);
                    let mut dxh = vec![T::zero(); n];
                    for r in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            dxh[j] = gout[r * n + j] * gv[j];
                            mean_d = mean_d + dxh[j];
                            mean_dx = mean_dx + dxh[j] * xhat[r * n + j];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for j in 0..n {
                            let d = (dxh[j] - mean_d - xhat[r * n + j] * mean_dx) * invs[r];
                            gx[r * n + j] = gx[r * n + j] + d;
                        }
                    }
                }
            }
            Primitive::Embedding(ids) => {
                let table = inputs[0];
                let d = self.dims(table).1;
                let len = self.value(table).len();
                let gt = grad_slot(grads, table, len);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                }
            }
            Primitive::Reshape(_) => {
                add_into(grad_slot(grads, inputs[0], gout.len()), gout);
            }
            Primitive::ConcatRows => {
                let mut off = 0;
                for &v in inputs {
                    let len = self.value(v).len();
                    if wants(v) {
                        add_into(grad_slot(grads, v, len), &gout[off..off + len]);
                    }
                    off += len;
                }
            }
            Primitive::SliceCols { start, len } => {
                let (m, n) = self.dims(inputs[0]);
                let ga = grad_slot(grads, inputs[0], m * n);
                for r in 0..m {
                    add_into(&mut ga[r * n + start..r * n + start + len], &gout[r * len..(r + 1) * len]);
                }
            }
            Primitive::ConcatCols => {
                let m = self.dims(inputs[0]).0;
                let total = gout.len() / m;
                let mut col = 0;
                for &v in inputs {
                    let w = self.dims(v).1;
                    if wants(v) {
                        let gv = grad_slot(grads, v, m * w);
                        for r in 0..m {
                            add_into(&mut gv[r * w..(r + 1) * w], &gout[r * total + col..r * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Primitive::Mean | Primitive::Sum => {
                let len = self.value(inputs[0]).len();
                let g = if rec.prim == Primitive::Mean {
                    gout[0] / T::from_usize(len).unwrap()
                } else {
                    gout[0]
                };
                let ga = grad_slot(grads, inputs[0], len);
                ga.iter_mut().for_each(|x| *x = *x + g);
            }
            Primitive::CrossEntropy(targets) => {
                let (m, c) = self.dims(inputs[0]);
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return;
                }
                let scale = gout[0] / T::from_usize(count).unwrap();
                let probs = &rec.aux;
                let ga = grad_slot(grads, inputs[0], m * c);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..c {
                            let ind = if j == t { T::one() } else { T::zero() };
                            ga[r * c + j] = ga[r * c + j] + scale * (probs[r * c + j] - ind);
                        }
                    }
                }
            }
            Primitive::BceWithLogits(targets) => {
                let x = self.value(inputs[0]);
                let scale = gout[0] / T::from_usize(x.len()).unwrap();
                let ga = grad_slot(grads, inputs[0], x.len());
                for i in 0..x.len() {
                    let sig = T::one() / (T::one() + (-x[i]).exp());
                    ga[i] = ga[i] + scale * (sig - T::lit(targets[i]));
                }
            }
        }
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.5]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_shape_and_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let err = g.matmul(b, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("4") && msg.contains("3"), "{msg}");
    }

    #[test]
    fn unknown_primitive_id() {
        assert!(matches!("conv2d".parse::<Primitive>(), Err(Error::UnknownPrimitive(_))));
        assert_eq!("matmul".parse::<Primitive>().unwrap(), Primitive::MatMul);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]).with_requires_grad(true));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let y = g.leaf(Tensor::scalar(4.0).with_requires_grad(true));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0]);
        assert_eq!(grads.get(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let frozen = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let train = t(&[2, 2], &[0.5, -0.5, 0.25, 1.0]).with_requires_grad(true);
        let mut g = Graph::<f64>::new();
        let a = g.param(&frozen);
        let b = g.param(&train);
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let train = t(&[2], &[0.5, -0.5]).with_requires_grad(true);
        let mut g = Graph::<f64>::inference();
        let a = g.param(&train);
        let r = g.relu(a).unwrap();
        let _ = g.sum(r).unwrap();
        assert_eq!(g.recorded(), 0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 5]));
        let l = g.cross_entropy(x, &[Some(2)]).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 9.0, 0.0, 0.0]).with_requires_grad(true));
        let l = g.cross_entropy(x, &[Some(0), None]).unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.get(x).unwrap();
        assert!(gx[3..].iter().all(|&v| v == 0.0));
    }
}
