//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records a straight-line program over a fixed set of
//! primitives. Nodes are appended in evaluation order, so the node list is
//! already a topological order and [`Tape::gradient`] is a single reverse
//! sweep. Tapes are meant to be built and dropped once per training step.
//!
//! Tensors are at most two dimensional for every primitive that cares about
//! layout: the last axis is the "column" axis and everything before it is
//! folded into rows. A batch of vectors is a `[batch, features]` tensor.

use crate::error::{Error, Result};
use crate::linalg::{gemm, sigmoid, softplus};

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("shape {shape:?} must be non-empty and positive")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite entry at {i}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values computed by the tape itself.
    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self::raw(shape.to_vec(), vec![v; shape.iter().product()])
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operations a tape can record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// `x W^T + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    Affine,
    /// `[m, k] x [k, n]`.
    MatMul,
    /// Elementwise; either side may be a single element (broadcast).
    Add,
    /// Elementwise; either side may be a single element (broadcast).
    Mul,
    /// Join along the last axis; row counts must agree.
    Concat,
    /// Columns `start..start + len` of the last axis.
    Slice { start: usize, len: usize },
    Relu,
    /// `max(x, floor)`; the gradient is zero where the floor is active.
    ClampMin { floor: f64 },
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Square,
    Sum,
    Mean,
    /// Identity forward, zero backward.
    StopGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Param,
    Input,
    Op,
}

#[derive(Debug)]
struct Node {
    kind: Kind,
    prim: Option<Primitive>,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }

    /// Takes the gradient out, leaving nothing behind.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        let pos = self.grads.iter().position(|(n, _)| *n == id)?;
        Some(self.grads.swap_remove(pos).1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(n, g)| (*n, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can be reused for the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// A trainable leaf; [`Tape::gradient`] reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Kind::Param, None, vec![], value)
    }

    /// A constant leaf (data, noise draws); never differentiated.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Kind::Input, None, vec![], value)
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.input(Tensor::raw(vec![1], vec![v]))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, kind: Kind, prim: Option<Primitive>, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            kind,
            prim,
            inputs,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_ids(&self, inputs: &[NodeId]) -> Result<()> {
        match inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(Error::Contract(format!("node {} is not on this tape", id.0))),
            None => Ok(()),
        }
    }

    /// Evaluates `prim` on `inputs` and appends the result.
    pub fn record(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_ids(inputs)?;
        let arity = match prim {
            Primitive::Affine => 3,
            Primitive::MatMul | Primitive::Add | Primitive::Mul | Primitive::Concat => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{prim:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let out = match prim {
            Primitive::Affine => {
                let (x, w, b) = (v(0), v(1), v(2));
                if w.shape.len() != 2 || x.cols() != w.shape[1] || b.len() != w.shape[0] {
                    return Err(Error::Shape(format!(
                        "affine: x {:?}, W {:?}, b {:?}",
                        x.shape, w.shape, b.shape
                    )));
                }
                let (rows, inp, out) = (x.rows(), w.shape[1], w.shape[0]);
                let mut data = Vec::with_capacity(rows * out);
                for _ in 0..rows {
                    data.extend_from_slice(&b.data);
                }
                gemm(rows, inp, out, 1.0, &x.data, false, &w.data, true, 1.0, &mut data);
                let mut shape = x.shape.clone();
                *shape.last_mut().unwrap() = out;
                Tensor::raw(shape, data)
            }
            Primitive::MatMul => {
                let (a, b) = (v(0), v(1));
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(Error::Shape(format!("matmul: {:?} x {:?}", a.shape, b.shape)));
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut data = vec![0.0; m * n];
                gemm(m, k, n, 1.0, &a.data, false, &b.data, false, 0.0, &mut data);
                Tensor::raw(vec![m, n], data)
            }
            Primitive::Add | Primitive::Mul => {
                let (a, b) = (v(0), v(1));
                let f = if prim == Primitive::Add {
                    |x: f64, y: f64| x + y
                } else {
                    |x: f64, y: f64| x * y
                };
                broadcast(a, b, f).ok_or_else(|| {
                    Error::Shape(format!("{prim:?}: {:?} vs {:?}", a.shape, b.shape))
                })?
            }
            Primitive::Concat => {
                let (a, b) = (v(0), v(1));
                if a.rows() != b.rows() || a.shape.len() != b.shape.len() {
                    return Err(Error::Shape(format!("concat: {:?} vs {:?}", a.shape, b.shape)));
                }
                let (ca, cb) = (a.cols(), b.cols());
                let mut data = Vec::with_capacity(a.len() + b.len());
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
                    data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
                }
                let mut shape = a.shape.clone();
                *shape.last_mut().unwrap() = ca + cb;
                Tensor::raw(shape, data)
            }
            Primitive::Slice { start, len } => {
                let a = v(0);
                let c = a.cols();
                if len == 0 || start + len > c {
                    return Err(Error::Shape(format!(
                        "slice {start}..{} of {c} columns",
                        start + len
                    )));
                }
                let mut data = Vec::with_capacity(a.rows() * len);
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.data[r * c + start..r * c + start + len]);
                }
                let mut shape = a.shape.clone();
                *shape.last_mut().unwrap() = len;
                Tensor::raw(shape, data)
            }
            Primitive::Relu => v(0).map(|x| x.max(0.0)),
            Primitive::ClampMin { floor } => v(0).map(|x| x.max(floor)),
            Primitive::Sigmoid => v(0).map(sigmoid),
            Primitive::Exp => v(0).map(f64::exp),
            Primitive::Log => {
                let a = v(0);
                if a.data.iter().any(|&x| x <= 0.0) {
                    return Err(Error::Domain("log of a non-positive value".into()));
                }
                a.map(f64::ln)
            }
            Primitive::Softplus => v(0).map(softplus),
            Primitive::Square => v(0).map(|x| x * x),
            Primitive::Sum => Tensor::raw(vec![1], vec![v(0).data.iter().sum()]),
            Primitive::Mean => {
                let a = v(0);
                Tensor::raw(vec![1], vec![a.data.iter().sum::<f64>() / a.len() as f64])
            }
            Primitive::StopGradient => v(0).clone(),
        };
        Ok(self.push(Kind::Op, Some(prim), inputs.to_vec(), out))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Affine, &[x, w, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Mul, &[a, b])
    }

    /// `a - b`, spelled with the primitive set.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.constant(-1.0);
        let nb = self.mul(b, neg)?;
        self.add(a, nb)
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant(c);
        self.mul(a, k)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Concat, &[a, b])
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record(Primitive::Slice { start, len }, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Relu, &[a])
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.record(Primitive::ClampMin { floor }, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Log, &[a])
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Softplus, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Square, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Mean, &[a])
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::StopGradient, &[a])
    }

    /// Pathwise sample `mu + sigma * eps`. `eps` is recorded as a constant
    /// input, so gradients reach `mu` and `sigma` only.
    pub fn reparam_sample(&mut self, mu: NodeId, sigma: NodeId, eps: Tensor) -> Result<NodeId> {
        self.check_ids(&[mu, sigma])?;
        let (ms, ss) = (&self.value(mu).shape, &self.value(sigma).shape);
        if ms != ss || ms != &eps.shape {
            return Err(Error::Shape(format!(
                "reparam: mu {ms:?}, sigma {ss:?}, eps {:?}",
                eps.shape
            )));
        }
        if self.value(sigma).data.iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("sigma must be positive".into()));
        }
        let e = self.input(eps);
        let noise = self.mul(sigma, e)?;
        self.add(mu, noise)
    }

    /// Reverse sweep from a scalar `output`, returning the gradient for
    /// every parameter leaf recorded before it.
    pub fn gradient(&self, output: NodeId) -> Result<Gradients> {
        self.check_ids(&[output])?;
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "gradient needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(Tensor::raw(self.nodes[output.0].value.shape.clone(), vec![1.0]));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(prim) = node.prim else { continue };
            if prim == Primitive::StopGradient {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let inp = |k: usize| &self.nodes[node.inputs[k].0];
            let mut contrib: Vec<(NodeId, Tensor)> = Vec::with_capacity(3);
            match prim {
                Primitive::Affine => {
                    let (x, w) = (&inp(0).value, &inp(1).value);
                    let (rows, n_in, n_out) = (x.rows(), w.shape[1], w.shape[0]);
                    let mut dx = vec![0.0; rows * n_in];
                    gemm(rows, n_out, n_in, 1.0, &g.data, false, &w.data, false, 0.0, &mut dx);
                    let mut dw = vec![0.0; n_out * n_in];
                    gemm(n_out, rows, n_in, 1.0, &g.data, true, &x.data, false, 0.0, &mut dw);
                    let mut db = vec![0.0; n_out];
                    for r in 0..rows {
                        for (d, gv) in db.iter_mut().zip(&g.data[r * n_out..(r + 1) * n_out]) {
                            *d += gv;
                        }
                    }
                    contrib.push((node.inputs[0], Tensor::raw(x.shape.clone(), dx)));
                    contrib.push((node.inputs[1], Tensor::raw(w.shape.clone(), dw)));
                    contrib.push((node.inputs[2], Tensor::raw(inp(2).value.shape.clone(), db)));
                }
                Primitive::MatMul => {
                    let (a, b) = (&inp(0).value, &inp(1).value);
                    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, &g.data, false, &b.data, true, 0.0, &mut da);
                    let mut dbm = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, &a.data, true, &g.data, false, 0.0, &mut dbm);
                    contrib.push((node.inputs[0], Tensor::raw(a.shape.clone(), da)));
                    contrib.push((node.inputs[1], Tensor::raw(b.shape.clone(), dbm)));
                }
                Primitive::Add => {
                    for k in 0..2 {
                        let t = &inp(k).value;
                        contrib.push((node.inputs[k], reduce_to(&g, t)));
                    }
                }
                Primitive::Mul => {
                    let (a, b) = (&inp(0).value, &inp(1).value);
                    // d/da = g * b, d/db = g * a, reduced to each side's shape.
                    let ga = broadcast(&g, b, |x, y| x * y).expect("shapes checked forward");
                    let gb = broadcast(&g, a, |x, y| x * y).expect("shapes checked forward");
                    contrib.push((node.inputs[0], reduce_to(&ga, a)));
                    contrib.push((node.inputs[1], reduce_to(&gb, b)));
                }
                Primitive::Concat => {
                    let (a, b) = (&inp(0).value, &inp(1).value);
                    let (ca, cb) = (a.cols(), b.cols());
                    let mut da = Vec::with_capacity(a.len());
                    let mut dbv = Vec::with_capacity(b.len());
                    for r in 0..a.rows() {
                        let row = &g.data[r * (ca + cb)..(r + 1) * (ca + cb)];
                        da.extend_from_slice(&row[..ca]);
                        dbv.extend_from_slice(&row[ca..]);
                    }
                    contrib.push((node.inputs[0], Tensor::raw(a.shape.clone(), da)));
                    contrib.push((node.inputs[1], Tensor::raw(b.shape.clone(), dbv)));
                }
                Primitive::Slice { start, len } => {
                    let a = &inp(0).value;
                    let c = a.cols();
                    let mut da = vec![0.0; a.len()];
                    for r in 0..a.rows() {
                        da[r * c + start..r * c + start + len]
                            .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                    }
                    contrib.push((node.inputs[0], Tensor::raw(a.shape.clone(), da)));
                }
                Primitive::Relu
                | Primitive::ClampMin { .. }
                | Primitive::Sigmoid
                | Primitive::Exp
                | Primitive::Log
                | Primitive::Softplus
                | Primitive::Square => {
                    let x = &inp(0).value;
                    let y = &node.value;
                    let d: Vec<f64> = g
                        .data
                        .iter()
                        .zip(x.data.iter().zip(&y.data))
                        .map(|(&gv, (&xv, &yv))| {
                            gv * match prim {
                                Primitive::Relu => {
                                    if xv > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Primitive::ClampMin { floor } => {
                                    if xv > floor {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Primitive::Sigmoid => yv * (1.0 - yv),
                                Primitive::Exp => yv,
                                Primitive::Log => 1.0 / xv,
                                Primitive::Softplus => sigmoid(xv),
                                Primitive::Square => 2.0 * xv,
                                _ => unreachable!(),
                            }
                        })
                        .collect();
                    contrib.push((node.inputs[0], Tensor::raw(x.shape.clone(), d)));
                }
                Primitive::Sum | Primitive::Mean => {
                    let a = &inp(0).value;
                    let s = if prim == Primitive::Sum {
                        g.data[0]
                    } else {
                        g.data[0] / a.len() as f64
                    };
                    contrib.push((node.inputs[0], Tensor::filled(&a.shape, s)));
                }
                Primitive::StopGradient => unreachable!(),
            }
            for (id, t) in contrib {
                if self.nodes[id.0].kind == Kind::Input {
                    continue;
                }
                match &mut adj[id.0] {
                    Some(acc) => acc.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            }
        }

        let grads = self.nodes[..=output.0]
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == Kind::Param)
            .map(|(i, n)| {
                let g = adj[i].take().unwrap_or_else(|| Tensor::zeros(&n.value.shape));
                (NodeId(i), g)
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Option<Tensor> {
    if a.shape == b.shape {
        Some(Tensor::raw(
            a.shape.clone(),
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        ))
    } else if b.len() == 1 {
        let y = b.data[0];
        Some(a.map(|x| f(x, y)))
    } else if a.len() == 1 {
        let x = a.data[0];
        Some(b.map(|y| f(x, y)))
    } else {
        None
    }
}

/// Reduces an upstream gradient to the shape of `target`: summed when
/// `target` was broadcast, copied otherwise.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if target.len() == 1 && g.len() != 1 {
        Tensor::raw(target.shape.clone(), vec![g.data.iter().sum()])
    } else {
        Tensor::raw(target.shape.clone(), g.data.clone())
    }
}

/// Moment accumulators for [`adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            step: 0,
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    opt: &Adam,
) -> Result<()> {
    if !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) {
        return Err(Error::Domain(format!(
            "betas ({}, {}) must lie in [0, 1)",
            opt.beta1, opt.beta2
        )));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape != g.shape || p.shape != m.shape {
            return Err(Error::Shape(format!(
                "adam: param {:?} vs grad {:?}",
                p.shape, g.shape
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i].data;
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for j in 0..g.len() {
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p.data[j] -= opt.lr * mh / (vh.sqrt() + opt.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_input() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::vector(vec![f64::NAN]), Err(Error::Domain(_))));
        assert!(matches!(Tensor::vector(vec![f64::INFINITY]), Err(Error::Domain(_))));
    }

    #[test]
    fn forward_values() {
        let mut t = Tape::new();
        let x = t.input(vec_t(&[-1.0, 0.0, 2.0]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = t.stop_gradient(x).unwrap();
        assert_eq!(t.value(s), t.value(x));
        let z = t.input(vec_t(&[0.0]));
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.value(sg).item(), 0.5);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.input(vec_t(&[1.0, 2.0]));
        let b = t.input(vec_t(&[1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(t.slice(a, 1, 2), Err(Error::Shape(_))));
        let w = t.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(t.affine(a, w, a), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0, 2.0, 3.0]));
        let s = t.sum(x).unwrap();
        let g = t.gradient(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn stop_gradient_blocks_exactly() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[2.0]));
        let sx = t.stop_gradient(x).unwrap();
        let p = t.mul(sx, x).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.gradient(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn gradient_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0, 2.0]));
        let e = t.exp(x).unwrap();
        assert!(matches!(t.gradient(e), Err(Error::Contract(_))));
    }

    #[test]
    fn reparam_values_and_domain() {
        let mut t = Tape::new();
        let mu = t.param(vec_t(&[1.0]));
        let sd = t.param(vec_t(&[2.0]));
        let z = t.reparam_sample(mu, sd, vec_t(&[0.0])).unwrap();
        assert_eq!(t.value(z).item(), 1.0);
        let mu0 = t.param(vec_t(&[0.0]));
        let sd1 = t.param(vec_t(&[1.0]));
        let z = t.reparam_sample(mu0, sd1, vec_t(&[1.5])).unwrap();
        assert_eq!(t.value(z).item(), 1.5);
        let bad = t.param(vec_t(&[0.0]));
        assert!(matches!(
            t.reparam_sample(mu0, bad, vec_t(&[1.0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn reparam_sigma_gradient_is_eps() {
        let mu = [0.3, -0.2, 1.1];
        let sd = [0.5, 1.5, 0.7];
        let eps = [0.4, -1.2, 2.0];
        let loss = |sd: &[f64]| -> f64 {
            let mut t = Tape::new();
            let m = t.param(vec_t(&mu));
            let s = t.param(vec_t(sd));
            let z = t.reparam_sample(m, s, vec_t(&eps)).unwrap();
            let o = t.sum(z).unwrap();
            t.value(o).item()
        };
        let mut t = Tape::new();
        let m = t.param(vec_t(&mu));
        let s = t.param(vec_t(&sd));
        let z = t.reparam_sample(m, s, vec_t(&eps)).unwrap();
        let o = t.sum(z).unwrap();
        let g = t.gradient(o).unwrap();
        let gs = g.get(s).unwrap().data().to_vec();
        let h = 1e-5;
        for i in 0..3 {
            let mut up = sd.to_vec();
            let mut dn = sd.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((fd - eps[i]).abs() < 1e-8);
            assert!((gs[i] - eps[i]).abs() < 1e-12);
        }
        assert_eq!(g.get(m).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec_t(&[1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&p]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[&g], &mut st, &Adam::default()).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let opt = Adam::default();
        let g0 = [0.3, -1e-7, 5.0];
        let mut p = Tensor::zeros(&[3]);
        let g = vec_t(&g0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, &opt).unwrap();
        for (i, &gi) in g0.iter().enumerate() {
            let want = -gi.signum() * opt.lr / (1.0 + opt.eps / gi.abs());
            assert!((p.data()[i] - want).abs() < 1e-12, "{i}: {} vs {want}", p.data()[i]);
        }
    }

    #[test]
    fn adam_blocks_are_independent() {
        let opt = Adam::default();
        let ga = vec_t(&[1.0, 2.0]);
        let gb = vec_t(&[-3.0]);
        let mut a = Tensor::zeros(&[2]);
        let mut b = Tensor::zeros(&[1]);
        let mut st = AdamState::new(&[&a, &b]);
        for _ in 0..3 {
            adam_step(&mut [&mut a, &mut b], &[&ga, &gb], &mut st, &opt).unwrap();
        }
        let mut a2 = Tensor::zeros(&[2]);
        let mut st2 = AdamState::new(&[&a2]);
        for _ in 0..3 {
            adam_step(&mut [&mut a2], &[&ga], &mut st2, &opt).unwrap();
        }
        assert_eq!(a, a2);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[&p]);
        assert!(matches!(
            adam_step(&mut [&mut p], &[&g], &mut st, &Adam::default()),
            Err(Error::Shape(_))
        ));
    }

    /// Scalar loss of a two-layer MLP touching every primitive.
    fn mlp_loss(t: &mut Tape, ws: &[Tensor], x: &Tensor) -> (Vec<NodeId>, NodeId) {
        let ids: Vec<NodeId> = ws.iter().map(|w| t.param(w.clone())).collect();
        let xi = t.input(x.clone());
        let h = t.affine(xi, ids[0], ids[1]).unwrap();
        let h = t.softplus(h).unwrap();
        let h2 = t.affine(h, ids[2], ids[3]).unwrap();
        let a = t.slice(h2, 0, 2).unwrap();
        let b = t.slice(h2, 2, 2).unwrap();
        let sa = t.sigmoid(a).unwrap();
        let eb = t.exp(b).unwrap();
        let c = t.concat(sa, eb).unwrap();
        let r = t.relu(h).unwrap();
        let m = t.matmul(r, ids[4]).unwrap();
        let cm = t.mul(c, m).unwrap();
        let sq = t.square(cm).unwrap();
        let one = t.constant(1.0);
        let lg_in = t.add(sq, one).unwrap();
        let lg = t.log(lg_in).unwrap();
        let s = t.sum(lg).unwrap();
        let mn = t.mean(c).unwrap();
        let out = t.add(s, mn).unwrap();
        (ids, out)
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = crate::rng::rng_from_seed(11);
        let mut rnd = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        for _trial in 0..10 {
            let ws = vec![
                Tensor::matrix(5, 3, rnd(15)).unwrap(),
                vec_t(&rnd(5)),
                Tensor::matrix(4, 5, rnd(20)).unwrap(),
                vec_t(&rnd(4)),
                Tensor::matrix(5, 4, rnd(20)).unwrap(),
            ];
            let x = Tensor::matrix(2, 3, rnd(6)).unwrap();
            let mut t = Tape::new();
            let (ids, out) = mlp_loss(&mut t, &ws, &x);
            let g = t.gradient(out).unwrap();
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for (k, id) in ids.iter().enumerate() {
                let ga = g.get(*id).unwrap();
                for j in 0..ws[k].len() {
                    let mut up = ws.clone();
                    up[k].data_mut()[j] += h;
                    let mut dn = ws.clone();
                    dn[k].data_mut()[j] -= h;
                    let mut t1 = Tape::new();
                    let (_, o1) = mlp_loss(&mut t1, &up, &x);
                    let mut t2 = Tape::new();
                    let (_, o2) = mlp_loss(&mut t2, &dn, &x);
                    let fd = (t1.value(o1).item() - t2.value(o2).item()) / (2.0 * h);
                    let an = ga.data()[j];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(max_rel < 1e-4, "max relative error {max_rel}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let ws = vec![
            Tensor::matrix(5, 3, (0..15).map(|i| (i as f64).sin()).collect()).unwrap(),
            vec_t(&[0.1; 5]),
            Tensor::matrix(4, 5, (0..20).map(|i| (i as f64).cos()).collect()).unwrap(),
            vec_t(&[0.0; 4]),
            Tensor::matrix(5, 4, (0..20).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap(),
        ];
        let x = Tensor::matrix(2, 3, vec![0.5, -0.5, 0.25, 1.0, 0.0, -1.0]).unwrap();
        let mut a = Tape::new();
        let (_, oa) = mlp_loss(&mut a, &ws, &x);
        let mut b = Tape::new();
        let (_, ob) = mlp_loss(&mut b, &ws, &x);
        assert_eq!(a.value(oa).item().to_bits(), b.value(ob).item().to_bits());
    }

    #[test]
    fn inputs_get_no_gradient_and_topology_is_linear() {
        let mut t = Tape::new();
        let x = t.input(vec_t(&[1.0]));
        let p = t.param(vec_t(&[3.0]));
        let y = t.mul(x, p).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.gradient(s).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get(x).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0]);
        assert!(s.index() > y.index() && y.index() > p.index());
    }
}
