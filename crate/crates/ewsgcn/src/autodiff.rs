//! Reverse-mode automatic differentiation over dense 64-bit tensors.
//!
//! A [`Tape`] records every primitive applied during one forward pass; calling
//! [`Tape::backward`] on a scalar loss walks the record once in reverse and
//! produces gradients for every [`Param`] leaf that was touched. Tapes are
//! per-pass and discarded afterwards; trainable weights live in a [`ParamSet`]
//! outside the tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats. Scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and nonnegative");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor with shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{r} tensor"),
        }
    }

    fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            r => panic!("cols() on rank-{r} tensor"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One trainable tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Named collection of all trainable parameters of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        let grad = Tensor::zeros(value.shape());
        self.names.push(name);
        self.params.push(Param { value, grad, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add `scale * grads` into the stored gradients (batch accumulation).
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (idx, g) in &grads.by_param {
            let p = &mut self.params[*idx];
            for (dst, src) in p.grad.data.iter_mut().zip(&g.data) {
                *dst += scale * src;
            }
        }
    }

    pub fn set_frozen_where(&mut self, pred: impl Fn(&str) -> bool, frozen: bool) {
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            if pred(name) {
                p.frozen = frozen;
            }
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copy tensor values from `other` for every name that starts with
    /// `other_prefix`, into this set under `self_prefix`. Shapes must match.
    pub fn copy_values_by_prefix(
        &mut self,
        self_prefix: &str,
        other: &ParamSet,
        other_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in other.names.iter().zip(&other.params) {
            if let Some(suffix) = name.strip_prefix(other_prefix) {
                let target = format!("{self_prefix}{suffix}");
                if let Some(id) = self.id_of(&target) {
                    if self.value(id).shape() != p.value.shape() {
                        return Err(Error::Shape(format!(
                            "copy {name} -> {target}: shape {:?} vs {:?}",
                            p.value.shape(),
                            self.value(id).shape()
                        )));
                    }
                    self.get_mut(id).value = p.value.clone();
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    LeakyRelu { a: NodeId, slope: f64 },
    Elu { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    ReduceAll { a: NodeId, kind: Reduce },
    ReduceAxis { a: NodeId, kind: Reduce, axis: usize },
    Concat { parts: Vec<NodeId> },
    Row { a: NodeId, index: usize },
    Index { a: NodeId, index: usize },
    Bce { p: NodeId, target: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter, as produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id.0)
    }
}

const BCE_CLAMP: f64 = 1e-12;

/// Record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_nodes: HashMap::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Constant)
    }

    /// Leaf for a trainable parameter. Repeated calls for the same id return
    /// the same node, so shared weights accumulate gradients naturally.
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id.0) {
            return n;
        }
        let n = self.push(ps.value(id).clone(), Op::Leaf);
        self.param_nodes.insert(id.0, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() > 2 || tb.rank() > 2 {
            return Err(Error::Shape("matmul supports rank 1 and 2 only".into()));
        }
        let (m, k1) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        // rank-1 rhs acts as a column vector
        let (k2, n) = if tb.rank() == 1 { (tb.len(), 1) } else { (k2, n) };
        if k1 != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        raw_matmul(&mut out, ta.data(), tb.data(), m, k1, n);
        let shape = match (ta.rank(), tb.rank()) {
            (1, 1) => vec![1],
            (1, 2) => vec![n],
            (2, 1) => vec![m],
            _ => vec![m, n],
        };
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() || ta.is_scalar() || tb.is_scalar() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "add")?;
        let value = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "mul")?;
        let value = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "div")?;
        let value = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        Ok(self.push(value, Op::Div { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = map_tensor(&self.nodes[a.0].value, |x| c * x);
        self.push(value, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = map_tensor(&self.nodes[a.0].value, |x| x.max(0.0));
        self.push(value, Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let value = map_tensor(&self.nodes[a.0].value, |x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu { a, slope })
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let value = map_tensor(&self.nodes[a.0].value, |x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(value, Op::Elu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = map_tensor(&self.nodes[a.0].value, sigmoid);
        self.push(value, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = map_tensor(&self.nodes[a.0].value, f64::tanh);
        self.push(value, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = map_tensor(&self.nodes[a.0].value, f64::exp);
        self.push(value, Op::Exp { a })
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.reduce(Reduce::Sum, a, None).expect("full reduce cannot fail")
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.reduce(Reduce::Mean, a, None).expect("full reduce cannot fail")
    }

    pub fn reduce(&mut self, kind: Reduce, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        match axis {
            None => {
                let s: f64 = ta.data().iter().sum();
                let v = match kind {
                    Reduce::Sum => s,
                    Reduce::Mean => s / ta.len() as f64,
                };
                Ok(self.push(Tensor::scalar(v), Op::ReduceAll { a, kind }))
            }
            Some(axis) => {
                if axis >= ta.rank() {
                    return Err(Error::Shape(format!(
                        "reduce axis {axis} out of range for rank {}",
                        ta.rank()
                    )));
                }
                if ta.rank() != 2 {
                    return Err(Error::Shape("axis reduce needs a rank-2 tensor".into()));
                }
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let value = if axis == 0 {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j] += ta.data()[i * c + j];
                        }
                    }
                    if kind == Reduce::Mean {
                        out.iter_mut().for_each(|v| *v /= r as f64);
                    }
                    Tensor::vector(out)
                } else {
                    let mut out = vec![0.0; r];
                    for i in 0..r {
                        out[i] = ta.data()[i * c..(i + 1) * c].iter().sum();
                    }
                    if kind == Reduce::Mean {
                        out.iter_mut().for_each(|v| *v /= c as f64);
                    }
                    Tensor::vector(out)
                };
                Ok(self.push(value, Op::ReduceAxis { a, kind, axis }))
            }
        }
    }

    /// Concatenate rank-1 tensors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != 1 {
                return Err(Error::Shape("concat supports rank-1 tensors only".into()));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat { parts: parts.to_vec() }))
    }

    /// Select row `index` of a rank-2 tensor as a vector.
    pub fn row(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(Error::Shape("row() needs a rank-2 tensor".into()));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        if index >= r {
            return Err(Error::Shape(format!("row {index} out of range for {r} rows")));
        }
        let data = ta.data()[index * c..(index + 1) * c].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Row { a, index }))
    }

    /// Select one coordinate of a rank-1 tensor as a scalar.
    pub fn index(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 1 || index >= ta.len() {
            return Err(Error::Shape(format!(
                "index {index} invalid for shape {:?}",
                ta.shape()
            )));
        }
        let v = ta.data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Index { a, index }))
    }

    /// Binary cross-entropy of a scalar probability against a 0/1 target,
    /// with the probability clamped away from 0 and 1.
    pub fn bce_loss(&mut self, p: NodeId, target: f64) -> Result<NodeId> {
        let tp = &self.nodes[p.0].value;
        if !tp.is_scalar() {
            return Err(Error::Shape("bce_loss expects a scalar probability".into()));
        }
        let pc = tp.item().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let v = -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
        Ok(self.push(Tensor::scalar(v), Op::Bce { p, target }))
    }

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// parameter leaf reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let m = ta.rows();
                    let k = ta.cols();
                    let n = if tb.rank() == 1 { 1 } else { tb.cols() };
                    // dA = dC Bᵀ
                    let mut da = vec![0.0; m * k];
                    for ii in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g.data[ii * n + j] * tb.data()[l * n + j];
                            }
                            da[ii * k + l] = s;
                        }
                    }
                    // dB = Aᵀ dC
                    let mut db = vec![0.0; k * n];
                    for ii in 0..m {
                        for l in 0..k {
                            let av = ta.data()[ii * k + l];
                            for j in 0..n {
                                db[l * n + j] += av * g.data[ii * n + j];
                            }
                        }
                    }
                    let sa = ta.shape().to_vec();
                    let sb = tb.shape().to_vec();
                    accumulate(&mut grads, a, Tensor { shape: sa, data: da });
                    accumulate(&mut grads, b, Tensor { shape: sb, data: db });
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    let ga = reduce_to_shape(&g, self.nodes[a.0].value.shape());
                    let gb = reduce_to_shape(&g, self.nodes[b.0].value.shape());
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    let ga = reduce_to_shape(&broadcast_zip(&g, &tb, |x, y| x * y), ta.shape());
                    let gb = reduce_to_shape(&broadcast_zip(&g, &ta, |x, y| x * y), tb.shape());
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Div { a, b } => {
                    let (a, b) = (*a, *b);
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    let ga = reduce_to_shape(&broadcast_zip(&g, &tb, |x, y| x / y), ta.shape());
                    // d/db (a/b) = -a / b²
                    let num = broadcast_zip(&g, &ta, |x, y| x * y);
                    let gb = reduce_to_shape(
                        &broadcast_zip(&num, &tb, |x, y| -x / (y * y)),
                        tb.shape(),
                    );
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    let ga = map_tensor(&g, |x| c * x);
                    accumulate(&mut grads, a, ga);
                }
                Op::Relu { a } => {
                    let a = *a;
                    let ga = zip_with(&g, &self.nodes[a.0].value, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::LeakyRelu { a, slope } => {
                    let (a, slope) = (*a, *slope);
                    let ga = zip_with(&g, &self.nodes[a.0].value, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            slope * gv
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::Elu { a } => {
                    let a = *a;
                    let ga = zip_with(&g, &self.nodes[a.0].value, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            gv * x.exp()
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    let ga = zip_with(&g, &self.nodes[i].value, |gv, s| gv * s * (1.0 - s));
                    accumulate(&mut grads, a, ga);
                }
                Op::Tanh { a } => {
                    let a = *a;
                    let ga = zip_with(&g, &self.nodes[i].value, |gv, t| gv * (1.0 - t * t));
                    accumulate(&mut grads, a, ga);
                }
                Op::Exp { a } => {
                    let a = *a;
                    let ga = zip_with(&g, &self.nodes[i].value, |gv, e| gv * e);
                    accumulate(&mut grads, a, ga);
                }
                Op::ReduceAll { a, kind } => {
                    let (a, kind) = (*a, *kind);
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let n: usize = shape.iter().product();
                    let gv = g.item()
                        * match kind {
                            Reduce::Sum => 1.0,
                            Reduce::Mean => 1.0 / n as f64,
                        };
                    accumulate(&mut grads, a, Tensor::full(&shape, gv));
                }
                Op::ReduceAxis { a, kind, axis } => {
                    let (a, kind, axis) = (*a, *kind, *axis);
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let (r, c) = (shape[0], shape[1]);
                    let denom = match kind {
                        Reduce::Sum => 1.0,
                        Reduce::Mean => {
                            if axis == 0 {
                                r as f64
                            } else {
                                c as f64
                            }
                        }
                    };
                    let mut out = vec![0.0; r * c];
                    for ii in 0..r {
                        for j in 0..c {
                            let src = if axis == 0 { g.data[j] } else { g.data[ii] };
                            out[ii * c + j] = src / denom;
                        }
                    }
                    accumulate(&mut grads, a, Tensor { shape, data: out });
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        let slice = Tensor::vector(g.data[off..off + n].to_vec());
                        accumulate(&mut grads, p, slice);
                        off += n;
                    }
                }
                Op::Row { a, index } => {
                    let (a, index) = (*a, *index);
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let c = shape[1];
                    let mut out = Tensor::zeros(&shape);
                    out.data[index * c..(index + 1) * c].copy_from_slice(&g.data);
                    accumulate(&mut grads, a, out);
                }
                Op::Index { a, index } => {
                    let (a, index) = (*a, *index);
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let mut out = Tensor::zeros(&shape);
                    out.data[index] = g.item();
                    accumulate(&mut grads, a, out);
                }
                Op::Bce { p, target } => {
                    let (p, target) = (*p, *target);
                    let pv = self.nodes[p.0].value.item();
                    let d = if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                        0.0
                    } else {
                        -target / pv + (1.0 - target) / (1.0 - pv)
                    };
                    accumulate(&mut grads, p, Tensor::scalar(g.item() * d));
                }
            }
        }

        let mut out = Gradients::default();
        for (pid, nid) in &self.param_nodes {
            if let Some(g) = grads[nid.0].take() {
                out.by_param.insert(*pid, g);
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn raw_matmul(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip_with(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(g.len(), other.len());
    Tensor {
        shape: g.shape.clone(),
        data: g.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}

/// Elementwise combine with scalar broadcast on either side.
fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    } else if b.is_scalar() {
        let y = b.data[0];
        map_tensor(a, |x| f(x, y))
    } else {
        let x = a.data[0];
        map_tensor(b, |y| f(x, y))
    }
}

/// Collapse a broadcasted gradient back to the operand's shape.
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if g.len() == n {
        Tensor { shape: shape.to_vec(), data: g.data.clone() }
    } else {
        // operand was a broadcast scalar
        Tensor { shape: shape.to_vec(), data: vec![g.data.iter().sum()] }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (dst, src) in existing.data.iter_mut().zip(&g.data) {
                *dst += src;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Maximum relative error between analytic gradients and central differences,
/// over every coordinate of every parameter in `params`.
///
/// `build` must be deterministic (no dropout) and construct the scalar loss
/// for the given parameter values on the supplied tape.
pub fn grad_check<F>(params: &ParamSet, h: f64, build: F) -> Result<f64>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<NodeId> + Sync,
{
    assert!(h > 0.0, "step must be positive");
    let mut tape = Tape::new();
    let loss = build(params, &mut tape)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::Numerical("non-finite loss in grad_check".into()));
    }
    let grads = tape.backward(loss)?;

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(ps, &mut t)?;
        let v = t.value(l).item();
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite loss in grad_check".into()));
        }
        Ok(v)
    };

    let coords: Vec<(usize, usize)> = params
        .ids()
        .flat_map(|id| (0..params.value(id).len()).map(move |c| (id.0, c)))
        .collect();

    let errs = crate::parallel::par_map(&coords, |&(pi, ci)| -> Result<f64> {
        let id = ParamId(pi);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[ci]);
        let mut probe = params.clone();
        probe.get_mut(id).value.data_mut()[ci] += h;
        let plus = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[ci] -= 2.0 * h;
        let minus = eval(&probe)?;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::Numerical("non-finite gradient in grad_check".into()));
        }
        let denom = 1.0_f64.max(analytic.abs()).max(numeric.abs());
        Ok((analytic - numeric).abs() / denom)
    });

    let mut max_err = 0.0_f64;
    for e in errs {
        max_err = max_err.max(e?);
    }
    Ok(max_err)
}
