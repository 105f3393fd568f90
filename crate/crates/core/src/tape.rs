//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its forward value; node inputs always have smaller ids than the
//! node itself, so a single reverse sweep visits every node once in
//! topological order. Gradient accumulation order is fixed by tape order.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Probability clip applied inside binary cross-entropy.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Affine {
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Reshape(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    SqDist(NodeId, NodeId),
    Cosine(NodeId, NodeId),
    Softmax(NodeId),
    SoftmaxColumns(NodeId),
    WeightedSum { weights: NodeId, rows: Vec<NodeId> },
    Mean(Vec<NodeId>),
    Stack(Vec<NodeId>),
    Index(NodeId, usize),
    LogSumExp(NodeId),
    Min(NodeId),
    Bce {
        probs: NodeId,
        labels: Vec<f64>,
        weights: NodeId,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    first_non_finite: Option<NodeId>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rank1(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 1 {
        return Err(Error::dim(op, t.shape(), &[t.len()]));
    }
    Ok(())
}

fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

fn bounded_tanh(x: f64) -> f64 {
    x.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.values()[0]
    }

    /// First node whose forward value contained NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        self.first_non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(id) => Err(Error::Numeric {
                node: id.0,
                detail: format!("{:?}", self.nodes[id.0].op),
            }),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node { op, value });
        id
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A leaf that receives gradients but is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.push(Op::Leaf, Tensor::scalar(value))
    }

    /// Leaf bound to a parameter tensor. Repeated calls reuse the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let i = id.index();
        if i >= self.param_nodes.len() {
            self.param_nodes.resize(i + 1, None);
        }
        if let Some(n) = self.param_nodes[i] {
            return n;
        }
        let n = self.push(Op::Param, params.get(id).clone());
        self.param_nodes[i] = Some(n);
        n
    }

    /// `w · x + b` for `w: [m×n]`, `x: [n]`, `b: [m]`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (wt, xt) = (self.val(w), self.val(x));
        if wt.rank() != 2 || xt.rank() != 1 || wt.cols() != xt.len() {
            return Err(Error::dim("affine", wt.shape(), xt.shape()));
        }
        let (m, n) = (wt.rows(), wt.cols());
        let mut out = match b {
            Some(b) => {
                let bt = self.val(b);
                if bt.shape() != [m] {
                    return Err(Error::dim("affine bias", &[m], bt.shape()));
                }
                bt.values().to_vec()
            }
            None => vec![0.0; m],
        };
        let (wv, xv) = (wt.values(), xt.values());
        for (r, o) in out.iter_mut().enumerate() {
            let row = &wv[r * n..(r + 1) * n];
            *o += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push(Op::Affine { w, x, b }, Tensor::vector(out)))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.affine(w, x, None)
    }

    fn zip_with(&mut self, op: Op, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (at, bt) = (self.val(a), self.val(b));
        same_shape(name, at, bt)?;
        let values = at.values().iter().zip(bt.values()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(at.shape().to_vec(), values)?;
        Ok(self.push(op, t))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Add(a, b), a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Sub(a, b), a, b, "sub", |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Hadamard(a, b), a, b, "hadamard", |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let t = self.val(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), t)
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.val(a).map(|x| x + c);
        self.push(Op::AddScalar(a), t)
    }

    /// Elementwise tanh; outputs lie strictly inside (−1, 1).
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a).map(bounded_tanh);
        self.push(Op::Tanh(a), t)
    }

    /// Elementwise logistic function; outputs lie strictly inside (0, 1).
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a).map(stable_sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), t)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut out = Vec::new();
        for &p in parts {
            let t = self.val(p);
            rank1("concat", t)?;
            out.extend_from_slice(t.values());
        }
        if out.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(out)))
    }

    /// Contiguous sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.val(a);
        rank1("slice", t)?;
        if len == 0 || start + len > t.len() {
            return Err(Error::dim("slice", t.shape(), &[start, len]));
        }
        let v = t.values()[start..start + len].to_vec();
        Ok(self.push(Op::Slice(a, start), Tensor::vector(v)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.val(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), t))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.val(a).values().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.val(a), self.val(b));
        same_shape("dot", at, bt)?;
        let s = at.values().iter().zip(bt.values()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s)))
    }

    /// Squared Euclidean distance `‖a − b‖²`.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.val(a), self.val(b));
        same_shape("sq_dist", at, bt)?;
        let s = at.values().iter().zip(bt.values()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Op::SqDist(a, b), Tensor::scalar(s)))
    }

    /// Cosine similarity of the flattened tensors; 0 when either has zero norm.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.val(a), self.val(b));
        if at.len() != bt.len() {
            return Err(Error::dim("cosine", at.shape(), bt.shape()));
        }
        let c = crate::tensor::cosine(at.values(), bt.values());
        Ok(self.push(Op::Cosine(a, b), Tensor::scalar(c)))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.val(a);
        rank1("softmax", t)?;
        let mut v = t.values().to_vec();
        softmax_in_place(&mut v);
        Ok(self.push(Op::Softmax(a), Tensor::vector(v)))
    }

    /// Softmax down each column of a matrix (over the row axis).
    pub fn softmax_columns(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.val(a);
        if t.rank() != 2 {
            return Err(Error::dim("softmax_columns", t.shape(), &[0, 0]));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = t.values().to_vec();
        let mut col = vec![0.0; rows];
        for c in 0..cols {
            for r in 0..rows {
                col[r] = out[r * cols + c];
            }
            softmax_in_place(&mut col);
            for r in 0..rows {
                out[r * cols + c] = col[r];
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(Op::SoftmaxColumns(a), t))
    }

    /// `Σ_i weights[i] · rows[i]` over equal-shape rank-1 rows.
    pub fn weighted_sum(&mut self, weights: NodeId, rows: &[NodeId]) -> Result<NodeId> {
        let wt = self.val(weights);
        if wt.len() != rows.len() || rows.is_empty() {
            return Err(Error::dim("weighted_sum", wt.shape(), &[rows.len()]));
        }
        let shape = self.val(rows[0]).shape().to_vec();
        let mut out = vec![0.0; self.val(rows[0]).len()];
        for (&wi, &r) in wt.values().iter().zip(rows) {
            let rt = self.val(r);
            if rt.shape() != shape.as_slice() {
                return Err(Error::dim("weighted_sum", &shape, rt.shape()));
            }
            for (o, x) in out.iter_mut().zip(rt.values()) {
                *o += wi * x;
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(Op::WeightedSum { weights, rows: rows.to_vec() }, t))
    }

    /// Elementwise mean of equal-shape tensors.
    pub fn mean(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Contract("mean of nothing".into()))?;
        let shape = self.val(*first).shape().to_vec();
        let mut out = vec![0.0; self.val(*first).len()];
        for &p in parts {
            let t = self.val(p);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("mean", &shape, t.shape()));
            }
            for (o, x) in out.iter_mut().zip(t.values()) {
                *o += x;
            }
        }
        let n = parts.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(Op::Mean(parts.to_vec()), t))
    }

    /// Stacks scalars into a vector, or equal-length vectors into matrix rows.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Contract("stack of nothing".into()))?;
        let inner = self.val(*first).len();
        let mut out = Vec::with_capacity(inner * parts.len());
        for &p in parts {
            let t = self.val(p);
            if t.len() != inner || t.rank() != 1 {
                return Err(Error::dim("stack", &[inner], t.shape()));
            }
            out.extend_from_slice(t.values());
        }
        let shape = if inner == 1 { vec![parts.len()] } else { vec![parts.len(), inner] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(Op::Stack(parts.to_vec()), t))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let t = self.val(a);
        if i >= t.len() {
            return Err(Error::dim("index", t.shape(), &[i]));
        }
        let v = t.values()[i];
        Ok(self.push(Op::Index(a, i), Tensor::scalar(v)))
    }

    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).values();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        self.push(Op::LogSumExp(a), Tensor::scalar(s))
    }

    /// Minimum element; the gradient goes to the first minimizer.
    pub fn min(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).values();
        let m = v.iter().cloned().fold(f64::INFINITY, f64::min);
        self.push(Op::Min(a), Tensor::scalar(m))
    }

    /// Weighted binary cross-entropy summed over entries:
    /// `−Σ_j w_j [L_j ln p̃_j + (1 − L_j) ln(1 − p̃_j)]` with `p̃` clipped to
    /// `[PROB_CLIP, 1 − PROB_CLIP]`. Entries with weight exactly zero are skipped.
    pub fn bce(&mut self, probs: NodeId, labels: &[f64], weights: NodeId) -> Result<NodeId> {
        let (pt, wt) = (self.val(probs), self.val(weights));
        same_shape("bce", pt, wt)?;
        if labels.len() != pt.len() {
            return Err(Error::dim("bce labels", pt.shape(), &[labels.len()]));
        }
        let mut s = 0.0;
        for ((p, w), l) in pt.values().iter().zip(wt.values()).zip(labels) {
            if *w == 0.0 {
                continue;
            }
            s += w * bce_term(*p, *l);
        }
        Ok(self.push(
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                weights,
            },
            Tensor::scalar(s),
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!("backward from non-scalar node of shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(p, n)| n.map(|n| (ParamId(p), n)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.values();
        macro_rules! grad_of {
            ($id:expr) => {{
                let id: NodeId = $id;
                slot(grads, id, self.val(id).len())
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Affine { w, x, b } => {
                let (wt, xt) = (self.val(*w), self.val(*x));
                let n = wt.cols();
                {
                    let gw = grad_of!(*w);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (c, xc) in xt.values().iter().enumerate() {
                            gw[r * n + c] += gr * xc;
                        }
                    }
                }
                {
                    let gx = grad_of!(*x);
                    let wv = wt.values();
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (c, gxc) in gx.iter_mut().enumerate() {
                            *gxc += wv[r * n + c] * gr;
                        }
                    }
                }
                if let Some(b) = b {
                    let gb = grad_of!(*b);
                    for (a, d) in gb.iter_mut().zip(g) {
                        *a += d;
                    }
                }
            }
            Op::Add(a, b) => {
                for (t, d) in grad_of!(*a).iter_mut().zip(g) {
                    *t += d;
                }
                for (t, d) in grad_of!(*b).iter_mut().zip(g) {
                    *t += d;
                }
            }
            Op::Sub(a, b) => {
                for (t, d) in grad_of!(*a).iter_mut().zip(g) {
                    *t += d;
                }
                for (t, d) in grad_of!(*b).iter_mut().zip(g) {
                    *t -= d;
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.val(*a).values(), self.val(*b).values());
                for ((t, d), y) in grad_of!(*a).iter_mut().zip(g).zip(bv) {
                    *t += d * y;
                }
                for ((t, d), x) in grad_of!(*b).iter_mut().zip(g).zip(av) {
                    *t += d * x;
                }
            }
            Op::Scale(a, f) => {
                for (t, d) in grad_of!(*a).iter_mut().zip(g) {
                    *t += d * f;
                }
            }
            Op::AddScalar(a) => {
                for (t, d) in grad_of!(*a).iter_mut().zip(g) {
                    *t += d;
                }
            }
            Op::Tanh(a) => {
                for ((t, d), y) in grad_of!(*a).iter_mut().zip(g).zip(out) {
                    *t += d * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                for ((t, d), y) in grad_of!(*a).iter_mut().zip(g).zip(out) {
                    *t += d * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let av = self.val(*a).values();
                for ((t, d), x) in grad_of!(*a).iter_mut().zip(g).zip(av) {
                    if *x > 0.0 {
                        *t += d;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let gp = grad_of!(*p);
                    let len = gp.len();
                    for (t, d) in gp.iter_mut().zip(&g[off..off + len]) {
                        *t += d;
                    }
                    off += len;
                }
            }
            Op::Slice(a, start) => {
                let ga = grad_of!(*a);
                for (t, d) in ga[*start..*start + g.len()].iter_mut().zip(g) {
                    *t += d;
                }
            }
            Op::Reshape(a) => {
                for (t, d) in grad_of!(*a).iter_mut().zip(g) {
                    *t += d;
                }
            }
            Op::Sum(a) => {
                for t in grad_of!(*a).iter_mut() {
                    *t += g[0];
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.val(*a).values(), self.val(*b).values());
                for (t, y) in grad_of!(*a).iter_mut().zip(bv) {
                    *t += g[0] * y;
                }
                for (t, x) in grad_of!(*b).iter_mut().zip(av) {
                    *t += g[0] * x;
                }
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.val(*a).values(), self.val(*b).values());
                for ((t, x), y) in grad_of!(*a).iter_mut().zip(av).zip(bv) {
                    *t += g[0] * 2.0 * (x - y);
                }
                for ((t, x), y) in grad_of!(*b).iter_mut().zip(av).zip(bv) {
                    *t -= g[0] * 2.0 * (x - y);
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.val(*a).values(), self.val(*b).values());
                let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    let c = out[0];
                    for ((t, x), y) in grad_of!(*a).iter_mut().zip(av).zip(bv) {
                        *t += g[0] * (y / (na * nb) - c * x / (na * na));
                    }
                    for ((t, x), y) in grad_of!(*b).iter_mut().zip(av).zip(bv) {
                        *t += g[0] * (x / (na * nb) - c * y / (nb * nb));
                    }
                }
            }
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(out).map(|(d, y)| d * y).sum();
                for ((t, d), y) in grad_of!(*a).iter_mut().zip(g).zip(out) {
                    *t += y * (d - dot);
                }
            }
            Op::SoftmaxColumns(a) => {
                let shape = node.value.shape();
                let (rows, cols) = (shape[0], shape[1]);
                let ga = grad_of!(*a);
                for c in 0..cols {
                    let dot: f64 = (0..rows).map(|r| g[r * cols + c] * out[r * cols + c]).sum();
                    for r in 0..rows {
                        let k = r * cols + c;
                        ga[k] += out[k] * (g[k] - dot);
                    }
                }
            }
            Op::WeightedSum { weights, rows } => {
                let wv = self.val(*weights).values().to_vec();
                {
                    let gw = grad_of!(*weights);
                    for (gwi, r) in gw.iter_mut().zip(rows) {
                        *gwi += self.val(*r).values().iter().zip(g).map(|(x, d)| x * d).sum::<f64>();
                    }
                }
                for (wi, r) in wv.iter().zip(rows) {
                    for (t, d) in grad_of!(*r).iter_mut().zip(g) {
                        *t += wi * d;
                    }
                }
            }
            Op::Mean(parts) => {
                let n = parts.len() as f64;
                for p in parts {
                    for (t, d) in grad_of!(*p).iter_mut().zip(g) {
                        *t += d / n;
                    }
                }
            }
            Op::Stack(parts) => {
                let inner = self.val(parts[0]).len();
                for (k, p) in parts.iter().enumerate() {
                    for (t, d) in grad_of!(*p).iter_mut().zip(&g[k * inner..(k + 1) * inner]) {
                        *t += d;
                    }
                }
            }
            Op::Index(a, j) => {
                grad_of!(*a)[*j] += g[0];
            }
            Op::LogSumExp(a) => {
                let av = self.val(*a).values();
                for (t, x) in grad_of!(*a).iter_mut().zip(av) {
                    *t += g[0] * (x - out[0]).exp();
                }
            }
            Op::Min(a) => {
                let av = self.val(*a).values();
                let j = av.iter().position(|x| *x == out[0]).unwrap_or(0);
                grad_of!(*a)[j] += g[0];
            }
            Op::Bce { probs, labels, weights } => {
                let (pv, wv) = (self.val(*probs).values(), self.val(*weights).values());
                {
                    let gp = grad_of!(*probs);
                    for (((t, p), w), l) in gp.iter_mut().zip(pv).zip(wv).zip(labels) {
                        if *w == 0.0 || *p < PROB_CLIP || *p > 1.0 - PROB_CLIP {
                            continue;
                        }
                        *t += g[0] * w * -(l / p - (1.0 - l) / (1.0 - p));
                    }
                }
                let gw = grad_of!(*weights);
                for (((t, p), w), l) in gw.iter_mut().zip(pv).zip(wv).zip(labels) {
                    if *w == 0.0 {
                        continue;
                    }
                    *t += g[0] * bce_term(*p, *l);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn bce_term(p: f64, l: f64) -> f64 {
    let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    -(l * p.ln() + (1.0 - l) * (1.0 - p).ln())
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to a node, or `None` if the node did not reach the loss.
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for every parameter in `params`; unreachable ones are exact zeros.
    pub fn for_params(&self, params: &ParamSet) -> Vec<Tensor> {
        let mut out = params.zeros_like();
        self.accumulate_params(&mut out, 1.0);
        out
    }

    /// Adds `scale ×` the parameter gradients into `acc` (aligned with the ParamSet).
    pub fn accumulate_params(&self, acc: &mut [Tensor], scale: f64) {
        for (pid, nid) in &self.params {
            if let Some(g) = self.node(*nid) {
                for (a, d) in acc[pid.index()].values_mut().iter_mut().zip(g) {
                    *a += scale * d;
                }
            }
        }
    }
}
