//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! information to run its vector-Jacobian product. Parameters enter the tape
//! as leaves bound to a [`ParamStore`]; [`Tape::backward`] returns their
//! gradients, which the caller folds into the store.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{Mask, Tensor};
use crate::error::{Error, Result};

enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Rc<Vec<f64>>),
    MatMul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        b_t: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Rc<Vec<f64>>,
        rstd: Rc<Vec<f64>>,
    },
    CrossEntropy {
        logits: usize,
        targets: Rc<Vec<Option<usize>>>,
        probs: Rc<Vec<f64>>,
        smoothing: f64,
        count: usize,
    },
    Gather(usize, Rc<Vec<usize>>),
    Reshape(usize),
    SwapAxes12(usize, [usize; 4]),
    Concat {
        parts: Vec<usize>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    WeightedSum(Vec<usize>, usize),
    Sum(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
///
/// A tape created with [`Tape::training`] applies dropout using its own
/// random stream; all other tapes evaluate deterministically.
pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape<'t>,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of a backward pass.
pub struct Gradients {
    params: ParamGrads,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }

    /// Gradient with respect to a leaf created by [`Tape::leaf`].
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.leaves.get(&v.id).map(Vec::as_slice)
    }
}

impl<'s> Tape<'s> {
    /// Evaluation tape bound to a parameter store.
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            dropout_rng: None,
        }
    }

    /// Training tape: dropout is active and drawn from `rng`.
    pub fn training(store: &'s ParamStore, rng: ChaCha8Rng) -> Self {
        Tape {
            dropout_rng: Some(RefCell::new(rng)),
            ..Tape::new(store)
        }
    }

    /// Tape without parameters, for free-standing tensor computations.
    pub fn detached() -> Tape<'static> {
        Tape {
            store: None,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            dropout_rng: None,
        }
    }

    /// Store the tape reads parameters from.
    pub fn store(&self) -> Option<&'s ParamStore> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Returns the dropout stream, consuming the tape.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.dropout_rng.map(RefCell::into_inner)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push<'t>(&'t self, value: Tensor, op: Op, needs_grad: bool) -> Var<'t> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Constant or input leaf. Gradients of leaves with `requires_grad` are
    /// available through [`Gradients::wrt`].
    pub fn leaf<'t>(&'t self, value: Tensor, requires_grad: bool) -> Var<'t> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant<'t>(&'t self, value: Tensor) -> Var<'t> {
        self.leaf(value, false)
    }

    /// Parameter leaf; repeated requests return the same node.
    pub fn param<'t>(&'t self, id: ParamId) -> Var<'t> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let store = self
            .store
            .expect("parameter requested on a detached tape");
        let p = store.get(id);
        let v = self.push(p.value().clone(), Op::Param(id), p.trainable());
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?
            .value();
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut sizes = Vec::with_capacity(parts.len());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != rank
                || s[..axis] != first.shape()[..axis]
                || s[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in values.iter().zip(&sizes) {
                let chunk = sz * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let needs = parts.iter().any(|p| self.needs(p.id));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                sizes,
                outer,
                inner,
            },
            needs,
        ))
    }

    /// `sum_i w[i] * xs[i]` for a weight vector `w` of length `xs.len()`.
    pub fn weighted_sum<'t>(&'t self, xs: &[Var<'t>], w: Var<'t>) -> Result<Var<'t>> {
        let wv = w.value();
        if wv.numel() != xs.len() || xs.is_empty() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: vec![xs.len()],
                rhs: wv.shape().to_vec(),
            });
        }
        let first = xs[0].value();
        let mut out = vec![0.0; first.numel()];
        for (x, &wi) in xs.iter().zip(wv.data()) {
            let xv = x.value();
            if xv.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    lhs: first.shape().to_vec(),
                    rhs: xv.shape().to_vec(),
                });
            }
            for (o, v) in out.iter_mut().zip(xv.data()) {
                *o += wi * v;
            }
        }
        let needs = self.needs(w.id) || xs.iter().any(|x| self.needs(x.id));
        Ok(self.push(
            Tensor::from_parts(first.shape().to_vec(), out),
            Op::WeightedSum(xs.iter().map(|x| x.id).collect(), w.id),
            needs,
        ))
    }

    /// Row lookup: `table` is `[V x d]`, result is `shape ++ [d]`.
    pub fn gather<'t>(&'t self, table: Var<'t>, ids: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        let t = table.value();
        if t.shape().len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::invalid(format!("token id {i} outside vocabulary of {v}")));
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let mut s = shape.to_vec();
        s.push(d);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::Gather(table.id, Rc::new(ids.to_vec())),
            self.needs(table.id),
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut params = Vec::new();
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            macro_rules! acc {
                ($t:expr) => {
                    slot(&mut grads, &nodes, $t)
                };
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, g);
                }
                Op::Param(pid) => params.push((*pid, g)),
                Op::Add(a, b) => {
                    if let Some(ga) = acc!(*a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = acc!(*b) {
                        add_into(gb, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = acc!(*a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = acc!(*b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if let Some(ga) = acc!(*a) {
                        for ((x, gi), bi) in ga.iter_mut().zip(&g).zip(bv.data()) {
                            *x += gi * bi;
                        }
                    }
                    if let Some(gb) = acc!(*b) {
                        for ((x, gi), ai) in gb.iter_mut().zip(&g).zip(av.data()) {
                            *x += gi * ai;
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if let Some(ga) = acc!(*a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = acc!(*bias) {
                        let d = gb.len();
                        for row in g.chunks(d) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if let Some(ga) = acc!(*a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += f * y);
                    }
                }
                Op::MulConst(a, c) => {
                    if let Some(ga) = acc!(*a) {
                        for ((x, y), ci) in ga.iter_mut().zip(&g).zip(c.iter()) {
                            *x += y * ci;
                        }
                    }
                }
                Op::MatMul(x, w) => {
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let (q, r) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.numel() / q;
                    if let Some(gx) = acc!(*x) {
                        gemm(rows, r, q, &g, false, wv.data(), true, gx, true);
                    }
                    if let Some(gw) = acc!(*w) {
                        gemm(q, rows, r, xv.data(), true, &g, false, gw, true);
                    }
                }
                Op::Bmm {
                    a,
                    b,
                    b_t,
                    groups,
                    m,
                    k,
                    n,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (av, bv) = (Rc::clone(&nodes[*a].value), Rc::clone(&nodes[*b].value));
                    if let Some(ga) = acc!(*a) {
                        for gi in 0..*groups {
                            let gs = &g[gi * m * n..(gi + 1) * m * n];
                            let bs = &bv.data()[gi * k * n..(gi + 1) * k * n];
                            // dA = dC . op(B)^T
                            gemm(m, n, k, gs, false, bs, !*b_t, &mut ga[gi * m * k..(gi + 1) * m * k], true);
                        }
                    }
                    if let Some(gb) = acc!(*b) {
                        for gi in 0..*groups {
                            let gs = &g[gi * m * n..(gi + 1) * m * n];
                            let as_ = &av.data()[gi * m * k..(gi + 1) * m * k];
                            let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                            if *b_t {
                                // B stored [n x k]: dB = dC^T . A
                                gemm(n, m, k, gs, true, as_, false, out, true);
                            } else {
                                // dB = A^T . dC
                                gemm(k, m, n, as_, true, gs, false, out, true);
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let out = &node.value;
                    if let Some(ga) = acc!(*a) {
                        for ((x, y), o) in ga.iter_mut().zip(&g).zip(out.data()) {
                            if *o > 0.0 {
                                *x += y;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    if let Some(ga) = acc!(*a) {
                        for ((x, y), s) in ga.iter_mut().zip(&g).zip(out.data()) {
                            *x += y * s * (1.0 - s);
                        }
                    }
                }
                Op::MaskedSoftmax(a) => {
                    let out = &node.value;
                    let k = out.last_dim();
                    if let Some(ga) = acc!(*a) {
                        for ((gx, gy), y) in ga.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k)) {
                            let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                            for ((x, dy), yi) in gx.iter_mut().zip(gy).zip(y) {
                                *x += yi * (dy - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gainv = Rc::clone(&nodes[*gain].value);
                    let d = gainv.numel();
                    if let Some(gg) = acc!(*gain) {
                        for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, dy), h) in gg.iter_mut().zip(gy).zip(xh) {
                                *o += dy * h;
                            }
                        }
                    }
                    if let Some(gb) = acc!(*bias) {
                        for gy in g.chunks(d) {
                            add_into(gb, gy);
                        }
                    }
                    if let Some(gx) = acc!(*x) {
                        let inv_d = 1.0 / d as f64;
                        for (((gxr, gy), xh), rs) in gx
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .zip(rstd.iter())
                        {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let dxh = gy[j] * gainv.data()[j];
                                s1 += dxh;
                                s2 += dxh * xh[j];
                            }
                            for j in 0..d {
                                let dxh = gy[j] * gainv.data()[j];
                                gxr[j] += rs * (dxh - inv_d * s1 - xh[j] * inv_d * s2);
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    smoothing,
                    count,
                } => {
                    let v = nodes[*logits].value.last_dim();
                    let scale = g[0] / *count as f64;
                    if let Some(gl) = acc!(*logits) {
                        for ((row, p), t) in gl.chunks_mut(v).zip(probs.chunks(v)).zip(targets.iter()) {
                            let Some(t) = t else { continue };
                            for (j, (o, pj)) in row.iter_mut().zip(p).enumerate() {
                                let mut q = smoothing / v as f64;
                                if j == *t {
                                    q += 1.0 - smoothing;
                                }
                                *o += scale * (pj - q);
                            }
                        }
                    }
                }
                Op::Gather(table, ids) => {
                    if let Some(gt) = acc!(*table) {
                        let d = nodes[*table].value.last_dim();
                        for (row, &i) in g.chunks(d).zip(ids.iter()) {
                            add_into(&mut gt[i * d..(i + 1) * d], row);
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = acc!(*a) {
                        add_into(ga, &g);
                    }
                }
                Op::SwapAxes12(a, dims) => {
                    if let Some(ga) = acc!(*a) {
                        // g has layout [d0, d2, d1, d3]
                        let [d0, d1, d2, d3] = *dims;
                        let swapped = swap12(&g, [d0, d2, d1, d3]);
                        add_into(ga, &swapped);
                    }
                }
                Op::Concat {
                    parts,
                    sizes,
                    outer,
                    inner,
                } => {
                    let total: usize = sizes.iter().sum();
                    let mut offset = 0;
                    for (&p, &sz) in parts.iter().zip(sizes) {
                        if let Some(gp) = acc!(p) {
                            let chunk = sz * inner;
                            for o in 0..*outer {
                                let src = o * total * inner + offset * inner;
                                add_into(&mut gp[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                            }
                        }
                        offset += sz;
                    }
                }
                Op::WeightedSum(xs, w) => {
                    let wv = Rc::clone(&nodes[*w].value);
                    let xvals: Vec<Rc<Tensor>> = xs.iter().map(|x| Rc::clone(&nodes[*x].value)).collect();
                    for (i, &x) in xs.iter().enumerate() {
                        if let Some(gx) = acc!(x) {
                            let wi = wv.data()[i];
                            gx.iter_mut().zip(&g).for_each(|(o, y)| *o += wi * y);
                        }
                    }
                    if let Some(gw) = acc!(*w) {
                        for (i, xv) in xvals.iter().enumerate() {
                            gw[i] += xv.data().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = acc!(*a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
            }
        }
        Ok(Gradients {
            params: ParamGrads { entries: params },
            leaves,
        })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], target: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[target].needs_grad {
        return None;
    }
    let n = nodes[target].value.numel();
    Some(grads[target].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn swap12(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [d0, d1, d2, d3] = dims;
    let mut out = vec![0.0; x.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let src = ((a * d1 + b) * d2 + c) * d3;
                let dst = ((a * d2 + c) * d1 + b) * d3;
                out[dst..dst + d3].copy_from_slice(&x[src..src + d3]);
            }
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<'t> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn needs(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((a, b))
    }

    fn zip_with(&self, other: &Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, op)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            mk(self.id, other.id),
            self.needs() || other.needs(),
        ))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul)
    }

    /// Adds a `[d]` vector to every row of a `[.. x d]` tensor.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let d = x.last_dim();
        if b.numel() != d || b.shape().len() != 1 {
            return Err(Error::Shape {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            add_into(row, b.data());
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::AddRow(self.id, bias.id),
            self.needs() || bias.needs(),
        ))
    }

    pub fn scale(&self, f: f64) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|v| v * f).collect();
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::Scale(self.id, f),
            self.needs(),
        )
    }

    /// `[.. x q] . [q x r] -> [.. x r]`.
    pub fn matmul(&self, w: &Var<'t>) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let q = x.last_dim();
        if wv.shape().len() != 2 || wv.shape()[0] != q || x.shape().is_empty() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let r = wv.shape()[1];
        let rows = x.rows();
        let mut out = vec![0.0; rows * r];
        gemm(rows, q, r, x.data(), false, wv.data(), false, &mut out, false);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = r;
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::MatMul(self.id, w.id),
            self.needs() || w.needs(),
        ))
    }

    /// Batched product over all leading axes: `[.. x m x k] . [.. x k x n]`,
    /// or with `b_t` the right operand is stored `[.. x n x k]`.
    pub fn bmm(&self, b: &Var<'t>, b_t: bool) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), b.value());
        let (sa, sb) = (av.shape(), bv.shape());
        let bad = || Error::Shape {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if b_t { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if kb != k {
            return Err(bad());
        }
        let groups: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            gemm(
                m,
                k,
                n,
                &av.data()[g * m * k..(g + 1) * m * k],
                false,
                &bv.data()[g * k * n..(g + 1) * k * n],
                b_t,
                &mut out[g * m * n..(g + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Bmm {
                a: self.id,
                b: b.id,
                b_t,
                groups,
                m,
                k,
                n,
            },
            self.needs() || b.needs(),
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        self.tape
            .push(Tensor::from_parts(x.shape().to_vec(), data), Op::Relu(self.id), self.needs())
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|v| sigmoid(*v)).collect();
        self.tape
            .push(Tensor::from_parts(x.shape().to_vec(), data), Op::Sigmoid(self.id), self.needs())
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true; masked positions come out exactly zero. `mask` has the same
    /// shape as `self`.
    pub fn masked_softmax(&self, mask: &Mask) -> Result<Var<'t>> {
        let x = self.value();
        if mask.shape() != x.shape() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: x.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        self.masked_softmax_impl(mask, 1)
    }

    /// Masked softmax for attention logits `[b*h x n x k]` sharing one
    /// `[b x n x k]` mask across the `heads` groups of each batch element.
    pub fn masked_softmax_heads(&self, mask: &Mask, heads: usize) -> Result<Var<'t>> {
        let x = self.value();
        if heads == 0 || mask.data().len() * heads != x.numel() || mask.shape().last() != x.shape().last() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: x.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        self.masked_softmax_impl(mask, heads)
    }

    fn masked_softmax_impl(&self, mask: &Mask, heads: usize) -> Result<Var<'t>> {
        let x = self.value();
        let k = x.last_dim();
        let shape = x.shape();
        // rows per (batch, head) block
        let block = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let mut out = vec![0.0; x.numel()];
        for (row, (xr, yr)) in x.data().chunks(k).zip(out.chunks_mut(k)).enumerate() {
            let mrow = if heads == 1 {
                row
            } else {
                (row / (heads * block)) * block + row % block
            };
            let mr = &mask.data()[mrow * k..(mrow + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for (v, &m) in xr.iter().zip(mr) {
                if m && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY && mr.iter().any(|&m| m) {
                return Err(Error::NonFinite(format!("masked_softmax: row {row} has no finite score")));
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMasked {
                    op: "masked_softmax",
                    row,
                });
            }
            let mut sum = 0.0;
            for ((y, v), &m) in yr.iter_mut().zip(xr).zip(mr) {
                if m {
                    *y = (v - max).exp();
                    sum += *y;
                }
            }
            let inv = 1.0 / sum;
            yr.iter_mut().for_each(|y| *y *= inv);
        }
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::MaskedSoftmax(self.id),
            self.needs(),
        ))
    }

    /// Layer normalization over the last axis with the biased (divide by
    /// `d`) variance and `eps` inside the square root.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let d = x.last_dim();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat: Rc::new(xhat),
                rstd: Rc::new(rstd),
            },
            self.needs() || gain.needs() || bias.needs(),
        ))
    }

    /// Mean negative log-likelihood over rows with a target; rows with
    /// `None` (padding) are excluded. `smoothing` mixes the one-hot target
    /// with the uniform distribution.
    pub fn cross_entropy(&self, targets: &[Option<usize>], smoothing: f64) -> Result<Var<'t>> {
        let x = self.value();
        let v = x.last_dim();
        if x.rows() != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::invalid("loss over a batch with no target positions"));
        }
        let mut probs = vec![0.0; x.numel()];
        let mut total = 0.0;
        for ((row, p), t) in x.data().chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            let Some(t) = t else { continue };
            if *t >= v {
                return Err(Error::invalid(format!("target id {t} outside vocabulary of {v}")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for (pj, z) in p.iter_mut().zip(row) {
                *pj = (z - lse).exp();
            }
            let nll = lse - row[*t];
            total += if smoothing > 0.0 {
                let mean_nll = row.iter().map(|z| lse - z).sum::<f64>() / v as f64;
                (1.0 - smoothing) * nll + smoothing * mean_nll
            } else {
                nll
            };
        }
        Ok(self.tape.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits: self.id,
                targets: Rc::new(targets.to_vec()),
                probs: Rc::new(probs),
                smoothing,
                count,
            },
            self.needs(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let t = (*x).clone().reshape(shape.to_vec())?;
        Ok(self.tape.push(t, Op::Reshape(self.id), self.needs()))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "swap_axes12",
                lhs: s.to_vec(),
                rhs: vec![4],
            });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(x.data(), dims);
        Ok(self.tape.push(
            Tensor::from_parts(vec![s[0], s[2], s[1], s[3]], out),
            Op::SwapAxes12(self.id, dims),
            self.needs(),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let s = x.data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.needs())
    }

    /// Inverted dropout; identity on evaluation tapes or with `p == 0`.
    pub fn dropout(&self, p: f64) -> Var<'t> {
        let Some(rng) = &self.tape.dropout_rng else {
            return *self;
        };
        if p <= 0.0 {
            return *self;
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - p);
        let mut rng = rng.borrow_mut();
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::MulConst(self.id, Rc::new(mask)),
            self.needs(),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
