//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order, so [`Graph::backward`] is a
//! single reverse sweep.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Silu,
    Sigmoid,
    Softplus,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

enum Op<S> {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnKind,
        x: usize,
    },
    Scale {
        x: usize,
        c: S,
    },
    AddScalar {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    MaxAxis {
        x: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: usize,
    },
    LogSoftmax {
        x: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    IndexSelect {
        x: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Conv3d {
        x: usize,
        w: usize,
        spec: Conv3dSpec,
    },
    Scan {
        ins: [usize; 6],
        states: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    track_params: bool,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar> {
    g: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            track_params: true,
        }
    }

    /// A graph whose parameter leaves do not require gradients.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&self, t: Tensor<S>) -> Var<'_, S> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for inputs under test).
    pub fn input(&self, t: Tensor<S>) -> Var<'_, S> {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&self, v: S) -> Var<'_, S> {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse one node.
    pub fn param(&self, store: &ParamStore<S>, pid: ParamId) -> Var<'_, S> {
        if let Some(&id) = self.param_nodes.borrow().get(&pid) {
            return Var { g: self, id };
        }
        let v = self.push(store.get(pid).clone(), Op::Leaf, self.track_params);
        self.param_nodes.borrow_mut().insert(pid, v.id);
        v
    }

    pub fn concat(&self, parts: &[Var<'_, S>], axis: usize) -> Result<Var<'_, S>> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor<S>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Tensor::concat(&refs, axis)?
        };
        let rg = parts.iter().any(|p| self.rg(p.id));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), S::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else { continue };
            backprop_node(&nodes, node, g, lower);
        }
        Ok(Gradients {
            grads,
            param_nodes: self.param_nodes.borrow().clone(),
        })
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    param_nodes: HashMap<ParamId, usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, pid: ParamId) -> Option<&Tensor<S>> {
        self.param_nodes
            .get(&pid)
            .and_then(|&id| self.grads[id].as_ref())
    }

    /// One slot per stored parameter, `None` where a parameter was unused.
    pub fn for_store(&self, store: &ParamStore<S>) -> Vec<Option<Tensor<S>>> {
        store.ids().map(|pid| self.param(pid).cloned()).collect()
    }
}

fn buf<'a, S: Scalar>(
    lower: &'a mut [Option<Tensor<S>>],
    id: usize,
    shape: &[usize],
) -> &'a mut Tensor<S> {
    lower[id].get_or_insert_with(|| Tensor::zeros(shape))
}

fn backprop_node<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &Tensor<S>,
    lower: &mut [Option<Tensor<S>>],
) {
    let val = |id: usize| &nodes[id].value;
    let rg = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (ra, rb) = (rg(*a), rg(*b));
            let mut ga = ra.then(|| Tensor::zeros(av.shape()));
            let mut gb = rb.then(|| Tensor::zeros(bv.shape()));
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            broadcast_zip(node.value.shape(), av.shape(), bv.shape(), |i, ia, ib| {
                let gi = gd[i];
                let (da, db) = match kind {
                    BinKind::Add => (gi, gi),
                    BinKind::Sub => (gi, -gi),
                    BinKind::Mul => (gi * bd[ib], gi * ad[ia]),
                    BinKind::Div => (gi / bd[ib], -gi * ad[ia] / (bd[ib] * bd[ib])),
                };
                if let Some(t) = ga.as_mut() {
                    t.data_mut()[ia] += da;
                }
                if let Some(t) = gb.as_mut() {
                    t.data_mut()[ib] += db;
                }
            });
            if let Some(t) = ga {
                buf(lower, *a, av.shape()).add_assign(&t);
            }
            if let Some(t) = gb {
                buf(lower, *b, bv.shape()).add_assign(&t);
            }
        }
        Op::Unary { kind, x } => {
            let xv = val(*x);
            let y = node.value.data();
            let out = buf(lower, *x, xv.shape());
            let od = out.data_mut();
            for (i, (&xi, &gi)) in xv.data().iter().zip(g.data()).enumerate() {
                let d = match kind {
                    UnKind::Neg => -S::one(),
                    UnKind::Exp => y[i],
                    UnKind::Log => S::one() / xi,
                    UnKind::Sqrt => S::lit(0.5) / y[i],
                    UnKind::Square => S::lit(2.0) * xi,
                    UnKind::Silu => {
                        let s = sigmoid(xi);
                        s * (S::one() + xi * (S::one() - s))
                    }
                    UnKind::Sigmoid => y[i] * (S::one() - y[i]),
                    UnKind::Softplus => sigmoid(xi),
                    UnKind::Tanh => S::one() - y[i] * y[i],
                    UnKind::Relu => {
                        if xi > S::zero() {
                            S::one()
                        } else {
                            S::zero()
                        }
                    }
                };
                od[i] += gi * d;
            }
        }
        Op::Scale { x, c } => {
            let out = buf(lower, *x, val(*x).shape());
            for (o, &gi) in out.data_mut().iter_mut().zip(g.data()) {
                *o += gi * *c;
            }
        }
        Op::AddScalar { x } => {
            buf(lower, *x, val(*x).shape()).add_assign(g);
        }
        Op::MatMul { a, b } => matmul_backward(val(*a), val(*b), g, *a, *b, rg(*a), rg(*b), lower),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            buf(lower, *x, val(*x).shape()).add_assign(&g.permute(&inv));
        }
        Op::Reshape { x } => {
            let shape = val(*x).shape().to_vec();
            let out = buf(lower, *x, &shape);
            for (o, &gi) in out.data_mut().iter_mut().zip(g.data()) {
                *o += gi;
            }
        }
        Op::SumAxis { x, axis } => {
            let xs = val(*x).shape().to_vec();
            let (outer, d, inner) = split3(&xs, *axis);
            let out = buf(lower, *x, &xs);
            let od = out.data_mut();
            let gd = g.data();
            for o in 0..outer {
                for k in 0..d {
                    for i in 0..inner {
                        od[(o * d + k) * inner + i] += gd[o * inner + i];
                    }
                }
            }
        }
        Op::MaxAxis { x, axis, argmax } => {
            let xs = val(*x).shape().to_vec();
            let (_, d, inner) = split3(&xs, *axis);
            let out = buf(lower, *x, &xs);
            let od = out.data_mut();
            for (j, (&gi, &k)) in g.data().iter().zip(argmax).enumerate() {
                let (o, i) = (j / inner, j % inner);
                od[(o * d + k) * inner + i] += gi;
            }
        }
        Op::Softmax { x } => {
            let y = &node.value;
            let c = *y.shape().last().unwrap();
            let out = buf(lower, *x, y.shape());
            for ((orow, yrow), grow) in out
                .data_mut()
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(g.data().chunks(c))
            {
                let dot: S = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    orow[j] += yrow[j] * (grow[j] - dot);
                }
            }
        }
        Op::LogSoftmax { x } => {
            let y = &node.value;
            let c = *y.shape().last().unwrap();
            let out = buf(lower, *x, y.shape());
            for ((orow, yrow), grow) in out
                .data_mut()
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(g.data().chunks(c))
            {
                let gs: S = grow.iter().copied().sum();
                for j in 0..c {
                    orow[j] += grow[j] - yrow[j].exp() * gs;
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape().to_vec();
            let (outer, d, inner) = split3(&xs, *axis);
            let len = g.shape()[*axis];
            let out = buf(lower, *x, &xs);
            let od = out.data_mut();
            let gd = g.data();
            for o in 0..outer {
                let dst = (o * d + start) * inner;
                let src = o * len * inner;
                for i in 0..len * inner {
                    od[dst + i] += gd[src + i];
                }
            }
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for &p in parts {
                let ps = val(p).shape().to_vec();
                let len = ps[*axis];
                if rg(p) {
                    let slab = g.narrow(*axis, start, len).expect("concat slab");
                    buf(lower, p, &ps).add_assign(&slab);
                }
                start += len;
            }
        }
        Op::IndexSelect { x, axis, indices } => {
            let xs = val(*x).shape().to_vec();
            let (outer, d, inner) = split3(&xs, *axis);
            let k = indices.len();
            let out = buf(lower, *x, &xs);
            let od = out.data_mut();
            let gd = g.data();
            for o in 0..outer {
                for (j, &src) in indices.iter().enumerate() {
                    let gbase = (o * k + j) * inner;
                    let xbase = (o * d + src) * inner;
                    for i in 0..inner {
                        od[xbase + i] += gd[gbase + i];
                    }
                }
            }
        }
        Op::Conv3d { x, w, spec } => {
            conv3d_backward(val(*x), val(*w), g, *spec, *x, *w, rg(*x), rg(*w), lower)
        }
        Op::Scan { ins, states } => {
            let vals: Vec<&Tensor<S>> = ins.iter().map(|&i| val(i)).collect();
            let grads = scan_backward(&vals, states, g);
            for (k, gk) in grads.into_iter().enumerate() {
                if rg(ins[k]) {
                    buf(lower, ins[k], vals[k].shape()).add_assign(&gk);
                }
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

fn aligned_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast.
fn broadcast_zip(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    if n == 0 {
        return;
    }
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        for k in 0..last {
            f(i + k, oa + k * la, ob + k * lb);
        }
        i += last;
        // advance the odometer over the outer axes
        let mut ax = r - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn matmul_dims(
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, usize, usize, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank >= 2: {a:?} @ {b:?}"
        )));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dims: {a:?} @ {b:?}")));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch_shape = if ab == bb || bb.is_empty() {
        ab.to_vec()
    } else if ab.is_empty() {
        bb.to_vec()
    } else {
        return Err(Error::Shape(format!("matmul batch dims: {a:?} @ {b:?}")));
    };
    Ok((batch_shape, numel(ab), numel(bb), m, k, n))
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<S: Scalar>(
    av: &Tensor<S>,
    bv: &Tensor<S>,
    g: &Tensor<S>,
    a: usize,
    b: usize,
    ra: bool,
    rb: bool,
    lower: &mut [Option<Tensor<S>>],
) {
    let (batch_shape, na, nb, m, k, n) =
        matmul_dims(av.shape(), bv.shape()).expect("validated in forward");
    let batches = numel(&batch_shape);
    if ra {
        let ga = buf(lower, a, av.shape());
        for bi in 0..batches {
            let ia = if na == 1 { 0 } else { bi };
            let ib = if nb == 1 { 0 } else { bi };
            // ga[m,k] += g[m,n] @ b[k,n]^T
            S::gemm(
                m,
                n,
                k,
                S::one(),
                &g.data()[bi * m * n..],
                n as isize,
                1,
                &bv.data()[ib * k * n..],
                1,
                n as isize,
                S::one(),
                &mut ga.data_mut()[ia * m * k..],
                k as isize,
                1,
            );
        }
    }
    if rb {
        let gb = buf(lower, b, bv.shape());
        for bi in 0..batches {
            let ia = if na == 1 { 0 } else { bi };
            let ib = if nb == 1 { 0 } else { bi };
            // gb[k,n] += a[m,k]^T @ g[m,n]
            S::gemm(
                k,
                m,
                n,
                S::one(),
                &av.data()[ia * m * k..],
                1,
                k as isize,
                &g.data()[bi * m * n..],
                n as isize,
                1,
                S::one(),
                &mut gb.data_mut()[ib * k * n..],
                n as isize,
                1,
            );
        }
    }
}

struct ConvGeom {
    n: usize,
    ci: usize,
    din: [usize; 3],
    co: usize,
    k: [usize; 3],
    dout: [usize; 3],
    spec: Conv3dSpec,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 || x[1] != w[1] {
            return Err(Error::Shape(format!(
                "conv3d input {x:?} with kernel {w:?}"
            )));
        }
        let mut dout = [0; 3];
        for i in 0..3 {
            let padded = x[2 + i] + 2 * spec.pad[i];
            if padded < w[2 + i] || spec.stride[i] == 0 {
                return Err(Error::Shape(format!(
                    "conv3d kernel {w:?} larger than padded input {x:?}"
                )));
            }
            dout[i] = (padded - w[2 + i]) / spec.stride[i] + 1;
        }
        Ok(Self {
            n: x[0],
            ci: x[1],
            din: [x[2], x[3], x[4]],
            co: w[0],
            k: [w[2], w[3], w[4]],
            dout,
            spec,
        })
    }

    fn kdim(&self) -> usize {
        self.ci * self.k[0] * self.k[1] * self.k[2]
    }

    fn positions(&self) -> usize {
        self.dout[0] * self.dout[1] * self.dout[2]
    }

    fn in_size(&self) -> usize {
        self.ci * self.din[0] * self.din[1] * self.din[2]
    }

    /// Visits (column row, output position, input offset) for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kd, kh, kw] = self.k;
        let [od, oh, ow] = self.dout;
        let [id, ih, iw] = self.din;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.pad;
        let mut r = 0;
        for c in 0..self.ci {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let mut p = 0;
                        for z in 0..od {
                            let zi = (z * sd + a) as isize - pd as isize;
                            for y in 0..oh {
                                let yi = (y * sh + b) as isize - ph as isize;
                                for x in 0..ow {
                                    let xi = (x * sw + e) as isize - pw as isize;
                                    if zi >= 0
                                        && (zi as usize) < id
                                        && yi >= 0
                                        && (yi as usize) < ih
                                        && xi >= 0
                                        && (xi as usize) < iw
                                    {
                                        let off = ((c * id + zi as usize) * ih + yi as usize) * iw
                                            + xi as usize;
                                        f(r, p, off);
                                    }
                                    p += 1;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let p = self.positions();
        cols.iter_mut().for_each(|v| *v = S::zero());
        self.for_each_tap(|r, q, off| cols[r * p + q] = x[off]);
    }

    fn col2im<S: Scalar>(&self, cols: &[S], gx: &mut [S]) {
        let p = self.positions();
        self.for_each_tap(|r, q, off| gx[off] += cols[r * p + q]);
    }
}

fn conv3d_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, spec: Conv3dSpec) -> Result<Tensor<S>> {
    let geo = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let (kd, p) = (geo.kdim(), geo.positions());
    let mut out = Tensor::zeros(&[geo.n, geo.co, geo.dout[0], geo.dout[1], geo.dout[2]]);
    let mut cols = vec![S::zero(); kd * p];
    for s in 0..geo.n {
        geo.im2col(
            &x.data()[s * geo.in_size()..(s + 1) * geo.in_size()],
            &mut cols,
        );
        S::gemm(
            geo.co,
            kd,
            p,
            S::one(),
            w.data(),
            kd as isize,
            1,
            &cols,
            p as isize,
            1,
            S::zero(),
            &mut out.data_mut()[s * geo.co * p..],
            p as isize,
            1,
        );
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward<S: Scalar>(
    xv: &Tensor<S>,
    wv: &Tensor<S>,
    g: &Tensor<S>,
    spec: Conv3dSpec,
    x: usize,
    w: usize,
    rx: bool,
    rw: bool,
    lower: &mut [Option<Tensor<S>>],
) {
    let geo = ConvGeom::new(xv.shape(), wv.shape(), spec).expect("validated in forward");
    let (kd, p) = (geo.kdim(), geo.positions());
    let mut cols = vec![S::zero(); kd * p];
    let mut gw = rw.then(|| Tensor::zeros(wv.shape()));
    let mut gx = rx.then(|| Tensor::zeros(xv.shape()));
    let mut gcols = vec![S::zero(); kd * p];
    for s in 0..geo.n {
        let gs = &g.data()[s * geo.co * p..(s + 1) * geo.co * p];
        if let Some(gw) = gw.as_mut() {
            geo.im2col(
                &xv.data()[s * geo.in_size()..(s + 1) * geo.in_size()],
                &mut cols,
            );
            // gw[co,kd] += g[co,p] @ cols[kd,p]^T
            S::gemm(
                geo.co,
                p,
                kd,
                S::one(),
                gs,
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                S::one(),
                gw.data_mut(),
                kd as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            // gcols[kd,p] = w[co,kd]^T @ g[co,p]
            S::gemm(
                kd,
                geo.co,
                p,
                S::one(),
                wv.data(),
                1,
                kd as isize,
                gs,
                p as isize,
                1,
                S::zero(),
                &mut gcols,
                p as isize,
                1,
            );
            geo.col2im(
                &gcols,
                &mut gx.data_mut()[s * geo.in_size()..(s + 1) * geo.in_size()],
            );
        }
    }
    if let Some(t) = gw {
        buf(lower, w, wv.shape()).add_assign(&t);
    }
    if let Some(t) = gx {
        buf(lower, x, xv.shape()).add_assign(&t);
    }
}

/// Shapes: u, delta `[N, L, D]`; a `[D, S]`; b, c `[N, L, S]`; d `[D]`.
struct ScanDims {
    n: usize,
    l: usize,
    d: usize,
    s: usize,
}

fn scan_dims<S: Scalar>(t: [&Tensor<S>; 6]) -> Result<ScanDims> {
    let [u, delta, a, b, c, d] = t;
    let us = u.shape();
    if us.len() != 3 {
        return Err(Error::Shape(format!(
            "scan input must be [N, L, D], got {us:?}"
        )));
    }
    let (n, l, dm) = (us[0], us[1], us[2]);
    let s = a.shape().get(1).copied().unwrap_or(0);
    let ok = delta.shape() == us
        && a.shape() == [dm, s]
        && b.shape() == [n, l, s]
        && c.shape() == [n, l, s]
        && d.shape() == [dm];
    if !ok {
        return Err(Error::Shape(format!(
            "scan shapes u{:?} delta{:?} a{:?} b{:?} c{:?} d{:?}",
            us,
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    Ok(ScanDims { n, l, d: dm, s })
}

/// Returns (y, all hidden states `[N, L, D, S]`).
fn scan_forward<S: Scalar>(t: [&Tensor<S>; 6]) -> Result<(Tensor<S>, Vec<S>)> {
    let dims = scan_dims(t)?;
    let [u, delta, a, b, c, d] = t.map(|x| x.data());
    let ScanDims { n, l, d: dm, s: ns } = dims;
    let mut y = vec![S::zero(); n * l * dm];
    let mut hs = vec![S::zero(); n * l * dm * ns];
    for bi in 0..n {
        for li in 0..l {
            let row = (bi * l + li) * dm;
            let bc = (bi * l + li) * ns;
            for di in 0..dm {
                let dt = delta[row + di];
                let ui = u[row + di];
                let mut acc = d[di] * ui;
                let hb = (row + di) * ns;
                for si in 0..ns {
                    let prev = if li == 0 {
                        S::zero()
                    } else {
                        hs[hb - dm * ns + si]
                    };
                    let h = (dt * a[di * ns + si]).exp() * prev + dt * b[bc + si] * ui;
                    hs[hb + si] = h;
                    acc += c[bc + si] * h;
                }
                y[row + di] = acc;
            }
        }
    }
    Ok((Tensor::from_vec(u_shape(&dims).as_slice(), y)?, hs))
}

fn u_shape(d: &ScanDims) -> Vec<usize> {
    vec![d.n, d.l, d.d]
}

fn scan_backward<S: Scalar>(vals: &[&Tensor<S>], hs: &[S], g: &Tensor<S>) -> Vec<Tensor<S>> {
    let t = [vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]];
    let dims = scan_dims(t).expect("validated in forward");
    let ScanDims { n, l, d: dm, s: ns } = dims;
    let [u, delta, a, b, c, d] = t.map(|x| x.data());
    let gy = g.data();
    let mut gu = vec![S::zero(); u.len()];
    let mut gdelta = vec![S::zero(); delta.len()];
    let mut ga = vec![S::zero(); a.len()];
    let mut gb = vec![S::zero(); b.len()];
    let mut gc = vec![S::zero(); c.len()];
    let mut gd = vec![S::zero(); d.len()];
    let mut carry = vec![S::zero(); dm * ns];
    for bi in 0..n {
        carry.iter_mut().for_each(|v| *v = S::zero());
        for li in (0..l).rev() {
            let row = (bi * l + li) * dm;
            let bc = (bi * l + li) * ns;
            for di in 0..dm {
                let gyi = gy[row + di];
                let dt = delta[row + di];
                let ui = u[row + di];
                gd[di] += gyi * ui;
                gu[row + di] += gyi * d[di];
                let hb = (row + di) * ns;
                for si in 0..ns {
                    let h = hs[hb + si];
                    let prev = if li == 0 {
                        S::zero()
                    } else {
                        hs[hb - dm * ns + si]
                    };
                    gc[bc + si] += gyi * h;
                    let gh = gyi * c[bc + si] + carry[di * ns + si];
                    let av = a[di * ns + si];
                    let da = (dt * av).exp();
                    let gda = gh * prev * da;
                    gdelta[row + di] += gda * av + gh * b[bc + si] * ui;
                    ga[di * ns + si] += gda * dt;
                    gb[bc + si] += gh * dt * ui;
                    gu[row + di] += gh * dt * b[bc + si];
                    carry[di * ns + si] = gh * da;
                }
            }
        }
    }
    [gu, gdelta, ga, gb, gc, gd]
        .into_iter()
        .zip(t)
        .map(|(v, src)| Tensor::from_vec(src.shape(), v).expect("grad shape"))
        .collect()
}

/// Selective scan `h_l = exp(delta_l * a) h_{l-1} + delta_l b_l u_l`, `y_l = c_l . h_l + d u_l`.
pub fn selective_scan_values<S: Scalar>(
    u: &Tensor<S>,
    delta: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    c: &Tensor<S>,
    d: &Tensor<S>,
) -> Result<Tensor<S>> {
    scan_forward([u, delta, a, b, c, d]).map(|(y, _)| y)
}

pub fn conv3d_values<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    spec: Conv3dSpec,
) -> Result<Tensor<S>> {
    conv3d_forward(x, w, spec)
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.g
    }

    pub fn value(&self) -> Ref<'g, Tensor<S>> {
        Ref::map(self.g.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.rg(self.id)
    }

    fn unary(self, kind: UnKind, f: impl Fn(S) -> S) -> Self {
        let v = self.value().map(f);
        self.g
            .push(v, Op::Unary { kind, x: self.id }, self.requires_grad())
    }

    fn binary(self, other: Self, kind: BinKind) -> Result<Self> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let mut out = vec![S::zero(); numel(&shape)];
            let (ad, bd) = (a.data(), b.data());
            broadcast_zip(&shape, a.shape(), b.shape(), |i, ia, ib| {
                out[i] = match kind {
                    BinKind::Add => ad[ia] + bd[ib],
                    BinKind::Sub => ad[ia] - bd[ib],
                    BinKind::Mul => ad[ia] * bd[ib],
                    BinKind::Div => ad[ia] / bd[ib],
                };
            });
            Tensor::from_vec(&shape, out)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.g.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(self, other: Self) -> Result<Self> {
        self.binary(other, BinKind::Div)
    }

    pub fn neg(self) -> Self {
        self.unary(UnKind::Neg, |x| -x)
    }

    pub fn exp(self) -> Self {
        self.unary(UnKind::Exp, |x| x.exp())
    }

    pub fn ln(self) -> Self {
        self.unary(UnKind::Log, |x| x.ln())
    }

    pub fn sqrt(self) -> Self {
        self.unary(UnKind::Sqrt, |x| x.sqrt())
    }

    pub fn square(self) -> Self {
        self.unary(UnKind::Square, |x| x * x)
    }

    pub fn silu(self) -> Self {
        self.unary(UnKind::Silu, |x| x * sigmoid(x))
    }

    pub fn sigmoid(self) -> Self {
        self.unary(UnKind::Sigmoid, sigmoid)
    }

    pub fn softplus(self) -> Self {
        self.unary(UnKind::Softplus, softplus)
    }

    pub fn tanh(self) -> Self {
        self.unary(UnKind::Tanh, |x| x.tanh())
    }

    pub fn relu(self) -> Self {
        self.unary(UnKind::Relu, |x| x.max(S::zero()))
    }

    pub fn scale(self, c: S) -> Self {
        let v = self.value().scale(c);
        self.g
            .push(v, Op::Scale { x: self.id, c }, self.requires_grad())
    }

    pub fn add_scalar(self, c: S) -> Self {
        let v = self.value().map(|x| x + c);
        self.g
            .push(v, Op::AddScalar { x: self.id }, self.requires_grad())
    }

    /// Value copy cut off from the gradient.
    pub fn detach(self) -> Self {
        let v = self.value().clone();
        self.g.constant(v)
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(self, other: Self) -> Result<Self> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (batch_shape, na, nb, m, k, n) = matmul_dims(a.shape(), b.shape())?;
            let batches = numel(&batch_shape);
            let mut out = vec![S::zero(); batches * m * n];
            for bi in 0..batches {
                let ia = if na == 1 { 0 } else { bi };
                let ib = if nb == 1 { 0 } else { bi };
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    &a.data()[ia * m * k..],
                    k as isize,
                    1,
                    &b.data()[ib * k * n..],
                    n as isize,
                    1,
                    S::zero(),
                    &mut out[bi * m * n..],
                    n as isize,
                    1,
                );
            }
            let mut shape = batch_shape;
            shape.extend([m, n]);
            Tensor::from_vec(&shape, out)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.g.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let rank = self.value().rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "bad permutation {perm:?} for rank {rank}"
            )));
        }
        let v = self.value().permute(perm);
        Ok(self.g.push(
            v,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Swap the last two axes.
    pub fn t(self) -> Result<Self> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::Shape("transpose of rank < 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        Ok(self
            .g
            .push(v, Op::Reshape { x: self.id }, self.requires_grad()))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Self> {
        let value = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(Error::Shape(format!("sum axis {axis} of {:?}", x.shape())));
            }
            let (outer, d, inner) = split3(x.shape(), axis);
            let mut out = vec![S::zero(); outer * inner];
            let xd = x.data();
            for o in 0..outer {
                for k in 0..d {
                    let base = (o * d + k) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += xd[base + i];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            if keepdim {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            Tensor::from_vec(&shape, out)?
        };
        Ok(self.g.push(
            value,
            Op::SumAxis { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Self> {
        let d = self.value().shape().get(axis).copied().unwrap_or(1);
        Ok(self
            .sum_axis(axis, keepdim)?
            .scale(S::one() / S::lit(d as f64)))
    }

    pub fn sum_all(self) -> Result<Self> {
        let n = self.value().numel();
        self.reshape(&[n])?.sum_axis(0, false)
    }

    pub fn mean_all(self) -> Result<Self> {
        let n = self.value().numel();
        Ok(self.sum_all()?.scale(S::one() / S::lit(n.max(1) as f64)))
    }

    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Self> {
        let (value, argmax) = {
            let x = self.value();
            if axis >= x.rank() || x.shape()[axis] == 0 {
                return Err(Error::Shape(format!("max axis {axis} of {:?}", x.shape())));
            }
            let (outer, d, inner) = split3(x.shape(), axis);
            let xd = x.data();
            let mut out = Vec::with_capacity(outer * inner);
            let mut arg = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for k in 1..d {
                        if xd[(o * d + k) * inner + i] > xd[(o * d + best) * inner + i] {
                            best = k;
                        }
                    }
                    out.push(xd[(o * d + best) * inner + i]);
                    arg.push(best);
                }
            }
            let mut shape = x.shape().to_vec();
            if keepdim {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            (Tensor::from_vec(&shape, out)?, arg)
        };
        Ok(self.g.push(
            value,
            Op::MaxAxis {
                x: self.id,
                axis,
                argmax,
            },
            self.requires_grad(),
        ))
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(self) -> Result<Self> {
        let value = {
            let x = self.value();
            let c = *x
                .shape()
                .last()
                .ok_or_else(|| Error::Shape("softmax of rank-0".into()))?;
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c.max(1)) {
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::from_vec(x.shape(), out)?
        };
        Ok(self
            .g
            .push(value, Op::Softmax { x: self.id }, self.requires_grad()))
    }

    pub fn log_softmax(self) -> Result<Self> {
        let value = {
            let x = self.value();
            let c = *x
                .shape()
                .last()
                .ok_or_else(|| Error::Shape("log_softmax of rank-0".into()))?;
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c.max(1)) {
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::from_vec(x.shape(), out)?
        };
        Ok(self
            .g
            .push(value, Op::LogSoftmax { x: self.id }, self.requires_grad()))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.g.push(
            v,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Gather slabs along `axis`; indices may repeat or be omitted.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Self> {
        let value = {
            let x = self.value();
            if axis >= x.rank() || indices.iter().any(|&i| i >= x.shape()[axis]) {
                return Err(Error::Shape(format!(
                    "index_select axis {axis} of {:?}",
                    x.shape()
                )));
            }
            let (outer, d, inner) = split3(x.shape(), axis);
            let xd = x.data();
            let mut out = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &src in indices {
                    let base = (o * d + src) * inner;
                    out.extend_from_slice(&xd[base..base + inner]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = indices.len();
            Tensor::from_vec(&shape, out)?
        };
        Ok(self.g.push(
            value,
            Op::IndexSelect {
                x: self.id,
                axis,
                indices: indices.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// `[N, Ci, D, H, W]` correlated with `[Co, Ci, kd, kh, kw]`, zero padding.
    pub fn conv3d(self, w: Self, spec: Conv3dSpec) -> Result<Self> {
        let v = conv3d_forward(&self.value(), &w.value(), spec)?;
        let rg = self.requires_grad() || w.requires_grad();
        Ok(self.g.push(
            v,
            Op::Conv3d {
                x: self.id,
                w: w.id,
                spec,
            },
            rg,
        ))
    }

    /// `[N, Ci, H, W]` correlated with `[Co, Ci, kh, kw]`.
    pub fn conv2d(self, w: Self, stride: usize, pad: usize) -> Result<Self> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d input {xs:?} with kernel {ws:?}"
            )));
        }
        let x5 = self.reshape(&[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = w.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = x5.conv3d(
            w5,
            Conv3dSpec {
                stride: [1, stride, stride],
                pad: [0, pad, pad],
            },
        )?;
        let ys = y.shape();
        y.reshape(&[ys[0], ys[1], ys[3], ys[4]])
    }

    /// Nearest-neighbour resize of the two trailing spatial axes.
    pub fn upsample_nearest(self, out_h: usize, out_w: usize) -> Result<Self> {
        let xs = self.shape();
        let r = xs.len();
        if r < 2 {
            return Err(Error::Shape("upsample of rank < 2".into()));
        }
        let (h, w) = (xs[r - 2], xs[r - 1]);
        let mut idx = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = (y * h) / out_h;
            for x in 0..out_w {
                idx.push(sy * w + (x * w) / out_w);
            }
        }
        let mut flat = xs[..r - 2].to_vec();
        flat.push(h * w);
        let mut out_shape = xs[..r - 2].to_vec();
        out_shape.extend([out_h, out_w]);
        self.reshape(&flat)?
            .index_select(r - 2, &idx)?
            .reshape(&out_shape)
    }

    /// Differentiable selective scan; see [`selective_scan_values`].
    pub fn selective_scan(self, delta: Self, a: Self, b: Self, c: Self, d: Self) -> Result<Self> {
        let ins = [self, delta, a, b, c, d];
        let (y, states) = {
            let vals: Vec<Ref<'_, Tensor<S>>> = ins.iter().map(|v| v.value()).collect();
            scan_forward([
                &*vals[0], &*vals[1], &*vals[2], &*vals[3], &*vals[4], &*vals[5],
            ])?
        };
        let rg = ins.iter().any(|v| v.requires_grad());
        Ok(self.g.push(
            y,
            Op::Scan {
                ins: ins.map(|v| v.id),
                states,
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(f(x) * probe))/dx against backward.
    fn check_grad(shape: &[usize], f: impl Fn(Var<'_, f64>) -> Var<'_, f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let probe_shape = {
            let g = Graph::new();
            f(g.constant(x0.clone())).shape()
        };
        let probe = Tensor::<f64>::randn(&probe_shape, 1.0, &mut rng);
        let eval = |x: &Tensor<f64>| {
            let g = Graph::new();
            let y = f(g.constant(x.clone()));
            let out = y
                .mul(g.constant(probe.clone()))
                .unwrap()
                .sum_all()
                .unwrap()
                .value()
                .item();
            out
        };
        let g = Graph::new();
        let xv = g.input(x0.clone());
        let loss = f(xv)
            .mul(g.constant(probe.clone()))
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.wrt(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let num = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (num - an).abs() / (1e-8 + num.abs().max(an.abs()));
            assert!(
                err < 1e-5 || (num - an).abs() < 1e-8,
                "elem {i}: numeric {num} analytic {an}"
            );
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn grad_unary_ops() {
        check_grad(&[3, 4], |x| x.silu());
        check_grad(&[3, 4], |x| x.softplus());
        check_grad(&[3, 4], |x| x.tanh().sigmoid());
        check_grad(&[3, 4], |x| x.square().add_scalar(1.0).ln().sqrt());
        check_grad(&[3, 4], |x| x.exp().neg().scale(0.3));
    }

    #[test]
    fn grad_broadcast_binary() {
        check_grad(&[2, 3, 4], |x| {
            let g = x.graph();
            let b = g.constant(Tensor::from_f64(&[3, 1], &[0.5, -1.0, 2.0]).unwrap());
            x.mul(b).unwrap().add(x).unwrap()
        });
        check_grad(&[3, 1], |x| {
            let g = x.graph();
            let b = g.constant(
                Tensor::from_f64(
                    &[2, 3, 4],
                    &(0..24).map(|i| 1.0 + i as f64).collect::<Vec<_>>(),
                )
                .unwrap(),
            );
            b.div(x.square().add_scalar(1.0)).unwrap().sub(x).unwrap()
        });
    }

    #[test]
    fn grad_matmul_batched_and_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        check_grad(&[2, 3, 4], move |x| {
            let g = x.graph();
            x.matmul(g.constant(w.clone())).unwrap()
        });
        check_grad(&[2, 3, 4], |x| x.matmul(x.t().unwrap()).unwrap());
    }

    #[test]
    fn grad_reductions_and_softmax() {
        check_grad(&[2, 3, 4], |x| x.sum_axis(1, true).unwrap());
        check_grad(&[2, 3, 4], |x| x.max_axis(2, false).unwrap());
        check_grad(&[2, 3, 4], |x| x.softmax().unwrap());
        check_grad(&[2, 3, 4], |x| x.log_softmax().unwrap());
        check_grad(&[2, 3, 4], |x| {
            x.permute(&[2, 0, 1]).unwrap().mean_axis(0, false).unwrap()
        });
    }

    #[test]
    fn grad_slicing() {
        check_grad(&[2, 5, 3], |x| {
            let a = x.narrow(1, 0, 2).unwrap();
            let b = x.narrow(1, 2, 3).unwrap();
            x.graph().concat(&[b, a.square()], 1).unwrap()
        });
        check_grad(&[2, 4, 3], |x| x.index_select(1, &[3, 0, 0, 2]).unwrap());
        check_grad(&[1, 2, 3, 3], |x| x.upsample_nearest(5, 4).unwrap());
    }

    #[test]
    fn grad_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::<f64>::randn(&[2, 3, 3, 2, 3], 1.0, &mut rng);
        check_grad(&[2, 3, 5, 4, 4], move |x| {
            let spec = Conv3dSpec {
                stride: [2, 1, 2],
                pad: [1, 1, 0],
            };
            x.conv3d(x.graph().constant(w.clone()), spec).unwrap()
        });
        let x = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        check_grad(&[4, 3, 3, 3], move |w| {
            let g = w.graph();
            g.constant(x.clone()).conv2d(w, 2, 1).unwrap()
        });
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let g = Graph::new();
        let y = g
            .constant(x.clone())
            .conv2d(g.constant(w.clone()), 1, 1)
            .unwrap();
        let y = y.value().clone();
        for co in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for a in 0..3 {
                            for b in 0..3 {
                                let (yi, xj) =
                                    (i as isize + a as isize - 1, j as isize + b as isize - 1);
                                if (0..4).contains(&yi) && (0..4).contains(&xj) {
                                    acc += w.at(&[co, ci, a, b])
                                        * x.at(&[0, ci, yi as usize, xj as usize]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[0, co, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_selective_scan_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, l, d, s) = (2, 5, 3, 2);
        let u = Tensor::<f64>::randn(&[n, l, d], 1.0, &mut rng);
        let delta = Tensor::<f64>::uniform(&[n, l, d], 0.1, 0.9, &mut rng);
        let a = Tensor::<f64>::uniform(&[d, s], -1.5, -0.2, &mut rng);
        let b = Tensor::<f64>::randn(&[n, l, s], 1.0, &mut rng);
        let c = Tensor::<f64>::randn(&[n, l, s], 1.0, &mut rng);
        let dd = Tensor::<f64>::randn(&[d], 1.0, &mut rng);
        let all = [u, delta, a, b, c, dd];
        for k in 0..6 {
            let all = all.clone();
            let shape = all[k].shape().to_vec();
            check_grad(&shape, move |x| {
                let g = x.graph();
                let vs: Vec<Var<'_, f64>> = (0..6)
                    .map(|j| {
                        if j == k {
                            x
                        } else {
                            g.constant(all[j].clone())
                        }
                    })
                    .collect();
                vs[0]
                    .selective_scan(vs[1], vs[2], vs[3], vs[4], vs[5])
                    .unwrap()
            });
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
