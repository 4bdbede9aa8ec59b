use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, Conv2dGeom};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Records a forward computation so it can be differentiated once.
///
/// Nodes are appended in execution order, so every input precedes the node
/// that consumes it. A tape supports exactly one [`Tape::backward`] call.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    spent: bool,
    first_non_finite: Option<(usize, &'static str)>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf(Option<ParamId>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, b: usize, axis: usize },
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, tb: bool },
    Repeat { x: usize, times: usize },
    Transpose(usize),
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Relu(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sum(usize),
    MeanAxis { x: usize, axis: usize },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    CosSim { a: usize, b: usize },
    Conv1d { x: usize, k: usize, pad: usize, cols: Vec<f64> },
    Conv2d { x: usize, k: usize, geom: Conv2dGeom, cols: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Repeat { .. } => "repeat",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Softmax(..) => "softmax_rows",
            Op::LogSoftmax(..) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::CosSim { .. } => "cosine_similarity",
            Op::Conv1d { .. } => "conv1d_temporal",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that gradients do not flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf(None), false)
    }

    /// A free input that receives no parameter gradient but is still
    /// differentiated through (used by finite-difference checks on raw inputs).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf(None), true)
    }

    /// Binds a trainable parameter. Repeated binds of the same id on one tape
    /// return the same node, so shared weights accumulate gradient correctly.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.inner.borrow().params.get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf(Some(id)), true);
        self.inner.borrow_mut().params.insert(id, v.id);
        v
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.first_non_finite.is_none() && !value.is_finite() {
            inner.first_non_finite = Some((id, op.name()));
        }
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Fails with the first op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.inner.borrow().first_non_finite {
            Some((id, name)) => Err(Error::NonFinite(format!("node #{id} ({name})"))),
            None => Ok(()),
        }
    }

    /// Reverse-mode pass from a scalar `loss`. Parameters that the loss does
    /// not reach get zero gradients.
    pub fn backward(&self, loss: Var<'_>, store: &ParamStore) -> Result<Gradients> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.spent {
                return Err(contract_err!("backward called twice on the same tape"));
            }
            inner.spent = true;
        }
        self.check_finite()?;
        let inner = self.inner.borrow();
        let loss_value = &inner.nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(inner.nodes.len());
        grads.resize_with(inner.nodes.len(), || None);
        grads[loss.id] = Some(vec![1.0]);

        let mut out = Gradients::zeros_like(store);
        for i in (0..=loss.id).rev() {
            let node = &inner.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf(Some(pid)) = node.op {
                out.set(pid, g);
                continue;
            }
            backprop(&inner.nodes, i, &g, &mut grads);
        }
        Ok(out)
    }

    /// Gradients with respect to arbitrary nodes (typically `input`s).
    /// Consumes the tape the same way [`Tape::backward`] does.
    pub fn backward_inputs(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.spent {
                return Err(contract_err!("backward called twice on the same tape"));
            }
            inner.spent = true;
        }
        self.check_finite()?;
        let inner = self.inner.borrow();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(contract_err!("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(inner.nodes.len());
        grads.resize_with(inner.nodes.len(), || None);
        grads[loss.id] = Some(vec![1.0]);
        let wanted: HashMap<usize, ()> = wrt.iter().map(|v| (v.id, ())).collect();
        let mut kept: HashMap<usize, Vec<f64>> = HashMap::new();
        for i in (0..=loss.id).rev() {
            let node = &inner.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if wanted.contains_key(&i) {
                kept.insert(i, g.clone());
            }
            if !matches!(node.op, Op::Leaf(_)) {
                backprop(&inner.nodes, i, &g, &mut grads);
            }
        }
        Ok(wrt
            .iter()
            .map(|v| {
                let shape = inner.nodes[v.id].value.shape().to_vec();
                match kept.remove(&v.id) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }
}

impl Gradients {
    fn set(&mut self, id: ParamId, g: Vec<f64>) {
        let t = self.get(id);
        let shape = t.shape().to_vec();
        self.replace(id, Tensor::from_parts(shape, g));
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let y = &node.value;
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf(_) => {}
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(d) = acc(grads, nodes, id) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(d) = acc(grads, nodes, *a) {
                for k in 0..d.len() {
                    d[k] += g[k] * vb[k];
                }
            }
            if let Some(d) = acc(grads, nodes, *b) {
                for k in 0..d.len() {
                    d[k] += g[k] * va[k];
                }
            }
        }
        Op::AddBias { x, b, axis } => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(grads, nodes, *b) {
                let (outer, n, inner) = kernels::axis_split(y.shape(), *axis);
                for o in 0..outer {
                    for c in 0..n {
                        let base = (o * n + c) * inner;
                        d[c] += g[base..base + inner].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += f * g);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            if let Some(d) = acc(grads, nodes, *a) {
                // dA = G · Bᵀ
                kernels::gemm(m, n, k, g, false, vb.data(), true, d, 1.0);
            }
            if let Some(d) = acc(grads, nodes, *b) {
                // dB = Aᵀ · G
                kernels::gemm(k, m, n, va.data(), true, g, false, d, 1.0);
            }
        }
        Op::BatchMatMul { a, b, tb } => {
            let (va, vb) = (val(*a), val(*b));
            let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let n = y.shape()[2];
            let (sa, sb, sy) = (m * k, k * n, m * n);
            if let Some(d) = acc(grads, nodes, *a) {
                for i in 0..batch {
                    let (gi, bi) = (&g[i * sy..][..sy], &vb.data()[i * sb..][..sb]);
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    kernels::gemm(m, n, k, gi, false, bi, !tb, &mut d[i * sa..][..sa], 1.0);
                }
            }
            if let Some(d) = acc(grads, nodes, *b) {
                for i in 0..batch {
                    let (gi, ai) = (&g[i * sy..][..sy], &va.data()[i * sa..][..sa]);
                    if *tb {
                        // B is n×k: dB = Gᵀ · A
                        kernels::gemm(n, m, k, gi, true, ai, false, &mut d[i * sb..][..sb], 1.0);
                    } else {
                        kernels::gemm(k, m, n, ai, true, gi, false, &mut d[i * sb..][..sb], 1.0);
                    }
                }
            }
        }
        Op::Repeat { x, times } => {
            if let Some(d) = acc(grads, nodes, *x) {
                let n = d.len();
                for r in 0..*times {
                    d.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Transpose(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                // y is r×c, input is c×r
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            if let Some(d) = acc(grads, nodes, *x) {
                let (_, back) = kernels::permute(y.shape(), &kernels::inverse_perm(perm), g);
                d.iter_mut().zip(&back).for_each(|(d, g)| *d += g);
            }
        }
        Op::Relu(a) => {
            let va = val(*a).data();
            if let Some(d) = acc(grads, nodes, *a) {
                for k in 0..d.len() {
                    if va[k] > 0.0 {
                        d[k] += g[k];
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                for (k, dk) in d.iter_mut().enumerate() {
                    *dk += g[k] * y.data()[k];
                }
            }
        }
        Op::Log(a) => {
            let va = val(*a).data();
            if let Some(d) = acc(grads, nodes, *a) {
                for k in 0..d.len() {
                    d[k] += g[k] / va[k];
                }
            }
        }
        Op::Abs(a) => {
            let va = val(*a).data();
            if let Some(d) = acc(grads, nodes, *a) {
                for k in 0..d.len() {
                    d[k] += g[k] * sign(va[k]);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MeanAxis { x, axis } => {
            let shape = val(*x).shape().to_vec();
            if let Some(d) = acc(grads, nodes, *x) {
                let (outer, n, inner) = kernels::axis_split(&shape, *axis);
                let inv = 1.0 / n as f64;
                for o in 0..outer {
                    for c in 0..n {
                        for r in 0..inner {
                            d[(o * n + c) * inner + r] += g[o * inner + r] * inv;
                        }
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let cols = *y.shape().last().unwrap();
                for (r, yr) in y.data().chunks(cols).enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(d) = acc(grads, nodes, *a) {
                let cols = *y.shape().last().unwrap();
                for (r, yr) in y.data().chunks(cols).enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        d[r * cols + c] += gr[c] - yr[c].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let cols = *y.shape().last().unwrap();
            let gam = val(*gamma).data();
            if let Some(d) = acc(grads, nodes, *gamma) {
                for (r, gr) in g.chunks(cols).enumerate() {
                    for c in 0..cols {
                        d[c] += gr[c] * xhat[r * cols + c];
                    }
                }
            }
            if let Some(d) = acc(grads, nodes, *beta) {
                for gr in g.chunks(cols) {
                    for c in 0..cols {
                        d[c] += gr[c];
                    }
                }
            }
            if let Some(d) = acc(grads, nodes, *x) {
                let n = cols as f64;
                for (r, gr) in g.chunks(cols).enumerate() {
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for c in 0..cols {
                        let dxh = gr[c] * gam[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[c];
                    }
                    for c in 0..cols {
                        let dxh = gr[c] * gam[c];
                        d[r * cols + c] +=
                            inv_std[r] / n * (n * dxh - sum_dxh - xh[c] * sum_dxh_xh);
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, _, inner) = kernels::axis_split(y.shape(), *axis);
            let total = y.shape()[*axis];
            let mut offset = 0;
            for &id in xs {
                let n = val(id).shape()[*axis];
                if let Some(d) = acc(grads, nodes, id) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        let dst = &mut d[o * n * inner..(o + 1) * n * inner];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
                offset += n;
            }
        }
        Op::Slice { x, axis, start } => {
            let src_shape = val(*x).shape().to_vec();
            if let Some(d) = acc(grads, nodes, *x) {
                let (outer, total, inner) = kernels::axis_split(&src_shape, *axis);
                let n = y.shape()[*axis];
                for o in 0..outer {
                    let dst = &mut d[(o * total + start) * inner..(o * total + start + n) * inner];
                    let src = &g[o * n * inner..(o + 1) * n * inner];
                    dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::CosSim { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let (n, dim) = (va.shape()[0], va.shape()[1]);
            let m = vb.shape()[0];
            let na = row_norms(va.data(), dim);
            let nb = row_norms(vb.data(), dim);
            let s = y.data();
            if let Some(d) = acc(grads, nodes, *a) {
                for i in 0..n {
                    if na[i] == 0.0 {
                        continue;
                    }
                    let ai = &va.data()[i * dim..(i + 1) * dim];
                    let mut gs = 0.0;
                    let di = &mut d[i * dim..(i + 1) * dim];
                    for j in 0..m {
                        if nb[j] == 0.0 {
                            continue;
                        }
                        let gij = g[i * m + j];
                        gs += gij * s[i * m + j];
                        let bj = &vb.data()[j * dim..(j + 1) * dim];
                        let f = gij / (na[i] * nb[j]);
                        di.iter_mut().zip(bj).for_each(|(d, b)| *d += f * b);
                    }
                    let f = gs / (na[i] * na[i]);
                    di.iter_mut().zip(ai).for_each(|(d, a)| *d -= f * a);
                }
            }
            if let Some(d) = acc(grads, nodes, *b) {
                for j in 0..m {
                    if nb[j] == 0.0 {
                        continue;
                    }
                    let bj = &vb.data()[j * dim..(j + 1) * dim];
                    let mut gs = 0.0;
                    let dj = &mut d[j * dim..(j + 1) * dim];
                    for i in 0..n {
                        if na[i] == 0.0 {
                            continue;
                        }
                        let gij = g[i * m + j];
                        gs += gij * s[i * m + j];
                        let ai = &va.data()[i * dim..(i + 1) * dim];
                        let f = gij / (na[i] * nb[j]);
                        dj.iter_mut().zip(ai).for_each(|(d, a)| *d += f * a);
                    }
                    let f = gs / (nb[j] * nb[j]);
                    dj.iter_mut().zip(bj).for_each(|(d, b)| *d -= f * b);
                }
            }
        }
        Op::Conv1d { x, k, pad, cols } => {
            let (vx, vk) = (val(*x), val(*k));
            let (kk, t, c_in) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let (w, c_out) = (vk.shape()[0], vk.shape()[2]);
            let t_out = y.shape()[1];
            let row = w * c_in;
            if let Some(d) = acc(grads, nodes, *k) {
                for a in 0..kk {
                    let c = &cols[a * t_out * row..(a + 1) * t_out * row];
                    let ga = &g[a * t_out * c_out..(a + 1) * t_out * c_out];
                    kernels::gemm(row, t_out, c_out, c, true, ga, false, d, 1.0);
                }
            }
            if let Some(d) = acc(grads, nodes, *x) {
                let mut dcols = vec![0.0; t_out * row];
                for a in 0..kk {
                    let ga = &g[a * t_out * c_out..(a + 1) * t_out * c_out];
                    kernels::gemm(t_out, c_out, row, ga, false, vk.data(), true, &mut dcols, 0.0);
                    for to in 0..t_out {
                        for dt in 0..w {
                            let ti = (to + dt) as isize - *pad as isize;
                            if ti < 0 || ti as usize >= t {
                                continue;
                            }
                            let dst = &mut d[(a * t + ti as usize) * c_in..][..c_in];
                            let src = &dcols[to * row + dt * c_in..][..c_in];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, k, geom, cols } => {
            let vk = val(*k);
            let batch = val(*x).shape()[0];
            let c_out = vk.shape()[0];
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            let img = geom.c_in * geom.h * geom.w;
            if let Some(d) = acc(grads, nodes, *k) {
                for bi in 0..batch {
                    let gb = &g[bi * c_out * ncols..(bi + 1) * c_out * ncols];
                    let cb = &cols[bi * rows * ncols..(bi + 1) * rows * ncols];
                    kernels::gemm(c_out, ncols, rows, gb, false, cb, true, d, 1.0);
                }
            }
            if let Some(d) = acc(grads, nodes, *x) {
                let mut dcols = vec![0.0; rows * ncols];
                for bi in 0..batch {
                    let gb = &g[bi * c_out * ncols..(bi + 1) * c_out * ncols];
                    kernels::gemm(rows, c_out, ncols, vk.data(), true, gb, false, &mut dcols, 0.0);
                    kernels::col2im(geom, &dcols, &mut d[bi * img..(bi + 1) * img]);
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_norms(data: &[f64], dim: usize) -> Vec<f64> {
    data.chunks(dim)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err!("{op}: axis {axis} out of range for {:?}", shape));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn zip(&self, other: &Var<'t>, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        same_shape(op, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a vector `b` broadcast along `axis` (`b.len() == shape[axis]`).
    pub fn add_bias(&self, b: &Var<'t>, axis: usize) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        check_axis("add_bias", x.shape(), axis)?;
        let (outer, n, inner) = kernels::axis_split(x.shape(), axis);
        if bv.numel() != n {
            return Err(dim_err!(
                "add_bias: bias of {} values for axis {axis} of {:?}",
                bv.numel(),
                x.shape()
            ));
        }
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for c in 0..n {
                let base = (o * n + c) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bv.data()[c]);
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.binary(b, value, Op::AddBias { x: self.id, b: b.id, axis }))
    }

    /// Adds a bias along the last axis.
    pub fn add_row_bias(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let rank = self.value().rank();
        self.add_bias(b, rank - 1)
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let v = self.value().map(|x| x * factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(dim_err!("matmul: {:?} x {:?}", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    /// Batched product of `B×m×k` with `B×k×n`, or with `B×n×k` taken
    /// transposed when `transpose_b` is set.
    pub fn bmm(&self, other: &Var<'t>, transpose_b: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let ok = a.rank() == 3 && b.rank() == 3 && a.shape()[0] == b.shape()[0];
        let (k_b, n) = if transpose_b { (2, 1) } else { (1, 2) };
        if !ok || a.shape()[2] != b.shape()[k_b] {
            return Err(dim_err!("bmm: {:?} x {:?} (transpose_b={transpose_b})", a.shape(), b.shape()));
        }
        let (batch, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[n]);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..][..m * k],
                false,
                &b.data()[i * k * n..][..k * n],
                transpose_b,
                &mut out[i * m * n..][..m * n],
                0.0,
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.binary(other, value, Op::BatchMatMul { a: self.id, b: other.id, tb: transpose_b }))
    }

    /// Stacks `times` copies along a new leading axis; gradients sum back.
    pub fn repeat(&self, times: usize) -> Result<Var<'t>> {
        if times == 0 {
            return Err(dim_err!("repeat: zero copies"));
        }
        let a = self.value();
        let mut shape = vec![times];
        shape.extend_from_slice(a.shape());
        let data = a.data().repeat(times);
        Ok(self.unary(Tensor::from_parts(shape, data), Op::Repeat { x: self.id, times }))
    }

    /// `x · w + b` for `x: R×in`, `w: in×out`, `b: out`.
    pub fn linear(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add_row_bias(b)
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(dim_err!("transpose needs rank 2, got {:?}", a.shape()));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.unary(Tensor::from_parts(vec![c, r], out), Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let mut seen = vec![false; a.rank()];
        if perm.len() != a.rank() || perm.iter().any(|&p| p >= a.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute: {:?} is not a permutation of rank {}", perm, a.rank()));
        }
        let (shape, data) = kernels::permute(a.shape(), perm, a.data());
        let v = Tensor::from_parts(shape, data);
        Ok(self.unary(v, Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("mean_axis", a.shape(), axis)?;
        let (outer, n, inner) = kernels::axis_split(a.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for c in 0..n {
                let src = &a.data()[(o * n + c) * inner..(o * n + c + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape: Vec<usize> = a.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.unary(Tensor::from_parts(shape, out), Op::MeanAxis { x: self.id, axis }))
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let cols = *a.shape().last().unwrap();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.unary(Tensor::from_parts(a.shape().to_vec(), out), Op::Softmax(self.id)))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let cols = *a.shape().last().unwrap();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.unary(Tensor::from_parts(a.shape().to_vec(), out), Op::LogSoftmax(self.id)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let cols = *a.shape().last().unwrap();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.numel() != cols || bv.numel() != cols {
            return Err(dim_err!("layer_norm: affine size vs width {cols}"));
        }
        let rows = a.numel() / cols;
        let mut xhat = vec![0.0; a.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; a.numel()];
        for r in 0..rows {
            let x = &a.data()[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (x[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(Tensor::from_parts(a.shape().to_vec(), out), op, rg))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("slice", a.shape(), axis)?;
        let (outer, total, inner) = kernels::axis_split(a.shape(), axis);
        if len == 0 || start + len > total {
            return Err(dim_err!("slice [{start}, {}) of axis extent {total}", start + len));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&a.data()[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(Tensor::from_parts(shape, out), Op::Slice { x: self.id, axis, start }))
    }

    /// Same values, but the backward pass deposits nothing upstream.
    pub fn stop_gradient(&self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.push(v, Op::Leaf(None), false)
    }

    /// Cosine-similarity matrix between the rows of `self` (`n×d`) and
    /// `other` (`m×d`). Rows with zero norm give similarity 0 and no gradient.
    pub fn cosine_similarity_matrix(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(dim_err!("cosine_similarity: {:?} vs {:?}", a.shape(), b.shape()));
        }
        let (n, dim, m) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let na = row_norms(a.data(), dim);
        let nb = row_norms(b.data(), dim);
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, dim, m, a.data(), false, b.data(), true, &mut out, 0.0);
        for i in 0..n {
            for j in 0..m {
                let denom = na[i] * nb[j];
                out[i * m + j] = if denom == 0.0 {
                    0.0
                } else {
                    (out[i * m + j] / denom).clamp(-1.0, 1.0)
                };
            }
        }
        let value = Tensor::from_parts(vec![n, m], out);
        Ok(self.binary(other, value, Op::CosSim { a: self.id, b: other.id }))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar var.
    pub fn cosine_similarity(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.numel() != b.numel() {
            return Err(dim_err!("cosine_similarity: lengths {} and {}", a.numel(), b.numel()));
        }
        let u = self.reshape(&[1, a.numel()])?;
        let v = other.reshape(&[1, b.numel()])?;
        u.cosine_similarity_matrix(&v)?.reshape(&[1])
    }

    /// Temporal convolution. `self: K×T×C_in`, `kernel: w×C_in×C_out`,
    /// zero padding `pad` on both ends of the time axis.
    pub fn conv1d_temporal(&self, kernel: &Var<'t>, pad: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        if x.rank() != 3 || k.rank() != 3 || x.shape()[2] != k.shape()[1] {
            return Err(dim_err!("conv1d_temporal: input {:?}, kernel {:?}", x.shape(), k.shape()));
        }
        let (kk, t, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (w, c_out) = (k.shape()[0], k.shape()[2]);
        let t_out = kernels::conv_out(t, w, 1, pad)
            .ok_or_else(|| dim_err!("conv1d_temporal: kernel width {w} exceeds padded length {}", t + 2 * pad))?;
        let row = w * c_in;
        let mut cols = vec![0.0; kk * t_out * row];
        for a in 0..kk {
            for to in 0..t_out {
                for dt in 0..w {
                    let ti = (to + dt) as isize - pad as isize;
                    if ti < 0 || ti as usize >= t {
                        continue;
                    }
                    let src = &x.data()[(a * t + ti as usize) * c_in..][..c_in];
                    cols[(a * t_out + to) * row + dt * c_in..][..c_in].copy_from_slice(src);
                }
            }
        }
        let mut out = vec![0.0; kk * t_out * c_out];
        kernels::gemm(kk * t_out, row, c_out, &cols, false, k.data(), false, &mut out, 0.0);
        let value = Tensor::from_parts(vec![kk, t_out, c_out], out);
        let op = Op::Conv1d { x: self.id, k: kernel.id, pad, cols };
        Ok(self.binary(kernel, value, op))
    }

    /// Batched 2D convolution. `self: B×C_in×H×W`, `kernel: C_out×C_in×kh×kw`.
    pub fn conv2d(&self, kernel: &Var<'t>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        if x.rank() != 4 || k.rank() != 4 || x.shape()[1] != k.shape()[1] {
            return Err(dim_err!("conv2d: input {:?}, kernel {:?}", x.shape(), k.shape()));
        }
        let (batch, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let ho = kernels::conv_out(h, kh, stride.0, pad.0);
        let wo = kernels::conv_out(w, kw, stride.1, pad.1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(dim_err!("conv2d: kernel {kh}x{kw} exceeds input {h}x{w} (pad {:?})", pad));
        };
        let geom = Conv2dGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            ho,
            wo,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let img = c_in * h * w;
        let mut cols = vec![0.0; batch * rows * ncols];
        let mut out = vec![0.0; batch * c_out * ncols];
        for bi in 0..batch {
            let cb = &mut cols[bi * rows * ncols..(bi + 1) * rows * ncols];
            kernels::im2col(&geom, &x.data()[bi * img..(bi + 1) * img], cb);
            let ob = &mut out[bi * c_out * ncols..(bi + 1) * c_out * ncols];
            kernels::gemm(c_out, rows, ncols, k.data(), false, cb, false, ob, 0.0);
        }
        let value = Tensor::from_parts(vec![batch, c_out, ho, wo], out);
        let op = Op::Conv2d { x: self.id, k: kernel.id, geom, cols };
        Ok(self.binary(kernel, value, op))
    }

    /// Unbatched valid 2D convolution over a `C_in×A×B` grid with stride and
    /// no padding; `kernel: C_out×C_in×ka×kb`.
    pub fn conv2d_strided(&self, kernel: &Var<'t>, stride: (usize, usize)) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(dim_err!("conv2d_strided needs C×A×B input, got {:?}", s));
        }
        let y = self.reshape(&[1, s[0], s[1], s[2]])?.conv2d(kernel, stride, (0, 0))?;
        let ys = y.shape();
        y.reshape(&ys[1..])
    }
}

/// Concatenates vars along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", &base, axis)?;
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(dim_err!("concat: {:?} vs {:?} along axis {axis}", s, base));
        }
    }
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = kernels::axis_split(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let n = v.shape()[axis];
            out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let rg = parts.iter().any(Var::requires_grad);
    let op = Op::Concat {
        xs: parts.iter().map(|p| p.id).collect(),
        axis,
    };
    Ok(tape.push(Tensor::from_parts(shape, out), op, rg))
}

/// Stacks equal-shaped vars along a new leading axis.
pub fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let expanded = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend(p.shape());
            p.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&expanded, 0)
}
