//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] records every op applied to its [`Var`]s during one forward
//! pass. [`Tape::backward`] walks the records in reverse and accumulates
//! gradients into every node that (transitively) requires them. Calling
//! `backward` twice without [`Tape::zero_grad`] accumulates.
//!
//! Reductions run sequentially in row-major order so a fixed input always
//! yields bit-identical values and gradients.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Tensor),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    LeakyRelu(usize, f64),
    Relu(usize),
    Abs(usize),
    LayerNorm {
        input: usize,
        gain: Vec<f64>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        input: usize,
        norms: Vec<f64>,
    },
    DwConv {
        input: usize,
        kernel: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    SegmentSoftmax(usize, Vec<usize>),
    SliceRows(usize, usize),
    Column(usize, usize),
    StackRows(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Records a single forward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        inner.grads.push(None);
        Var { tape: self, id }
    }

    /// A leaf that accumulates a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }

    /// Accumulated gradient of `v`, or `None` if nothing reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.inner.borrow().grads[v.id].clone()
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let Inner { nodes, grads } = &mut *inner;
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        local[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(nodes, id, &g, &mut local);
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(local: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut local[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let s: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - s);
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, local: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let y = &node.value;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(local, nodes, *a, g.clone());
            accumulate(local, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(local, nodes, *a, g.clone());
            accumulate(local, nodes, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            accumulate(local, nodes, *a, g.zip_map(val(*b), |x, y| x * y));
            accumulate(local, nodes, *b, g.zip_map(val(*a), |x, y| x * y));
        }
        Op::MulConst(a, c) => accumulate(local, nodes, *a, g.zip_map(c, |x, y| x * y)),
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(local, nodes, *a, g.map(|x| x * s));
        }
        Op::AddScalar(a) => accumulate(local, nodes, *a, g.clone()),
        Op::AddRow(a, b) => {
            accumulate(local, nodes, *a, g.clone());
            let n = val(*b).len();
            let mut gb = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (acc, x) in gb.iter_mut().zip(row) {
                    *acc += x;
                }
            }
            accumulate(local, nodes, *b, Tensor::new(val(*b).shape().to_vec(), gb).unwrap());
        }
        Op::MulCol(a, s) => {
            let av = val(*a);
            let sv = val(*s);
            let n = av.cols();
            let mut ga = g.clone();
            let mut gs = vec![0.0; sv.len()];
            for i in 0..sv.len() {
                let si = sv.data()[i];
                let grow = &g.data()[i * n..(i + 1) * n];
                let arow = &av.data()[i * n..(i + 1) * n];
                gs[i] = tensor::dot(grow, arow);
                for x in ga.row_mut(i) {
                    *x *= si;
                }
            }
            accumulate(local, nodes, *a, ga);
            accumulate(local, nodes, *s, Tensor::new(sv.shape().to_vec(), gs).unwrap());
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                accumulate(local, nodes, *a, g.matmul_t(bv).unwrap());
            }
            if nodes[*b].requires_grad {
                accumulate(local, nodes, *b, av.transpose().matmul(g).unwrap());
            }
        }
        Op::Transpose(a) => accumulate(local, nodes, *a, g.transpose()),
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(local, nodes, *a, Tensor::full(val(*a).shape(), gv));
        }
        Op::SumAxis(a, axis) => {
            let av = val(*a);
            let (m, n) = (av.rows(), av.cols());
            let mut ga = Tensor::zeros(av.shape());
            for i in 0..m {
                for j in 0..n {
                    ga.data_mut()[i * n + j] = if *axis == 0 {
                        g.data()[j]
                    } else {
                        g.data()[i]
                    };
                }
            }
            accumulate(local, nodes, *a, ga);
        }
        Op::Softmax(a, axis) => {
            let ga = if *axis == 1 || y.shape().len() == 1 {
                let n = if y.shape().len() == 1 { y.len() } else { y.cols() };
                let mut out = vec![0.0; y.len()];
                for ((yr, gr), or) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(out.chunks_mut(n))
                {
                    softmax_backward(yr, gr, or);
                }
                Tensor::new(y.shape().to_vec(), out).unwrap()
            } else {
                let yt = y.transpose();
                let gt = g.transpose();
                let n = yt.cols();
                let mut out = vec![0.0; y.len()];
                for ((yr, gr), or) in yt
                    .data()
                    .chunks(n)
                    .zip(gt.data().chunks(n))
                    .zip(out.chunks_mut(n))
                {
                    softmax_backward(yr, gr, or);
                }
                Tensor::new(yt.shape().to_vec(), out).unwrap().transpose()
            };
            accumulate(local, nodes, *a, ga);
        }
        Op::Sigmoid(a) => accumulate(local, nodes, *a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
        Op::LogSigmoid(a) => accumulate(
            local,
            nodes,
            *a,
            g.zip_map(val(*a), |gv, x| gv * tensor::sigmoid(-x)),
        ),
        Op::LeakyRelu(a, slope) => {
            let slope = *slope;
            accumulate(
                local,
                nodes,
                *a,
                g.zip_map(val(*a), |gv, x| if x >= 0.0 { gv } else { gv * slope }),
            )
        }
        Op::Relu(a) => accumulate(
            local,
            nodes,
            *a,
            g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
        ),
        Op::Abs(a) => accumulate(
            local,
            nodes,
            *a,
            g.zip_map(val(*a), |gv, x| {
                if x > 0.0 {
                    gv
                } else if x < 0.0 {
                    -gv
                } else {
                    0.0
                }
            }),
        ),
        Op::LayerNorm {
            input,
            gain,
            xhat,
            inv_std,
        } => {
            let n = gain.len();
            let mut out = vec![0.0; y.len()];
            for (i, &istd) in inv_std.iter().enumerate() {
                let gr = &g.data()[i * n..(i + 1) * n];
                let xr = &xhat[i * n..(i + 1) * n];
                let dxhat: Vec<f64> = gr.iter().zip(gain).map(|(a, b)| a * b).collect();
                let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                let mean_dx = tensor::dot(&dxhat, xr) / n as f64;
                for j in 0..n {
                    out[i * n + j] = istd * (dxhat[j] - mean_d - xr[j] * mean_dx);
                }
            }
            accumulate(
                local,
                nodes,
                *input,
                Tensor::new(y.shape().to_vec(), out).unwrap(),
            );
        }
        Op::NormalizeRows { input, norms } => {
            let n = y.cols();
            let mut out = vec![0.0; y.len()];
            for (i, &norm) in norms.iter().enumerate() {
                if norm == 0.0 {
                    continue;
                }
                let yr = &y.data()[i * n..(i + 1) * n];
                let gr = &g.data()[i * n..(i + 1) * n];
                let proj = tensor::dot(yr, gr);
                for j in 0..n {
                    out[i * n + j] = (gr[j] - yr[j] * proj) / norm;
                }
            }
            accumulate(
                local,
                nodes,
                *input,
                Tensor::new(y.shape().to_vec(), out).unwrap(),
            );
        }
        Op::DwConv { input, kernel } => {
            let (xv, kv) = (val(*input), val(*kernel));
            let (gx, gk) = dwconv_backward(xv, kv, g);
            accumulate(local, nodes, *input, gx);
            accumulate(local, nodes, *kernel, gk);
        }
        Op::ConcatCols(parts) => {
            let m = y.rows();
            let total = y.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                let mut gp = Vec::with_capacity(m * w);
                for i in 0..m {
                    gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                }
                accumulate(local, nodes, p, Tensor::new(val(p).shape().to_vec(), gp).unwrap());
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                let gp = g.data()[offset..offset + len].to_vec();
                accumulate(local, nodes, p, Tensor::new(val(p).shape().to_vec(), gp).unwrap());
                offset += len;
            }
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let n = av.cols();
            let mut ga = Tensor::zeros(av.shape());
            for (r, &src) in idx.iter().enumerate() {
                let grow = &g.data()[r * n..(r + 1) * n];
                for (acc, x) in ga.row_mut(src).iter_mut().zip(grow) {
                    *acc += x;
                }
            }
            accumulate(local, nodes, *a, ga);
        }
        Op::ScatterAddRows(a, idx) => {
            let av = val(*a);
            let n = av.cols();
            let mut ga = Vec::with_capacity(av.len());
            for &dst in idx {
                ga.extend_from_slice(&g.data()[dst * n..(dst + 1) * n]);
            }
            accumulate(local, nodes, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
        }
        Op::SegmentSoftmax(a, offsets) => {
            let mut out = vec![0.0; y.len()];
            for w in offsets.windows(2) {
                let (s, e) = (w[0], w[1]);
                softmax_backward(&y.data()[s..e], &g.data()[s..e], &mut out[s..e]);
            }
            accumulate(local, nodes, *a, Tensor::new(y.shape().to_vec(), out).unwrap());
        }
        Op::SliceRows(a, start) => {
            let av = val(*a);
            let n = av.cols();
            let mut ga = Tensor::zeros(av.shape());
            ga.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
            accumulate(local, nodes, *a, ga);
        }
        Op::Column(a, j) => {
            let av = val(*a);
            let n = av.cols();
            let mut ga = Tensor::zeros(av.shape());
            for (i, &gv) in g.data().iter().enumerate() {
                ga.data_mut()[i * n + j] = gv;
            }
            accumulate(local, nodes, *a, ga);
        }
        Op::StackRows(parts) => {
            for (r, &p) in parts.iter().enumerate() {
                let pv = val(p);
                let n = pv.len();
                let gp = g.data()[r * n..(r + 1) * n].to_vec();
                accumulate(local, nodes, p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
            }
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(local, nodes, *a, g.clone().reshape(&shape).unwrap());
        }
    }
}

/// Depthwise 2-D cross-correlation with zero "same" padding.
/// `x` is `H×W×C`, `k` is `kh×kw×C`.
pub(crate) fn dwconv_forward(x: &Tensor, k: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = Tensor::zeros(x.shape());
    let (xd, kd) = (x.data(), k.data());
    let od = out.data_mut();
    for i in 0..h as isize {
        for j in 0..w as isize {
            let obase = ((i as usize) * w + j as usize) * c;
            for u in 0..kh as isize {
                let si = i + u - ph;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for v in 0..kw as isize {
                    let sj = j + v - pw;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let xbase = ((si as usize) * w + sj as usize) * c;
                    let kbase = ((u as usize) * kw + v as usize) * c;
                    for ch in 0..c {
                        od[obase + ch] += xd[xbase + ch] * kd[kbase + ch];
                    }
                }
            }
        }
    }
    out
}

fn dwconv_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    for i in 0..h as isize {
        for j in 0..w as isize {
            let obase = ((i as usize) * w + j as usize) * c;
            for u in 0..kh as isize {
                let si = i + u - ph;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for v in 0..kw as isize {
                    let sj = j + v - pw;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let xbase = ((si as usize) * w + sj as usize) * c;
                    let kbase = ((u as usize) * kw + v as usize) * c;
                    for ch in 0..c {
                        let go = gd[obase + ch];
                        gx.data_mut()[xbase + ch] += go * kd[kbase + ch];
                        gk.data_mut()[kbase + ch] += go * xd[xbase + ch];
                    }
                }
            }
        }
    }
    (gx, gk)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.inner.borrow(), |inner| &inner.nodes[self.id])
    }

    fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    pub fn value(&self) -> Tensor {
        self.node().value.clone()
    }

    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.node(), |n| &n.value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.node().value.item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, rg, op)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, rg, op)
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::dim(op, &a, &b));
        }
        Ok(())
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let v = self.value_ref().zip_map(&other.value_ref(), |a, b| a + b);
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let v = self.value_ref().zip_map(&other.value_ref(), |a, b| a - b);
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let v = self.value_ref().zip_map(&other.value_ref(), |a, b| a * b);
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Elementwise product with a constant (no gradient flows into `c`).
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        if self.shape() != c.shape() {
            return Err(Error::dim("mul_const", &self.shape(), c.shape()));
        }
        let v = self.value_ref().zip_map(c, |a, b| a * b);
        Ok(self.unary(v, Op::MulConst(self.id, c.clone())))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value_ref().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let v = self.value_ref().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// `a[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&self, b: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), b.shape());
        if sa.len() != 2 || b.value_ref().len() != sa[1] {
            return Err(Error::dim("add_row", &sa, &sb));
        }
        let n = sa[1];
        let mut v = self.value();
        {
            let bv = b.value_ref();
            for row in v.data_mut().chunks_mut(n) {
                for (x, y) in row.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
        }
        Ok(self.binary(b, v, Op::AddRow(self.id, b.id)))
    }

    /// `a[m×n] ⊙ s[m]`, scaling row `i` by `s[i]`.
    pub fn mul_col(&self, s: Var<'t>) -> Result<Var<'t>> {
        let sa = self.shape();
        if s.value_ref().len() != self.value_ref().rows() {
            return Err(Error::dim("mul_col", &sa, &s.shape()));
        }
        let mut v = self.value();
        {
            let sv = s.value_ref();
            for (i, &si) in sv.data().iter().enumerate() {
                for x in v.row_mut(i) {
                    *x *= si;
                }
            }
        }
        Ok(self.binary(s, v, Op::MulCol(self.id, s.id)))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value_ref().matmul(&other.value_ref())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got {:?}",
                self.shape()
            )));
        }
        let v = self.value_ref().transpose();
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul(other.transpose()?)
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value_ref().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value_ref().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of a matrix over `axis` (0: down columns, 1: across rows).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value_ref();
        if v.shape().len() != 2 || axis > 1 {
            return Err(Error::Shape(format!(
                "sum_axis({axis}) on shape {:?}",
                v.shape()
            )));
        }
        let (m, n) = (v.rows(), v.cols());
        let out = if axis == 0 {
            (0..n).map(|j| (0..m).map(|i| v.at(i, j)).sum()).collect()
        } else {
            (0..m).map(|i| v.row(i).iter().sum()).collect()
        };
        drop(v);
        Ok(self.unary(Tensor::vector(out), Op::SumAxis(self.id, axis)))
    }

    /// Max-shifted softmax along `axis` of a matrix; a vector is one row.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value_ref();
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::InvalidValue("softmax input contains NaN".into()));
        }
        let out = match (v.shape().len(), axis) {
            (1, 0) => v.softmax_rows(),
            (2, 1) => v.softmax_rows(),
            (2, 0) => v.transpose().softmax_rows().transpose(),
            _ => {
                return Err(Error::Shape(format!(
                    "softmax axis {axis} on shape {:?}",
                    v.shape()
                )))
            }
        };
        drop(v);
        Ok(self.unary(out, Op::Softmax(self.id, axis)))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value_ref().map(tensor::sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn log_sigmoid(&self) -> Var<'t> {
        let v = self.value_ref().map(tensor::log_sigmoid);
        self.unary(v, Op::LogSigmoid(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.value_ref().map(|x| tensor::leaky_relu(x, slope));
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value_ref().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.value_ref().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    /// Row-wise layer norm with constant gain and bias.
    pub fn layer_norm(&self, gain: &[f64], bias: &[f64], eps: f64) -> Result<Var<'t>> {
        let v = self.value_ref();
        let n = v.cols();
        if v.shape().len() != 2 || gain.len() != n || bias.len() != n {
            return Err(Error::dim("layer_norm", v.shape(), &[gain.len()]));
        }
        let mut xhat = vec![0.0; v.len()];
        let mut out = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..n {
                let xh = (row[j] - mean) * istd;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * gain[j] + bias[j];
            }
        }
        let shape = v.shape().to_vec();
        drop(v);
        Ok(self.unary(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                input: self.id,
                gain: gain.to_vec(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Divides each row by its L2 norm; all-zero rows map to zero rows.
    pub fn normalize_rows(&self) -> Var<'t> {
        let v = self.value_ref();
        let n = v.cols();
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let norm = tensor::dot(v.row(i), v.row(i)).sqrt();
            norms.push(norm);
            if norm > 0.0 {
                for x in &mut out.data_mut()[i * n..(i + 1) * n] {
                    *x /= norm;
                }
            }
        }
        drop(v);
        self.unary(
            out,
            Op::NormalizeRows {
                input: self.id,
                norms,
            },
        )
    }

    /// Depthwise convolution: `self` is `H×W×C`, `kernel` is `kh×kw×C` with
    /// odd spatial sizes; zero padding preserves `H×W`.
    pub fn depthwise_conv2d(&self, kernel: Var<'t>) -> Result<Var<'t>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[2] {
            return Err(Error::dim("depthwise_conv2d", &xs, &ks));
        }
        if ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel must have odd size, got {}×{}",
                ks[0], ks[1]
            )));
        }
        let v = dwconv_forward(&self.value_ref(), &kernel.value_ref());
        Ok(self.binary(
            kernel,
            v,
            Op::DwConv {
                input: self.id,
                kernel: kernel.id,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value_ref();
        if v.shape().len() != 2 || start > end || end > v.rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{end} on shape {:?}",
                v.shape()
            )));
        }
        let n = v.cols();
        let out = Tensor::new(
            vec![end - start, n],
            v.data()[start * n..end * n].to_vec(),
        )?;
        drop(v);
        Ok(self.unary(out, Op::SliceRows(self.id, start)))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&self, j: usize) -> Result<Var<'t>> {
        let v = self.value_ref();
        if v.shape().len() != 2 || j >= v.cols() {
            return Err(Error::Shape(format!(
                "column {j} of shape {:?}",
                v.shape()
            )));
        }
        let out = Tensor::vector(v.column(j));
        drop(v);
        Ok(self.unary(out, Op::Column(self.id, j)))
    }

    /// Rows of a matrix (or entries of a vector) picked by `idx`, repeats allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value_ref();
        let n = v.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Range(format!(
                "gather row {bad} of {} rows",
                v.rows()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let shape = if v.shape().len() == 1 {
            vec![idx.len()]
        } else {
            vec![idx.len(), n]
        };
        drop(v);
        Ok(self.unary(Tensor::new(shape, data)?, Op::GatherRows(self.id, idx.to_vec())))
    }

    /// `out[idx[e]] += self[e]` into `rows` output rows.
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Result<Var<'t>> {
        let v = self.value_ref();
        if idx.len() != v.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Range(format!(
                "scatter of {} rows into {rows}",
                v.rows()
            )));
        }
        let n = v.cols();
        let mut out = Tensor::zeros(&[rows, n]);
        for (e, &dst) in idx.iter().enumerate() {
            for (o, x) in out.row_mut(dst).iter_mut().zip(v.row(e)) {
                *o += x;
            }
        }
        drop(v);
        Ok(self.unary(out, Op::ScatterAddRows(self.id, idx.to_vec())))
    }

    /// Softmax within each contiguous segment `offsets[s]..offsets[s+1]` of a vector.
    pub fn segment_softmax(&self, offsets: &[usize]) -> Result<Var<'t>> {
        let v = self.value_ref();
        if offsets.first() != Some(&0) || offsets.last() != Some(&v.len()) {
            return Err(Error::Shape(format!(
                "segment offsets do not cover {} entries",
                v.len()
            )));
        }
        let mut out = v.data().to_vec();
        for w in offsets.windows(2) {
            if w[1] > w[0] {
                tensor::softmax_in_place(&mut out[w[0]..w[1]]);
            }
        }
        let shape = v.shape().to_vec();
        drop(v);
        Ok(self.unary(
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax(self.id, offsets.to_vec()),
        ))
    }
}

/// Concatenates matrices with equal row counts along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let m = first.value_ref().rows();
    let widths: Vec<usize> = parts.iter().map(|p| p.value_ref().cols()).collect();
    for p in parts {
        if p.shape().len() != 2 || p.value_ref().rows() != m {
            return Err(Error::dim("concat_cols", &first.shape(), &p.shape()));
        }
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.value_ref().row(i));
        }
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    let tape = first.tape;
    Ok(tape.push(
        Tensor::new(vec![m, total], data)?,
        rg,
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
    ))
}

/// Stacks matrices with equal column counts along rows.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let n = first.value_ref().cols();
    let mut data = Vec::new();
    let mut m = 0;
    for p in parts {
        let v = p.value_ref();
        if v.shape().len() != 2 || v.cols() != n {
            return Err(Error::dim("concat_rows", &first.shape(), v.shape()));
        }
        data.extend_from_slice(v.data());
        m += v.rows();
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(first.tape.push(
        Tensor::new(vec![m, n], data)?,
        rg,
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
    ))
}

/// Stacks equal-length vectors into the rows of a matrix.
pub fn stack_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("stack of nothing".into()))?;
    let n = first.value_ref().len();
    let mut data = Vec::with_capacity(parts.len() * n);
    for p in parts {
        let v = p.value_ref();
        if v.len() != n {
            return Err(Error::dim("stack_rows", &first.shape(), v.shape()));
        }
        data.extend_from_slice(v.data());
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(first.tape.push(
        Tensor::new(vec![parts.len(), n], data)?,
        rg,
        Op::StackRows(parts.iter().map(|p| p.id).collect()),
    ))
}

/// `softmax(Q·Kᵀ/√d)·V`.
pub fn scaled_dot_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] {
        return Err(Error::dim("scaled_dot_attention", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::dim("scaled_dot_attention", &ks, &vs));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    let logits = q.matmul_t(k)?.scale(scale);
    logits.softmax(1)?.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        assert_eq!(i2.matmul(m).unwrap().value(), m.value());
        let a = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]));
        let b = tape.constant(Tensor::from_rows(&[[0.0], [5.0]]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.0, 0.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape.constant(Tensor::vector(vec![7.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[1.0]);
        let s = tape
            .constant(Tensor::vector(vec![2.0, 1.0, 0.0]))
            .softmax(0)
            .unwrap();
        // e^x / Σe^x with e = 2.718281828459045
        let z = 1.0 + std::f64::consts::E + std::f64::consts::E.powi(2);
        let want = [
            std::f64::consts::E.powi(2) / z,
            std::f64::consts::E / z,
            1.0 / z,
        ];
        assert!(close(s.value().data(), &want, 1e-15));
        assert!(close(s.value().data(), &[0.66524, 0.24473, 0.09003], 5e-6));
        let nan = tape.constant(Tensor::vector(vec![f64::NAN, 1.0]));
        assert!(matches!(nan.softmax(0), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn activation_examples() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0]));
        let y = x.sigmoid();
        assert_eq!(y.item(), 0.5);
        tape.backward(y.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.25]);
        let l = tape.constant(Tensor::vector(vec![-50.0])).log_sigmoid();
        assert!((l.item() + 50.0).abs() < 1e-12);
        let r = tape.constant(Tensor::vector(vec![-1.0])).leaky_relu(0.2);
        assert_eq!(r.item(), -0.2);
    }

    #[test]
    fn dwconv_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(Tensor::randn(&[4, 4, 2], 1.0, &mut rng));
        let zero = tape.constant(Tensor::zeros(&[3, 3, 2]));
        assert!(x.depthwise_conv2d(zero).unwrap().value().data().iter().all(|&v| v == 0.0));
        let mut center = Tensor::zeros(&[3, 3, 2]);
        center.data_mut()[(3 + 1) * 2] = 1.0;
        center.data_mut()[(3 + 1) * 2 + 1] = 1.0;
        let center = tape.constant(center);
        assert_eq!(x.depthwise_conv2d(center).unwrap().value(), x.value());
        let even = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(matches!(x.depthwise_conv2d(even), Err(Error::Config(_))));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 6.0);
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 12.0, "second call accumulates");
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
        tape.backward(c.mul(p).unwrap().sum()).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(p.grad().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn attention_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let k1 = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let v1 = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]));
        let out = scaled_dot_attention(q, k1, v1).unwrap().value();
        for i in 0..3 {
            assert_eq!(out.row(i), &[1.0, 2.0, 3.0, 4.0]);
        }
        let k = tape.constant(Tensor::from_rows(&[[1.0, 0.0, 1.0, 0.0]; 3]));
        let v = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let out = scaled_dot_attention(q, k, v).unwrap().value();
        let vv = v.value();
        for i in 0..3 {
            for j in 0..4 {
                let mean = (vv.at(0, j) + vv.at(1, j) + vv.at(2, j)) / 3.0;
                assert!((out.at(i, j) - mean).abs() < 1e-12);
            }
        }
        let bad = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(
            scaled_dot_attention(q, bad, v),
            Err(Error::Dimension { .. })
        ));
    }
}
