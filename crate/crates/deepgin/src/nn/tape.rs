//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! Network code is written once against the [`Ctx`] trait and then run in
//! two modes: [`Tape`] records every op and can backpropagate from a scalar
//! root, while [`EvalCtx`] executes the same graph eagerly without keeping
//! intermediates alive (inference mode).

use std::rc::Rc;

use super::ops::{self, ConvGeom};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x [N,C,H,W] * m [N,1,H,W], m broadcast over channels.
    MulBroadcastC(Var, Var),
    /// x [N,C,H,W] * g [C], per-channel gain.
    MulChannel(Var, Var),
    /// x * s, s a scalar variable.
    MulScalarVar(Var, Var),
    /// x / s, s a scalar variable.
    DivScalarVar(Var, Var),
    AffineConst {
        x: Var,
        mul: f64,
    },
    Abs(Var),
    Clamp01(Var),
    ConcatC(Vec<Var>),
    NearestUp(Var, usize),
    AvgPool(Var, usize),
    MaxPool2 {
        x: Var,
        idx: Vec<u32>,
    },
    Bilinear {
        x: Var,
        in_h: usize,
        in_w: usize,
    },
    BMatMul {
        a: Var,
        ta: bool,
        b: Var,
        tb: bool,
    },
    SoftmaxRows(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    /// [N, ...] -> [N], summing everything but the leading axis.
    SumPerSample(Var),
    /// [N] -> scalar, dot with a fixed coefficient vector.
    DotConst(Var, Vec<f64>),
    RowDiff(Var),
    ColDiff(Var),
    /// u^T W v with constant unit vectors; W viewed as [rows, cols].
    BilinearForm {
        w: Var,
        u: Tensor,
        v: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    g: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.g.get_mut(v.0).and_then(|o| o.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Backpropagate from a scalar root. Intermediate gradients are freed as
    /// soon as they have been consumed; leaf gradients are kept.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.val(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::from_vec(
            self.val(root).shape(),
            vec![1.0; 1],
        ));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf gradients for the caller
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { g: grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = ops::conv2d_backward(self.val(*x), self.val(*w), *geom, g);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let Some(bv) = b {
                    acc(grads, *bv, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *dv = 0.0;
                    }
                }
                acc(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.val(*x);
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *dv *= slope;
                    }
                }
                acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[i].value;
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(yv.data()) {
                    *dv *= y * (1.0 - y);
                }
                acc(grads, *x, d);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut da = g.clone();
                for (dv, &v) in da.data_mut().iter_mut().zip(bv.data()) {
                    *dv *= v;
                }
                acc(grads, *a, da);
                let mut db = g.clone();
                for (dv, &v) in db.data_mut().iter_mut().zip(av.data()) {
                    *dv *= v;
                }
                acc(grads, *b, db);
            }
            Op::MulBroadcastC(x, m) => {
                let (n, c, h, w) = self.val(*x).dims4();
                let mv = self.val(*m);
                let mut dx = g.clone();
                for s in 0..n {
                    let mp = &mv.data()[s * h * w..(s + 1) * h * w];
                    for ci in 0..c {
                        let base = (s * c + ci) * h * w;
                        for (dv, &mvv) in dx.data_mut()[base..base + h * w].iter_mut().zip(mp) {
                            *dv *= mvv;
                        }
                    }
                }
                acc(grads, *x, dx);
                if self.ng(*m) {
                    let xv = self.val(*x);
                    let mut dm = Tensor::zeros(mv.shape());
                    for s in 0..n {
                        let dst = &mut dm.data_mut()[s * h * w..(s + 1) * h * w];
                        for ci in 0..c {
                            let base = (s * c + ci) * h * w;
                            for (k, d) in dst.iter_mut().enumerate() {
                                *d += g.data()[base + k] * xv.data()[base + k];
                            }
                        }
                    }
                    acc(grads, *m, dm);
                }
            }
            Op::MulChannel(x, gc) => {
                let (n, c, h, w) = self.val(*x).dims4();
                let gcv = self.val(*gc);
                let mut dx = g.clone();
                for s in 0..n {
                    for ci in 0..c {
                        let base = (s * c + ci) * h * w;
                        let gain = gcv.data()[ci];
                        for dv in &mut dx.data_mut()[base..base + h * w] {
                            *dv *= gain;
                        }
                    }
                }
                acc(grads, *x, dx);
                if self.ng(*gc) {
                    let xv = self.val(*x);
                    let mut dg = Tensor::zeros(&[c]);
                    for s in 0..n {
                        for ci in 0..c {
                            let base = (s * c + ci) * h * w;
                            let mut acc_v = 0.0;
                            for k in 0..h * w {
                                acc_v += g.data()[base + k] * xv.data()[base + k];
                            }
                            dg.data_mut()[ci] += acc_v;
                        }
                    }
                    acc(grads, *gc, dg);
                }
            }
            Op::MulScalarVar(x, s) => {
                let sv = self.val(*s).item();
                acc(grads, *x, g.map(|v| v * sv));
                if self.ng(*s) {
                    let xv = self.val(*x);
                    let dot: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    acc(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::DivScalarVar(x, s) => {
                let sv = self.val(*s).item();
                acc(grads, *x, g.map(|v| v / sv));
                if self.ng(*s) {
                    let xv = self.val(*x);
                    let dot: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    acc(grads, *s, Tensor::scalar(-dot / (sv * sv)));
                }
            }
            Op::AffineConst { x, mul, .. } => {
                acc(grads, *x, g.map(|v| v * mul));
            }
            Op::Abs(x) => {
                let xv = self.val(*x);
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    *dv *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                acc(grads, *x, d);
            }
            Op::Clamp01(x) => {
                let xv = self.val(*x);
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if !(0.0..=1.0).contains(&v) {
                        *dv = 0.0;
                    }
                }
                acc(grads, *x, d);
            }
            Op::ConcatC(xs) => {
                let (n, _, h, w) = self.nodes[i].value.dims4();
                let mut offset = 0;
                for x in xs {
                    let (_, cx, _, _) = self.val(*x).dims4();
                    if self.ng(*x) {
                        let mut d = Tensor::zeros(self.val(*x).shape());
                        let ctot = self.nodes[i].value.shape()[1];
                        for s in 0..n {
                            for ci in 0..cx {
                                let src = ((s * ctot) + offset + ci) * h * w;
                                let dst = (s * cx + ci) * h * w;
                                d.data_mut()[dst..dst + h * w]
                                    .copy_from_slice(&g.data()[src..src + h * w]);
                            }
                        }
                        acc(grads, *x, d);
                    }
                    offset += cx;
                }
            }
            Op::NearestUp(x, f) => acc(grads, *x, ops::nearest_upsample_backward(g, *f)),
            Op::AvgPool(x, k) => acc(grads, *x, ops::avg_pool_backward(g, *k)),
            Op::MaxPool2 { x, idx } => {
                acc(grads, *x, ops::max_pool2_backward(g, idx, self.val(*x).shape()));
            }
            Op::Bilinear { x, in_h, in_w } => {
                acc(grads, *x, ops::bilinear_resize_backward(g, *in_h, *in_w));
            }
            Op::BMatMul { a, ta, b, tb } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.ng(*a) {
                    let da = if !*ta {
                        ops::bmatmul(g, false, bv, !*tb)
                    } else {
                        ops::bmatmul(bv, *tb, g, true)
                    };
                    acc(grads, *a, da.reshaped(av.shape()));
                }
                if self.ng(*b) {
                    let db = if !*tb {
                        ops::bmatmul(av, !*ta, g, false)
                    } else {
                        ops::bmatmul(g, true, av, *ta)
                    };
                    acc(grads, *b, db.reshaped(bv.shape()));
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (n, m, c) = y.dims3();
                let mut d = Tensor::zeros(y.shape());
                for r in 0..n * m {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (dv, (&yv, &gv)) in d.data_mut()[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(yr.iter().zip(gr))
                    {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(grads, *x, d);
            }
            Op::Reshape(x) => {
                acc(grads, *x, g.clone().reshaped(self.val(*x).shape()));
            }
            Op::SumAll(x) => {
                acc(grads, *x, Tensor::full(self.val(*x).shape(), g.item()));
            }
            Op::MeanAll(x) => {
                let n = self.val(*x).numel();
                acc(grads, *x, Tensor::full(self.val(*x).shape(), g.item() / n as f64));
            }
            Op::SumPerSample(x) => {
                let xv = self.val(*x);
                let n = xv.shape()[0];
                let per = xv.numel() / n;
                let mut d = Tensor::zeros(xv.shape());
                for s in 0..n {
                    let gv = g.data()[s];
                    for v in &mut d.data_mut()[s * per..(s + 1) * per] {
                        *v = gv;
                    }
                }
                acc(grads, *x, d);
            }
            Op::DotConst(x, w) => {
                let gv = g.item();
                acc(
                    grads,
                    *x,
                    Tensor::from_vec(self.val(*x).shape(), w.iter().map(|c| c * gv).collect()),
                );
            }
            Op::RowDiff(x) => {
                let xv = self.val(*x);
                let (n, c, h, w) = xv.dims4();
                let mut d = Tensor::zeros(xv.shape());
                for p in 0..n * c {
                    let gp = &g.data()[p * (h - 1) * w..(p + 1) * (h - 1) * w];
                    let dp = &mut d.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..h - 1 {
                        for xw in 0..w {
                            let gv = gp[y * w + xw];
                            dp[(y + 1) * w + xw] += gv;
                            dp[y * w + xw] -= gv;
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::ColDiff(x) => {
                let xv = self.val(*x);
                let (n, c, h, w) = xv.dims4();
                let mut d = Tensor::zeros(xv.shape());
                for p in 0..n * c {
                    let gp = &g.data()[p * h * (w - 1)..(p + 1) * h * (w - 1)];
                    let dp = &mut d.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xw in 0..w - 1 {
                            let gv = gp[y * (w - 1) + xw];
                            dp[y * w + xw + 1] += gv;
                            dp[y * w + xw] -= gv;
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::BilinearForm { w, u, v } => {
                let gv = g.item();
                let wv = self.val(*w);
                let (rows, cols) = (u.numel(), v.numel());
                let mut d = Tensor::zeros(wv.shape());
                for r in 0..rows {
                    let ur = u.data()[r] * gv;
                    for cidx in 0..cols {
                        d.data_mut()[r * cols + cidx] = ur * v.data()[cidx];
                    }
                }
                acc(grads, *w, d);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared forward computations (used by both Tape and EvalCtx).
// ---------------------------------------------------------------------------

fn fw_map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

fn fw_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn fw_mul_broadcast_c(x: &Tensor, m: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (mn, mc, mh, mw) = m.dims4();
    assert_eq!((mn, mc, mh, mw), (n, 1, h, w), "mask shape mismatch");
    let mut y = x.clone();
    for s in 0..n {
        let mp = &m.data()[s * h * w..(s + 1) * h * w];
        for ci in 0..c {
            let base = (s * c + ci) * h * w;
            for (v, &mv) in y.data_mut()[base..base + h * w].iter_mut().zip(mp) {
                *v *= mv;
            }
        }
    }
    y
}

fn fw_mul_channel(x: &Tensor, g: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(g.numel(), c, "per-channel gain length mismatch");
    let mut y = x.clone();
    for s in 0..n {
        for ci in 0..c {
            let base = (s * c + ci) * h * w;
            let gain = g.data()[ci];
            for v in &mut y.data_mut()[base..base + h * w] {
                *v *= gain;
            }
        }
    }
    y
}

fn fw_concat_c(xs: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = xs[0].dims4();
    let ctot: usize = xs.iter().map(|t| t.shape()[1]).sum();
    let mut y = Tensor::zeros(&[n, ctot, h, w]);
    let mut offset = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4();
        assert_eq!((xn, xh, xw), (n, h, w), "concat spatial mismatch");
        for s in 0..n {
            for ci in 0..xc {
                let src = (s * xc + ci) * h * w;
                let dst = ((s * ctot) + offset + ci) * h * w;
                y.data_mut()[dst..dst + h * w].copy_from_slice(&x.data()[src..src + h * w]);
            }
        }
        offset += xc;
    }
    y
}

fn fw_row_diff(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h >= 2);
    let mut y = Tensor::zeros(&[n, c, h - 1, w]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * (h - 1) * w..(p + 1) * (h - 1) * w];
        for r in 0..h - 1 {
            for cw in 0..w {
                dst[r * w + cw] = src[(r + 1) * w + cw] - src[r * w + cw];
            }
        }
    }
    y
}

fn fw_col_diff(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(w >= 2);
    let mut y = Tensor::zeros(&[n, c, h, w - 1]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * h * (w - 1)..(p + 1) * h * (w - 1)];
        for r in 0..h {
            for cw in 0..w - 1 {
                dst[r * (w - 1) + cw] = src[r * w + cw + 1] - src[r * w + cw];
            }
        }
    }
    y
}

fn fw_sum_per_sample(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let per = x.numel() / n;
    Tensor::from_vec(
        &[n],
        (0..n)
            .map(|s| x.data()[s * per..(s + 1) * per].iter().sum())
            .collect(),
    )
}

fn fw_bilinear_form(w: &Tensor, u: &Tensor, v: &Tensor) -> Tensor {
    let rows = u.numel();
    let cols = v.numel();
    assert_eq!(w.numel(), rows * cols, "bilinear form shape mismatch");
    let mut acc = 0.0;
    for r in 0..rows {
        let mut row_dot = 0.0;
        for c in 0..cols {
            row_dot += w.data()[r * cols + c] * v.data()[c];
        }
        acc += u.data()[r] * row_dot;
    }
    Tensor::scalar(acc)
}

// ---------------------------------------------------------------------------
// Execution context
// ---------------------------------------------------------------------------

/// Uniform interface for graph construction. `Tape` records for backward;
/// `EvalCtx` just computes.
pub trait Ctx {
    type T: Clone;

    fn leaf(&mut self, t: Tensor, trainable: bool) -> Self::T;
    fn constant(&mut self, t: Tensor) -> Self::T {
        self.leaf(t, false)
    }
    fn value<'a>(&'a self, x: &'a Self::T) -> &'a Tensor;

    fn conv2d(&mut self, x: &Self::T, w: &Self::T, b: Option<&Self::T>, g: ConvGeom) -> Self::T;
    fn relu(&mut self, x: &Self::T) -> Self::T;
    fn leaky_relu(&mut self, x: &Self::T, slope: f64) -> Self::T;
    fn sigmoid(&mut self, x: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul_broadcast_c(&mut self, x: &Self::T, m: &Self::T) -> Self::T;
    fn mul_channel(&mut self, x: &Self::T, g: &Self::T) -> Self::T;
    fn mul_scalar_var(&mut self, x: &Self::T, s: &Self::T) -> Self::T;
    fn div_scalar_var(&mut self, x: &Self::T, s: &Self::T) -> Self::T;
    fn affine(&mut self, x: &Self::T, mul: f64, add: f64) -> Self::T;
    fn abs(&mut self, x: &Self::T) -> Self::T;
    fn clamp01(&mut self, x: &Self::T) -> Self::T;
    fn concat_c(&mut self, xs: &[&Self::T]) -> Self::T;
    fn nearest_up(&mut self, x: &Self::T, f: usize) -> Self::T;
    fn avg_pool(&mut self, x: &Self::T, k: usize) -> Self::T;
    fn max_pool2(&mut self, x: &Self::T) -> Self::T;
    fn bilinear(&mut self, x: &Self::T, oh: usize, ow: usize) -> Self::T;
    fn bmatmul(&mut self, a: &Self::T, ta: bool, b: &Self::T, tb: bool) -> Self::T;
    fn softmax_rows(&mut self, x: &Self::T) -> Self::T;
    fn reshape(&mut self, x: &Self::T, shape: &[usize]) -> Self::T;
    fn sum_all(&mut self, x: &Self::T) -> Self::T;
    fn mean_all(&mut self, x: &Self::T) -> Self::T;
    fn sum_per_sample(&mut self, x: &Self::T) -> Self::T;
    fn dot_const(&mut self, x: &Self::T, w: Vec<f64>) -> Self::T;
    fn row_diff(&mut self, x: &Self::T) -> Self::T;
    fn col_diff(&mut self, x: &Self::T) -> Self::T;
    fn bilinear_form(&mut self, w: &Self::T, u: &Tensor, v: &Tensor) -> Self::T;
}

impl Ctx for Tape {
    type T = Var;

    fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    fn value<'a>(&'a self, x: &'a Var) -> &'a Tensor {
        self.val(*x)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, g: ConvGeom) -> Var {
        let y = ops::conv2d(self.val(*x), self.val(*w), b.map(|v| self.val(*v)), g);
        let needs = self.ng(*x) || self.ng(*w) || b.map(|v| self.ng(*v)).unwrap_or(false);
        self.push(
            y,
            Op::Conv2d {
                x: *x,
                w: *w,
                b: b.copied(),
                geom: g,
            },
            needs,
        )
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = fw_map(self.val(*x), |v| v.max(0.0));
        self.push(y, Op::Relu(*x), self.ng(*x))
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        let y = fw_map(self.val(*x), |v| if v > 0.0 { v } else { slope * v });
        self.push(y, Op::LeakyRelu(*x, slope), self.ng(*x))
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let y = fw_map(self.val(*x), |v| 1.0 / (1.0 + (-v).exp()));
        self.push(y, Op::Sigmoid(*x), self.ng(*x))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = fw_zip(self.val(*a), self.val(*b), |x, v| x + v);
        self.push(y, Op::Add(*a, *b), self.ng(*a) || self.ng(*b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let y = fw_zip(self.val(*a), self.val(*b), |x, v| x - v);
        self.push(y, Op::Sub(*a, *b), self.ng(*a) || self.ng(*b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let y = fw_zip(self.val(*a), self.val(*b), |x, v| x * v);
        self.push(y, Op::Mul(*a, *b), self.ng(*a) || self.ng(*b))
    }

    fn mul_broadcast_c(&mut self, x: &Var, m: &Var) -> Var {
        let y = fw_mul_broadcast_c(self.val(*x), self.val(*m));
        self.push(y, Op::MulBroadcastC(*x, *m), self.ng(*x) || self.ng(*m))
    }

    fn mul_channel(&mut self, x: &Var, g: &Var) -> Var {
        let y = fw_mul_channel(self.val(*x), self.val(*g));
        self.push(y, Op::MulChannel(*x, *g), self.ng(*x) || self.ng(*g))
    }

    fn mul_scalar_var(&mut self, x: &Var, s: &Var) -> Var {
        let sv = self.val(*s).item();
        let y = fw_map(self.val(*x), |v| v * sv);
        self.push(y, Op::MulScalarVar(*x, *s), self.ng(*x) || self.ng(*s))
    }

    fn div_scalar_var(&mut self, x: &Var, s: &Var) -> Var {
        let sv = self.val(*s).item();
        let y = fw_map(self.val(*x), |v| v / sv);
        self.push(y, Op::DivScalarVar(*x, *s), self.ng(*x) || self.ng(*s))
    }

    fn affine(&mut self, x: &Var, mul: f64, add: f64) -> Var {
        let y = fw_map(self.val(*x), |v| v * mul + add);
        self.push(y, Op::AffineConst { x: *x, mul }, self.ng(*x))
    }

    fn abs(&mut self, x: &Var) -> Var {
        let y = fw_map(self.val(*x), f64::abs);
        self.push(y, Op::Abs(*x), self.ng(*x))
    }

    fn clamp01(&mut self, x: &Var) -> Var {
        let y = fw_map(self.val(*x), |v| v.clamp(0.0, 1.0));
        self.push(y, Op::Clamp01(*x), self.ng(*x))
    }

    fn concat_c(&mut self, xs: &[&Var]) -> Var {
        let vals: Vec<&Tensor> = xs.iter().map(|v| self.val(**v)).collect();
        let y = fw_concat_c(&vals);
        let needs = xs.iter().any(|v| self.ng(**v));
        self.push(y, Op::ConcatC(xs.iter().map(|v| **v).collect()), needs)
    }

    fn nearest_up(&mut self, x: &Var, f: usize) -> Var {
        let y = ops::nearest_upsample(self.val(*x), f);
        self.push(y, Op::NearestUp(*x, f), self.ng(*x))
    }

    fn avg_pool(&mut self, x: &Var, k: usize) -> Var {
        let y = ops::avg_pool(self.val(*x), k);
        self.push(y, Op::AvgPool(*x, k), self.ng(*x))
    }

    fn max_pool2(&mut self, x: &Var) -> Var {
        let (y, idx) = ops::max_pool2(self.val(*x));
        self.push(y, Op::MaxPool2 { x: *x, idx }, self.ng(*x))
    }

    fn bilinear(&mut self, x: &Var, oh: usize, ow: usize) -> Var {
        let (_, _, in_h, in_w) = self.val(*x).dims4();
        let y = ops::bilinear_resize(self.val(*x), oh, ow);
        let op = Op::Bilinear {
            x: *x,
            in_h,
            in_w,
        };
        self.push(y, op, self.ng(*x))
    }

    fn bmatmul(&mut self, a: &Var, ta: bool, b: &Var, tb: bool) -> Var {
        let y = ops::bmatmul(self.val(*a), ta, self.val(*b), tb);
        self.push(
            y,
            Op::BMatMul {
                a: *a,
                ta,
                b: *b,
                tb,
            },
            self.ng(*a) || self.ng(*b),
        )
    }

    fn softmax_rows(&mut self, x: &Var) -> Var {
        let y = ops::softmax_rows(self.val(*x));
        self.push(y, Op::SoftmaxRows(*x), self.ng(*x))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Var {
        let y = self.val(*x).clone().reshaped(shape);
        self.push(y, Op::Reshape(*x), self.ng(*x))
    }

    fn sum_all(&mut self, x: &Var) -> Var {
        let y = Tensor::scalar(self.val(*x).data().iter().sum());
        self.push(y, Op::SumAll(*x), self.ng(*x))
    }

    fn mean_all(&mut self, x: &Var) -> Var {
        let xv = self.val(*x);
        let y = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        self.push(y, Op::MeanAll(*x), self.ng(*x))
    }

    fn sum_per_sample(&mut self, x: &Var) -> Var {
        let y = fw_sum_per_sample(self.val(*x));
        self.push(y, Op::SumPerSample(*x), self.ng(*x))
    }

    fn dot_const(&mut self, x: &Var, w: Vec<f64>) -> Var {
        let xv = self.val(*x);
        assert_eq!(xv.numel(), w.len());
        let y = Tensor::scalar(xv.data().iter().zip(&w).map(|(a, b)| a * b).sum());
        self.push(y, Op::DotConst(*x, w), self.ng(*x))
    }

    fn row_diff(&mut self, x: &Var) -> Var {
        let y = fw_row_diff(self.val(*x));
        self.push(y, Op::RowDiff(*x), self.ng(*x))
    }

    fn col_diff(&mut self, x: &Var) -> Var {
        let y = fw_col_diff(self.val(*x));
        self.push(y, Op::ColDiff(*x), self.ng(*x))
    }

    fn bilinear_form(&mut self, w: &Var, u: &Tensor, v: &Tensor) -> Var {
        let y = fw_bilinear_form(self.val(*w), u, v);
        self.push(
            y,
            Op::BilinearForm {
                w: *w,
                u: u.clone(),
                v: v.clone(),
            },
            self.ng(*w),
        )
    }
}

/// Eager, gradient-free executor. Values drop as soon as the caller lets go
/// of them, which keeps inference memory flat.
#[derive(Default)]
pub struct EvalCtx;

impl EvalCtx {
    pub fn new() -> Self {
        EvalCtx
    }
}

impl Ctx for EvalCtx {
    type T = Rc<Tensor>;

    fn leaf(&mut self, t: Tensor, _trainable: bool) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn value<'a>(&'a self, x: &'a Rc<Tensor>) -> &'a Tensor {
        x
    }

    fn conv2d(&mut self, x: &Rc<Tensor>, w: &Rc<Tensor>, b: Option<&Rc<Tensor>>, g: ConvGeom) -> Rc<Tensor> {
        Rc::new(ops::conv2d(x, w, b.map(|v| &**v), g))
    }

    fn relu(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_map(x, |v| v.max(0.0)))
    }

    fn leaky_relu(&mut self, x: &Rc<Tensor>, slope: f64) -> Rc<Tensor> {
        Rc::new(fw_map(x, |v| if v > 0.0 { v } else { slope * v }))
    }

    fn sigmoid(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_map(x, |v| 1.0 / (1.0 + (-v).exp())))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_zip(a, b, |x, y| x + y))
    }

    fn sub(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_zip(a, b, |x, y| x - y))
    }

    fn mul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_zip(a, b, |x, y| x * y))
    }

    fn mul_broadcast_c(&mut self, x: &Rc<Tensor>, m: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_mul_broadcast_c(x, m))
    }

    fn mul_channel(&mut self, x: &Rc<Tensor>, g: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_mul_channel(x, g))
    }

    fn mul_scalar_var(&mut self, x: &Rc<Tensor>, s: &Rc<Tensor>) -> Rc<Tensor> {
        let sv = s.item();
        Rc::new(fw_map(x, |v| v * sv))
    }

    fn div_scalar_var(&mut self, x: &Rc<Tensor>, s: &Rc<Tensor>) -> Rc<Tensor> {
        let sv = s.item();
        Rc::new(fw_map(x, |v| v / sv))
    }

    fn affine(&mut self, x: &Rc<Tensor>, mul: f64, add: f64) -> Rc<Tensor> {
        Rc::new(fw_map(x, |v| v * mul + add))
    }

    fn abs(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_map(x, f64::abs))
    }

    fn clamp01(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_map(x, |v| v.clamp(0.0, 1.0)))
    }

    fn concat_c(&mut self, xs: &[&Rc<Tensor>]) -> Rc<Tensor> {
        let vals: Vec<&Tensor> = xs.iter().map(|v| &***v).collect();
        Rc::new(fw_concat_c(&vals))
    }

    fn nearest_up(&mut self, x: &Rc<Tensor>, f: usize) -> Rc<Tensor> {
        Rc::new(ops::nearest_upsample(x, f))
    }

    fn avg_pool(&mut self, x: &Rc<Tensor>, k: usize) -> Rc<Tensor> {
        Rc::new(ops::avg_pool(x, k))
    }

    fn max_pool2(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(ops::max_pool2(x).0)
    }

    fn bilinear(&mut self, x: &Rc<Tensor>, oh: usize, ow: usize) -> Rc<Tensor> {
        Rc::new(ops::bilinear_resize(x, oh, ow))
    }

    fn bmatmul(&mut self, a: &Rc<Tensor>, ta: bool, b: &Rc<Tensor>, tb: bool) -> Rc<Tensor> {
        Rc::new(ops::bmatmul(a, ta, b, tb))
    }

    fn softmax_rows(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(ops::softmax_rows(x))
    }

    fn reshape(&mut self, x: &Rc<Tensor>, shape: &[usize]) -> Rc<Tensor> {
        Rc::new((**x).clone().reshaped(shape))
    }

    fn sum_all(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(x.data().iter().sum()))
    }

    fn mean_all(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(
            x.data().iter().sum::<f64>() / x.numel() as f64,
        ))
    }

    fn sum_per_sample(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_sum_per_sample(x))
    }

    fn dot_const(&mut self, x: &Rc<Tensor>, w: Vec<f64>) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(
            x.data().iter().zip(&w).map(|(a, b)| a * b).sum(),
        ))
    }

    fn row_diff(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_row_diff(x))
    }

    fn col_diff(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(fw_col_diff(x))
    }

    fn bilinear_form(&mut self, w: &Rc<Tensor>, u: &Tensor, v: &Tensor) -> Rc<Tensor> {
        Rc::new(fw_bilinear_form(w, u, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform_in(-1.0, 1.0);
        }
        t
    }

    /// Central finite differences of `f` w.r.t. every input coordinate,
    /// compared against the tape gradient. `f` builds a scalar from vars.
    fn check_grad<F>(inputs: &[Tensor], f: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root);

        let h = 1e-5;
        for (ii, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[ii]).cloned().unwrap_or_else(|| {
                Tensor::zeros(input.shape())
            });
            for k in 0..input.numel() {
                let eval = |delta: f64| -> f64 {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == ii {
                                t.data_mut()[k] += delta;
                            }
                            tape.leaf(t, false)
                        })
                        .collect();
                    let root = f(&mut tape, &vars);
                    tape.value(&root).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[k];
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "input {ii} coord {k}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = Rng::new(21);
        let x = rand_tensor(&[2, 3, 5, 4], &mut rng);
        let w = rand_tensor(&[2, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        check_grad(&[x, w, b], |t, v| {
            let y = t.conv2d(&v[0], &v[1], Some(&v[2]), ConvGeom::same(1));
            let y = t.sigmoid(&y);
            t.sum_all(&y)
        }, 1e-6);
    }

    #[test]
    fn grad_strided_dilated_conv() {
        let mut rng = Rng::new(22);
        let x = rand_tensor(&[1, 2, 6, 6], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        check_grad(&[x, w], |t, v| {
            let g = ConvGeom {
                stride: 2,
                dilation: 1,
                pad: ops::Pad::uniform(1),
            };
            let y = t.conv2d(&v[0], &v[1], None, g);
            let g2 = ConvGeom::same(2);
            let w2 = t.reshape(&v[1], &[3, 2, 3, 3]);
            let _ = w2;
            let y2 = t.conv2d(&v[0], &v[1], None, g2);
            let s1 = t.sum_all(&y);
            let s2 = t.sum_all(&y2);
            t.add(&s1, &s2)
        }, 1e-6);
    }

    #[test]
    fn grad_attention_chain() {
        let mut rng = Rng::new(23);
        let q = rand_tensor(&[2, 3, 6], &mut rng);
        let k = rand_tensor(&[2, 3, 6], &mut rng);
        let v = rand_tensor(&[2, 2, 6], &mut rng);
        check_grad(&[q, k, v], |t, vars| {
            let att = t.bmatmul(&vars[0], true, &vars[1], false); // [2,6,6]
            let att = t.softmax_rows(&att);
            let out = t.bmatmul(&att, false, &vars[2], true); // [2,6,2]
            let out = t.sigmoid(&out);
            t.mean_all(&out)
        }, 1e-6);
    }

    #[test]
    fn grad_pool_resize_chain() {
        let mut rng = Rng::new(24);
        let x = rand_tensor(&[1, 2, 8, 8], &mut rng);
        check_grad(&[x], |t, v| {
            let a = t.avg_pool(&v[0], 4);
            let b = t.bilinear(&a, 8, 8);
            let c = t.nearest_up(&a, 2);
            let d = t.bilinear(&c, 8, 8);
            let e = t.add(&b, &d);
            let f = t.abs(&e);
            t.sum_all(&f)
        }, 1e-6);
    }

    #[test]
    fn grad_misc_elementwise() {
        let mut rng = Rng::new(25);
        let x = rand_tensor(&[1, 3, 4, 4], &mut rng);
        let m = {
            let mut m = Tensor::zeros(&[1, 1, 4, 4]);
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v = (i % 2) as f64;
            }
            m
        };
        let gain = rand_tensor(&[3], &mut rng);
        let gamma = Tensor::scalar(0.37);
        check_grad(&[x, gain, gamma], |t, v| {
            let m = t.constant(m.clone());
            let a = t.mul_broadcast_c(&v[0], &m);
            let b = t.mul_channel(&a, &v[1]);
            let c = t.mul_scalar_var(&b, &v[2]);
            let d = t.leaky_relu(&c, 0.2);
            let e = t.row_diff(&d);
            let f = t.col_diff(&d);
            let se = t.sum_per_sample(&e);
            let sf = t.sum_per_sample(&f);
            let de = t.dot_const(&se, vec![1.3]);
            let df = t.dot_const(&sf, vec![-0.7]);
            t.add(&de, &df)
        }, 1e-6);
    }

    #[test]
    fn grad_concat_and_div() {
        let mut rng = Rng::new(26);
        let a = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[1, 1, 3, 3], &mut rng);
        let s = Tensor::scalar(1.7);
        check_grad(&[a, b, s], |t, v| {
            let c = t.concat_c(&[&v[0], &v[1]]);
            let d = t.div_scalar_var(&c, &v[2]);
            let e = t.relu(&d);
            t.mean_all(&e)
        }, 1e-6);
    }

    #[test]
    fn grad_bilinear_form() {
        let mut rng = Rng::new(27);
        let w = rand_tensor(&[3, 4], &mut rng);
        let u = rand_tensor(&[3], &mut rng);
        let v = rand_tensor(&[4], &mut rng);
        check_grad(&[w], |t, vars| {
            let s = t.bilinear_form(&vars[0], &u, &v);
            let w2 = t.div_scalar_var(&vars[0], &s);
            let y = t.sigmoid(&w2);
            t.sum_all(&y)
        }, 1e-6);
    }

    #[test]
    fn grad_maxpool() {
        let mut rng = Rng::new(28);
        let x = rand_tensor(&[1, 2, 6, 6], &mut rng);
        check_grad(&[x], |t, v| {
            let y = t.max_pool2(&v[0]);
            let y = t.sigmoid(&y);
            t.sum_all(&y)
        }, 1e-6);
    }

    #[test]
    fn eval_matches_tape() {
        let mut rng = Rng::new(29);
        let x = rand_tensor(&[1, 4, 8, 8], &mut rng);
        let w = rand_tensor(&[4, 4, 3, 3], &mut rng);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let y1 = {
            let c = tape.conv2d(&xv, &wv, None, ConvGeom::same(1));
            let r = tape.relu(&c);
            let p = tape.avg_pool(&r, 2);
            tape.value(&p).clone()
        };

        let mut ev = EvalCtx::new();
        let xe = ev.constant(x);
        let we = ev.constant(w);
        let y2 = {
            let c = ev.conv2d(&xe, &we, None, ConvGeom::same(1));
            let r = ev.relu(&c);
            let p = ev.avg_pool(&r, 2);
            p
        };
        assert_eq!(&y1, &*y2);
    }
}
