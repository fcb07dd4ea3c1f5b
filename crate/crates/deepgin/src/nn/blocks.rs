//! Reusable blocks: residual blocks (standard / dilated / spatial-pyramid
//! dilated), the non-local self-attention block, and spectrally normalized
//! convolution for the critics.
//!
//! None of the blocks carry normalization layers; every residual path is an
//! exact identity when its weights are zero.

use super::ops::ConvGeom;
use super::tape::Ctx;
use super::tensor::Tensor;
use super::{ParamBuilder, ParamId, ParamKind};

/// A plain convolution layer: weight, bias and fixed geometry.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl ConvLayer {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
    ) -> Self {
        ConvLayer {
            w: pb.conv_weight(format!("{name}.w"), cout, cin, k),
            b: pb.add(format!("{name}.b"), &[cout], ParamKind::Bias),
            geom,
        }
    }

    pub fn fwd<C: Ctx>(&self, ctx: &mut C, p: &[C::T], x: &C::T) -> C::T {
        ctx.conv2d(x, &p[self.w.0], Some(&p[self.b.0]), self.geom)
    }
}

/// Which first-convolution layout a residual block uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 convolutions at dilation 1.
    Std,
    /// First convolution dilated by 2.
    Dilated,
    /// First convolution split into parallel dilated branches over equal
    /// channel shards; parameter count matches `Std` exactly.
    Spd { rates: Vec<usize> },
}

impl BlockKind {
    pub fn spd(rates: &[usize]) -> Self {
        BlockKind::Spd {
            rates: rates.to_vec(),
        }
    }
}

/// Residual block `x + conv2(relu(conv1(x)))` where `conv1` is either a
/// single (possibly dilated) convolution or a pyramid of dilated branches
/// concatenated back to the full width.
#[derive(Debug, Clone)]
pub struct ResBlock {
    branches: Vec<ConvLayer>,
    fuse: ConvLayer,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, kind: &BlockKind) -> ResBlock {
        let branches = match kind {
            BlockKind::Std => vec![ConvLayer::new(
                pb,
                &format!("{name}.conv1"),
                c,
                c,
                3,
                ConvGeom::same(1),
            )],
            BlockKind::Dilated => vec![ConvLayer::new(
                pb,
                &format!("{name}.conv1"),
                c,
                c,
                3,
                ConvGeom::same(2),
            )],
            BlockKind::Spd { rates } => {
                assert!(
                    c % rates.len() == 0,
                    "channels {c} not divisible by {} pyramid branches",
                    rates.len()
                );
                let shard = c / rates.len();
                rates
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        ConvLayer::new(
                            pb,
                            &format!("{name}.branch{i}_d{r}"),
                            c,
                            shard,
                            3,
                            ConvGeom::same(r),
                        )
                    })
                    .collect()
            }
        };
        let fuse = ConvLayer::new(pb, &format!("{name}.conv2"), c, c, 3, ConvGeom::same(1));
        ResBlock { branches, fuse }
    }

    pub fn fwd<C: Ctx>(&self, ctx: &mut C, p: &[C::T], x: &C::T) -> C::T {
        let mid = if self.branches.len() == 1 {
            self.branches[0].fwd(ctx, p, x)
        } else {
            let parts: Vec<C::T> = self.branches.iter().map(|b| b.fwd(ctx, p, x)).collect();
            let refs: Vec<&C::T> = parts.iter().collect();
            ctx.concat_c(&refs)
        };
        let mid = ctx.relu(&mid);
        let out = self.fuse.fwd(ctx, p, &mid);
        ctx.add(x, &out)
    }
}

/// Non-local self-attention: embedded-Gaussian affinity over all spatial
/// positions, with half-width query/key/value projections and a learnable
/// residual gain initialized to zero.
#[derive(Debug, Clone)]
pub struct SaBlock {
    query: ConvLayer,
    key: ConvLayer,
    value: ConvLayer,
    out: ConvLayer,
    pub gamma: ParamId,
}

fn conv1x1(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> ConvLayer {
    ConvLayer::new(
        pb,
        name,
        cin,
        cout,
        1,
        ConvGeom {
            stride: 1,
            dilation: 1,
            pad: super::ops::Pad::uniform(0),
        },
    )
}

impl SaBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> SaBlock {
        assert!(c % 2 == 0, "self-attention width {c} must be even");
        let inner = c / 2;
        SaBlock {
            query: conv1x1(pb, &format!("{name}.query"), c, inner),
            key: conv1x1(pb, &format!("{name}.key"), c, inner),
            value: conv1x1(pb, &format!("{name}.value"), c, inner),
            out: conv1x1(pb, &format!("{name}.out"), inner, c),
            gamma: pb.add(format!("{name}.gamma"), &[1], ParamKind::Gamma),
        }
    }

    /// Forward pass returning `(output, attention)`; the attention matrix is
    /// `[N, H*W, H*W]` with rows summing to one.
    pub fn fwd_with_attention<C: Ctx>(
        &self,
        ctx: &mut C,
        p: &[C::T],
        x: &C::T,
    ) -> (C::T, C::T) {
        let (n, _c, h, w) = ctx.value(x).dims4();
        let hw = h * w;
        let q = self.query.fwd(ctx, p, x);
        let k = self.key.fwd(ctx, p, x);
        let v = self.value.fwd(ctx, p, x);
        let inner = ctx.value(&q).shape()[1];
        let q = ctx.reshape(&q, &[n, inner, hw]);
        let k = ctx.reshape(&k, &[n, inner, hw]);
        let v = ctx.reshape(&v, &[n, inner, hw]);
        let logits = ctx.bmatmul(&q, true, &k, false); // [n, hw, hw]
        let att = ctx.softmax_rows(&logits);
        // (att . V^T)^T computed directly as V . att^T to stay channel-major
        let attv = ctx.bmatmul(&v, false, &att, true); // [n, inner, hw]
        let attv = ctx.reshape(&attv, &[n, inner, h, w]);
        let proj = self.out.fwd(ctx, p, &attv);
        let scaled = ctx.mul_scalar_var(&proj, &p[self.gamma.0]);
        (ctx.add(x, &scaled), att)
    }

    pub fn fwd<C: Ctx>(&self, ctx: &mut C, p: &[C::T], x: &C::T) -> C::T {
        self.fwd_with_attention(ctx, p, x).0
    }
}

/// One power-iteration step. Updates `u` in place and returns the matching
/// right vector and the spectral-norm estimate `u^T W v`.
pub fn power_iterate(w: &Tensor, u: &mut Tensor) -> (Tensor, f64) {
    let rows = u.numel();
    let cols = w.numel() / rows;
    let v = right_vector(w, u, rows, cols);
    // u <- normalize(W v)
    let mut new_u = vec![0.0; rows];
    for (r, nu) in new_u.iter_mut().enumerate() {
        let row = &w.data()[r * cols..(r + 1) * cols];
        *nu = row.iter().zip(v.data()).map(|(a, b)| a * b).sum();
    }
    normalize(&mut new_u);
    u.data_mut().copy_from_slice(&new_u);
    let sigma = sigma_of(w, u, &v, cols);
    (v, sigma)
}

/// Frozen-state estimate: derives `v` from the stored `u` without moving it.
pub fn frozen_estimate(w: &Tensor, u: &Tensor) -> (Tensor, f64) {
    let rows = u.numel();
    let cols = w.numel() / rows;
    let v = right_vector(w, u, rows, cols);
    let sigma = sigma_of(w, u, &v, cols);
    (v, sigma)
}

fn right_vector(w: &Tensor, u: &Tensor, rows: usize, cols: usize) -> Tensor {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        let uw = u.data()[r];
        let row = &w.data()[r * cols..(r + 1) * cols];
        for (vv, &wv) in v.iter_mut().zip(row) {
            *vv += uw * wv;
        }
    }
    normalize(&mut v);
    Tensor::from_vec(&[cols], v)
}

fn sigma_of(w: &Tensor, u: &Tensor, v: &Tensor, cols: usize) -> f64 {
    let mut sigma = 0.0;
    for (r, &uv) in u.data().iter().enumerate() {
        let row = &w.data()[r * cols..(r + 1) * cols];
        sigma += uv * row.iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>();
    }
    sigma
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v {
        *x /= norm;
    }
}

/// Convolution wrapped in spectral normalization. The left singular-vector
/// estimate `u` is caller-owned state: it advances once per training-mode
/// forward and stays frozen in evaluation mode.
#[derive(Debug, Clone)]
pub struct SnConv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl SnConv {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
    ) -> Self {
        SnConv {
            w: pb.conv_weight(format!("{name}.w"), cout, cin, k),
            b: pb.add(format!("{name}.b"), &[cout], ParamKind::Bias),
            geom,
        }
    }

    /// `w_value` is the raw weight tensor (for the power iteration); the taped
    /// sigma is rebuilt from (u, v) via a bilinear form so gradients flow
    /// through the normalization.
    pub fn fwd<C: Ctx>(
        &self,
        ctx: &mut C,
        p: &[C::T],
        w_value: &Tensor,
        u: &mut Tensor,
        x: &C::T,
        training: bool,
    ) -> C::T {
        let (v, _sigma) = if training {
            power_iterate(w_value, u)
        } else {
            frozen_estimate(w_value, u)
        };
        let w_var = &p[self.w.0];
        let sigma_var = ctx.bilinear_form(w_var, u, &v);
        // sigma is nonnegative by construction; the epsilon keeps the
        // all-zero-weight edge case finite
        let sigma_var = ctx.affine(&sigma_var, 1.0, 1e-12);
        let w_bar = ctx.div_scalar_var(w_var, &sigma_var);
        ctx.conv2d(x, &w_bar, Some(&p[self.b.0]), self.geom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::{EvalCtx, Tape};
    use crate::nn::{param_count, ParamStore};
    use crate::rng::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform_in(-1.0, 1.0);
        }
        t
    }

    fn run_block(block: &ResBlock, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut ctx = EvalCtx::new();
        let p = store.bind(&mut ctx, false);
        let xv = ctx.constant(x.clone());
        let y = block.fwd(&mut ctx, &p, &xv);
        (*y).clone()
    }

    #[test]
    fn zero_weights_are_identity_for_all_variants() {
        let mut rng = Rng::new(5);
        let x = rand_tensor(&[2, 8, 6, 6], &mut rng);
        for kind in [
            BlockKind::Std,
            BlockKind::Dilated,
            BlockKind::spd(&[1, 2, 4, 8]),
        ] {
            let mut pb = ParamBuilder::new();
            let block = ResBlock::new(&mut pb, "blk", 8, &kind);
            let specs = pb.finish();
            let store = ParamStore::init(&specs, 0, 0.0); // scale 0 => all zero
            let y = run_block(&block, &store, &x);
            assert_eq!(y, x, "variant {kind:?} not an identity at zero weights");
        }
    }

    #[test]
    fn parameter_parity_spd_vs_std() {
        for c in [32usize, 64, 256] {
            let mut pb = ParamBuilder::new();
            ResBlock::new(&mut pb, "std", c, &BlockKind::Std);
            let std_count = param_count(&pb.finish());
            for k in [1usize, 2, 4, 8] {
                let rates: Vec<usize> = (1..=k).collect();
                let mut pb = ParamBuilder::new();
                ResBlock::new(&mut pb, "spd", c, &BlockKind::spd(&rates));
                assert_eq!(param_count(&pb.finish()), std_count, "c={c} k={k}");
            }
        }
    }

    #[test]
    fn std_block_count_formula() {
        // 2*(3*3*256*256) + 2*256 = 1,180,160
        let mut pb = ParamBuilder::new();
        ResBlock::new(&mut pb, "b", 256, &BlockKind::Std);
        assert_eq!(param_count(&pb.finish()), 1_180_160);
    }

    #[test]
    fn single_rate_pyramid_matches_std_numerically() {
        let mut pb = ParamBuilder::new();
        let std_block = ResBlock::new(&mut pb, "b", 8, &BlockKind::Std);
        let specs = pb.finish();
        let store = ParamStore::init(&specs, 3, 0.2);

        let mut pb2 = ParamBuilder::new();
        let spd_block = ResBlock::new(&mut pb2, "b", 8, &BlockKind::spd(&[1]));
        let specs2 = pb2.finish();
        // same shapes in the same order -> copy the values across
        let store2 = ParamStore::from_values(
            specs2
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    assert_eq!(s.shape, specs[i].shape);
                    store.values()[i].clone()
                })
                .collect(),
        );

        let mut rng = Rng::new(8);
        let x = rand_tensor(&[1, 8, 5, 5], &mut rng);
        assert_eq!(run_block(&std_block, &store, &x), run_block(&spd_block, &store2, &x));
    }

    #[test]
    fn dilated_first_conv_footprint_spans_5x5() {
        let mut pb = ParamBuilder::new();
        let block = ResBlock::new(&mut pb, "b", 1, &BlockKind::Dilated);
        let specs = pb.finish();
        let mut store = ParamStore::init(&specs, 0, 0.0);
        // all-ones first conv, zero second conv: y - x isolates conv1's footprint
        for v in store.get_mut(block.branches[0].w).data_mut() {
            *v = 1.0;
        }
        let mut x = Tensor::zeros(&[1, 1, 7, 7]);
        x.data_mut()[3 * 7 + 3] = 1.0;

        let mut ctx = EvalCtx::new();
        let p = store.bind(&mut ctx, false);
        let xv = ctx.constant(x.clone());
        let mid = block.branches[0].fwd(&mut ctx, &p, &xv);

        let (mut min_r, mut max_r, mut min_c, mut max_c) = (7usize, 0usize, 7usize, 0usize);
        for r in 0..7 {
            for c in 0..7 {
                if ctx.value(&mid).data()[r * 7 + c] != 0.0 {
                    min_r = min_r.min(r);
                    max_r = max_r.max(r);
                    min_c = min_c.min(c);
                    max_c = max_c.max(c);
                }
            }
        }
        assert_eq!((max_r - min_r + 1, max_c - min_c + 1), (5, 5));
    }

    #[test]
    fn attention_rows_sum_to_one_and_gamma_zero_is_identity() {
        let mut pb = ParamBuilder::new();
        let sa = SaBlock::new(&mut pb, "sa", 8);
        let specs = pb.finish();
        let store = ParamStore::init(&specs, 11, 0.3); // gamma stays 0
        let mut rng = Rng::new(12);
        let x = rand_tensor(&[2, 8, 4, 4], &mut rng);

        let mut ctx = EvalCtx::new();
        let p = store.bind(&mut ctx, false);
        let xv = ctx.constant(x.clone());
        let (y, att) = sa.fwd_with_attention(&mut ctx, &p, &xv);
        assert_eq!(&*y, &x, "gamma=0 must leave the input untouched");
        let (n, m, c) = ctx.value(&att).dims3();
        assert_eq!((n, m, c), (2, 16, 16));
        for r in 0..n * m {
            let s: f64 = ctx.value(&att).data()[r * c..(r + 1) * c].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_single_position_closed_form() {
        // H = W = 1: attention is [[1]], so y = x + gamma * out(v(x)).
        let mut pb = ParamBuilder::new();
        let sa = SaBlock::new(&mut pb, "sa", 4);
        let specs = pb.finish();
        let mut store = ParamStore::init(&specs, 13, 0.5);
        store.get_mut(sa.gamma).data_mut()[0] = 0.8;
        let mut rng = Rng::new(14);
        let x = rand_tensor(&[1, 4, 1, 1], &mut rng);

        let mut ctx = EvalCtx::new();
        let p = store.bind(&mut ctx, false);
        let xv = ctx.constant(x.clone());
        let (y, att) = sa.fwd_with_attention(&mut ctx, &p, &xv);
        assert!((ctx.value(&att).item() - 1.0).abs() < 1e-12);

        let vx = sa.value.fwd(&mut ctx, &p, &xv);
        let ovx = sa.out.fwd(&mut ctx, &p, &vx);
        for i in 0..4 {
            let expected = x.data()[i] + 0.8 * ctx.value(&ovx).data()[i];
            assert!((ctx.value(&y).data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn power_iteration_exact_on_rank_one() {
        // W = sigma * a b^T has sole singular value sigma; one step recovers it.
        let a = [0.6, 0.8];
        let b = [0.48, 0.6, 0.64];
        let sigma = 3.7;
        let mut w = Tensor::zeros(&[2, 3]);
        let bn = (b.iter().map(|v| v * v).sum::<f64>()).sqrt();
        for r in 0..2 {
            for c in 0..3 {
                w.data_mut()[r * 3 + c] = sigma * a[r] * b[c] / bn;
            }
        }
        let mut u = Tensor::from_vec(&[2], vec![1.0, 0.0]);
        let (_, est) = power_iterate(&w, &mut u);
        assert!((est - sigma).abs() < 1e-12, "estimate {est}");
    }

    #[test]
    fn sn_conv_scale_invariant_and_linear_in_x() {
        let mut pb = ParamBuilder::new();
        let sn = SnConv::new(&mut pb, "d", 3, 5, 4, ConvGeom {
            stride: 2,
            dilation: 1,
            pad: super::super::ops::Pad::same_even(4, 2),
        });
        let specs = pb.finish();
        let mut rng = Rng::new(15);
        let mut store = ParamStore::init(&specs, 16, 1.0);
        for v in store.get_mut(sn.w).data_mut() {
            *v = rng.uniform_in(-1.0, 1.0);
        }
        let mut u = rand_tensor(&[5], &mut rng);
        // warm the estimate
        for _ in 0..30 {
            power_iterate(store.get(sn.w), &mut u);
        }

        let x = rand_tensor(&[1, 3, 8, 8], &mut rng);
        let run = |store: &ParamStore, u: &Tensor, x: &Tensor| -> Tensor {
            let mut ctx = EvalCtx::new();
            let p = store.bind(&mut ctx, false);
            let xv = ctx.constant(x.clone());
            let mut u = u.clone();
            let y = sn.fwd(&mut ctx, &p, store.get(sn.w), &mut u, &xv, false);
            (*y).clone()
        };
        let y1 = run(&store, &u, &x);

        // scaling W by 10 leaves the normalized convolution unchanged
        let mut scaled = store.clone();
        for v in scaled.get_mut(sn.w).data_mut() {
            *v *= 10.0;
        }
        let y2 = run(&scaled, &u, &x);
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-9);
        }

        // frozen-state output is linear in x (bias fixed at zero init)
        let x2 = rand_tensor(&[1, 3, 8, 8], &mut rng);
        let mut x_sum = x.clone();
        for (v, &o) in x_sum.data_mut().iter_mut().zip(x2.data()) {
            *v += o;
        }
        let ya = run(&store, &u, &x2);
        let yb = run(&store, &u, &x_sum);
        for ((s, a), b) in yb.data().iter().zip(ya.data()).zip(y1.data()) {
            assert!((s - (a + b)).abs() < 1e-9);
        }
    }

    #[test]
    fn taped_block_has_gradients_for_all_params() {
        let mut pb = ParamBuilder::new();
        let block = ResBlock::new(&mut pb, "b", 4, &BlockKind::spd(&[1, 2]));
        let specs = pb.finish();
        let store = ParamStore::init(&specs, 20, 0.2);
        let mut rng = Rng::new(21);
        let x = rand_tensor(&[1, 4, 5, 5], &mut rng);

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let xv = tape.constant(x);
        let y = block.fwd(&mut tape, &p, &xv);
        let z = tape.sigmoid(&y);
        let root = tape.sum_all(&z);
        let grads = tape.backward(root);
        for (i, v) in p.iter().enumerate() {
            let g = grads.get(*v).unwrap_or_else(|| panic!("no grad for param {i}"));
            assert!(g.data().iter().any(|&x| x != 0.0), "zero grad for param {i}");
        }
    }
}
