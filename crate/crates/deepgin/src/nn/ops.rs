//! Forward and backward kernels for the network ops.
//!
//! Convolutions are lowered to GEMM via im2col; the GEMM itself is
//! `matrixmultiply::dgemm`, which is single-threaded and bit-deterministic
//! for fixed shapes, so whole-model forwards and backwards reproduce
//! exactly across runs.

use super::tensor::Tensor;

/// Explicit, possibly asymmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub fn uniform(p: usize) -> Self {
        Pad {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Padding that together with an even kernel keeps `out = in / stride`
    /// (extra pixel goes to the bottom/right edge).
    pub fn same_even(kernel: usize, stride: usize) -> Self {
        let total = kernel - stride;
        Pad {
            top: total / 2,
            bottom: total - total / 2,
            left: total / 2,
            right: total - total / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub pad: Pad,
}

impl ConvGeom {
    /// 3x3-style size-preserving geometry: stride 1, pad = dilation.
    pub fn same(dilation: usize) -> Self {
        ConvGeom {
            stride: 1,
            dilation,
            pad: Pad::uniform(dilation),
        }
    }

    pub fn strided(stride: usize, pad: usize) -> Self {
        ConvGeom {
            stride,
            dilation: 1,
            pad: Pad::uniform(pad),
        }
    }

    pub fn out_dim(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + self.pad.top + self.pad.bottom;
        assert!(
            padded >= span,
            "conv input {input} too small for kernel {kernel} dilation {}",
            self.dilation
        );
        (padded - span) / self.stride + 1
    }
}

/// C = alpha * op(A) * op(B) + beta * C, all row-major.
/// op(A) is m x k; when `ta` the stored layout is k x m (a transposed view).
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), cin * kh * kw * ho * wo);
    let mut row = 0;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let out = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad.top as isize;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad.left as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let mut row = 0;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad.left as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// x: [N, Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout].
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv channel mismatch: input {cin}, weight {wcin}");
    let ho = g.out_dim(h, kh);
    let wo = g.out_dim(wd, kw);
    let ck = cin * kh * kw;
    let mut cols = vec![0.0; ck * ho * wo];
    let mut y = Tensor::zeros(&[n, cout, ho, wo]);
    for s in 0..n {
        im2col(
            &x.data()[s * cin * h * wd..],
            cin,
            h,
            wd,
            kh,
            kw,
            g,
            ho,
            wo,
            &mut cols,
        );
        let out = &mut y.data_mut()[s * cout * ho * wo..(s + 1) * cout * ho * wo];
        gemm(cout, ck, ho * wo, 1.0, w.data(), false, &cols, false, 0.0, out);
        if let Some(bias) = b {
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut out[o * ho * wo..(o + 1) * ho * wo] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Gradients of conv2d w.r.t. input, weight and bias.
/// The im2col buffer is recomputed here instead of being saved at forward
/// time, trading a little compute for tape memory.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, g: ConvGeom, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    let (_, _, ho, wo) = dy.dims4();
    let ck = cin * kh * kw;
    let mut cols = vec![0.0; ck * ho * wo];
    let mut dcols = vec![0.0; ck * ho * wo];
    let mut dx = Tensor::zeros(&[n, cin, h, wd]);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    for s in 0..n {
        let dy_s = &dy.data()[s * cout * ho * wo..(s + 1) * cout * ho * wo];
        im2col(
            &x.data()[s * cin * h * wd..],
            cin,
            h,
            wd,
            kh,
            kw,
            g,
            ho,
            wo,
            &mut cols,
        );
        // dW += dY * cols^T
        gemm(cout, ho * wo, ck, 1.0, dy_s, false, &cols, true, 1.0, dw.data_mut());
        // dcols = W^T * dY
        gemm(ck, cout, ho * wo, 1.0, w.data(), true, dy_s, false, 0.0, &mut dcols);
        col2im(
            &dcols,
            cin,
            h,
            wd,
            kh,
            kw,
            g,
            ho,
            wo,
            &mut dx.data_mut()[s * cin * h * wd..(s + 1) * cin * h * wd],
        );
        for o in 0..cout {
            db.data_mut()[o] += dy_s[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Interpolation table for one axis of an align-corners-false bilinear resize.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let out = y.data_mut();
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                dst[oy * ow + ox] = top + (bot - top) * ty;
            }
        }
    }
    y
}

pub fn bilinear_resize_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (n, c, oh, ow) = dy.dims4();
    if (in_h, in_w) == (oh, ow) {
        return dy.clone();
    }
    let ys = bilinear_axis(in_h, oh);
    let xs = bilinear_axis(in_w, ow);
    let mut dx = Tensor::zeros(&[n, c, in_h, in_w]);
    let dst_all = dx.data_mut();
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dst_all[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let gv = g[oy * ow + ox];
                dst[y0 * in_w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                dst[y0 * in_w + x1] += gv * (1.0 - ty) * tx;
                dst[y1 * in_w + x0] += gv * ty * (1.0 - tx);
                dst[y1 * in_w + x1] += gv * ty * tx;
            }
        }
    }
    dx
}

/// Non-overlapping k x k mean pooling. Requires divisible spatial dims.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h % k == 0 && w % k == 0, "avg_pool {k} on {h}x{w}");
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let out = y.data_mut();
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..k {
                    let row = (oy * k + dy) * w + ox * k;
                    s += src[row..row + k].iter().sum::<f64>();
                }
                dst[oy * ow + ox] = s * inv;
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Tensor, k: usize) -> Tensor {
    let (n, c, oh, ow) = dy.dims4();
    let (h, w) = (oh * k, ow * k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dst_all = dx.data_mut();
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dst_all[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[oy * ow + ox] * inv;
                for dyy in 0..k {
                    let row = (oy * k + dyy) * w + ox * k;
                    for v in &mut dst[row..row + k] {
                        *v += gv;
                    }
                }
            }
        }
    }
    dx
}

pub fn nearest_upsample(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h * f, w * f);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let out = y.data_mut();
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let sy = oy / f;
            for ox in 0..ow {
                dst[oy * ow + ox] = src[sy * w + ox / f];
            }
        }
    }
    y
}

pub fn nearest_upsample_backward(dy: &Tensor, f: usize) -> Tensor {
    let (n, c, oh, ow) = dy.dims4();
    let (h, w) = (oh / f, ow / f);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dst_all = dx.data_mut();
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dst_all[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let sy = oy / f;
            for ox in 0..ow {
                dst[sy * w + ox / f] += g[oy * ow + ox];
            }
        }
    }
    dx
}

/// 2x2 stride-2 max pooling (floor). Returns pooled tensor plus the flat
/// input index of each winner for the backward pass.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    assert!(h >= 2 && w >= 2, "max_pool2 needs at least 2x2 input");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0u32; n * c * oh * ow];
    let out = y.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        let src = &x.data()[base..base + h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (oy * 2 + dy) * w + ox * 2 + dx;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                idx[o] = (base + best_i) as u32;
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward(dy: &Tensor, idx: &[u32], in_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let dst = dx.data_mut();
    for (g, &i) in dy.data().iter().zip(idx) {
        dst[i as usize] += g;
    }
    dx
}

/// Batched matrix multiply: y[s] = op(a[s]) * op(b[s]) for each batch slice.
/// a is [N, ., .] and `ta` transposes the per-slice view.
pub fn bmatmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (na, ra, ca) = a.dims3();
    let (nb, rb, cb) = b.dims3();
    assert_eq!(na, nb, "bmatmul batch mismatch");
    let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    assert_eq!(ka, kb, "bmatmul inner dim mismatch: {ka} vs {kb}");
    let mut y = Tensor::zeros(&[na, m, n]);
    let out = y.data_mut();
    for s in 0..na {
        gemm(
            m,
            ka,
            n,
            1.0,
            &a.data()[s * ra * ca..(s + 1) * ra * ca],
            ta,
            &b.data()[s * rb * cb..(s + 1) * rb * cb],
            tb,
            0.0,
            &mut out[s * m * n..(s + 1) * m * n],
        );
    }
    y
}

/// Row-wise softmax over the last axis of [N, m, n].
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, m, c) = x.dims3();
    let mut y = Tensor::zeros(x.shape());
    let out = y.data_mut();
    for r in 0..n * m {
        let src = &x.data()[r * c..(r + 1) * c];
        let dst = &mut out[r * c..(r + 1) * c];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - max).exp();
            sum += *d;
        }
        let inv = 1.0 / sum;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeom) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, kh, kw) = w.dims4();
        let ho = g.out_dim(h, kh);
        let wo = g.out_dim(wd, kw);
        let mut y = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for o in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize
                                        - g.pad.top as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize
                                        - g.pad.left as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x.data()
                                            [((s * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((s * cout + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform_in(-1.0, 1.0);
        }
        t
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = Rng::new(3);
        for &(stride, dil, pad) in &[(1usize, 1usize, 1usize), (2, 1, 1), (1, 2, 2), (1, 3, 3)] {
            let g = ConvGeom {
                stride,
                dilation: dil,
                pad: Pad::uniform(pad),
            };
            let x = rand_tensor(&[2, 3, 9, 8], &mut rng);
            let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
            let b = rand_tensor(&[4], &mut rng);
            let fast = conv2d(&x, &w, Some(&b), g);
            let slow = naive_conv(&x, &w, &b, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_asymmetric_pad_keeps_even_kernel_size() {
        // 4x4 stride-1 with pad (1,2): out = in, matching the patch critic.
        let g = ConvGeom {
            stride: 1,
            dilation: 1,
            pad: Pad::same_even(4, 1),
        };
        let x = Tensor::full(&[1, 1, 8, 8], 1.0);
        let w = Tensor::full(&[1, 1, 4, 4], 1.0);
        let y = conv2d(&x, &w, None, g);
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        // interior outputs see all 16 taps
        assert!((y.data()[3 * 8 + 3] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let x = Tensor::full(&[1, 3, 6, 6], 0.37);
        let up = bilinear_resize(&x, 13, 9);
        assert!(up.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        let same = bilinear_resize(&x, 6, 6);
        assert_eq!(same, x);
    }

    #[test]
    fn bilinear_matches_pointwise_formula() {
        // 2x2 -> 4x4 of [[0,1],[0,1]] per the align-corners-false convention.
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        let y = bilinear_resize(&x, 4, 4);
        let expected_row = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            for c in 0..4 {
                assert!((y.data()[r * 4 + c] - expected_row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn avg_pool_mean() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f64 / 15.0).collect());
        let y = avg_pool(&x, 4);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nearest_round_trip_shapes() {
        let mut rng = Rng::new(5);
        let x = rand_tensor(&[2, 3, 5, 4], &mut rng);
        let y = nearest_upsample(&x, 2);
        assert_eq!(y.shape(), &[2, 3, 10, 8]);
        let dx = nearest_upsample_backward(&y, 2);
        // backward of forward output sums each 2x2 block: 4x the original
        for (a, e) in dx.data().iter().zip(x.data()) {
            assert!((a - 4.0 * e).abs() < 1e-12);
        }
    }

    #[test]
    fn bmatmul_matches_naive() {
        let mut rng = Rng::new(11);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 4, 5], &mut rng);
        let y = bmatmul(&a, false, &b, false);
        for s in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += a.data()[s * 12 + i * 4 + k] * b.data()[s * 20 + k * 5 + j];
                    }
                    assert!((y.data()[s * 15 + i * 5 + j] - acc).abs() < 1e-12);
                }
            }
        }
        // transposed views agree with explicit transposition
        let yt = bmatmul(&a, true, &a, false); // a^T a : [2,4,4]
        assert_eq!(yt.shape(), &[2, 4, 4]);
        for s in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += a.data()[s * 12 + k * 4 + i] * a.data()[s * 12 + k * 4 + j];
                    }
                    assert!((yt.data()[s * 16 + i * 4 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(17);
        let x = rand_tensor(&[3, 7, 5], &mut rng);
        let y = softmax_rows(&x);
        for r in 0..21 {
            let s: f64 = y.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_picks_max_and_routes_gradient() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.1, 0.9, 0.4, 0.2]);
        let (y, idx) = max_pool2(&x);
        assert!((y.item() - 0.9).abs() < 1e-12);
        let dy = Tensor::scalar(2.0).reshaped(&[1, 1, 1, 1]);
        let dx = max_pool2_backward(&dy, &idx, &[1, 1, 2, 2]);
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
