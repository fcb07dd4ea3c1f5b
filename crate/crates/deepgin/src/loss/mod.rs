//! The five training loss terms and their weighted total, plus the frozen
//! feature extractor backing the perceptual and style terms.
//!
//! Loss math is written once against the autodiff context, so the exact
//! code that trains is also what the finite-difference suite checks. The
//! public per-image functions are thin eval-mode wrappers.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, MaskTensor};
use crate::nn::{ConvGeom, Ctx, EvalCtx, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub hole: f64,
    pub adv: f64,
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            hole: 5.0,
            adv: 0.001,
            perceptual: 0.05,
            style: 80.0,
            tv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hole", self.hole),
            ("adv", self.adv),
            ("perceptual", self.perceptual),
            ("style", self.style),
            ("tv", self.tv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

/// The channel widths the five tapped layers must expose.
pub const TAP_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

/// Magic/version of the serialized extractor-weights container.
const CONTAINER_MAGIC: &[u8; 4] = b"DGFX";
const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub enum ExtractorMode {
    /// Deterministic random convolutions with the reference layer geometry.
    Stub { seed: u64 },
    /// Weights loaded from a serialized container (a pretrained network
    /// exported into the documented format).
    Pretrained { path: PathBuf },
    /// Passthrough single layer; only for arithmetic tests.
    Identity,
}

#[derive(Debug)]
struct Stage {
    pool_before: bool,
    tap: bool,
    w: Tensor,
    b: Tensor,
}

/// Frozen convolutional feature pyramid with five tapped activation maps of
/// widths 64/128/256/512/512. Weights never receive gradients.
#[derive(Debug)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    identity: bool,
}

impl FeatureExtractor {
    /// Stub mode: one 3x3 He-initialized convolution per tap, max-pooled
    /// between taps. Same seed, same activations, bit-exact.
    pub fn stub(seed: u64) -> Self {
        let mut cin = 3;
        let stages = TAP_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let mut rng = Rng::from_key(&[seed, 0xFEA7, i as u64]);
                let mut w = Tensor::zeros(&[cout, cin, 3, 3]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                w.fill_normal(&mut rng, std);
                let stage = Stage {
                    pool_before: i > 0,
                    tap: true,
                    w,
                    b: Tensor::zeros(&[cout]),
                };
                cin = cout;
                stage
            })
            .collect();
        FeatureExtractor {
            stages,
            identity: false,
        }
    }

    /// Passthrough extractor (phi = identity); test fixture only.
    pub fn identity() -> Self {
        FeatureExtractor {
            stages: Vec::new(),
            identity: true,
        }
    }

    /// Load exported pretrained weights. A missing file is a capability
    /// error: the caller should either provide the weights or switch to
    /// stub mode.
    pub fn pretrained(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|_| {
            Error::Capability(format!(
                "pretrained extractor weights not found at {}; export them into the \
                 documented container or use the stub extractor (extractor=stub)",
                path.display()
            ))
        })?;
        Self::from_container_bytes(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn from_mode(mode: &ExtractorMode) -> Result<Self> {
        match mode {
            ExtractorMode::Stub { seed } => Ok(Self::stub(*seed)),
            ExtractorMode::Pretrained { path } => Self::pretrained(path),
            ExtractorMode::Identity => Ok(Self::identity()),
        }
    }

    fn from_container_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CONTAINER_MAGIC {
            return Err("bad magic (expected DGFX)".into());
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(format!("unsupported container version {version}"));
        }
        let n = r.u32()? as usize;
        let mut stages = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let _name = r.take(name_len)?;
            let pool_before = r.u8()? != 0;
            let tap = r.u8()? != 0;
            let cout = r.u32()? as usize;
            let cin = r.u32()? as usize;
            let kh = r.u32()? as usize;
            let kw = r.u32()? as usize;
            let w = r.f64s(cout * cin * kh * kw)?;
            let b = r.f64s(cout)?;
            stages.push(Stage {
                pool_before,
                tap,
                w: Tensor::from_vec(&[cout, cin, kh, kw], w),
                b: Tensor::from_vec(&[cout], b),
            });
        }
        let taps: Vec<usize> = stages
            .iter()
            .filter(|s| s.tap)
            .map(|s| s.w.shape()[0])
            .collect();
        if taps != TAP_CHANNELS {
            return Err(format!(
                "tapped layers must have channels {TAP_CHANNELS:?}, container has {taps:?}"
            ));
        }
        Ok(FeatureExtractor {
            stages,
            identity: false,
        })
    }

    /// Serialize stages into the container format (used to export weights).
    pub fn write_container(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.stages.len() as u32).to_le_bytes());
        for (i, s) in self.stages.iter().enumerate() {
            let name = format!("conv{i}");
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(s.pool_before as u8);
            out.push(s.tap as u8);
            let (cout, cin, kh, kw) = s.w.dims4();
            for d in [cout, cin, kh, kw] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in s.w.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in s.b.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        if self.identity {
            vec![3]
        } else {
            self.stages
                .iter()
                .filter(|s| s.tap)
                .map(|s| s.w.shape()[0])
                .collect()
        }
    }

    /// Tapped activation maps for a batched image tensor. Weights enter the
    /// context as constants so they can never receive gradient updates.
    pub fn features<C: Ctx>(&self, ctx: &mut C, x: &C::T) -> Vec<C::T> {
        if self.identity {
            return vec![x.clone()];
        }
        let mut taps = Vec::new();
        let mut h = x.clone();
        for s in &self.stages {
            if s.pool_before {
                let (_, _, hh, ww) = ctx.value(&h).dims4();
                if hh >= 2 && ww >= 2 {
                    h = ctx.max_pool2(&h);
                }
            }
            let w = ctx.constant(s.w.clone());
            let b = ctx.constant(s.b.clone());
            h = ctx.conv2d(&h, &w, Some(&b), ConvGeom::same(1));
            h = ctx.relu(&h);
            if s.tap {
                taps.push(h.clone());
            }
        }
        taps
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.at + n > self.bytes.len() {
            return Err("container truncated".into());
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Mask bookkeeping for the region-normalized L1 terms
// ---------------------------------------------------------------------------

/// Batched masks plus per-sample pixel counts at both resolutions. The
/// low-resolution mask is the nearest-neighbor 4x downsampling.
pub struct MaskBatch {
    pub full: Tensor,
    pub lr: Tensor,
    hole_full: Vec<f64>,
    valid_full: Vec<f64>,
    hole_lr: Vec<f64>,
    valid_lr: Vec<f64>,
}

impl MaskBatch {
    pub fn new(masks: &[&MaskTensor]) -> Result<Self> {
        let n = masks.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty mask batch".into()));
        }
        let (h, w) = (masks[0].height(), masks[0].width());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dims {h}x{w} must be divisible by 4"
            )));
        }
        let (lh, lw) = (h / 4, w / 4);
        let mut full = Tensor::zeros(&[n, 1, h, w]);
        let mut lr = Tensor::zeros(&[n, 1, lh, lw]);
        let mut hole_full = vec![0.0; n];
        let mut hole_lr = vec![0.0; n];
        for (s, m) in masks.iter().enumerate() {
            if m.height() != h || m.width() != w {
                return Err(Error::InvalidArgument(
                    "masks in a batch must share one size".into(),
                ));
            }
            for y in 0..h {
                for x in 0..w {
                    let v = m.get(y, x) as f64;
                    full.data_mut()[(s * h + y) * w + x] = v;
                    hole_full[s] += v;
                }
            }
            for y in 0..lh {
                for x in 0..lw {
                    // nearest sample of the 4x4 cell
                    let v = m.get((4 * y + 2).min(h - 1), (4 * x + 2).min(w - 1)) as f64;
                    lr.data_mut()[(s * lh + y) * lw + x] = v;
                    hole_lr[s] += v;
                }
            }
        }
        let valid_full = hole_full.iter().map(|&c| (h * w) as f64 - c).collect();
        let valid_lr = hole_lr.iter().map(|&c| (lh * lw) as f64 - c).collect();
        Ok(MaskBatch {
            full,
            lr,
            hole_full,
            valid_full,
            hole_lr,
            valid_lr,
        })
    }

    /// Per-sample coefficients `1 / (N * channels * count)`, zero when a
    /// sample's region is empty.
    fn coeffs(counts: &[f64], channels: f64) -> Vec<f64> {
        let n = counts.len() as f64;
        counts
            .iter()
            .map(|&c| if c > 0.0 { 1.0 / (n * channels * c) } else { 0.0 })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Loss builders (context-generic; these are what training tapes run)
// ---------------------------------------------------------------------------

/// Mean absolute error over a mask region, batch-averaged with per-sample
/// region normalization.
fn region_l1<C: Ctx>(ctx: &mut C, a: &C::T, b: &C::T, mask: &C::T, coeffs: Vec<f64>) -> C::T {
    let d = ctx.sub(a, b);
    let d = ctx.abs(&d);
    let masked = ctx.mul_broadcast_c(&d, mask);
    let per = ctx.sum_per_sample(&masked);
    ctx.dot_const(&per, coeffs)
}

/// The three-pair L1 terms: returns `(l_hole, l_valid, l_l1)` where
/// `l_l1 = hole_weight * l_hole + l_valid`.
#[allow(clippy::too_many_arguments)]
pub fn l1_terms<C: Ctx>(
    ctx: &mut C,
    i_coarse: &C::T,
    i_out: &C::T,
    i_lr: &C::T,
    i_gt: &C::T,
    i_gt_lr: &C::T,
    mb: &MaskBatch,
    hole_weight: f64,
) -> (C::T, C::T, C::T) {
    let mask_full = ctx.constant(mb.full.clone());
    let mask_lr = ctx.constant(mb.lr.clone());
    let inv_full = ctx.affine(&mask_full, -1.0, 1.0);
    let inv_lr = ctx.affine(&mask_lr, -1.0, 1.0);

    let hole_co = MaskBatch::coeffs(&mb.hole_full, 3.0);
    let valid_co = MaskBatch::coeffs(&mb.valid_full, 3.0);
    let hole_lr_co = MaskBatch::coeffs(&mb.hole_lr, 3.0);
    let valid_lr_co = MaskBatch::coeffs(&mb.valid_lr, 3.0);

    let mut hole = region_l1(ctx, i_coarse, i_gt, &mask_full, hole_co.clone());
    let h2 = region_l1(ctx, i_out, i_gt, &mask_full, hole_co);
    hole = ctx.add(&hole, &h2);
    let h3 = region_l1(ctx, i_lr, i_gt_lr, &mask_lr, hole_lr_co);
    hole = ctx.add(&hole, &h3);

    let mut valid = region_l1(ctx, i_coarse, i_gt, &inv_full, valid_co.clone());
    let v2 = region_l1(ctx, i_out, i_gt, &inv_full, valid_co);
    valid = ctx.add(&valid, &v2);
    let v3 = region_l1(ctx, i_lr, i_gt_lr, &inv_lr, valid_lr_co);
    valid = ctx.add(&valid, &v3);

    let weighted = ctx.affine(&hole, hole_weight, 0.0);
    let l1 = ctx.add(&weighted, &valid);
    (hole, valid, l1)
}

/// Generator hinge term: `-mean(map1) - mean(map2)`.
pub fn adv_g<C: Ctx>(ctx: &mut C, map1: &C::T, map2: &C::T) -> C::T {
    let a = ctx.mean_all(map1);
    let b = ctx.mean_all(map2);
    let s = ctx.add(&a, &b);
    ctx.affine(&s, -1.0, 0.0)
}

/// Critic hinge term, summed over the two scales:
/// `mean(relu(1 - real)) + mean(relu(1 + fake))` per scale.
pub fn adv_d<C: Ctx>(
    ctx: &mut C,
    real: (&C::T, &C::T),
    fake: (&C::T, &C::T),
) -> C::T {
    let mut total: Option<C::T> = None;
    for (r, f) in [(real.0, fake.0), (real.1, fake.1)] {
        let rm = ctx.affine(r, -1.0, 1.0);
        let rm = ctx.relu(&rm);
        let rm = ctx.mean_all(&rm);
        let fm = ctx.affine(f, 1.0, 1.0);
        let fm = ctx.relu(&fm);
        let fm = ctx.mean_all(&fm);
        let s = ctx.add(&rm, &fm);
        total = Some(match total {
            Some(t) => ctx.add(&t, &s),
            None => s,
        });
    }
    total.unwrap()
}

/// Normalized feature auto-correlation `F F^T / (C*H*W)` per sample,
/// with F the [C, H*W] flattening: output [N, C, C].
pub fn gram_t<C: Ctx>(ctx: &mut C, f: &C::T) -> C::T {
    let (n, c, h, w) = ctx.value(f).dims4();
    let flat = ctx.reshape(f, &[n, c, h * w]);
    let g = ctx.bmatmul(&flat, false, &flat, true);
    ctx.affine(&g, 1.0 / (c * h * w) as f64, 0.0)
}

/// Per-layer element-count-normalized L1 feature distance summed over the
/// five taps, for both the raw and the composited output.
pub fn perceptual<C: Ctx>(
    ctx: &mut C,
    extractor: &FeatureExtractor,
    i_out: &C::T,
    i_compltd: &C::T,
    i_gt: &C::T,
) -> C::T {
    let f_out = extractor.features(ctx, i_out);
    let f_cmp = extractor.features(ctx, i_compltd);
    let f_gt = extractor.features(ctx, i_gt);
    let mut total: Option<C::T> = None;
    for probe in [&f_out, &f_cmp] {
        for (a, g) in probe.iter().zip(&f_gt) {
            let d = ctx.sub(a, g);
            let d = ctx.abs(&d);
            let m = ctx.mean_all(&d);
            total = Some(match total {
                Some(t) => ctx.add(&t, &m),
                None => m,
            });
        }
    }
    total.unwrap()
}

/// Gram-matrix distance with inner `1/(C*H*W)` and outer `1/C^2`
/// normalization, summed over taps for both probe images.
pub fn style<C: Ctx>(
    ctx: &mut C,
    extractor: &FeatureExtractor,
    i_out: &C::T,
    i_compltd: &C::T,
    i_gt: &C::T,
) -> C::T {
    let f_out = extractor.features(ctx, i_out);
    let f_cmp = extractor.features(ctx, i_compltd);
    let f_gt = extractor.features(ctx, i_gt);
    let grams_gt: Vec<C::T> = f_gt.iter().map(|f| gram_t(ctx, f)).collect();
    let mut total: Option<C::T> = None;
    for probe in [&f_out, &f_cmp] {
        for (f, ggt) in probe.iter().zip(&grams_gt) {
            let (n, c, _, _) = ctx.value(f).dims4();
            let g = gram_t(ctx, f);
            let d = ctx.sub(&g, ggt);
            let d = ctx.abs(&d);
            let per = ctx.sum_per_sample(&d);
            let coeff = vec![1.0 / (n * c * c) as f64; n];
            let m = ctx.dot_const(&per, coeff);
            total = Some(match total {
                Some(t) => ctx.add(&t, &m),
                None => m,
            });
        }
    }
    total.unwrap()
}

/// Total variation over row- and column-adjacent differences, each term
/// normalized by its element count.
pub fn tv<C: Ctx>(ctx: &mut C, x: &C::T) -> C::T {
    let (n, c, h, w) = ctx.value(x).dims4();
    let mut total: Option<C::T> = None;
    if h >= 2 {
        let rd = ctx.row_diff(x);
        let rd = ctx.abs(&rd);
        let s = ctx.sum_all(&rd);
        let t = ctx.affine(&s, 1.0 / (n * c * (h - 1) * w) as f64, 0.0);
        total = Some(t);
    }
    if w >= 2 {
        let cd = ctx.col_diff(x);
        let cd = ctx.abs(&cd);
        let s = ctx.sum_all(&cd);
        let t = ctx.affine(&s, 1.0 / (n * c * h * (w - 1)) as f64, 0.0);
        total = Some(match total {
            Some(acc) => ctx.add(&acc, &t),
            None => t,
        });
    }
    total.unwrap_or_else(|| ctx.constant(Tensor::scalar(0.0)))
}

// ---------------------------------------------------------------------------
// Public per-image operations (eval-mode wrappers)
// ---------------------------------------------------------------------------

fn check_same_size(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::InvalidArgument(format!(
            "{what}: size mismatch {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Three-pair L1 loss `(l_hole, l_valid, l_l1)`; the low-resolution ground
/// truth is derived internally by 4x mean pooling.
pub fn l1_loss(
    i_coarse: &ImageTensor,
    i_out: &ImageTensor,
    i_lr: &ImageTensor,
    i_gt: &ImageTensor,
    m: &MaskTensor,
    hole_weight: f64,
) -> Result<(f64, f64, f64)> {
    check_same_size(i_coarse, i_gt, "l1_loss coarse")?;
    check_same_size(i_out, i_gt, "l1_loss out")?;
    if i_lr.height() * 4 != i_gt.height() || i_lr.width() * 4 != i_gt.width() {
        return Err(Error::InvalidArgument(
            "l1_loss: low-resolution pair must be a 4x downscale".into(),
        ));
    }
    if m.height() != i_gt.height() || m.width() != i_gt.width() {
        return Err(Error::InvalidArgument("l1_loss: mask size mismatch".into()));
    }
    let i_gt_lr = crate::image::scale4(i_gt, crate::image::ScaleDirection::Down)?;
    let mb = MaskBatch::new(&[m])?;
    let mut ctx = EvalCtx::new();
    let c = ctx.constant(i_coarse.to_tensor());
    let o = ctx.constant(i_out.to_tensor());
    let l = ctx.constant(i_lr.to_tensor());
    let g = ctx.constant(i_gt.to_tensor());
    let glr = ctx.constant(i_gt_lr.to_tensor());
    let (hole, valid, l1) = l1_terms(&mut ctx, &c, &o, &l, &g, &glr, &mb, hole_weight);
    Ok((hole.item(), valid.item(), l1.item()))
}

/// Generator hinge loss from two patch maps.
pub fn adv_g_loss(map1: &Tensor, map2: &Tensor) -> f64 {
    let mut ctx = EvalCtx::new();
    let a = ctx.constant(map1.clone());
    let b = ctx.constant(map2.clone());
    adv_g(&mut ctx, &a, &b).item()
}

/// Critic hinge loss from (real, fake) patch maps at both scales.
pub fn adv_d_loss(real: (&Tensor, &Tensor), fake: (&Tensor, &Tensor)) -> f64 {
    let mut ctx = EvalCtx::new();
    let r1 = ctx.constant(real.0.clone());
    let r2 = ctx.constant(real.1.clone());
    let f1 = ctx.constant(fake.0.clone());
    let f2 = ctx.constant(fake.1.clone());
    adv_d(&mut ctx, (&r1, &r2), (&f1, &f2)).item()
}

/// Normalized auto-correlation matrix of a single [C, H, W] feature map.
pub fn gram(f: &Tensor) -> Tensor {
    let shape = f.shape().to_vec();
    assert_eq!(shape.len(), 3, "gram expects [C, H, W]");
    let mut ctx = EvalCtx::new();
    let f4 = ctx.constant(f.clone().reshaped(&[1, shape[0], shape[1], shape[2]]));
    let g = gram_t(&mut ctx, &f4);
    (*g).clone().reshaped(&[shape[0], shape[0]])
}

pub fn perceptual_loss(
    i_out: &ImageTensor,
    i_compltd: &ImageTensor,
    i_gt: &ImageTensor,
    extractor: &FeatureExtractor,
) -> Result<f64> {
    check_same_size(i_out, i_gt, "perceptual_loss")?;
    check_same_size(i_compltd, i_gt, "perceptual_loss")?;
    let mut ctx = EvalCtx::new();
    let o = ctx.constant(i_out.to_tensor());
    let c = ctx.constant(i_compltd.to_tensor());
    let g = ctx.constant(i_gt.to_tensor());
    Ok(perceptual(&mut ctx, extractor, &o, &c, &g).item())
}

pub fn style_loss(
    i_out: &ImageTensor,
    i_compltd: &ImageTensor,
    i_gt: &ImageTensor,
    extractor: &FeatureExtractor,
) -> Result<f64> {
    check_same_size(i_out, i_gt, "style_loss")?;
    check_same_size(i_compltd, i_gt, "style_loss")?;
    let mut ctx = EvalCtx::new();
    let o = ctx.constant(i_out.to_tensor());
    let c = ctx.constant(i_compltd.to_tensor());
    let g = ctx.constant(i_gt.to_tensor());
    Ok(style(&mut ctx, extractor, &o, &c, &g).item())
}

pub fn tv_loss(i_compltd: &ImageTensor) -> f64 {
    let mut ctx = EvalCtx::new();
    let x = ctx.constant(i_compltd.to_tensor());
    tv(&mut ctx, &x).item()
}

/// The scalar parts of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GLossParts {
    /// Combined three-pair L1 term (hole weighting already folded in).
    pub l1: f64,
    pub adv_g: f64,
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
}

/// Weighted total of the generator objective. Any non-finite part aborts
/// with an error naming the offending term.
pub fn total_g_loss(parts: &GLossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("l1", parts.l1),
        ("adv_g", parts.adv_g),
        ("perceptual", parts.perceptual),
        ("style", parts.style),
        ("tv", parts.tv),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    Ok(parts.l1
        + w.adv * parts.adv_g
        + w.perceptual * parts.perceptual
        + w.style * parts.style
        + w.tv * parts.tv)
}
