//! The two-stage inpainting model: coarse generator, refinement generator
//! with multi-scale self-attention and a back-projection output head, plus
//! parameter accounting for the model variants.
//!
//! Both generators share the same encoder-decoder skeleton: a 7x7 stem,
//! two stride-2 downs, a stack of residual blocks at quarter resolution,
//! and two nearest-upsample + conv stages back to full resolution. Outputs
//! go through a sigmoid, so every emitted image lives in [0, 1].

use crate::error::{Error, Result};
use crate::image::{composite, ImageTensor, MaskTensor};
use crate::nn::blocks::{BlockKind, ConvLayer, ResBlock, SaBlock};
use crate::nn::ops::Pad;
use crate::nn::{param_count, ConvGeom, Ctx, EvalCtx, ParamBuilder, ParamId, ParamKind, ParamSpec, ParamStore, Tensor};

/// Residual-block flavor used throughout the generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStyle {
    Std,
    Dilated,
    Spd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Side length of the images the model consumes (the tile size at
    /// inference). The bottleneck runs at a quarter of this.
    pub image_size: usize,
    /// Base width of the coarse generator (bottleneck is 4x this).
    pub g1_base: usize,
    /// Base width of the refinement generator.
    pub g2_base: usize,
    pub blocks_per_stage: usize,
    pub coarse_rates: Vec<usize>,
    pub refine_rates: Vec<usize>,
    /// Channel width of the attention branches in the multi-scale block.
    pub mssa_width: usize,
    /// Hidden width of the low-resolution output head.
    pub lr_head_width: usize,
    pub blocks: BlockStyle,
    pub use_sa: bool,
    pub use_mssa: bool,
    pub use_bp: bool,
}

impl ModelConfig {
    /// Full-scale preset: 256x256 tiles, widths matching the published
    /// parameter budget (~41.3M in the generators).
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 256,
            g1_base: 64,
            g2_base: 128,
            blocks_per_stage: 6,
            coarse_rates: vec![1, 2, 3, 4, 6, 8, 12, 16],
            refine_rates: vec![1, 2, 4, 8],
            mssa_width: 120,
            lr_head_width: 8,
            blocks: BlockStyle::Spd,
            use_sa: true,
            use_mssa: true,
            use_bp: true,
        }
    }

    /// Desk-scale preset small enough to train on one CPU core.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            g1_base: 16,
            g2_base: 32,
            blocks_per_stage: 6,
            coarse_rates: vec![1, 2, 3, 4, 6, 8, 12, 16],
            refine_rates: vec![1, 2, 4, 8],
            mssa_width: 32,
            lr_head_width: 8,
            blocks: BlockStyle::Spd,
            use_sa: true,
            use_mssa: true,
            use_bp: true,
        }
    }

    pub fn g1_bottleneck(&self) -> usize {
        4 * self.g1_base
    }

    pub fn g2_bottleneck(&self) -> usize {
        4 * self.g2_base
    }

    pub fn lr_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of 16",
                self.image_size
            ));
        }
        if self.blocks_per_stage == 0 {
            return fail("blocks_per_stage must be positive".into());
        }
        if self.coarse_rates.is_empty() || self.refine_rates.is_empty() {
            return fail("dilation rate sets must be non-empty".into());
        }
        if self.blocks == BlockStyle::Spd {
            if self.g1_bottleneck() % self.coarse_rates.len() != 0 {
                return fail(format!(
                    "coarse width {} not divisible by {} rates",
                    self.g1_bottleneck(),
                    self.coarse_rates.len()
                ));
            }
            if self.g2_bottleneck() % self.refine_rates.len() != 0 {
                return fail(format!(
                    "refine width {} not divisible by {} rates",
                    self.g2_bottleneck(),
                    self.refine_rates.len()
                ));
            }
        }
        if self.g2_bottleneck() % 2 != 0 || self.mssa_width % 2 != 0 {
            return fail("attention widths must be even".into());
        }
        if self.use_bp && self.lr_head_width == 0 {
            return fail("lr_head_width must be positive".into());
        }
        Ok(())
    }
}

fn stem_geom() -> ConvGeom {
    ConvGeom {
        stride: 1,
        dilation: 1,
        pad: Pad::uniform(3),
    }
}

fn down_geom() -> ConvGeom {
    ConvGeom::strided(2, 1)
}

fn conv1x1_geom() -> ConvGeom {
    ConvGeom {
        stride: 1,
        dilation: 1,
        pad: Pad::uniform(0),
    }
}

fn block_kind(style: BlockStyle, rates: &[usize]) -> BlockKind {
    match style {
        BlockStyle::Std => BlockKind::Std,
        BlockStyle::Dilated => BlockKind::Dilated,
        BlockStyle::Spd => BlockKind::spd(rates),
    }
}

/// Encoder / residual stack / decoder shared by both generators.
struct Backbone {
    stem: ConvLayer,
    down1: ConvLayer,
    down2: ConvLayer,
    up1: ConvLayer,
    up2: ConvLayer,
    out: ConvLayer,
}

impl Backbone {
    fn new(pb: &mut ParamBuilder, prefix: &str, base: usize) -> Self {
        Backbone {
            stem: ConvLayer::new(pb, &format!("{prefix}.stem"), 4, base, 7, stem_geom()),
            down1: ConvLayer::new(pb, &format!("{prefix}.down1"), base, 2 * base, 3, down_geom()),
            down2: ConvLayer::new(
                pb,
                &format!("{prefix}.down2"),
                2 * base,
                4 * base,
                3,
                down_geom(),
            ),
            up1: ConvLayer::new(
                pb,
                &format!("{prefix}.up1"),
                4 * base,
                2 * base,
                3,
                ConvGeom::same(1),
            ),
            up2: ConvLayer::new(
                pb,
                &format!("{prefix}.up2"),
                2 * base,
                base,
                3,
                ConvGeom::same(1),
            ),
            out: ConvLayer::new(pb, &format!("{prefix}.out"), base, 3, 7, stem_geom()),
        }
    }

    fn encode<C: Ctx>(&self, ctx: &mut C, p: &[C::T], x4: &C::T) -> C::T {
        let e = self.stem.fwd(ctx, p, x4);
        let e = ctx.relu(&e);
        let e = self.down1.fwd(ctx, p, &e);
        let e = ctx.relu(&e);
        let e = self.down2.fwd(ctx, p, &e);
        ctx.relu(&e)
    }

    fn decode<C: Ctx>(&self, ctx: &mut C, p: &[C::T], f: &C::T) -> C::T {
        let d = ctx.nearest_up(f, 2);
        let d = self.up1.fwd(ctx, p, &d);
        let d = ctx.relu(&d);
        let d = ctx.nearest_up(&d, 2);
        let d = self.up2.fwd(ctx, p, &d);
        let d = ctx.relu(&d);
        let d = self.out.fwd(ctx, p, &d);
        ctx.sigmoid(&d)
    }
}

/// Coarse reconstruction generator.
pub struct CoarseGenerator {
    backbone: Backbone,
    blocks: Vec<ResBlock>,
}

impl CoarseGenerator {
    fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let backbone = Backbone::new(pb, "g1", cfg.g1_base);
        let kind = block_kind(cfg.blocks, &cfg.coarse_rates);
        let blocks = (0..cfg.blocks_per_stage)
            .map(|i| ResBlock::new(pb, &format!("g1.block{i}"), cfg.g1_bottleneck(), &kind))
            .collect();
        CoarseGenerator { backbone, blocks }
    }

    pub fn forward<C: Ctx>(&self, ctx: &mut C, p: &[C::T], x4: &C::T) -> C::T {
        let mut f = self.backbone.encode(ctx, p, x4);
        for b in &self.blocks {
            f = b.fwd(ctx, p, &f);
        }
        self.backbone.decode(ctx, p, &f)
    }
}

/// Multi-scale self-attention over a quarter-resolution feature map:
/// attention at full, half and quarter bottleneck scale, fused by a 1x1
/// convolution and added back residually.
pub struct MssaBlock {
    reduce_a: ConvLayer,
    sa_a: SaBlock,
    down_b: ConvLayer,
    sa_b: SaBlock,
    down_c1: ConvLayer,
    down_c2: ConvLayer,
    sa_c: SaBlock,
    fuse: ConvLayer,
}

impl MssaBlock {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c: usize, branch_width: usize) -> Self {
        MssaBlock {
            reduce_a: ConvLayer::new(pb, &format!("{prefix}.reduce_a"), c, branch_width, 1, conv1x1_geom()),
            sa_a: SaBlock::new(pb, &format!("{prefix}.sa64"), branch_width),
            down_b: ConvLayer::new(pb, &format!("{prefix}.down_b"), c, branch_width, 3, down_geom()),
            sa_b: SaBlock::new(pb, &format!("{prefix}.sa32"), branch_width),
            down_c1: ConvLayer::new(pb, &format!("{prefix}.down_c1"), c, branch_width, 3, down_geom()),
            down_c2: ConvLayer::new(pb, &format!("{prefix}.down_c2"), branch_width, branch_width, 3, down_geom()),
            sa_c: SaBlock::new(pb, &format!("{prefix}.sa16"), branch_width),
            fuse: ConvLayer::new(pb, &format!("{prefix}.fuse"), 3 * branch_width, c, 1, conv1x1_geom()),
        }
    }

    pub fn forward<C: Ctx>(&self, ctx: &mut C, p: &[C::T], f: &C::T) -> C::T {
        let a = self.reduce_a.fwd(ctx, p, f);
        let a = self.sa_a.fwd(ctx, p, &a);

        let b = self.down_b.fwd(ctx, p, f);
        let b = self.sa_b.fwd(ctx, p, &b);
        let b = ctx.nearest_up(&b, 2);

        let c = self.down_c1.fwd(ctx, p, f);
        let c = self.down_c2.fwd(ctx, p, &c);
        let c = self.sa_c.fwd(ctx, p, &c);
        let c = ctx.nearest_up(&c, 4);

        let cat = ctx.concat_c(&[&a, &b, &c]);
        let fused = self.fuse.fwd(ctx, p, &cat);
        ctx.add(f, &fused)
    }
}

/// Back projection: compare the dedicated low-resolution prediction with
/// the pooled full-resolution one, upsample the residual and add a learned
/// per-channel share of it back, clamped to the image range.
pub fn back_project<C: Ctx>(
    ctx: &mut C,
    i_pre: &C::T,
    i_lr: &C::T,
    gamma: &C::T,
) -> C::T {
    let down = ctx.avg_pool(i_pre, 4);
    let err = ctx.sub(i_lr, &down);
    let (_, _, h, w) = ctx.value(i_pre).dims4();
    let up = ctx.bilinear(&err, h, w);
    let weighted = ctx.mul_channel(&up, gamma);
    let sum = ctx.add(i_pre, &weighted);
    ctx.clamp01(&sum)
}

/// Eval-mode back projection on plain images.
pub fn back_project_images(
    i_pre: &ImageTensor,
    i_lr: &ImageTensor,
    gamma: &[f64; 3],
) -> Result<ImageTensor> {
    if i_pre.height() != 4 * i_lr.height() || i_pre.width() != 4 * i_lr.width() {
        return Err(Error::InvalidArgument(format!(
            "back projection needs a 4x size ratio, got {}x{} vs {}x{}",
            i_pre.height(),
            i_pre.width(),
            i_lr.height(),
            i_lr.width()
        )));
    }
    let mut ctx = EvalCtx::new();
    let pre = ctx.constant(i_pre.to_tensor());
    let lr = ctx.constant(i_lr.to_tensor());
    let g = ctx.constant(Tensor::from_vec(&[3], gamma.to_vec()));
    let out = back_project(&mut ctx, &pre, &lr, &g);
    Ok(ImageTensor::from_tensor(&out))
}

/// Refinement generator with the attention middle and back-projection head.
pub struct RefineGenerator {
    backbone: Backbone,
    pre_blocks: Vec<ResBlock>,
    sa: Option<SaBlock>,
    post_blocks: Vec<ResBlock>,
    mssa: Option<MssaBlock>,
    lr_head: Option<(ConvLayer, ConvLayer)>,
    bp_gamma: Option<ParamId>,
}

impl RefineGenerator {
    fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let c = cfg.g2_bottleneck();
        let backbone = Backbone::new(pb, "g2", cfg.g2_base);
        let kind = block_kind(cfg.blocks, &cfg.refine_rates);
        let half = cfg.blocks_per_stage / 2;
        let pre_blocks = (0..half)
            .map(|i| ResBlock::new(pb, &format!("g2.block{i}"), c, &kind))
            .collect();
        let sa = cfg.use_sa.then(|| SaBlock::new(pb, "g2.sa_mid", c));
        let post_blocks = (half..cfg.blocks_per_stage)
            .map(|i| ResBlock::new(pb, &format!("g2.block{i}"), c, &kind))
            .collect();
        let mssa = cfg
            .use_mssa
            .then(|| MssaBlock::new(pb, "g2.mssa", c, cfg.mssa_width));
        let lr_head = cfg.use_bp.then(|| {
            (
                ConvLayer::new(pb, "g2.lr_head.c1", c, cfg.lr_head_width, 3, ConvGeom::same(1)),
                ConvLayer::new(pb, "g2.lr_head.c2", cfg.lr_head_width, 3, 3, ConvGeom::same(1)),
            )
        });
        let bp_gamma = cfg
            .use_bp
            .then(|| pb.add("g2.bp_gamma", &[3], ParamKind::Gamma));
        RefineGenerator {
            backbone,
            pre_blocks,
            sa,
            post_blocks,
            mssa,
            lr_head,
            bp_gamma,
        }
    }

    /// Returns `(i_out, i_lr, i_pre)`.
    pub fn forward<C: Ctx>(
        &self,
        ctx: &mut C,
        p: &[C::T],
        x4: &C::T,
    ) -> (C::T, Option<C::T>, C::T) {
        let mut f = self.backbone.encode(ctx, p, x4);
        for b in &self.pre_blocks {
            f = b.fwd(ctx, p, &f);
        }
        if let Some(sa) = &self.sa {
            f = sa.fwd(ctx, p, &f);
        }
        for b in &self.post_blocks {
            f = b.fwd(ctx, p, &f);
        }
        if let Some(mssa) = &self.mssa {
            f = mssa.forward(ctx, p, &f);
        }
        let i_lr = self.lr_head.as_ref().map(|(c1, c2)| {
            let h = c1.fwd(ctx, p, &f);
            let h = ctx.relu(&h);
            let h = c2.fwd(ctx, p, &h);
            ctx.sigmoid(&h)
        });
        let i_pre = self.backbone.decode(ctx, p, &f);
        let i_out = match (&i_lr, self.bp_gamma) {
            (Some(lr), Some(gamma)) => back_project(ctx, &i_pre, lr, &p[gamma.0]),
            _ => i_pre.clone(),
        };
        (i_out, i_lr, i_pre)
    }
}

/// All intermediate images of one forward pass, still attached to the
/// execution context.
pub struct GenOutputs<T> {
    pub i_coarse: T,
    pub i_lr: Option<T>,
    pub i_pre: T,
    pub i_out: T,
}

/// Completed-image bundle for one evaluated input.
#[derive(Debug, Clone)]
pub struct InpaintResult {
    pub i_coarse: ImageTensor,
    pub i_lr: ImageTensor,
    pub i_out: ImageTensor,
    pub i_compltd: ImageTensor,
}

/// The full two-stage model: layer layout plus parameter specs. Parameter
/// values are materialized separately (see [`ParamStore`]).
pub struct DeepGin {
    pub cfg: ModelConfig,
    specs: Vec<ParamSpec>,
    pub g1: CoarseGenerator,
    pub g2: RefineGenerator,
}

impl DeepGin {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new();
        let g1 = CoarseGenerator::new(&mut pb, &cfg);
        let g2 = RefineGenerator::new(&mut pb, &cfg);
        Ok(DeepGin {
            cfg,
            specs: pb.finish(),
            g1,
            g2,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Exact count of learnable scalars.
    pub fn param_count(&self) -> u64 {
        param_count(&self.specs)
    }

    pub fn init_params(&self, seed: u64, scale: f64) -> ParamStore {
        ParamStore::init(&self.specs, seed, scale)
    }

    /// Whole-model forward. `i_in` is [N,3,S,S] with holes zero-filled and
    /// `m` is the [N,1,S,S] binary mask.
    pub fn forward<C: Ctx>(&self, ctx: &mut C, p: &[C::T], i_in: &C::T, m: &C::T) -> GenOutputs<C::T> {
        let x4 = ctx.concat_c(&[i_in, m]);
        let i_coarse = self.g1.forward(ctx, p, &x4);
        let x4b = ctx.concat_c(&[&i_coarse, m]);
        let (i_out, i_lr, i_pre) = self.g2.forward(ctx, p, &x4b);
        GenOutputs {
            i_coarse,
            i_lr,
            i_pre,
            i_out,
        }
    }

    fn check_input(&self, img: &ImageTensor, m: &MaskTensor) -> Result<()> {
        let s = self.cfg.image_size;
        if img.height() != s || img.width() != s || m.height() != s || m.width() != s {
            return Err(Error::InvalidArgument(format!(
                "model expects {s}x{s} inputs, got image {}x{} and mask {}x{}",
                img.height(),
                img.width(),
                m.height(),
                m.width()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode coarse pass only.
    pub fn g1_forward(
        &self,
        params: &ParamStore,
        i_in: &ImageTensor,
        m: &MaskTensor,
    ) -> Result<ImageTensor> {
        self.check_input(i_in, m)?;
        let mut ctx = EvalCtx::new();
        let p = params.bind(&mut ctx, false);
        let i_in_t = ctx.constant(i_in.to_tensor());
        let m_t = ctx.constant(m.to_tensor());
        let x4 = ctx.concat_c(&[&i_in_t, &m_t]);
        let out = self.g1.forward(&mut ctx, &p, &x4);
        Ok(ImageTensor::from_tensor(&out))
    }

    /// Evaluation-mode refinement pass: `(i_out, i_lr)`.
    pub fn g2_forward(
        &self,
        params: &ParamStore,
        i_coarse: &ImageTensor,
        m: &MaskTensor,
    ) -> Result<(ImageTensor, ImageTensor)> {
        self.check_input(i_coarse, m)?;
        let mut ctx = EvalCtx::new();
        let p = params.bind(&mut ctx, false);
        let c_t = ctx.constant(i_coarse.to_tensor());
        let m_t = ctx.constant(m.to_tensor());
        let x4 = ctx.concat_c(&[&c_t, &m_t]);
        let (i_out, i_lr, _) = self.g2.forward(&mut ctx, &p, &x4);
        let lr = i_lr.expect("refinement configured without the LR head");
        Ok((
            ImageTensor::from_tensor(&i_out),
            ImageTensor::from_tensor(&lr),
        ))
    }

    /// Evaluation-mode end-to-end pass. When a ground truth is supplied the
    /// completed image has its valid pixels replaced bit-exactly.
    pub fn infer(
        &self,
        params: &ParamStore,
        i_in: &ImageTensor,
        m: &MaskTensor,
        i_gt: Option<&ImageTensor>,
    ) -> Result<InpaintResult> {
        self.check_input(i_in, m)?;
        let mut ctx = EvalCtx::new();
        let p = params.bind(&mut ctx, false);
        self.infer_bound(&mut ctx, &p, i_in, m, i_gt)
    }

    /// Like [`DeepGin::infer`] but reusing an existing parameter binding,
    /// so tiled inference does not re-clone the weights per tile.
    pub fn infer_bound(
        &self,
        ctx: &mut EvalCtx,
        p: &[std::rc::Rc<Tensor>],
        i_in: &ImageTensor,
        m: &MaskTensor,
        i_gt: Option<&ImageTensor>,
    ) -> Result<InpaintResult> {
        self.check_input(i_in, m)?;
        let i_in_t = ctx.constant(i_in.to_tensor());
        let m_t = ctx.constant(m.to_tensor());
        let outs = self.forward(ctx, p, &i_in_t, &m_t);
        let i_out = ImageTensor::from_tensor(&outs.i_out);
        let i_compltd = match i_gt {
            Some(gt) => composite(&i_out, gt, m)?,
            None => i_out.clone(),
        };
        Ok(InpaintResult {
            i_coarse: ImageTensor::from_tensor(&outs.i_coarse),
            i_lr: outs
                .i_lr
                .map(|t| ImageTensor::from_tensor(&t))
                .unwrap_or_else(|| ImageTensor::new(self.cfg.lr_size(), self.cfg.lr_size(), 3)),
            i_out,
            i_compltd,
        })
    }
}

/// Taped compositing: m . i_out + (1 - m) . i_gt with the mask broadcast
/// over channels.
pub fn composite_t<C: Ctx>(ctx: &mut C, i_out: &C::T, i_gt: &C::T, m: &C::T) -> C::T {
    let hole = ctx.mul_broadcast_c(i_out, m);
    let inv = ctx.affine(m, -1.0, 1.0);
    let valid = ctx.mul_broadcast_c(i_gt, &inv);
    ctx.add(&hole, &valid)
}

/// Parameter counts of the ablation variants, mirroring the published
/// model table.
pub fn variant_counts(base: &ModelConfig) -> Result<VariantCounts> {
    let mk = |style: BlockStyle, sa: bool, mssa: bool, bp: bool| -> Result<u64> {
        let cfg = ModelConfig {
            blocks: style,
            use_sa: sa,
            use_mssa: mssa,
            use_bp: bp,
            ..base.clone()
        };
        Ok(DeepGin::new(cfg)?.param_count())
    };
    Ok(VariantCounts {
        std: mk(BlockStyle::Std, false, false, false)?,
        std_sa: mk(BlockStyle::Std, true, false, false)?,
        std_mssa: mk(BlockStyle::Std, true, true, false)?,
        dilated_mssa: mk(BlockStyle::Dilated, true, true, false)?,
        spd_mssa: mk(BlockStyle::Spd, true, true, false)?,
        spd_mssa_bp: mk(BlockStyle::Spd, true, true, true)?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct VariantCounts {
    pub std: u64,
    pub std_sa: u64,
    pub std_mssa: u64,
    pub dilated_mssa: u64,
    pub spd_mssa: u64,
    pub spd_mssa_bp: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        let mut img = ImageTensor::new(h, w, 3);
        for v in img.data_mut() {
            *v = rng.uniform();
        }
        img
    }

    fn random_mask(h: usize, w: usize, seed: u64) -> MaskTensor {
        let mut rng = Rng::new(seed);
        let mut m = MaskTensor::new(h, w);
        for v in m.data_mut() {
            *v = rng.bernoulli(0.4) as u8;
        }
        m
    }

    #[test]
    fn paper_width_parameter_budget() {
        let model = DeepGin::new(ModelConfig::paper()).unwrap();
        // frozen totals; the acceptance suite checks the published bands
        assert_eq!(model.param_count(), 41_285_076);
        let v = variant_counts(&ModelConfig::paper()).unwrap();
        assert_eq!(v.std, 39_152_838);
        assert_eq!(v.std_sa - v.std, 525_569);
        assert_eq!(v.std_mssa - v.std_sa, 1_569_575);
        assert_eq!(v.spd_mssa_bp - v.spd_mssa, 37_094);
        assert_eq!(v.std_mssa, v.dilated_mssa);
        assert_eq!(v.dilated_mssa, v.spd_mssa);
    }

    #[test]
    fn forward_shapes_and_range_toy() {
        let model = DeepGin::new(ModelConfig::toy()).unwrap();
        let params = model.init_params(3, 0.1);
        let img = random_image(32, 32, 1);
        let mask = random_mask(32, 32, 2);
        let res = model
            .infer(&params, &img, &mask, Some(&img))
            .unwrap();
        assert_eq!(res.i_coarse.height(), 32);
        assert_eq!(res.i_out.height(), 32);
        assert_eq!(res.i_lr.height(), 8);
        for t in [&res.i_coarse, &res.i_lr, &res.i_out, &res.i_compltd] {
            assert!(t.in_unit_range());
        }
        // valid pixels replaced bit-exactly
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(y, x) == 0 {
                    for c in 0..3 {
                        assert_eq!(res.i_compltd.get(y, x, c), img.get(y, x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_input_size() {
        let model = DeepGin::new(ModelConfig::toy()).unwrap();
        let params = model.init_params(0, 0.1);
        let img = random_image(64, 64, 1);
        let mask = random_mask(64, 64, 2);
        assert!(model.infer(&params, &img, &mask, None).is_err());
    }

    #[test]
    fn deterministic_across_runs() {
        let model = DeepGin::new(ModelConfig::toy()).unwrap();
        let params = model.init_params(7, 0.1);
        let img = random_image(32, 32, 5);
        let mask = random_mask(32, 32, 6);
        let a = model.infer(&params, &img, &mask, None).unwrap();
        let b = model.infer(&params, &img, &mask, None).unwrap();
        assert_eq!(a.i_out, b.i_out);
        assert_eq!(a.i_coarse, b.i_coarse);
    }

    #[test]
    fn back_projection_closed_forms() {
        // i_lr equal to the pooled prediction => zero residual
        let pre = random_image(16, 16, 9);
        let lr = crate::image::scale4(&pre, crate::image::ScaleDirection::Down).unwrap();
        let out = back_project_images(&pre, &lr, &[1.0, 1.0, 1.0]).unwrap();
        for (a, b) in out.data().iter().zip(pre.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // gamma zero => passthrough
        let lr2 = random_image(4, 4, 10);
        let out = back_project_images(&pre, &lr2, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, pre);
        // constant images: 0.5 with LR 0.75 and unit gain lands at 0.75
        let pre_c = ImageTensor::constant(16, 16, 3, 0.5);
        let lr_c = ImageTensor::constant(4, 4, 3, 0.75);
        let out = back_project_images(&pre_c, &lr_c, &[1.0, 1.0, 1.0]).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn residual_identity_cascade_matches_plain_path() {
        // gamma gains are zero at init; zeroing the fusion conv must reduce
        // the full refinement stage to the plain conv/pyramid path.
        let full_cfg = ModelConfig::toy();
        let plain_cfg = ModelConfig {
            use_sa: false,
            use_mssa: false,
            use_bp: false,
            ..full_cfg.clone()
        };
        let full = DeepGin::new(full_cfg).unwrap();
        let plain = DeepGin::new(plain_cfg).unwrap();
        let mut full_params = full.init_params(11, 0.1);
        let plain_params = plain.init_params(11, 0.1); // name-keyed: shared layers identical

        // surgery: zero the mssa fusion conv (weights and bias)
        for (spec, value) in full.specs().iter().zip(full_params.values_mut()) {
            if spec.name.starts_with("g2.mssa.fuse") {
                value.data_mut().fill(0.0);
            }
        }

        let img = random_image(32, 32, 21);
        let mask = random_mask(32, 32, 22);
        let a = full.infer(&full_params, &img, &mask, None).unwrap();
        let b = plain.infer(&plain_params, &img, &mask, None).unwrap();
        assert_eq!(a.i_out, b.i_out);
        assert_eq!(a.i_coarse, b.i_coarse);
    }

    #[test]
    fn mssa_residual_identity_under_zero_fusion() {
        let mut pb = ParamBuilder::new();
        let mssa = MssaBlock::new(&mut pb, "m", 16, 8);
        let specs = pb.finish();
        let store = ParamStore::init(&specs, 4, 0.2);
        // gammas are zero but branch convs are not; fusion must be zeroed
        let mut zeroed = store.clone();
        for (spec, value) in specs.iter().zip(zeroed.values_mut()) {
            if spec.name.starts_with("m.fuse") {
                value.data_mut().fill(0.0);
            }
        }
        let mut rng = Rng::new(31);
        let mut x = Tensor::zeros(&[2, 16, 8, 8]);
        for v in x.data_mut() {
            *v = rng.uniform();
        }
        let mut ctx = EvalCtx::new();
        let p = zeroed.bind(&mut ctx, false);
        let xv = ctx.constant(x.clone());
        let y = mssa.forward(&mut ctx, &p, &xv);
        assert_eq!(&*y, &x);
    }

    #[test]
    fn gradients_reach_both_generators() {
        use crate::nn::Tape;
        let model = DeepGin::new(ModelConfig::toy()).unwrap();
        let params = model.init_params(13, 0.1);
        let img = random_image(32, 32, 14);
        let mask = random_mask(32, 32, 15);

        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let i_in = tape.constant(img.to_tensor());
        let m = tape.constant(mask.to_tensor());
        let outs = model.forward(&mut tape, &p, &i_in, &m);
        let root = tape.sum_all(&outs.i_out);
        let grads = tape.backward(root);

        let mut g1_hit = false;
        let mut g2_hit = false;
        for (spec, var) in model.specs().iter().zip(&p) {
            if let Some(g) = grads.get(*var) {
                if g.data().iter().any(|&v| v != 0.0) {
                    g1_hit |= spec.name.starts_with("g1.");
                    g2_hit |= spec.name.starts_with("g2.");
                }
            }
        }
        assert!(g1_hit && g2_hit);
    }

    #[test]
    fn config_validation_catches_bad_multiples() {
        let mut cfg = ModelConfig::toy();
        cfg.image_size = 40; // not a multiple of 16
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.g1_base = 9; // bottleneck 36 not divisible by 8 rates
        assert!(cfg.validate().is_err());
    }
}
