//! Conditional multi-scale patch critics with spectral normalization.
//!
//! Both critics share one architecture: four 4x4 spectrally normalized
//! convolutions (strides 2, 2, 1, 1) over the 6-channel concatenation of
//! the masked input and the image under judgement, leaky-relu between
//! layers and a linear patch map out. The second critic sees both inputs
//! bilinearly halved. No weights are shared between the two.

use crate::error::Result;
use crate::nn::blocks::SnConv;
use crate::nn::ops::Pad;
use crate::nn::{ConvGeom, Ctx, ParamBuilder, ParamSpec, ParamStore, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscConfig {
    /// Widths of the three hidden layers.
    pub widths: [usize; 3],
    /// Channels of the output patch map.
    pub out_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            widths: [64, 128, 256],
            out_channels: 1,
            leaky_slope: 0.2,
        }
    }
}

impl DiscConfig {
    pub fn toy() -> Self {
        DiscConfig {
            widths: [16, 32, 64],
            ..Default::default()
        }
    }
}

fn sn_geom(stride: usize) -> ConvGeom {
    ConvGeom {
        stride,
        dilation: 1,
        pad: Pad::same_even(4, stride),
    }
}

/// One patch critic: input `[N, 6, S, S]`, output `[N, c, S/4, S/4]`.
pub struct PatchDiscriminator {
    layers: Vec<SnConv>,
}

impl PatchDiscriminator {
    fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &DiscConfig) -> Self {
        let [w0, w1, w2] = cfg.widths;
        let layers = vec![
            SnConv::new(pb, &format!("{prefix}.l0"), 6, w0, 4, sn_geom(2)),
            SnConv::new(pb, &format!("{prefix}.l1"), w0, w1, 4, sn_geom(2)),
            SnConv::new(pb, &format!("{prefix}.l2"), w1, w2, 4, sn_geom(1)),
            SnConv::new(pb, &format!("{prefix}.l3"), w2, cfg.out_channels, 4, sn_geom(1)),
        ];
        PatchDiscriminator { layers }
    }

    fn forward<C: Ctx>(
        &self,
        ctx: &mut C,
        p: &[C::T],
        store: &ParamStore,
        u_state: &mut [Tensor],
        x: &C::T,
        slope: f64,
        training: bool,
    ) -> C::T {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.fwd(ctx, p, store.get(layer.w), &mut u_state[i], &h, training);
            if i != last {
                h = ctx.leaky_relu(&h, slope);
            }
        }
        h
    }
}

/// The pair of critics at full and half input scale.
pub struct MultiScaleDisc {
    pub cfg: DiscConfig,
    specs: Vec<ParamSpec>,
    d1: PatchDiscriminator,
    d2: PatchDiscriminator,
}

/// Per-layer left singular-vector estimates, D1's four layers then D2's.
pub type SpectralState = Vec<Tensor>;

impl MultiScaleDisc {
    pub fn new(cfg: DiscConfig) -> Self {
        let mut pb = ParamBuilder::new();
        let d1 = PatchDiscriminator::new(&mut pb, "d1", &cfg);
        let d2 = PatchDiscriminator::new(&mut pb, "d2", &cfg);
        MultiScaleDisc {
            cfg,
            specs: pb.finish(),
            d1,
            d2,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> u64 {
        crate::nn::param_count(&self.specs)
    }

    pub fn init_params(&self, seed: u64, scale: f64) -> ParamStore {
        ParamStore::init(&self.specs, seed, scale)
    }

    /// Fixed-seed random unit vectors, one per spectrally normalized layer.
    pub fn init_spectral_state(&self, seed: u64) -> SpectralState {
        let widths = [
            self.cfg.widths[0],
            self.cfg.widths[1],
            self.cfg.widths[2],
            self.cfg.out_channels,
        ];
        (0..8)
            .map(|i| {
                let mut rng = Rng::from_key(&[seed, 0xD15C, i as u64]);
                let mut u = Tensor::zeros(&[widths[i % 4]]);
                u.fill_normal(&mut rng, 1.0);
                let norm = u.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in u.data_mut() {
                    *v /= norm;
                }
                u
            })
            .collect()
    }

    /// Layer weight ids paired with their u-state slots (for oracles).
    pub fn sn_layers(&self) -> Vec<(crate::nn::ParamId, usize)> {
        self.d1
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.w, i))
            .chain(self.d2.layers.iter().enumerate().map(|(i, l)| (l.w, i + 4)))
            .collect()
    }

    /// Single-critic forward on an already concatenated 6-channel input.
    pub fn d_forward<C: Ctx>(
        &self,
        ctx: &mut C,
        p: &[C::T],
        store: &ParamStore,
        state: &mut SpectralState,
        which: usize,
        x6: &C::T,
        training: bool,
    ) -> C::T {
        let (d, offset) = if which == 0 { (&self.d1, 0) } else { (&self.d2, 4) };
        d.forward(
            ctx,
            p,
            store,
            &mut state[offset..offset + 4],
            x6,
            self.cfg.leaky_slope,
            training,
        )
    }

    /// Both critics on (masked input, image) pairs: the first at full scale,
    /// the second on bilinearly halved copies. Returns the two patch maps.
    pub fn forward_pair<C: Ctx>(
        &self,
        ctx: &mut C,
        p: &[C::T],
        store: &ParamStore,
        state: &mut SpectralState,
        i_in: &C::T,
        i: &C::T,
        training: bool,
    ) -> (C::T, C::T) {
        let x1 = ctx.concat_c(&[i_in, i]);
        let m1 = self.d_forward(ctx, p, store, state, 0, &x1, training);
        let (_, _, h, w) = ctx.value(i_in).dims4();
        let in_half = ctx.bilinear(i_in, h / 2, w / 2);
        let i_half = ctx.bilinear(i, h / 2, w / 2);
        let x2 = ctx.concat_c(&[&in_half, &i_half]);
        let m2 = self.d_forward(ctx, p, store, state, 1, &x2, training);
        (m1, m2)
    }

    /// Eval-mode pair of patch maps on plain tensors.
    pub fn patch_maps(
        &self,
        params: &ParamStore,
        state: &mut SpectralState,
        i_in: &Tensor,
        i: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut ctx = crate::nn::EvalCtx::new();
        let p = params.bind(&mut ctx, false);
        let a = ctx.constant(i_in.clone());
        let b = ctx.constant(i.clone());
        let (m1, m2) = self.forward_pair(&mut ctx, &p, params, state, &a, &b, false);
        Ok(((*m1).clone(), (*m2).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EvalCtx;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform();
        }
        t
    }

    #[test]
    fn patch_map_shapes_follow_quarter_rule() {
        let disc = MultiScaleDisc::new(DiscConfig::toy());
        let params = disc.init_params(1, 0.1);
        let mut state = disc.init_spectral_state(1);
        let i_in = rand_t(&[2, 3, 64, 64], 2);
        let i = rand_t(&[2, 3, 64, 64], 3);
        let (m1, m2) = disc.patch_maps(&params, &mut state, &i_in, &i).unwrap();
        assert_eq!(m1.shape(), &[2, 1, 16, 16]);
        assert_eq!(m2.shape(), &[2, 1, 8, 8]);
    }

    #[test]
    fn paper_scale_shapes() {
        let disc = MultiScaleDisc::new(DiscConfig::toy());
        let params = disc.init_params(4, 0.1);
        let mut state = disc.init_spectral_state(4);
        let i_in = rand_t(&[1, 3, 256, 256], 5);
        let i = rand_t(&[1, 3, 256, 256], 6);
        let (m1, m2) = disc.patch_maps(&params, &mut state, &i_in, &i).unwrap();
        assert_eq!(m1.shape(), &[1, 1, 64, 64]);
        assert_eq!(m2.shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn zero_weights_give_zero_maps() {
        let disc = MultiScaleDisc::new(DiscConfig::toy());
        let params = disc.init_params(0, 0.0);
        let mut state = disc.init_spectral_state(0);
        let i_in = rand_t(&[1, 3, 32, 32], 7);
        let i = rand_t(&[1, 3, 32, 32], 8);
        let (m1, m2) = disc.patch_maps(&params, &mut state, &i_in, &i).unwrap();
        assert!(m1.data().iter().all(|&v| v == 0.0));
        assert!(m2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let disc = MultiScaleDisc::new(DiscConfig::toy());
        let params = disc.init_params(9, 0.1);
        let state = disc.init_spectral_state(9);
        let a = rand_t(&[1, 3, 32, 32], 10);
        let b = rand_t(&[1, 3, 32, 32], 11);
        let cat =
            |x: &Tensor, y: &Tensor| {
                let mut ctx = EvalCtx::new();
                let xv = ctx.constant(x.clone());
                let yv = ctx.constant(y.clone());
                (*ctx.concat_c(&[&xv, &yv])).clone()
            };
        // two-sample batch built in both orders along N
        let stack = |x: &Tensor, y: &Tensor| {
            let mut data = x.data().to_vec();
            data.extend_from_slice(y.data());
            Tensor::from_vec(&[2, 3, 32, 32], data)
        };
        let in_pair = cat(&a, &a);
        let _ = in_pair;
        let ab = stack(&a, &b);
        let ba = stack(&b, &a);
        let i_in = stack(&a, &a);
        let (m_ab, _) = disc.patch_maps(&params, &mut state.clone(), &i_in, &ab).unwrap();
        let (m_ba, _) = disc.patch_maps(&params, &mut state.clone(), &i_in, &ba).unwrap();
        let half = m_ab.numel() / 2;
        assert_eq!(&m_ab.data()[..half], &m_ba.data()[half..]);
        assert_eq!(&m_ab.data()[half..], &m_ba.data()[..half]);
    }

    #[test]
    fn training_forward_advances_u_eval_does_not() {
        let disc = MultiScaleDisc::new(DiscConfig::toy());
        let params = disc.init_params(12, 0.1);
        let mut state = disc.init_spectral_state(12);
        let before = state.clone();
        let i_in = rand_t(&[1, 3, 32, 32], 13);
        let i = rand_t(&[1, 3, 32, 32], 14);
        // eval: frozen
        disc.patch_maps(&params, &mut state, &i_in, &i).unwrap();
        assert_eq!(state, before);
        // training: one power-iteration step per layer
        let mut ctx = EvalCtx::new();
        let p = params.bind(&mut ctx, false);
        let a = ctx.constant(i_in.clone());
        let b = ctx.constant(i.clone());
        disc.forward_pair(&mut ctx, &p, &params, &mut state, &a, &b, true);
        for (prev, now) in before.iter().zip(&state) {
            // a 1-dim u (the output layer) is a fixed point of normalization
            if now.numel() > 1 {
                assert_ne!(prev, now);
            }
        }
    }
}
