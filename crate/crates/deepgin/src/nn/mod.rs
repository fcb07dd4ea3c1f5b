//! Tensor math, autodiff and the reusable network building blocks.

pub mod blocks;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use ops::{ConvGeom, Pad};
pub use tape::{Ctx, EvalCtx, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::rng::{derive_key, Rng};

/// What a parameter is, which controls how it is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution/projection weight; init = normal * scale * sqrt(2/fan_in).
    Weight { fan_in: usize },
    /// Bias vector; init = 0.
    Bias,
    /// Attention / back-projection gain; init = 0.
    Gamma,
}

/// Shape and role of one learnable tensor. A model is described by an
/// ordered list of these; values live separately in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Stable handle into a parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Collects parameter specs while a model is being laid out.
#[derive(Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn conv_weight(&mut self, name: impl Into<String>, cout: usize, cin: usize, k: usize) -> ParamId {
        self.add(name, &[cout, cin, k, k], ParamKind::Weight { fan_in: cin * k * k })
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Total learnable scalar count of a spec list.
pub fn param_count(specs: &[ParamSpec]) -> u64 {
    specs.iter().map(|s| s.numel() as u64).sum()
}

/// Materialized parameter values, aligned with a model's spec list.
#[derive(Debug, Clone)]
pub struct ParamStore {
    values: Vec<Tensor>,
}

impl ParamStore {
    /// Seeded init: weights are fan-in-scaled normals shrunk by `scale`,
    /// biases and gains start at zero. Streams are keyed by parameter name
    /// so the init of one layer does not depend on the order of the others.
    pub fn init(specs: &[ParamSpec], seed: u64, scale: f64) -> Self {
        let values = specs
            .iter()
            .map(|s| {
                let mut t = Tensor::zeros(&s.shape);
                if let ParamKind::Weight { fan_in } = s.kind {
                    let name_key = derive_key(
                        &s.name.bytes().map(|b| b as u64).collect::<Vec<_>>(),
                    );
                    let mut rng = Rng::from_key(&[seed, name_key]);
                    let std = scale * (2.0 / fan_in as f64).sqrt();
                    t.fill_normal(&mut rng, std);
                }
                t
            })
            .collect();
        ParamStore { values }
    }

    pub fn from_values(values: Vec<Tensor>) -> Self {
        ParamStore { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Bind every parameter into a context (as trainable leaves on a tape,
    /// or cheap handles in eval mode).
    pub fn bind<C: Ctx>(&self, ctx: &mut C, trainable: bool) -> Vec<C::T> {
        self.values
            .iter()
            .map(|t| ctx.leaf(t.clone(), trainable))
            .collect()
    }
}
