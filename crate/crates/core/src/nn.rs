//! Parameterized layers that register themselves in a [`ParamStore`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::conv::ConvSpec;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    /// Registers `{name}.weight` and `{name}.bias`; weights are fan-in scaled uniform.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = spec.weight_shape(cin, cout);
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(shape, -bound, bound, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]))?;
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, &w, &b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels, 1, 1, 1], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels, 1, 1, 1]))?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, &g, &b)
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    pub alpha: ParamId,
}

impl PRelu {
    pub const INIT_SLOPE: f32 = 0.25;

    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            alpha: store.add(format!("{name}.alpha"), Tensor::scalar(Self::INIT_SLOPE))?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let a = tape.param(store, self.alpha);
        tape.prelu(x, &a)
    }
}
