use mmexpr_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, RngCore};

use crate::error::Result;

/// Forward-pass mode. Dropout is active only in `Train`, drawing its masks
/// from the supplied generator.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub(crate) fn dropout<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    rate: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => Ok(g.dropout(x, rate, &mut **rng)?),
        _ => Ok(x),
    }
}

pub(crate) fn uniform(rng: &mut dyn RngCore, shape: &[usize], bound: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound))?;
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let h = g.matmul(x, w)?;
        Ok(g.add_bias(h, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore<f32>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        Ok(g.layer_norm(x, gamma, beta, Self::EPS)?)
    }
}
