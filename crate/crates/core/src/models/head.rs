use mmexpr_tensor::{Graph, ParamStore, Scalar, Var};
use rand::RngCore;

use super::layers::{dropout, Linear, Mode};
use crate::error::{Error, Result};

/// Dropout, affine and ReLU per hidden size, then an affine to class logits.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub hidden: Vec<Linear>,
    pub output: Linear,
    pub dropout: f64,
}

impl ClassificationHead {
    pub fn new(
        store: &mut ParamStore<f32>,
        input_dim: usize,
        sizes: &[usize],
        classes: usize,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(sizes.len());
        let mut prev = input_dim;
        for (i, &size) in sizes.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("head.{i}"), prev, size, rng)?);
            prev = size;
        }
        Ok(ClassificationHead {
            hidden,
            output: Linear::new(store, "head.out", prev, classes, rng)?,
            dropout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.output).in_dim
    }

    /// Raw logits, `window x classes`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let got = g.value(x).last_dim();
        if got != self.input_dim() {
            return Err(Error::validation(format!(
                "head expects {} features per frame, got {got}",
                self.input_dim()
            )));
        }
        let mut h = x;
        for layer in &self.hidden {
            h = dropout(g, h, self.dropout, mode)?;
            h = layer.forward(g, h)?;
            h = g.relu(h)?;
        }
        self.output.forward(g, h)
    }
}
