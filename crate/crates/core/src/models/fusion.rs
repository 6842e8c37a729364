use mmexpr_tensor::{Graph, ParamStore, Scalar, Var};
use rand::RngCore;

use super::layers::Linear;
use crate::error::{Error, Result};

/// Concatenates per-frame visual and audio vectors and applies one affine
/// map to `d_model`. No activation follows.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub affine: Linear,
}

impl FusionLayer {
    pub fn new(
        store: &mut ParamStore<f32>,
        input_dim: usize,
        d_model: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Ok(FusionLayer {
            affine: Linear::new(store, "fusion", input_dim, d_model, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.affine.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.affine.out_dim
    }

    /// `W_f [f_v; f_a] + b_f` for every row of `f_v` (`window x dim_v`) and
    /// `f_a` (`window x dim_a`).
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, f_v: Var, f_a: Var) -> Result<Var> {
        let x = g.concat(&[f_v, f_a], 1)?;
        self.forward(g, x)
    }

    /// Fusion of already concatenated `[f_v; f_a]` rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let got = g.value(x).last_dim();
        if got != self.input_dim() {
            return Err(Error::validation(format!(
                "fusion expects {} input features per frame, got {got}",
                self.input_dim()
            )));
        }
        self.affine.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmexpr_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(dv: usize, da: usize, d: usize) -> (FusionLayer, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FusionLayer::new(&mut store, dv + da, d, &mut rng).unwrap();
        (f, store)
    }

    #[test]
    fn identity_weights_return_concatenation() {
        let (f, mut store) = layer(2, 1, 3);
        *store.get_mut(f.affine.weight) = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        *store.get_mut(f.affine.bias) = Tensor::zeros(&[3]);
        let mut g = Graph::with_params(&store);
        let fv = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![4.0, 5.0]]).unwrap());
        let fa = g.constant(Tensor::from_rows(&[vec![3.0], vec![6.0]]).unwrap());
        let y = f.fuse(&mut g, fv, fa).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn zero_weights_map_to_bias() {
        let (f, mut store) = layer(2, 2, 3);
        *store.get_mut(f.affine.weight) = Tensor::zeros(&[4, 3]);
        *store.get_mut(f.affine.bias) = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut g = Graph::with_params(&store);
        let fv = g.constant(Tensor::from_fn(&[5, 2], |i| i as f32));
        let fa = g.constant(Tensor::from_fn(&[5, 2], |i| -(i as f32)));
        let y = f.fuse(&mut g, fv, fa).unwrap();
        for r in 0..5 {
            assert_eq!(g.value(y).row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (f, store) = layer(2, 2, 3);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[5, 3]));
        assert!(f.forward(&mut g, x).is_err());
    }
}
