use mmexpr_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::RngCore;

use super::layers::uniform;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LstmLayer {
    /// `[input, 4H]`, gate blocks ordered input, forget, candidate, output.
    pub w_ih: ParamId,
    /// `[H, 4H]`.
    pub w_hh: ParamId,
    /// `[4H]`.
    pub bias: ParamId,
    pub input_dim: usize,
}

/// Hidden and cell state of every layer, each `[1, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T = f32> {
    pub h: Vec<Tensor<T>>,
    pub c: Vec<Tensor<T>>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        LstmState {
            h: vec![Tensor::zeros(&[1, hidden]); layers],
            c: vec![Tensor::zeros(&[1, hidden]); layers],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.h
            .iter()
            .chain(&self.c)
            .all(|t| t.data().iter().all(|v| v.is_zero()))
    }
}

/// State carried between consecutive segments of one video.
#[derive(Clone, Debug)]
pub struct LstmCarry<T = f32> {
    pub video_id: String,
    next_index: usize,
    state: LstmState<T>,
}

impl<T: Scalar> LstmCarry<T> {
    /// Zero state, expecting segment 1 next.
    pub fn new(video_id: impl Into<String>, encoder: &LstmEncoder) -> Self {
        LstmCarry {
            video_id: video_id.into(),
            next_index: 1,
            state: LstmState::zeros(encoder.layers.len(), encoder.hidden),
        }
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }

    pub fn state(&self) -> &LstmState<T> {
        &self.state
    }
}

/// Unidirectional multi-layer LSTM.
#[derive(Clone, Debug)]
pub struct LstmEncoder {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

impl LstmEncoder {
    pub fn new(
        store: &mut ParamStore<f32>,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f32).sqrt();
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_dim = if l == 0 { input_dim } else { hidden };
            out.push(LstmLayer {
                w_ih: store.add(format!("lstm.{l}.w_ih"), uniform(rng, &[in_dim, 4 * hidden], bound))?,
                w_hh: store.add(format!("lstm.{l}.w_hh"), uniform(rng, &[hidden, 4 * hidden], bound))?,
                bias: store.add(format!("lstm.{l}.bias"), uniform(rng, &[4 * hidden], bound))?,
                input_dim: in_dim,
            });
        }
        Ok(LstmEncoder {
            layers: out,
            hidden,
        })
    }

    /// Runs the sequence `x` (`[len, input]`) from `init`. Returns the
    /// per-frame top-layer hidden states (`[len, H]`) and the final state as
    /// plain tensors, detached from the graph.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        init: &LstmState<T>,
    ) -> Result<(Var, LstmState<T>)> {
        let hd = self.hidden;
        let len = g.shape(x)[0];
        let mut input = x;
        let mut final_state = LstmState {
            h: Vec::with_capacity(self.layers.len()),
            c: Vec::with_capacity(self.layers.len()),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            if g.value(input).last_dim() != layer.input_dim {
                return Err(Error::validation(format!(
                    "lstm layer {l} expects {} inputs per frame, got {}",
                    layer.input_dim,
                    g.value(input).last_dim()
                )));
            }
            let w_ih = g.param(layer.w_ih)?;
            let w_hh = g.param(layer.w_hh)?;
            let bias = g.param(layer.bias)?;
            let proj = g.matmul(input, w_ih)?;
            let proj = g.add_bias(proj, bias)?;
            let mut h = g.constant(init.h[l].clone());
            let mut c = g.constant(init.c[l].clone());
            let mut outputs = Vec::with_capacity(len);
            for t in 0..len {
                let xt = g.slice(proj, 0, t, 1)?;
                let rec = g.matmul(h, w_hh)?;
                let gates = g.add(xt, rec)?;
                let i = g.slice(gates, 1, 0, hd)?;
                let i = g.sigmoid(i)?;
                let f = g.slice(gates, 1, hd, hd)?;
                let f = g.sigmoid(f)?;
                let cand = g.slice(gates, 1, 2 * hd, hd)?;
                let cand = g.tanh(cand)?;
                let o = g.slice(gates, 1, 3 * hd, hd)?;
                let o = g.sigmoid(o)?;
                let keep = g.mul(f, c)?;
                let write = g.mul(i, cand)?;
                c = g.add(keep, write)?;
                let squashed = g.tanh(c)?;
                h = g.mul(o, squashed)?;
                outputs.push(h);
            }
            final_state.h.push(g.value(h).clone());
            final_state.c.push(g.value(c).clone());
            input = g.concat(&outputs, 0)?;
        }
        Ok((input, final_state))
    }

    /// Encodes segment `index` of `carry`'s video, starting from the carried
    /// state, and advances the carry. Segments must arrive as 1, 2, 3, ...
    pub fn encode_segment<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        carry: &mut LstmCarry<T>,
        index: usize,
    ) -> Result<Var> {
        if index != carry.next_index {
            return Err(Error::validation(format!(
                "video {}: lstm received segment {index}, expected {}",
                carry.video_id, carry.next_index
            )));
        }
        let (out, state) = self.run(g, x, &carry.state)?;
        carry.state = state;
        carry.next_index += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(input: usize, hidden: usize, layers: usize, seed: u64) -> (LstmEncoder, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = LstmEncoder::new(&mut store, input, hidden, layers, &mut rng).unwrap();
        (e, store)
    }

    #[test]
    fn zero_weights_give_zero_outputs_and_state() {
        let (e, mut store) = encoder(3, 4, 2, 1);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_fn(&[5, 3], |i| i as f32 - 7.0));
        let (out, state) = e.run(&mut g, x, &LstmState::zeros(2, 4)).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        assert!(state.is_zero());
    }

    #[test]
    fn frame_order_matters() {
        let (e, store) = encoder(3, 4, 1, 2);
        let xs = Tensor::from_fn(&[4, 3], |i| (i as f32 * 0.7).sin());
        let mut rows: Vec<Vec<f32>> = (0..4).map(|r| xs.row(r).to_vec()).collect();
        rows.swap(0, 3);
        let permuted = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::with_params(&store);
        let a = g.constant(xs);
        let b = g.constant(permuted);
        let (oa, _) = e.run(&mut g, a, &LstmState::zeros(1, 4)).unwrap();
        let (ob, _) = e.run(&mut g, b, &LstmState::zeros(1, 4)).unwrap();
        assert_ne!(g.value(oa), g.value(ob));
    }

    #[test]
    fn out_of_order_segment_rejected() {
        let (e, store) = encoder(2, 3, 1, 3);
        let mut carry = LstmCarry::<f32>::new("v", &e);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(e.encode_segment(&mut g, x, &mut carry, 2).is_err());
        e.encode_segment(&mut g, x, &mut carry, 1).unwrap();
        assert_eq!(carry.next_index(), 2);
        assert!(e.encode_segment(&mut g, x, &mut carry, 1).is_err());
    }
}
