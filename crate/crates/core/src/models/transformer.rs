use std::ops::Range;

use mmexpr_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::RngCore;

use super::config::TransformerConfig;
use super::layers::{dropout, LayerNorm, Linear, Mode};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

/// Post-norm Transformer encoder applied independently to each segment.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// `max_len x d_model` sinusoidal table, row `t` encoding position `t + 1`.
    positions: Option<Vec<f64>>,
}

/// `sin(pos / 10000^(2i/d))` on even columns, `cos` on odd, for
/// `pos = 1..=len`.
pub fn sinusoidal_table(len: usize, d_model: usize) -> Vec<f64> {
    let mut table = vec![0.0; len * d_model];
    for t in 0..len {
        let pos = (t + 1) as f64;
        for j in 0..d_model {
            let angle = pos / 10000f64.powf((2 * (j / 2)) as f64 / d_model as f64);
            table[t * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore<f32>,
        d_model: usize,
        config: &TransformerConfig,
        max_len: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if config.heads == 0 || !d_model.is_multiple_of(config.heads) {
            return Err(Error::config(format!(
                "d_model {d_model} is not divisible by {} heads",
                config.heads
            )));
        }
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = |part: &str| format!("transformer.{l}.{part}");
            layers.push(EncoderLayer {
                query: Linear::new(store, &name("query"), d_model, d_model, rng)?,
                key: Linear::new(store, &name("key"), d_model, d_model, rng)?,
                value: Linear::new(store, &name("value"), d_model, d_model, rng)?,
                output: Linear::new(store, &name("output"), d_model, d_model, rng)?,
                norm1: LayerNorm::new(store, &name("norm1"), d_model)?,
                ffn_in: Linear::new(store, &name("ffn_in"), d_model, config.ffn_dim, rng)?,
                ffn_out: Linear::new(store, &name("ffn_out"), config.ffn_dim, d_model, rng)?,
                norm2: LayerNorm::new(store, &name("norm2"), d_model)?,
            });
        }
        Ok(TransformerEncoder {
            layers,
            d_model,
            heads: config.heads,
            dropout: config.dropout,
            max_len,
            positions: config
                .positional_encoding
                .then(|| sinusoidal_table(max_len, d_model)),
        })
    }

    pub fn has_positional_encoding(&self) -> bool {
        self.positions.is_some()
    }

    /// Encodes one segment `x` (`window x d_model`).
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mode: &mut Mode<'_>,
        trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let rows = g.shape(x).first().copied().unwrap_or(0);
        self.encode_batch(g, x, std::slice::from_ref(&(0..rows)), mode, trace)
    }

    /// Encodes segments stacked row-wise in `x`; `spans` partitions the rows
    /// into segments. Attention never crosses a span boundary. When `trace`
    /// is given, every attention probability matrix is appended to it in
    /// (layer, span, head) order.
    pub fn encode_batch<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        spans: &[Range<usize>],
        mode: &mut Mode<'_>,
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::validation(format!(
                "transformer expects [window, {}] input, got {shape:?}",
                self.d_model
            )));
        }
        let mut cursor = 0;
        for s in spans {
            if s.start != cursor || s.is_empty() {
                return Err(Error::validation(format!(
                    "segment rows {s:?} do not continue the batch at row {cursor}"
                )));
            }
            if s.len() > self.max_len {
                return Err(Error::validation(format!(
                    "segment of {} frames exceeds l = {}",
                    s.len(),
                    self.max_len
                )));
            }
            cursor = s.end;
        }
        if cursor != shape[0] {
            return Err(Error::validation(format!(
                "segments cover {cursor} rows, input has {}",
                shape[0]
            )));
        }

        let mut h = x;
        if let Some(table) = &self.positions {
            let d = self.d_model;
            let mut pe = Vec::with_capacity(shape[0] * d);
            for s in spans {
                pe.extend(table[..s.len() * d].iter().map(|&v| T::from_f64_lossy(v)));
            }
            let pe = g.constant(Tensor::new(&shape, pe)?);
            h = g.add(h, pe)?;
        }
        for layer in &self.layers {
            h = self.layer_forward(g, layer, h, spans, mode, trace.as_deref_mut())?;
        }
        Ok(h)
    }

    fn layer_forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        layer: &EncoderLayer,
        x: Var,
        spans: &[Range<usize>],
        mode: &mut Mode<'_>,
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let dk = self.d_model / self.heads;
        let scale = T::from_f64_lossy(1.0 / (dk as f64).sqrt());
        let q = layer.query.forward(g, x)?;
        let k = layer.key.forward(g, x)?;
        let v = layer.value.forward(g, x)?;

        let mut per_span = Vec::with_capacity(spans.len());
        for s in spans {
            let qs = g.slice(q, 0, s.start, s.len())?;
            let ks = g.slice(k, 0, s.start, s.len())?;
            let vs = g.slice(v, 0, s.start, s.len())?;
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let qh = g.slice(qs, 1, hd * dk, dk)?;
                let kh = g.slice(ks, 1, hd * dk, dk)?;
                let vh = g.slice(vs, 1, hd * dk, dk)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale)?;
                let probs = g.softmax(scores)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(g.value(probs).clone());
                }
                let probs = dropout(g, probs, self.dropout, mode)?;
                heads.push(g.matmul(probs, vh)?);
            }
            per_span.push(g.concat(&heads, 1)?);
        }
        let attended = g.concat(&per_span, 0)?;
        let attended = layer.output.forward(g, attended)?;
        let attended = dropout(g, attended, self.dropout, mode)?;
        let h = g.add(x, attended)?;
        let h = layer.norm1.forward(g, h)?;

        let f = layer.ffn_in.forward(g, h)?;
        let f = g.relu(f)?;
        let f = dropout(g, f, self.dropout, mode)?;
        let f = layer.ffn_out.forward(g, f)?;
        let f = dropout(g, f, self.dropout, mode)?;
        let out = g.add(h, f)?;
        layer.norm2.forward(g, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(positional: bool, seed: u64) -> (TransformerEncoder, ParamStore<f32>) {
        let cfg = TransformerConfig {
            layers: 2,
            heads: 2,
            dropout: 0.3,
            ffn_dim: 16,
            positional_encoding: positional,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = TransformerEncoder::new(&mut store, 8, &cfg, 6, &mut rng).unwrap();
        (enc, store)
    }

    fn input(rows: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[rows, 8], |_| rand::Rng::random_range(&mut rng, -1.0..1.0))
    }

    #[test]
    fn sinusoid_starts_at_position_one() {
        let t = sinusoidal_table(2, 4);
        assert!((t[0] - 1f64.sin()).abs() < 1e-15);
        assert!((t[1] - 1f64.cos()).abs() < 1e-15);
        assert!((t[2] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
        assert!((t[4] - 2f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn output_length_matches_input() {
        let (enc, store) = tiny(true, 1);
        let mut g = Graph::with_params(&store);
        let x = g.constant(input(5, 2));
        let y = enc.encode(&mut g, x, &mut Mode::Eval, None).unwrap();
        assert_eq!(g.shape(y), &[5, 8]);
    }

    #[test]
    fn window_longer_than_l_rejected() {
        let (enc, store) = tiny(true, 1);
        let mut g = Graph::with_params(&store);
        let x = g.constant(input(7, 2));
        assert!(enc.encode(&mut g, x, &mut Mode::Eval, None).is_err());
    }

    #[test]
    fn batched_segments_are_independent() {
        let (enc, store) = tiny(true, 3);
        let a = input(4, 10);
        let mut g = Graph::with_params(&store);
        let xa = g.constant(a.clone());
        let alone = enc.encode(&mut g, xa, &mut Mode::Eval, None).unwrap();
        for seed in 11..14 {
            let b = input(3, seed);
            let stacked = Tensor::new(&[7, 8], [a.data(), b.data()].concat()).unwrap();
            let xs = g.constant(stacked);
            let y = enc
                .encode_batch(&mut g, xs, &[0..4, 4..7], &mut Mode::Eval, None)
                .unwrap();
            let ya = g.slice(y, 0, 0, 4).unwrap();
            assert_eq!(g.value(ya), g.value(alone));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (enc, store) = tiny(true, 4);
        let mut g = Graph::with_params(&store);
        let x = g.constant(input(6, 5));
        let mut trace = Vec::new();
        enc.encode(&mut g, x, &mut Mode::Eval, Some(&mut trace)).unwrap();
        assert_eq!(trace.len(), 4);
        for probs in &trace {
            for r in 0..6 {
                let s: f32 = probs.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            }
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let (enc, store) = tiny(true, 6);
        let mut g = Graph::with_params(&store);
        let x = g.constant(input(5, 7));
        let e1 = enc.encode(&mut g, x, &mut Mode::Eval, None).unwrap();
        let e2 = enc.encode(&mut g, x, &mut Mode::Eval, None).unwrap();
        assert_eq!(g.value(e1), g.value(e2));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t1 = enc.encode(&mut g, x, &mut Mode::Train(&mut rng), None).unwrap();
        let t2 = enc.encode(&mut g, x, &mut Mode::Train(&mut rng), None).unwrap();
        assert_ne!(g.value(t1), g.value(t2));
    }
}
