//! Finite-difference checks of whole model components and of the full
//! fusion, encoder, head and RDrop graph, shared by several test targets.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mmexpr::models::{
    Encoder, EncoderKind, LstmConfig, LstmState, Mode, Model, ModelConfig, SegmentConfig, TransformerConfig,
};
use mmexpr::training::rdrop_loss;
use mmexpr_tensor::gradcheck::{check_params, relu_margin, weighted_sum, ParamLoss};
use mmexpr_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIM_V: usize = 3;
pub const DIM_A: usize = 2;

pub fn small_config(encoder: EncoderKind, window: usize) -> ModelConfig {
    ModelConfig {
        encoder,
        d_model: 6,
        lstm: LstmConfig { hidden: 5, layers: 2 },
        transformer: TransformerConfig {
            layers: 1,
            heads: 2,
            dropout: 0.3,
            ffn_dim: 7,
            positional_encoding: true,
        },
        head: vec![6],
        head_dropout: 0.3,
        classes: 8,
        segment: SegmentConfig { l: window, p: window },
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// A freshly initialised model with its parameters in f64.
fn model(cfg: &ModelConfig, seed: u64) -> (Model, ParamStore<f64>) {
    let (model, params) = Model::new(cfg, DIM_V + DIM_A, seed).unwrap();
    (model, params.cast::<f64>())
}

fn masks(t: u64, pass: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(10_000 + 2 * t + pass)
}

/// Targets with one masked frame when there is more than one frame.
fn targets(rng: &mut ChaCha8Rng, rows: usize) -> Vec<i8> {
    let mut y: Vec<i8> = (0..rows).map(|_| rng.random_range(0..8)).collect();
    if rows > 1 {
        y[rng.random_range(0..rows)] = -1;
    }
    y
}

/// Instances whose ReLU inputs come closer to zero than this are redrawn:
/// a 1e-3 parameter step could cross the kink.
const KINK_MARGIN: f64 = 1e-2;

/// Worst relative error per component over `trials` random models and inputs.
pub fn model_suite(trials: u64) -> BTreeMap<&'static str, f64> {
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    for t in 0..trials {
        let mut attempt = 0;
        loop {
            let seed = t * 1000 + attempt;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.random_range(2..6);
            let x = rand_tensor(&mut rng, &[rows, DIM_V + DIM_A], 1.0);
            let f_v = Tensor::from_fn(&[rows, DIM_V], |i| x.data()[(i / DIM_V) * (DIM_V + DIM_A) + i % DIM_V]);
            let f_a = Tensor::from_fn(&[rows, DIM_A], |i| {
                x.data()[(i / DIM_A) * (DIM_V + DIM_A) + DIM_V + i % DIM_A]
            });
            let y = targets(&mut rng, rows);
            let alpha = rng.random_range(0.0..6.0);
            let fused_in = rand_tensor(&mut rng, &[rows, 6], 1.0);
            let head_in = rand_tensor(&mut rng, &[rows, 6], 1.0);
            let half = rows / 2;
            let spans = vec![0..half, half..rows];

            let (tm, tp) = model(&small_config(EncoderKind::Transformer, rows), seed);
            let Encoder::Transformer(enc) = &tm.encoder else { unreachable!() };
            let (lm, lp) = model(&small_config(EncoderKind::Lstm, rows), seed + 1);
            let Encoder::Lstm(lstm) = &lm.encoder else { unreachable!() };
            // Non-zero carried state.
            let mut init = LstmState::<f64>::zeros(2, 5);
            for s in init.h.iter_mut().chain(init.c.iter_mut()) {
                *s = rand_tensor(&mut rng, &[1, 5], 0.8);
            }

            let fusion = |g: &mut Graph<'_, f64>| {
                let (a, b) = (g.constant(f_v.clone()), g.constant(f_a.clone()));
                let z = tm.fusion.fuse(g, a, b).unwrap();
                weighted_sum(g, z, seed)
            };
            let transformer = |g: &mut Graph<'_, f64>| {
                let h = g.constant(fused_in.clone());
                let mut r = masks(seed, 0);
                let z = enc.encode_batch(g, h, &spans, &mut Mode::Train(&mut r), None).unwrap();
                weighted_sum(g, z, seed)
            };
            let head = |g: &mut Graph<'_, f64>| {
                let h = g.constant(head_in.clone());
                let mut r = masks(seed, 0);
                let z = tm.head.forward(g, h, &mut Mode::Train(&mut r)).unwrap();
                weighted_sum(g, z, seed)
            };
            let full_transformer = |g: &mut Graph<'_, f64>| transformer_rdrop(g, &tm, &x, &spans, &y, alpha, seed);
            let lstm_only = |g: &mut Graph<'_, f64>| {
                let h = g.constant(fused_in.clone());
                let (z, _) = lstm.run(g, h, &init).unwrap();
                weighted_sum(g, z, seed)
            };
            let full_lstm = |g: &mut Graph<'_, f64>| {
                let xv = g.constant(x.clone());
                let fused = lm.fusion.forward(g, xv).unwrap();
                let (enc_out, _) = lstm.run(g, fused, &init).unwrap();
                let mut r1 = masks(seed, 0);
                let l1 = lm.head.forward(g, enc_out, &mut Mode::Train(&mut r1)).unwrap();
                let mut r2 = masks(seed, 1);
                let l2 = lm.head.forward(g, enc_out, &mut Mode::Train(&mut r2)).unwrap();
                Ok(rdrop_loss(g, l1, l2, &y, alpha).unwrap().unwrap())
            };
            let cases: [(&'static str, &ParamStore<f64>, &ParamLoss<'_>); 6] = [
                ("fusion", &tp, &fusion),
                ("transformer", &tp, &transformer),
                ("head", &tp, &head),
                ("full transformer graph with rdrop", &tp, &full_transformer),
                ("lstm", &lp, &lstm_only),
                ("full lstm graph with rdrop", &lp, &full_lstm),
            ];
            let clear = cases
                .iter()
                .all(|(_, store, build)| relu_margin(store, *build).unwrap() >= KINK_MARGIN);
            if !clear {
                attempt += 1;
                assert!(attempt < 1000, "no kink-free instance for trial {t}");
                continue;
            }
            for (name, store, build) in cases {
                let e = check_params(store, None, seed, build).unwrap();
                let w = worst.entry(name).or_insert(0.0);
                *w = w.max(e);
            }
            break;
        }
    }
    worst
}

fn transformer_rdrop(
    g: &mut Graph<'_, f64>,
    model: &Model,
    x: &Tensor<f64>,
    spans: &[std::ops::Range<usize>],
    y: &[i8],
    alpha: f64,
    t: u64,
) -> mmexpr_tensor::Result<Var> {
    let xv = g.constant(x.clone());
    let mut r1 = masks(t, 0);
    let l1 = model.transformer_logits(g, xv, spans, &mut Mode::Train(&mut r1)).unwrap();
    let mut r2 = masks(t, 1);
    let l2 = model.transformer_logits(g, xv, spans, &mut Mode::Train(&mut r2)).unwrap();
    Ok(rdrop_loss(g, l1, l2, y, alpha).unwrap().unwrap())
}
