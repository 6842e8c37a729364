//! Central finite-difference checks of autodiff gradients, evaluated in f64.
//!
//! [`op_suite`] exercises every differentiable graph op on random instances;
//! [`check_inputs`] and [`check_params`] check arbitrary graphs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Central difference step.
pub const FD_STEP: f64 = 1e-3;
/// Largest accepted [`rel_err`].
pub const FD_TOL: f64 = 1e-4;

/// |a - b| relative to the larger magnitude, floored at 1e-3 so that
/// gradients that are zero up to rounding compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Builds a scalar loss from graph inputs.
pub type InputLoss<'a> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'a;
/// Builds a scalar loss from a graph bound to a parameter store.
pub type ParamLoss<'a> = dyn Fn(&mut Graph<'_, f64>) -> Result<Var> + 'a;

/// Worst [`rel_err`] of d(loss)/d(input) over every element of every input.
pub fn check_inputs(inputs: &[Tensor<f64>], build: &InputLoss<'_>) -> Result<f64> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars)?;
        g.value(l).item().ok_or_else(|| TensorError::invalid("gradcheck", "loss is not a scalar"))
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.input(vars[k]);
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let an = analytic.map_or(0.0, |a| a.data()[j]);
            worst = worst.max(rel_err(an, fd));
        }
    }
    Ok(worst)
}

/// Worst [`rel_err`] of d(loss)/d(param). Every entry of every parameter is
/// probed unless `sample` is given, in which case at most that many entries
/// per parameter, drawn without replacement from `seed`.
pub fn check_params(
    store: &ParamStore<f64>,
    sample: Option<usize>,
    seed: u64,
    build: &ParamLoss<'_>,
) -> Result<f64> {
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let l = build(&mut g)?;
        g.value(l).item().ok_or_else(|| TensorError::invalid("gradcheck", "loss is not a scalar"))
    };
    let mut g = Graph::with_params(store);
    let loss = build(&mut g)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        for j in entries(store.get(id).numel(), sample, &mut rng) {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let an = grads.param(id).map_or(0.0, |a| a.data()[j]);
            worst = worst.max(rel_err(an, fd));
        }
    }
    Ok(worst)
}

/// Smallest |x| fed to any ReLU by the loss graph; infinite without ReLUs.
/// Instances below a few steps of margin straddle a kink under finite
/// differences and say nothing about the analytic gradient.
pub fn relu_margin(store: &ParamStore<f64>, build: &ParamLoss<'_>) -> Result<f64> {
    let mut g = Graph::with_params(store);
    build(&mut g)?;
    Ok(g.relu_margin().unwrap_or(f64::INFINITY))
}

fn entries(n: usize, sample: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match sample {
        Some(k) if k < n => rand::seq::index::sample(rng, n, k).into_vec(),
        _ => (0..n).collect(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU's kink is never straddled.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces `y` to a scalar with fixed random weights so every output element
/// gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Checks every differentiable op on `trials` random instances each and
/// returns the worst relative error per op name.
pub fn op_suite(trials: u64) -> Result<BTreeMap<&'static str, f64>> {
    let mut worst = BTreeMap::new();
    let mut record = |name: &'static str, inputs: &[Tensor<f64>], build: &InputLoss<'_>| -> Result<()> {
        let e = check_inputs(inputs, build)?;
        let w = worst.entry(name).or_insert(0.0f64);
        *w = w.max(e);
        Ok(())
    };
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
        let rng = &mut rng;
        let m = rng.random_range(1..5);
        let k = rng.random_range(1..6);
        let n = rng.random_range(1..5);

        let a = rand_tensor(rng, &[m, k]);
        let b = rand_tensor(rng, &[k, n]);
        let bt = rand_tensor(rng, &[n, k]);
        record("matmul", &[a.clone(), b], &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, t)
        })?;
        record("matmul_t", &[a.clone(), bt], &|g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            weighted_sum(g, y, t)
        })?;

        let b = rand_tensor(rng, &[m, k]);
        let bias = rand_tensor(rng, &[k]);
        record("add", &[a.clone(), b.clone()], &|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, t)
        })?;
        record("sub", &[a.clone(), b.clone()], &|g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, t)
        })?;
        record("mul", &[a.clone(), b], &|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, t)
        })?;
        record("add_bias", &[a.clone(), bias], &|g, v| {
            let y = g.add_bias(v[0], v[1])?;
            weighted_sum(g, y, t)
        })?;
        record("scale", std::slice::from_ref(&a), &|g, v| {
            let y = g.scale(v[0], -1.7)?;
            weighted_sum(g, y, t)
        })?;

        let x = Tensor::from_fn(&[m, k], |_| rng.random_range(-3.0..3.0));
        record("sigmoid", std::slice::from_ref(&x), &|g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y, t)
        })?;
        record("tanh", std::slice::from_ref(&x), &|g, v| {
            let y = g.tanh(v[0])?;
            weighted_sum(g, y, t)
        })?;
        record("softmax", std::slice::from_ref(&x), &|g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, t)
        })?;
        record("log_softmax", &[x], &|g, v| {
            let y = g.log_softmax(v[0])?;
            weighted_sum(g, y, t)
        })?;
        let x = rand_off_zero(rng, &[m, k]);
        record("relu", &[x], &|g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, t)
        })?;
        record("dropout", std::slice::from_ref(&a), &|g, v| {
            // Same mask on every evaluation.
            let mut mask_rng = ChaCha8Rng::seed_from_u64(77 + t);
            let y = g.dropout(v[0], 0.3, &mut mask_rng)?;
            weighted_sum(g, y, t)
        })?;

        // Very short rows have near-degenerate variance, where a 1e-3 step is
        // dominated by truncation error.
        let w = rng.random_range(4..9);
        let x = Tensor::from_fn(&[m, w], |_| rng.random_range(-2.0..2.0));
        let gamma = Tensor::from_fn(&[w], |_| rng.random_range(0.5..1.5));
        let beta = rand_tensor(rng, &[w]);
        record("layer_norm", &[x, gamma, beta], &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, t)
        })?;

        let side = rand_tensor(rng, &[m, n]);
        let below = rand_tensor(rng, &[n + 1, k]);
        record("concat", &[a.clone(), side], &|g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, y, t)
        })?;
        record("concat", &[a.clone(), below], &|g, v| {
            let y = g.concat(&[v[0], v[1]], 0)?;
            weighted_sum(g, y, t)
        })?;
        let start = rng.random_range(0..k);
        let len = rng.random_range(1..=k - start);
        record("slice", std::slice::from_ref(&a), &|g, v| {
            let y = g.slice(v[0], 1, start, len)?;
            weighted_sum(g, y, t)
        })?;
        let row = rng.random_range(0..m);
        record("slice", std::slice::from_ref(&a), &|g, v| {
            let y = g.slice(v[0], 0, row, m - row)?;
            weighted_sum(g, y, t)
        })?;
        record("transpose", std::slice::from_ref(&a), &|g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, t)
        })?;
        record("sum", std::slice::from_ref(&a), &|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })?;
        record("mean", &[a], &|g, v| {
            let th = g.tanh(v[0])?;
            g.mean(th)
        })?;
    }
    Ok(worst)
}
