use mmexpr_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// RDrop objective over per-frame logits of two stochastic passes:
///
/// `L = (CE1 + CE2) / 2 + alpha * (KL(P1||P2) + KL(P2||P1)) / 2`
///
/// with every term averaged over frames whose target is `>= 0`. The two KL
/// terms are summed in the closed form `sum (p1 - p2)(log p1 - log p2)`,
/// which is exactly symmetric in the pass order. Log-probabilities come from
/// `log_softmax`, so no epsilon is needed.
///
/// Returns `None` when every frame is masked.
pub fn rdrop_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits1: Var,
    logits2: Var,
    targets: &[i8],
    alpha: f64,
) -> Result<Option<Var>> {
    let shape = g.shape(logits1).to_vec();
    if shape != g.shape(logits2) {
        return Err(Error::validation(format!(
            "rdrop passes differ in shape: {shape:?} vs {:?}",
            g.shape(logits2)
        )));
    }
    let [rows, classes] = shape[..] else {
        return Err(Error::validation(format!("rdrop expects [frames, classes] logits, got {shape:?}")));
    };
    if targets.len() != rows {
        return Err(Error::validation(format!(
            "{} targets for {rows} frames",
            targets.len()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let mut onehot = vec![T::zero(); rows * classes];
    let mut rowmask = vec![T::zero(); rows * classes];
    let mut n_valid = 0usize;
    for (r, &y) in targets.iter().enumerate() {
        if y < 0 {
            continue;
        }
        let y = y as usize;
        if y >= classes {
            return Err(Error::validation(format!("target {y} outside 0..{classes}")));
        }
        onehot[r * classes + y] = T::one();
        rowmask[r * classes..(r + 1) * classes].fill(T::one());
        n_valid += 1;
    }
    if n_valid == 0 {
        return Ok(None);
    }
    let onehot = g.constant(Tensor::new(&shape, onehot)?);
    let rowmask = g.constant(Tensor::new(&shape, rowmask)?);

    let lp1 = g.log_softmax(logits1)?;
    let lp2 = g.log_softmax(logits2)?;
    let p1 = g.softmax(logits1)?;
    let p2 = g.softmax(logits2)?;

    let t1 = g.mul(onehot, lp1)?;
    let t1 = g.sum(t1)?;
    let t2 = g.mul(onehot, lp2)?;
    let t2 = g.sum(t2)?;
    let ce = g.add(t1, t2)?;
    let ce = g.scale(ce, T::from_f64_lossy(-0.5 / n_valid as f64))?;

    let dp = g.sub(p1, p2)?;
    let dl = g.sub(lp1, lp2)?;
    let kl = g.mul(dp, dl)?;
    let kl = g.mul(rowmask, kl)?;
    let kl = g.sum(kl)?;
    let kl = g.scale(kl, T::from_f64_lossy(alpha * 0.5 / n_valid as f64))?;
    Ok(Some(g.add(ce, kl)?))
}

/// Value of [`rdrop_loss`] on plain logits.
pub fn rdrop_value<T: Scalar>(
    logits1: &Tensor<T>,
    logits2: &Tensor<T>,
    targets: &[i8],
    alpha: f64,
) -> Result<Option<T>> {
    let mut g = Graph::new();
    let a = g.constant(logits1.clone());
    let b = g.constant(logits2.clone());
    Ok(rdrop_loss(&mut g, a, b, targets, alpha)?.and_then(|l| g.value(l).item()))
}
