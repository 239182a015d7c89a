//! Differentiable losses.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

/// Mean over rows of `-sum_k t[r,k] * log_softmax(logits)[r,k]`.
///
/// `targets` may be one-hot rows or any distribution per row.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let rows = g.value(logits).rows();
    let per_row = cross_entropy_rows(g, logits, targets)?;
    let total = g.sum(per_row);
    Ok(g.scale(total, 1.0 / rows.max(1) as f64))
}

/// Per-row cross-entropy as a `rows x 1` column.
pub fn cross_entropy_rows(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let (r, c) = g.value(logits).matrix_dims("cross_entropy")?;
    if targets.dims2() != Some((r, c)) {
        return Err(Error::Shape(format!(
            "cross_entropy: logits {r}x{c} vs targets {:?}",
            targets.shape()
        )));
    }
    let logp = g.log_softmax(logits, 1)?;
    let t = g.constant(targets.clone());
    let prod = g.mul(logp, t)?;
    let s = g.sum_axis(prod, 1)?;
    Ok(g.scale(s, -1.0))
}

/// `sum_r w[r] * CE_r`, the weighted sum of per-row cross-entropies.
pub fn weighted_cross_entropy(
    g: &mut Graph,
    logits: Var,
    targets: &Tensor,
    row_weights: &[f64],
) -> Result<Var> {
    let rows = cross_entropy_rows(g, logits, targets)?;
    if row_weights.len() != g.value(rows).rows() {
        return Err(Error::Shape(format!(
            "weighted_cross_entropy: {} weights for {} rows",
            row_weights.len(),
            g.value(rows).rows()
        )));
    }
    let w = g.constant(Tensor::from_matrix(row_weights.len(), 1, row_weights.to_vec())?);
    let wr = g.mul(rows, w)?;
    Ok(g.sum(wr))
}

/// Mean binary cross-entropy of `probs` against `{0,1}` targets.
pub fn bce(g: &mut Graph, probs: Var, targets: &Tensor) -> Result<Var> {
    let pv = g.value(probs);
    if !pv.same_shape(targets) {
        return Err(Error::Shape(format!(
            "bce: probabilities {:?} vs targets {:?}",
            pv.shape(),
            targets.shape()
        )));
    }
    if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Invalid(format!("bce: target {bad} is not 0 or 1")));
    }
    let n = targets.len().max(1) as f64;
    let shape = pv.shape().to_vec();
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let t = g.constant(targets.clone().reshape(&shape)?);
    let one_minus_t_data = targets.data().iter().map(|t| 1.0 - t).collect();
    let one_minus_t = g.constant(Tensor::new(&shape, one_minus_t_data)?);
    let logp = g.ln(p);
    let q = g.scale(p, -1.0);
    let q = g.add_scalar(q, 1.0);
    let logq = g.ln(q);
    let a = g.mul(t, logp)?;
    let b = g.mul(one_minus_t, logq)?;
    let s = g.add(a, b)?;
    let total = g.sum(s);
    Ok(g.scale(total, -1.0 / n))
}

/// Mean squared error against a constant target.
pub fn mse(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let pv = g.value(pred);
    if !pv.same_shape(target) {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pv.shape(),
            target.shape()
        )));
    }
    let shape = pv.shape().to_vec();
    let t = g.constant(target.clone().reshape(&shape)?);
    let d = g.sub(pred, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}
