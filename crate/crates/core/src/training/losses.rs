//! Training objectives. Each returns a scalar graph node; the winner
//! search of the reconstruction loss runs on plain values.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Per-timestep weights renormalized over the valid steps so that they
/// keep the same total: `W'_t = W_t · ΣW / Σ_valid W`.
pub fn renormalized_weights(weights: &[f64], valid: &[bool]) -> Option<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    let kept: f64 = weights.iter().zip(valid).filter(|(_, &v)| v).map(|(w, _)| w).sum();
    if kept <= 0.0 {
        return None;
    }
    Some(weights.iter().zip(valid).map(|(w, &v)| if v { w * total / kept } else { 0.0 }).collect())
}

/// Weighted squared error `Σ_t W_t ‖y_t − ŷ_t‖²` of one trajectory.
pub fn weighted_error(pred: &[f64], gt: &[f64], weights: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(t, w)| {
            let dx = pred[2 * t] - gt[2 * t];
            let dy = pred[2 * t + 1] - gt[2 * t + 1];
            w * (dx * dx + dy * dy)
        })
        .sum()
}

/// Best candidate per agent and its weighted error; `None` for agents
/// without valid future steps. Ties go to the lowest index.
///
/// `candidates` is `[N, K, T, 2]`, `gt` is `[N, T, 2]`, `valid` `[N, T]`.
pub fn wta_winners(candidates: &[f64], k: usize, gt: &[f64], valid: &[bool], weights: &[f64]) -> Result<Vec<Option<(usize, f64)>>> {
    let t = weights.len();
    let n = valid.len() / t.max(1);
    if t == 0 || k == 0 || candidates.len() != n * k * t * 2 || gt.len() != n * t * 2 || valid.len() != n * t {
        return Err(Error::dim("loss_wta", format!("{} candidate values, {} targets, K={k}, T={t}", candidates.len(), gt.len())));
    }
    Ok((0..n)
        .map(|a| {
            let w = renormalized_weights(weights, &valid[a * t..(a + 1) * t])?;
            let target = &gt[a * t * 2..(a + 1) * t * 2];
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let off = (a * k + c) * t * 2;
                let e = weighted_error(&candidates[off..off + t * 2], target, &w);
                if e < best.1 {
                    best = (c, e);
                }
            }
            Some(best)
        })
        .collect())
}

/// Plain value of the winner-take-all loss (mean over agents with any
/// valid future step) together with the winners.
pub fn loss_wta_value(candidates: &[f64], k: usize, gt: &[f64], valid: &[bool], weights: &[f64]) -> Result<(f64, Vec<Option<usize>>)> {
    let w = wta_winners(candidates, k, gt, valid, weights)?;
    let kept: Vec<f64> = w.iter().flatten().map(|&(_, e)| e).collect();
    let loss = if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    Ok((loss, w.iter().map(|o| o.map(|(c, _)| c)).collect()))
}

/// Winner-take-all reconstruction loss on a graph. `candidates: [N·K, 2T]`.
/// Returns the loss node and each agent's winner.
pub fn loss_wta<S: Scalar>(
    g: &mut Graph<S>,
    candidates: Var,
    k: usize,
    gt: &[f64],
    valid: &[bool],
    weights: &[f64],
) -> Result<(Option<Var>, Vec<Option<usize>>)> {
    let values = g.value(candidates).to_f64_vec();
    let winners = wta_winners(&values, k, gt, valid, weights)?;
    let t = weights.len();
    let rows: Vec<usize> = winners
        .iter()
        .enumerate()
        .filter_map(|(a, w)| w.map(|(c, _)| a * k + c))
        .collect();
    let plain: Vec<Option<usize>> = winners.iter().map(|o| o.map(|(c, _)| c)).collect();
    if rows.is_empty() {
        return Ok((None, plain));
    }
    let agents: Vec<usize> = winners.iter().enumerate().filter(|(_, w)| w.is_some()).map(|(a, _)| a).collect();
    let count = agents.len() as f64;
    let target: Vec<f64> = agents.iter().flat_map(|&a| gt[a * t * 2..(a + 1) * t * 2].iter().copied()).collect();
    let mut scale = Vec::with_capacity(agents.len() * t * 2);
    for &a in &agents {
        let w = renormalized_weights(weights, &valid[a * t..(a + 1) * t]).expect("agent has valid steps");
        for wt in w {
            scale.push(wt / count);
            scale.push(wt / count);
        }
    }
    let picked = g.gather_rows(candidates, &rows)?;
    let target = g.constant(Tensor::from_f64(&[agents.len(), 2 * t], &target)?);
    let diff = g.sub(picked, target)?;
    let sq = g.square(diff)?;
    let scale = g.constant(Tensor::from_f64(&[agents.len(), 2 * t], &scale)?);
    let weighted = g.mul(sq, scale)?;
    Ok((Some(g.sum(weighted)?), plain))
}

/// Cross-entropy of the candidate logits `[N, K]` against the winners,
/// averaged over agents that have one.
pub fn loss_prob<S: Scalar>(g: &mut Graph<S>, logits: Var, winners: &[Option<usize>]) -> Result<Option<Var>> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != winners.len() {
        return Err(Error::dim("loss_prob", format!("logits {shape:?} for {} agents", winners.len())));
    }
    let k = shape[1];
    let count = winners.iter().flatten().count();
    if count == 0 {
        return Ok(None);
    }
    let mut w = vec![S::zero(); winners.len() * k];
    for (a, win) in winners.iter().enumerate() {
        if let Some(c) = win {
            w[a * k + c] = S::lit(-1.0 / count as f64);
        }
    }
    let lp = g.log_softmax(logits)?;
    let w = g.constant(Tensor::new(&shape, w)?);
    let picked = g.mul(lp, w)?;
    Ok(Some(g.sum(picked)?))
}

/// Mean squared error between predicted and true noise over the entries
/// flagged in `mask` (same layout as `eps_hat`).
pub fn loss_denoiser<S: Scalar>(g: &mut Graph<S>, eps_hat: Var, eps: &Tensor<S>, mask: &[bool]) -> Result<Option<Var>> {
    if g.shape(eps_hat) != eps.shape() || mask.len() != eps.len() {
        return Err(Error::dim("loss_denoiser", format!("{:?} vs {:?}", g.shape(eps_hat), eps.shape())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let target = g.constant(eps.clone());
    let diff = g.sub(eps_hat, target)?;
    let sq = g.square(diff)?;
    let w = Tensor::from_fn(eps.shape(), |i| if mask[i] { S::lit(1.0 / count as f64) } else { S::zero() });
    let w = g.constant(w);
    let m = g.mul(sq, w)?;
    Ok(Some(g.sum(m)?))
}
