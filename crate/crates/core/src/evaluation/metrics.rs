//! Displacement metrics over candidate sets laid out `[K, T_f, 2]`.

/// Distance above which a final error counts as a miss, metres.
pub const MISS_THRESHOLD: f64 = 2.0;

fn point_error(c: &[f64], gt: &[f64], t: usize) -> f64 {
    (c[2 * t] - gt[2 * t]).hypot(c[2 * t + 1] - gt[2 * t + 1])
}

fn check(candidates: &[f64], gt: &[f64], valid: &[bool]) -> Option<usize> {
    let t = valid.len();
    if t == 0 || gt.len() != 2 * t || candidates.is_empty() || candidates.len() % (2 * t) != 0 {
        return None;
    }
    Some(candidates.len() / (2 * t))
}

/// Average displacement of candidate `k` over the valid steps.
pub fn ade_of(candidates: &[f64], k: usize, gt: &[f64], valid: &[bool]) -> Option<f64> {
    let t = valid.len();
    let c = &candidates[k * 2 * t..(k + 1) * 2 * t];
    let steps: Vec<usize> = (0..t).filter(|&s| valid[s]).collect();
    if steps.is_empty() {
        return None;
    }
    Some(steps.iter().map(|&s| point_error(c, gt, s)).sum::<f64>() / steps.len() as f64)
}

/// Best-of-K average displacement; `None` when no step is valid.
pub fn min_ade(candidates: &[f64], gt: &[f64], valid: &[bool]) -> Option<f64> {
    let k = check(candidates, gt, valid)?;
    (0..k).map(|c| ade_of(candidates, c, gt, valid)).try_fold(f64::INFINITY, |m, e| e.map(|e| m.min(e)))
}

/// Index of the step scored as "final": the last step, or the last valid
/// one when the last is masked. The flag reports the substitution.
pub fn final_step(valid: &[bool]) -> Option<(usize, bool)> {
    let last = valid.iter().rposition(|&v| v)?;
    Some((last, last + 1 != valid.len()))
}

/// Final displacement of candidate `k`.
pub fn fde_of(candidates: &[f64], k: usize, gt: &[f64], valid: &[bool]) -> Option<f64> {
    let t = valid.len();
    let (f, _) = final_step(valid)?;
    Some(point_error(&candidates[k * 2 * t..(k + 1) * 2 * t], gt, f))
}

/// Best-of-K final displacement and whether the final step was substituted.
pub fn min_fde(candidates: &[f64], gt: &[f64], valid: &[bool]) -> Option<(f64, bool)> {
    let k = check(candidates, gt, valid)?;
    let (_, flagged) = final_step(valid)?;
    let best = (0..k).filter_map(|c| fde_of(candidates, c, gt, valid)).fold(f64::INFINITY, f64::min);
    Some((best, flagged))
}

/// Percentage of final errors strictly above [`MISS_THRESHOLD`].
pub fn miss_rate(fdes: &[f64]) -> Option<f64> {
    if fdes.is_empty() {
        return None;
    }
    let misses = fdes.iter().filter(|&&e| e > MISS_THRESHOLD).count();
    Some(100.0 * misses as f64 / fdes.len() as f64)
}

/// Index of the most probable candidate, lowest index on ties.
pub fn most_probable(probabilities: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    best
}
