//! Central finite-difference verification of analytic gradients.
//!
//! The error measure is the largest absolute discrepancy divided by the
//! largest gradient magnitude of either kind (an infinity-norm relative
//! error), which stays meaningful for entries whose true gradient is zero.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares flattened analytic and numeric gradients.
pub fn compare(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-12);
    let max_abs = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    GradCheckReport {
        max_rel_error: max_abs / scale,
        max_abs_error: max_abs,
        entries_checked: analytic.len(),
        tolerance,
    }
}

/// Checks gradients of a scalar function of input tensors. `build` must
/// record a scalar loss from the given input variables.
pub fn grad_check<S, F>(build: F, inputs: &[Tensor<S>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<S>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item().to_f64_lossy())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        match grads.get(*v) {
            Some(t) => analytic.extend(t.to_f64_vec()),
            None => analytic.extend(std::iter::repeat(0.0).take(n)),
        }
        for j in 0..n {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + S::lit(step);
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - S::lit(step);
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    Ok(compare(&analytic, &numeric, tolerance))
}

/// Checks parameter gradients of a scalar loss recorded by `build`.
/// At most `per_param` randomly chosen entries of each parameter are
/// perturbed.
pub fn grad_check_params<S, F, R>(
    store: &ParamStore<S>,
    build: F,
    step: f64,
    tolerance: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &ParamStore<S>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let pg = g.param_grads(&grads, store);

    let mut work = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(rng, n, per_param).into_vec()
        };
        for j in picks {
            let orig = store.get(id).data()[j];
            let mut eval = |x: S| -> Result<f64> {
                work.get_mut(id).data_mut()[j] = x;
                let mut g = Graph::inference();
                let loss = build(&mut g, &work)?;
                Ok(g.value(loss).item().to_f64_lossy())
            };
            let up = eval(orig + S::lit(step))?;
            let down = eval(orig - S::lit(step))?;
            work.get_mut(id).data_mut()[j] = orig;
            analytic.push(pg.get(id).data()[j].to_f64_lossy());
            numeric.push((up - down) / (2.0 * step));
        }
    }
    Ok(compare(&analytic, &numeric, tolerance))
}

/// Reduces any tensor to a scalar through a fixed weighting so that every
/// output entry contributes a distinct gradient.
pub fn project_to_scalar<S: Scalar>(g: &mut Graph<S>, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| S::lit(((i * 7919 % 23) as f64 - 11.0) / 7.0 + 0.05 * (i % 5) as f64));
    debug_assert_eq!(w.len(), n);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}
