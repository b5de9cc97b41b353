use crate::error::{Error, Result};

/// Noise schedule tables, indexed by step `t ∈ [1, Γ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Reverse steps executed at inference.
    pub tau: usize,
}

impl DiffusionSchedule {
    /// Linear `β` from `beta_start` to `beta_end` over `steps`.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, tau: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if tau > steps {
            return Err(Error::Config(format!("tau = {tau} exceeds {steps} steps")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            tau,
        })
    }

    pub fn from_config(c: &crate::config::ScheduleConfig) -> Result<Self> {
        Self::new(c.steps, c.beta_start, c.beta_end, c.tau)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("diffusion step {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.beta(t)?.sqrt())
    }
}

/// `√ᾱ · y + √(1 − ᾱ) · ε` for an explicit `ᾱ`.
pub fn noise_with_alpha_bar(alpha_bar: f64, y: &[f64], eps: &[f64]) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    y.iter().zip(eps).map(|(y, e)| a * y + b * e).collect()
}

pub fn forward_noise(y: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    if y.len() != eps.len() {
        return Err(Error::dim("forward_noise", format!("{} values, {} noise entries", y.len(), eps.len())));
    }
    Ok(noise_with_alpha_bar(schedule.alpha_bar(t)?, y, eps))
}

/// Coefficients `(1/√α_t, (1 − α_t)/√(1 − ᾱ_t), σ_t)` of one reverse update.
pub fn reverse_coefficients(t: usize, schedule: &DiffusionSchedule) -> Result<(f64, f64, f64)> {
    let a = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t)?;
    Ok((1.0 / a.sqrt(), (1.0 - a) / (1.0 - ab).sqrt(), schedule.sigma(t)?))
}

/// One reverse update given the predicted noise; `z` is `None` on the final
/// step. `sigma` overrides the schedule's σ_t when given.
pub fn reverse_step(
    y: &[f64],
    eps_hat: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    z: Option<&[f64]>,
    sigma: Option<f64>,
) -> Result<Vec<f64>> {
    if y.len() != eps_hat.len() || z.is_some_and(|z| z.len() != y.len()) {
        return Err(Error::dim("reverse_step", "trajectory, noise estimate and z must match".to_string()));
    }
    let (c0, c1, s) = reverse_coefficients(t, schedule)?;
    let s = sigma.unwrap_or(s);
    Ok(y.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (y, e))| c0 * (y - c1 * e) + z.map_or(0.0, |z| s * z[i]))
        .collect())
}
