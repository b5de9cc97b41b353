use rand::Rng;

use crate::config::{InitializerInput, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::nn::{Activation, Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Denoiser input positions are divided by this, metres.
const TRAJECTORY_SCALE: f64 = 10.0;

/// Sinusoidal embedding of a diffusion step.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Noise predictor `ε_θ(Ỹ, t, C)`: a three-layer GELU MLP on the
/// concatenation of the flattened trajectory, the step embedding and the
/// agent's context row. The first layer is split by input block so the
/// context part can be computed once per agent and shared by all of its
/// candidates and steps.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub traj: ParamId,
    pub step: ParamId,
    pub context: Linear,
    pub hidden: Linear,
    pub out: Linear,
    pub embed_dim: usize,
    pub traj_dim: usize,
}

impl Denoiser {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let traj_dim = 2 * cfg.t_future;
        let width = cfg.denoiser_mult * cfg.d;
        let fan_in = traj_dim + cfg.step_embedding + cfg.context_dim();
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            traj: store.add_normal("denoiser.in.traj", &[traj_dim, width], std, rng),
            step: store.add_normal("denoiser.in.step", &[cfg.step_embedding, width], std, rng),
            context: Linear::new(store, "denoiser.in.context", cfg.context_dim(), width, (cfg.context_dim() as f64 / fan_in as f64).sqrt(), rng),
            hidden: Linear::new(store, "denoiser.hidden", width, width, 1.0, rng),
            out: Linear::new(store, "denoiser.out", width, traj_dim, 1.0, rng),
            embed_dim: cfg.step_embedding,
            traj_dim,
        }
    }

    /// Context part of the first layer, `[N, width]`.
    pub fn project_context<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, context: Var) -> Result<Var> {
        self.context.forward(g, store, context)
    }

    /// `y: [M, 2T]` noisy trajectories, `steps[m]` their diffusion steps,
    /// `agent_of[m]` the row of `projected` (see [`Self::project_context`])
    /// each belongs to. Returns `ε̂: [M, 2T]`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        y: Var,
        steps: &[usize],
        projected: Var,
        agent_of: &[usize],
    ) -> Result<Var> {
        let m = g.shape(y)[0];
        if steps.len() != m || agent_of.len() != m || g.shape(y)[1] != self.traj_dim {
            return Err(Error::dim("denoiser", format!("{:?} with {} steps, {} rows", g.shape(y), steps.len(), agent_of.len())));
        }
        let ys = g.scale(y, S::lit(1.0 / TRAJECTORY_SCALE))?;
        let wy = g.param(store, self.traj);
        let h = g.matmul(ys, wy)?;
        let emb = if steps.iter().all(|&s| s == steps[0]) {
            let e = step_embedding(steps[0], self.embed_dim);
            let e = g.constant(Tensor::from_f64(&[1, self.embed_dim], &e)?);
            let we = g.param(store, self.step);
            let row = g.matmul(e, we)?;
            let width = g.shape(row)[1];
            let row = g.reshape(row, &[width])?;
            g.add_row(h, row)?
        } else {
            let e: Vec<f64> = steps.iter().flat_map(|&s| step_embedding(s, self.embed_dim)).collect();
            let e = g.constant(Tensor::from_f64(&[m, self.embed_dim], &e)?);
            let we = g.param(store, self.step);
            let p = g.matmul(e, we)?;
            g.add(h, p)?
        };
        let ctx = g.gather_rows(projected, agent_of)?;
        let h = g.add(emb, ctx)?;
        let h = g.gelu(h)?;
        let h = self.hidden.forward(g, store, h)?;
        let h = g.gelu(h)?;
        self.out.forward(g, store, h)
    }

    /// Noise estimate for a single trajectory given its context row.
    pub fn denoise_eps<S: Scalar>(&self, store: &ParamStore<S>, y: &[f64], t: usize, context_row: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let c = g.constant(Tensor::from_f64(&[1, context_row.len()], context_row)?);
        let p = self.project_context(&mut g, store, c)?;
        let y = g.constant(Tensor::from_f64(&[1, y.len()], y)?);
        let e = self.forward(&mut g, store, y, &[t], p, &[0])?;
        Ok(g.value(e).to_f64_vec())
    }
}

/// Leapfrog initializer: K control sequences and K logits per agent.
#[derive(Clone, Debug)]
pub struct Initializer {
    pub controls: Mlp,
    pub probs: Mlp,
    pub k: usize,
    pub t_future: usize,
    pub input: InitializerInput,
}

impl Initializer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let input = match cfg.initializer_input {
            InitializerInput::Context => cfg.context_dim(),
            InitializerInput::TypeFeature => cfg.d,
        };
        let out = cfg.k * cfg.t_future * 2;
        Self {
            controls: Mlp::new(store, "initializer.controls", &[input, 2 * cfg.d, out], Activation::Gelu, 0.5, rng),
            probs: Mlp::new(store, "initializer.probs", &[input, cfg.d, cfg.k], Activation::Gelu, 1.0, rng),
            k: cfg.k,
            t_future: cfg.t_future,
            input: cfg.initializer_input,
        }
    }

    /// `x: [N, in]` → raw outputs `[N·K, 2T]` (agent-major) and logits `[N, K]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<(Var, Var)> {
        let n = g.shape(x)[0];
        let raw = self.controls.forward(g, store, x)?;
        let raw = g.reshape(raw, &[n * self.k, 2 * self.t_future])?;
        let logits = self.probs.forward(g, store, x)?;
        Ok((raw, logits))
    }

    /// Controls `[K, T, 2]` (flattened) and probabilities `[K]` for one input row.
    pub fn init_candidates<S: Scalar>(&self, store: &ParamStore<S>, row: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_f64(&[1, row.len()], row)?);
        let (raw, logits) = self.forward(&mut g, store, x)?;
        let probs = crate::numerics::softmax(&g.value(logits).to_f64_vec());
        Ok((g.value(raw).to_f64_vec(), probs))
    }
}
