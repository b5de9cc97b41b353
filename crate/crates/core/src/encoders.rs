//! Scene encoding: agent histories, soft and hard map polylines, and the
//! agent-type modulation, assembled into one context row per agent.
//!
//! The agent encoder has two branches. A transformer runs self-attention
//! over each agent's own timestamps and is mean-pooled over valid steps; a
//! 1-D convolution followed by a GRU summarizes the same history. Their
//! outputs are concatenated into `e_a` of width 2d. The map path projects
//! `e_a` to width d, attends over soft polylines (replacing the agent
//! feature), then adds attention over hard polylines as a residual.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::nn::{scaled_dot_attention, Activation, Conv1d, Gru, Linear, Mlp, TransformerLayer};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::scenario::{AgentType, EgoSample, AGENT_FEATURES, MAP_FEATURES, POLYLINE_POINTS};

/// Divisors applied to the 12 history features: positions in tens of
/// metres, headings in units of π, speeds and accelerations in m/s, m/s².
const FEATURE_SCALE: [f64; AGENT_FEATURES] = [
    10.0,
    10.0,
    std::f64::consts::PI,
    5.0,
    3.0,
    3.0,
    10.0,
    10.0,
    std::f64::consts::PI,
    5.0,
    3.0,
    3.0,
];
const MAP_POSITION_SCALE: f64 = 10.0;

/// Encoder inputs for one sample, already scaled.
#[derive(Clone, Debug)]
pub struct EncoderInput<S> {
    /// `[N, T_p, 12]`, zero at invalid timestamps.
    pub history: Tensor<S>,
    /// `N * T_p` flags.
    pub step_valid: Vec<bool>,
    pub agent_types: Vec<AgentType>,
    /// `[N_soft, P * F_map]`.
    pub soft: Tensor<S>,
    /// `[N_hard, P * F_map]`.
    pub hard: Tensor<S>,
}

impl<S: Scalar> EncoderInput<S> {
    pub fn from_sample(sample: &EgoSample) -> Self {
        let (n, t) = (sample.num_agents(), sample.t_past);
        let history = Tensor::from_fn(&[n, t, AGENT_FEATURES], |i| {
            let (row, c) = (i / AGENT_FEATURES, i % AGENT_FEATURES);
            if sample.agent_valid[row] {
                S::lit(sample.features[i] / FEATURE_SCALE[c])
            } else {
                S::zero()
            }
        });
        let polys = |ps: &[crate::scenario::Polyline]| {
            let raw = EgoSample::polyline_features(ps);
            let width = POLYLINE_POINTS * MAP_FEATURES;
            Tensor::from_fn(&[ps.len(), width], |i| {
                let v = raw[i];
                if i % MAP_FEATURES < 2 {
                    S::lit(v / MAP_POSITION_SCALE)
                } else {
                    S::lit(v)
                }
            })
        };
        Self {
            history,
            step_valid: sample.agent_valid.clone(),
            agent_types: sample.agent_types.clone(),
            soft: polys(&sample.soft),
            hard: polys(&sample.hard),
        }
    }

    pub fn num_agents(&self) -> usize {
        self.history.shape()[0]
    }

    pub fn t_past(&self) -> usize {
        self.history.shape()[1]
    }

    /// Agents with at least one valid timestamp.
    pub fn agent_valid(&self) -> Vec<bool> {
        let t = self.t_past();
        self.step_valid.chunks(t).map(|c| c.iter().any(|&v| v)).collect()
    }
}

/// Intermediate and final encoder outputs, all `[N, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub e_a: Var,
    pub e_soft: Var,
    pub e_map: Var,
    pub f_c: Var,
    pub context: Var,
}

#[derive(Clone, Debug)]
pub struct Encoders {
    pub d: usize,
    pub input: Linear,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub conv: Conv1d,
    pub gru: Gru,
    pub soft: Mlp,
    pub hard: Mlp,
    pub project: Linear,
    pub type_table: ParamId,
    pub modulation: Mlp,
}

impl Encoders {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d;
        let map_in = POLYLINE_POINTS * MAP_FEATURES;
        let layers = (0..cfg.transformer_layers)
            .map(|i| TransformerLayer::new(store, &format!("encoder.agent.layer{i}"), d, cfg.heads, cfg.ff_mult, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d,
            input: Linear::new(store, "encoder.agent.input", AGENT_FEATURES, d, 1.0, rng),
            positions: store.add_normal("encoder.agent.positions", &[cfg.t_past * d], 0.1, rng),
            layers,
            conv: Conv1d::new(store, "encoder.agent.conv", cfg.conv_kernel, AGENT_FEATURES, d, rng)?,
            gru: Gru::new(store, "encoder.agent.gru", d, d, rng),
            soft: Mlp::new(store, "encoder.soft", &[map_in, d, d], Activation::Gelu, 1.0, rng),
            hard: Mlp::new(store, "encoder.hard", &[map_in, d, d], Activation::Gelu, 1.0, rng),
            project: Linear::new(store, "encoder.project", 2 * d, d, 1.0, rng),
            type_table: store.add_normal("encoder.type.table", &[AgentType::ALL.len(), cfg.type_dim], 1.0, rng),
            modulation: Mlp::new(store, "encoder.type.mlp", &[cfg.type_dim, d, 2 * d], Activation::Gelu, 0.0, rng),
        })
    }

    /// `e_a: [N, 2d]`; rows of agents without valid timestamps are zero.
    pub fn agent_encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        input: &EncoderInput<S>,
    ) -> Result<Var> {
        let (n, t, d) = (input.num_agents(), input.t_past(), self.d);
        if input.step_valid.len() != n * t {
            return Err(Error::dim("agent_encode", format!("{} mask entries for [{n}, {t}]", input.step_valid.len())));
        }
        let x = g.constant(input.history.clone());

        // transformer branch
        let h0 = self.input.forward(g, store, x)?;
        let flat = g.reshape(h0, &[n, t * d])?;
        let pos = g.param(store, self.positions);
        let max_t = g.shape(pos)[0] / d;
        if t > max_t {
            return Err(Error::dim("agent_encode", format!("history of {t} steps exceeds {max_t}")));
        }
        let pos = if t < max_t { g.slice(pos, 0, t * d)? } else { pos };
        let flat = g.add_row(flat, pos)?;
        let h0 = g.reshape(flat, &[n, t, d])?;
        let mut h = h0;
        for layer in &self.layers {
            h = layer.forward(g, store, h, &input.step_valid)?;
        }
        let h = g.add(h, h0)?;
        let h = g.reshape(h, &[n * t, d])?;
        let mut pool = vec![S::zero(); n * n * t];
        for a in 0..n {
            let count = input.step_valid[a * t..(a + 1) * t].iter().filter(|&&v| v).count();
            for s in 0..t {
                if input.step_valid[a * t + s] {
                    pool[a * n * t + a * t + s] = S::one() / S::from_usize_lossy(count);
                }
            }
        }
        let pool = g.constant(Tensor::new(&[n, n * t], pool)?);
        let pooled = g.matmul(pool, h)?;

        // convolution + GRU branch
        let c = self.conv.forward(g, store, x)?;
        let c = g.gelu(c)?;
        let c = g.reshape(c, &[n, t * d])?;
        let xs = (0..t).map(|s| g.slice(c, s * d, d)).collect::<Result<Vec<_>>>()?;
        let masks: Vec<Var> = (0..t)
            .map(|s| {
                let m = Tensor::from_fn(&[n, d], |i| if input.step_valid[(i / d) * t + s] { S::one() } else { S::zero() });
                g.constant(m)
            })
            .collect();
        let h0 = g.constant(Tensor::zeros(&[n, d]));
        let last = self.gru.forward(g, store, &xs, h0, Some(&masks))?;

        let e_a = g.concat(&[pooled, last])?;
        mask_rows(g, e_a, &input.agent_valid())
    }

    pub fn encode_soft<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, polys: &Tensor<S>) -> Result<Option<Var>> {
        encode_polylines(g, store, &self.soft, polys)
    }

    pub fn encode_hard<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, polys: &Tensor<S>) -> Result<Option<Var>> {
        encode_polylines(g, store, &self.hard, polys)
    }

    /// `[γ ‖ β]` per agent from the type embedding, `[N, 2d]`.
    pub fn modulation_params<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        types: &[AgentType],
    ) -> Result<Var> {
        let table = g.param(store, self.type_table);
        let idx: Vec<usize> = types.iter().map(|t| t.index()).collect();
        let emb = g.gather_rows(table, &idx)?;
        self.modulation.forward(g, store, emb)
    }

    pub fn type_modulate<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        e_map: Var,
        types: &[AgentType],
    ) -> Result<Var> {
        let gb = self.modulation_params(g, store, types)?;
        let gamma = g.slice(gb, 0, self.d)?;
        let beta = g.slice(gb, self.d, self.d)?;
        film(g, e_map, gamma, beta)
    }

    /// Full encoder pass for one sample.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        input: &EncoderInput<S>,
        cfg: &ModelConfig,
    ) -> Result<Encoded> {
        let e_a = self.agent_encode(g, store, input)?;
        let projected = self.project.forward(g, store, e_a)?;
        let (e_soft, e_map) = if cfg.use_map {
            let f_soft = self.encode_soft(g, store, &input.soft)?;
            let e_soft = fuse_soft(g, projected, f_soft)?;
            let f_hard = self.encode_hard(g, store, &input.hard)?;
            (e_soft, fuse_hard(g, e_soft, f_hard)?)
        } else {
            (projected, projected)
        };
        let f_c = if cfg.use_type {
            self.type_modulate(g, store, e_map, &input.agent_types)?
        } else {
            e_map
        };
        let context = build_context(g, f_c, e_a, &input.agent_valid())?;
        Ok(Encoded {
            e_a,
            e_soft,
            e_map,
            f_c,
            context,
        })
    }
}

fn encode_polylines<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    mlp: &Mlp,
    polys: &Tensor<S>,
) -> Result<Option<Var>> {
    if polys.shape()[0] == 0 {
        return Ok(None);
    }
    let x = g.constant(polys.clone());
    mlp.forward(g, store, x).map(Some)
}

/// Attention of each agent over soft polylines; identity without any.
pub fn fuse_soft<S: Scalar>(g: &mut Graph<S>, e_a: Var, f_soft: Option<Var>) -> Result<Var> {
    match f_soft {
        Some(f) => scaled_dot_attention(g, e_a, f, f),
        None => Ok(e_a),
    }
}

/// Residual attention over hard polylines; identity without any.
pub fn fuse_hard<S: Scalar>(g: &mut Graph<S>, e_soft: Var, f_hard: Option<Var>) -> Result<Var> {
    match f_hard {
        Some(f) => {
            let r = scaled_dot_attention(g, e_soft, f, f)?;
            g.add(e_soft, r)
        }
        None => Ok(e_soft),
    }
}

/// `x ∘ (1 + γ) + β`.
pub fn film<S: Scalar>(g: &mut Graph<S>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = g.mul(x, gamma)?;
    let y = g.add(x, scaled)?;
    g.add(y, beta)
}

/// `C = [f_c ‖ e_a]` with rows of invalid agents zeroed.
pub fn build_context<S: Scalar>(g: &mut Graph<S>, f_c: Var, e_a: Var, agent_valid: &[bool]) -> Result<Var> {
    let c = g.concat(&[f_c, e_a])?;
    mask_rows(g, c, agent_valid)
}

fn mask_rows<S: Scalar>(g: &mut Graph<S>, x: Var, keep: &[bool]) -> Result<Var> {
    if keep.iter().all(|&k| k) {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let cols = shape[1];
    let m = Tensor::from_fn(&shape, |i| if keep[i / cols] { S::one() } else { S::zero() });
    let m = g.constant(m);
    g.mul(x, m)
}
