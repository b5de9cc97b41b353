use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::networks::{Denoiser, Initializer};
use super::schedule::{reverse_coefficients, DiffusionSchedule};
use crate::config::{InitializerInput, ModelConfig};
use crate::encoders::{Encoded, EncoderInput, Encoders};
use crate::error::{Error, Result};
use crate::kinematics::{rollout_graph, PedestrianNet};
use crate::numerics::{softmax, Graph, ParamStore, Scalar, Tensor, Var};
use crate::scenario::{AgentType, EgoSample};

/// Without kinematics, raw initializer outputs are offsets from the last
/// observed position in units of this many metres.
const OFFSET_SCALE: f64 = 5.0;
/// Candidates farther than this from the ego are treated as diverged, metres.
const DIVERGENCE_RADIUS: f64 = 1e4;

/// K candidate futures per agent, agent-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub agent_ids: Vec<u64>,
    pub agent_types: Vec<AgentType>,
    pub k: usize,
    pub t_future: usize,
    /// `[N, K, T_f, 2]`.
    pub trajectories: Vec<f64>,
    /// `[N, K]`.
    pub probabilities: Vec<f64>,
    /// Kinematic output before denoising, `[N, K, T_f, 2]`.
    pub rollout: Vec<f64>,
    /// `[N, K]`; set where a candidate was replaced by constant velocity.
    pub fallback: Vec<bool>,
}

impl CandidateSet {
    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }

    /// `[K, T_f, 2]` block of one agent.
    pub fn candidates(&self, agent: usize) -> &[f64] {
        let w = self.k * self.t_future * 2;
        &self.trajectories[agent * w..(agent + 1) * w]
    }

    pub fn rollout_of(&self, agent: usize) -> &[f64] {
        let w = self.k * self.t_future * 2;
        &self.rollout[agent * w..(agent + 1) * w]
    }

    pub fn probabilities_of(&self, agent: usize) -> &[f64] {
        &self.probabilities[agent * self.k..(agent + 1) * self.k]
    }

    /// Single-candidate set holding one trajectory per agent.
    pub fn single(sample: &EgoSample, trajectories: Vec<f64>) -> Self {
        let n = sample.num_agents();
        Self {
            agent_ids: sample.agent_ids.clone(),
            agent_types: sample.agent_types.clone(),
            k: 1,
            t_future: sample.t_future,
            rollout: trajectories.clone(),
            trajectories,
            probabilities: vec![1.0; n],
            fallback: vec![false; n],
        }
    }
}

/// Graph handles of one candidate pass.
#[derive(Clone, Copy, Debug)]
pub struct CandidateGraph {
    pub encoded: Encoded,
    /// `[N·K, 2T]` after the reverse steps.
    pub trajectories: Var,
    /// `[N·K, 2T]` before denoising.
    pub rollout: Var,
    pub logits: Var,
    pub projected_context: Var,
}

/// All learned components plus the diffusion schedule.
#[derive(Clone, Debug)]
pub struct ParkDiffusion<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub encoders: Encoders,
    pub initializer: Initializer,
    pub pedestrian: PedestrianNet,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
}

/// Last observed position and velocity of every agent.
pub fn anchors(sample: &EgoSample) -> Vec<([f64; 2], [f64; 2])> {
    (0..sample.num_agents()).map(|a| sample.anchor(a)).collect()
}

fn constant_velocity(anchor: ([f64; 2], [f64; 2]), t_future: usize, dt: f64) -> Vec<f64> {
    let (p, v) = anchor;
    (0..t_future)
        .flat_map(|t| {
            let s = dt * (t + 1) as f64;
            [p[0] + v[0] * s, p[1] + v[1] * s]
        })
        .collect()
}

impl<S: Scalar> ParkDiffusion<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = Encoders::new(&mut store, &config, &mut rng)?;
        let initializer = Initializer::new(&mut store, &config, &mut rng);
        let pedestrian = PedestrianNet::new(&mut store, "pedestrian", config.physics.v_ped_max, &mut rng);
        let denoiser = Denoiser::new(&mut store, &config, &mut rng);
        let schedule = DiffusionSchedule::from_config(&config.schedule)?;
        Ok(Self {
            config,
            store,
            encoders,
            initializer,
            pedestrian,
            denoiser,
            schedule,
        })
    }

    /// Records encoder, initializer, kinematic layer and `tau` reverse
    /// steps. `z[i]` is the noise added at step `tau − i` (none is added
    /// at step 1), each `[N·K, 2T]`.
    pub fn candidates_graph(
        &self,
        g: &mut Graph<S>,
        input: &EncoderInput<S>,
        anchors: &[([f64; 2], [f64; 2])],
        tau: usize,
        z: &[Tensor<S>],
    ) -> Result<CandidateGraph> {
        let cfg = &self.config;
        let (n, k, tf) = (input.num_agents(), cfg.k, cfg.t_future);
        if anchors.len() != n {
            return Err(Error::dim("candidates", format!("{} anchors for {n} agents", anchors.len())));
        }
        if z.len() < tau.saturating_sub(1) {
            return Err(Error::Contract(format!("{} noise draws for {tau} reverse steps", z.len())));
        }
        let encoded = self.encoders.forward(g, &self.store, input, cfg)?;
        let init_in = match cfg.initializer_input {
            InitializerInput::Context => encoded.context,
            InitializerInput::TypeFeature => encoded.f_c,
        };
        let (raw, logits) = self.initializer.forward(g, &self.store, init_in)?;
        let m = n * k;
        let rep = |f: &dyn Fn(usize) -> f64| Tensor::from_fn(&[m, 2], |i| S::lit(f(i)));
        let rollout = if cfg.use_kinematics {
            let p0 = g.constant(rep(&|i| anchors[i / (2 * k)].0[i % 2]));
            let v0 = g.constant(rep(&|i| anchors[i / (2 * k)].1[i % 2]));
            let controls = g.scale(raw, S::lit(cfg.control_scale))?;
            let is_vehicle: Vec<bool> = (0..m).map(|r| input.agent_types[r / k] == AgentType::Vehicle).collect();
            rollout_graph(g, &self.store, &self.pedestrian, &cfg.physics, p0, v0, controls, &is_vehicle)?
        } else {
            let base = Tensor::from_fn(&[m, 2 * tf], |i| S::lit(anchors[i / (2 * tf * k)].0[i % 2]));
            let base = g.constant(base);
            let offsets = g.scale(raw, S::lit(OFFSET_SCALE))?;
            g.add(base, offsets)?
        };

        let projected_context = self.denoiser.project_context(g, &self.store, encoded.context)?;
        let agent_of: Vec<usize> = (0..m).map(|r| r / k).collect();
        let mut y = rollout;
        for (i, t) in (1..=tau).rev().enumerate() {
            let eps = self.denoiser.forward(g, &self.store, y, &vec![t; m], projected_context, &agent_of)?;
            let (c0, c1, sigma) = reverse_coefficients(t, &self.schedule)?;
            let scaled = g.scale(eps, S::lit(c1))?;
            let diff = g.sub(y, scaled)?;
            y = g.scale(diff, S::lit(c0))?;
            if t > 1 {
                let noise = g.constant(z[i].map(|v| v * S::lit(sigma)));
                y = g.add(y, noise)?;
            }
        }
        Ok(CandidateGraph {
            encoded,
            trajectories: y,
            rollout,
            logits,
            projected_context,
        })
    }

    /// Standard-normal draws for the reverse steps of one sample.
    pub fn draw_reverse_noise(&self, rows: usize, tau: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<S>> {
        let w = 2 * self.config.t_future;
        (0..tau.saturating_sub(1))
            .map(|_| {
                Tensor::from_fn(&[rows, w], |_| {
                    let v: f64 = StandardNormal.sample(rng);
                    S::lit(v)
                })
            })
            .collect()
    }

    /// Joint prediction for all agents of a sample. Deterministic in
    /// `(parameters, sample, seed)`.
    pub fn predict(&self, sample: &EgoSample, seed: u64) -> Result<CandidateSet> {
        self.predict_with_tau(sample, seed, self.schedule.tau)
    }

    pub fn predict_with_tau(&self, sample: &EgoSample, seed: u64, tau: usize) -> Result<CandidateSet> {
        let cfg = &self.config;
        if sample.t_past != cfg.t_past || sample.t_future != cfg.t_future {
            return Err(Error::Contract(format!(
                "sample horizon ({}, {}) differs from model ({}, {})",
                sample.t_past, sample.t_future, cfg.t_past, cfg.t_future
            )));
        }
        if tau > self.schedule.steps() {
            return Err(Error::Contract(format!("tau = {tau} exceeds the schedule")));
        }
        let (n, k, tf) = (sample.num_agents(), cfg.k, cfg.t_future);
        let anchors = anchors(sample);
        let input = EncoderInput::from_sample(sample);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = self.draw_reverse_noise(n * k, tau, &mut rng);
        let mut g = Graph::inference();
        let w = tf * 2;
        let cv: Vec<Vec<f64>> = anchors.iter().map(|&a| constant_velocity(a, tf, cfg.physics.dt)).collect();
        let out = self.candidates_graph(&mut g, &input, &anchors, tau, &z);
        let (mut traj, mut roll, probs) = match out {
            Ok(c) => {
                let logits = g.value(c.logits).to_f64_vec();
                let probs: Vec<f64> = logits.chunks(k).flat_map(softmax).collect();
                (g.value(c.trajectories).to_f64_vec(), g.value(c.rollout).to_f64_vec(), probs)
            }
            Err(Error::NonFinite(_)) | Err(Error::Rollout(_)) => {
                let nan = vec![f64::NAN; n * k * w];
                (nan.clone(), nan, vec![1.0 / k as f64; n * k])
            }
            Err(e) => return Err(e),
        };
        let mut fallback = vec![false; n * k];
        for r in 0..n * k {
            let row = &traj[r * w..(r + 1) * w];
            if row.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_RADIUS) {
                fallback[r] = true;
                traj[r * w..(r + 1) * w].copy_from_slice(&cv[r / k]);
                if roll[r * w..(r + 1) * w].iter().any(|v| !v.is_finite()) {
                    roll[r * w..(r + 1) * w].copy_from_slice(&cv[r / k]);
                }
            }
        }
        Ok(CandidateSet {
            agent_ids: sample.agent_ids.clone(),
            agent_types: sample.agent_types.clone(),
            k,
            t_future: tf,
            trajectories: traj,
            probabilities: probs,
            rollout: roll,
            fallback,
        })
    }
}
