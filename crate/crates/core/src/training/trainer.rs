//! Two-stage optimisation: the denoiser first, then the initializer and
//! encoders against a frozen denoiser.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{loss_denoiser, loss_prob, loss_wta};
use super::optim::Adam;
use crate::diffusion::{anchors, forward_noise, ParkDiffusion};
use crate::encoders::EncoderInput;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamGrads, Scalar, Tensor, Var};
use crate::scenario::EgoSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Noise-prediction training of the encoders and denoiser.
    Denoiser,
    /// Initializer, encoders and pedestrian layer against the frozen denoiser.
    Initializer,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Denoiser => 1,
            Stage::Initializer => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPreset {
    Uniform,
    /// `W_t = t / T_f`, so late steps count more.
    Linear,
}

/// Per-timestep weights of the reconstruction loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeWeights {
    Preset(WeightPreset),
    Custom(Vec<f64>),
}

impl Default for TimeWeights {
    fn default() -> Self {
        TimeWeights::Preset(WeightPreset::Uniform)
    }
}

impl TimeWeights {
    pub fn resolve(&self, t_future: usize) -> Result<Vec<f64>> {
        let w = match self {
            TimeWeights::Preset(WeightPreset::Uniform) => vec![1.0; t_future],
            TimeWeights::Preset(WeightPreset::Linear) => (1..=t_future).map(|t| t as f64 / t_future as f64).collect(),
            TimeWeights::Custom(w) => w.clone(),
        };
        if w.len() != t_future {
            return Err(Error::Config(format!("train.weights has {} entries, expected {t_future}", w.len())));
        }
        if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config("train.weights must be positive and finite".into()));
        }
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub denoiser_iterations: usize,
    pub initializer_iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda_ce: f64,
    pub weights: TimeWeights,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            denoiser_iterations: 2000,
            initializer_iterations: 2000,
            learning_rate: 1e-3,
            batch_size: 16,
            lambda_ce: 0.1,
            weights: TimeWeights::default(),
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn iterations(&self, stage: Stage) -> usize {
        match stage {
            Stage::Denoiser => self.denoiser_iterations,
            Stage::Initializer => self.initializer_iterations,
        }
    }

    pub fn validate(&self, t_future: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lambda_ce >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("train.lambda_ce must be >= 0 and train.grad_clip > 0".into()));
        }
        self.weights.resolve(t_future).map(|_| ())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: u8,
    pub loss: f64,
    pub loss_denoiser: f64,
    pub loss_wta: f64,
    pub loss_prob: f64,
    pub grad_norm: f64,
}

pub fn write_log<W: Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Contract(format!("log row: {e}")))?;
    }
    out.flush().map_err(|e| Error::io("training log", e))
}

pub fn save_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log(rows, std::io::BufWriter::new(f))
}

/// Samples with their encoder inputs and anchors precomputed.
pub struct TrainData<S> {
    pub samples: Vec<EgoSample>,
    inputs: Vec<EncoderInput<S>>,
    anchors: Vec<Vec<([f64; 2], [f64; 2])>>,
}

impl<S: Scalar> TrainData<S> {
    pub fn new(samples: Vec<EgoSample>) -> Self {
        let inputs = samples.iter().map(EncoderInput::from_sample).collect();
        let anchors = samples.iter().map(anchors).collect();
        Self { samples, inputs, anchors }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Future of one agent with invalid steps filled from the nearest valid
/// step; `None` if no step is valid.
fn filled_future(sample: &EgoSample, a: usize) -> Option<Vec<f64>> {
    let fut = sample.future_of(a);
    let valid = sample.future_valid_of(a);
    let first = valid.iter().position(|&v| v)?;
    let mut out = fut.to_vec();
    let mut last = first;
    for t in 0..valid.len() {
        let src = if valid[t] {
            last = t;
            t
        } else if t < first {
            first
        } else {
            last
        };
        out[2 * t] = fut[2 * src];
        out[2 * t + 1] = fut[2 * src + 1];
    }
    Some(out)
}

struct SampleOutcome<S> {
    grads: ParamGrads<S>,
    loss: f64,
    denoiser: f64,
    wta: f64,
    prob: f64,
}

/// Training state for one model. Stage and iteration count are part of
/// the state so a checkpoint can resume mid-stage.
pub struct Trainer<S> {
    pub model: ParkDiffusion<S>,
    pub config: TrainConfig,
    pub stage: Stage,
    /// Completed iterations of the current stage.
    pub iteration: usize,
    pub adam: Adam<S>,
    pub log: Vec<LogRow>,
    weights: Vec<f64>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: ParkDiffusion<S>, config: TrainConfig) -> Result<Self> {
        config.validate(model.config.t_future)?;
        let weights = config.weights.resolve(model.config.t_future)?;
        let adam = Adam::new(&model.store, config.learning_rate);
        Ok(Self {
            model,
            config,
            stage: Stage::Denoiser,
            iteration: 0,
            adam,
            log: Vec::new(),
            weights,
        })
    }

    /// Restores a trainer from saved state without resetting the optimizer.
    pub fn resume(model: ParkDiffusion<S>, config: TrainConfig, stage: Stage, iteration: usize, adam: Adam<S>) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        t.stage = stage;
        t.iteration = iteration;
        t.adam = adam;
        Ok(t)
    }

    /// Switches to the initializer stage with a fresh optimizer that never
    /// touches the denoiser.
    pub fn begin_initializer_stage(&mut self) {
        self.stage = Stage::Initializer;
        self.iteration = 0;
        self.adam = Adam::new(&self.model.store, self.config.learning_rate);
        self.adam.freeze_prefix(&self.model.store, "denoiser.");
    }

    pub fn stage_done(&self) -> bool {
        self.iteration >= self.config.iterations(self.stage)
    }

    /// Runs the remaining iterations of both stages.
    pub fn run(&mut self, data: &TrainData<S>) -> Result<()> {
        if self.stage == Stage::Denoiser {
            while !self.stage_done() {
                self.step(data)?;
            }
            self.begin_initializer_stage();
        }
        while !self.stage_done() {
            self.step(data)?;
        }
        Ok(())
    }

    /// Runs the remaining iterations of the current stage only.
    pub fn run_stage(&mut self, data: &TrainData<S>) -> Result<()> {
        while !self.stage_done() {
            self.step(data)?;
        }
        Ok(())
    }

    fn iteration_seed(&self) -> u64 {
        let stage = self.stage.number() as u64;
        self.config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stage << 40)
            .wrapping_add(self.iteration as u64)
    }

    /// One optimizer update on a mini-batch. Returns the logged row.
    pub fn step(&mut self, data: &TrainData<S>) -> Result<LogRow> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let iteration = self.iteration;
        let mut rng = ChaCha8Rng::seed_from_u64(self.iteration_seed());
        let b = self.config.batch_size.min(data.len());
        let batch: Vec<(usize, u64)> = sample_indices(&mut rng, data.len(), b)
            .into_iter()
            .map(|i| (i, rng.random()))
            .collect();
        let stage = self.stage;
        let outcomes: Vec<Option<SampleOutcome<S>>> = batch
            .par_iter()
            .map(|&(i, seed)| self.sample_gradients(data, i, seed, stage))
            .collect::<Result<_>>()
            .map_err(|e| diverged(iteration, e))?;

        let kept: Vec<SampleOutcome<S>> = outcomes.into_iter().flatten().collect();
        let mut grads = self.model.store.zero_grads();
        let mut row = LogRow {
            iteration,
            stage: stage.number(),
            loss: 0.0,
            loss_denoiser: 0.0,
            loss_wta: 0.0,
            loss_prob: 0.0,
            grad_norm: 0.0,
        };
        if !kept.is_empty() {
            let c = kept.len() as f64;
            for o in &kept {
                grads.add_assign(&o.grads);
                row.loss += o.loss / c;
                row.loss_denoiser += o.denoiser / c;
                row.loss_wta += o.wta / c;
                row.loss_prob += o.prob / c;
            }
            grads.scale(S::lit(1.0 / c));
            let norm = grads.clip_global_norm(S::lit(self.config.grad_clip)).to_f64_lossy();
            if !row.loss.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    detail: format!("loss {} gradient norm {norm}", row.loss),
                });
            }
            row.grad_norm = norm;
            self.adam.update(&mut self.model.store, &grads);
            if self.model.store.iter().any(|(_, _, t)| !t.all_finite()) {
                return Err(Error::Diverged {
                    iteration,
                    detail: "parameters became non-finite".into(),
                });
            }
        }
        self.iteration += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    fn sample_gradients(&self, data: &TrainData<S>, i: usize, seed: u64, stage: Stage) -> Result<Option<SampleOutcome<S>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let (loss, denoiser, wta, prob) = match stage {
            Stage::Denoiser => match self.denoiser_loss(&mut g, data, i, &mut rng)? {
                Some(l) => (l, g.value(l).item().to_f64_lossy(), 0.0, 0.0),
                None => return Ok(None),
            },
            Stage::Initializer => {
                g.freeze_prefix("denoiser.");
                match self.initializer_loss(&mut g, data, i, &mut rng)? {
                    Some((l, w, p)) => (l, 0.0, w, p),
                    None => return Ok(None),
                }
            }
        };
        let total = g.value(loss).item().to_f64_lossy();
        let grads = g.backward(loss)?;
        Ok(Some(SampleOutcome {
            grads: g.param_grads(&grads, &self.model.store),
            loss: total,
            denoiser,
            wta,
            prob,
        }))
    }

    fn denoiser_loss(&self, g: &mut Graph<S>, data: &TrainData<S>, i: usize, rng: &mut ChaCha8Rng) -> Result<Option<Var>> {
        let sample = &data.samples[i];
        let model = &self.model;
        let tf = model.config.t_future;
        let agents: Vec<(usize, Vec<f64>)> = (0..sample.num_agents())
            .filter_map(|a| filled_future(sample, a).map(|f| (a, f)))
            .collect();
        if agents.is_empty() {
            return Ok(None);
        }
        let m = agents.len();
        let mut noisy = Vec::with_capacity(m * 2 * tf);
        let mut eps_all = Vec::with_capacity(m * 2 * tf);
        let mut steps = Vec::with_capacity(m);
        let mut mask = Vec::with_capacity(m * 2 * tf);
        for (a, y0) in &agents {
            let t = rng.random_range(1..=model.schedule.steps());
            let eps: Vec<f64> = (0..2 * tf).map(|_| StandardNormal.sample(rng)).collect();
            noisy.extend(forward_noise(y0, t, &eps, &model.schedule)?);
            eps_all.extend(eps);
            steps.push(t);
            for &v in sample.future_valid_of(*a) {
                mask.push(v);
                mask.push(v);
            }
        }
        let encoded = model.encoders.forward(g, &model.store, &data.inputs[i], &model.config)?;
        let projected = model.denoiser.project_context(g, &model.store, encoded.context)?;
        let y = g.constant(Tensor::from_f64(&[m, 2 * tf], &noisy)?);
        let agent_of: Vec<usize> = agents.iter().map(|(a, _)| *a).collect();
        let eps_hat = model.denoiser.forward(g, &model.store, y, &steps, projected, &agent_of)?;
        let eps = Tensor::from_f64(&[m, 2 * tf], &eps_all)?;
        loss_denoiser(g, eps_hat, &eps, &mask)
    }

    fn initializer_loss(&self, g: &mut Graph<S>, data: &TrainData<S>, i: usize, rng: &mut ChaCha8Rng) -> Result<Option<(Var, f64, f64)>> {
        let sample = &data.samples[i];
        let model = &self.model;
        let (n, k) = (sample.num_agents(), model.config.k);
        let tau = model.config.schedule.tau;
        let z = model.draw_reverse_noise(n * k, tau, rng);
        let cg = model.candidates_graph(g, &data.inputs[i], &data.anchors[i], tau, &z)?;
        let (wta, winners) = loss_wta(g, cg.trajectories, k, &sample.future, &sample.future_valid, &self.weights)?;
        let Some(wta) = wta else { return Ok(None) };
        let wta_value = g.value(wta).item().to_f64_lossy();
        let mut total = wta;
        let mut prob_value = 0.0;
        if self.config.lambda_ce > 0.0 {
            if let Some(ce) = loss_prob(g, cg.logits, &winners)? {
                prob_value = g.value(ce).item().to_f64_lossy();
                let scaled = g.scale(ce, S::lit(self.config.lambda_ce))?;
                total = g.add(total, scaled)?;
            }
        }
        Ok(Some((total, wta_value, prob_value)))
    }
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(d) | Error::Rollout(d) => Error::Diverged { iteration, detail: d },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::scenario::{build_samples, synth_generate, DatasetConfig, SynthConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            transformer_layers: 1,
            type_dim: 4,
            k: 2,
            step_embedding: 4,
            denoiser_mult: 1,
            ..Default::default()
        }
    }

    fn tiny_data() -> TrainData<f64> {
        let scenes = synth_generate(&SynthConfig { scenes: 2, ..Default::default() }, 3).unwrap();
        TrainData::new(build_samples(&scenes, &DatasetConfig::default()).unwrap())
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            denoiser_iterations: 3,
            initializer_iterations: 3,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn params(t: &Trainer<f64>) -> Vec<Vec<f64>> {
        t.model.store.iter().map(|(_, _, x)| x.data().to_vec()).collect()
    }

    #[test]
    fn training_is_deterministic_and_resumes_bit_identically() {
        let data = tiny_data();
        let mut full = Trainer::new(ParkDiffusion::new(tiny_model(), 1).unwrap(), tiny_train()).unwrap();
        full.run(&data).unwrap();

        let mut again = Trainer::new(ParkDiffusion::new(tiny_model(), 1).unwrap(), tiny_train()).unwrap();
        again.run(&data).unwrap();
        assert_eq!(params(&full), params(&again));
        assert_eq!(full.log, again.log);

        // stop inside each stage, save, reload and finish
        for stop in [2usize, 5] {
            let mut part = Trainer::new(ParkDiffusion::new(tiny_model(), 1).unwrap(), tiny_train()).unwrap();
            for _ in 0..stop {
                if part.stage == Stage::Denoiser && part.stage_done() {
                    part.begin_initializer_stage();
                }
                part.step(&data).unwrap();
            }
            let mut buf = Vec::new();
            crate::training::write_model(&part.model, Some(&part), &mut buf).unwrap();
            let ckpt = crate::training::read_checkpoint::<f64, _>(&buf[..]).unwrap();
            let mut resumed = ckpt.into_trainer(TrainConfig::default()).unwrap();
            resumed.run(&data).unwrap();
            assert_eq!(params(&full), params(&resumed), "resume after {stop} steps");
        }
    }

    #[test]
    fn second_stage_leaves_denoiser_untouched() {
        let data = tiny_data();
        let mut t = Trainer::new(ParkDiffusion::new(tiny_model(), 2).unwrap(), tiny_train()).unwrap();
        t.run_stage(&data).unwrap();
        t.begin_initializer_stage();
        let before: Vec<(String, Vec<f64>)> = t.model.store.iter().map(|(_, n, x)| (n.to_string(), x.data().to_vec())).collect();
        t.run_stage(&data).unwrap();
        for ((name, old), (_, _, new)) in before.iter().zip(t.model.store.iter()) {
            if name.starts_with("denoiser.") {
                assert_eq!(old.as_slice(), new.data(), "{name}");
            }
        }
        assert!(t.log.iter().all(|r| r.loss.is_finite() && r.grad_norm >= 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data();
        let mut t = Trainer::new(ParkDiffusion::new(tiny_model(), 2).unwrap(), tiny_train()).unwrap();
        let ids: Vec<_> = t.model.store.ids().collect();
        for id in ids {
            let shape = t.model.store.get(id).shape().to_vec();
            t.model.store.set(id, Tensor::full(&shape, 1e300)).unwrap();
        }
        let r = t.step(&data);
        assert!(matches!(r, Err(Error::Diverged { iteration: 0, .. })), "{r:?}");
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let rows = vec![LogRow { iteration: 0, stage: 1, loss: 1.5, loss_denoiser: 1.5, loss_wta: 0.0, loss_prob: 0.0, grad_norm: 2.0 }];
        let mut out = Vec::new();
        write_log(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("iteration,stage,loss,loss_denoiser,loss_wta,loss_prob,grad_norm\n0,1,1.5,"));
    }

    #[test]
    fn weight_presets() {
        assert_eq!(TimeWeights::default().resolve(3).unwrap(), vec![1.0; 3]);
        let lin = TimeWeights::Preset(WeightPreset::Linear).resolve(4).unwrap();
        assert_eq!(lin, vec![0.25, 0.5, 0.75, 1.0]);
        assert!(TimeWeights::Custom(vec![1.0, 0.0]).resolve(2).is_err());
        assert!(TimeWeights::Custom(vec![1.0]).resolve(2).is_err());
        let parsed: TimeWeights = serde_json::from_str("\"linear\"").unwrap();
        assert_eq!(parsed, TimeWeights::Preset(WeightPreset::Linear));
        let parsed: TimeWeights = serde_json::from_str("[1.0, 2.0]").unwrap();
        assert_eq!(parsed, TimeWeights::Custom(vec![1.0, 2.0]));
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_values() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rat": 0.1}"#).is_err());
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(10), Err(Error::Config(_))));
    }
}
