//! Predictors, metric aggregation and the ablation runners.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ekf::ekf_sample;
use super::metrics::{fde_of, min_ade, min_fde, most_probable, MISS_THRESHOLD};
use crate::diffusion::{CandidateSet, ParkDiffusion};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::scenario::{AgentType, EgoSample};

/// Maps a sample to candidate futures for each of its agents. `index` is
/// the sample's position in the evaluated set and may seed randomness.
pub trait Predictor: Sync {
    fn predict(&self, sample: &EgoSample, index: usize) -> Result<CandidateSet>;
}

/// Returns the ground truth; every metric is zero.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, sample: &EgoSample, _: usize) -> Result<CandidateSet> {
        Ok(CandidateSet::single(sample, sample.future.clone()))
    }
}

pub struct EkfPredictor;

impl Predictor for EkfPredictor {
    fn predict(&self, sample: &EgoSample, _: usize) -> Result<CandidateSet> {
        let (traj, held) = ekf_sample(sample);
        let mut set = CandidateSet::single(sample, traj);
        set.fallback = held;
        Ok(set)
    }
}

/// Trained model; sample `i` uses reverse-process noise seeded by
/// `(seed, i)`.
pub struct ModelPredictor<'a, S> {
    pub model: &'a ParkDiffusion<S>,
    pub seed: u64,
}

impl<S: Scalar> Predictor for ModelPredictor<'_, S> {
    fn predict(&self, sample: &EgoSample, index: usize) -> Result<CandidateSet> {
        self.model.predict(sample, self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(index as u64))
    }
}

/// Which candidate the miss rate scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissRateMode {
    /// Best-of-K final error, the same candidate pool as minFDE.
    #[default]
    BestOfK,
    /// Final error of the highest-probability candidate.
    MostProbable,
}

/// Metrics of one agent class; `None` where no agent contributed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub min_ade: Option<f64>,
    pub min_fde: Option<f64>,
    pub miss_rate: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub vehicle: ClassMetrics,
    pub pedestrian: ClassMetrics,
    /// Pooled over all agents of both classes.
    pub all: ClassMetrics,
    /// Agents scored on their last valid step because the final one was masked.
    pub substituted_final: usize,
}

impl MetricsTable {
    pub fn rows(&self) -> [(&'static str, &ClassMetrics); 3] {
        [("vehicle", &self.vehicle), ("pedestrian", &self.pedestrian), ("all", &self.all)]
    }
}

/// Per-agent scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentScore {
    pub agent_type: AgentType,
    pub ade: f64,
    pub fde: f64,
    /// Final error used for the miss rate.
    pub miss_fde: f64,
    pub substituted: bool,
}

/// Scores every agent with a valid future step. Candidate sets must list
/// the sample's agents in order.
pub fn score_sample(sample: &EgoSample, set: &CandidateSet, mode: MissRateMode) -> Result<Vec<AgentScore>> {
    if set.num_agents() != sample.num_agents() || set.t_future != sample.t_future {
        return Err(Error::Contract(format!(
            "candidate set has {} agents x {} steps, sample has {} x {}",
            set.num_agents(),
            set.t_future,
            sample.num_agents(),
            sample.t_future
        )));
    }
    let mut out = Vec::new();
    for a in 0..sample.num_agents() {
        let (c, gt, valid) = (set.candidates(a), sample.future_of(a), sample.future_valid_of(a));
        let (Some(ade), Some((fde, substituted))) = (min_ade(c, gt, valid), min_fde(c, gt, valid)) else {
            continue;
        };
        let miss_fde = match mode {
            MissRateMode::BestOfK => fde,
            MissRateMode::MostProbable => fde_of(c, most_probable(set.probabilities_of(a)), gt, valid).expect("valid step"),
        };
        out.push(AgentScore {
            agent_type: sample.agent_types[a],
            ade,
            fde,
            miss_fde,
            substituted,
        });
    }
    Ok(out)
}

/// Order-independent sum: sorting first makes the result a function of
/// the multiset of values only.
fn stable_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn class_metrics(scores: &[&AgentScore]) -> ClassMetrics {
    let n = scores.len();
    if n == 0 {
        return ClassMetrics::default();
    }
    let mean = |f: fn(&AgentScore) -> f64| Some(stable_sum(scores.iter().map(|s| f(s)).collect()) / n as f64);
    let misses = scores.iter().filter(|s| s.miss_fde > MISS_THRESHOLD).count();
    ClassMetrics {
        min_ade: mean(|s| s.ade),
        min_fde: mean(|s| s.fde),
        miss_rate: Some(100.0 * misses as f64 / n as f64),
        count: n,
    }
}

pub fn aggregate(scores: &[AgentScore]) -> MetricsTable {
    let of = |t: Option<AgentType>| -> Vec<&AgentScore> { scores.iter().filter(|s| t.is_none_or(|t| s.agent_type == t)).collect() };
    MetricsTable {
        vehicle: class_metrics(&of(Some(AgentType::Vehicle))),
        pedestrian: class_metrics(&of(Some(AgentType::Pedestrian))),
        all: class_metrics(&of(None)),
        substituted_final: scores.iter().filter(|s| s.substituted).count(),
    }
}

/// Scores of every agent in every sample, in sample order.
pub fn score_all(samples: &[EgoSample], predictor: &dyn Predictor, mode: MissRateMode) -> Result<Vec<AgentScore>> {
    let per: Vec<Vec<AgentScore>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| score_sample(s, &predictor.predict(s, i)?, mode))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn evaluate(samples: &[EgoSample], predictor: &dyn Predictor, mode: MissRateMode) -> Result<MetricsTable> {
    Ok(aggregate(&score_all(samples, predictor, mode)?))
}

/// Copy of a sample with `fraction` of its soft and hard polylines removed
/// uniformly at random. For a fixed rng state the removed sets are nested
/// across fractions.
pub fn mask_polylines(sample: &EgoSample, fraction: f64, rng: &mut ChaCha8Rng) -> EgoSample {
    let (ns, nh) = (sample.soft.len(), sample.hard.len());
    let total = ns + nh;
    let drop = ((fraction * total as f64).round() as usize).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let mut keep = vec![true; total];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    sample.with_polylines(&keep[..ns], &keep[ns..])
}

/// Evaluation after masking map context; sample `i` uses a mask seeded by
/// `(seed, i)`.
pub fn ablate_mask(samples: &[EgoSample], predictor: &dyn Predictor, fraction: f64, seed: u64, mode: MissRateMode) -> Result<MetricsTable> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("mask fraction must lie in [0, 1], got {fraction}")));
    }
    let masked: Vec<EgoSample> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            mask_polylines(s, fraction, &mut rng)
        })
        .collect();
    evaluate(&masked, predictor, mode)
}

/// Mask fractions of the context-masking study.
pub const MASK_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentBucket {
    pub label: String,
    pub min_agents: usize,
    /// Inclusive; `None` for the open-ended last bucket.
    pub max_agents: Option<usize>,
    pub samples: Vec<usize>,
    /// Share of samples in this bucket, percent.
    pub ratio: f64,
}

/// Partitions samples by agent count into 1-4, 5-9, 10-14, 15-19, 20-24
/// and 25 or more.
pub fn bucket_by_agents(samples: &[EgoSample]) -> Vec<AgentBucket> {
    let mut buckets: Vec<AgentBucket> = (0..6)
        .map(|i| {
            let lo = if i == 0 { 1 } else { 5 * i };
            let hi = (i < 5).then_some(5 * i + 4);
            AgentBucket {
                label: match hi {
                    Some(h) => format!("{lo}-{h}"),
                    None => format!(">={lo}"),
                },
                min_agents: lo,
                max_agents: hi,
                samples: Vec::new(),
                ratio: 0.0,
            }
        })
        .collect();
    for (i, s) in samples.iter().enumerate() {
        let b = (s.num_agents() / 5).min(5);
        buckets[b].samples.push(i);
    }
    for b in &mut buckets {
        b.ratio = if samples.is_empty() { 0.0 } else { 100.0 * b.samples.len() as f64 / samples.len() as f64 };
    }
    buckets
}
