//! Run configuration: defaults, then the JSON file, then command-line flags.

use std::path::Path;

use parkdiffusion::config::ModelConfig;
use parkdiffusion::evaluation::MissRateMode;
use parkdiffusion::scenario::{DatasetConfig, SynthConfig};
use parkdiffusion::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub miss_rate: MissRateMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds scene generation, weight initialisation, batching and the
    /// reverse-process noise. Overrides `train.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

/// Field reference printed by `--help`. Kept in sync with the defaults by
/// a test.
pub const FIELD_HELP: &str = "\
CONFIGURATION FILE (JSON, unknown keys rejected; flags > file > defaults)
  seed                            run seed; also read from PARKDIFF_SEED
  model.d                         feature width
  model.heads                     attention heads of the agent transformer
  model.transformer_layers        agent transformer depth
  model.ff_mult                   transformer feed-forward width multiple
  model.conv_kernel               temporal convolution kernel (odd)
  model.type_dim                  agent-type embedding width
  model.k                         candidates per agent
  model.t_past                    observed steps
  model.t_future                  predicted steps
  model.step_embedding            diffusion-step embedding width (even)
  model.denoiser_mult             denoiser hidden width as a multiple of d
  model.schedule.steps            diffusion steps
  model.schedule.beta_start       first noise variance
  model.schedule.beta_end         last noise variance
  model.schedule.tau              reverse steps run at inference
  model.physics.mu                friction coefficient
  model.physics.g                 gravity, m/s^2
  model.physics.dt                step length, s
  model.physics.v_ped_max         pedestrian speed cap, m/s
  model.initializer_input         context | type_feature
  model.control_scale             scale of raw initializer outputs
  model.use_map                   map encoders on/off
  model.use_type                  type modulation on/off
  model.use_kinematics            kinematic rollout on/off
  train.denoiser_iterations       stage-1 iterations
  train.initializer_iterations    stage-2 iterations
  train.learning_rate             Adam step size
  train.batch_size                samples per iteration
  train.lambda_ce                 weight of the probability loss
  train.weights                   uniform | linear | [w_1, ..., w_Tf]
  train.grad_clip                 global gradient-norm clip
  train.seed                      replaced by the top-level seed
  synth.scenes                    scenes to generate
  synth.rows_of_spots             parking rows per lot
  synth.spots_per_row             spots per row
  synth.lane_width                aisle width, m
  synth.spot_width                spot width, m
  synth.spot_depth                spot depth, m
  synth.occupancy                 share of spots with parked cars
  synth.vehicles                  moving vehicles per scene
  synth.pedestrians               pedestrians per scene
  synth.episode_steps             steps per scene
  synth.crosswalks                crosswalks per lot
  dataset.sample.t_past           observed steps per sample
  dataset.sample.t_future         future steps per sample
  dataset.sample.radius           agent and polyline radius around the ego, m
  dataset.sample.max_agents       agent cap per sample
  dataset.t0_stride               spacing of prediction times, steps
  dataset.egos_per_t0             egos per prediction time
  eval.miss_rate                  best_of_k | most_probable
";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))?;
        if raw.pointer("/train/seed").is_some() {
            return Err(CliError::Config("train.seed: set the top-level seed instead".into()));
        }
        serde_json::from_value(raw).map_err(|e| CliError::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every section and propagates the seed.
    pub fn finalize(mut self) -> Result<Self, CliError> {
        self.train.seed = self.seed;
        self.model.validate()?;
        self.train.validate(self.model.t_future)?;
        self.synth.validate()?;
        self.dataset.sample.validate()?;
        if self.dataset.sample.t_past != self.model.t_past || self.dataset.sample.t_future != self.model.t_future {
            return Err(CliError::Config("dataset.sample.t_past/t_future must match model.t_past/t_future".into()));
        }
        if self.dataset.t0_stride == 0 || self.dataset.egos_per_t0 == 0 {
            return Err(CliError::Config("dataset.t0_stride and dataset.egos_per_t0 must be positive".into()));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_keys(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, x) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaf_keys(x, &p, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn help_documents_every_field() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        let mut keys = Vec::new();
        leaf_keys(&v, "", &mut keys);
        for k in keys {
            assert!(FIELD_HELP.lines().any(|l| l.split_whitespace().next() == Some(k.as_str())), "{k} undocumented");
        }
    }

    #[test]
    fn unknown_and_misplaced_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"model": {"dd": 3}}"#), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"seed": 3}}"#), Err(CliError::Config(_))));
        let c = RunConfig::from_json(r#"{"seed": 5, "model": {"k": 3}}"#).unwrap().finalize().unwrap();
        assert_eq!((c.train.seed, c.model.k, c.model.d), (5, 3, 64));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let c = RunConfig::from_json(r#"{"model": {"d": 63}}"#).unwrap();
        assert!(matches!(c.finalize(), Err(CliError::Config(m)) if m.contains("model.d")));
    }
}
