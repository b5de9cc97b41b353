//! Model hyperparameters shared by the encoders, the initializer and the
//! denoiser.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::PhysicalConstants;

/// What the leapfrog initializer reads for each agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitializerInput {
    /// The full context row `[f_c ‖ e_a]`.
    Context,
    /// Only the type-modulated feature `f_c`.
    TypeFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Total diffusion steps Γ.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse steps executed at inference (the leapfrog entry step).
    pub tau: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 5e-2,
            tau: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared feature width d.
    pub d: usize,
    pub heads: usize,
    pub transformer_layers: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    pub type_dim: usize,
    /// Candidates per agent K.
    pub k: usize,
    pub t_past: usize,
    pub t_future: usize,
    pub step_embedding: usize,
    /// Denoiser hidden width as a multiple of d.
    pub denoiser_mult: usize,
    pub schedule: ScheduleConfig,
    pub physics: PhysicalConstants,
    pub initializer_input: InitializerInput,
    /// Scale applied to raw initializer outputs before they are used as
    /// controls (m/s²) or, without kinematics, as position offsets (m).
    pub control_scale: f64,
    pub use_map: bool,
    pub use_type: bool,
    pub use_kinematics: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            transformer_layers: 2,
            ff_mult: 4,
            conv_kernel: 3,
            type_dim: 16,
            k: 6,
            t_past: 10,
            t_future: 10,
            step_embedding: 16,
            denoiser_mult: 4,
            schedule: ScheduleConfig::default(),
            physics: PhysicalConstants::default(),
            initializer_input: InitializerInput::Context,
            control_scale: 1.0,
            use_map: true,
            use_type: true,
            use_kinematics: true,
        }
    }
}

impl ModelConfig {
    /// Width of a context row: `f_c` (d) plus `e_a` (2d).
    pub fn context_dim(&self) -> usize {
        3 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("model.d = {} must be a positive multiple of model.heads = {}", self.d, self.heads));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("model.conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.k == 0 || self.t_past < 2 || self.t_future == 0 {
            return bad("model.k, model.t_past (>= 2) and model.t_future must be positive".into());
        }
        if self.transformer_layers == 0 || self.ff_mult == 0 || self.type_dim == 0 || self.denoiser_mult == 0 {
            return bad("layer counts and widths must be positive".into());
        }
        if self.step_embedding == 0 || self.step_embedding % 2 != 0 {
            return bad("model.step_embedding must be a positive even number".into());
        }
        let s = &self.schedule;
        if !(0.0 < s.beta_start && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return bad(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got [{}, {}]",
                s.beta_start, s.beta_end
            ));
        }
        if s.steps == 0 || s.tau > s.steps {
            return bad(format!("schedule.tau = {} must lie in [0, steps = {}]", s.tau, s.steps));
        }
        if !(self.control_scale > 0.0) {
            return bad("model.control_scale must be positive".into());
        }
        self.physics.validate()
    }
}
