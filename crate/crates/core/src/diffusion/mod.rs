//! Noise schedule, noise predictor, leapfrog initializer and the joint
//! prediction pipeline.

mod model;
mod networks;
mod schedule;

pub use model::{anchors, CandidateGraph, CandidateSet, ParkDiffusion};
pub use networks::{step_embedding, Denoiser, Initializer};
pub use schedule::{forward_noise, noise_with_alpha_bar, reverse_coefficients, reverse_step, DiffusionSchedule};
