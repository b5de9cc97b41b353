pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod evaluation;
pub mod error;
pub mod kinematics;
pub mod numerics;
pub mod scenario;
pub mod training;

pub use error::{Error, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type ParkDiffusion64 = diffusion::ParkDiffusion<f64>;
pub type ParkDiffusion32 = diffusion::ParkDiffusion<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type Trainer32 = training::Trainer<f32>;
