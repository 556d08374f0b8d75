//! CommFormer: learned sparse communication graphs for cooperative
//! multi-agent reinforcement learning.

pub mod commgraph;
pub mod diffmath;
pub mod envs;
pub mod error;
pub mod gating;
pub mod gradsuite;
pub mod relformer;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor64 = diffmath::Tensor<f64>;
pub type Tensor32 = diffmath::Tensor<f32>;
pub type Graph64 = diffmath::Graph<f64>;
pub type Graph32 = diffmath::Graph<f32>;
pub type ParameterStore64 = diffmath::ParameterStore<f64>;
pub type ParameterStore32 = diffmath::ParameterStore<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
