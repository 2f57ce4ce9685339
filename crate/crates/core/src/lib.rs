//! Persistent independent particles: a multi-frame point tracker that follows
//! query pixels through occlusions, with the tensor engine, synthetic training
//! data, training loop and evaluation protocols it needs.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod losses;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::{EncoderConfig, ModelConfig, StageConfig};
pub use model::Tracker;
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, TensorError, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Tracker32 = Tracker<f32>;
pub type Tracker64 = Tracker<f64>;
