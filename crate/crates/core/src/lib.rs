//! Multi-scale implicit transformer for arbitrary-scale super-resolution.
//!
//! The crate is generic over the real [`Scalar`] type (`f32` or `f64`);
//! the `*64` aliases at the crate root name the double-precision types
//! used by the command-line tool and the test suites.

pub mod config;
pub mod coords;
pub mod error;
pub mod graph;
pub mod imageio;
pub mod init;
pub mod layers;
pub mod msno;
pub mod mssa;
pub mod pipeline;
pub mod reparam;
pub mod snapshot;
pub mod trainer;
mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use coords::{Cell, CoordGrid, FourierEncoder};
pub use graph::{Grads, Graph, Var};
pub use tensor::{PadMode, SampleMode, Tensor};

pub use pipeline::{assr_forward, ModelConfig, ParamStore, SrModel};
pub use reparam::{RimVariant, StageTag};
pub use snapshot::Snapshot;
pub use trainer::TrainConfig;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type SrModel64 = SrModel<f64>;
pub type SrModel32 = SrModel<f32>;
