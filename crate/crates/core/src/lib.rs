//! Expert-level unlearning experiments on a small mixture-of-experts model.
//!
//! The crate bundles a tape autodiff engine, the MoE model, routing analytics,
//! the unlearning algorithms and a synthetic fact benchmark. Everything is
//! generic over the scalar type; the `*64` aliases fix it to `f64`, which the
//! experiments use throughout.

pub mod analytics;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod model;
pub mod pretrain;
pub mod scalar;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result, StageExt};
pub use graph::{Graph, Var};
pub use model::{MoEModel, ModelConfig, ParamId, TokenBatch};
pub use scalar::Scalar;
pub use tensor::{sgd_step, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type Model64 = MoEModel<f64>;
pub type Trace64 = analytics::RoutingTrace<f64>;
