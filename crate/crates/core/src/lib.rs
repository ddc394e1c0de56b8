pub mod autograd;
pub mod backbone;
pub mod bench;
pub mod container;
pub mod error;
pub mod eval;
pub mod memory;
pub mod param;
pub mod runtime;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use param::{Gradients, ParamId, ParamSet, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type Adapter32 = memory::Adapter<f32>;
pub type Adapter64 = memory::Adapter<f64>;
pub type MemoryState32 = memory::MemoryState<f32>;
pub type MemoryState64 = memory::MemoryState<f64>;
