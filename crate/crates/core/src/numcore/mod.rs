//! Dense tensors, the differentiation tape and the parameter store.

mod graph;
mod param;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use param::{ParamGrads, ParamId, ParamStore, ParamTensor};
pub use scalar::{gemm, Real};
pub use tensor::{softmax, Tensor};
