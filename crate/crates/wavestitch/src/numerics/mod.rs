//! Dense tensors and reverse-mode automatic differentiation.
//!
//! The graph supports exactly the operations the denoiser and the
//! inference-time conditional loss need; fresh-noise draws and neighbour
//! snapshots enter as constants, so no gradient ever flows through them.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, NodeId, Op};
pub(crate) use graph::{cosine_loss_value, pearson_loss_value};
pub use params::ParameterStore;
pub use tensor::Tensor;
