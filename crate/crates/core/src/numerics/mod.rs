//! Dense tensors, reverse-mode differentiation and the shared primitives.

mod gradcheck;
mod graph;
mod layers;
mod ops;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Activation, Gradients, Graph, Var};
pub use layers::{dropout, FeedForward, Mode};
pub use ops::{smooth_l1, softmax};
pub use optim::Adam;
pub use params::ParamStore;
pub use tensor::Tensor;

pub(crate) use graph::stable_sigmoid;
