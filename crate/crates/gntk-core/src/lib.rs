//! Infinite-width Gaussian-process and neural-tangent kernels for
//! fully-connected, graph-convolutional, skip-concatenate and attention
//! networks, together with kernel ridge regression, effective-resistance
//! sparsification and a finite-width lab for checking every closed form.

pub mod activation;
pub mod dataset;
pub mod error;
pub mod gat;
pub mod graph;
pub mod io;
pub mod kernel;
pub mod lab;
pub mod linalg;
pub mod predictor;
pub mod sparsify;

pub use activation::Activation;
pub use dataset::{HyperParams, NodeDataset, Split, SplitMask, Task};
pub use error::{Error, Result};
pub use gat::{GatSpec, Placement};
pub use graph::{build_adjacency, AdjacencyMode, AdjacencyOperator, Graph};
pub use kernel::{Architecture, KernelKind, KernelState, ModelSpec};
