//! Finite-width networks: initialization, exact gradients, empirical NTKs,
//! training, and Monte-Carlo covariance estimates.

mod grad;
mod net;
mod sampler;
mod train;

pub use grad::{empirical_ntk, empirical_ntk_on, jacobian, ADJOINT_ENTRY_LIMIT, JACOBIAN_ENTRY_LIMIT};
pub use net::{
    flatten_layers, forward, init_network, FiniteNet, Layer, NetFamily, NetSpec, ATTENTION_CELL_LIMIT,
};
pub use sampler::{mc_output_covariance, mc_output_covariance_direct};
pub use train::{
    kernel_vs_network_prediction, matching_ntk, train, KernelComparison, Loss, Optimizer, TraceRecord,
    TrainConfig, TrainingTrace,
};
