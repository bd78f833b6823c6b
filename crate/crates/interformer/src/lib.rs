//! Two-branch sequence encoder: a convolution branch and a relative-position
//! self-attention branch run in parallel, exchange information through gated
//! bidirectional interactions, and merge through a selective fusion module.
//! Everything runs on a minimal f64 reverse-mode autodiff tape so each layer
//! can be verified against finite differences and brute-force oracles.

pub mod ablate;
pub mod attention;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod graph;
pub mod layers;
pub mod model;
pub mod oracles;
pub mod params;
pub mod rng;
pub mod suites;
pub mod tensor;
pub mod train;

pub use check::{finite_diff_check, CheckReport};
pub use graph::{Graph, NodeId};
pub use params::{Binder, ParamId, ParamStore};
pub use rng::StreamRng;
pub use tensor::{Result, Tensor, TensorError};
