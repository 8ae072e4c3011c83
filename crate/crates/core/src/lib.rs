//! Numeric core: dense f64 tensors, tape-based reverse-mode autodiff,
//! named parameters, SGD with cosine annealing, a finite-difference
//! gradient harness, and bit-exact tensor/checkpoint serialization.

pub mod checkpoint;
pub mod error;
pub mod fdcheck;
pub mod graph;
pub mod params;
pub mod seed;
pub mod sgd;
pub mod tensor;
pub mod tensorfile;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
pub use error::{CoreError, Result};
pub use fdcheck::{finite_difference_check, relative_error, FdReport, FD_SUBSAMPLE_CAP};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamStore, Parameter};
pub use seed::derive_seed;
pub use sgd::{cosine_lr, Sgd, SgdConfig};
pub use tensor::Tensor;
