//! Multi-neighborhood attention graph transformer.
//!
//! Layers build attention kernels from `k`-hop propagated node features,
//! run multi-head attention per kernel, and combine the kernel outputs per node
//! with learned attention scores. The crate carries its own dense tensor type
//! and reverse-mode autodiff tape so every piece can be gradient-checked in
//! double precision and trained in single precision.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod sparse;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{GeluKind, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use sparse::SparseMatrix;
pub use tensor::{Scalar, Tensor};
