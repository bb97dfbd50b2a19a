//! Indoor place recognition from RGB point clouds.
//!
//! A KP-Conv encoder trained on semantic segmentation supplies multi-level
//! point features; self-attention layers select and fuse them, NetVLAD
//! aggregates them into a unit-norm global descriptor, and a lazy quadruplet
//! loss shapes the descriptor space for Recall@k retrieval.

pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod metric;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pointcloud;
pub mod retrieval;
pub mod semantic;
pub mod suite;
pub mod tensor;

pub use autodiff::{grad_check, GradCheckReport, Graph, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
