//! Multi-scale contrastive knowledge distillation for 2D medical image
//! segmentation: a multi-task teacher, compact students, the distillation
//! objectives that connect them, and the evaluation and ablation tooling
//! around them.

pub mod checkpoint;
pub mod data;
pub mod distillation;
pub mod losses;
pub mod metrics;
pub mod error;
pub mod experiments;
pub mod models;
pub mod nn;
pub mod optim;

pub use error::{Error, Result};
