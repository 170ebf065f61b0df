//! BEV-based single-object tracking for LiDAR point clouds.
//!
//! The pipeline canonicalizes two consecutive clouds to the previous target
//! box, voxelizes them, extracts features with a shared sparse 3D backbone,
//! squeezes height into channels, fuses the two BEV maps with a small
//! convolutional stack and regresses the inter-frame motion with a
//! flow-based likelihood loss.

pub mod error;
pub mod eval;
pub mod flow;
pub mod loss;
pub mod nn;
pub mod check;
pub mod config;
pub mod data;
pub mod geom;
pub mod model;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
