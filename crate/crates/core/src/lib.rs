//! Multi-view voxel 3D detection with a radiance-field side branch.

pub mod diff;
pub mod error;
pub mod exec;
pub mod geometry;

pub use error::{Error, Result};
pub mod render;
pub mod sampler;
pub mod opacity;
pub mod features;
pub mod detection;
pub mod scene;
pub mod nerf;
pub mod config;
pub mod pipeline;
pub mod ablation;
