//! Pillar-based LiDAR scene flow estimation.
//!
//! Two consecutive sweeps are voxelized into bird's-eye-view pillars, encoded
//! by a shared 2D U-Net, and decoded back to per-point residual flow on top of
//! the ego-motion flow. A GRU refinement decoder recovers per-point detail that
//! is lost inside a pillar; a plain MLP decoder and a no-GRU variant are
//! provided for comparison.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod synthdata;
pub mod voxelizer;

pub use error::{Error, FormatError, Result};
