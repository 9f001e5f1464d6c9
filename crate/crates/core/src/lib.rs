//! Opacity-based occupancy benchmarking for NeRF-style density fields.
//!
//! The crate covers the full loop: camera geometry and the normalized
//! frustum transform, analytic and learnable density fields, volume
//! rendering, voxelization of opacity maps with frustum and visibility
//! masks, occupancy metrics, the photometric and polarization losses with
//! hand-derived gradients, and a small Adam-driven trainer.

pub mod benchmark;
pub mod field;
pub mod fixtures;
pub mod geometry;
pub mod grid;
pub mod image;
pub mod io;
pub mod losses;
pub mod optimizer;
pub mod rendering;

pub use field::{AnalyticScene, ColorSource, DensityField, ScenePrimitive, Shape, VoxelDensityField};
pub use geometry::{CameraIntrinsics, CameraView, FrustumSpec, Pose, Ray, Vec3};
pub use grid::{Frame, GridGeometry, VoxelGrid};
pub use image::{Rgb, RgbImage};
pub use rendering::{RayProfile, SamplingConfig, SamplingMode};
