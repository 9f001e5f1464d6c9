//! Axis-aligned voxel grids.

use crate::geometry::Vec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid counts must be >= 1 on every axis, got {0:?}")]
    EmptyAxis([usize; 3]),
    #[error("grid resolution must be positive and finite, got {0:?}")]
    BadResolution([f64; 3]),
    #[error("payload length {got} does not match {expected} voxels")]
    PayloadLength { expected: usize, got: usize },
    #[error("grid geometries differ")]
    GeometryMismatch,
    #[error("unknown grid preset {0:?}")]
    UnknownPreset(String),
}

/// Coordinate frame a grid is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Voxel,
    Camera,
}

impl Frame {
    pub fn tag(self) -> u8 {
        match self {
            Frame::Voxel => 0,
            Frame::Camera => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Frame::Voxel),
            1 => Some(Frame::Camera),
            _ => None,
        }
    }
}

/// Grid placement. `origin` is the minimum corner; voxel `(i, j, k)` has
/// its center at `origin + (idx + 0.5) * resolution`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub origin: Vec3,
    pub counts: [usize; 3],
    pub resolution: Vec3,
}

pub const DESK_PRESET: &str = "desk";
pub const SSCBENCH_PRESET: &str = "sscbench-kitti360";

impl GridGeometry {
    pub fn new(origin: Vec3, counts: [usize; 3], resolution: Vec3) -> Result<Self, GridError> {
        if counts.contains(&0) {
            return Err(GridError::EmptyAxis(counts));
        }
        if resolution.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(GridError::BadResolution([
                resolution.x,
                resolution.y,
                resolution.z,
            ]));
        }
        Ok(Self {
            origin,
            counts,
            resolution,
        })
    }

    pub fn cubic(origin: Vec3, count: usize, resolution: f64) -> Result<Self, GridError> {
        Self::new(origin, [count; 3], Vec3::repeat(resolution))
    }

    /// Default desk-scale grid: 64 x 64 x 16 voxels of 0.25 m in a frame with
    /// `x` forward, `y` left, `z` up.
    pub fn desk() -> Self {
        Self {
            origin: Vec3::new(0.0, -8.0, -1.0),
            counts: [64, 64, 16],
            resolution: Vec3::repeat(0.25),
        }
    }

    /// SSCBench-KITTI-360 volume: 51.2 m forward, 25.6 m to each side,
    /// 6.4 m tall, 0.2 m voxels.
    pub fn sscbench_kitti360() -> Self {
        Self {
            origin: Vec3::new(0.0, -25.6, -2.0),
            counts: [256, 256, 32],
            resolution: Vec3::repeat(0.2),
        }
    }

    pub fn preset(name: &str) -> Result<Self, GridError> {
        match name {
            DESK_PRESET => Ok(Self::desk()),
            SSCBENCH_PRESET => Ok(Self::sscbench_kitti360()),
            other => Err(GridError::UnknownPreset(other.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.counts[0] * self.counts[1] * self.counts[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.counts[0] as f64 * self.resolution.x,
            self.counts[1] as f64 * self.resolution.y,
            self.counts[2] as f64 * self.resolution.z,
        )
    }

    pub fn max_corner(&self) -> Vec3 {
        self.origin + self.extent()
    }

    /// Linear index, `x` fastest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.counts[0] * (j + self.counts[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.counts[0];
        let j = (idx / self.counts[0]) % self.counts[1];
        let k = idx / (self.counts[0] * self.counts[1]);
        [i, j, k]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                (i as f64 + 0.5) * self.resolution.x,
                (j as f64 + 0.5) * self.resolution.y,
                (k as f64 + 0.5) * self.resolution.z,
            )
    }

    pub fn center_of(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.center(i, j, k)
    }

    /// Voxel containing `p`, if any. The max faces are exclusive.
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.resolution[a]).floor();
            if !(f >= 0.0 && f < self.counts[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// Parametric interval `[t0, t1]` over which `origin + t * dir` lies in
    /// the grid's bounding box, clipped to `t >= 0`.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let lo = self.origin;
        let hi = self.max_corner();
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < lo[a] || origin[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }

    pub fn min_resolution(&self) -> f64 {
        self.resolution.x.min(self.resolution.y).min(self.resolution.z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    pub geometry: GridGeometry,
    pub frame: Frame,
    pub data: Vec<T>,
}

impl<T: Clone> VoxelGrid<T> {
    pub fn filled(geometry: GridGeometry, frame: Frame, value: T) -> Self {
        Self {
            data: vec![value; geometry.len()],
            geometry,
            frame,
        }
    }
}

impl<T> VoxelGrid<T> {
    pub fn from_data(geometry: GridGeometry, frame: Frame, data: Vec<T>) -> Result<Self, GridError> {
        if data.len() != geometry.len() {
            return Err(GridError::PayloadLength {
                expected: geometry.len(),
                got: data.len(),
            });
        }
        Ok(Self {
            geometry,
            frame,
            data,
        })
    }

    pub fn from_fn(geometry: GridGeometry, frame: Frame, f: impl FnMut(usize) -> T) -> Self {
        Self {
            data: (0..geometry.len()).map(f).collect(),
            geometry,
            frame,
        }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> &T {
        &self.data[self.geometry.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: T) {
        let idx = self.geometry.index(i, j, k);
        self.data[idx] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl VoxelGrid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
