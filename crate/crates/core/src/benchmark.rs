//! The evaluation protocol: opacity maps, grid sampling in the normalized
//! frustum cube, voxelization under both occupancy protocols, frustum and
//! visibility masks, and the occupancy metrics.

use crate::field::DensityField;
use crate::geometry::{
    ccs_to_tcs, project, ray_for_pixel, CameraIntrinsics, CameraView, FrustumSpec, Pose, Vec3,
};
use crate::grid::{Frame, GridError, GridGeometry, VoxelGrid};
use crate::rendering::{opacity, sample_ray_points, SamplingConfig, SamplingMode, MAX_ALPHA};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchmarkError {
    #[error("opacity maps must be built with eval-mode sampling")]
    TrainModeSampling,
    #[error("opacity map is {got:?}, expected {expected:?}")]
    MapShape {
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("mask and prediction grids must share one geometry")]
    GeometryMismatch,
    #[error("overlap needs at least one source view")]
    NoSourceViews,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Occupancy threshold shared by both protocols.
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;

/// Largest `f32` below one, used when opacities are stored in single
/// precision.
const F32_BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// Opacity per pixel and depth bin. Node `(u, v, i)` sits at
/// `(u/(w-1), v/(h-1), i/N)` in the normalized frustum cube.
#[derive(Debug, Clone, PartialEq)]
pub struct OpacityMap {
    pub width: usize,
    pub height: usize,
    pub samples: usize,
    /// Indexed `u + w (v + h i)`.
    pub alpha: Vec<f64>,
}

impl OpacityMap {
    pub fn zeros(width: usize, height: usize, samples: usize) -> Self {
        Self {
            width,
            height,
            samples,
            alpha: vec![0.0; width * height * samples],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.width, self.height, self.samples]
    }

    pub fn index(&self, u: usize, v: usize, i: usize) -> usize {
        u + self.width * (v + self.height * i)
    }

    pub fn get(&self, u: usize, v: usize, i: usize) -> f64 {
        self.alpha[self.index(u, v, i)]
    }

    /// Camera-frame grid whose voxel centers are the map nodes.
    pub fn to_grid(&self) -> VoxelGrid<f32> {
        let res = Vec3::new(
            1.0 / (self.width - 1) as f64,
            1.0 / (self.height - 1) as f64,
            1.0 / self.samples as f64,
        );
        VoxelGrid {
            geometry: GridGeometry {
                origin: -0.5 * res,
                counts: self.dims(),
                resolution: res,
            },
            frame: Frame::Camera,
            data: self
                .alpha
                .iter()
                .map(|&a| (a as f32).min(F32_BELOW_ONE))
                .collect(),
        }
    }

    /// Inverse of [`OpacityMap::to_grid`]. Values are clamped into `[0, 1)`.
    pub fn from_grid(grid: &VoxelGrid<f32>) -> Self {
        let [w, h, n] = grid.geometry.counts;
        Self {
            width: w,
            height: h,
            samples: n,
            alpha: grid
                .data
                .iter()
                .map(|&a| (a as f64).clamp(0.0, MAX_ALPHA))
                .collect(),
        }
    }
}

/// One eval-mode ray per pixel of `view`, `N` opacities per ray.
pub fn build_opacity_map<F: DensityField + ?Sized>(
    field: &F,
    view: &CameraView,
    cfg: &SamplingConfig,
) -> Result<OpacityMap, BenchmarkError> {
    if cfg.mode != SamplingMode::Eval {
        return Err(BenchmarkError::TrainModeSampling);
    }
    let (w, h, n) = (view.intrinsics.width, view.intrinsics.height, cfg.samples);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut row = Vec::with_capacity(w * n);
            for u in 0..w {
                let ray = view.world_ray(u as f64, v as f64);
                let s = sample_ray_points(&ray, cfg, 0);
                for (x, d) in s.x.iter().zip(&s.delta) {
                    row.push(opacity(field.density_at(x), *d).expect("density is nonnegative"));
                }
            }
            row
        })
        .collect();
    let mut map = OpacityMap::zeros(w, h, n);
    for (v, row) in rows.iter().enumerate() {
        for u in 0..w {
            for i in 0..n {
                let idx = map.index(u, v, i);
                map.alpha[idx] = row[u * n + i];
            }
        }
    }
    Ok(map)
}

fn axis_weights(coord: f64, count: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (count - 1) as f64);
    if count == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (c.floor() as usize).min(count - 2);
    (i0, i0 + 1, c - i0 as f64)
}

/// Trilinear lookup at a normalized-cube point. Coordinates outside the
/// node range clamp to the border nodes.
pub fn grid_sample_opacity(map: &OpacityMap, x_t: &Vec3) -> f64 {
    let (u0, u1, fu) = axis_weights(x_t.x * (map.width - 1) as f64, map.width);
    let (v0, v1, fv) = axis_weights(x_t.y * (map.height - 1) as f64, map.height);
    let (i0, i1, fi) = axis_weights(x_t.z * map.samples as f64, map.samples);
    let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    let plane = |i: usize| {
        let top = lerp(map.get(u0, v0, i), map.get(u1, v0, i), fu);
        let bottom = lerp(map.get(u0, v1, i), map.get(u1, v1, i), fu);
        lerp(top, bottom, fv)
    };
    lerp(plane(i0), plane(i1), fi)
}

/// Occupancy under the opacity protocol: each voxel center is moved into
/// the camera, mapped into the normalized cube, grid-sampled and thresholded.
/// Voxels at or behind the camera plane are unoccupied.
pub fn voxelize_occupancy(
    map: &OpacityMap,
    geometry: &GridGeometry,
    voxel_to_camera: &Pose,
    intr: &CameraIntrinsics,
    fr: &FrustumSpec,
    threshold: f64,
) -> Result<VoxelGrid<bool>, BenchmarkError> {
    if map.width != intr.width || map.height != intr.height {
        return Err(BenchmarkError::MapShape {
            expected: [intr.width, intr.height, map.samples],
            got: map.dims(),
        });
    }
    let data = (0..geometry.len())
        .into_par_iter()
        .map(|idx| {
            let x_c = voxel_to_camera.transform_point(&geometry.center_of(idx));
            match ccs_to_tcs(&x_c, intr, fr) {
                Ok(x_t) => grid_sample_opacity(map, &x_t) > threshold,
                Err(_) => false,
            }
        })
        .collect();
    Ok(VoxelGrid::from_data(*geometry, Frame::Voxel, data)?)
}

/// Occupancy under the conventional protocol: raw density at voxel centers
/// thresholded directly.
pub fn conventional_voxelize<F: DensityField + ?Sized>(
    field: &F,
    geometry: &GridGeometry,
    voxel_to_world: &Pose,
    threshold: f64,
) -> VoxelGrid<bool> {
    let data = (0..geometry.len())
        .into_par_iter()
        .map(|idx| {
            let x = voxel_to_world.transform_point(&geometry.center_of(idx));
            field.density_at(&x) > threshold
        })
        .collect();
    VoxelGrid {
        geometry: *geometry,
        frame: Frame::Voxel,
        data,
    }
}

/// Voxels whose center has positive camera depth and projects inside the
/// image bounds.
pub fn frustum_mask(
    geometry: &GridGeometry,
    voxel_to_camera: &Pose,
    intr: &CameraIntrinsics,
) -> VoxelGrid<bool> {
    let data = (0..geometry.len())
        .into_par_iter()
        .map(|idx| {
            let p = project(intr, &voxel_to_camera.transform_point(&geometry.center_of(idx)));
            p.in_front() && intr.contains(p.u, p.v)
        })
        .collect();
    VoxelGrid {
        geometry: *geometry,
        frame: Frame::Voxel,
        data,
    }
}

/// Voxels reachable through free space. One ray per pixel marches from the
/// later of the near bound and the grid entry at a step of the smallest
/// voxel edge; a sample is visible while it and every earlier sample land
/// in unoccupied voxels. The result is intersected with the frustum mask.
pub fn visibility_mask(
    gt: &VoxelGrid<bool>,
    intr: &CameraIntrinsics,
    fr: &FrustumSpec,
    voxel_to_camera: &Pose,
) -> VoxelGrid<bool> {
    let g = gt.geometry;
    let cam_to_voxel = voxel_to_camera.inverse();
    let origin = cam_to_voxel.translation;
    let step = g.min_resolution();
    let (w, h) = (intr.width, intr.height);
    let hits: Vec<Vec<usize>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut seen = Vec::new();
            for u in 0..w {
                let d = cam_to_voxel.transform_vector(&ray_for_pixel(intr, u as f64, v as f64).direction);
                let Some((t0, t1)) = g.ray_interval(&origin, &d) else {
                    continue;
                };
                let start = t0.max(fr.near);
                let mut k = 0u32;
                loop {
                    let t = start + k as f64 * step;
                    if t > t1 {
                        break;
                    }
                    k += 1;
                    let Some([i, j, l]) = g.voxel_of(&(origin + t * d)) else {
                        continue;
                    };
                    let idx = g.index(i, j, l);
                    if gt.data[idx] {
                        break;
                    }
                    seen.push(idx);
                }
            }
            seen
        })
        .collect();
    let mut data = vec![false; g.len()];
    for idx in hits.into_iter().flatten() {
        data[idx] = true;
    }
    let fm = frustum_mask(&g, voxel_to_camera, intr);
    for (m, f) in data.iter_mut().zip(&fm.data) {
        *m &= *f;
    }
    VoxelGrid {
        geometry: g,
        frame: Frame::Voxel,
        data,
    }
}

/// Exact `num / den` count ratio. Undefined when `den == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn value(&self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    pub fn is_defined(&self) -> bool {
        self.den > 0
    }
}

/// Confusion counts inside one region, with `positive` meaning predicted
/// or true class equal to the region's positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> Ratio {
        Ratio::new(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Ratio {
        Ratio::new(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Ratio {
        Ratio::new(self.tp, self.tp + self.fn_)
    }

    pub fn iou(&self) -> Ratio {
        Ratio::new(self.tp, self.tp + self.fp + self.fn_)
    }

    fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Occupancy metrics. The `o_*` family and `iou`/`pre`/`rec` cover the
/// frustum with occupied as positive; the `ie_*` family covers invisible
/// frustum voxels with empty as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub o_acc: Ratio,
    pub o_pre: Ratio,
    pub o_rec: Ratio,
    pub ie_acc: Ratio,
    pub ie_pre: Ratio,
    pub ie_rec: Ratio,
    pub iou: Ratio,
    pub pre: Ratio,
    pub rec: Ratio,
    pub frustum: Confusion,
    pub invisible: Confusion,
}

impl MetricsReport {
    pub const NAMES: [&'static str; 9] = [
        "O_Acc", "O_Pre", "O_Rec", "IE_Acc", "IE_Pre", "IE_Rec", "IoU", "Pre", "Rec",
    ];

    /// The nine metrics in [`MetricsReport::NAMES`] order.
    pub fn ratios(&self) -> [Ratio; 9] {
        [
            self.o_acc,
            self.o_pre,
            self.o_rec,
            self.ie_acc,
            self.ie_pre,
            self.ie_rec,
            self.iou,
            self.pre,
            self.rec,
        ]
    }

    pub fn values(&self) -> [Option<f64>; 9] {
        self.ratios().map(|r| r.value())
    }
}

pub fn compute_metrics(
    pred: &VoxelGrid<bool>,
    gt: &VoxelGrid<bool>,
    frustum: &VoxelGrid<bool>,
    visible: &VoxelGrid<bool>,
) -> Result<MetricsReport, BenchmarkError> {
    let g = pred.geometry;
    if [gt, frustum, visible].iter().any(|m| m.geometry != g) {
        return Err(BenchmarkError::GeometryMismatch);
    }
    let mut fr = Confusion::default();
    let mut ie = Confusion::default();
    for idx in 0..g.len() {
        if !frustum.data[idx] {
            continue;
        }
        let (p, t) = (pred.data[idx], gt.data[idx]);
        fr.add(p, t);
        if !visible.data[idx] {
            ie.add(!p, !t);
        }
    }
    Ok(MetricsReport {
        o_acc: fr.accuracy(),
        o_pre: fr.precision(),
        o_rec: fr.recall(),
        ie_acc: ie.accuracy(),
        ie_pre: ie.precision(),
        ie_rec: ie.recall(),
        iou: fr.iou(),
        pre: fr.precision(),
        rec: fr.recall(),
        frustum: fr,
        invisible: ie,
    })
}

/// Fraction of target-frustum voxel centers (inside the image, between the
/// near and far bounds) that some source camera sees in front of it and
/// inside its image. Zero when the target frustum holds no voxel.
pub fn view_overlap_ratio(
    target: &CameraView,
    sources: &[CameraView],
    geometry: &GridGeometry,
    voxel_to_world: &Pose,
) -> Result<f64, BenchmarkError> {
    if sources.is_empty() {
        return Err(BenchmarkError::NoSourceViews);
    }
    let t_wc = target.world_to_camera();
    let s_wc: Vec<Pose> = sources.iter().map(|s| s.world_to_camera()).collect();
    let (inside, covered) = (0..geometry.len())
        .into_par_iter()
        .map(|idx| {
            let x = voxel_to_world.transform_point(&geometry.center_of(idx));
            let xc = t_wc.transform_point(&x);
            let p = project(&target.intrinsics, &xc);
            let r = xc.norm();
            let in_target = p.in_front()
                && target.intrinsics.contains(p.u, p.v)
                && r >= target.frustum.near
                && r <= target.frustum.far;
            if !in_target {
                return (0u64, 0u64);
            }
            let seen = sources.iter().zip(&s_wc).any(|(s, wc)| {
                let q = project(&s.intrinsics, &wc.transform_point(&x));
                q.in_front() && s.intrinsics.contains(q.u, q.v)
            });
            (1, seen as u64)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if inside == 0 {
        0.0
    } else {
        covered as f64 / inside as f64
    })
}
