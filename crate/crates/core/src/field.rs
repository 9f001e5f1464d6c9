//! Density and color sources: an analytic primitive scene with exact ground
//! truth and a learnable voxel density field.

use crate::geometry::{CameraView, Ray, Vec3};
use crate::grid::{Frame, GridGeometry, VoxelGrid};
use crate::image::{Rgb, RgbImage};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("primitive density must be finite and >= 0, got {0}")]
    NegativeDensity(f64),
    #[error("box min must be below max on every axis")]
    InvertedBox,
    #[error("sphere radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("half-space normal must be nonzero")]
    ZeroNormal,
    #[error("albedo channels must lie in [0, 1]")]
    BadAlbedo,
    #[error("parameter vector has {got} entries, grid has {expected}")]
    ParamLength { expected: usize, got: usize },
}

/// Maps a point to a nonnegative density (1/m).
pub trait DensityField: Sync {
    fn density_at(&self, x: &Vec3) -> f64;
}

/// Per-point color lookup. `None` marks a miss (no color observation).
pub trait ColorSource: Sync {
    fn color_at(&self, x: &Vec3) -> Option<Rgb>;
}

/// A field that is zero everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyField;

impl DensityField for EmptyField {
    fn density_at(&self, _x: &Vec3) -> f64 {
        0.0
    }
}

/// Spatially constant density.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField(pub f64);

impl DensityField for ConstantField {
    fn density_at(&self, _x: &Vec3) -> f64 {
        self.0
    }
}

/// One constant color everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantColor(pub Rgb);

impl ColorSource for ConstantColor {
    fn color_at(&self, _x: &Vec3) -> Option<Rgb> {
        Some(self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Box { min: Vec3, max: Vec3 },
    Sphere { center: Vec3, radius: f64 },
    /// Points with `normal · x <= offset`.
    HalfSpace { normal: Vec3, offset: f64 },
}

impl Shape {
    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Sphere { center, radius } => (p - center).norm_squared() <= radius * radius,
            Shape::HalfSpace { normal, offset } => normal.dot(p) <= *offset,
        }
    }

    /// Parameter interval `(enter, exit)` where `origin + t dir` lies inside,
    /// over all real `t`. Endpoints may be infinite.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        match self {
            Shape::Box { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let ta = (min[a] - origin[a]) * inv;
                    let tb = (max[a] - origin[a]) * inv;
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                (t0 < t1).then_some((t0, t1))
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some(((-b - s) / a, (-b + s) / a))
            }
            Shape::HalfSpace { normal, offset } => {
                let nd = normal.dot(dir);
                let rhs = offset - normal.dot(origin);
                if nd == 0.0 {
                    return (rhs >= 0.0).then_some((f64::NEG_INFINITY, f64::INFINITY));
                }
                let t = rhs / nd;
                if nd > 0.0 {
                    Some((f64::NEG_INFINITY, t))
                } else {
                    Some((t, f64::INFINITY))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrimitive {
    pub shape: Shape,
    pub density: f64,
    pub albedo: Rgb,
}

impl ScenePrimitive {
    pub fn new(shape: Shape, density: f64, albedo: Rgb) -> Result<Self, FieldError> {
        if !(density >= 0.0 && density.is_finite()) {
            return Err(FieldError::NegativeDensity(density));
        }
        match &shape {
            Shape::Box { min, max } => {
                if (0..3).any(|a| !(min[a] < max[a])) {
                    return Err(FieldError::InvertedBox);
                }
            }
            Shape::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(FieldError::BadRadius(*radius));
                }
            }
            Shape::HalfSpace { normal, .. } => {
                if normal.norm() == 0.0 {
                    return Err(FieldError::ZeroNormal);
                }
            }
        }
        if albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(FieldError::BadAlbedo);
        }
        Ok(Self {
            shape,
            density,
            albedo,
        })
    }

    pub fn cuboid(min: Vec3, max: Vec3, density: f64, albedo: Rgb) -> Result<Self, FieldError> {
        Self::new(Shape::Box { min, max }, density, albedo)
    }

    pub fn sphere(center: Vec3, radius: f64, density: f64, albedo: Rgb) -> Result<Self, FieldError> {
        Self::new(Shape::Sphere { center, radius }, density, albedo)
    }

    /// Ground half-space `z <= height`.
    pub fn ground(height: f64, density: f64, albedo: Rgb) -> Result<Self, FieldError> {
        Self::new(
            Shape::HalfSpace {
                normal: Vec3::new(0.0, 0.0, 1.0),
                offset: height,
            },
            density,
            albedo,
        )
    }
}

/// Ordered primitive list. Overlaps resolve to the first containing
/// primitive; empty space has zero density and the background color.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalyticScene {
    pub primitives: Vec<ScenePrimitive>,
    pub background: Rgb,
}

impl AnalyticScene {
    pub fn new(primitives: Vec<ScenePrimitive>) -> Self {
        Self {
            primitives,
            background: Rgb::zeros(),
        }
    }

    pub fn with_background(mut self, background: Rgb) -> Self {
        self.background = background;
        self
    }

    pub fn primitive_at(&self, x: &Vec3) -> Option<&ScenePrimitive> {
        self.primitives.iter().find(|p| p.shape.contains(x))
    }

    pub fn is_inside(&self, x: &Vec3) -> bool {
        self.primitive_at(x).is_some()
    }

    /// Sorted distinct breakpoints of the piecewise-constant density along
    /// `ray` within `[t0, t1]`, including both ends.
    fn breakpoints(&self, ray: &Ray, t0: f64, t1: f64) -> Vec<f64> {
        let mut ts = vec![t0, t1];
        for p in &self.primitives {
            if let Some((a, b)) = p.shape.ray_interval(&ray.origin, &ray.direction) {
                for t in [a, b] {
                    if t > t0 && t < t1 {
                        ts.push(t);
                    }
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// Exact `∫ σ dt` over `[t0, t1]` along `ray`.
    pub fn optical_depth(&self, ray: &Ray, t0: f64, t1: f64) -> f64 {
        if !(t1 > t0) {
            return 0.0;
        }
        self.breakpoints(ray, t0, t1)
            .windows(2)
            .map(|w| self.density_at(&ray.at(0.5 * (w[0] + w[1]))) * (w[1] - w[0]))
            .sum()
    }

    /// Exact transmittance `exp(-∫ σ dt)` over `[t0, t1]`.
    pub fn transmittance(&self, ray: &Ray, t0: f64, t1: f64) -> f64 {
        (-self.optical_depth(ray, t0, t1)).exp()
    }

    /// First `t >= 0` where the ray enters nonzero density, with the
    /// primitive responsible.
    pub fn first_hit(&self, ray: &Ray) -> Option<(f64, &ScenePrimitive)> {
        let mut ts = vec![0.0];
        for p in &self.primitives {
            if let Some((a, b)) = p.shape.ray_interval(&ray.origin, &ray.direction) {
                for t in [a, b] {
                    if t > 0.0 && t.is_finite() {
                        ts.push(t);
                    }
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let last = *ts.last().unwrap();
        ts.push(last + 1.0);
        for w in ts.windows(2) {
            let mid = ray.at(0.5 * (w[0] + w[1]));
            if let Some(p) = self.primitive_at(&mid) {
                if p.density > 0.0 {
                    return Some((w[0], p));
                }
            }
        }
        None
    }
}

impl DensityField for AnalyticScene {
    fn density_at(&self, x: &Vec3) -> f64 {
        self.primitive_at(x).map_or(0.0, |p| p.density)
    }
}

impl ColorSource for AnalyticScene {
    fn color_at(&self, x: &Vec3) -> Option<Rgb> {
        Some(self.primitive_at(x).map_or(self.background, |p| p.albedo))
    }
}

/// Voxel occupied iff its center lies inside any primitive.
pub fn ground_truth_occupancy(scene: &AnalyticScene, geometry: &GridGeometry) -> VoxelGrid<bool> {
    VoxelGrid::from_fn(*geometry, Frame::Voxel, |idx| {
        scene.is_inside(&geometry.center_of(idx))
    })
}

/// Exact first-hit albedo per pixel; misses get the scene background.
pub fn render_reference_image(scene: &AnalyticScene, view: &CameraView) -> RgbImage {
    let k = &view.intrinsics;
    RgbImage::from_fn(k.width, k.height, |u, v| {
        let ray = view.world_ray(u as f64, v as f64);
        scene
            .first_hit(&ray)
            .map_or(scene.background, |(_, p)| p.albedo)
    })
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Initial density of a freshly created learnable field (1/m).
pub const INITIAL_DENSITY: f64 = 0.05;

/// Sparse `∂σ/∂θ` entries: `(parameter index, derivative)`.
pub type ParamGradient = Vec<(usize, f64)>;

/// Learnable density stored as one raw parameter per voxel center, with
/// `σ = softplus(θ)` at the nodes and trilinear interpolation in between.
/// Outside the hull of voxel centers the density is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelDensityField {
    geometry: GridGeometry,
    params: Vec<f64>,
    node_density: Vec<f64>,
    node_slope: Vec<f64>,
}

impl VoxelDensityField {
    pub fn new(geometry: GridGeometry) -> Self {
        Self::constant(geometry, softplus_inverse(INITIAL_DENSITY))
    }

    pub fn constant(geometry: GridGeometry, theta: f64) -> Self {
        let params = vec![theta; geometry.len()];
        Self::from_params(geometry, params).expect("length matches")
    }

    pub fn from_params(geometry: GridGeometry, params: Vec<f64>) -> Result<Self, FieldError> {
        if params.len() != geometry.len() {
            return Err(FieldError::ParamLength {
                expected: geometry.len(),
                got: params.len(),
            });
        }
        let mut field = Self {
            geometry,
            node_density: Vec::new(),
            node_slope: Vec::new(),
            params,
        };
        field.refresh();
        Ok(field)
    }

    fn refresh(&mut self) {
        self.node_density = self.params.iter().map(|&t| softplus(t)).collect();
        self.node_slope = self.params.iter().map(|&t| sigmoid(t)).collect();
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Mutates parameters in place and refreshes the cached node values.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.params);
        self.refresh();
    }

    pub fn node_density(&self, idx: usize) -> f64 {
        self.node_density[idx]
    }

    /// The eight trilinear corners around `x` with their weights, or `None`
    /// outside the node hull. Weights may be zero.
    fn corners(&self, x: &Vec3) -> Option<[(usize, f64); 8]> {
        let g = &self.geometry;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = g.counts[a];
            let f = (x[a] - g.origin[a]) / g.resolution[a] - 0.5;
            if !(f >= 0.0 && f <= (n - 1) as f64) {
                return None;
            }
            let i0 = if n >= 2 { (f.floor() as usize).min(n - 2) } else { 0 };
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            frac[a] = f - i0 as f64;
        }
        let mut out = [(0usize, 0.0f64); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let i = if bx == 1 { hi[0] } else { lo[0] };
            let j = if by == 1 { hi[1] } else { lo[1] };
            let k = if bz == 1 { hi[2] } else { lo[2] };
            let wx = if bx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if by == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if bz == 1 { frac[2] } else { 1.0 - frac[2] };
            *slot = (g.index(i, j, k), wx * wy * wz);
        }
        Some(out)
    }

    /// `∂σ(x)/∂θ` as sparse entries (zero-weight corners omitted). Empty
    /// outside the grid.
    pub fn density_gradient_wrt_params(&self, x: &Vec3) -> ParamGradient {
        let Some(corners) = self.corners(x) else {
            return Vec::new();
        };
        corners
            .iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|&(idx, w)| (idx, w * self.node_slope[idx]))
            .collect()
    }

    /// Density and its sparse parameter gradient in one pass.
    pub fn density_and_gradient(&self, x: &Vec3) -> (f64, ParamGradient) {
        let Some(corners) = self.corners(x) else {
            return (0.0, Vec::new());
        };
        let mut sigma = 0.0;
        let mut grad = Vec::with_capacity(8);
        for &(idx, w) in &corners {
            sigma += w * self.node_density[idx];
            if w != 0.0 {
                grad.push((idx, w * self.node_slope[idx]));
            }
        }
        (sigma, grad)
    }

    /// Raw parameters as an `f32` voxel grid (checkpoint payload).
    pub fn to_grid(&self) -> VoxelGrid<f32> {
        VoxelGrid {
            geometry: self.geometry,
            frame: Frame::Voxel,
            data: self.params.iter().map(|&t| t as f32).collect(),
        }
    }

    pub fn from_grid(grid: &VoxelGrid<f32>) -> Self {
        Self::from_params(grid.geometry, grid.data.iter().map(|&t| t as f64).collect())
            .expect("grid payload matches geometry")
    }
}

impl DensityField for VoxelDensityField {
    fn density_at(&self, x: &Vec3) -> f64 {
        match self.corners(x) {
            Some(c) => c.iter().map(|&(idx, w)| w * self.node_density[idx]).sum(),
            None => 0.0,
        }
    }
}
