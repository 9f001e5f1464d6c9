//! Pinhole cameras, rigid poses, pixel rays and the frustum-normalizing
//! coordinate transform.
//!
//! Camera frames follow the usual vision convention: `x` right, `y` down,
//! `z` forward. Integer pixel coordinates address pixel centers, so an image
//! of width `w` spans `u` in `[0, w - 1]`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (|RᵀR - I| = {residual:e}, det = {det})")]
    InvalidRotation { residual: f64, det: f64 },
    #[error("invalid frustum bounds: near = {near}, far = {far}")]
    InvalidFrustum { near: f64, far: f64 },
    #[error("point has zero norm")]
    ZeroNorm,
    #[error("point lies behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("transformed depth coordinate {0} implies a non-positive radial distance")]
    NonPositiveDistance(f64),
}

/// Pinhole intrinsics without skew or distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Intrinsics for a given horizontal field of view with the principal
    /// point at the image center and square pixels.
    pub fn from_horizontal_fov(
        fov_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "horizontal field of view {fov_deg} outside (0, 180)"
            )));
        }
        let f = (width as f64 - 1.0) / 2.0 / (fov_deg.to_radians() / 2.0).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fx.is_finite()) || !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if self.width < 2 || self.height < 2 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// True if `(u, v)` lies in `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= (self.width - 1) as f64 && v >= 0.0 && v <= (self.height - 1) as f64
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if !(residual < ORTHONORMAL_TOL) || !((det - 1.0).abs() < ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidRotation { residual, det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        let rotation = nalgebra::Rotation3::from_axis_angle(&axis, angle).into_inner();
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(rotation, translation)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Largest absolute entry of `RᵀR - I`.
    pub fn orthonormality_residual(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
    pub pixel: (f64, f64),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn transformed(&self, pose: &Pose) -> Ray {
        Ray {
            origin: pose.transform_point(&self.origin),
            direction: pose.transform_vector(&self.direction).normalize(),
            pixel: self.pixel,
        }
    }
}

/// Near and far radial bounds of the rendering frustum, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrustumSpec {
    pub near: f64,
    pub far: f64,
}

impl FrustumSpec {
    pub fn new(near: f64, far: f64) -> Result<Self, GeometryError> {
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(GeometryError::InvalidFrustum { near, far });
        }
        Ok(Self { near, far })
    }
}

/// Result of a perspective projection. `depth` is the camera-frame `z`; a
/// non-positive depth means the point is behind the camera (or on the
/// principal plane) and `u`, `v` are not meaningful.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }

    pub fn is_degenerate(&self) -> bool {
        self.depth == 0.0
    }
}

/// Unit-direction ray through pixel `(u, v)` from the camera center.
pub fn ray_for_pixel(intr: &CameraIntrinsics, u: f64, v: f64) -> Ray {
    let d = Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0).normalize();
    Ray {
        origin: Vec3::zeros(),
        direction: d,
        pixel: (u, v),
    }
}

pub fn project(intr: &CameraIntrinsics, x_c: &Vec3) -> Projection {
    let z = x_c.z;
    if z == 0.0 {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth: 0.0,
        };
    }
    Projection {
        u: intr.fx * x_c.x / z + intr.cx,
        v: intr.fy * x_c.y / z + intr.cy,
        depth: z,
    }
}

/// Maps a camera-frame point into the normalized frustum cube, where the
/// first two axes follow the image and the third is linear in inverse
/// radial distance between the near and far bounds.
pub fn ccs_to_tcs(
    x_c: &Vec3,
    intr: &CameraIntrinsics,
    fr: &FrustumSpec,
) -> Result<Vec3, GeometryError> {
    let r = x_c.norm();
    if r == 0.0 {
        return Err(GeometryError::ZeroNorm);
    }
    if x_c.z <= 0.0 {
        return Err(GeometryError::BehindCamera(x_c.z));
    }
    let p = project(intr, x_c);
    let inv_near = 1.0 / fr.near;
    let z = (inv_near - 1.0 / r) / (inv_near - 1.0 / fr.far);
    Ok(Vec3::new(
        p.u / (intr.width - 1) as f64,
        p.v / (intr.height - 1) as f64,
        z,
    ))
}

pub fn tcs_to_ccs(
    x_t: &Vec3,
    intr: &CameraIntrinsics,
    fr: &FrustumSpec,
) -> Result<Vec3, GeometryError> {
    let inv_near = 1.0 / fr.near;
    let inv_r = inv_near - x_t.z * (inv_near - 1.0 / fr.far);
    if !(inv_r > 0.0) || !inv_r.is_finite() {
        return Err(GeometryError::NonPositiveDistance(x_t.z));
    }
    let u = x_t.x * (intr.width - 1) as f64;
    let v = x_t.y * (intr.height - 1) as f64;
    Ok(ray_for_pixel(intr, u, v).direction / inv_r)
}

/// Voxel-frame to camera-frame pose, `T_i⁻¹ · T_j · T_{l→c} · T_{v→l}`, where
/// `T_i` and `T_j` are the ego poses of the query and annotated frames.
pub fn voxel_to_camera_transform(
    ego_query: &Pose,
    ego_annotated: &Pose,
    lidar_to_camera: &Pose,
    voxel_to_lidar: &Pose,
) -> Pose {
    ego_query
        .inverse()
        .compose(ego_annotated)
        .compose(lidar_to_camera)
        .compose(voxel_to_lidar)
}

/// One calibrated view: intrinsics, rendering bounds and the camera pose in
/// the world (scene) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub frustum: FrustumSpec,
    /// Camera-to-world transform.
    pub pose: Pose,
}

/// Rotation taking camera axes (x right, y down, z forward) to a world frame
/// with x forward, y left, z up.
pub fn camera_axes_to_world() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

impl CameraView {
    /// Camera at `position` in an x-forward, y-left, z-up world. Yaw turns
    /// left about `z`, positive pitch looks down, roll spins about the
    /// optical axis. Angles in degrees.
    pub fn looking(
        name: impl Into<String>,
        intrinsics: CameraIntrinsics,
        frustum: FrustumSpec,
        position: Vec3,
        yaw_deg: f64,
        pitch_deg: f64,
        roll_deg: f64,
    ) -> Self {
        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_deg.to_radians());
        let ry = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), pitch_deg.to_radians());
        let rx = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), roll_deg.to_radians());
        let rotation = (rz * ry * rx).into_inner() * camera_axes_to_world();
        Self {
            name: name.into(),
            intrinsics,
            frustum,
            pose: Pose {
                rotation,
                translation: position,
            },
        }
    }

    pub fn world_to_camera(&self) -> Pose {
        self.pose.inverse()
    }

    /// World-frame ray through pixel `(u, v)`.
    pub fn world_ray(&self, u: f64, v: f64) -> Ray {
        ray_for_pixel(&self.intrinsics, u, v).transformed(&self.pose)
    }

    /// Voxel-to-camera transform for a grid whose frame maps into the world
    /// by `voxel_to_world`, treating the world as the annotated ego frame.
    pub fn voxel_to_camera(&self, voxel_to_world: &Pose) -> Pose {
        voxel_to_camera_transform(
            &self.pose,
            &Pose::identity(),
            &Pose::identity(),
            voxel_to_world,
        )
    }
}
