//! Ready-made scenes, camera rigs and synthetic fields used by the CLI,
//! the benches and the test suites.

use crate::field::{
    softplus, softplus_inverse, AnalyticScene, DensityField, ScenePrimitive, INITIAL_DENSITY,
};
use crate::geometry::{CameraIntrinsics, CameraView, FrustumSpec, Ray, Vec3};
use crate::grid::GridGeometry;
use crate::image::Rgb;
use crate::losses::{grad_reconstruction_wrt_alpha, reconstruction_loss, alpha_sigma_factor};
use crate::optimizer::Adam;
use crate::rendering::{sample_ray_points, RayProfile, SamplingConfig, SamplingMode};
use serde::Serialize;

fn cuboid(min: [f64; 3], max: [f64; 3], density: f64, albedo: [f64; 3]) -> ScenePrimitive {
    ScenePrimitive::cuboid(Vec3::from(min), Vec3::from(max), density, Rgb::from(albedo))
        .expect("fixture primitive is valid")
}

/// A box split along `y` into equal stripes cycling through `palette`.
pub fn striped_box(
    min: [f64; 3],
    max: [f64; 3],
    stripes: usize,
    density: f64,
    palette: &[[f64; 3]],
) -> Vec<ScenePrimitive> {
    let w = (max[1] - min[1]) / stripes as f64;
    (0..stripes)
        .map(|s| {
            let y0 = min[1] + s as f64 * w;
            cuboid(
                [min[0], y0, min[2]],
                [max[0], y0 + w, max[2]],
                density,
                palette[s % palette.len()],
            )
        })
        .collect()
}

/// Checkerboard ground slab of unit tiles with top face at `z = 0`.
pub fn checker_ground(x: (i32, i32), y: (i32, i32), density: f64, a: [f64; 3], b: [f64; 3]) -> Vec<ScenePrimitive> {
    let mut out = Vec::new();
    for i in x.0..x.1 {
        for j in y.0..y.1 {
            let c = if (i + j).rem_euclid(2) == 0 { a } else { b };
            out.push(cuboid(
                [i as f64, j as f64, -0.5],
                [(i + 1) as f64, (j + 1) as f64, 0.0],
                density,
                c,
            ));
        }
    }
    out
}

const PALETTE: [[f64; 3]; 4] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.2],
];

pub fn fixture_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::from_horizontal_fov(70.0, 64, 48).expect("valid intrinsics")
}

/// Desk-scale demo: checker ground, a few boxes and a sphere inside the
/// default desk grid, seen by a forward camera and two side cameras.
pub struct DeskFixture {
    pub scene: AnalyticScene,
    pub target: CameraView,
    pub sources: Vec<CameraView>,
    pub grid: GridGeometry,
}

pub fn desk_fixture() -> DeskFixture {
    let mut prims = Vec::new();
    prims.extend(striped_box([6.0, -2.0, 0.0], [7.0, 0.5, 1.5], 4, 60.0, &PALETTE));
    prims.extend(striped_box([9.0, 1.0, 0.0], [10.5, 3.5, 2.0], 3, 60.0, &PALETTE[1..]));
    prims.push(
        ScenePrimitive::sphere(Vec3::new(8.0, -4.0, 0.75), 0.75, 60.0, Rgb::new(0.8, 0.5, 0.9))
            .expect("valid sphere"),
    );
    prims.extend(striped_box([14.0, -8.0, 0.0], [14.5, 8.0, 2.5], 8, 60.0, &PALETTE));
    prims.extend(checker_ground((0, 16), (-8, 8), 60.0, [0.55, 0.55, 0.5], [0.3, 0.3, 0.35]));
    let scene = AnalyticScene::new(prims);
    let fr = FrustumSpec::new(2.0, 18.0).expect("valid frustum");
    let k = fixture_intrinsics();
    let target = CameraView::looking("target", k, fr, Vec3::new(0.0, 0.0, 1.5), 0.0, 8.0, 0.0);
    let sources = vec![
        CameraView::looking("left", k, fr, Vec3::new(0.5, 2.0, 1.6), -12.0, 8.0, 0.0),
        CameraView::looking("right", k, fr, Vec3::new(0.5, -2.0, 1.6), 12.0, 8.0, 0.0),
    ];
    DeskFixture {
        scene,
        target,
        sources,
        grid: GridGeometry::desk(),
    }
}

/// Occluder scene for the polarization ablation: a striped box in front
/// of a hidden box, with side cameras that see past the occluder.
pub fn occluder_fixture() -> DeskFixture {
    let mut prims = Vec::new();
    prims.extend(striped_box([5.0, -1.0, 0.0], [5.75, 1.0, 1.5], 2, 60.0, &PALETTE));
    prims.extend(striped_box([7.0, -0.75, 0.0], [8.0, 0.75, 1.0], 2, 60.0, &PALETTE[2..]));
    prims.extend(striped_box([10.5, -3.0, 0.0], [11.0, 3.0, 2.0], 6, 60.0, &PALETTE));
    prims.extend(checker_ground((2, 12), (-3, 3), 60.0, [0.55, 0.55, 0.5], [0.3, 0.3, 0.35]));
    let scene = AnalyticScene::new(prims);
    let fr = FrustumSpec::new(2.0, 14.0).expect("valid frustum");
    let k = fixture_intrinsics();
    let target = CameraView::looking("target", k, fr, Vec3::new(0.0, 0.0, 1.0), 0.0, 8.0, 0.0);
    let sources = vec![
        CameraView::looking("left", k, fr, Vec3::new(0.0, 2.5, 1.2), -20.0, 8.0, 0.0),
        CameraView::looking("right", k, fr, Vec3::new(0.0, -2.5, 1.2), 20.0, 8.0, 0.0),
    ];
    let grid = GridGeometry::new(Vec3::new(2.0, -3.0, -0.5), [40, 24, 10], Vec3::repeat(0.25))
        .expect("valid grid");
    DeskFixture {
        scene,
        target,
        sources,
        grid,
    }
}

/// One striped opaque wall in front of two nearby cameras.
pub fn wall_fixture() -> DeskFixture {
    let scene = AnalyticScene::new(striped_box([8.0, -6.0, -4.0], [8.5, 6.0, 4.0], 12, 60.0, &PALETTE));
    let fr = FrustumSpec::new(2.0, 14.0).expect("valid frustum");
    let k = CameraIntrinsics::from_horizontal_fov(60.0, 48, 36).expect("valid intrinsics");
    let target = CameraView::looking("target", k, fr, Vec3::zeros(), 0.0, 0.0, 0.0);
    let sources = vec![CameraView::looking("source", k, fr, Vec3::new(0.0, 1.0, 0.0), -5.0, 0.0, 0.0)];
    let grid = GridGeometry::new(Vec3::new(3.0, -3.5, -2.5), [24, 28, 20], Vec3::repeat(0.25))
        .expect("valid grid");
    DeskFixture {
        scene,
        target,
        sources,
        grid,
    }
}

/// Boxes well beyond 5 m with a high density, for checking how stable
/// the opacity protocol is as the sample count changes.
pub fn protocol_fixture() -> DeskFixture {
    let prims = vec![
        cuboid([6.0, -1.5, -1.0], [7.5, 0.5, 1.0], 100.0, PALETTE[0]),
        cuboid([9.0, 0.5, -1.5], [11.0, 2.5, 0.5], 100.0, PALETTE[1]),
        ScenePrimitive::sphere(Vec3::new(12.0, -2.0, 0.0), 1.0, 100.0, Rgb::from(PALETTE[2]))
            .expect("valid sphere"),
    ];
    let scene = AnalyticScene::new(prims);
    let fr = FrustumSpec::new(3.0, 18.0).expect("valid frustum");
    let k = CameraIntrinsics::from_horizontal_fov(60.0, 64, 48).expect("valid intrinsics");
    let target = CameraView::looking("target", k, fr, Vec3::zeros(), 0.0, 0.0, 0.0);
    let grid = GridGeometry::new(Vec3::new(4.0, -4.0, -2.0), [40, 32, 16], Vec3::repeat(0.25))
        .expect("valid grid");
    DeskFixture {
        scene,
        target,
        sources: Vec::new(),
        grid,
    }
}

/// Density a field would learn when every occupied sample must carry the
/// same opacity `alpha` under eval sampling with `samples` points per ray:
/// `σ(x) = -ln(1 - α) / δ(r)` with `δ(r) ≈ r² (1/t_n - 1/t_f) / N` at
/// distance `r` from the camera, zero outside the scene's primitives.
#[derive(Debug, Clone)]
pub struct MagnitudeField {
    pub occupancy: AnalyticScene,
    pub camera: Vec3,
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    pub alpha: f64,
}

impl MagnitudeField {
    pub fn interval_at(&self, r: f64) -> f64 {
        r * r * (1.0 / self.near - 1.0 / self.far) / self.samples as f64
    }
}

impl DensityField for MagnitudeField {
    fn density_at(&self, x: &Vec3) -> f64 {
        if !self.occupancy.is_inside(x) {
            return 0.0;
        }
        let r = (x - self.camera).norm();
        -(-self.alpha).ln_1p() / self.interval_at(r)
    }
}

/// A near box and a far box on a deep frustum, for the magnitude-varying
/// field.
pub fn magnitude_fixture() -> DeskFixture {
    let scene = AnalyticScene::new(vec![
        cuboid([5.0, -1.0, -1.0], [6.5, 1.0, 1.0], 100.0, PALETTE[0]),
        cuboid([16.0, -1.5, -1.5], [19.0, 1.5, 1.5], 100.0, PALETTE[1]),
    ]);
    let fr = FrustumSpec::new(3.0, 25.0).expect("valid frustum");
    let k = CameraIntrinsics::from_horizontal_fov(40.0, 48, 48).expect("valid intrinsics");
    let target = CameraView::looking("target", k, fr, Vec3::zeros(), 0.0, 0.0, 0.0);
    let grid = GridGeometry::new(Vec3::new(4.0, -3.0, -2.0), [64, 24, 16], Vec3::repeat(0.25))
        .expect("valid grid");
    DeskFixture {
        scene,
        target,
        sources: Vec::new(),
        grid,
    }
}

/// The field of [`magnitude_fixture`] as learned with `samples` points
/// per ray and a per-sample opacity of 0.7.
pub fn magnitude_field(samples: usize) -> MagnitudeField {
    let fx = magnitude_fixture();
    MagnitudeField {
        occupancy: fx.scene,
        camera: fx.target.pose.translation,
        near: fx.target.frustum.near,
        far: fx.target.frustum.far,
        samples,
        alpha: 0.7,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MagnitudeRow {
    pub index: usize,
    pub t: f64,
    pub delta: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// `δ / δ_ref` against the first row.
    pub delta_ratio: f64,
    /// `σ_ref / σ` against the first row.
    pub sigma_ratio: f64,
    pub sigma_occupied: bool,
    pub alpha_occupied: bool,
}

/// Fits a density at selected sample positions along one ray so that each
/// point alone contributes opacity `alpha_target` to a white pixel, under
/// jittered training samples. Returns one row per index with the fitted
/// density, its eval-mode opacity and the ratios that expose the
/// `σ ∝ 1/δ` dependence.
pub fn magnitude_table(
    cfg: &SamplingConfig,
    indices: &[usize],
    alpha_target: f64,
    iterations: usize,
) -> Vec<MagnitudeRow> {
    let ray = Ray {
        origin: Vec3::zeros(),
        direction: Vec3::new(0.0, 0.0, 1.0),
        pixel: (0.0, 0.0),
    };
    let n = cfg.samples;
    let train = SamplingConfig {
        mode: SamplingMode::Train,
        ..*cfg
    };
    let eval = SamplingConfig {
        mode: SamplingMode::Eval,
        ..*cfg
    };
    let eval_samples = sample_ray_points(&ray, &eval, 0);
    let white = vec![Some(Rgb::repeat(1.0)); n];
    let target = Rgb::repeat(alpha_target);
    let mut rows: Vec<MagnitudeRow> = indices
        .iter()
        .map(|&k| {
            let mut theta = [softplus_inverse(INITIAL_DENSITY)];
            let mut adam = Adam::new(1, 0.9, 0.999, 1e-8);
            for it in 0..iterations {
                let s = sample_ray_points(&ray, &train, it as u64);
                let mut sigma = vec![0.0; n];
                sigma[k] = softplus(theta[0]);
                let p = RayProfile::from_samples(&s, sigma, white.clone()).expect("valid profile");
                let ga = grad_reconstruction_wrt_alpha(&p, &target);
                let gs = ga[k] * alpha_sigma_factor(&p)[k];
                let slope = crate::field::sigmoid(theta[0]);
                let lr = 0.05 * (1.0 - it as f64 / iterations as f64);
                adam.step(&mut theta, &[gs * slope], lr);
                debug_assert!(reconstruction_loss(&p, &target).is_finite());
            }
            let sigma = softplus(theta[0]);
            let delta = eval_samples.delta[k];
            let alpha = -(-sigma * delta).exp_m1();
            MagnitudeRow {
                index: k,
                t: eval_samples.t[k],
                delta,
                sigma,
                alpha,
                delta_ratio: 1.0,
                sigma_ratio: 1.0,
                sigma_occupied: sigma > 0.5,
                alpha_occupied: alpha > 0.5,
            }
        })
        .collect();
    if let Some(first) = rows.first().copied() {
        for r in &mut rows {
            r.delta_ratio = r.delta / first.delta;
            r.sigma_ratio = first.sigma / r.sigma;
        }
    }
    rows
}
