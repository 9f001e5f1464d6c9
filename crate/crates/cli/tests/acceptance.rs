//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (outside the harness capture) and then asserts its criterion.
//!
//! Run with `cargo test -p occrebench-cli --test acceptance`.

use occrebench::benchmark::{
    build_opacity_map, compute_metrics, conventional_voxelize, frustum_mask, visibility_mask,
    voxelize_occupancy, MetricsReport, Ratio, OCCUPANCY_THRESHOLD,
};
use occrebench::field::{ground_truth_occupancy, AnalyticScene, DensityField, ScenePrimitive};
use occrebench::fixtures::{magnitude_field, magnitude_fixture, occluder_fixture, protocol_fixture};
use occrebench::geometry::{ccs_to_tcs, ray_for_pixel, tcs_to_ccs};
use occrebench::io::{decode_grid, encode_grid};
use occrebench::losses::{gradcheck, occlusion_gradient_probe, GRADCHECK_ABS_FLOOR, GRADCHECK_REL_TOL};
use occrebench::optimizer::{run_polarization_ablation, EvalSetup, TrainConfig, TrainingSet};
use occrebench::rendering::{render_ray, sample_ray_points, SamplingConfig};
use occrebench::{
    CameraIntrinsics, CameraView, Frame, FrustumSpec, GridGeometry, Pose, Ray, Rgb, Vec3, VoxelDensityField,
    VoxelGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(id: u32, name: &str, body: impl FnOnce() -> Verdict) {
    let start = Instant::now();
    let v = body();
    let line = format!(
        "acceptance {id:>2} {name:<30} {} ({:.1}s) {}\n",
        if v.pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        v.detail
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(v.pass, "criterion {id} ({name}) failed: {}", v.detail);
}

#[test]
fn criterion_01_gradient_fidelity() {
    report(1, "gradient fidelity", || {
        let start = Instant::now();
        let rows = gradcheck(1000, 0);
        let secs = start.elapsed().as_secs_f64();
        let fixtures = rows.iter().map(|r| r.fixture).max().map_or(0, |m| m + 1);
        let failures = rows
            .iter()
            .filter(|r| !r.passes(GRADCHECK_REL_TOL, GRADCHECK_ABS_FLOOR))
            .count();
        let max_rel = rows
            .iter()
            .map(|r| r.floored_rel_error(GRADCHECK_ABS_FLOOR))
            .fold(0.0, f64::max);
        Verdict::new(
            fixtures == 1000 && failures == 0 && secs < 10.0,
            format!(
                "fixtures={fixtures} entries={} failures={failures} max_rel={max_rel:.2e} time={secs:.2}s",
                rows.len()
            ),
        )
    });
}

fn slab(x0: f64, x1: f64, density: f64, albedo: [f64; 3]) -> ScenePrimitive {
    ScenePrimitive::cuboid(
        Vec3::new(x0, -5.0, -5.0),
        Vec3::new(x1, 5.0, 5.0),
        density,
        Rgb::from(albedo),
    )
    .unwrap()
}

fn axis_ray() -> Ray {
    Ray {
        origin: Vec3::zeros(),
        direction: Vec3::new(1.0, 0.0, 0.0),
        pixel: (0.0, 0.0),
    }
}

#[test]
fn criterion_02_occlusion_gradient_vanishing() {
    report(2, "occlusion gradient vanishing", || {
        let cfg = SamplingConfig::eval(128, &FrustumSpec::new(2.0, 14.0).unwrap()).unwrap();
        let c_gt = Rgb::new(0.5, 0.5, 0.5);
        let ray = axis_ray();

        // optical depth 6 through the occluder
        let scene = AnalyticScene::new(vec![
            slab(5.0, 5.5, 12.0, [0.9, 0.2, 0.2]),
            slab(8.0, 9.0, 5.0, [0.2, 0.2, 0.9]),
        ])
        .with_background(Rgb::new(0.1, 0.1, 0.1));
        let rows = occlusion_gradient_probe(&scene, &scene, &ray, &cfg, &c_gt).unwrap();
        let free = rows
            .iter()
            .filter(|r| r.t < 5.0)
            .map(|r| r.grad_sigma)
            .fold(0.0, f64::max);
        let occluded: Vec<_> = rows.iter().filter(|r| r.transmittance <= 0.01).collect();
        let worst = occluded.iter().map(|r| r.grad_sigma).fold(0.0, f64::max);
        let ratio = worst / free;

        // saturated occluder: transmittance underflows to exactly zero
        let wall = AnalyticScene::new(vec![
            slab(4.0, 9.0, 1e4, [0.9, 0.2, 0.2]),
            slab(11.0, 12.0, 5.0, [0.2, 0.2, 0.9]),
        ]);
        let rows0 = occlusion_gradient_probe(&wall, &wall, &ray, &cfg, &c_gt).unwrap();
        let zero_t: Vec<_> = rows0.iter().filter(|r| r.transmittance == 0.0).collect();
        let exact = zero_t.iter().all(|r| r.grad_sigma == 0.0 && r.grad_alpha == 0.0);

        Verdict::new(
            !occluded.is_empty() && free > 0.0 && ratio <= 0.02 && !zero_t.is_empty() && exact,
            format!(
                "occluded_samples={} ratio={ratio:.2e} zero_T_samples={} zero_T_grads_exact={exact}",
                occluded.len(),
                zero_t.len()
            ),
        )
    });
}

/// Brute-force march in the voxel frame: every sample at `step` from the
/// later of `near` and the grid entry; marks voxels reached before the
/// first occupied voxel.
fn brute_march(gt: &VoxelGrid<bool>, intr: &CameraIntrinsics, near: f64, t_vc: &Pose, step: f64) -> Vec<bool> {
    let g = gt.geometry;
    let m = t_vc.to_matrix4().try_inverse().unwrap();
    let origin = Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
    let lo = g.origin;
    let hi = g.origin + g.extent();
    let mut visible = vec![false; g.len()];
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d = rot * ray_for_pixel(intr, u as f64, v as f64).direction;
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            for a in 0..3 {
                if d[a] == 0.0 {
                    if origin[a] < lo[a] || origin[a] > hi[a] {
                        t1 = -1.0;
                    }
                    continue;
                }
                let (p, q) = ((lo[a] - origin[a]) / d[a], (hi[a] - origin[a]) / d[a]);
                t0 = t0.max(p.min(q));
                t1 = t1.min(p.max(q));
            }
            if t0 > t1 {
                continue;
            }
            let start = t0.max(near);
            let mut blocked = false;
            let mut k = 0u32;
            loop {
                let t = start + k as f64 * step;
                if t > t1 {
                    break;
                }
                k += 1;
                let f = (origin + t * d - lo).component_div(&g.resolution);
                if (0..3).any(|a| !(f[a] >= 0.0 && f[a] < g.counts[a] as f64)) {
                    continue;
                }
                let idx = g.index(f.x as usize, f.y as usize, f.z as usize);
                blocked |= gt.data[idx];
                if !blocked {
                    visible[idx] = true;
                }
            }
        }
    }
    visible
}

#[test]
fn criterion_03_visibility_oracle() {
    report(3, "visibility oracle", || {
        let start = Instant::now();
        let g = GridGeometry::cubic(Vec3::zeros(), 16, 0.25).unwrap();
        let intr = CameraIntrinsics::from_horizontal_fov(70.0, 48, 48).unwrap();
        let fr = FrustumSpec::new(0.5, 20.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut compared, mut disagree, mut grids_exact) = (0usize, 0usize, 0usize);
        for _ in 0..100 {
            let p: f64 = rng.gen_range(0.02..0.25);
            let data = (0..g.len()).map(|_| rng.gen_bool(p)).collect();
            let gt = VoxelGrid::from_data(g, Frame::Voxel, data).unwrap();
            let view = CameraView::looking(
                "t",
                intr,
                fr,
                Vec3::new(-3.0, 2.0 + rng.gen_range(-0.5..0.5), 2.0 + rng.gen_range(-0.5..0.5)),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                0.0,
            );
            let t_vc = view.voxel_to_camera(&Pose::identity());
            let vis = visibility_mask(&gt, &intr, &fr, &t_vc);
            let fm = frustum_mask(&g, &t_vc, &intr);
            let fine = brute_march(&gt, &intr, fr.near, &t_vc, g.min_resolution() / 4.0);
            let mut bad = 0;
            for i in 0..g.len() {
                if fm.data[i] {
                    compared += 1;
                    if vis.data[i] != fine[i] {
                        bad += 1;
                    }
                }
            }
            disagree += bad;
            grids_exact += (bad == 0) as usize;
        }
        let secs = start.elapsed().as_secs_f64();
        Verdict::new(
            disagree == 0 && secs < 60.0,
            format!(
                "in-frustum voxels={compared} disagreements={disagree} ({:.2}%) exact grids={grids_exact}/100 time={secs:.1}s",
                100.0 * disagree as f64 / compared as f64
            ),
        )
    });
}

fn bits(s: &str) -> Vec<bool> {
    s.bytes().map(|b| b == b'1').collect()
}

struct MetricCase {
    gt: &'static str,
    pred: &'static str,
    frustum: &'static str,
    visible: &'static str,
    /// O_Acc, O_Pre, O_Rec, IE_Acc, IE_Pre, IE_Rec, IoU, Pre, Rec as
    /// (num, den) counts.
    expected: [(u64, u64); 9],
}

#[test]
fn criterion_04_metrics_exactness() {
    report(4, "metrics exactness", || {
        let cases = [
            MetricCase {
                gt: "11100000",
                pred: "10010000",
                frustum: "11111111",
                visible: "01010101",
                expected: [(5, 8), (1, 2), (1, 3), (3, 4), (2, 3), (2, 2), (1, 4), (1, 2), (1, 3)],
            },
            MetricCase {
                gt: "11001100",
                pred: "10101010",
                frustum: "11110000",
                visible: "00000000",
                expected: [(2, 4), (1, 2), (1, 2), (2, 4), (1, 2), (1, 2), (1, 3), (1, 2), (1, 2)],
            },
            MetricCase {
                gt: "00011000",
                pred: "00011000",
                frustum: "11111111",
                visible: "11100111",
                expected: [(8, 8), (2, 2), (2, 2), (2, 2), (0, 0), (0, 0), (2, 2), (2, 2), (2, 2)],
            },
            MetricCase {
                gt: "01100110",
                pred: "00000000",
                frustum: "01111110",
                visible: "01000010",
                expected: [(2, 6), (0, 0), (0, 4), (2, 4), (2, 4), (2, 2), (0, 4), (0, 0), (0, 4)],
            },
            MetricCase {
                gt: "10000001",
                pred: "11111111",
                frustum: "11111111",
                visible: "10011001",
                expected: [(2, 8), (2, 8), (2, 2), (0, 4), (0, 0), (0, 4), (2, 8), (2, 8), (2, 2)],
            },
            MetricCase {
                gt: "10101010",
                pred: "01010101",
                frustum: "00000000",
                visible: "00000000",
                expected: [(0, 0); 9],
            },
        ];
        let g = GridGeometry::new(Vec3::zeros(), [8, 1, 1], Vec3::repeat(1.0)).unwrap();
        let grid = |s: &str| VoxelGrid::from_data(g, Frame::Voxel, bits(s)).unwrap();
        let mut mismatches = Vec::new();
        for (i, c) in cases.iter().enumerate() {
            let m = compute_metrics(&grid(c.pred), &grid(c.gt), &grid(c.frustum), &grid(c.visible)).unwrap();
            for ((name, got), (num, den)) in MetricsReport::NAMES.iter().zip(m.ratios()).zip(c.expected) {
                if got != Ratio::new(num, den) {
                    mismatches.push(format!("case {i} {name}: {}/{} != {num}/{den}", got.num, got.den));
                }
            }
        }
        Verdict::new(
            mismatches.is_empty(),
            format!("cases={} mismatches={} {}", cases.len(), mismatches.len(), mismatches.join("; ")),
        )
    });
}

#[test]
fn criterion_05_tcs_correctness() {
    report(5, "normalized frustum coordinates", || {
        // Pixel (0, 0) is the optical axis and pixel (100, 100) has the
        // direction (4, 4, 7) / 9, so both anchors are representable.
        let k = CameraIntrinsics::new(175.0, 175.0, 0.0, 0.0, 101, 101).unwrap();
        let fr = FrustumSpec::new(3.0, 18.0).unwrap();
        let near = ccs_to_tcs(&Vec3::new(0.0, 0.0, 3.0), &k, &fr).unwrap();
        let far = ccs_to_tcs(&Vec3::new(8.0, 8.0, 14.0), &k, &fr).unwrap();
        let anchors_exact = near == Vec3::zeros() && far == Vec3::new(1.0, 1.0, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst_roundtrip = 0.0f64;
        for _ in 0..1000 {
            let k = CameraIntrinsics::from_horizontal_fov(rng.gen_range(30.0..100.0), 64, 48).unwrap();
            let near = rng.gen_range(0.5..4.0);
            let fr = FrustumSpec::new(near, near + rng.gen_range(1.0..40.0)).unwrap();
            let (u, v) = (rng.gen_range(0.0..63.0), rng.gen_range(0.0..47.0));
            let r = rng.gen_range(fr.near..fr.far);
            let x = ray_for_pixel(&k, u, v).direction * r;
            let back = tcs_to_ccs(&ccs_to_tcs(&x, &k, &fr).unwrap(), &k, &fr).unwrap();
            worst_roundtrip = worst_roundtrip.max((back - x).amax());
        }

        let mut worst_depth = 0.0f64;
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 25.0, 101, 51).unwrap();
        for n in [2usize, 16, 64, 256] {
            for fr in [FrustumSpec::new(3.0, 18.0).unwrap(), FrustumSpec::new(0.7, 80.0).unwrap()] {
                let cfg = SamplingConfig::eval(n, &fr).unwrap();
                for (u, v) in [(0.0, 0.0), (50.0, 25.0), (13.0, 44.0), (100.0, 50.0)] {
                    let s = sample_ray_points(&ray_for_pixel(&k, u, v), &cfg, 0);
                    for (i, x) in s.x.iter().enumerate() {
                        let z = ccs_to_tcs(x, &k, &fr).unwrap().z;
                        worst_depth = worst_depth.max((z - i as f64 / n as f64).abs());
                    }
                }
            }
        }
        Verdict::new(
            anchors_exact && worst_roundtrip < 1e-9 && worst_depth <= 1e-12,
            format!(
                "anchors_exact={anchors_exact} max_roundtrip={worst_roundtrip:.2e} max_depth_node_error={worst_depth:.2e}"
            ),
        )
    });
}

#[test]
fn criterion_06_rendering_convergence() {
    report(6, "rendering convergence", || {
        // homogeneous medium: the sum of sampled intervals covers the bounds
        let fr = FrustumSpec::new(3.0, 20.0).unwrap();
        let medium = AnalyticScene::new(vec![ScenePrimitive::cuboid(
            Vec3::new(-50.0, -50.0, -50.0),
            Vec3::new(50.0, 50.0, 50.0),
            0.1,
            Rgb::repeat(0.5),
        )
        .unwrap()]);
        let cfg = SamplingConfig::eval(256, &fr).unwrap();
        let p = render_ray(&medium, &medium, &axis_ray(), &cfg, 0).unwrap();
        let t_medium = p.transmittance[255] * (1.0 - p.alpha[255]);
        let medium_rel = (t_medium / (-1.7f64).exp() - 1.0).abs();

        // piecewise-constant primitives seen over a full image
        let scene = AnalyticScene::new(vec![
            ScenePrimitive::cuboid(Vec3::new(5.0, -1.0, -1.0), Vec3::new(5.7, 1.0, 1.0), 0.8, Rgb::repeat(0.5)).unwrap(),
            ScenePrimitive::sphere(Vec3::new(8.0, 0.5, 0.0), 1.2, 0.5, Rgb::repeat(0.5)).unwrap(),
            ScenePrimitive::cuboid(Vec3::new(10.0, -3.0, -2.0), Vec3::new(11.3, 2.0, 2.0), 0.3, Rgb::repeat(0.5)).unwrap(),
        ]);
        let fr = FrustumSpec::new(2.0, 14.0).unwrap();
        let k = CameraIntrinsics::from_horizontal_fov(40.0, 24, 24).unwrap();
        let view = CameraView::looking("cam", k, fr, Vec3::zeros(), 0.0, 0.0, 0.0);
        let rays: Vec<Ray> = (0..24)
            .flat_map(|v| (0..24).map(move |u| (u, v)))
            .map(|(u, v)| view.world_ray(u as f64, v as f64))
            .collect();
        let exact: Vec<f64> = rays.iter().map(|r| scene.transmittance(r, fr.near, fr.far)).collect();
        let mut abs_errors = Vec::new();
        let (mut mean_rel_256, mut max_rel_256) = (0.0, 0.0f64);
        for n in [32usize, 64, 128, 256] {
            let cfg = SamplingConfig::eval(n, &fr).unwrap();
            let (mut abs_sum, mut rel_sum) = (0.0, 0.0);
            for (ray, t_exact) in rays.iter().zip(&exact) {
                let p = render_ray(&scene, &scene, ray, &cfg, 0).unwrap();
                let t_final = p.transmittance[n - 1] * (1.0 - p.alpha[n - 1]);
                let err = (t_final - t_exact).abs();
                abs_sum += err;
                rel_sum += err / t_exact;
                if n == 256 {
                    max_rel_256 = max_rel_256.max(err / t_exact);
                }
            }
            abs_errors.push(abs_sum / rays.len() as f64);
            mean_rel_256 = rel_sum / rays.len() as f64;
        }
        let ratios: Vec<f64> = abs_errors.windows(2).map(|w| w[1] / w[0]).collect();
        let halving = ratios.iter().all(|r| (0.25..=0.75).contains(r));
        Verdict::new(
            medium_rel < 0.01 && mean_rel_256 < 0.01 && halving,
            format!(
                "medium_rel@256={medium_rel:.2e} scene_mean_rel@256={mean_rel_256:.2e} (worst ray {max_rel_256:.2e}) mean_abs_errors={:?} ratios={:?}",
                abs_errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
                ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
            ),
        )
    });
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_occrebench"))
}

#[test]
fn criterion_07_magnitude_variation() {
    report(7, "magnitude variation", || {
        let out = cli().arg("demo-magnitude").output().unwrap();
        let text = String::from_utf8(out.stdout).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').collect();
        let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
        let (ia, id, is) = (col("alpha"), col("delta_ratio"), col("sigma_ratio"));
        let mut worst = 0.0f64;
        let mut alpha_ok = true;
        let mut rows = 0;
        for line in text.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            let a: f64 = cells[ia].parse().unwrap();
            let d: f64 = cells[id].parse().unwrap();
            let s: f64 = cells[is].parse().unwrap();
            alpha_ok &= a > 0.0 && a < 1.0;
            worst = worst.max((s / d - 1.0).abs());
            rows += 1;
        }

        let fx = magnitude_fixture();
        let field = magnitude_field(32);
        let view = &fx.target;
        let t_vc = view.voxel_to_camera(&Pose::identity());
        let cfg = SamplingConfig::eval(32, &view.frustum).unwrap();
        let map = build_opacity_map(&field, view, &cfg).unwrap();
        let by_opacity =
            voxelize_occupancy(&map, &fx.grid, &t_vc, &view.intrinsics, &view.frustum, OCCUPANCY_THRESHOLD).unwrap();
        let by_sigma = conventional_voxelize(&field, &fx.grid, &Pose::identity(), OCCUPANCY_THRESHOLD);
        let fm = frustum_mask(&fx.grid, &t_vc, &view.intrinsics);
        let gt = ground_truth_occupancy(&fx.scene, &fx.grid);
        let vm = visibility_mask(&gt, &view.intrinsics, &view.frustum, &t_vc);
        let differ = (0..fx.grid.len())
            .filter(|&i| fm.data[i] && by_opacity.data[i] != by_sigma.data[i])
            .count();
        let rec = |p: &VoxelGrid<bool>| compute_metrics(p, &gt, &fm, &vm).unwrap().o_rec.value().unwrap_or(0.0);
        Verdict::new(
            out.status.success() && rows > 1 && alpha_ok && worst < 0.1 && differ > 0,
            format!(
                "rows={rows} max|sigma_ratio/delta_ratio-1|={worst:.3} alpha_in_(0,1)={alpha_ok} protocol_disagreements={differ} O_Rec opacity={:.3} sigma={:.3}",
                rec(&by_opacity),
                rec(&by_sigma)
            ),
        )
    });
}

fn opacity_o_acc(field: &dyn DensityField, fx: &occrebench::fixtures::DeskFixture, n: usize) -> f64 {
    let view = &fx.target;
    let t_vc = view.voxel_to_camera(&Pose::identity());
    let cfg = SamplingConfig::eval(n, &view.frustum).unwrap();
    let map = build_opacity_map(field, view, &cfg).unwrap();
    let pred =
        voxelize_occupancy(&map, &fx.grid, &t_vc, &view.intrinsics, &view.frustum, OCCUPANCY_THRESHOLD).unwrap();
    let gt = ground_truth_occupancy(&fx.scene, &fx.grid);
    let fm = frustum_mask(&fx.grid, &t_vc, &view.intrinsics);
    let vm = visibility_mask(&gt, &view.intrinsics, &view.frustum, &t_vc);
    compute_metrics(&pred, &gt, &fm, &vm).unwrap().o_acc.value().unwrap()
}

#[test]
fn criterion_08_protocol_stability() {
    report(8, "protocol stability", || {
        let fx = protocol_fixture();
        let accs: Vec<f64> = [32, 64, 128, 256]
            .iter()
            .map(|&n| opacity_o_acc(&fx.scene, &fx, n))
            .collect();
        let spread = accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min);
        Verdict::new(
            spread < 0.02,
            format!(
                "O_Acc by N=[32,64,128,256]: {:?} spread={:.3}pp",
                accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>(),
                100.0 * spread
            ),
        )
    });
}

/// Training setup for the occluder ablation.
fn ablation_config() -> TrainConfig {
    TrainConfig {
        iterations: 300,
        learning_rate: 0.05,
        decay_start: 180,
        patch_count: 16,
        samples: 48,
        near: 2.0,
        far: 14.0,
        lambda_p: 1e-3,
        ..Default::default()
    }
}

#[test]
fn criterion_09_polarization_ablation() {
    report(9, "polarization ablation", || {
        let start = Instant::now();
        let fx = occluder_fixture();
        let data = TrainingSet::from_scene(&fx.scene, fx.target.clone(), &fx.sources);
        let cfg = ablation_config();
        let eval = EvalSetup {
            gt: ground_truth_occupancy(&fx.scene, &fx.grid),
            samples: cfg.samples,
        };
        let init = VoxelDensityField::new(fx.grid);
        let result = run_polarization_ablation(&init, &data, &eval, &cfg, &[0, 1, 2, 3, 4]).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let (ie_with, ie_without) = result.mean(3);
        let (o_with, o_without) = result.mean(0);
        let (ie_with, ie_without) = (ie_with.unwrap(), ie_without.unwrap());
        let (o_with, o_without) = (o_with.unwrap(), o_without.unwrap());
        Verdict::new(
            ie_with > ie_without && o_with > o_without && secs < 900.0,
            format!(
                "mean IE_Acc with={ie_with:.6} without={ie_without:.6}; mean O_Acc with={o_with:.6} without={o_without:.6}; time={secs:.0}s"
            ),
        )
    });
}

fn run_pipeline(dir: &Path, threads: Option<&str>) -> Vec<(String, Vec<u8>)> {
    std::fs::write(dir.join("train.toml"), "learning_rate = 0.05\npatch_count = 4\nsamples = 16\n").unwrap();
    let steps: &[&[&str]] = &[
        &["scene", "gt", "--fixture", "desk", "--out", "gt.ogrd"],
        &["scene", "render", "--fixture", "desk", "--out-dir", "img"],
        &["opacity", "--fixture", "desk", "--samples", "32", "--out", "map.ogrd"],
        &["voxelize", "--fixture", "desk", "--protocol", "opacity", "--out", "pred_opacity.ogrd"],
        &["voxelize", "--fixture", "desk", "--protocol", "sigma", "--out", "pred_sigma.ogrd"],
        &["masks", "--fixture", "desk", "--gt", "gt.ogrd", "--frustum-out", "fm.ogrd", "--visibility-out", "vm.ogrd"],
        &["eval", "--fixture", "desk", "--pred", "pred_opacity.ogrd", "--json", "m.json", "--csv", "m.csv"],
        &["gradcheck", "--fixtures", "50", "--out", "grad.csv"],
        &["--seed", "7", "fit", "--fixture", "wall", "--config", "train.toml", "--iterations", "15", "--out", "field.ogrd", "--trace", "trace.csv"],
        &["voxelize", "--fixture", "wall", "--field", "field.ogrd", "--protocol", "opacity", "--samples", "16", "--out", "pred_fit.ogrd"],
        &["--seed", "3", "ablate-lp", "--fixture", "wall", "--config", "train.toml", "--iterations", "5", "--seeds", "2", "--out", "ablation.csv", "--json", "ablation.json"],
        &["--seed", "11", "demo-magnitude", "--iterations", "500", "--out", "magnitude.csv"],
    ];
    for args in steps {
        let mut cmd = cli();
        if let Some(t) = threads {
            cmd.env("OCCREBENCH_THREADS", t);
        }
        let out = cmd.current_dir(dir).args(*args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files: Vec<PathBuf> = walk(dir);
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            (rel, std::fs::read(&p).unwrap())
        })
        .collect()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn criterion_10_reproducibility() {
    report(10, "reproducibility", || {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run_pipeline(a.path(), None);
        let second = run_pipeline(b.path(), Some("3"));
        let same_names = first.iter().map(|f| &f.0).eq(second.iter().map(|f| &f.0));
        let differing: Vec<&str> = first
            .iter()
            .zip(&second)
            .filter(|(x, y)| x.1 != y.1)
            .map(|(x, _)| x.0.as_str())
            .collect();

        let vector = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/grid_2x2x2_f32.ogrd");
        let bytes = std::fs::read(vector).unwrap();
        let frozen_ok = match decode_grid(&bytes) {
            Ok(grid) => {
                let f = grid.clone().into_f32().unwrap();
                encode_grid(&grid) == bytes
                    && f.data == [0.0, 0.5, -1.5, 1.0, 2.0, 0.25, 3.0, -0.125]
                    && f.geometry.counts == [2, 2, 2]
            }
            Err(_) => false,
        };
        Verdict::new(
            same_names && differing.is_empty() && frozen_ok,
            format!(
                "files={} byte_identical={} differing={differing:?} frozen_vector_roundtrip={frozen_ok}",
                first.len(),
                differing.is_empty() && same_names
            ),
        )
    });
}
