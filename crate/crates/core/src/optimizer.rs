//! Adam and the desk-scale trainer for [`VoxelDensityField`].

use crate::benchmark::{
    build_opacity_map, compute_metrics, frustum_mask, view_overlap_ratio, visibility_mask,
    voxelize_occupancy, BenchmarkError, MetricsReport, OCCUPANCY_THRESHOLD,
};
use crate::field::{render_reference_image, AnalyticScene, ColorSource, VoxelDensityField};
use crate::geometry::{CameraView, FrustumSpec, Pose};
use crate::grid::VoxelGrid;
use crate::image::{Rgb, RgbImage};
use crate::losses::{polarization_loss, ray_gradients, reconstruction_loss, LossConfig, LossError, RayTarget, Signal};
use crate::rendering::{
    ray_rng, sample_patch_rays, sample_ray_points, RayProfile, RenderError, SamplingConfig, SourceView,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("no source view overlaps the target frustum; training would see no multi-view signal")]
    NoOverlap,
    #[error("training needs at least one source view")]
    NoSourceViews,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the rate from `decay_start` on.
    pub decay_factor: f64,
    pub decay_start: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patch_count: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub samples: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 2e-4,
            decay_factor: 0.5,
            decay_start: 1200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patch_count: 64,
            patch_size: 8,
            seed: 0,
            lambda_r: 1.0,
            lambda_p: 1e-3,
            samples: 64,
            near: 3.0,
            far: 18.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad("decay_factor must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.patch_count == 0 || self.patch_size == 0 {
            return bad("patch_count and patch_size must be positive");
        }
        LossConfig::new(self.lambda_r, self.lambda_p)?;
        SamplingConfig::train(self.samples, &self.frustum(), self.seed)?;
        Ok(())
    }

    pub fn frustum(&self) -> FrustumSpec {
        FrustumSpec {
            near: self.near,
            far: self.far,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_r: self.lambda_r,
            lambda_p: self.lambda_p,
        }
    }

    pub fn rate_at(&self, iteration: usize) -> f64 {
        if iteration >= self.decay_start {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

/// Target view with its observed image and the source views that supply
/// point colors.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub target: CameraView,
    pub target_image: RgbImage,
    pub sources: Vec<SourceView>,
}

impl TrainingSet {
    /// Renders every view of `scene` exactly.
    pub fn from_scene(scene: &AnalyticScene, target: CameraView, sources: &[CameraView]) -> Self {
        let target_image = render_reference_image(scene, &target);
        let sources = sources
            .iter()
            .map(|v| SourceView::new(v.clone(), render_reference_image(scene, v)))
            .collect();
        Self {
            target,
            target_image,
            sources,
        }
    }

    pub fn source_views(&self) -> Vec<CameraView> {
        self.sources.iter().map(|s| s.view.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub polarization: f64,
}

struct RayResult {
    reconstruction: f64,
    polarization: f64,
    grad: Vec<(usize, f64)>,
}

fn ray_step(
    field: &VoxelDensityField,
    data: &TrainingSet,
    sampling: &SamplingConfig,
    loss: &LossConfig,
    pixel: (usize, usize),
    stream: u64,
    items: usize,
) -> Result<RayResult, TrainError> {
    let (u, v) = pixel;
    let ray = data.target.world_ray(u as f64, v as f64);
    let samples = sample_ray_points(&ray, sampling, stream);
    let (sigma, dsig_dtheta): (Vec<f64>, Vec<_>) = samples
        .x
        .iter()
        .map(|x| field.density_and_gradient(x))
        .unzip();
    let target = data.target_image.get(u, v);
    let mut dsigma = vec![0.0; sigma.len()];
    let mut rec = 0.0;
    let mut pol = 0.0;
    for src in &data.sources {
        let colors: Vec<Option<Rgb>> = samples.x.iter().map(|x| src.color_at(x)).collect();
        let profile = RayProfile::from_samples(&samples, sigma.clone(), colors)?;
        let item = RayTarget::new(profile, target);
        rec += reconstruction_loss(&item.profile, &item.target);
        if loss.lambda_p != 0.0 {
            pol += polarization_loss(&item.profile, Signal::Rgb)?;
        }
        let g = ray_gradients(&item, loss, items)?;
        for (acc, d) in dsigma.iter_mut().zip(&g.d_sigma) {
            *acc += d;
        }
    }
    let mut grad = Vec::new();
    for (ds, entries) in dsigma.iter().zip(&dsig_dtheta) {
        if *ds == 0.0 {
            continue;
        }
        for &(idx, w) in entries {
            grad.push((idx, ds * w));
        }
    }
    Ok(RayResult {
        reconstruction: rec,
        polarization: pol,
        grad,
    })
}

/// Evaluates the batch loss and its dense parameter gradient for one
/// iteration. Rays are processed in parallel and reduced in batch order.
pub fn loss_and_gradient(
    field: &VoxelDensityField,
    data: &TrainingSet,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<(TraceEntry, Vec<f64>), TrainError> {
    let loss = cfg.loss();
    let mut key = ray_rng(cfg.seed, iteration as u64);
    let patch_seed: u64 = key.gen();
    let sample_seed: u64 = key.gen();
    let batch = sample_patch_rays(
        0,
        &data.target.intrinsics,
        cfg.patch_count,
        cfg.patch_size,
        patch_seed,
    )?;
    let sampling = SamplingConfig::train(cfg.samples, &cfg.frustum(), sample_seed)?;
    let pixels = batch.pixels();
    let items = pixels.len() * data.sources.len();
    let results = pixels
        .par_iter()
        .enumerate()
        .map(|(k, &(_, u, v))| ray_step(field, data, &sampling, &loss, (u, v), k as u64, items))
        .collect::<Result<Vec<_>, _>>()?;
    let mut grad = vec![0.0; field.num_params()];
    let mut rec = 0.0;
    let mut pol = 0.0;
    for r in &results {
        rec += r.reconstruction;
        pol += r.polarization;
        for &(idx, g) in &r.grad {
            grad[idx] += g;
        }
    }
    let n = items as f64;
    let (rec, pol) = (rec / n, pol / n);
    Ok((
        TraceEntry {
            iteration,
            total: loss.lambda_r * rec + loss.lambda_p * pol,
            reconstruction: rec,
            polarization: pol,
        },
        grad,
    ))
}

/// Fits `field` to the training set. Deterministic for a fixed config.
/// Refuses to run when no source view overlaps the target frustum.
pub fn train(
    field: &mut VoxelDensityField,
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<Vec<TraceEntry>, TrainError> {
    cfg.validate()?;
    if data.sources.is_empty() {
        return Err(TrainError::NoSourceViews);
    }
    let overlap = view_overlap_ratio(
        &data.target,
        &data.source_views(),
        field.geometry(),
        &Pose::identity(),
    )?;
    if overlap == 0.0 {
        return Err(TrainError::NoOverlap);
    }
    let mut adam = Adam::new(field.num_params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (entry, grad) = loss_and_gradient(field, data, cfg, it)?;
        let lr = cfg.rate_at(it);
        field.update_params(|p| adam.step(p, &grad, lr));
        trace.push(entry);
    }
    Ok(trace)
}

/// Ground truth and sampling used to score a trained field on the target
/// view.
#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub gt: VoxelGrid<bool>,
    pub samples: usize,
}

/// Full benchmark on the target view: opacity map, voxelization, frustum
/// and visibility masks, metrics.
pub fn evaluate_field(
    field: &VoxelDensityField,
    target: &CameraView,
    eval: &EvalSetup,
) -> Result<MetricsReport, TrainError> {
    let geometry = eval.gt.geometry;
    let cfg = SamplingConfig::eval(eval.samples, &target.frustum)?;
    let map = build_opacity_map(field, target, &cfg)?;
    let t_vc = target.voxel_to_camera(&Pose::identity());
    let pred = voxelize_occupancy(
        &map,
        &geometry,
        &t_vc,
        &target.intrinsics,
        &target.frustum,
        OCCUPANCY_THRESHOLD,
    )?;
    let fm = frustum_mask(&geometry, &t_vc, &target.intrinsics);
    let vm = visibility_mask(&eval.gt, &target.intrinsics, &target.frustum, &t_vc);
    Ok(compute_metrics(&pred, &eval.gt, &fm, &vm)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub lambda_p: f64,
    pub trace: Vec<TraceEntry>,
    pub metrics: MetricsReport,
}

/// Paired runs with and without the polarization term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seeds: Vec<u64>,
    pub with_lp: Vec<RunSummary>,
    pub without_lp: Vec<RunSummary>,
}

fn mean_metric(runs: &[RunSummary], pick: impl Fn(&MetricsReport) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = runs.iter().map(|r| pick(&r.metrics)).collect();
    vals.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl ExperimentResult {
    /// Mean of one metric (by index into [`MetricsReport::NAMES`]) over the
    /// `(with, without)` arms.
    pub fn mean(&self, metric: usize) -> (Option<f64>, Option<f64>) {
        (
            mean_metric(&self.with_lp, |m| m.values()[metric]),
            mean_metric(&self.without_lp, |m| m.values()[metric]),
        )
    }
}

/// Trains one field from `init` and scores it.
pub fn run_once(
    init: &VoxelDensityField,
    data: &TrainingSet,
    eval: &EvalSetup,
    cfg: &TrainConfig,
) -> Result<RunSummary, TrainError> {
    let mut field = init.clone();
    let trace = train(&mut field, data, cfg)?;
    let metrics = evaluate_field(&field, &data.target, eval)?;
    Ok(RunSummary {
        seed: cfg.seed,
        lambda_p: cfg.lambda_p,
        trace,
        metrics,
    })
}

/// Twin runs per seed from one initialization: `cfg.lambda_p` against
/// zero. Both arms of a seed draw identical patches and samples.
pub fn run_polarization_ablation(
    init: &VoxelDensityField,
    data: &TrainingSet,
    eval: &EvalSetup,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ExperimentResult, TrainError> {
    let mut with_lp = Vec::new();
    let mut without_lp = Vec::new();
    for &seed in seeds {
        let on = TrainConfig { seed, ..*cfg };
        let off = TrainConfig {
            seed,
            lambda_p: 0.0,
            ..*cfg
        };
        with_lp.push(run_once(init, data, eval, &on)?);
        without_lp.push(run_once(init, data, eval, &off)?);
    }
    Ok(ExperimentResult {
        seeds: seeds.to_vec(),
        with_lp,
        without_lp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_signed_rate() {
        let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, 1.0, 1.0];
        adam.step(&mut p, &[0.5, -2.0, 0.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] - 1.1).abs() < 1e-7);
        assert_eq!(p[2], 1.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            adam.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn schedule_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.rate_at(0), 2e-4);
        assert_eq!(cfg.rate_at(1199), 2e-4);
        assert_eq!(cfg.rate_at(1200), 1e-4);
        assert!(cfg.validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..cfg }.validate().is_err());
        assert!(TrainConfig { lambda_p: -1.0, ..cfg }.validate().is_err());
        assert!(TrainConfig { near: 20.0, ..cfg }.validate().is_err());
    }
}
