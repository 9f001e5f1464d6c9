//! Ray point sampling, opacity, transmittance and color compositing.

use crate::field::{ColorSource, DensityField};
use crate::geometry::{project, CameraIntrinsics, CameraView, FrustumSpec, Pose, Ray, Vec3};
use crate::image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("density must be nonnegative, got {0}")]
    NegativeDensity(f64),
    #[error("interval length must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("array length mismatch: {0} opacities vs {1} colors")]
    LengthMismatch(usize, usize),
    #[error("sampling needs at least 2 points per ray, got {0}")]
    TooFewSamples(usize),
    #[error("invalid near/far bounds: {0} .. {1}")]
    BadBounds(f64, f64),
    #[error("image {width}x{height} is smaller than a {patch}x{patch} patch")]
    ImageTooSmall {
        width: usize,
        height: usize,
        patch: usize,
    },
}

/// Largest `f64` strictly below one; opacities saturate here.
pub const MAX_ALPHA: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Per-point jitter `r ~ U(-0.5, 0.5)`.
    Train,
    /// `r = 0`.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub mode: SamplingMode,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(
        samples: usize,
        near: f64,
        far: f64,
        mode: SamplingMode,
        seed: u64,
    ) -> Result<Self, RenderError> {
        if samples < 2 {
            return Err(RenderError::TooFewSamples(samples));
        }
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(RenderError::BadBounds(near, far));
        }
        Ok(Self {
            samples,
            near,
            far,
            mode,
            seed,
        })
    }

    pub fn eval(samples: usize, frustum: &FrustumSpec) -> Result<Self, RenderError> {
        Self::new(samples, frustum.near, frustum.far, SamplingMode::Eval, 0)
    }

    pub fn train(samples: usize, frustum: &FrustumSpec, seed: u64) -> Result<Self, RenderError> {
        Self::new(samples, frustum.near, frustum.far, SamplingMode::Train, seed)
    }

    pub fn frustum(&self) -> FrustumSpec {
        FrustumSpec {
            near: self.near,
            far: self.far,
        }
    }

    /// Radial distance for fractional sample position `s = (i + r) / N`,
    /// uniform in inverse depth.
    pub fn distance_at(&self, s: f64) -> f64 {
        1.0 / ((1.0 - s) / self.near + s / self.far)
    }
}

/// Sample positions along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub x: Vec<Vec3>,
    pub delta: Vec<f64>,
}

/// Deterministic per-ray generator: the config seed selects the key and
/// `stream` the ChaCha stream, so rays can be sampled in any order.
pub fn ray_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sample_ray_points(ray: &Ray, cfg: &SamplingConfig, stream: u64) -> RaySamples {
    let n = cfg.samples;
    let t: Vec<f64> = match cfg.mode {
        SamplingMode::Eval => (0..n)
            .map(|i| cfg.distance_at(i as f64 / n as f64))
            .collect(),
        SamplingMode::Train => {
            let mut rng = ray_rng(cfg.seed, stream);
            (0..n)
                .map(|i| {
                    let r: f64 = rng.gen_range(-0.5..0.5);
                    cfg.distance_at((i as f64 + r) / n as f64)
                })
                .collect()
        }
    };
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(cfg.far - t[n - 1]);
    let x = t.iter().map(|&ti| ray.at(ti)).collect();
    RaySamples { t, x, delta }
}

/// `α = 1 - exp(-σ δ)`, saturating at [`MAX_ALPHA`].
pub fn opacity(sigma: f64, delta: f64) -> Result<f64, RenderError> {
    if !(sigma >= 0.0) {
        return Err(RenderError::NegativeDensity(sigma));
    }
    if !(delta > 0.0) {
        return Err(RenderError::NonPositiveInterval(delta));
    }
    Ok((-(-sigma * delta).exp_m1()).min(MAX_ALPHA))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub color: Rgb,
    /// `T⁽ⁱ⁾ = Π_{j<i} (1 - α⁽ʲ⁾)`.
    pub transmittance: Vec<f64>,
    /// `Π_i (1 - α⁽ⁱ⁾)`, the light that passes the whole ray.
    pub residual: f64,
}

pub fn composite(alphas: &[f64], colors: &[Rgb]) -> Result<Composite, RenderError> {
    if alphas.len() != colors.len() {
        return Err(RenderError::LengthMismatch(alphas.len(), colors.len()));
    }
    let mut trans = Vec::with_capacity(alphas.len());
    let mut t = 1.0;
    let mut color = Rgb::zeros();
    for (&a, c) in alphas.iter().zip(colors) {
        trans.push(t);
        color += c * (a * t);
        t *= 1.0 - a;
    }
    Ok(Composite {
        color,
        transmittance: trans,
        residual: t,
    })
}

/// Everything computed along one rendered ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayProfile {
    pub t: Vec<f64>,
    pub x: Vec<Vec3>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    /// Sampled color per point; `None` marks a miss.
    pub colors: Vec<Option<Rgb>>,
    /// Composited color (misses contribute nothing).
    pub color: Rgb,
    pub residual: f64,
}

impl RayProfile {
    pub fn from_samples(
        samples: &RaySamples,
        sigma: Vec<f64>,
        colors: Vec<Option<Rgb>>,
    ) -> Result<Self, RenderError> {
        if sigma.len() != samples.t.len() || colors.len() != samples.t.len() {
            return Err(RenderError::LengthMismatch(sigma.len(), colors.len()));
        }
        let alpha = sigma
            .iter()
            .zip(&samples.delta)
            .map(|(&s, &d)| opacity(s, d))
            .collect::<Result<Vec<_>, _>>()?;
        let filled: Vec<Rgb> = colors.iter().map(|c| c.unwrap_or_else(Rgb::zeros)).collect();
        let comp = composite(&alpha, &filled)?;
        Ok(Self {
            t: samples.t.clone(),
            x: samples.x.clone(),
            delta: samples.delta.clone(),
            sigma,
            alpha,
            transmittance: comp.transmittance,
            colors,
            color: comp.color,
            residual: comp.residual,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Sampled colors with misses replaced by black.
    pub fn filled_colors(&self) -> Vec<Rgb> {
        self.colors
            .iter()
            .map(|c| c.unwrap_or_else(Rgb::zeros))
            .collect()
    }

    /// `Σ α T`, the fraction of light absorbed along the ray.
    pub fn absorbed(&self) -> f64 {
        self.alpha
            .iter()
            .zip(&self.transmittance)
            .map(|(a, t)| a * t)
            .sum()
    }
}

pub fn render_ray<F, C>(
    field: &F,
    colors: &C,
    ray: &Ray,
    cfg: &SamplingConfig,
    stream: u64,
) -> Result<RayProfile, RenderError>
where
    F: DensityField + ?Sized,
    C: ColorSource + ?Sized,
{
    let samples = sample_ray_points(ray, cfg, stream);
    let sigma = samples.x.iter().map(|x| field.density_at(x)).collect();
    let cols = samples.x.iter().map(|x| colors.color_at(x)).collect();
    RayProfile::from_samples(&samples, sigma, cols)
}

/// Colors a target-frame point from a source image: moves it into the
/// source camera, projects, and samples bilinearly. `None` if the point is
/// behind the source camera or projects outside its image.
pub fn sample_color_from_view(
    image: &RgbImage,
    intrinsics: &CameraIntrinsics,
    x_target: &Vec3,
    target_to_source: &Pose,
) -> Option<Rgb> {
    let x_s = target_to_source.transform_point(x_target);
    let p = project(intrinsics, &x_s);
    if !p.in_front() {
        return None;
    }
    image.bilinear(p.u, p.v)
}

/// A source camera with its observed image, usable as a [`ColorSource`] for
/// world-frame points.
#[derive(Debug, Clone)]
pub struct SourceView {
    pub view: CameraView,
    pub image: RgbImage,
    world_to_camera: Pose,
}

impl SourceView {
    pub fn new(view: CameraView, image: RgbImage) -> Self {
        let world_to_camera = view.world_to_camera();
        Self {
            view,
            image,
            world_to_camera,
        }
    }
}

impl ColorSource for SourceView {
    fn color_at(&self, x: &Vec3) -> Option<Rgb> {
        sample_color_from_view(&self.image, &self.view.intrinsics, x, &self.world_to_camera)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub view: usize,
    pub u0: usize,
    pub v0: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchBatch {
    pub patches: Vec<Patch>,
    pub patch_size: usize,
}

impl PatchBatch {
    /// Every `(view, u, v)` pixel in patch order, row-major inside a patch.
    pub fn pixels(&self) -> Vec<(usize, usize, usize)> {
        let s = self.patch_size;
        let mut out = Vec::with_capacity(self.num_rays());
        for p in &self.patches {
            for dv in 0..s {
                for du in 0..s {
                    out.push((p.view, p.u0 + du, p.v0 + dv));
                }
            }
        }
        out
    }

    pub fn num_rays(&self) -> usize {
        self.patches.len() * self.patch_size * self.patch_size
    }
}

pub const DEFAULT_PATCH_COUNT: usize = 64;
pub const DEFAULT_PATCH_SIZE: usize = 8;

/// Uniformly placed square patches, each fully inside the image.
pub fn sample_patch_rays(
    view: usize,
    intrinsics: &CameraIntrinsics,
    patch_count: usize,
    patch_size: usize,
    seed: u64,
) -> Result<PatchBatch, RenderError> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    if patch_size == 0 || w < patch_size || h < patch_size {
        return Err(RenderError::ImageTooSmall {
            width: w,
            height: h,
            patch: patch_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = (0..patch_count)
        .map(|_| Patch {
            view,
            u0: rng.gen_range(0..=w - patch_size),
            v0: rng.gen_range(0..=h - patch_size),
        })
        .collect();
    Ok(PatchBatch {
        patches,
        patch_size,
    })
}
