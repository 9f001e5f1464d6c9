//! Photometric reconstruction and occlusion-aware polarization losses with
//! hand-derived gradients.
//!
//! Samples whose color lookup missed (`None`) composite as black. Their
//! gradient entries are zeroed and any polarization pair touching them is
//! dropped.

use crate::field::{ColorSource, DensityField};
use crate::geometry::Ray;
use crate::image::Rgb;
use crate::rendering::{composite, opacity, render_ray, RayProfile, RenderError, SamplingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss weights must be finite and >= 0, got lambda_r={0}, lambda_p={1}")]
    BadWeights(f64, f64),
    #[error("loss batch is empty")]
    EmptyBatch,
    #[error("custom signal has {got} values, profile has {expected} samples")]
    SignalLength { expected: usize, got: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Per-point quantity compared between neighbouring samples in `L_p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Signal<'a> {
    /// Sampled RGB, compared with a channel-summed L1 difference.
    Rgb,
    /// User-supplied scalar channel (for example pseudo-depth). `None`
    /// marks a missing value.
    Custom(&'a [Option<f64>]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_r: f64,
    pub lambda_p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_p: 1e-3,
        }
    }
}

impl LossConfig {
    pub fn new(lambda_r: f64, lambda_p: f64) -> Result<Self, LossError> {
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if !(ok(lambda_r) && ok(lambda_p)) {
            return Err(LossError::BadWeights(lambda_r, lambda_p));
        }
        Ok(Self { lambda_r, lambda_p })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1(c: &Rgb) -> f64 {
    c.iter().map(|x| x.abs()).sum()
}

/// `L_r = Σ_channels |ĉ - c_gt|`.
pub fn reconstruction_loss(profile: &RayProfile, c_gt: &Rgb) -> f64 {
    l1(&(profile.color - c_gt))
}

/// Per-channel subgradient of the L1 loss with respect to `ĉ`.
fn residual_sign(profile: &RayProfile, c_gt: &Rgb) -> Rgb {
    (profile.color - c_gt).map(sign)
}

fn zero_misses(profile: &RayProfile, mut grad: Vec<f64>) -> Vec<f64> {
    for (g, c) in grad.iter_mut().zip(&profile.colors) {
        if c.is_none() {
            *g = 0.0;
        }
    }
    grad
}

/// `∂L_r/∂α⁽ⁱ⁾ = s · T⁽ⁱ⁾ (c⁽ⁱ⁾ - R⁽ⁱ⁾)` where `R⁽ⁱ⁾` is the color composited
/// from the samples after `i` alone. Suffix recurrence, O(N).
pub fn grad_reconstruction_wrt_alpha(profile: &RayProfile, c_gt: &Rgb) -> Vec<f64> {
    let s = residual_sign(profile, c_gt);
    let colors = profile.filled_colors();
    let n = profile.len();
    let mut grad = vec![0.0; n];
    let mut rest = Rgb::zeros();
    for i in (0..n).rev() {
        grad[i] = s.dot(&(profile.transmittance[i] * (colors[i] - rest)));
        rest = profile.alpha[i] * colors[i] + (1.0 - profile.alpha[i]) * rest;
    }
    zero_misses(profile, grad)
}

/// Same as [`grad_reconstruction_wrt_alpha`], evaluated term by term in
/// O(N²) straight from the product form.
pub fn grad_reconstruction_wrt_alpha_direct(profile: &RayProfile, c_gt: &Rgb) -> Vec<f64> {
    let s = residual_sign(profile, c_gt);
    let colors = profile.filled_colors();
    let a = &profile.alpha;
    let n = profile.len();
    let grad = (0..n)
        .map(|i| {
            let mut downstream = Rgb::zeros();
            for j in i + 1..n {
                let between: f64 = (i + 1..j).map(|k| 1.0 - a[k]).product();
                downstream += a[j] * between * colors[j];
            }
            let ti = profile.transmittance[i];
            s.dot(&(ti * colors[i] - ti * downstream))
        })
        .collect();
    zero_misses(profile, grad)
}

/// `∂α/∂σ = δ e^{-σδ}` per sample.
pub fn alpha_sigma_factor(profile: &RayProfile) -> Vec<f64> {
    profile
        .sigma
        .iter()
        .zip(&profile.delta)
        .map(|(s, d)| d * (-s * d).exp())
        .collect()
}

/// Chains an `α`-gradient to `σ`.
pub fn grad_chain_alpha_to_sigma(profile: &RayProfile, d_alpha: &[f64]) -> Vec<f64> {
    alpha_sigma_factor(profile)
        .iter()
        .zip(d_alpha)
        .map(|(f, g)| f * g)
        .collect()
}

/// `|Δsignal|` for each adjacent pair, `None` when either side is missing.
fn pair_discrepancy(profile: &RayProfile, signal: Signal) -> Result<Vec<Option<f64>>, LossError> {
    let n = profile.len();
    match signal {
        Signal::Rgb => Ok(profile
            .colors
            .windows(2)
            .map(|w| match (w[0], w[1]) {
                (Some(a), Some(b)) => Some(l1(&(b - a))),
                _ => None,
            })
            .collect()),
        Signal::Custom(values) => {
            if values.len() != n {
                return Err(LossError::SignalLength {
                    expected: n,
                    got: values.len(),
                });
            }
            Ok(values
                .windows(2)
                .map(|w| match (w[0], w[1]) {
                    (Some(a), Some(b)) => Some((b - a).abs()),
                    _ => None,
                })
                .collect())
        }
    }
}

/// Weighting mask `M_i = max(α⁽ⁱ⁾, α⁽ⁱ⁺¹⁾)`.
pub fn polarization_mask(profile: &RayProfile) -> Vec<f64> {
    profile.alpha.windows(2).map(|w| w[0].max(w[1])).collect()
}

fn polarization_terms(sigma: &[f64], mask: &[f64], disc: &[Option<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..disc.len() {
        if let Some(d) = disc[i] {
            total += mask[i] * d * (-(sigma[i + 1] - sigma[i]).abs()).exp();
        }
    }
    total
}

/// `L_p = Σ_i M_i |c⁽ⁱ⁺¹⁾ - c⁽ⁱ⁾| exp(-|σ⁽ⁱ⁺¹⁾ - σ⁽ⁱ⁾|)`.
pub fn polarization_loss(profile: &RayProfile, signal: Signal) -> Result<f64, LossError> {
    let disc = pair_discrepancy(profile, signal)?;
    Ok(polarization_terms(
        &profile.sigma,
        &polarization_mask(profile),
        &disc,
    ))
}

/// `L_p` at densities `sigma` with the mask held at the given values. This
/// is the function whose exact derivative
/// [`grad_polarization_wrt_sigma`] returns.
pub fn polarization_loss_detached(
    profile: &RayProfile,
    signal: Signal,
    sigma: &[f64],
    mask: &[f64],
) -> Result<f64, LossError> {
    let disc = pair_discrepancy(profile, signal)?;
    Ok(polarization_terms(sigma, mask, &disc))
}

/// `∂L_p/∂σ` with the mask detached. At `Δσ = 0` the subgradient is 0.
pub fn grad_polarization_wrt_sigma(
    profile: &RayProfile,
    signal: Signal,
) -> Result<Vec<f64>, LossError> {
    let disc = pair_discrepancy(profile, signal)?;
    let mask = polarization_mask(profile);
    let sigma = &profile.sigma;
    let mut grad = vec![0.0; profile.len()];
    for i in 0..disc.len() {
        let Some(d) = disc[i] else { continue };
        let ds = sigma[i + 1] - sigma[i];
        let g = mask[i] * d * (-ds.abs()).exp() * sign(ds);
        grad[i] += g;
        grad[i + 1] -= g;
    }
    Ok(zero_misses(profile, grad))
}

/// One supervised ray: its profile, the observed target color and an
/// optional custom polarization signal.
#[derive(Debug, Clone, PartialEq)]
pub struct RayTarget {
    pub profile: RayProfile,
    pub target: Rgb,
    pub signal: Option<Vec<Option<f64>>>,
}

impl RayTarget {
    pub fn new(profile: RayProfile, target: Rgb) -> Self {
        Self {
            profile,
            target,
            signal: None,
        }
    }

    fn signal(&self) -> Signal<'_> {
        match &self.signal {
            Some(v) => Signal::Custom(v),
            None => Signal::Rgb,
        }
    }
}

/// Per-ray gradients. `d_sigma` is the gradient of the batch loss (weights
/// and the batch mean included); the other fields are raw per-term values.
#[derive(Debug, Clone, PartialEq)]
pub struct RayGradients {
    pub d_alpha_r: Vec<f64>,
    pub d_sigma_r: Vec<f64>,
    pub d_sigma_p: Vec<f64>,
    pub d_sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// `λ_r L_r + λ_p L_p`, averaged over rays.
    pub total: f64,
    /// Mean `L_r`.
    pub reconstruction: f64,
    /// Mean `L_p`.
    pub polarization: f64,
}

/// Gradients for a single ray given the batch size `n` used for the mean.
pub fn ray_gradients(item: &RayTarget, cfg: &LossConfig, n: usize) -> Result<RayGradients, LossError> {
    let p = &item.profile;
    let d_alpha_r = grad_reconstruction_wrt_alpha(p, &item.target);
    let d_sigma_r = grad_chain_alpha_to_sigma(p, &d_alpha_r);
    let d_sigma_p = if cfg.lambda_p != 0.0 {
        grad_polarization_wrt_sigma(p, item.signal())?
    } else {
        vec![0.0; p.len()]
    };
    let scale = 1.0 / n as f64;
    let d_sigma = d_sigma_r
        .iter()
        .zip(&d_sigma_p)
        .map(|(r, q)| scale * (cfg.lambda_r * r + cfg.lambda_p * q))
        .collect();
    Ok(RayGradients {
        d_alpha_r,
        d_sigma_r,
        d_sigma_p,
        d_sigma,
    })
}

/// `L = λ_r L_r + λ_p L_p` averaged over the batch, with per-ray gradients.
/// Sums run in batch order.
pub fn total_loss(
    batch: &[RayTarget],
    cfg: &LossConfig,
) -> Result<(LossValue, Vec<RayGradients>), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = batch.len();
    let mut rec = 0.0;
    let mut pol = 0.0;
    let mut grads = Vec::with_capacity(n);
    for item in batch {
        rec += reconstruction_loss(&item.profile, &item.target);
        pol += polarization_loss(&item.profile, item.signal())?;
        grads.push(ray_gradients(item, cfg, n)?);
    }
    let (rec, pol) = (rec / n as f64, pol / n as f64);
    Ok((
        LossValue {
            total: cfg.lambda_r * rec + cfg.lambda_p * pol,
            reconstruction: rec,
            polarization: pol,
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub t: f64,
    pub transmittance: f64,
    pub grad_alpha: f64,
    pub grad_sigma: f64,
}

/// Magnitude of `∂L_r/∂α` and `∂L_r/∂σ` at every sample along a ray, for
/// studying how occluders starve the samples behind them of gradient.
pub fn occlusion_gradient_probe<F, C>(
    field: &F,
    colors: &C,
    ray: &Ray,
    cfg: &SamplingConfig,
    c_gt: &Rgb,
) -> Result<Vec<ProbeRow>, LossError>
where
    F: DensityField + ?Sized,
    C: ColorSource + ?Sized,
{
    let profile = render_ray(field, colors, ray, cfg, 0)?;
    let ga = grad_reconstruction_wrt_alpha(&profile, c_gt);
    let gs = grad_chain_alpha_to_sigma(&profile, &ga);
    Ok((0..profile.len())
        .map(|i| ProbeRow {
            t: profile.t[i],
            transmittance: profile.transmittance[i],
            grad_alpha: ga[i].abs(),
            grad_sigma: gs[i].abs(),
        })
        .collect())
}

/// A standalone ray fixture for gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct GradFixture {
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub colors: Vec<Rgb>,
    pub target: Rgb,
}

impl GradFixture {
    /// Random smooth fixture: `σ ∈ [0.05, 3]`, `δ ∈ [0.05, 0.5]`, adjacent
    /// densities at least `1e-3` apart and every residual channel at least
    /// `1e-3` away from zero.
    pub fn random(rng: &mut impl Rng) -> Self {
        let n = rng.gen_range(2..=16);
        let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.5)).collect();
        let mut sigma: Vec<f64> = Vec::with_capacity(n);
        while sigma.len() < n {
            let s = rng.gen_range(0.05..3.0);
            if sigma.last().is_none_or(|p: &f64| (s - p).abs() > 1e-3) {
                sigma.push(s);
            }
        }
        let colors: Vec<Rgb> = (0..n)
            .map(|_| Rgb::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let mut fx = Self {
            delta,
            sigma,
            colors,
            target: Rgb::zeros(),
        };
        let c_hat = fx.profile().color;
        loop {
            let t = Rgb::new(rng.gen(), rng.gen(), rng.gen());
            if (c_hat - t).iter().all(|r| r.abs() > 1e-3) {
                fx.target = t;
                return fx;
            }
        }
    }

    pub fn profile(&self) -> RayProfile {
        self.profile_with_sigma(&self.sigma)
    }

    fn profile_with_sigma(&self, sigma: &[f64]) -> RayProfile {
        let mut t = Vec::with_capacity(self.delta.len());
        let mut acc = 1.0;
        for d in &self.delta {
            t.push(acc);
            acc += d;
        }
        let samples = crate::rendering::RaySamples {
            x: t.iter().map(|&ti| crate::geometry::Vec3::new(0.0, 0.0, ti)).collect(),
            t,
            delta: self.delta.clone(),
        };
        RayProfile::from_samples(
            &samples,
            sigma.to_vec(),
            self.colors.iter().copied().map(Some).collect(),
        )
        .expect("fixture is valid")
    }

    fn loss_at_alpha(&self, alpha: &[f64]) -> f64 {
        let c = composite(alpha, &self.colors).expect("lengths match").color;
        l1(&(c - self.target))
    }

    fn loss_at_sigma(&self, sigma: &[f64]) -> f64 {
        let alpha: Vec<f64> = sigma
            .iter()
            .zip(&self.delta)
            .map(|(&s, &d)| opacity(s, d).expect("fixture is valid"))
            .collect();
        self.loss_at_alpha(&alpha)
    }
}

/// Which analytic gradient a check row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradKind {
    ReconstructionAlpha,
    ReconstructionSigma,
    PolarizationSigma,
}

impl GradKind {
    pub fn name(self) -> &'static str {
        match self {
            GradKind::ReconstructionAlpha => "dLr_dalpha",
            GradKind::ReconstructionSigma => "dLr_dsigma",
            GradKind::PolarizationSigma => "dLp_dsigma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckRow {
    pub fixture: usize,
    pub kind: GradKind,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckRow {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.abs_error() / scale
        }
    }

    /// Relative error, taken as zero when the absolute error is within
    /// `abs_floor`.
    pub fn floored_rel_error(&self, abs_floor: f64) -> f64 {
        if self.abs_error() <= abs_floor {
            0.0
        } else {
            self.rel_error()
        }
    }

    /// Relative error below `rel_tol`, or absolute error below `abs_floor`.
    pub fn passes(&self, rel_tol: f64, abs_floor: f64) -> bool {
        self.abs_error() <= abs_floor || self.rel_error() < rel_tol
    }
}

pub const FD_STEP: f64 = 1e-6;
pub const GRADCHECK_REL_TOL: f64 = 1e-5;
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-9;

fn central(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Compares every analytic gradient entry of one fixture against central
/// differences.
pub fn check_fixture(id: usize, fx: &GradFixture) -> Vec<GradCheckRow> {
    let profile = fx.profile();
    let n = profile.len();
    let mut rows = Vec::with_capacity(3 * n);
    let ga = grad_reconstruction_wrt_alpha(&profile, &fx.target);
    for i in 0..n {
        rows.push(GradCheckRow {
            fixture: id,
            kind: GradKind::ReconstructionAlpha,
            index: i,
            analytic: ga[i],
            numeric: central(|a| fx.loss_at_alpha(a), &profile.alpha, i, FD_STEP),
        });
    }
    let gs = grad_chain_alpha_to_sigma(&profile, &ga);
    for i in 0..n {
        rows.push(GradCheckRow {
            fixture: id,
            kind: GradKind::ReconstructionSigma,
            index: i,
            analytic: gs[i],
            numeric: central(|s| fx.loss_at_sigma(s), &fx.sigma, i, FD_STEP),
        });
    }
    let gp = grad_polarization_wrt_sigma(&profile, Signal::Rgb).expect("rgb signal");
    let mask = polarization_mask(&profile);
    for i in 0..n {
        let f = |s: &[f64]| {
            polarization_loss_detached(&profile, Signal::Rgb, s, &mask).expect("rgb signal")
        };
        rows.push(GradCheckRow {
            fixture: id,
            kind: GradKind::PolarizationSigma,
            index: i,
            analytic: gp[i],
            numeric: central(f, &fx.sigma, i, FD_STEP),
        });
    }
    rows
}

/// Runs [`check_fixture`] on `count` random fixtures drawn from `seed`.
pub fn gradcheck(count: usize, seed: u64) -> Vec<GradCheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .flat_map(|id| {
            let fx = GradFixture::random(&mut rng);
            check_fixture(id, &fx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rendering::RaySamples;
    use crate::Vec3;

    fn profile(sigma: &[f64], delta: &[f64], colors: &[Option<Rgb>]) -> RayProfile {
        let mut t = Vec::new();
        let mut acc = 1.0;
        for d in delta {
            t.push(acc);
            acc += d;
        }
        let samples = RaySamples {
            x: t.iter().map(|&ti| Vec3::new(0.0, 0.0, ti)).collect(),
            t,
            delta: delta.to_vec(),
        };
        RayProfile::from_samples(&samples, sigma.to_vec(), colors.to_vec()).unwrap()
    }

    fn gray(x: f64) -> Option<Rgb> {
        Some(Rgb::repeat(x))
    }

    #[test]
    fn reconstruction_loss_sums_channels() {
        let p = profile(&[1e3], &[1.0], &[gray(1.0)]);
        assert!((reconstruction_loss(&p, &Rgb::zeros()) - 3.0).abs() < 1e-12);
        let q = profile(&[0.0, 0.0], &[1.0, 1.0], &[gray(0.3), gray(0.7)]);
        assert_eq!(reconstruction_loss(&q, &Rgb::zeros()), 0.0);
    }

    #[test]
    fn single_sample_gradient_is_signed_color() {
        let c = Rgb::new(0.2, 0.4, 0.9);
        let p = profile(&[0.5], &[1.0], &[Some(c)]);
        let gt = Rgb::new(0.0, 1.0, 0.0);
        let s = Rgb::new(1.0, -1.0, 1.0);
        let g = grad_reconstruction_wrt_alpha(&p, &gt);
        assert!((g[0] - s.dot(&c)).abs() < 1e-15);
    }

    #[test]
    fn suffix_and_direct_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let fx = GradFixture::random(&mut rng);
            let p = fx.profile();
            let a = grad_reconstruction_wrt_alpha(&p, &fx.target);
            let b = grad_reconstruction_wrt_alpha_direct(&p, &fx.target);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_occluded_sample_gets_no_gradient() {
        // 40 saturated samples drive T below the smallest subnormal
        let n = 45;
        let sigma: Vec<f64> = (0..n).map(|i| if i < 40 { 1e4 } else { 1.0 }).collect();
        let colors: Vec<Option<Rgb>> = (0..n).map(|i| gray(0.1 + 0.01 * i as f64)).collect();
        let p = profile(&sigma, &vec![0.1; n], &colors);
        assert_eq!(p.transmittance[41], 0.0);
        let g = grad_reconstruction_wrt_alpha(&p, &Rgb::zeros());
        for gi in &g[41..] {
            assert_eq!(*gi, 0.0);
        }
        assert!(g[0] != 0.0);
    }

    #[test]
    fn sigma_chain_factor() {
        let p = profile(&[0.0, 200.0], &[0.3, 0.3], &[gray(0.5), gray(0.5)]);
        let f = alpha_sigma_factor(&p);
        assert_eq!(f[0], 0.3);
        assert!(f[1] < 1e-25);
    }

    #[test]
    fn polarization_hand_value() {
        let p = profile(&[1.0, 1.0], &[1.0, 1.0], &[gray(0.0), Some(Rgb::new(0.5, 0.0, 0.0))]);
        let want = (1.0 - (-1.0f64).exp()) * 0.5;
        assert!((polarization_loss(&p, Signal::Rgb).unwrap() - want).abs() < 1e-15);
        // zero subgradient at equal densities
        assert_eq!(grad_polarization_wrt_sigma(&p, Signal::Rgb).unwrap(), vec![0.0, 0.0]);
        // raising the second density lowers the loss
        let q = profile(&[1.0, 1.1], &[1.0, 1.0], &[gray(0.0), Some(Rgb::new(0.5, 0.0, 0.0))]);
        let g = grad_polarization_wrt_sigma(&q, Signal::Rgb).unwrap();
        assert!(g[1] < 0.0 && g[0] > 0.0);
        assert!(polarization_loss(&q, Signal::Rgb).unwrap() < want);
    }

    #[test]
    fn polarization_zero_cases() {
        let same = profile(&[0.5, 2.0, 0.1], &[0.2; 3], &[gray(0.4); 3]);
        assert_eq!(polarization_loss(&same, Signal::Rgb).unwrap(), 0.0);
        let free = profile(&[0.0; 3], &[0.2; 3], &[gray(0.0), gray(1.0), gray(0.3)]);
        assert_eq!(polarization_loss(&free, Signal::Rgb).unwrap(), 0.0);
    }

    #[test]
    fn custom_signal_and_misses() {
        let p = profile(&[1.0, 2.0, 0.5], &[0.5; 3], &[gray(0.1), None, gray(0.9)]);
        // both pairs touch the miss
        assert_eq!(polarization_loss(&p, Signal::Rgb).unwrap(), 0.0);
        let g = grad_reconstruction_wrt_alpha(&p, &Rgb::repeat(0.5));
        assert_eq!(g[1], 0.0);
        let depth = [Some(1.0), Some(3.0), Some(3.0)];
        let v = polarization_loss(&p, Signal::Custom(&depth)).unwrap();
        let m0 = p.alpha[0].max(p.alpha[1]);
        assert!((v - m0 * 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!(polarization_loss(&p, Signal::Custom(&depth[..2])).is_err());
    }

    #[test]
    fn total_loss_combines_terms() {
        let a = RayTarget::new(
            profile(&[1.0, 2.0], &[0.5, 0.5], &[gray(0.2), gray(0.8)]),
            Rgb::repeat(0.1),
        );
        let b = RayTarget::new(
            profile(&[0.3, 0.1], &[0.5, 0.5], &[gray(0.6), gray(0.1)]),
            Rgb::repeat(0.9),
        );
        let batch = vec![a.clone(), b.clone()];
        let cfg = LossConfig::default();
        let (v, g) = total_loss(&batch, &cfg).unwrap();
        let lr = (reconstruction_loss(&a.profile, &a.target) + reconstruction_loss(&b.profile, &b.target)) / 2.0;
        let lp = (polarization_loss(&a.profile, Signal::Rgb).unwrap()
            + polarization_loss(&b.profile, Signal::Rgb).unwrap())
            / 2.0;
        assert_eq!(v.total, lr + 1e-3 * lp);
        let only_r = total_loss(&batch, &LossConfig::new(1.0, 0.0).unwrap()).unwrap().0;
        assert_eq!(only_r.total, lr);
        for gi in &g {
            for k in 0..2 {
                let want = 0.5 * (gi.d_sigma_r[k] + 1e-3 * gi.d_sigma_p[k]);
                assert!((gi.d_sigma[k] - want).abs() < 1e-18);
            }
        }
        assert!(total_loss(&[], &cfg).is_err());
        assert!(LossConfig::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn gradcheck_passes_on_random_fixtures() {
        for row in gradcheck(200, 5) {
            assert!(row.passes(1e-5, 1e-9), "{row:?}");
        }
    }
}
