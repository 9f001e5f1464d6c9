use crate::geometry::Vec3;

/// Linear RGB triple with channels nominally in `[0, 1]`.
pub type Rgb = Vec3;

/// Row-major RGB image of `f64` pixels. Pixel `(u, v)` is column `u`, row `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                pixels.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, u: usize, v: usize) -> Rgb {
        self.pixels[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, c: Rgb) {
        self.pixels[v * self.width + u] = c;
    }

    /// Bilinear lookup with pixel centers at integer coordinates. Returns
    /// `None` outside `[0, w-1] x [0, h-1]`.
    pub fn bilinear(&self, u: f64, v: f64) -> Option<Rgb> {
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(u >= 0.0 && u <= wmax && v >= 0.0 && v <= hmax) {
            return None;
        }
        let u0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let v0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let u1 = (u0 + 1).min(self.width - 1);
        let v1 = (v0 + 1).min(self.height - 1);
        let fu = u - u0 as f64;
        let fv = v - v0 as f64;
        let top = self.get(u0, v0) * (1.0 - fu) + self.get(u1, v0) * fu;
        let bottom = self.get(u0, v1) * (1.0 - fu) + self.get(u1, v1) * fu;
        Some(top * (1.0 - fv) + bottom * fv)
    }

    /// Binary PPM (P6) with channels clamped to `[0, 1]` and quantized to 8 bits.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            for c in p.iter() {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}
