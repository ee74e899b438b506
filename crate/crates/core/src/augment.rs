//! Seeded weak and strong augmentation of RGB patches.
//!
//! Weak: random quarter-turn rotation, optional horizontal/vertical flips,
//! color jitter. Strong: rotation, flips, stain-space (HED) jitter, a
//! random crop rescaled to full size, and a small random affine warp.

use serde::{Deserialize, Serialize};

use crate::autodiff::SeedStream;
use crate::error::{Error, Result};

/// `H×W×3` raster with channel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width}x3 patch needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels: pixels.into_iter().map(clamp01).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb.map(clamp01)).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn rgb(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set_rgb(&mut self, r: usize, c: usize, v: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        self.pixels[i..i + 3].copy_from_slice(&v.map(clamp01));
    }

    fn map_pixels(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let mut out = self.clone();
        for (dst, src) in out.pixels.chunks_mut(3).zip(self.pixels.chunks(3)) {
            let v = f([src[0], src[1], src[2]]);
            dst.copy_from_slice(&v.map(clamp01));
        }
        out
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// Counter-clockwise rotation by `quarter_turns × 90°`.
pub fn rotate90(img: &ImagePatch, quarter_turns: u8) -> Result<ImagePatch> {
    let k = quarter_turns % 4;
    if k % 2 == 1 && img.height != img.width {
        return Err(Error::InvalidArgument(format!(
            "odd quarter-turns need a square patch, got {}x{}",
            img.height, img.width
        )));
    }
    let mut out = img.clone();
    if k == 2 {
        let (h, w) = (img.height, img.width);
        for r in 0..h {
            for c in 0..w {
                out.set_rgb(h - 1 - r, w - 1 - c, img.rgb(r, c));
            }
        }
        return Ok(out);
    }
    for _ in 0..k {
        let n = out.width;
        let mut next = out.clone();
        for r in 0..n {
            for c in 0..n {
                next.set_rgb(n - 1 - c, r, out.rgb(r, c));
            }
        }
        out = next;
    }
    Ok(out)
}

pub fn flip(img: &ImagePatch, axis: FlipAxis) -> ImagePatch {
    let mut out = img.clone();
    for r in 0..img.height {
        for c in 0..img.width {
            let (sr, sc) = match axis {
                FlipAxis::Horizontal => (r, img.width - 1 - c),
                FlipAxis::Vertical => (img.height - 1 - r, c),
            };
            out.set_rgb(r, c, img.rgb(sr, sc));
        }
    }
    out
}

fn luma([r, g, b]: [f64; 3]) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// RGB in `[0,1]` to HSV with hue as a fraction of a full cycle.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Concrete factors for one color-jitter application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift as a fraction of a full cycle.
    pub hue: f64,
}

impl ColorJitterFactors {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    pub fn sample(rng: &mut SeedStream, magnitude: f64) -> Self {
        let m = magnitude.max(0.0);
        Self {
            brightness: rng.uniform(1.0 - m, 1.0 + m),
            contrast: rng.uniform(1.0 - m, 1.0 + m),
            saturation: rng.uniform(1.0 - m, 1.0 + m),
            hue: rng.uniform(-m, m),
        }
    }
}

/// Brightness, contrast, saturation, then hue, clamping after each.
pub fn apply_color_jitter(img: &ImagePatch, f: &ColorJitterFactors) -> ImagePatch {
    let mut out = img.map_pixels(|p| p.map(|v| v * f.brightness));
    let n = (out.height * out.width) as f64;
    let mean = out
        .pixels
        .chunks(3)
        .map(|p| luma([p[0], p[1], p[2]]))
        .sum::<f64>()
        / n;
    out = out.map_pixels(|p| p.map(|v| f.contrast * v + (1.0 - f.contrast) * mean));
    out = out.map_pixels(|p| {
        let y = luma(p);
        p.map(|v| f.saturation * v + (1.0 - f.saturation) * y)
    });
    if f.hue != 0.0 {
        out = out.map_pixels(|p| {
            let [h, s, v] = rgb_to_hsv(p);
            hsv_to_rgb([h + f.hue, s, v])
        });
    }
    out
}

pub fn color_jitter(img: &ImagePatch, rng: &mut SeedStream, magnitude: f64) -> ImagePatch {
    let f = ColorJitterFactors::sample(rng, magnitude);
    apply_color_jitter(img, &f)
}

/// Stain vectors for hematoxylin, eosin and DAB, one per row, unit-normalized.
pub fn rgb_from_hed() -> [[f64; 3]; 3] {
    let rows: [[f64; 3]; 3] = [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]];
    rows.map(|r| {
        let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        r.map(|v| v / n)
    })
}

#[allow(clippy::needless_range_loop)]
fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

pub fn hed_from_rgb() -> [[f64; 3]; 3] {
    invert3(rgb_from_hed())
}

/// Row vector times matrix.
fn vec_mat(v: [f64; 3], m: &[[f64; 3]; 3]) -> [f64; 3] {
    [0, 1, 2].map(|j| v[0] * m[0][j] + v[1] * m[1][j] + v[2] * m[2][j])
}

/// Optical density, then projection onto the stain basis.
pub fn rgb_to_hed(rgb: [f64; 3]) -> [f64; 3] {
    let od = rgb.map(|v| -v.max(1e-6).log10());
    vec_mat(od, &hed_from_rgb())
}

pub fn hed_to_rgb(hed: [f64; 3]) -> [f64; 3] {
    let od = vec_mat(hed, &rgb_from_hed());
    od.map(|v| 10f64.powf(-v))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HedJitterFactors {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl HedJitterFactors {
    pub fn sample(rng: &mut SeedStream, alpha: f64, beta: f64) -> Self {
        let (a, b) = (alpha.max(0.0), beta.max(0.0));
        let scale = [0; 3].map(|_| rng.uniform(-a, a));
        let shift = [0; 3].map(|_| rng.uniform(-b, b));
        Self { scale, shift }
    }
}

pub fn apply_hed_jitter(img: &ImagePatch, f: &HedJitterFactors) -> ImagePatch {
    img.map_pixels(|p| {
        let hed = rgb_to_hed(p);
        let jittered = [0, 1, 2].map(|c| hed[c] * (1.0 + f.scale[c]) + f.shift[c]);
        hed_to_rgb(jittered)
    })
}

pub fn hed_jitter(img: &ImagePatch, rng: &mut SeedStream, alpha: f64, beta: f64) -> ImagePatch {
    let f = HedJitterFactors::sample(rng, alpha, beta);
    apply_hed_jitter(img, &f)
}

/// Bilinear sample at continuous pixel coordinates, clamped to the border.
fn sample_bilinear(img: &ImagePatch, y: f64, x: f64) -> [f64; 3] {
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let (a, b, c, d) = (
        img.rgb(y0, x0),
        img.rgb(y0, x1),
        img.rgb(y1, x0),
        img.rgb(y1, x1),
    );
    [0, 1, 2].map(|k| {
        let top = a[k] + fx * (b[k] - a[k]);
        let bottom = c[k] + fx * (d[k] - c[k]);
        top + fy * (bottom - top)
    })
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(img: &ImagePatch, height: usize, width: usize) -> ImagePatch {
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let mut out = ImagePatch::filled(height, width, [0.0; 3]);
    for r in 0..height {
        for c in 0..width {
            let y = (r as f64 + 0.5) * sy - 0.5;
            let x = (c as f64 + 0.5) * sx - 0.5;
            out.set_rgb(r, c, sample_bilinear(img, y, x));
        }
    }
    out
}

/// Axis-aligned crop window in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

pub fn crop(img: &ImagePatch, b: CropBox) -> ImagePatch {
    let mut out = ImagePatch::filled(b.height, b.width, [0.0; 3]);
    for r in 0..b.height {
        for c in 0..b.width {
            out.set_rgb(r, c, img.rgb(b.top + r, b.left + c));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Random area fraction and aspect ratio at a random position.
    Inception,
    /// Centered window of random side fraction.
    Center,
}

fn sample_crop_box(
    h: usize,
    w: usize,
    rng: &mut SeedStream,
    (lo, hi): (f64, f64),
    mode: CropMode,
) -> CropBox {
    let fit = |ch: usize, cw: usize| (ch.clamp(2.min(h), h), cw.clamp(2.min(w), w));
    match mode {
        CropMode::Center => {
            let f = rng.uniform(lo, hi);
            let (ch, cw) = fit(
                (f * h as f64).round() as usize,
                (f * w as f64).round() as usize,
            );
            CropBox {
                top: (h - ch) / 2,
                left: (w - cw) / 2,
                height: ch,
                width: cw,
            }
        }
        CropMode::Inception => {
            let area = (h * w) as f64;
            let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
            for _ in 0..10 {
                let target = area * rng.uniform(lo, hi);
                let aspect = rng.uniform(log_lo, log_hi).exp();
                let cw = (target * aspect).sqrt().round() as usize;
                let ch = (target / aspect).sqrt().round() as usize;
                if cw <= w && ch <= h && cw > 0 && ch > 0 {
                    let (ch, cw) = fit(ch, cw);
                    let top = rng.below(h - ch + 1);
                    let left = rng.below(w - cw + 1);
                    return CropBox {
                        top,
                        left,
                        height: ch,
                        width: cw,
                    };
                }
            }
            CropBox {
                top: 0,
                left: 0,
                height: h,
                width: w,
            }
        }
    }
}

/// Random crop rescaled back to the original size.
pub fn crop_resize(
    img: &ImagePatch,
    rng: &mut SeedStream,
    fraction_range: (f64, f64),
    mode: CropMode,
) -> Result<ImagePatch> {
    let (lo, hi) = fraction_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "crop fraction range must lie in (0, 1], got [{lo}, {hi}]"
        )));
    }
    let b = sample_crop_box(img.height, img.width, rng, fraction_range, mode);
    Ok(resize_bilinear(&crop(img, b), img.height, img.width))
}

/// Rotation about the patch center followed by a translation (in pixels),
/// resampled through the inverse map with border extension.
pub fn apply_affine(img: &ImagePatch, theta: f64, tx: f64, ty: f64) -> ImagePatch {
    let (cy, cx) = ((img.height - 1) as f64 / 2.0, (img.width - 1) as f64 / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut out = img.clone();
    for r in 0..img.height {
        for c in 0..img.width {
            let dx = c as f64 - cx - tx;
            let dy = r as f64 - cy - ty;
            // inverse rotation
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            out.set_rgb(r, c, sample_bilinear(img, sy, sx));
        }
    }
    out
}

pub fn affine(
    img: &ImagePatch,
    rng: &mut SeedStream,
    max_rotation_deg: f64,
    max_translate_fraction: f64,
) -> ImagePatch {
    let rot = max_rotation_deg.abs();
    let tr = max_translate_fraction.abs();
    let theta = rng.uniform(-rot, rot).to_radians();
    let tx = rng.uniform(-tr, tr) * img.width as f64;
    let ty = rng.uniform(-tr, tr) * img.height as f64;
    apply_affine(img, theta, tx, ty)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub strength: Strength,
    #[serde(default = "default_true")]
    pub random_rotation: bool,
    #[serde(default = "default_flip")]
    pub flip_probability: f64,
    #[serde(default = "default_color")]
    pub color_jitter_magnitude: f64,
    #[serde(default = "default_alpha")]
    pub hed_jitter_alpha: f64,
    #[serde(default = "default_beta")]
    pub hed_jitter_beta: f64,
    #[serde(default = "default_crop_range")]
    pub crop_fraction_range: (f64, f64),
    #[serde(default = "default_crop_mode")]
    pub crop_mode: CropMode,
    #[serde(default = "default_rotation")]
    pub affine_max_rotation_deg: f64,
    #[serde(default = "default_translate")]
    pub affine_max_translate_fraction: f64,
}

fn default_true() -> bool {
    true
}
fn default_flip() -> f64 {
    0.5
}
fn default_color() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    0.05
}
fn default_beta() -> f64 {
    0.01
}
fn default_crop_range() -> (f64, f64) {
    (0.5, 1.0)
}
fn default_crop_mode() -> CropMode {
    CropMode::Inception
}
fn default_rotation() -> f64 {
    10.0
}
fn default_translate() -> f64 {
    0.1
}

impl AugmentationPolicy {
    pub fn weak() -> Self {
        Self {
            strength: Strength::Weak,
            random_rotation: true,
            flip_probability: default_flip(),
            color_jitter_magnitude: default_color(),
            hed_jitter_alpha: default_alpha(),
            hed_jitter_beta: default_beta(),
            crop_fraction_range: default_crop_range(),
            crop_mode: default_crop_mode(),
            affine_max_rotation_deg: default_rotation(),
            affine_max_translate_fraction: default_translate(),
        }
    }

    pub fn strong() -> Self {
        Self {
            strength: Strength::Strong,
            ..Self::weak()
        }
    }

    /// A policy of the given strength that leaves every patch unchanged.
    pub fn identity(strength: Strength) -> Self {
        Self {
            strength,
            random_rotation: false,
            flip_probability: 0.0,
            color_jitter_magnitude: 0.0,
            hed_jitter_alpha: 0.0,
            hed_jitter_beta: 0.0,
            crop_fraction_range: (1.0, 1.0),
            crop_mode: CropMode::Center,
            affine_max_rotation_deg: 0.0,
            affine_max_translate_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mags = [
            self.color_jitter_magnitude,
            self.hed_jitter_alpha,
            self.hed_jitter_beta,
            self.affine_max_rotation_deg,
            self.affine_max_translate_fraction,
        ];
        if mags.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::Config(
                "augmentation magnitudes must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.crop_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("crop fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Augments image number `index` with its own sub-stream of `stream`, so
/// the result does not depend on which other images share the batch.
pub fn apply_policy(
    img: &ImagePatch,
    policy: &AugmentationPolicy,
    stream: &SeedStream,
    index: u64,
) -> Result<ImagePatch> {
    let mut rng = stream.derive(index);
    let mut out = if policy.random_rotation {
        let k = if img.height == img.width {
            rng.below(4) as u8
        } else {
            2 * rng.below(2) as u8
        };
        rotate90(img, k)?
    } else {
        img.clone()
    };
    if rng.bernoulli(policy.flip_probability) {
        out = flip(&out, FlipAxis::Horizontal);
    }
    if rng.bernoulli(policy.flip_probability) {
        out = flip(&out, FlipAxis::Vertical);
    }
    match policy.strength {
        Strength::Weak => {
            if policy.color_jitter_magnitude > 0.0 {
                out = color_jitter(&out, &mut rng, policy.color_jitter_magnitude);
            }
        }
        Strength::Strong => {
            if policy.hed_jitter_alpha > 0.0 || policy.hed_jitter_beta > 0.0 {
                out = hed_jitter(
                    &out,
                    &mut rng,
                    policy.hed_jitter_alpha,
                    policy.hed_jitter_beta,
                );
            }
            if policy.crop_fraction_range != (1.0, 1.0) {
                out = crop_resize(&out, &mut rng, policy.crop_fraction_range, policy.crop_mode)?;
            }
            if policy.affine_max_rotation_deg > 0.0 || policy.affine_max_translate_fraction > 0.0 {
                out = affine(
                    &out,
                    &mut rng,
                    policy.affine_max_rotation_deg,
                    policy.affine_max_translate_fraction,
                );
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    fn random_patch(h: usize, w: usize, seed: u64) -> ImagePatch {
        let mut rng = seeded_rng(seed);
        ImagePatch::new(h, w, (0..h * w * 3).map(|_| rng.unit()).collect()).unwrap()
    }

    fn max_diff(a: &ImagePatch, b: &ImagePatch) -> f64 {
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn gray(values: &[f64], h: usize, w: usize) -> ImagePatch {
        ImagePatch::new(h, w, values.iter().flat_map(|&v| [v, v, v]).collect()).unwrap()
    }

    #[test]
    fn rotate_half_turn_reverses() {
        let img = gray(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        assert_eq!(
            rotate90(&img, 2).unwrap(),
            gray(&[0.4, 0.3, 0.2, 0.1], 2, 2)
        );
        assert_eq!(rotate90(&img, 0).unwrap(), img);
    }

    #[test]
    fn rotate_quarter_is_counter_clockwise() {
        // top-right corner moves to top-left
        let img = gray(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        assert_eq!(
            rotate90(&img, 1).unwrap(),
            gray(&[0.2, 0.4, 0.1, 0.3], 2, 2)
        );
    }

    #[test]
    fn rotate_rejects_odd_turns_on_rectangles() {
        let img = random_patch(2, 3, 1);
        assert!(rotate90(&img, 1).is_err());
        assert!(rotate90(&img, 2).is_ok());
    }

    #[test]
    fn horizontal_flip_swaps_columns() {
        let img = gray(&[0.1, 0.9], 1, 2);
        assert_eq!(flip(&img, FlipAxis::Horizontal), gray(&[0.9, 0.1], 1, 2));
    }

    #[test]
    fn brightness_halves_constant_image() {
        let img = ImagePatch::filled(4, 4, [0.8; 3]);
        let f = ColorJitterFactors {
            brightness: 0.5,
            ..ColorJitterFactors::IDENTITY
        };
        let out = apply_color_jitter(&img, &f);
        assert!(out.pixels().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn zero_magnitude_color_jitter_is_identity() {
        let img = random_patch(6, 6, 2);
        let out = color_jitter(&img, &mut seeded_rng(3), 0.0);
        assert!(max_diff(&img, &out) < 1e-9);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = seeded_rng(4);
        for _ in 0..1000 {
            let p = [rng.unit(), rng.unit(), rng.unit()];
            let back = hsv_to_rgb(rgb_to_hsv(p));
            for k in 0..3 {
                assert!((p[k] - back[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn hed_matrix_inverse() {
        let (a, b) = (rgb_from_hed(), hed_from_rgb());
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn white_pixel_has_zero_density() {
        let hed = rgb_to_hed([1.0, 1.0, 1.0]);
        assert!(hed.iter().all(|v| v.abs() < 1e-15));
        let img = ImagePatch::filled(2, 2, [1.0; 3]);
        let f = HedJitterFactors {
            scale: [0.05, -0.05, 0.03],
            shift: [0.0; 3],
        };
        assert_eq!(apply_hed_jitter(&img, &f), img);
    }

    #[test]
    fn zero_hed_jitter_is_identity() {
        let img = random_patch(5, 5, 6);
        let out = hed_jitter(&img, &mut seeded_rng(1), 0.0, 0.0);
        assert!(max_diff(&img, &out) < 1e-6);
    }

    #[test]
    fn full_center_crop_is_identity() {
        let img = random_patch(8, 8, 7);
        let out = crop_resize(&img, &mut seeded_rng(0), (1.0, 1.0), CropMode::Center).unwrap();
        assert!(max_diff(&img, &out) < 1e-9);
    }

    #[test]
    fn crop_of_constant_is_constant() {
        let img = ImagePatch::filled(9, 9, [0.2, 0.5, 0.7]);
        for mode in [CropMode::Inception, CropMode::Center] {
            let out = crop_resize(&img, &mut seeded_rng(5), (0.3, 0.9), mode).unwrap();
            assert!(max_diff(&img, &out) < 1e-12);
        }
        assert!(crop_resize(&img, &mut seeded_rng(5), (0.0, 0.9), CropMode::Center).is_err());
    }

    #[test]
    fn tiny_crops_clamp_to_two_pixels() {
        let b = sample_crop_box(16, 16, &mut seeded_rng(1), (0.01, 0.01), CropMode::Center);
        assert_eq!((b.height, b.width), (2, 2));
    }

    #[test]
    fn checkerboard_upscale_matches_closed_form() {
        // 2x2 [[0,1],[1,0]] to 4x4 with half-pixel centers: source
        // coordinates are -0.25, 0.25, 0.75, 1.25, clamped to [0, 1], so the
        // per-axis weights toward index 1 are 0, 0.25, 0.75, 1.
        let img = gray(&[0.0, 1.0, 1.0, 0.0], 2, 2);
        let out = resize_bilinear(&img, 4, 4);
        let w = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            for c in 0..4 {
                let (fy, fx) = (w[r], w[c]);
                let expected = (1.0 - fy) * fx + fy * (1.0 - fx);
                assert!((out.rgb(r, c)[0] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_affine_is_identity() {
        let img = random_patch(7, 7, 8);
        assert!(max_diff(&img, &apply_affine(&img, 0.0, 0.0, 0.0)) < 1e-9);
        let out = affine(&img, &mut seeded_rng(2), 0.0, 0.0);
        assert!(max_diff(&img, &out) < 1e-9);
    }

    #[test]
    fn affine_of_constant_is_constant() {
        let img = ImagePatch::filled(8, 8, [0.3, 0.6, 0.9]);
        let out = affine(&img, &mut seeded_rng(2), 25.0, 0.2);
        assert!(max_diff(&img, &out) < 1e-12);
    }

    #[test]
    fn integer_translation_shifts_delta() {
        let mut vals = vec![0.0; 64];
        vals[3 * 8 + 2] = 1.0;
        let img = gray(&vals, 8, 8);
        let out = apply_affine(&img, 0.0, 2.0, 1.0);
        for r in 0..8 {
            for c in 0..8 {
                let expected = if (r, c) == (4, 4) { 1.0 } else { 0.0 };
                assert!((out.rgb(r, c)[0] - expected).abs() < 1e-12, "({r},{c})");
            }
        }
    }

    #[test]
    fn degenerate_policy_is_identity() {
        let img = random_patch(8, 8, 9);
        for s in [Strength::Weak, Strength::Strong] {
            let out =
                apply_policy(&img, &AugmentationPolicy::identity(s), &seeded_rng(1), 0).unwrap();
            assert!(max_diff(&img, &out) < 1e-6);
        }
    }

    #[test]
    fn policy_is_deterministic_per_index() {
        let img = random_patch(8, 8, 10);
        let stream = seeded_rng(77);
        let p = AugmentationPolicy::strong();
        let a = apply_policy(&img, &p, &stream, 5).unwrap();
        let b = apply_policy(&img, &p, &stream, 5).unwrap();
        assert_eq!(a, b);
        let c = apply_policy(&img, &p, &stream, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weak_policy_keeps_dimensions() {
        let img = random_patch(8, 8, 11);
        let stream = seeded_rng(3);
        for i in 0..100 {
            let out = apply_policy(&img, &AugmentationPolicy::weak(), &stream, i).unwrap();
            assert_eq!((out.height(), out.width()), (8, 8));
            assert_eq!(out.pixels().len(), 8 * 8 * 3);
        }
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentationPolicy::weak();
        assert!(p.validate().is_ok());
        p.crop_fraction_range = (0.0, 1.0);
        assert!(p.validate().is_err());
        p = AugmentationPolicy::weak();
        p.hed_jitter_alpha = -0.1;
        assert!(p.validate().is_err());
    }
}
