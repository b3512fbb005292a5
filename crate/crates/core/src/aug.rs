//! Training-time augmentation of ultrasound-like intensity images.
//!
//! Three physics-motivated perturbations model acquisition artefacts:
//! additive Gaussian speckle noise, a multiplicative dark column band
//! (acoustic shadowing), and a linear row-wise gain ramp (operator
//! time-gain compensation). Exactly one of the three is chosen uniformly
//! per training image. Geometric augmentation (flip / small rotation /
//! elastic warp) is applied to the shared input before the two model
//! streams split; the physics perturbations touch only the texture stream.
//!
//! All augmentations are pure functions of (image, seed): parallel callers
//! can never change a result. Intensities are clamped back to [0, 255]
//! after every physics augmentation, mirroring 8-bit acquisition.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Single-channel intensity grid; values live in [0, 255] stored as f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    /// Source identifier (file stem or synthetic id).
    pub id: String,
}

pub const MIN_IMAGE_SIDE: usize = 8;

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, id: impl Into<String>) -> Result<Self> {
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(Error::Dimension(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels, id: id.into() })
    }

    pub fn filled(width: usize, height: usize, value: f64, id: impl Into<String>) -> Result<Self> {
        Image::new(width, height, vec![value; width * height], id)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Clamped pixel access used by the interpolating resamplers
    /// (edge-replicate padding).
    fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[yc * self.width + xc]
    }

    /// Bilinear sample at fractional source coordinates with edge replication.
    fn sample_bilinear(&self, sx: f64, sy: f64) -> f64 {
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let p00 = self.get_clamped(x0, y0);
        let p10 = self.get_clamped(x0 + 1, y0);
        let p01 = self.get_clamped(x0, y0 + 1);
        let p11 = self.get_clamped(x0 + 1, y0 + 1);
        let top = p00 + fx * (p10 - p00);
        let bot = p01 + fx * (p11 - p01);
        top + fy * (bot - top)
    }
}

/// Augmentation hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Speckle noise std range as a fraction of 255.
    pub sigma_s_range: (f64, f64),
    /// Shadow band width as a fraction of image width.
    pub shadow_width_frac: f64,
    /// Shadow attenuation factor range.
    pub alpha_range: (f64, f64),
    /// Gain ramp start factor range.
    pub gmin_range: (f64, f64),
    /// Gain ramp end factor range.
    pub gmax_range: (f64, f64),
    /// Probability that the physics augmentation fires per training image.
    pub physics_prob: f64,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Elastic displacement magnitude in pixels (at the reference 224 side;
    /// scaled by side/224 at other resolutions).
    pub elastic_alpha_px: f64,
    /// Gaussian smoothing of the elastic displacement field, in pixels.
    pub elastic_sigma_px: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            sigma_s_range: (0.05, 0.15),
            shadow_width_frac: 0.15,
            alpha_range: (0.2, 0.5),
            gmin_range: (0.6, 0.9),
            gmax_range: (1.0, 1.3),
            physics_prob: 1.0,
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            elastic_alpha_px: 8.0,
            elastic_sigma_px: 6.0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("sigma_s_range", self.sigma_s_range),
            ("alpha_range", self.alpha_range),
            ("gmin_range", self.gmin_range),
            ("gmax_range", self.gmax_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must satisfy low <= high, got ({lo}, {hi})"
                )));
            }
        }
        for (name, p) in [("physics_prob", self.physics_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.shadow_width_frac <= 0.0 || self.shadow_width_frac > 1.0 {
            return Err(Error::Config(format!(
                "shadow_width_frac must be in (0, 1], got {}",
                self.shadow_width_frac
            )));
        }
        Ok(())
    }
}

/// ImageNet channel statistics used by `normalize_for_backbone`.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Uniform draw that tolerates a degenerate (lo == hi) range.
fn draw_uniform(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    if lo == hi {
        lo
    } else {
        Uniform::new(lo, hi).sample(rng)
    }
}

static PHYSICS_CALLS: AtomicU64 = AtomicU64::new(0);

/// How many times `apply_physics` has run in this process. The trainer
/// asserts this does not move during validation or test passes.
pub fn physics_invocation_count() -> u64 {
    PHYSICS_CALLS.load(Ordering::Relaxed)
}

/// Additive Gaussian speckle noise with std `sigma_s * 255`, clamped.
pub fn speckle(img: &Image, sigma_s: f64, rng: &mut Rng) -> Result<Image> {
    if !(0.05..=0.15).contains(&sigma_s) {
        return Err(Error::Config(format!(
            "speckle sigma_s must be in [0.05, 0.15], got {sigma_s}"
        )));
    }
    let normal = Normal::new(0.0, sigma_s * 255.0).expect("positive std");
    let mut out = img.clone();
    for p in out.pixels.iter_mut() {
        *p = (*p + normal.sample(rng)).clamp(0.0, 255.0);
    }
    Ok(out)
}

/// Multiply a contiguous column band of width floor(0.15 W) by a factor
/// drawn from U(0.2, 0.5); columns outside the band are untouched.
pub fn shadow(img: &Image, cfg: &AugConfig, rng: &mut Rng) -> Result<Image> {
    let w = img.width;
    let band = ((cfg.shadow_width_frac * w as f64).floor() as usize).max(1);
    let x0 = rng.gen_range(0..=w - band - 1);
    let alpha = draw_uniform(cfg.alpha_range.0, cfg.alpha_range.1, rng);
    let mut out = img.clone();
    for y in 0..img.height {
        for x in x0..=x0 + band {
            let p = &mut out.pixels[y * w + x];
            *p = (*p * alpha).clamp(0.0, 255.0);
        }
    }
    Ok(out)
}

/// Row-wise linear gain ramp g(y) = g_min + (g_max - g_min) * y / H, clamped.
pub fn gain(img: &Image, cfg: &AugConfig, rng: &mut Rng) -> Result<Image> {
    let g_min = draw_uniform(cfg.gmin_range.0, cfg.gmin_range.1, rng);
    let g_max = draw_uniform(cfg.gmax_range.0, cfg.gmax_range.1, rng);
    Ok(gain_with(img, g_min, g_max))
}

/// Deterministic core of `gain`, exposed so tests can force degenerate draws.
pub fn gain_with(img: &Image, g_min: f64, g_max: f64) -> Image {
    let h = img.height as f64;
    let mut out = img.clone();
    for y in 0..img.height {
        let g = g_min + (g_max - g_min) * y as f64 / h;
        for x in 0..img.width {
            let p = &mut out.pixels[y * img.width + x];
            *p = (*p * g).clamp(0.0, 255.0);
        }
    }
    out
}

/// Which physics augmentation was applied (recorded in augment manifests).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhysicsKind {
    Speckle,
    Shadow,
    Gain,
    None,
}

impl PhysicsKind {
    pub fn name(&self) -> &'static str {
        match self {
            PhysicsKind::Speckle => "speckle",
            PhysicsKind::Shadow => "shadow",
            PhysicsKind::Gain => "gain",
            PhysicsKind::None => "none",
        }
    }
}

/// Pick one of {speckle, shadow, gain} uniformly and apply it. With
/// `physics_prob < 1` the whole step is skipped with the complementary
/// probability, covering the reading where no augmentation may fire.
pub fn apply_physics(img: &Image, cfg: &AugConfig, rng: &mut Rng) -> Result<(Image, PhysicsKind)> {
    PHYSICS_CALLS.fetch_add(1, Ordering::Relaxed);
    if cfg.physics_prob < 1.0 && rng.gen::<f64>() >= cfg.physics_prob {
        return Ok((img.clone(), PhysicsKind::None));
    }
    match rng.gen_range(0..3u32) {
        0 => {
            let sigma = draw_uniform(cfg.sigma_s_range.0, cfg.sigma_s_range.1, rng);
            Ok((speckle(img, sigma, rng)?, PhysicsKind::Speckle))
        }
        1 => Ok((shadow(img, cfg, rng)?, PhysicsKind::Shadow)),
        _ => Ok((gain(img, cfg, rng)?, PhysicsKind::Gain)),
    }
}

/// Horizontal flip, rotation by U(-max_deg, +max_deg) with bilinear
/// resampling and edge replication, then an elastic warp.
pub fn apply_geometric(img: &Image, cfg: &AugConfig, rng: &mut Rng) -> Result<Image> {
    let mut out = if rng.gen::<f64>() < cfg.flip_prob { flip_horizontal(img) } else { img.clone() };
    let angle_deg = if cfg.max_rotation_deg > 0.0 {
        draw_uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, rng)
    } else {
        0.0
    };
    out = rotate_bilinear(&out, angle_deg);
    let side_scale = out.width.max(out.height) as f64 / 224.0;
    let alpha = cfg.elastic_alpha_px * side_scale;
    let sigma = (cfg.elastic_sigma_px * side_scale).max(0.5);
    out = elastic_warp(&out, alpha, sigma, rng);
    Ok(out)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.pixels[y * img.width + x] = img.pixels[y * img.width + (img.width - 1 - x)];
        }
    }
    out
}

/// Rotate about the image center. Angle 0 reproduces the input exactly:
/// source coordinates land on the integer grid and bilinear weights collapse.
pub fn rotate_bilinear(img: &Image, angle_deg: f64) -> Image {
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            out.pixels[y * img.width + x] = img.sample_bilinear(sx, sy);
        }
    }
    out
}

/// Elastic deformation: per-pixel uniform noise in [-1, 1] is Gaussian
/// smoothed (separably) with std `sigma_px`, rescaled so the largest
/// displacement magnitude equals `alpha_px`, then used to resample the image
/// bilinearly. `alpha_px == 0` is the identity.
pub fn elastic_warp(img: &Image, alpha_px: f64, sigma_px: f64, rng: &mut Rng) -> Image {
    let n = img.width * img.height;
    let mut dx: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let mut dy: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    if alpha_px == 0.0 {
        return img.clone();
    }
    gaussian_smooth(&mut dx, img.width, img.height, sigma_px);
    gaussian_smooth(&mut dy, img.width, img.height, sigma_px);
    let max_mag = dx
        .iter()
        .zip(&dy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let scale = alpha_px / max_mag;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let i = y * img.width + x;
            let sx = x as f64 + dx[i] * scale;
            let sy = y as f64 + dy[i] * scale;
            out.pixels[i] = img.sample_bilinear(sx, sy);
        }
    }
    out
}

/// Separable Gaussian blur with edge replication; kernel radius 3 sigma.
fn gaussian_smooth(field: &mut [f64], w: usize, h: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 * inv).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let sx = (x as isize + j as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * field[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let sy = (y as isize + j as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            field[y * w + x] = acc;
        }
    }
}

/// Bilinear resize to `side x side` (identity when already that size).
pub fn resize(img: &Image, side: usize) -> Result<Image> {
    if side < MIN_IMAGE_SIDE {
        return Err(Error::Dimension(format!(
            "resize target must be at least {MIN_IMAGE_SIDE}, got {side}"
        )));
    }
    if img.width == side && img.height == side {
        return Ok(img.clone());
    }
    let sx_scale = img.width as f64 / side as f64;
    let sy_scale = img.height as f64 / side as f64;
    let mut pixels = vec![0.0; side * side];
    for y in 0..side {
        // half-pixel convention: equal sizes map to the identity
        let sy = (y as f64 + 0.5) * sy_scale - 0.5;
        for x in 0..side {
            let sx = (x as f64 + 0.5) * sx_scale - 0.5;
            pixels[y * side + x] = img.sample_bilinear(sx, sy);
        }
    }
    Image::new(side, side, pixels, img.id.clone())
}

/// Scale to [0, 1], replicate the single channel to three, and normalize
/// each with the ImageNet statistics; output shape (3, S, S).
pub fn normalize_for_backbone(img: &Image) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let (mu, sd) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        for (i, &p) in img.pixels.iter().enumerate() {
            data[c * h * w + i] = (p / 255.0 - mu) / sd;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn mid_gray(side: usize) -> Image {
        Image::filled(side, side, 128.0, "gray").unwrap()
    }

    #[test]
    fn speckle_std_near_sigma_on_mid_gray() {
        let img = mid_gray(224);
        let mut rng = rng_for(100, "aug-speckle", &[]);
        let out = speckle(&img, 0.05, &mut rng).unwrap();
        let resid: Vec<f64> =
            out.pixels().iter().zip(img.pixels()).map(|(a, b)| a - b).collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var =
            resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / resid.len() as f64;
        let std = var.sqrt();
        let target = 0.05 * 255.0;
        assert!(
            (std - target).abs() / target < 0.05,
            "sample std {std} vs target {target}"
        );
    }

    #[test]
    fn speckle_deterministic_and_clamped() {
        let img = mid_gray(32);
        let a = speckle(&img, 0.1, &mut rng_for(7, "s", &[])).unwrap();
        let b = speckle(&img, 0.1, &mut rng_for(7, "s", &[])).unwrap();
        assert_eq!(a.pixels(), b.pixels());

        let bright = Image::filled(32, 32, 255.0, "br").unwrap();
        let out = speckle(&bright, 0.15, &mut rng_for(8, "s", &[])).unwrap();
        assert!(out.pixels().iter().all(|&p| (0.0..=255.0).contains(&p)));
    }

    #[test]
    fn speckle_rejects_out_of_range_sigma() {
        let img = mid_gray(16);
        let mut rng = rng_for(1, "s", &[]);
        assert!(speckle(&img, 0.2, &mut rng).is_err());
        assert!(speckle(&img, 0.01, &mut rng).is_err());
    }

    #[test]
    fn shadow_band_width_and_untouched_columns() {
        let img = mid_gray(224);
        let cfg = AugConfig::default();
        let out = shadow(&img, &cfg, &mut rng_for(9, "sh", &[])).unwrap();
        // width = floor(0.15 * 224) = 33
        let mut changed_cols = Vec::new();
        for x in 0..224 {
            if (0..224).any(|y| out.get(x, y) != img.get(x, y)) {
                changed_cols.push(x);
            }
        }
        assert_eq!(changed_cols.len(), 34); // x0 ..= x0 + 33 inclusive
        for pair in changed_cols.windows(2) {
            assert_eq!(pair[1], pair[0] + 1);
        }
        for x in 0..224 {
            if !changed_cols.contains(&x) {
                for y in 0..224 {
                    assert_eq!(out.get(x, y).to_bits(), img.get(x, y).to_bits());
                }
            }
        }
    }

    #[test]
    fn shadow_band_mean_is_alpha_times_input_mean() {
        // non-constant image so the check is non-trivial
        let mut img = mid_gray(64);
        for (i, p) in img.pixels_mut().iter_mut().enumerate() {
            *p = 40.0 + (i % 97) as f64;
        }
        let cfg = AugConfig::default();
        let out = shadow(&img, &cfg, &mut rng_for(10, "sh", &[])).unwrap();
        // recover the band and alpha from the output itself
        let x0 = (0..64).find(|&x| out.get(x, 0) != img.get(x, 0)).unwrap();
        let alpha = out.get(x0, 0) / img.get(x0, 0);
        let band = (0.15f64 * 64.0).floor() as usize;
        let mut in_mean = 0.0;
        let mut out_mean = 0.0;
        let mut count = 0.0;
        for y in 0..64 {
            for x in x0..=x0 + band {
                in_mean += img.get(x, y);
                out_mean += out.get(x, y);
                count += 1.0;
            }
        }
        in_mean /= count;
        out_mean /= count;
        assert!(
            (out_mean - alpha * in_mean).abs() < 1e-9,
            "band mean {out_mean} vs alpha*mean {}",
            alpha * in_mean
        );
    }

    #[test]
    fn gain_row_zero_scaled_by_gmin_exactly() {
        let img = mid_gray(32);
        let out = gain_with(&img, 0.7, 1.2);
        for x in 0..32 {
            assert_eq!(out.get(x, 0).to_bits(), (128.0f64 * 0.7).to_bits());
        }
    }

    #[test]
    fn gain_profile_is_affine_with_expected_slope() {
        let img = Image::filled(64, 64, 100.0, "c").unwrap();
        let (g_min, g_max) = (0.8, 1.1);
        let out = gain_with(&img, g_min, g_max);
        let row_mean =
            |y: usize| -> f64 { (0..64).map(|x| out.get(x, y)).sum::<f64>() / 64.0 };
        let h = 64.0;
        let slope = (row_mean(63) - row_mean(0)) / 63.0;
        let expect_slope = (g_max - g_min) * 100.0 / h;
        assert!((slope - expect_slope).abs() < 1e-9);
        // extrapolated profile endpoints hit g_min and g_max
        assert!((row_mean(0) - g_min * 100.0).abs() < 1e-9);
        assert!((row_mean(0) + slope * h - g_max * 100.0).abs() < 1e-9);
    }

    #[test]
    fn gain_monotone_factors_and_degenerate_identity() {
        let img = mid_gray(16);
        let out = gain_with(&img, 0.6, 1.3);
        let row_mean =
            |img: &Image, y: usize| -> f64 { (0..16).map(|x| img.get(x, y)).sum::<f64>() / 16.0 };
        for y in 1..16 {
            assert!(row_mean(&out, y) >= row_mean(&out, y - 1));
        }
        let ident = gain_with(&img, 1.0, 1.0);
        assert_eq!(ident.pixels(), img.pixels());
    }

    #[test]
    fn physics_selection_frequencies_are_uniform() {
        let img = mid_gray(32);
        let cfg = AugConfig::default();
        let mut counts = [0u32; 3];
        for i in 0..30_000u64 {
            let mut rng = rng_for(555, "aug-select", &[i]);
            let (_, kind) = apply_physics(&img, &cfg, &mut rng).unwrap();
            match kind {
                PhysicsKind::Speckle => counts[0] += 1,
                PhysicsKind::Shadow => counts[1] += 1,
                PhysicsKind::Gain => counts[2] += 1,
                PhysicsKind::None => panic!("physics_prob = 1 never skips"),
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / 30_000.0;
            assert!((0.323..=0.343).contains(&f), "kind {i} frequency {f}");
        }
    }

    #[test]
    fn physics_same_seed_same_output() {
        let img = mid_gray(48);
        let cfg = AugConfig::default();
        let (a, ka) = apply_physics(&img, &cfg, &mut rng_for(3, "p", &[])).unwrap();
        let (b, kb) = apply_physics(&img, &cfg, &mut rng_for(3, "p", &[])).unwrap();
        assert_eq!(ka, kb);
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn physics_prob_zero_never_fires() {
        let img = mid_gray(16);
        let cfg = AugConfig { physics_prob: 0.0, ..AugConfig::default() };
        let (out, kind) = apply_physics(&img, &cfg, &mut rng_for(4, "p", &[])).unwrap();
        assert_eq!(kind, PhysicsKind::None);
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn double_flip_is_identity() {
        let mut img = mid_gray(16);
        for (i, p) in img.pixels_mut().iter_mut().enumerate() {
            *p = (i % 253) as f64;
        }
        let back = flip_horizontal(&flip_horizontal(&img));
        assert_eq!(back.pixels(), img.pixels());
    }

    #[test]
    fn zero_rotation_is_identity() {
        let mut img = mid_gray(16);
        for (i, p) in img.pixels_mut().iter_mut().enumerate() {
            *p = (i * 7 % 251) as f64;
        }
        let out = rotate_bilinear(&img, 0.0);
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn elastic_alpha_zero_is_identity() {
        let img = mid_gray(16);
        let out = elastic_warp(&img, 0.0, 4.0, &mut rng_for(5, "e", &[]));
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn elastic_warp_moves_pixels_within_range() {
        let mut img = mid_gray(32);
        for (i, p) in img.pixels_mut().iter_mut().enumerate() {
            *p = (i % 255) as f64;
        }
        let out = elastic_warp(&img, 3.0, 2.0, &mut rng_for(6, "e", &[]));
        assert!(out.pixels().iter().all(|&p| (0.0..=255.0).contains(&p)));
        assert_ne!(out.pixels(), img.pixels());
    }

    #[test]
    fn geometric_outputs_stay_in_range_and_deterministic() {
        let mut img = mid_gray(32);
        for (i, p) in img.pixels_mut().iter_mut().enumerate() {
            *p = (i % 256) as f64;
        }
        let cfg = AugConfig::default();
        let a = apply_geometric(&img, &cfg, &mut rng_for(11, "g", &[])).unwrap();
        let b = apply_geometric(&img, &cfg, &mut rng_for(11, "g", &[])).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        assert!(a.pixels().iter().all(|&p| (0.0..=255.0).contains(&p)));
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut img = mid_gray(32);
        for (i, p) in img.pixels_mut().iter_mut().enumerate() {
            *p = (i % 200) as f64;
        }
        let same = resize(&img, 32).unwrap();
        assert_eq!(same.pixels(), img.pixels());

        let constant = Image::filled(16, 16, 42.0, "c").unwrap();
        let up = resize(&constant, 24).unwrap();
        assert!(up.pixels().iter().all(|&p| (p - 42.0).abs() < 1e-12));
    }

    #[test]
    fn resize_2x_checkerboard_matches_hand_bilinear() {
        // An 8x8 checkerboard of 4x4 blocks [[0,255],[255,0]] resized to 16x16
        // behaves, around the block boundary, exactly like the 2x2 pattern
        // upsampled 2x: dst column 7 maps to src 3.25, column 8 to 3.75.
        let mut pixels = vec![0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                let block = (x / 4 + y / 4) % 2;
                pixels[y * 8 + x] = if block == 0 { 0.0 } else { 255.0 };
            }
        }
        let img = Image::new(8, 8, pixels, "cb").unwrap();
        let up = resize(&img, 16).unwrap();
        // row 0 of the upsample: interior of the top-left 0-block stays 0
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(15, 0), 255.0);
        // boundary columns blend with weights 0.25/0.75 (hand bilinear):
        // src x = 3.25 -> 0.75*I(3) + 0.25*I(4) = 0.25*255 = 63.75
        assert!((up.get(7, 0) - 63.75).abs() < 1e-12, "{}", up.get(7, 0));
        // src x = 3.75 -> 0.25*I(3) + 0.75*I(4) = 0.75*255 = 191.25
        assert!((up.get(8, 0) - 191.25).abs() < 1e-12, "{}", up.get(8, 0));
    }

    #[test]
    fn normalize_inverts_imagenet_affine() {
        let img = Image::filled(16, 16, 0.485 * 255.0, "n").unwrap();
        let t = normalize_for_backbone(&img);
        assert_eq!(t.shape(), &[3, 16, 16]);
        // channel 0 value (0.485) maps to 0
        assert!(t.data()[0].abs() < 1e-12);
    }

    #[test]
    fn normalize_replicates_gray_to_three_channels() {
        let img = Image::filled(16, 16, 100.0, "n").unwrap();
        let t = normalize_for_backbone(&img);
        let hw = 256;
        for i in 0..hw {
            let v0 = t.data()[i] * IMAGENET_STD[0] + IMAGENET_MEAN[0];
            let v1 = t.data()[hw + i] * IMAGENET_STD[1] + IMAGENET_MEAN[1];
            let v2 = t.data()[2 * hw + i] * IMAGENET_STD[2] + IMAGENET_MEAN[2];
            assert!((v0 - v1).abs() < 1e-12 && (v1 - v2).abs() < 1e-12);
        }
    }

    #[test]
    fn aug_config_validation() {
        assert!(AugConfig::default().validate().is_ok());
        let bad = AugConfig { physics_prob: 1.5, ..AugConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AugConfig { alpha_range: (0.5, 0.2), ..AugConfig::default() };
        assert!(bad.validate().is_err());
    }
}
