//! Synthetic desk-scale dataset generator.
//!
//! Stands in for the real ultrasound corpus so the whole pipeline is
//! verifiable without external data. Class designs keep the texture streams
//! ambiguous between the two mass classes while the boundary carries the
//! discriminative signal:
//!
//! * class 0 ("benign-like"): a smooth bright ellipse with a crisp, sharp
//!   boundary on a speckled background;
//! * class 1 ("malignant-like"): an irregular radial polygon with a blurred
//!   boundary and a dark column beneath the mass — the interior brightness
//!   range matches class 0, so intensity alone does not separate them;
//! * class 2 ("normal-like"): pure speckle background.
//!
//! Every per-image parameter is drawn from a stream derived from
//! (seed, class, index), so generation is reproducible item by item.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::aug::Image;
use crate::data::{DatasetItem, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};

/// Generate `n_per_class` images per class at side `s` (divisible by 16).
pub fn generate_synthetic(n_per_class: [usize; 3], s: usize, seed: u64) -> Result<LabeledDataset> {
    if s % 16 != 0 || s == 0 {
        return Err(Error::Config(format!(
            "synthetic image side must be a positive multiple of 16, got {s}"
        )));
    }
    if n_per_class.iter().any(|&n| n == 0) {
        return Err(Error::Config(format!(
            "every class needs at least one sample, got {n_per_class:?}"
        )));
    }
    let mut items = Vec::new();
    for (label, &count) in n_per_class.iter().enumerate() {
        for index in 0..count {
            let id = format!("c{label}_{index:04}");
            let mut rng = rng_for(seed, "synth", &[label as u64, index as u64]);
            let image = match label {
                0 => benign_like(s, &id, &mut rng)?,
                1 => malignant_like(s, &id, &mut rng)?,
                _ => normal_like(s, &id, &mut rng)?,
            };
            items.push(DatasetItem { image, label, id });
        }
    }
    LabeledDataset::from_items(items)
}

fn speckled_background(s: usize, rng: &mut Rng) -> Vec<f64> {
    let base: f64 = rng.gen_range(70.0..110.0);
    let sigma = rng.gen_range(10.0..18.0);
    let normal = Normal::new(0.0, sigma).expect("positive std");
    (0..s * s).map(|_| (base + normal.sample(rng)).clamp(0.0, 255.0)).collect()
}

fn normal_like(s: usize, id: &str, rng: &mut Rng) -> Result<Image> {
    Image::new(s, s, speckled_background(s, rng), id)
}

struct MassGeometry {
    cx: f64,
    cy: f64,
    /// Radius as a function of polar angle, in pixels.
    radius: Box<dyn Fn(f64) -> f64>,
}

impl MassGeometry {
    /// Signed distance proxy: pixel radius minus boundary radius at the
    /// pixel's angle (negative inside).
    fn signed_dist(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let r = (dx * dx + dy * dy).sqrt();
        let phi = dy.atan2(dx);
        r - (self.radius)(phi)
    }
}

fn benign_like(s: usize, id: &str, rng: &mut Rng) -> Result<Image> {
    let mut pixels = speckled_background(s, rng);
    let sf = s as f64;
    let cx = rng.gen_range(0.35..0.65) * sf;
    let cy = rng.gen_range(0.35..0.65) * sf;
    let a = rng.gen_range(0.14..0.26) * sf;
    let b = rng.gen_range(0.14..0.26) * sf;
    let tilt = rng.gen_range(0.0..std::f64::consts::PI);
    let delta = rng.gen_range(45.0..85.0);
    let (sin, cos) = tilt.sin_cos();
    // crisp boundary: hard membership test per pixel
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if (u / a) * (u / a) + (v / b) * (v / b) <= 1.0 {
                let p = &mut pixels[y * s + x];
                *p = (*p + delta).clamp(0.0, 255.0);
            }
        }
    }
    Image::new(s, s, pixels, id)
}

fn malignant_like(s: usize, id: &str, rng: &mut Rng) -> Result<Image> {
    let mut pixels = speckled_background(s, rng);
    let sf = s as f64;
    let cx = rng.gen_range(0.35..0.65) * sf;
    let cy = rng.gen_range(0.30..0.55) * sf;
    let r0 = rng.gen_range(0.14..0.26) * sf;
    let delta = rng.gen_range(45.0..85.0);
    // irregular radial harmonics
    let harmonics: Vec<(f64, f64, f64)> = (2..=6)
        .map(|k| (k as f64, rng.gen_range(0.04..0.16), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let geo = MassGeometry {
        cx,
        cy,
        radius: Box::new(move |phi| {
            let wobble: f64 =
                harmonics.iter().map(|&(k, a, p)| a * (k * phi + p).cos()).sum();
            r0 * (1.0 + wobble).max(0.3)
        }),
    };
    // blurred boundary: logistic transition a few pixels wide
    let softness = rng.gen_range(1.8..3.2) * sf / 64.0;
    let mut lowest_in_mass = vec![None::<usize>; s];
    for y in 0..s {
        for x in 0..s {
            let d = geo.signed_dist(x as f64, y as f64);
            let mask = 1.0 / (1.0 + (d / softness).exp());
            if mask > 0.5 {
                lowest_in_mass[x] = Some(y);
            }
            if mask > 1e-4 {
                let p = &mut pixels[y * s + x];
                *p = (*p + delta * mask).clamp(0.0, 255.0);
            }
        }
    }
    // posterior acoustic shadow: darken the columns beneath the mass
    let alpha = rng.gen_range(0.45..0.7);
    for x in 0..s {
        if let Some(y0) = lowest_in_mass[x] {
            for y in y0 + 1..s {
                let p = &mut pixels[y * s + x];
                *p = (*p * alpha).clamp(0.0, 255.0);
            }
        }
    }
    Image::new(s, s, pixels, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_ratio_by_construction() {
        let ds = generate_synthetic([200, 100, 60], 32, 9).unwrap();
        assert_eq!(ds.class_counts(), [200, 100, 60]);
        assert_eq!(ds.items().len(), 360);
        let ratio0 = 200.0 / 60.0;
        let ratio1 = 100.0 / 60.0;
        assert!((ratio0 - 3.3f64).abs() < 0.1 && (ratio1 - 1.6) < 0.1);
    }

    #[test]
    fn same_seed_bit_identical_images() {
        let a = generate_synthetic([3, 3, 3], 32, 77).unwrap();
        let b = generate_synthetic([3, 3, 3], 32, 77).unwrap();
        for (x, y) in a.items().iter().zip(b.items()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image.pixels(), y.image.pixels());
        }
        let c = generate_synthetic([3, 3, 3], 32, 78).unwrap();
        assert_ne!(
            a.items()[0].image.pixels(),
            c.items()[0].image.pixels()
        );
    }

    #[test]
    fn rejects_bad_side_and_zero_counts() {
        assert!(generate_synthetic([1, 1, 1], 30, 0).is_err());
        assert!(generate_synthetic([1, 0, 1], 32, 0).is_err());
    }

    /// Raw (unnormalized) Sobel energy, written independently of the edge
    /// module as a measurement oracle.
    fn raw_sobel_energy(img: &Image) -> f64 {
        let (w, h) = (img.width(), img.height());
        let at = |x: isize, y: isize| -> f64 {
            let xc = x.clamp(0, w as isize - 1) as usize;
            let yc = y.clamp(0, h as isize - 1) as usize;
            img.pixels()[yc * w + xc] / 255.0
        };
        let mut total = 0.0;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = (at(x + 1, y - 1) - at(x - 1, y - 1))
                    + 2.0 * (at(x + 1, y) - at(x - 1, y))
                    + (at(x + 1, y + 1) - at(x - 1, y + 1));
                let gy = (at(x - 1, y + 1) - at(x - 1, y - 1))
                    + 2.0 * (at(x, y + 1) - at(x, y - 1))
                    + (at(x + 1, y + 1) - at(x + 1, y - 1));
                total += (gx * gx + gy * gy).sqrt();
            }
        }
        total / (w * h) as f64
    }

    #[test]
    fn benign_edge_energy_exceeds_normal_background() {
        let ds = generate_synthetic([100, 1, 100], 64, 123).unwrap();
        let mean_energy = |label: usize| -> f64 {
            let items: Vec<_> = ds.items().iter().filter(|i| i.label == label).collect();
            items.iter().map(|i| raw_sobel_energy(&i.image)).sum::<f64>() / items.len() as f64
        };
        let benign = mean_energy(0);
        let normal = mean_energy(2);
        assert!(
            benign > normal,
            "benign edge energy {benign} should exceed normal {normal}"
        );
    }

    #[test]
    fn pixels_stay_in_intensity_range() {
        let ds = generate_synthetic([5, 5, 5], 48, 3).unwrap();
        for item in ds.items() {
            assert!(item.image.pixels().iter().all(|&p| (0.0..=255.0).contains(&p)));
        }
    }
}
