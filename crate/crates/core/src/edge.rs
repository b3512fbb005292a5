//! Sobel boundary-map extraction feeding the second model stream.
//!
//! Deterministic, RNG-free. Gradients are computed by 3x3 cross-correlation
//! with the Sobel kernels under edge-replicate padding (zero padding would
//! fabricate a bright frame), the magnitude is sqrt(Gx^2 + Gy^2), and each
//! map is normalized by its own maximum so the edge CNN sees a gain-invariant
//! [0, 1] range. A constant image yields an all-zero map.

use crate::aug::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized edge-magnitude map; values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    magnitudes: Vec<f64>,
}

/// Guards the per-image max normalization on constant images.
const EPS_MAX: f64 = 1e-8;


impl EdgeMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.magnitudes[y * self.width + x]
    }
}

/// Sobel edge map of a grayscale image (intensities scaled to [0, 1] before
/// the gradient so channel baselines stay out of it).
pub fn sobel(img: &Image) -> Result<EdgeMap> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::Dimension(format!(
            "sobel needs at least a 3x3 image, got {w}x{h}"
        )));
    }
    let mut magnitudes = vec![0.0; w * h];
    let px = img.pixels();
    let sample = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        px[yc * w + xc] / 255.0
    };
    let mut max = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let v = |dx: isize, dy: isize| sample(xi + dx, yi + dy);
            // paired-difference form of the kernel taps: cancels exactly on
            // constant input, so the all-zero invariant holds bit for bit
            let gx = (v(1, -1) - v(-1, -1))
                + 2.0 * (v(1, 0) - v(-1, 0))
                + (v(1, 1) - v(-1, 1));
            let gy = (v(-1, 1) - v(-1, -1))
                + 2.0 * (v(0, 1) - v(0, -1))
                + (v(1, 1) - v(1, -1));
            let m = (gx * gx + gy * gy).sqrt();
            magnitudes[y * w + x] = m;
            max = max.max(m);
        }
    }
    let denom = max.max(EPS_MAX);
    for m in magnitudes.iter_mut() {
        *m /= denom;
    }
    Ok(EdgeMap { width: w, height: h, magnitudes })
}

/// Wrap an edge map as a single-channel tensor at the model resolution.
pub fn edge_to_tensor(e: &EdgeMap, side: usize) -> Result<Tensor> {
    if e.width != side || e.height != side {
        return Err(Error::Dimension(format!(
            "edge map is {}x{}, model expects {side}x{side}",
            e.width, e.height
        )));
    }
    Tensor::new(vec![1, side, side], e.magnitudes.clone())
}
