use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::error::{Error, Result};

/// Explicit, non-negative, normalized convolution kernel with odd sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    height: usize,
    width: usize,
    weights: Vec<f32>,
}

impl ConvKernel {
    pub fn new(height: usize, width: usize, weights: Vec<f32>) -> Result<Self> {
        if height % 2 == 0 || width % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel sides must be odd, got {height}×{width}"
            )));
        }
        if weights.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}×{width} kernel needs {} weights, got {}",
                height * width,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("kernel weights must be finite and ≥ 0".into()));
        }
        let sum: f64 = weights.iter().map(|w| *w as f64).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "kernel weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self { height, width, weights })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        if size % 2 == 1 {
            w[size * size / 2] = 1.0;
        }
        Self::new(size, size, w)
    }

    pub fn uniform(size: usize) -> Result<Self> {
        let n = size * size;
        Self::new(size, size, vec![1.0 / n as f32; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.weights[y * self.width + x]
    }
}

/// Per-channel 2-D correlation with edge-clamped padding; output has the
/// input's shape.
pub fn convolve_blur(x: &ImageTensor, k: &ConvKernel) -> Result<ImageTensor> {
    let (c, h, w) = x.shape();
    if k.height > h || k.width > w {
        return Err(Error::Shape(format!(
            "{}×{} kernel larger than {h}×{w} image",
            k.height, k.width
        )));
    }
    let (ry, rx) = (k.height / 2, k.width / 2);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f64;
                for a in 0..k.height {
                    let sy = clamp(y as isize + a as isize - ry as isize, h);
                    for b in 0..k.width {
                        let wgt = k.weights[a * k.width + b];
                        if wgt == 0.0 {
                            continue;
                        }
                        let sx = clamp(xx as isize + b as isize - rx as isize, w);
                        acc += wgt as f64 * x.get(ch, sy, sx) as f64;
                    }
                }
                out[(ch * h + y) * w + xx] = acc as f32;
            }
        }
    }
    ImageTensor::new(c, h, w, out)
}

/// Random-walk trajectory in kernel coordinates `(row, col)`, fitted so its
/// bounding box is centred and its longer side spans `size - 3` pixels.
///
/// Recipe, drawn from `ChaCha8Rng::seed_from_u64(seed)`:
/// 1. heading `θ = 2π·u`, `u ~ U[0,1)`;
/// 2. for each further point, after the first segment the heading turns by
///    `0.7·n`, `n ~ N(0,1)`, then a step of length `0.5 + u` is taken along
///    `(sin θ, cos θ)`.
pub fn motion_trajectory(seed: u64, size: usize, steps: usize) -> Result<Vec<(f64, f64)>> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and ≥ 3, got {size}"
        )));
    }
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 trajectory points, got {steps}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heading = rng.random::<f64>() * std::f64::consts::TAU;
    let mut pts = vec![(0.0f64, 0.0f64)];
    for i in 1..steps {
        if i > 1 {
            heading += 0.7 * rng.sample::<f64, _>(StandardNormal);
        }
        let len = 0.5 + rng.random::<f64>();
        let (py, px) = pts[i - 1];
        pts.push((py + len * heading.sin(), px + len * heading.cos()));
    }
    let (mut ymin, mut ymax, mut xmin, mut xmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(y, x) in &pts {
        ymin = ymin.min(y);
        ymax = ymax.max(y);
        xmin = xmin.min(x);
        xmax = xmax.max(x);
    }
    let span = (ymax - ymin).max(xmax - xmin);
    let scale = if span > 0.0 { (size - 3) as f64 / span } else { 0.0 };
    let centre = (size - 1) as f64 / 2.0;
    let (cy, cx) = ((ymin + ymax) / 2.0, (xmin + xmax) / 2.0);
    Ok(pts
        .into_iter()
        .map(|(y, x)| (centre + (y - cy) * scale, centre + (x - cx) * scale))
        .collect())
}

/// Seeded motion-blur kernel: the trajectory of [`motion_trajectory`] is
/// rasterized with bilinear splatting, smoothed by a 3×3 box and normalized.
pub fn generate_motion_kernel(seed: u64, size: usize, steps: usize) -> Result<ConvKernel> {
    let pts = motion_trajectory(seed, size, steps)?;
    let mut grid = vec![0.0f64; size * size];
    let mut splat = |y: f64, x: f64, mass: f64| {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (iy, ix) = (y0 as isize + dy, x0 as isize + dx);
                if iy >= 0 && ix >= 0 && (iy as usize) < size && (ix as usize) < size {
                    grid[iy as usize * size + ix as usize] += mass * wy * wx;
                }
            }
        }
    };
    const SPACING: f64 = 0.1;
    for seg in pts.windows(2) {
        let ((y0, x0), (y1, x1)) = (seg[0], seg[1]);
        let len = ((y1 - y0).powi(2) + (x1 - x0).powi(2)).sqrt();
        let samples = ((len / SPACING).ceil() as usize).max(1);
        for s in 0..samples {
            let t = (s as f64 + 0.5) / samples as f64;
            splat(
                y0 + t * (y1 - y0),
                x0 + t * (x1 - x0),
                len.max(SPACING) / samples as f64,
            );
        }
    }
    let mut smooth = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (sy, sx) = (y as isize + dy, x as isize + dx);
                    if sy >= 0 && sx >= 0 && (sy as usize) < size && (sx as usize) < size {
                        acc += grid[sy as usize * size + sx as usize];
                    }
                }
            }
            smooth[y * size + x] = acc / 9.0;
        }
    }
    let total: f64 = smooth.iter().sum();
    let weights = smooth.iter().map(|v| (v / total) as f32).collect();
    ConvKernel::new(size, size, weights)
}
