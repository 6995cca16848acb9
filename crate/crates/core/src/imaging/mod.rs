//! Image containers, PNG I/O, quality metrics, the explicit-convolution blur
//! oracle and synthetic motion kernels.

mod blur;
mod dataset;
mod io;
mod procedural;

pub use blur::{convolve_blur, generate_motion_kernel, motion_trajectory, ConvKernel};
pub use dataset::{kernel_index_from_id, load_dataset, save_dataset, synthesize_dataset, Pair, PairedDataset};
pub use io::{load_image, save_image};
pub use procedural::procedural_image;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// A `channels × height × width` image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {channels}×{height}×{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}×{height}×{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    /// Sizes accepted by the networks: both sides ≥ 8 and divisible by 4.
    pub fn check_network_size(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Shape(format!(
                "image {}×{} must be at least 8×8 with sides divisible by 4",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone()).expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        Self::new(c, h, w, t.data().to_vec())
    }

    pub(crate) fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.same_shape(b, "mse")?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| {
            let d = *p as f64 - *q as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio with peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}
