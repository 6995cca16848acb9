//! Fixtures shared by the benchmarks.

use blurspace::imaging::procedural_image;
use blurspace::{convolve_blur, generate_motion_kernel, ArchConfig, ImageTensor, Result};

/// A sharp/blurry pair of side `size` blurred by a 9×9 motion kernel.
pub fn blurred_pair(seed: u64, size: usize) -> Result<(ImageTensor, ImageTensor)> {
    let sharp = procedural_image(seed, ArchConfig::default().image_channels, size);
    let kernel = generate_motion_kernel(seed, 9, 64)?;
    let blurry = convolve_blur(&sharp, &kernel)?;
    Ok((sharp, blurry))
}
