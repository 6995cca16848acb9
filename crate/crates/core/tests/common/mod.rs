//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use blurspace::imaging::{procedural_image, synthesize_dataset};
use blurspace::{generate_motion_kernel, ArchConfig, OptimizerConfig, PairedDataset, RunConfig};

/// A network small enough to train for a few hundred steps in a test.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        base_channels: 4,
        kernel_channels: 4,
        downsample_factor: 4,
        image_channels: 3,
        pre_res_blocks: 1,
        post_res_blocks: 1,
        extractor_res_blocks: 1,
    }
}

pub fn tiny_optimizer(total_iters: u64) -> OptimizerConfig {
    OptimizerConfig {
        lr: 1e-3,
        total_iters,
        ..OptimizerConfig::default()
    }
}

pub fn tiny_run_config(total_iters: u64) -> RunConfig {
    RunConfig {
        arch: tiny_arch(),
        optimizer: tiny_optimizer(total_iters),
        seed: 11,
        ..RunConfig::default()
    }
}

/// `n` procedural 16×16 pairs blurred by two 5×5 motion kernels.
pub fn tiny_dataset(n: usize) -> PairedDataset {
    let sharps: Vec<_> = (0..n as u64).map(|i| procedural_image(40 + i, 3, 16)).collect();
    let kernels: Vec<_> = (0..2).map(|i| generate_motion_kernel(70 + i, 5, 32).unwrap()).collect();
    synthesize_dataset(&sharps, &kernels, 1).unwrap()
}
