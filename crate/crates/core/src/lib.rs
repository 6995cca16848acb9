//! Learned blur-kernel spaces.
//!
//! A blur-operator family `F(x, k)` and a kernel extractor `G(x, y)` are
//! trained jointly on sharp/blurry pairs so that `F(x, G(x, y)) ≈ y`. The
//! frozen `F` then serves blind deblurring, kernel retrieval and blur
//! transfer onto new images.

pub mod config;
pub mod deblur;
mod error;
pub mod imaging;
pub mod kernel_space;
pub mod nn;
pub mod objectives;
pub mod synthesis;
mod tensor;

pub use config::{RunConfig, RunPaths};
pub use deblur::{
    deblur, retrieve_kernel, Aborted, DeblurConfig, DeblurOutcome, Deblurrer, HyperLaplacianPrior, ImagePrior, Phase,
    RetrievalOutcome, TraceEntry,
};
pub use error::{Error, Result};
pub use imaging::{
    convolve_blur, generate_motion_kernel, load_dataset, load_image, mse, psnr, save_dataset, save_image, ConvKernel,
    ImageTensor, Pair, PairedDataset,
};
pub use kernel_space::{
    apply_blur, extract_kernel, train_kernel_space, ArchConfig, BlurKernel, KernelSpace, TrainState,
};
pub use nn::{OptimizerConfig, ParamStore, Schedule};
pub use objectives::{charbonnier, deblur_objective, grad_check, hyper_laplacian, kernel_l2, LossValue, PriorWeights};
pub use synthesis::{swap_dataset, transfer_blur, TransferJob};
pub use tensor::Tensor;
