//! The learned blur-operator family `F`, the kernel extractor `G`, their
//! joint training loop and checkpoint format.

mod arch;
mod checkpoint;
mod train;

pub use arch::{ArchConfig, Extractor, Network, OperatorFamily, PostprocessBlock, PreprocessBlock};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, TensorEntry, FORMAT_VERSION};
pub use train::{augment_pair, train_kernel_space, train_kernel_space_from, TrainState, TrainingOutcome};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{ParamStore, Tape};
use crate::tensor::Tensor;

/// Latent kernel `c_k × h_k × w_k` produced by `G` and consumed by `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel(Tensor);

impl BlurKernel {
    pub fn new(t: Tensor) -> Result<Self> {
        t.chw()?;
        if !t.is_finite() {
            return Err(Error::InvalidArgument("blur kernel has non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn distance(&self, other: &BlurKernel) -> Result<f64> {
        self.0.l2_distance(&other.0)
    }
}

/// `G` with freshly initialized parameters.
pub fn build_extractor(cfg: ArchConfig, seed: u64) -> Result<(Extractor, ParamStore)> {
    let net = Extractor::new(cfg)?;
    let params = net.init(seed);
    Ok((net, params))
}

/// `F` with freshly initialized parameters.
pub fn build_operator_family(cfg: ArchConfig, seed: u64) -> Result<(OperatorFamily, ParamStore)> {
    let net = OperatorFamily::new(cfg)?;
    let params = net.init(seed);
    Ok((net, params))
}

fn finite_image(t: &Tensor) -> Result<ImageTensor> {
    let mut img = ImageTensor::from_tensor(t)?;
    // keep the output finite; no range clamping here
    for v in img.data_mut() {
        if !v.is_finite() {
            *v = if v.is_nan() { 0.0 } else { v.signum() * f32::MAX };
        }
    }
    Ok(img)
}

/// Single forward evaluation `F(x, k)`.
pub fn apply_blur(net: &OperatorFamily, params: &ParamStore, x: &ImageTensor, k: &BlurKernel) -> Result<ImageTensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.to_tensor());
    let kv = tape.constant(k.tensor().clone());
    let out = net.forward(&mut tape, &p, xv, kv)?;
    finite_image(tape.value(out))
}

/// Single forward evaluation `G(x, y)`.
pub fn extract_kernel(net: &Extractor, params: &ParamStore, x: &ImageTensor, y: &ImageTensor) -> Result<BlurKernel> {
    x.same_shape(y, "extract_kernel")?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.to_tensor());
    let yv = tape.constant(y.to_tensor());
    let input = tape.concat(&[xv, yv])?;
    let k = net.forward(&mut tape, &p, input)?;
    BlurKernel::new(tape.value(k).clone())
}

/// A trained pair `(F, G)` with its parameters.
#[derive(Debug)]
pub struct KernelSpace {
    pub operator: OperatorFamily,
    pub operator_params: ParamStore,
    pub extractor: Extractor,
    pub extractor_params: ParamStore,
}

impl KernelSpace {
    pub fn init(cfg: ArchConfig, seed: u64) -> Result<Self> {
        let (operator, operator_params) = build_operator_family(cfg, seed)?;
        let (extractor, extractor_params) = build_extractor(cfg, seed.wrapping_add(1))?;
        Ok(Self {
            operator,
            operator_params,
            extractor,
            extractor_params,
        })
    }

    pub fn from_params(cfg: ArchConfig, operator_params: ParamStore, extractor_params: ParamStore) -> Result<Self> {
        let operator = OperatorFamily::new(cfg)?;
        let extractor = Extractor::new(cfg)?;
        operator.check(&operator_params)?;
        extractor.check(&extractor_params)?;
        Ok(Self {
            operator,
            operator_params,
            extractor,
            extractor_params,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        self.operator.config()
    }

    pub fn apply_blur(&self, x: &ImageTensor, k: &BlurKernel) -> Result<ImageTensor> {
        apply_blur(&self.operator, &self.operator_params, x, k)
    }

    pub fn extract_kernel(&self, x: &ImageTensor, y: &ImageTensor) -> Result<BlurKernel> {
        extract_kernel(&self.extractor, &self.extractor_params, x, y)
    }

    /// `F(x, G(x, y))`.
    pub fn reconstruct(&self, x: &ImageTensor, y: &ImageTensor) -> Result<ImageTensor> {
        let k = self.extract_kernel(x, y)?;
        self.apply_blur(x, &k)
    }
}
