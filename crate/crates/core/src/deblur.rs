//! Blind deblurring against a frozen operator family: the sharp image and
//! the latent kernel are each the output of an untrained generator on fixed
//! noise, optimized alternately.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{psnr, ImageTensor};
use crate::kernel_space::{apply_blur, ArchConfig, BlurKernel, Extractor, Network, OperatorFamily};
use crate::nn::layers::{Conv, LEAKY_SLOPE};
use crate::nn::{Adam, Bound, OptimizerConfig, ParamDecl, ParamStore, Schedule, Tape, Var};
use crate::objectives::{
    hyper_laplacian_grad_into, hyper_laplacian_tensor, LossValue, PriorWeights, CHARBONNIER, HYPER_LAPLACIAN,
    HYPER_LAPLACIAN_DELTA, KERNEL_L2,
};
use crate::tensor::Tensor;

/// Side of the square noise input of the image generator.
pub const IMAGE_NOISE_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeblurConfig {
    pub outer_iters: usize,
    pub inner_iters_first: usize,
    pub inner_iters_rest: usize,
    /// Resample the kernel noise and re-initialize its generator every outer
    /// iteration instead of warm-starting.
    pub reinit_kernel_each_outer: bool,
    pub weights: PriorWeights,
    /// Shared by both generators; `total_iters` is replaced by each
    /// generator's own step budget.
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// End a kernel phase once its best objective improved by less than
    /// `1e-5` (relative) over the last 20 steps.
    pub early_stop: bool,
    /// Base width of the image generator.
    pub image_width: usize,
}

impl Default for DeblurConfig {
    fn default() -> Self {
        Self {
            outer_iters: 300,
            inner_iters_first: 100,
            inner_iters_rest: 10,
            reinit_kernel_each_outer: false,
            weights: PriorWeights::default(),
            optimizer: OptimizerConfig {
                lr: 5e-3,
                schedule: Schedule::Constant,
                ..OptimizerConfig::default()
            },
            seed: 0,
            early_stop: false,
            image_width: 32,
        }
    }
}

impl DeblurConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_iters_first == 0 || self.inner_iters_rest == 0 {
            return Err(Error::Config("deblur iteration counts must be ≥ 1".into()));
        }
        if self.image_width == 0 {
            return Err(Error::Config("image_width must be ≥ 1".into()));
        }
        self.weights.validate()?;
        self.optimizer.validate()
    }

    fn inner_iters(&self, outer: usize) -> usize {
        if outer == 0 {
            self.inner_iters_first
        } else {
            self.inner_iters_rest
        }
    }

    /// Kernel-generator steps over a whole run (warm-start mode).
    pub fn kernel_steps(&self) -> usize {
        self.inner_iters_first + (self.outer_iters - 1) * self.inner_iters_rest
    }

    fn schedule(&self, steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            total_iters: steps.max(1) as u64,
            ..self.optimizer
        }
    }
}

const EARLY_STOP_WINDOW: usize = 20;
const EARLY_STOP_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Kernel generator update, image frozen.
    Kernel,
    /// Image generator update, kernel frozen.
    Image,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Kernel => "kernel",
            Phase::Image => "image",
        })
    }
}

/// One optimizer step: the objective is evaluated before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub outer: usize,
    pub phase: Phase,
    /// Step index within the phase.
    pub step: usize,
    pub loss: LossValue,
    /// Smallest objective seen so far in the run.
    pub best: f64,
}

/// Failed run: the error and every step recorded before it.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub trace: Vec<TraceEntry>,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} steps)", self.error, self.trace.len())
    }
}

impl std::error::Error for Aborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Aborted> for Error {
    fn from(a: Aborted) -> Self {
        a.error
    }
}

#[derive(Debug, Clone)]
pub struct DeblurOutcome {
    /// Generator output clamped to `[0, 1]`.
    pub image: ImageTensor,
    pub kernel: BlurKernel,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    pub kernel: BlurKernel,
    /// `psnr(F(x, k), y)`.
    pub recon_psnr: f64,
    pub trace: Vec<TraceEntry>,
}

/// Differentiable image penalty added to the deblurring objective.
pub trait ImagePrior {
    /// Value and gradient with respect to every pixel.
    fn evaluate(&self, x: &ImageTensor) -> Result<(f64, Vec<f32>)>;
}

impl<F> ImagePrior for F
where
    F: Fn(&ImageTensor) -> Result<(f64, Vec<f32>)>,
{
    fn evaluate(&self, x: &ImageTensor) -> Result<(f64, Vec<f32>)> {
        self(x)
    }
}

/// The hyper-Laplacian gradient prior as a pluggable hook.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperLaplacianPrior {
    pub alpha: f64,
}

impl ImagePrior for HyperLaplacianPrior {
    fn evaluate(&self, x: &ImageTensor) -> Result<(f64, Vec<f32>)> {
        let t = x.to_tensor();
        let value = hyper_laplacian_tensor(&t, self.alpha, HYPER_LAPLACIAN_DELTA)?;
        let mut grad = vec![0.0; t.len()];
        hyper_laplacian_grad_into(&t, self.alpha, HYPER_LAPLACIAN_DELTA, 1.0, &mut grad)?;
        Ok((value, grad))
    }
}

struct RegisteredPrior {
    name: String,
    weight: f64,
    hook: Box<dyn ImagePrior>,
}

/// Resample a single-channel square noise map to `h × w` by bilinear
/// interpolation with half-pixel centres.
pub fn resample_noise(noise: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, nh, nw) = noise.chw()?;
    let src = noise.data();
    let mut out = Vec::with_capacity(c * h * w);
    let coord = |i: usize, n_out: usize, n_in: usize| {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    for ch in 0..c {
        let p = &src[ch * nh * nw..(ch + 1) * nh * nw];
        for y in 0..h {
            let (y0, y1, fy) = coord(y, h, nh);
            for x in 0..w {
                let (x0, x1, fx) = coord(x, w, nw);
                let top = p[y0 * nw + x0] as f64 * (1.0 - fx) + p[y0 * nw + x1] as f64 * fx;
                let bot = p[y1 * nw + x0] as f64 * (1.0 - fx) + p[y1 * nw + x1] as f64 * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Two-level U-Net with a sigmoid output, used as the image generator.
#[derive(Debug, Clone)]
pub struct ImageDip {
    width: usize,
    channels: usize,
    convs: Vec<Conv>,
}

impl ImageDip {
    pub fn new(channels: usize, width: usize) -> Self {
        let w = width;
        let convs = vec![
            Conv::new("image_dip.in", 1, w, 3, 1, 1),
            Conv::new("image_dip.down1", w, 2 * w, 3, 2, 1),
            Conv::new("image_dip.down2", 2 * w, 2 * w, 3, 2, 1),
            Conv::up2("image_dip.up2", 2 * w, 2 * w),
            Conv::new("image_dip.fuse1", 4 * w, 2 * w, 3, 1, 1),
            Conv::up2("image_dip.up1", 2 * w, w),
            Conv::new("image_dip.fuse0", 2 * w, w, 3, 1, 1),
            Conv::new("image_dip.out", w, channels, 3, 1, 1),
        ];
        Self { width, channels, convs }
    }

    /// Input is `1 × H × W` with `H, W` divisible by 4.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let c = &self.convs;
        let conv = |tape: &mut Tape, i: usize, x: Var| -> Result<Var> {
            let y = c[i].forward(tape, p, x)?;
            Ok(tape.leaky_relu(y, LEAKY_SLOPE))
        };
        let e0 = conv(tape, 0, z)?;
        let e1 = conv(tape, 1, e0)?;
        let e2 = conv(tape, 2, e1)?;
        let d1 = conv(tape, 3, e2)?;
        let d1 = tape.concat(&[d1, e1])?;
        let d1 = conv(tape, 4, d1)?;
        let d0 = conv(tape, 5, d1)?;
        let d0 = tape.concat(&[d0, e0])?;
        let d0 = conv(tape, 6, d0)?;
        let out = c[7].forward(tape, p, d0)?;
        Ok(tape.sigmoid(out))
    }
}

impl Network for ImageDip {
    fn arch_id(&self) -> String {
        format!("image_dip/c{}:w{}", self.channels, self.width)
    }

    fn declare(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        self.convs.iter().for_each(|c| c.declare(&mut out));
        out
    }
}

struct KernelGen {
    net: Extractor,
    params: ParamStore,
    opt: Adam,
    noise: Tensor,
}

impl KernelGen {
    fn new(arch: ArchConfig, h: usize, w: usize, seed: u64, steps: usize, cfg: &DeblurConfig) -> Result<Self> {
        let net = Extractor::with_prefix(arch, "kernel_dip")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::randn(vec![net.in_channels(), h, w], &mut rng);
        let params = net.init(seed.wrapping_add(1));
        let opt = Adam::new(cfg.schedule(steps), &params);
        Ok(Self {
            net,
            params,
            opt,
            noise,
        })
    }

    fn output(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(self.noise.clone());
        let k = self.net.forward(&mut tape, &p, z)?;
        Ok(tape.value(k).clone())
    }
}

/// Runs deblurring and kernel retrieval against one frozen operator family.
pub struct Deblurrer<'a> {
    operator: &'a OperatorFamily,
    params: &'a ParamStore,
    cfg: DeblurConfig,
    priors: Vec<RegisteredPrior>,
}

impl<'a> Deblurrer<'a> {
    pub fn new(operator: &'a OperatorFamily, params: &'a ParamStore, cfg: DeblurConfig) -> Result<Self> {
        cfg.validate()?;
        operator.check(params)?;
        Ok(Self {
            operator,
            params,
            cfg,
            priors: Vec::new(),
        })
    }

    pub fn config(&self) -> &DeblurConfig {
        &self.cfg
    }

    /// Add `weight · hook(x)` to the objective. The built-in gradient prior
    /// stays active through `weights.gamma`.
    pub fn register_image_prior(&mut self, name: &str, weight: f64, hook: impl ImagePrior + 'static) -> Result<()> {
        if !weight.is_finite() {
            return Err(Error::Config(format!("prior `{name}` has non-finite weight")));
        }
        let taken = [CHARBONNIER, KERNEL_L2, HYPER_LAPLACIAN];
        if taken.contains(&name) || self.priors.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("prior name `{name}` is already in use")));
        }
        self.priors.push(RegisteredPrior {
            name: name.to_string(),
            weight,
            hook: Box::new(hook),
        });
        Ok(())
    }

    fn check_target(&self, y: &ImageTensor) -> Result<()> {
        y.check_network_size()?;
        let arch = self.operator.config();
        if y.channels() != arch.image_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                y.channels(),
                arch.image_channels
            )));
        }
        arch.kernel_shape(y.height(), y.width())?;
        Ok(())
    }

    fn hook_values(&self, x: &ImageTensor) -> Result<Vec<(f64, Vec<f32>)>> {
        self.priors
            .iter()
            .map(|p| {
                let (v, g) = p.hook.evaluate(x)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        step: 0,
                        term: p.name.clone(),
                        value: v,
                    });
                }
                Ok((v, g))
            })
            .collect()
    }

    /// Objective terms on the tape: data, kernel norm, gradient prior, hooks.
    #[allow(clippy::too_many_arguments)]
    fn objective(
        &self,
        tape: &mut Tape,
        fp: &Bound,
        x: Var,
        k: Var,
        y: Var,
        hooks: Vec<(f64, Vec<f32>)>,
        with_prior: bool,
    ) -> Result<(Var, LossValue)> {
        let w = &self.cfg.weights;
        let fake = self.operator.forward(tape, fp, x, k)?;
        let data = tape.charbonnier(fake, y, w.eps_charbonnier)?;
        let kl2 = tape.l2_norm(k);
        let mut terms = vec![(data, 1.0), (kl2, w.lambda_k)];
        let mut names = vec![CHARBONNIER, KERNEL_L2];
        if with_prior {
            let hl = tape.hyper_laplacian(x, w.alpha, HYPER_LAPLACIAN_DELTA)?;
            terms.push((hl, w.gamma));
            names.push(HYPER_LAPLACIAN);
            for (prior, (v, g)) in self.priors.iter().zip(hooks) {
                let node = tape.external(x, v, g)?;
                terms.push((node, prior.weight));
                names.push(&prior.name);
            }
        }
        let total = tape.weighted_sum(&terms);
        let loss = LossValue::from_terms(names.iter().zip(&terms).map(|(n, &(v, wt))| (*n, tape.scalar(v), wt)));
        Ok((total, loss))
    }

    /// One kernel-generator step with the image fixed; returns the objective
    /// before the update. Non-finite objectives skip the update.
    fn kernel_step(&self, gen: &mut KernelGen, x: &Tensor, y: &Tensor, with_prior: bool) -> Result<LossValue> {
        let hooks = if with_prior {
            self.hook_values(&ImageTensor::from_tensor(x)?)?
        } else {
            Vec::new()
        };
        let (loss, grads) = {
            let mut tape = Tape::new();
            let fp = self.params.bind(&mut tape, false);
            let kp = gen.params.bind(&mut tape, true);
            let z = tape.constant(gen.noise.clone());
            let k = gen.net.forward(&mut tape, &kp, z)?;
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let (total, loss) = self.objective(&mut tape, &fp, xv, k, yv, hooks, with_prior)?;
            if loss.non_finite_term().is_some() {
                return Ok(loss);
            }
            let mut g = tape.backward(total);
            (loss, Adam::collect(&kp, &mut g))
        };
        gen.opt.step(&mut gen.params, &grads);
        Ok(loss)
    }

    /// Optimize the kernel generator for up to `steps` steps; leaves the
    /// best-seen parameters in place.
    fn kernel_phase(
        &self,
        gen: &mut KernelGen,
        x: &Tensor,
        y: &Tensor,
        with_prior: bool,
        steps: usize,
        outer: usize,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<()> {
        let mut best_params = gen.params.clone();
        let mut best_value = f64::INFINITY;
        let mut phase_best = Vec::with_capacity(steps);
        for step in 0..steps {
            let before = gen.params.clone();
            let loss = self.kernel_step(gen, x, y, with_prior)?;
            let value = loss.value;
            record(trace, outer, Phase::Kernel, step, loss)?;
            if value < best_value {
                best_value = value;
                best_params = before;
            }
            phase_best.push(best_value);
            if self.cfg.early_stop && step >= EARLY_STOP_WINDOW {
                let old = phase_best[step - EARLY_STOP_WINDOW];
                if (old - best_value) <= EARLY_STOP_TOL * old.abs() {
                    break;
                }
            }
        }
        // the last update is never evaluated; fall back to the best seen
        gen.params = best_params;
        Ok(())
    }

    /// Alternate kernel phases and single image steps; see [`DeblurConfig`].
    pub fn deblur(&self, y: &ImageTensor) -> std::result::Result<DeblurOutcome, Aborted> {
        let mut trace = Vec::new();
        match self.run_deblur(y, &mut trace) {
            Ok((image, kernel)) => Ok(DeblurOutcome { image, kernel, trace }),
            Err(error) => Err(Aborted { error, trace }),
        }
    }

    fn run_deblur(&self, y: &ImageTensor, trace: &mut Vec<TraceEntry>) -> Result<(ImageTensor, BlurKernel)> {
        self.check_target(y)?;
        let cfg = &self.cfg;
        let (c, h, w) = y.shape();
        let arch = *self.operator.config();
        let yt = y.to_tensor();

        let image_net = ImageDip::new(c, cfg.image_width);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let noise = Tensor::randn(vec![1, IMAGE_NOISE_SIZE, IMAGE_NOISE_SIZE], &mut rng);
        let zx = resample_noise(&noise, h, w)?;
        let mut image_params = image_net.init(cfg.seed.wrapping_add(2));
        let mut image_opt = Adam::new(cfg.schedule(cfg.outer_iters), &image_params);

        let kernel_seed = |outer: usize| cfg.seed.wrapping_add(1000).wrapping_add(outer as u64 * 7919);
        let mut kgen = KernelGen::new(arch, h, w, kernel_seed(0), cfg.kernel_steps(), cfg)?;

        let image_out = |params: &ParamStore| -> Result<Tensor> {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let z = tape.constant(zx.clone());
            let x = image_net.forward(&mut tape, &p, z)?;
            Ok(tape.value(x).clone())
        };

        for outer in 0..cfg.outer_iters {
            if outer > 0 && cfg.reinit_kernel_each_outer {
                let steps = cfg.inner_iters(outer);
                kgen = KernelGen::new(arch, h, w, kernel_seed(outer), steps, cfg)?;
            }
            let x = image_out(&image_params)?;
            self.kernel_phase(&mut kgen, &x, &yt, true, cfg.inner_iters(outer), outer, trace)?;

            let k = kgen.output()?;
            let hooks = self.hook_values(&ImageTensor::from_tensor(&x)?)?;
            let (loss, grads) = {
                let mut tape = Tape::new();
                let fp = self.params.bind(&mut tape, false);
                let ip = image_params.bind(&mut tape, true);
                let z = tape.constant(zx.clone());
                let xv = image_net.forward(&mut tape, &ip, z)?;
                let kv = tape.constant(k);
                let yv = tape.constant(yt.clone());
                let (total, loss) = self.objective(&mut tape, &fp, xv, kv, yv, hooks, true)?;
                let grads = if loss.non_finite_term().is_none() {
                    let mut g = tape.backward(total);
                    Adam::collect(&ip, &mut g)
                } else {
                    Vec::new()
                };
                (loss, grads)
            };
            record(trace, outer, Phase::Image, 0, loss)?;
            image_opt.step(&mut image_params, &grads);
        }

        let x = ImageTensor::from_tensor(&image_out(&image_params)?)?.clamped();
        let k = BlurKernel::new(kgen.output()?)?;
        Ok((x, k))
    }

    /// Fit only the kernel generator so that `F(x, k) ≈ y`, for
    /// [`DeblurConfig::kernel_steps`] steps.
    pub fn retrieve_kernel(&self, x: &ImageTensor, y: &ImageTensor) -> std::result::Result<RetrievalOutcome, Aborted> {
        let mut trace = Vec::new();
        match self.run_retrieve(x, y, &mut trace) {
            Ok((kernel, recon_psnr)) => Ok(RetrievalOutcome {
                kernel,
                recon_psnr,
                trace,
            }),
            Err(error) => Err(Aborted { error, trace }),
        }
    }

    fn run_retrieve(&self, x: &ImageTensor, y: &ImageTensor, trace: &mut Vec<TraceEntry>) -> Result<(BlurKernel, f64)> {
        self.check_target(y)?;
        x.same_shape(y, "retrieve_kernel")?;
        let (_, h, w) = y.shape();
        let cfg = &self.cfg;
        let steps = cfg.kernel_steps();
        let mut kgen = KernelGen::new(*self.operator.config(), h, w, cfg.seed.wrapping_add(1000), steps, cfg)?;
        self.kernel_phase(&mut kgen, &x.to_tensor(), &y.to_tensor(), false, steps, 0, trace)?;
        let k = BlurKernel::new(kgen.output()?)?;
        let recon = apply_blur(self.operator, self.params, x, &k)?;
        Ok((k, psnr(&recon, y)?))
    }
}

fn record(trace: &mut Vec<TraceEntry>, outer: usize, phase: Phase, step: usize, loss: LossValue) -> Result<()> {
    loss.check_finite(trace.len())?;
    let best = trace.last().map_or(loss.value, |e| e.best.min(loss.value));
    trace.push(TraceEntry {
        outer,
        phase,
        step,
        loss,
        best,
    });
    Ok(())
}

/// [`Deblurrer::deblur`] with the default gradient prior only.
pub fn deblur(
    operator: &OperatorFamily,
    params: &ParamStore,
    y: &ImageTensor,
    cfg: DeblurConfig,
) -> std::result::Result<DeblurOutcome, Aborted> {
    let d = Deblurrer::new(operator, params, cfg).map_err(|error| Aborted {
        error,
        trace: Vec::new(),
    })?;
    d.deblur(y)
}

/// [`Deblurrer::retrieve_kernel`].
pub fn retrieve_kernel(
    operator: &OperatorFamily,
    params: &ParamStore,
    x: &ImageTensor,
    y: &ImageTensor,
    cfg: DeblurConfig,
) -> std::result::Result<RetrievalOutcome, Aborted> {
    let d = Deblurrer::new(operator, params, cfg).map_err(|error| Aborted {
        error,
        trace: Vec::new(),
    })?;
    d.retrieve_kernel(x, y)
}
