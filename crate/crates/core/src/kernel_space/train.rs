use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, KernelSpace, Network};
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, PairedDataset};
use crate::nn::{Adam, OptimizerConfig, Tape};
use crate::objectives::{LossValue, CHARBONNIER};

/// Everything needed to continue training bit-exactly.
#[derive(Debug)]
pub struct TrainState {
    pub model: KernelSpace,
    pub operator_opt: Adam,
    pub extractor_opt: Adam,
    /// Completed iterations.
    pub iteration: u64,
    pub seed: u64,
    pub eps_charbonnier: f64,
    /// Apply [`augment_pair`] to every training pair.
    pub augment: bool,
}

impl TrainState {
    pub fn new(cfg: ArchConfig, opt: OptimizerConfig, seed: u64, eps_charbonnier: f64) -> Result<Self> {
        opt.validate()?;
        if !(eps_charbonnier > 0.0) {
            return Err(Error::Config("eps_charbonnier must be > 0".into()));
        }
        let model = KernelSpace::init(cfg, seed)?;
        Ok(Self {
            operator_opt: Adam::new(opt, &model.operator_params),
            extractor_opt: Adam::new(opt, &model.extractor_params),
            model,
            iteration: 0,
            seed,
            eps_charbonnier,
            augment: false,
        })
    }

    pub fn with_augmentation(mut self, on: bool) -> Self {
        self.augment = on;
        self
    }

    /// Index of the pair visited at iteration `t`: pairs are reshuffled at the
    /// start of every epoch from a stream keyed by `(seed, epoch)`.
    pub fn pair_index(&self, t: u64, n: usize) -> usize {
        let epoch = t / n as u64;
        let mut order: Vec<usize> = (0..n).collect();
        let key = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        order[(t % n as u64) as usize]
    }

    /// One optimizer step on one pair; returns the loss before the update.
    pub fn step(&mut self, data: &PairedDataset) -> Result<LossValue> {
        let t = self.iteration;
        let pair = &data.pairs()[self.pair_index(t, data.len())];
        let (sharp, blurry) = if self.augment {
            let key = self.seed.wrapping_mul(0xd1b5_4a32_d192_ed03) ^ t;
            augment_pair(&pair.sharp, &pair.blurry, &mut ChaCha8Rng::seed_from_u64(key))
        } else {
            (pair.sharp.clone(), pair.blurry.clone())
        };
        let model = &self.model;
        let (loss, op_grads, ex_grads) = {
            let mut tape = Tape::new();
            let fp = model.operator_params.bind(&mut tape, true);
            let gp = model.extractor_params.bind(&mut tape, true);
            let x = tape.constant(sharp.to_tensor());
            let y = tape.constant(blurry.to_tensor());
            let input = tape.concat(&[x, y])?;
            let k = model.extractor.forward(&mut tape, &gp, input)?;
            let fake = model.operator.forward(&mut tape, &fp, x, k)?;
            let loss = tape.charbonnier(fake, y, self.eps_charbonnier)?;
            let value = LossValue::from_terms([(CHARBONNIER, tape.scalar(loss), 1.0)]);
            value.check_finite(t as usize)?;
            let mut grads = tape.backward(loss);
            (value, Adam::collect(&fp, &mut grads), Adam::collect(&gp, &mut grads))
        };
        self.operator_opt.step(&mut self.model.operator_params, &op_grads);
        self.extractor_opt.step(&mut self.model.extractor_params, &ex_grads);
        self.iteration += 1;
        self.model.operator_params.meta.iteration = self.iteration;
        self.model.extractor_params.meta.iteration = self.iteration;
        if !self.model.operator_params.is_finite() || !self.model.extractor_params.is_finite() {
            return Err(Error::NonFinite {
                step: t as usize,
                term: "parameters".into(),
                value: f64::NAN,
            });
        }
        Ok(loss)
    }
}

/// Random channel permutation and per-channel affine intensity map
/// `v ↦ a·v + b` (`|a| ≥ 0.3`, range kept in `[0, 1]`), applied identically
/// to both images. Any per-channel blur whose weights sum to one commutes
/// with these maps, so the pair keeps its blur.
pub fn augment_pair<R: Rng + ?Sized>(
    sharp: &ImageTensor,
    blurry: &ImageTensor,
    rng: &mut R,
) -> (ImageTensor, ImageTensor) {
    let c = sharp.channels();
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(rng);
    let maps: Vec<(f32, f32)> = (0..c)
        .map(|_| {
            let mag = rng.random_range(0.3f32..=1.0);
            let a = if rng.random::<bool>() { mag } else { -mag };
            let (lo, hi) = ((-a).max(0.0), (1.0 - a).min(1.0));
            (a, rng.random_range(lo..=hi))
        })
        .collect();
    let apply = |img: &ImageTensor| {
        ImageTensor::from_fn(c, img.height(), img.width(), |ch, y, x| {
            let (a, b) = maps[ch];
            a * img.get(perm[ch], y, x) + b
        })
    };
    (apply(sharp), apply(blurry))
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub state: TrainState,
    pub history: Vec<LossValue>,
}

fn check_data(data: &PairedDataset, cfg: &ArchConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    for p in data.iter() {
        p.sharp.check_network_size()?;
        let (c, h, w) = p.sharp.shape();
        if c != cfg.image_channels {
            return Err(Error::Shape(format!(
                "pair `{}` has {c} channels, model expects {}",
                p.id, cfg.image_channels
            )));
        }
        cfg.kernel_shape(h, w)?;
    }
    Ok(())
}

/// Jointly fit `F` and `G` by minimizing the Charbonnier distance between
/// `F(x, G(x, y))` and `y`, one pair per step, for `opt.total_iters` steps.
pub fn train_kernel_space(
    data: &PairedDataset,
    cfg: ArchConfig,
    opt: OptimizerConfig,
    seed: u64,
    eps_charbonnier: f64,
) -> Result<TrainingOutcome> {
    let state = TrainState::new(cfg, opt, seed, eps_charbonnier)?;
    let until = opt.total_iters;
    train_kernel_space_from(state, data, until, |_, _| Ok(()))
}

/// Continue training up to `until` completed iterations, calling `on_step`
/// after every update.
pub fn train_kernel_space_from(
    mut state: TrainState,
    data: &PairedDataset,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &LossValue) -> Result<()>,
) -> Result<TrainingOutcome> {
    check_data(data, state.model.config())?;
    state.model.operator.check(&state.model.operator_params)?;
    let mut history = Vec::with_capacity(until.saturating_sub(state.iteration) as usize);
    while state.iteration < until {
        let loss = state.step(data)?;
        on_step(&state, &loss)?;
        history.push(loss);
    }
    Ok(TrainingOutcome { state, history })
}
