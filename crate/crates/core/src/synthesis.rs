//! Blur transfer onto new sharp images and dataset-wide blur swapping.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, Pair, PairedDataset};
use crate::kernel_space::KernelSpace;

/// Transfer the blur of `source = (sharp, blurry)` onto every target.
#[derive(Debug, Clone, Copy)]
pub struct TransferJob<'a> {
    pub source_sharp: &'a ImageTensor,
    pub source_blurry: &'a ImageTensor,
    pub targets: &'a [ImageTensor],
    pub model: &'a KernelSpace,
}

impl TransferJob<'_> {
    fn validate(&self) -> Result<()> {
        let arch = self.model.config();
        self.source_sharp.same_shape(self.source_blurry, "transfer source")?;
        for (i, img) in std::iter::once(self.source_sharp).chain(self.targets).enumerate() {
            if img.channels() != arch.image_channels {
                return Err(Error::Shape(format!(
                    "image {i} has {} channels, model expects {}",
                    img.channels(),
                    arch.image_channels
                )));
            }
            img.check_network_size()?;
            arch.kernel_shape(img.height(), img.width())?;
        }
        Ok(())
    }
}

/// `F(x̂_j, G(x, y))` for each target `x̂_j`; the kernel is extracted once.
/// Outputs are not clamped.
pub fn transfer_blur(job: &TransferJob) -> Result<Vec<ImageTensor>> {
    job.validate()?;
    let k = job.model.extract_kernel(job.source_sharp, job.source_blurry)?;
    job.targets.iter().map(|t| job.model.apply_blur(t, &k)).collect()
}

/// Seeded derangement of `0..n` (a fixed point only when `n == 1`), by
/// rejection sampling over uniform shuffles.
pub fn donor_assignment(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    if n < 2 {
        return perm;
    }
    loop {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Rebuild `data` with each pair's blur taken from a different pair:
/// `(x_i, F(x_i, G(x_j, y_j)))` with `j = donor(i)`. New ids read
/// `{id_i}_from_{id_j}`.
pub fn swap_dataset(data: &PairedDataset, model: &KernelSpace, seed: u64) -> Result<PairedDataset> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot swap blur in an empty dataset".into()));
    }
    let pairs = data.pairs();
    let donors = donor_assignment(pairs.len(), seed);
    let mut out = Vec::with_capacity(pairs.len());
    for (pair, &d) in pairs.iter().zip(&donors) {
        let donor = &pairs[d];
        let job = TransferJob {
            source_sharp: &donor.sharp,
            source_blurry: &donor.blurry,
            targets: std::slice::from_ref(&pair.sharp),
            model,
        };
        let blurry = transfer_blur(&job)?.remove(0);
        out.push(Pair {
            id: format!("{}_from_{}", pair.id, donor.id),
            sharp: pair.sharp.clone(),
            blurry,
        });
    }
    PairedDataset::new(out)
}
