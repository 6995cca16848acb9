use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{convolve_blur, load_image, save_image, ConvKernel, ImageTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub sharp: ImageTensor,
    pub blurry: ImageTensor,
}

/// Aligned sharp/blurry pairs, iterated in lexicographic order of id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedDataset {
    pairs: Vec<Pair>,
}

impl PairedDataset {
    pub fn new(mut pairs: Vec<Pair>) -> Result<Self> {
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        for w in pairs.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Dataset(format!("duplicate pair id `{}`", w[0].id)));
            }
        }
        for p in &pairs {
            if p.sharp.shape() != p.blurry.shape() {
                return Err(Error::Shape(format!(
                    "pair `{}`: sharp {:?} vs blurry {:?}",
                    p.id,
                    p.sharp.shape(),
                    p.blurry.shape()
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter()
    }
}

fn pair_id(image: usize, kernel: usize) -> String {
    format!("img{image:05}_k{kernel:03}")
}

/// Kernel index recorded in an id produced by [`synthesize_dataset`].
pub fn kernel_index_from_id(id: &str) -> Option<usize> {
    let (_, k) = id.rsplit_once("_k")?;
    k.split(|c: char| !c.is_ascii_digit()).next()?.parse().ok()
}

/// Blur every sharp image with a kernel chosen by a seeded, balanced
/// assignment (`i mod K`, then shuffled).
pub fn synthesize_dataset(
    sharps: &[ImageTensor],
    kernels: &[ConvKernel],
    assignment_seed: u64,
) -> Result<PairedDataset> {
    if sharps.is_empty() || kernels.is_empty() {
        return Err(Error::InvalidArgument(
            "synthesize_dataset needs at least one image and one kernel".into(),
        ));
    }
    let mut assignment: Vec<usize> = (0..sharps.len()).map(|i| i % kernels.len()).collect();
    assignment.shuffle(&mut ChaCha8Rng::seed_from_u64(assignment_seed));
    let pairs = sharps
        .iter()
        .zip(&assignment)
        .enumerate()
        .map(|(i, (sharp, &k))| {
            Ok(Pair {
                id: pair_id(i, k),
                sharp: sharp.clone(),
                blurry: convolve_blur(sharp, &kernels[k])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(pairs)
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Read `<root>/sharp/<id>.png` and `<root>/blur/<id>.png`, pairing by file
/// name. Unmatched files are an error.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<PairedDataset> {
    let root = root.as_ref();
    let sharp = png_stems(&root.join("sharp"))?;
    let blur = png_stems(&root.join("blur"))?;
    let unmatched: Vec<&String> = sharp
        .keys()
        .filter(|k| !blur.contains_key(*k))
        .chain(blur.keys().filter(|k| !sharp.contains_key(*k)))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Dataset(format!("unmatched files: {unmatched:?}")));
    }
    let pairs = sharp
        .iter()
        .map(|(id, path)| {
            Ok(Pair {
                id: id.clone(),
                sharp: load_image(path)?,
                blurry: load_image(&blur[id])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(pairs)
}

pub fn save_dataset(data: &PairedDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for sub in ["sharp", "blur"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for p in data.iter() {
        save_image(&p.sharp, root.join("sharp").join(format!("{}.png", p.id)))?;
        save_image(&p.blurry, root.join("blur").join(format!("{}.png", p.id)))?;
    }
    Ok(())
}
