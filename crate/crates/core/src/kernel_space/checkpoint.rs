//! Portable checkpoints: `manifest.json` plus one raw little-endian `f32`
//! blob per tensor.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ArchConfig, Extractor, KernelSpace, Network, OperatorFamily, TrainState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamMeta, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const OPERATOR: &str = "operator";
const EXTRACTOR: &str = "extractor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arch_id: String,
    pub config: RunConfig,
    pub iteration: u64,
    pub rng_seed: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Loaded checkpoint; stores are keyed by the group prefix of their tensor
/// names (`group/tensor`).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub stores: IndexMap<String, ParamStore>,
}

fn blob_name(name: &str) -> String {
    format!("{}.bin", name.replace('/', "__"))
}

/// Write every store under `dir`; tensor names are prefixed with the group.
pub fn save_checkpoint(
    stores: &[(&str, &ParamStore)],
    config: &RunConfig,
    iteration: u64,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (group, store) in stores {
        for (name, t) in store.iter() {
            let full = format!("{group}/{name}");
            let file = blob_name(&full);
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                name: full,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_order: "little".into(),
                file,
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch_id: config.arch.arch_id(),
        config: config.clone(),
        iteration,
        rng_seed: config.seed,
        tensors,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Read a checkpoint written by [`save_checkpoint`]. Blobs are checked for
/// length; names and shapes are checked against the architecture by
/// [`Checkpoint::into_model`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    if !mpath.is_file() {
        return Err(Error::Checkpoint(format!("no manifest at {}", mpath.display())));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => {
            return Err(Error::Checkpoint(format!("unknown format_version {other:?}")));
        }
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;

    let mut stores: IndexMap<String, ParamStore> = IndexMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" || entry.byte_order != "little" {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: unsupported dtype/byte order {}/{}",
                entry.name, entry.dtype, entry.byte_order
            )));
        }
        let (group, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` has no group prefix", entry.name)))?;
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: cannot read {}: {e}", entry.name, path.display())))?;
        let expected = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: blob has {} bytes, shape {:?} needs {expected}",
                entry.name,
                bytes.len(),
                entry.shape
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        let store = stores.entry(group.to_string()).or_insert_with(|| {
            ParamStore::new(ParamMeta {
                arch_id: format!("{group}/{}", manifest.arch_id),
                config_hash: manifest.config.arch.config_hash(),
                iteration: manifest.iteration,
                rng_seed: manifest.rng_seed,
            })
        });
        store
            .insert(name, tensor)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
    }
    Ok(Checkpoint { manifest, stores })
}

impl Checkpoint {
    pub fn arch(&self) -> Result<ArchConfig> {
        let arch = ArchConfig::from_arch_id(&self.manifest.arch_id)?;
        if arch != self.manifest.config.arch {
            return Err(Error::Checkpoint(format!(
                "arch_id `{}` disagrees with the stored config",
                self.manifest.arch_id
            )));
        }
        Ok(arch)
    }

    fn take(&mut self, group: &str) -> Result<ParamStore> {
        self.stores
            .shift_remove(group)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no `{group}` tensors")))
    }

    fn checked(net: &dyn Network, group: &str, store: &ParamStore) -> Result<()> {
        store
            .check_layout(&net.declare())
            .map_err(|e| Error::Checkpoint(format!("{group}: {e}")))
    }

    /// Validate against the architecture and build `(F, G)`.
    pub fn into_model(mut self) -> Result<KernelSpace> {
        let arch = self.arch()?;
        let operator = OperatorFamily::new(arch)?;
        let extractor = Extractor::new(arch)?;
        let mut op = self.take(OPERATOR)?;
        let mut ex = self.take(EXTRACTOR)?;
        Self::checked(&operator, OPERATOR, &op)?;
        Self::checked(&extractor, EXTRACTOR, &ex)?;
        op.meta.arch_id = operator.arch_id();
        ex.meta.arch_id = extractor.arch_id();
        Ok(KernelSpace {
            operator,
            operator_params: op,
            extractor,
            extractor_params: ex,
        })
    }

    /// Rebuild full training state, including optimizer moments.
    pub fn into_train_state(mut self) -> Result<TrainState> {
        let cfg = self.manifest.config.clone();
        let iteration = self.manifest.iteration;
        let arch = self.arch()?;
        let probe_op = OperatorFamily::new(arch)?.init(0);
        let probe_ex = Extractor::new(arch)?.init(0);
        let mut moments = |group: &str, store: &ParamStore| -> Result<Vec<(String, Tensor, Tensor)>> {
            let m = self.stores.shift_remove(&format!("{group}.adam_m"));
            let v = self.stores.shift_remove(&format!("{group}.adam_v"));
            let (m, v) = m
                .zip(v)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no optimizer state for `{group}`")))?;
            store
                .iter()
                .map(|(name, _)| {
                    let mt = m.get(name).cloned();
                    let vt = v.get(name).cloned();
                    match (mt, vt) {
                        (Some(mt), Some(vt)) => Ok((name.to_string(), mt, vt)),
                        _ => Err(Error::Checkpoint(format!(
                            "missing optimizer state for `{group}/{name}`"
                        ))),
                    }
                })
                .collect()
        };
        let op_m = moments(OPERATOR, &probe_op)?;
        let ex_m = moments(EXTRACTOR, &probe_ex)?;
        let model = self.into_model()?;
        let operator_opt = Adam::restore(cfg.optimizer, &model.operator_params, &op_m, iteration)?;
        let extractor_opt = Adam::restore(cfg.optimizer, &model.extractor_params, &ex_m, iteration)?;
        Ok(TrainState {
            model,
            operator_opt,
            extractor_opt,
            iteration,
            seed: cfg.seed,
            eps_charbonnier: cfg.weights.eps_charbonnier,
            augment: cfg.augment,
        })
    }
}

fn moment_stores(adam: &Adam, store: &ParamStore) -> Result<(ParamStore, ParamStore)> {
    let mut m = ParamStore::new(store.meta.clone());
    let mut v = ParamStore::new(store.meta.clone());
    for (name, mt, vt) in adam.moments(store) {
        m.insert(name.clone(), mt)?;
        v.insert(name, vt)?;
    }
    Ok((m, v))
}

impl KernelSpace {
    /// Save `F` and `G` only.
    pub fn save(&self, config: &RunConfig, iteration: u64, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(
            &[(OPERATOR, &self.operator_params), (EXTRACTOR, &self.extractor_params)],
            config,
            iteration,
            dir,
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, RunConfig)> {
        let ck = load_checkpoint(dir)?;
        let cfg = ck.manifest.config.clone();
        Ok((ck.into_model()?, cfg))
    }
}

impl TrainState {
    /// Save parameters and optimizer moments.
    pub fn save(&self, config: &RunConfig, dir: impl AsRef<Path>) -> Result<()> {
        let (om, ov) = moment_stores(&self.operator_opt, &self.model.operator_params)?;
        let (em, ev) = moment_stores(&self.extractor_opt, &self.model.extractor_params)?;
        save_checkpoint(
            &[
                (OPERATOR, &self.model.operator_params),
                (EXTRACTOR, &self.model.extractor_params),
                ("operator.adam_m", &om),
                ("operator.adam_v", &ov),
                ("extractor.adam_m", &em),
                ("extractor.adam_v", &ev),
            ],
            config,
            self.iteration,
            dir,
        )
    }
}
