use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamMeta {
    pub arch_id: String,
    pub config_hash: String,
    pub iteration: u64,
    pub rng_seed: u64,
}

/// Declared parameter: name, shape and the fan-in used for initialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

/// Named weight tensors of one network, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
    pub meta: ParamMeta,
}

impl ParamStore {
    pub fn new(meta: ParamMeta) -> Self {
        Self {
            tensors: IndexMap::new(),
            meta,
        }
    }

    /// Fan-in scaled uniform initialization, `U(-1/√fan_in, 1/√fan_in)`,
    /// drawn in declaration order from a ChaCha8 stream.
    pub fn init(decls: &[ParamDecl], meta: ParamMeta) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(meta.rng_seed);
        let mut store = Self::new(meta);
        for d in decls {
            let bound = 1.0 / (d.fan_in.max(1) as f32).sqrt();
            store
                .tensors
                .insert(d.name.clone(), Tensor::uniform(d.shape.clone(), bound, &mut rng));
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if !t.is_finite() {
            return Err(Error::InvalidArgument(format!("tensor `{name}` has non-finite values")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Check that names and shapes match `decls` exactly, in order.
    pub fn check_layout(&self, decls: &[ParamDecl]) -> Result<()> {
        for d in decls {
            match self.tensors.get(&d.name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing tensor `{}`", d.name)));
                }
                Some(t) if t.shape() != d.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        d.name,
                        t.shape(),
                        d.shape
                    )));
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !decls.iter().any(|d| &d.name == *k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Register every tensor on `tape`; trainable tensors receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .values()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] registered on a tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .tensors
            .get_index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Shape(format!("network has no parameter `{name}`")))
    }

    /// `(name, var)` in store order.
    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.store
            .tensors
            .keys()
            .map(String::as_str)
            .zip(self.vars.iter().copied())
    }
}

/// 64-bit FNV-1a, hex encoded; used to fingerprint configurations.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
