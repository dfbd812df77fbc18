use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Receives gradient updates.
    Trainable,
    /// Running statistics and other state that is saved but not optimized.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

/// Named, ordered collection of every array a network owns.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.var.clone())
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }

    /// SHA-256 over every array's name, shape and raw little-endian bytes.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for p in &self.entries {
            hasher.update(p.name.as_bytes());
            for d in p.var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let flat = p.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?;
            for v in flat.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// Detached copies of every array, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every array from `arrays`. The first missing array or
    /// shape mismatch (in store order) is reported; extra arrays are ignored.
    pub fn load(&self, arrays: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in &self.entries {
            check_array(p, arrays.get(&p.name))?;
        }
        for p in &self.entries {
            let src = &arrays[&p.name];
            p.var.set(&src.to_dtype(p.var.dtype())?.to_device(p.var.device())?)?;
        }
        Ok(())
    }

    /// Merges another store under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for p in &other.entries {
            self.entries.push(Param {
                name: format!("{prefix}{}", p.name),
                var: p.var.clone(),
                kind: p.kind,
            });
        }
    }
}

fn check_array(p: &Param, found: Option<&Tensor>) -> Result<()> {
    match found {
        None => Err(Error::WeightMismatch {
            name: p.name.clone(),
            detail: "missing from source".into(),
        }),
        Some(t) if t.dims() != p.var.dims() => Err(Error::WeightMismatch {
            name: p.name.clone(),
            detail: format!("expected shape {:?}, found {:?}", p.var.dims(), t.dims()),
        }),
        Some(_) => Ok(()),
    }
}

/// Seeded initializer that registers every created array in a [`ParamStore`].
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.register(name, Var::from_tensor(&t)?, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64, kind: ParamKind) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        self.register(name, Var::from_tensor(&t)?, kind)
    }

    fn register(&mut self, name: String, var: Var, kind: ParamKind) -> Result<Var> {
        if self.store.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.store.entries.push(Param {
            name,
            var: var.clone(),
            kind,
        });
        Ok(var)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}
