//! Seeded parameter storage.
//!
//! candle's CPU backend draws random tensors from an unseedable thread RNG, so
//! parameters are initialized here from a ChaCha stream keyed by the run seed.
//! Initialization order follows construction order, which makes a model a pure
//! function of `(config, seed)`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KadError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
    Const(f64),
    /// Uniform on `[-bound, bound]` except the last `tail` columns of a 2-D
    /// weight, which use `tail_bound`.
    UniformTail { bound: f64, tail: usize, tail_bound: f64 },
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

#[derive(Clone)]
pub struct VarStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for VarStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.lock().unwrap().vars.len();
        f.debug_struct("VarStore").field("vars", &n).field("dtype", &self.dtype).finish()
    }
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        VarStore {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    pub fn root(&self) -> ParamPath {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All variables, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn create(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(existing) = inner.vars.get(&name) {
            if existing.shape() != &shape {
                return Err(KadError::Input(format!(
                    "parameter {name} requested with shape {shape:?}, exists as {:?}",
                    existing.shape()
                )));
            }
            return Ok(existing.as_tensor().clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Uniform(bound) => (0..n).map(|_| inner.rng.random_range(-bound..=bound)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| KadError::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
            }
            Init::Const(c) => vec![c; n],
            Init::UniformTail { bound, tail, tail_bound } => {
                let cols = *shape.dims().last().unwrap_or(&1);
                (0..n)
                    .map(|i| {
                        let b = if i % cols >= cols.saturating_sub(tail) { tail_bound } else { bound };
                        inner.rng.random_range(-b..=b)
                    })
                    .collect()
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrites every variable with the stored value of the same name.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.vars() {
            let t = loaded
                .get(&name)
                .ok_or_else(|| KadError::load(path, format!("missing parameter {name}")))?;
            if t.shape() != var.shape() {
                return Err(KadError::load(
                    path,
                    format!("parameter {name} has shape {:?}, expected {:?}", t.shape(), var.shape()),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Hierarchical name prefix into a [`VarStore`].
#[derive(Clone, Debug)]
pub struct ParamPath {
    store: VarStore,
    prefix: String,
}

impl ParamPath {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamPath {
        ParamPath {
            store: self.store.clone(),
            prefix: self.full(name.as_ref()),
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        self.store.create(self.full(name), shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let make = |seed| {
            let s = VarStore::new(seed, DType::F32, &Device::Cpu);
            let p = s.root().pp("layer");
            p.get((3, 4), "w", Init::Uniform(0.5)).unwrap();
            p.get(4, "b", Init::Const(0.0)).unwrap();
            s.vars()
                .into_iter()
                .map(|(k, v)| (k, v.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
                .collect::<Vec<_>>()
        };
        assert_eq!(make(1), make(1));
        assert_ne!(make(1), make(2));
        assert_eq!(make(1)[0].0, "layer.b");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = VarStore::new(3, DType::F32, &Device::Cpu);
        s.root().get((2, 2), "w", Init::Normal(1.0)).unwrap();
        s.save(&dir.path().join("p.safetensors")).unwrap();
        let t = VarStore::new(4, DType::F32, &Device::Cpu);
        let w = t.root().get((2, 2), "w", Init::Normal(1.0)).unwrap();
        t.load(&dir.path().join("p.safetensors")).unwrap();
        let orig = s.vars()[0].1.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(w.flatten_all().unwrap().to_vec1::<f32>().unwrap(), orig);
    }
}
