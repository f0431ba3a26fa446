//! Named trainable parameters and a scoped builder for creating them.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, StampError};

/// Ordered collection of named variables belonging to one network group.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Builder<'_> {
        Builder { store: self, prefix: String::new() }
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Snapshot of every parameter, keyed by name.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter in place from `values`. All names must be
    /// present with matching shapes.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let t = values
                .get(name)
                .ok_or_else(|| StampError::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != var.shape() {
                return Err(StampError::Checkpoint(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    var.shape(),
                    t.shape()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(StampError::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| StampError::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.entries.push((name, var));
        Ok(tensor)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
}

/// Creates parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Builder<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder { store: self.store, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_names_and_seeding() {
        let mk = || {
            let mut store = ParamStore::new(7, DType::F32, &Device::Cpu);
            {
                let mut root = store.root();
                let mut enc = root.pp("enc");
                enc.param("w", &[2, 3], Init::Normal(1.0)).unwrap();
                enc.pp("head").param("b", &[3], Init::Zeros).unwrap();
            }
            store
        };
        let a = mk();
        let names: Vec<_> = a.vars().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["enc.w", "enc.head.b"]);
        assert_eq!(a.param_count(), 9);
        let b = mk();
        let wa = a.get("enc.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let wb = b.get("enc.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn load_round_trips_and_validates() {
        let mut a = ParamStore::new(1, DType::F64, &Device::Cpu);
        a.root().param("x", &[4], Init::Normal(1.0)).unwrap();
        let mut b = ParamStore::new(2, DType::F64, &Device::Cpu);
        b.root().param("x", &[4], Init::Zeros).unwrap();
        b.load(&a.tensors()).unwrap();
        assert_eq!(
            a.get("x").unwrap().to_vec1::<f64>().unwrap(),
            b.get("x").unwrap().to_vec1::<f64>().unwrap()
        );
        let mut c = ParamStore::new(2, DType::F64, &Device::Cpu);
        c.root().param("x", &[5], Init::Zeros).unwrap();
        assert!(c.load(&a.tensors()).is_err());
    }
}
