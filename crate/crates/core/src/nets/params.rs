use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DvaError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform with variance `1 / fan_in`, fan-in taken from every dim but the first.
    KaimingUniform,
    Normal(f64),
}

/// Named trainable tensors with deterministic, seeded initialization.
///
/// Iteration order (and therefore checkpoint layout) is the sorted name order.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self::with_dtype(seed, DType::F32)
    }

    /// Same initial values as [`ParamStore::new`], stored in `dtype`.
    pub fn with_dtype(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Returns the existing tensor named `name`, or creates it.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(DvaError::Shape(format!(
                    "parameter {name}: stored {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingUniform => {
                let bound = (3.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| self.rng.gen_range(-bound..bound) as f32)
                    .collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = self.rng.sample(StandardNormal);
                    (z * std) as f32
                })
                .collect(),
        };
        let var =
            Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites the value of an existing parameter.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| DvaError::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(DvaError::Shape(format!(
                "parameter {name}: stored {:?}, loaded {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// FNV-1a over names and raw little-endian values.
    pub fn checksum(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, var) in &self.vars {
            eat(name.as_bytes());
            for v in var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                eat(&v.to_le_bytes());
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        a.get("w", &[4, 3], Init::KaimingUniform).unwrap();
        b.get("w", &[4, 3], Init::KaimingUniform).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        let mut c = ParamStore::new(8);
        c.get("w", &[4, 3], Init::KaimingUniform).unwrap();
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
    }

    #[test]
    fn get_is_idempotent_and_shape_checked() {
        let mut s = ParamStore::new(0);
        let x = s.get("w", &[2, 2], Init::Normal(1.0)).unwrap();
        let y = s.get("w", &[2, 2], Init::Zeros).unwrap();
        assert_eq!(x.to_vec2::<f32>().unwrap(), y.to_vec2::<f32>().unwrap());
        assert!(s.get("w", &[4], Init::Zeros).is_err());
    }
}
