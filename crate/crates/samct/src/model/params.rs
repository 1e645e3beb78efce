//! Deterministic parameter store with named groups.
//!
//! Every parameter is created under a dotted name whose first segment is its
//! group (`backbone`, `neck`, `prompt_encoder`, `decoder`, `adapter`, `cnn`,
//! `interaction`, `fusion`, `indicator`). Initial values are drawn from an
//! RNG stream derived from the master seed and the parameter name, so
//! construction order never changes initialization. Buffers are
//! checkpointed and hashed like parameters but are never trainable.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Result, SamctError};
use crate::seed::derive_rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Truncated normal (±2 std), the ViT convention.
    TruncNormal(f64),
    Normal(f64),
    /// Uniform ±1/sqrt(fan_in), the conv/linear default.
    UniformFan(usize),
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    seed: u64,
    vars: BTreeMap<String, Var>,
    buffers: BTreeSet<String>,
}

impl ParamStore {
    pub fn new(device: &Device, dtype: DType, seed: u64) -> Self {
        Self {
            device: device.clone(),
            dtype,
            seed,
            vars: BTreeMap::new(),
            buffers: BTreeSet::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn init_data(&self, name: &str, n: usize, init: Init) -> Vec<f64> {
        let mut rng = derive_rng(self.seed, &format!("init:{name}"), &[]);
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("std > 0");
                (0..n)
                    .map(|_| loop {
                        let v = dist.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("std > 0");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::UniformFan(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        }
    }

    fn insert(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(SamctError::Invariant(format!(
                "parameter '{name}' registered twice"
            )));
        }
        let n: usize = dims.iter().product();
        let data = self.init_data(name, n, init);
        let t = Tensor::from_vec(data, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(tensor)
    }

    /// Register a trainable parameter and return its tensor handle.
    pub fn var(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        self.insert(name, dims, init)
    }

    /// Register a non-trainable buffer (checkpointed, hashed, never updated).
    pub fn buffer(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let t = self.insert(name, dims, init)?;
        self.buffers.insert(name.to_string());
        Ok(t)
    }

    pub fn group_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.vars
            .keys()
            .map(|n| Self::group_of(n).to_string())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Trainable vars of the given groups (buffers excluded).
    pub fn trainable_vars(&self, groups: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(name, _)| {
                groups.contains(&Self::group_of(name)) && !self.buffers.contains(*name)
            })
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Scalar parameter count per group (buffers included).
    pub fn param_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            *out.entry(Self::group_of(name).to_string()).or_insert(0) +=
                var.as_tensor().elem_count();
        }
        out
    }

    pub fn group_count(&self, group: &str) -> usize {
        self.param_counts().get(group).copied().unwrap_or(0)
    }

    /// SHA-256 over (name, dims, little-endian f32 data) of a group, in name
    /// order. Bit-identical data gives bit-identical hashes.
    pub fn group_hash(&self, group: &str) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            if Self::group_of(name) != group {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0]);
            let t = var.as_tensor();
            for d in t.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let data: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn group_hashes(&self) -> Result<BTreeMap<String, String>> {
        self.groups()
            .into_iter()
            .map(|g| Ok((g.clone(), self.group_hash(&g)?)))
            .collect()
    }

    /// All tensors by name (for checkpointing).
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn buffer_names(&self) -> &BTreeSet<String> {
        &self.buffers
    }

    /// Overwrite parameter values from a checkpoint map. Every stored name
    /// must be present with the right shape (dimension handshake).
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors.get(name).ok_or_else(|| {
                SamctError::Data(format!("checkpoint missing parameter '{name}'"))
            })?;
            if src.dims() != var.as_tensor().dims() {
                return Err(SamctError::Data(format!(
                    "checkpoint parameter '{name}' has shape {:?}, expected {:?}",
                    src.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&src.to_device(&self.device)?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let dev = Device::Cpu;
        let mut a = ParamStore::new(&dev, DType::F32, 5);
        let ta1 = a.var("cnn.w1", &[4, 4], Init::TruncNormal(0.02)).unwrap();
        let _ta2 = a.var("cnn.w2", &[4], Init::UniformFan(4)).unwrap();
        let mut b = ParamStore::new(&dev, DType::F32, 5);
        let _tb2 = b.var("cnn.w2", &[4], Init::UniformFan(4)).unwrap();
        let tb1 = b.var("cnn.w1", &[4, 4], Init::TruncNormal(0.02)).unwrap();
        assert_eq!(
            ta1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            tb1.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::new(&Device::Cpu, DType::F32, 0);
        s.var("cnn.w", &[2], Init::Zeros).unwrap();
        assert!(s.var("cnn.w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn group_partitioning_and_counts() {
        let mut s = ParamStore::new(&Device::Cpu, DType::F32, 0);
        s.var("cnn.a", &[3, 2], Init::Zeros).unwrap();
        s.var("adapter.b", &[5], Init::Zeros).unwrap();
        s.buffer("prompt_encoder.pe", &[2, 4], Init::Normal(1.0)).unwrap();
        assert_eq!(s.group_count("cnn"), 6);
        assert_eq!(s.group_count("adapter"), 5);
        assert_eq!(s.group_count("prompt_encoder"), 8);
        assert_eq!(s.trainable_vars(&["prompt_encoder"]).len(), 0);
        assert_eq!(s.trainable_vars(&["cnn", "adapter"]).len(), 2);
    }

    #[test]
    fn hash_tracks_value_changes() {
        let mut s = ParamStore::new(&Device::Cpu, DType::F32, 1);
        s.var("cnn.w", &[2, 2], Init::TruncNormal(1.0)).unwrap();
        let h1 = s.group_hash("cnn").unwrap();
        assert_eq!(h1, s.group_hash("cnn").unwrap());
        let var = s.get("cnn.w").unwrap().clone();
        let bumped = (var.as_tensor() + 1.0).unwrap();
        var.set(&bumped).unwrap();
        assert_ne!(h1, s.group_hash("cnn").unwrap());
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dev = Device::Cpu;
        let mut s = ParamStore::new(&dev, DType::F32, 2);
        s.var("cnn.w", &[2, 2], Init::Zeros).unwrap();
        let mut bad = BTreeMap::new();
        bad.insert(
            "cnn.w".to_string(),
            Tensor::zeros(&[3, 2], DType::F32, &dev).unwrap(),
        );
        assert!(s.load_tensors(&bad).is_err());
        let mut missing = BTreeMap::new();
        missing.insert(
            "cnn.other".to_string(),
            Tensor::zeros(&[2, 2], DType::F32, &dev).unwrap(),
        );
        assert!(s.load_tensors(&missing).is_err());
    }
}
