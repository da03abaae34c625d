//! Named, seeded parameter storage.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ModelError, Result};

pub const INIT_STD: f64 = 0.02;

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the existing parameter if `name` is taken, so two builders
    /// asking for the same name share one tensor.
    fn get_or_init(&mut self, name: &str, shape: &[usize], init: impl FnOnce(&mut ChaCha8Rng, usize) -> Vec<f64>) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(ModelError::Params(format!(
                    "{name} already registered with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.iter().product();
        let data = init(&mut self.rng, n);
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Normal samples redrawn until they fall within two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        self.get_or_init(name, shape, |rng, n| {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = dist.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
                .collect()
        })
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        self.get_or_init(name, shape, |rng, n| {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        })
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        self.get_or_init(name, shape, |_, n| vec![value; n])
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 1.0)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites one parameter in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| ModelError::Params(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().clone())))
            .collect::<Result<_>>()?;
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads values for every registered parameter. Missing names, extra
    /// names and shape changes are errors.
    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        for name in map.keys() {
            if !self.vars.contains_key(name) {
                return Err(ModelError::Params(format!("checkpoint has unknown parameter {name}")));
            }
        }
        for (name, var) in &self.vars {
            let t = map
                .get(name)
                .ok_or_else(|| ModelError::Params(format!("checkpoint is missing {name}")))?;
            if t.dims() != var.dims() {
                return Err(ModelError::Params(format!(
                    "{name}: checkpoint shape {:?} differs from {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}
