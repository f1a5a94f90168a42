//! Named parameter storage with seeded initialization.
//!
//! Every tensor requested through [`ParamStore::var_builder`] is sampled from
//! a generator seeded by `(store seed, parameter name)`, so a model built from
//! the same seed and config is bit-identical regardless of construction order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::VarBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shared map from parameter names to variables.
///
/// A frozen store hands out detached tensors: the values are readable but no
/// gradient is ever recorded for them.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
    trainable: bool,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.len())
            .field("seed", &self.seed)
            .field("trainable", &self.trainable)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            trainable: true,
        }
    }

    pub fn frozen(seed: u64) -> Self {
        Self {
            trainable: false,
            ..Self::new(seed)
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Variables sorted by name.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.lock().unwrap().values().cloned().collect()
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.named_tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every registered parameter from a safetensors file. The file
    /// must provide each parameter with a matching shape.
    pub fn load(&self, path: &Path) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        let device = vars.values().next().map(|v| v.device().clone()).unwrap_or(Device::Cpu);
        let stored = candle_core::safetensors::load(path, &device)?;
        for (name, var) in vars.iter() {
            let t = stored.get(name).ok_or_else(|| Error::IncompatibleCheckpoint {
                path: path.to_path_buf(),
                reason: format!("missing parameter `{name}`"),
            })?;
            if t.dims() != var.dims() {
                return Err(Error::IncompatibleCheckpoint {
                    path: path.to_path_buf(),
                    reason: format!("`{name}` has shape {:?}, expected {:?}", t.dims(), var.dims()),
                });
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars.lock().unwrap().iter() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    fn name_seed(&self, name: &str) -> u64 {
        // FNV-1a over the name, mixed with the store seed (splitmix64 finalizer).
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
        let mut z = hash ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn sample(&self, shape: &Shape, name: &str, init: Init, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.name_seed(name));
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..up)).collect()
        };
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
            let d = Normal::new(mean, std).expect("positive standard deviation");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let data = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                }
            }
        };
        Tensor::from_vec(data, shape, device)?.to_dtype(dtype)
    }

    fn handle(&self, var: &Var) -> Tensor {
        if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.shape() != &s {
                candle_core::bail!("parameter `{name}` requested as {s:?} but stored as {:?}", v.shape());
            }
            return Ok(self.handle(v));
        }
        let var = Var::from_tensor(&self.sample(&s, name, h, dtype, dev)?)?;
        let t = self.handle(&var);
        vars.insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.vars.lock().unwrap().get(name) {
            Some(v) => Ok(self.handle(v)),
            None => candle_core::bail!("unknown parameter `{name}`"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().unwrap().contains_key(name)
    }
}
