//! Named parameter storage with seed-deterministic initialization.
//!
//! Every parameter is created lazily through a [`VarBuilder`] backed by a
//! [`ParamStore`]. The initial value of a parameter depends only on the store
//! seed and the parameter's dotted name, never on construction order or on a
//! global RNG, so two models built from the same seed are bit-identical.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::VarBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn init_values(shape: &Shape, init: Init, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..up)).collect()
    };
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
        let d = Normal::new(mean, std).expect("finite std");
        (0..n).map(|_| d.sample(rng)).collect()
    };
    match init {
        Init::Const(c) => vec![c; n],
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = match fan {
                FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
            };
            let std = non_linearity.gain() / (fan.max(1) as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
                NormalOrUniform::Normal => normal(rng, 0.0, std),
            }
        }
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// Registers a pre-existing value (e.g. loaded from a checkpoint). Later
    /// lookups of `name` return it instead of a fresh initialization.
    pub fn insert(&self, name: &str, value: &Tensor) -> candle_core::Result<()> {
        let var = Var::from_tensor(value)?;
        self.vars.lock().unwrap().insert(name.to_string(), var);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters whose name starts with `prefix`, sorted by name.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars_with_prefix("")
    }

    /// SHA-256 over names and little-endian f32 values of a parameter group.
    pub fn checksum(&self, prefix: &str) -> candle_core::Result<String> {
        let vars = self.vars_with_prefix(prefix);
        checksum_tensors(vars.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
    }

    pub fn num_elements(&self, prefix: &str) -> usize {
        self.vars_with_prefix(prefix)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }
}

/// SHA-256 over `(name, f32 LE values)` pairs in the given order.
pub fn checksum_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> candle_core::Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in items {
        hasher.update(name.as_bytes());
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(var) = vars.get(name) {
            if var.shape() != &s {
                candle_core::bail!(
                    "parameter {name} has shape {:?}, expected {s:?}",
                    var.shape()
                );
            }
            return var.as_tensor().to_dtype(dtype);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let values = init_values(&s, h, &mut rng);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.vars.lock().unwrap().get(name) {
            Some(var) => var.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().unwrap().contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_seed_and_name_only() {
        let dev = Device::Cpu;
        let a = ParamStore::new(3);
        let b = ParamStore::new(3);
        let vb_a = a.var_builder(DType::F32, &dev);
        let vb_b = b.var_builder(DType::F32, &dev);
        // different creation order
        let a1 = vb_a.get_with_hints((4, 4), "x.w", candle_nn::init::DEFAULT_KAIMING_UNIFORM).unwrap();
        let _ = vb_a.get_with_hints(3, "y.w", candle_nn::init::ZERO).unwrap();
        let _ = vb_b.get_with_hints(3, "y.w", candle_nn::init::ZERO).unwrap();
        let b1 = vb_b.get_with_hints((4, 4), "x.w", candle_nn::init::DEFAULT_KAIMING_UNIFORM).unwrap();
        let diff = (a1 - b1).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        assert_eq!(a.checksum("").unwrap(), b.checksum("").unwrap());
        let c = ParamStore::new(4);
        let _ = c
            .var_builder(DType::F32, &dev)
            .get_with_hints((4, 4), "x.w", candle_nn::init::DEFAULT_KAIMING_UNIFORM)
            .unwrap();
        assert_ne!(a.checksum("x").unwrap(), c.checksum("x").unwrap());
    }

    #[test]
    fn repeated_lookup_returns_same_var() {
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        let _ = vb.pp("m").get_with_hints(2, "b", candle_nn::init::ONE).unwrap();
        let again = vb.pp("m").get_with_hints(2, "b", candle_nn::init::ZERO).unwrap();
        assert_eq!(again.to_vec1::<f32>().unwrap(), vec![1.0, 1.0]);
        assert_eq!(store.len(), 1);
        assert!(vb.pp("m").get_with_hints(3, "b", candle_nn::init::ZERO).is_err());
    }
}
