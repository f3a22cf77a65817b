//! Named parameter storage, the Adam optimizer, and the checkpoint format.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdsmError, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameter tensors plus per-parameter Adam moments.
///
/// The map is ordered, so leaf registration, updates and serialization are
/// all deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moment1: BTreeMap<String, Tensor>,
    moment2: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            moment1: BTreeMap::new(),
            moment2: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.moment1.insert(name.clone(), Tensor::zeros(&t.shape));
        self.moment2.insert(name.clone(), Tensor::zeros(&t.shape));
        self.params.insert(name, t);
    }

    /// Insert a tensor of the given shape with entries from N(0, std²).
    pub fn insert_randn(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let n: usize = shape.iter().product();
        // Box-Muller from uniform draws keeps us independent of rand_distr.
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos() * std);
            if data.len() < n {
                data.push(r * theta.sin() * std);
            }
        }
        self.insert(name, Tensor::new(shape.to_vec(), data).unwrap());
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![1.0; n]).unwrap());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| CdsmError::Lookup(format!("no parameter named `{}`", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| CdsmError::Lookup(format!("no parameter named `{}`", name)))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Register every parameter as a leaf on `tape`, in name order.
    pub fn leaves(&self, tape: &Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect()
    }

    /// One Adam update with bias correction. Parameters without an entry in
    /// `grads` are treated as having zero gradient.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = self.params.get(name).ok_or_else(|| {
                CdsmError::Lookup(format!("gradient for unknown parameter `{}`", name))
            })?;
            if g.shape != p.shape {
                return Err(CdsmError::dim(
                    "adam_step",
                    format!("grad {:?} vs param {:?} for `{}`", g.shape, p.shape, name),
                ));
            }
            if !g.is_finite() {
                return Err(CdsmError::Numeric(format!(
                    "non-finite gradient for `{}`",
                    name
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, p) in self.params.iter_mut() {
            let g = grads.get(name);
            let m = self.moment1.get_mut(name).unwrap();
            let v = self.moment2.get_mut(name).unwrap();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data[i]);
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// Checkpoint file: versioned JSON with a string-keyed header and the
/// parameter tensors (moments are not persisted; a reloaded model restarts
/// its optimizer state).
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        meta,
        tensors: store.params.clone(),
    };
    let json = serde_json::to_string(&ckpt)?;
    let mut f = std::fs::File::create(path).map_err(|e| CdsmError::io(path.display().to_string(), e))?;
    f.write_all(json.as_bytes())
        .map_err(|e| CdsmError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| CdsmError::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint = serde_json::from_str(&json)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(CdsmError::Config(format!(
            "checkpoint version {} unsupported (expected {})",
            ckpt.version, CHECKPOINT_VERSION
        )));
    }
    let mut store = ParamStore::new();
    for (name, t) in ckpt.tensors {
        store.insert(name, t);
    }
    Ok((store, ckpt.meta))
}

/// Seed a ChaCha stream from a root seed and a label, so independent
/// components draw from independent streams.
pub fn seeded_rng(root: u64, label: &str) -> ChaCha8Rng {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        store.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(store.get("w").unwrap().data, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_bias_corrected_unit_step() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(5.0));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(1.0));
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        store.adam_step(&grads, &cfg).unwrap();
        // mhat = 1, vhat = 1 -> step = lr / (1 + eps)
        let expected = 5.0 - 0.1 / (1.0 + cfg.eps);
        assert!((store.get("x").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_produce_identical_stores() {
        let build = || {
            let mut s = ParamStore::new();
            let mut rng = seeded_rng(11, "t");
            s.insert_randn("a", &[3, 2], 0.1, &mut rng);
            let mut grads = BTreeMap::new();
            grads.insert(
                "a".to_string(),
                Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0]).unwrap(),
            );
            for _ in 0..3 {
                s.adam_step(&grads, &AdamConfig::default()).unwrap();
            }
            s
        };
        let (a, b) = (build(), build());
        assert_eq!(a.get("a").unwrap(), b.get("a").unwrap());
    }

    #[test]
    fn nan_gradient_is_a_numeric_error() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(0.0));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(f64::NAN));
        assert!(matches!(
            store.adam_step(&grads, &AdamConfig::default()),
            Err(CdsmError::Numeric(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3, "ckpt");
        store.insert_randn("layer.w", &[4, 3], 0.37, &mut rng);
        store.insert_randn("layer.b", &[3], 1.0, &mut rng);
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test".to_string());
        save_checkpoint(&path, &store, meta.clone()).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded.get("layer.w").unwrap(), store.get("layer.w").unwrap());
        assert_eq!(loaded.get("layer.b").unwrap(), store.get("layer.b").unwrap());
    }
}
