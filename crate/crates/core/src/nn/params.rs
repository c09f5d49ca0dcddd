use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Initialization rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform {
        fan_in: usize,
    },
    Const(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, trainable tensors keyed by hierarchical `a/b/c` paths.
///
/// Initialization draws from a seeded generator in construction order, so
/// two stores built with the same seed and module graph are identical.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("tensors", &self.lock().vars.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// Snapshot of all variables, sorted by name.
    pub fn vars(&self) -> BTreeMap<String, Var> {
        self.lock().vars.clone()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().vars.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().vars.keys().cloned().collect()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.lock()
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites the value of an existing parameter.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Replaces every parameter under `prefix` with uniform noise in `±scale`.
    /// Used to move off the zero-initialized identity point in tests.
    pub fn randomize(&self, prefix: &str, scale: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, var) in self.vars() {
            if !name.starts_with(prefix) {
                continue;
            }
            let data: Vec<f64> = (0..var.elem_count())
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            let t = Tensor::from_vec(data, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.lock();
        if inner.vars.contains_key(&name) {
            return Err(Error::Config(format!("parameter '{name}' defined twice")));
        }
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| inner.rng.random_range(-bound..bound))
                    .collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

/// A path prefix into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}/{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        };
        self.store.create(full, shape.into(), init)
    }
}
