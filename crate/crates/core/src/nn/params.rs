use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::DEVICE;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    /// Uniform on `[-bound, bound]`.
    Uniform(f32),
    Normal(f32),
}

/// Named trainable parameters plus non-trainable buffers (batch-norm running statistics).
///
/// Names are dotted paths such as `sr.srb1.conv.weight`. Both maps are ordered,
/// so iteration, initialization and serialization are deterministic.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Var> {
        self.buffers.get(name)
    }

    /// Total element count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.count("")
    }

    /// Overwrites the value of an existing parameter or buffer.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(value)?;
        Ok(())
    }

    pub fn builder(&mut self, seed: u64) -> Builder<'_> {
        Builder {
            store: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }
}

fn sample(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        Init::Normal(std) => {
            let d = Normal::new(0.0f32, std).expect("finite std");
            (0..n).map(|_| d.sample(rng)).collect()
        }
    }
}

/// Creates parameters under a name prefix, drawing initial values from one seeded stream.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl Builder<'_> {
    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.full_name(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = sample(init, n, &mut self.rng);
        self.param_values(name, shape, data)
    }

    /// A parameter with explicit initial values.
    pub fn param_values(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let full = self.full_name(name);
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &DEVICE)?)?;
        let t = var.as_tensor().clone();
        if self.store.params.insert(full.clone(), var).is_some() {
            panic!("duplicate parameter name {full}");
        }
        Ok(t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = self.full_name(name);
        let n = shape.iter().product();
        let data = sample(init, n, &mut self.rng);
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &DEVICE)?)?;
        if self.store.buffers.insert(full.clone(), var.clone()).is_some() {
            panic!("duplicate buffer name {full}");
        }
        Ok(var)
    }
}
