//! Parameter storage and the few layer types the stems and the ATM share.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, ConvParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Same names with new values, shape-checked.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!("{} values for {} params", values.len(), self.values.len())));
        }
        for ((v, old), name) in values.iter().zip(&self.values).zip(&self.names) {
            if v.shape() != old.shape() {
                return Err(Error::Shape(format!("param {name}: {:?} vs {:?}", v.shape(), old.shape())));
            }
        }
        Ok(Self { names: self.names.clone(), values })
    }

    /// Fresh gradient-tracking leaves for every parameter.
    pub fn tracked(&self) -> Self {
        Self { names: self.names.clone(), values: self.values.iter().map(|v| v.detach().requires_grad()).collect() }
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.values[id.0] = value;
    }

    pub fn to_json(&self) -> Result<String> {
        let saved: Vec<SavedParam> = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| SavedParam { name: n.clone(), shape: v.shape().to_vec(), data: v.data().to_vec() })
            .collect();
        Ok(serde_json::to_string(&saved)?)
    }

    /// Loads values saved by [`ParamStore::to_json`] into a store of identical layout.
    pub fn load_json(&self, json: &str) -> Result<Self> {
        let saved: Vec<SavedParam> = serde_json::from_str(json)?;
        if saved.len() != self.len() || saved.iter().zip(&self.names).any(|(s, n)| &s.name != n) {
            return Err(Error::Config("saved weights do not match the model layout".into()));
        }
        let values = saved.into_iter().map(|s| Tensor::new(&s.shape, s.data)).collect::<Result<Vec<_>>>()?;
        self.with_values(values)
    }
}

/// Uniform in ±sqrt(1/fan_in).
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Uniform in ±sqrt(6/fan_in), variance-preserving ahead of a rectifier.
pub fn init_he(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zeros,
}

/// 2-D convolution whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let w = match init {
            Init::Uniform => init_he(rng, &shape, c_in * kernel * kernel),
            Init::Zeros => Tensor::zeros(&shape),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| {
            let b = match init {
                Init::Uniform => init_uniform(rng, &[c_out], c_in * kernel * kernel),
                Init::Zeros => Tensor::zeros(&[c_out]),
            };
            store.add(format!("{name}.bias"), b)
        });
        Self { weight, bias, stride, padding: kernel / 2 }
    }

    pub fn params(&self, store: &ParamStore) -> Result<ConvParams> {
        ConvParams::new(
            store.get(self.weight).clone(),
            self.bias.map(|b| store.get(b).clone()),
            self.stride,
            self.padding,
        )
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.params(store)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, &[d_out, d_in], d_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), init_uniform(rng, &[d_out], d_in)));
        Self { weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.linear(store.get(self.weight), self.bias.map(|b| store.get(b)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[width]));
        Self { gamma, beta }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(store.get(self.gamma), store.get(self.beta), 1e-5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_uniform(&mut ChaCha8Rng::seed_from_u64(5), &[4, 9], 9);
        let b = init_uniform(&mut ChaCha8Rng::seed_from_u64(5), &[4, 9], 9);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0 / 3.0));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 3, 1, true, Init::Uniform);
        let json = store.to_json().unwrap();
        let loaded = store.load_json(&json).unwrap();
        for (a, b) in store.values().iter().zip(loaded.values()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(conv.padding, 1);

        let mut other = ParamStore::new();
        other.add("x", Tensor::zeros(&[1]));
        assert!(other.load_json(&json).is_err());
    }
}
