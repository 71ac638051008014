//! Named model parameters with gradient slots and optimizer state.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub value: Tensor<T>,
    /// Excluded from optimizer updates.
    pub frozen: bool,
    pub(crate) adam_m: Option<Vec<T>>,
    pub(crate) adam_v: Option<Vec<T>>,
}

/// Insertion-ordered map `name -> tensor`.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real = f32> {
    entries: IndexMap<String, Param<T>>,
    pub rng_seed: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: IndexMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        let (idx, _) = self.entries.insert_full(
            name,
            Param {
                value,
                frozen: false,
                adam_m: None,
                adam_v: None,
            },
        );
        Ok(idx)
    }

    /// Adds a parameter with entries drawn uniformly from `[-scale, scale]`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-scale..=scale))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<usize> {
        self.insert(name, Tensor::filled(shape, T::of(value)))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.shift_remove(name).map(|p| p.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Param<T>) {
        let (k, v) = self.entries.get_index(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> (&str, &mut Param<T>) {
        let (k, v) = self.entries.get_index_mut(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            let n = p.value.len();
            p.value.set_grad(vec![T::zero(); n]).expect("same length");
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.value.clear_grad();
        }
    }

    /// Adds `scale * grads` into the gradient slots (allocating zeros first if needed).
    pub fn accumulate(&mut self, grads: &Grads<T>, scale: T) {
        for (idx, p) in self.entries.values_mut().enumerate() {
            let n = p.value.len();
            if p.value.grad().is_none() {
                p.value.set_grad(vec![T::zero(); n]).expect("same length");
            }
            if let Some(Some(g)) = grads.per_param.get(idx) {
                let slot = p.value.grad_mut().expect("allocated above");
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += scale * v;
                }
            }
        }
    }

    /// Copies values from `other` for every name present in both; returns the count.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for (name, p) in other.iter() {
            if let Some(dst) = self.entries.get_mut(name) {
                if dst.value.shape() != p.value.shape() {
                    return Err(Error::Data(format!(
                        "parameter '{name}' has shape {:?}, checkpoint has {:?}",
                        dst.value.shape(),
                        p.value.shape()
                    )));
                }
                dst.value = p.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Same parameters in a different precision (gradients and optimizer state dropped).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new(self.rng_seed);
        for (name, p) in self.iter() {
            let idx = out.insert(name, p.value.cast()).expect("unique names");
            out.by_index_mut(idx).1.frozen = p.frozen;
        }
        out
    }
}

/// Gradients produced by one backward pass, indexed like the store.
#[derive(Debug, Clone)]
pub struct Grads<T: Real> {
    pub(crate) per_param: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn empty(n_params: usize) -> Self {
        Grads {
            per_param: vec![None; n_params],
        }
    }

    pub fn get(&self, idx: usize) -> Option<&[T]> {
        self.per_param.get(idx).and_then(|g| g.as_deref())
    }

    /// Elementwise sum, in place.
    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, &y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.per_param.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
