use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;

static NEXT_STORE_TOKEN: AtomicU32 = AtomicU32::new(0);

/// Stable identifier for one parameter tensor.
///
/// The `store` token is globally unique per [`ParamStore`], so gradients from
/// a tape that mixes several stores (world model + policy + critic) route back
/// to the right owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub(crate) store: u32,
    pub(crate) index: u32,
}

/// Named collection of trainable tensors.
pub struct ParamStore<S> {
    token: u32,
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            token: NEXT_STORE_TOKEN.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> ParamKey {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
        let index = self.values.len() as u32;
        self.names.push(name.to_string());
        self.values.push(value);
        ParamKey { store: self.token, index }
    }

    /// Xavier-uniform `[rows, cols]` matrix: U(-l, l) with l = sqrt(6/(fan_in+fan_out)).
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamKey {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<S> = (0..rows * cols)
            .map(|_| S::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        self.add(name, Tensor::new(vec![rows, cols], data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamKey {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, key: ParamKey) -> &Tensor<S> {
        assert_eq!(key.store, self.token, "parameter key from a different store");
        &self.values[key.index as usize]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Tensor<S> {
        assert_eq!(key.store, self.token, "parameter key from a different store");
        &mut self.values[key.index as usize]
    }

    pub fn owns(&self, key: ParamKey) -> bool {
        key.store == self.token
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        let token = self.token;
        (0..self.values.len() as u32).map(move |index| ParamKey { store: token, index })
    }

    pub fn name(&self, key: ParamKey) -> &str {
        assert_eq!(key.store, self.token);
        &self.names[key.index as usize]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Re-address `key` into this store: same index, this store's token.
    /// Only meaningful between structurally identical stores, e.g. an online
    /// network and its `clone_detached` target.
    pub fn rekey(&self, key: ParamKey) -> ParamKey {
        assert!(
            (key.index as usize) < self.values.len(),
            "rekey index {} out of range {}",
            key.index,
            self.values.len()
        );
        ParamKey { store: self.token, index: key.index }
    }

    /// Deep copy with a fresh store token (used for EMA target networks).
    pub fn clone_detached(&self) -> Self {
        let mut out = ParamStore::new();
        for (name, value) in self.entries() {
            out.add(name, value.clone());
        }
        out
    }

    /// `self = (1 - rate) * self + rate * other`, parameter by parameter.
    pub fn ema_from(&mut self, other: &ParamStore<S>, rate: f64) {
        assert_eq!(self.len(), other.len(), "EMA across differently shaped stores");
        let r = S::from_f64(rate);
        let keep = S::from_f64(1.0 - rate);
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            assert_eq!(dst.shape(), src.shape());
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = *d * keep + s * r;
            }
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}
