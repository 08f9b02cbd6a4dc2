//! Minimal dense neural-network toolkit: parameters, layers with explicit
//! backward passes, attention, and the AdamW optimizer.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod attention;
mod layers;
mod optim;

use std::collections::HashMap;
use std::fmt::{Debug, Display};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{Rng, RngExt};

pub use attention::{Attention, AttentionCache, KvCache};
pub use layers::{gelu, gelu_grad, Dropout, Embedding, LayerNorm, LayerNormCache, Linear};
pub use optim::{AdamW, AdamWConfig, LrSchedule};

pub trait Real:
    LinalgScalar + Float + NumAssign + ScalarOperand + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of 2-D parameter tensors. Biases and gains are
/// stored as `[1, n]` rows.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform init with the given standard deviation.
    pub fn add_random<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let a = std * 3f64.sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || T::of(rng.random_range(-a..a)));
        self.add(name, value)
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), T::of(v)))
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads { values: self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Element-wise conversion into another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::of(x.to_f64().expect("finite"))))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient accumulators matching a [`ParamStore`] slot for slot.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    values: Vec<Array2<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn zero(&mut self) {
        for v in &mut self.values {
            v.fill(T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.values.iter().flat_map(|v| v.iter()).fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Real>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
}

/// Numerically stable softmax; `-inf` entries get exactly zero mass.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.fill(T::zero());
        return;
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
