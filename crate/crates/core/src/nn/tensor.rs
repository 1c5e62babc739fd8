use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use super::NnError;

/// Scalar type the engine runs on: `f32` for training, `f64` for reference
/// gradients.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || expected != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows and columns of a tensor viewed as a matrix over its last axis.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensors have rank >= 1");
        (self.data.len() / cols, cols)
    }

    pub fn at2(&self, row: usize, col: usize) -> T {
        let (_, cols) = self.matrix_dims();
        self.data[row * cols + col]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient shape");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let conv = |v: &T| U::of(v.to_f64_lossy());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(conv).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(conv).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        if let Some(&k) = self.index.get(&name) {
            self.entries[k].1 = tensor;
            return ParamId(k);
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NnError> {
        self.index
            .get(name)
            .map(|&k| ParamId(k))
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NnError> {
        self.id(name).map(|id| &self.entries[id.0].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NnError> {
        let id = self.id(name)?;
        Ok(&mut self.entries[id.0].1)
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.iter() {
            self.entries[id.0].1.accumulate_grad(g);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_param: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Self {
            by_param: vec![None; n],
        }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: Vec<T>) {
        match &mut self.by_param[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    /// Gradient of one parameter; `None` when the parameter took no part in
    /// the recorded computation.
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(k, g)| g.as_deref().map(|g| (ParamId(k), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
        let t = Tensor::<f64>::from_fn(&[2, 3], |k| k as f64);
        assert_eq!(t.matrix_dims(), (2, 3));
        assert_eq!(t.at2(1, 2), 5.0);
    }

    #[test]
    fn grad_accumulation() {
        let mut t = Tensor::<f32>::zeros(&[3]);
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn store_lookup_and_cast() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("a", Tensor::filled(&[2], 0.5));
        s.insert("b", Tensor::zeros(&[3]));
        assert_eq!(s.id("a").unwrap(), a);
        assert!(matches!(s.id("zz"), Err(NnError::UnknownParameter(_))));
        assert_eq!(s.num_values(), 5);
        let wide: ParamStore<f64> = s.cast();
        assert_eq!(wide.get("a").unwrap().data(), &[0.5, 0.5]);
    }
}
