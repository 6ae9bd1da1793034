//! Dense tensors, named trainable parameters, and the reverse-mode graph.

pub mod graph;
pub mod optim;
mod scalar;

use std::collections::BTreeMap;

pub use graph::{Graph, Var};
pub use scalar::{Dtype, Scalar};

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major, with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64s(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Simultaneous mutable value / shared gradient access.
    pub fn data_and_grad(&mut self) -> (&mut [T], Option<&[T]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.shape,
                self.data.len(),
                shape,
                expect
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Truncated-normal initialization: N(0, sigma) resampled outside two
/// standard deviations. Samples are drawn in f64 so the stream is identical
/// in f32 and f64 builds.
pub fn trunc_normal<T: Scalar, R: rand::Rng>(shape: &[usize], sigma: f64, rng: &mut R) -> Tensor<T> {
    use rand_distr::Distribution;
    let normal = rand_distr::Normal::new(0.0f64, sigma).expect("sigma must be finite");
    let n: usize = shape.iter().product();
    let bound = 2.0 * sigma;
    let data = (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= bound {
                return T::from_f64(v);
            }
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
        requires_grad: false,
        grad: None,
    }
}

/// Identifier of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensor plus its SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    name: String,
    pub tensor: Tensor<T>,
    pub momentum: Vec<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Flat registry of all parameters of a model. Names are unique; iteration
/// order is insertion order, which the checkpoint format preserves.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name '{name}'")));
        }
        tensor.requires_grad = true;
        let momentum = vec![T::zero(); tensor.len()];
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            momentum,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Installs zeroed gradient buffers on every parameter.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = Some(vec![T::zero(); p.tensor.len()]);
        }
    }

    /// Drops all gradient buffers (fresh state before a recorded forward).
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_product_must_match_data() {
        let ok = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]);
        assert!(ok.is_ok());
        let bad = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn param_store_rejects_duplicate_names() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        let err = store.add("w", Tensor::zeros(&[2])).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn momentum_buffer_matches_tensor_shape() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[3, 4])).unwrap();
        let p = store.get(id);
        assert_eq!(p.momentum.len(), p.tensor.len());
        assert!(p.tensor.requires_grad);
    }
}
