//! Dense row-major `f64` tensors and named parameter storage.

use std::collections::HashMap;

use crate::error::{arg_err, dim_err, Result};

/// N-dimensional array of `f64` in row-major order with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} has a zero extent"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(dim_err!(
                "gradient of length {} does not match tensor {:?}",
                delta.len(),
                self.shape
            ));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model.
///
/// Trainable parameters carry `requires_grad = true`; non-trainable entries
/// are state buffers such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// Registry of parameters and buffers with unique names, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, mut tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(arg_err!("duplicate parameter name `{name}`"));
        }
        tensor.set_requires_grad(trainable);
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        self.insert(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        self.insert(name, tensor, false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Replaces the value of an existing entry, checking its shape.
    pub fn assign(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<()> {
        let id = self.id(name).ok_or_else(|| arg_err!("unknown parameter `{name}`"))?;
        let t = self.tensor_mut(id);
        if t.shape() != shape {
            return Err(dim_err!("parameter `{name}` has shape {:?}, got {shape:?}", t.shape()));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }
}
