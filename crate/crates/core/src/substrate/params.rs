use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
struct Param<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Named trainable tensors with gradient slots, plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    training: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            training: true,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let grad = Tensor::zeros(value.shape());
        match self.params.iter_mut().find(|p| p.name == name) {
            Some(p) => {
                p.value = value;
                p.grad = grad;
            }
            None => self.params.push(Param {
                name: name.to_string(),
                value,
                grad,
            }),
        }
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<T>) {
        match self.buffers.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = value,
            None => self.buffers.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.grad)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.grad)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.iter().map(|(n, _)| n.as_str())
    }

    /// `(name, value, grad)` triples in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value, &p.grad))
    }

    /// `(value, grad)` pairs in insertion order, values mutable.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, &Tensor<T>)> {
        self.params.iter_mut().map(|p| (&mut p.value, &p.grad))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if p.grad.shape() != g.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "gradient {:?} for parameter {name} of shape {:?}",
                    g.shape(),
                    p.grad.shape()
                ),
            ));
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += *b;
        }
        Ok(())
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, v)| (n.clone(), v.cast()))
                .collect(),
            training: self.training,
        }
    }
}
