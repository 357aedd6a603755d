//! Tape-based reverse-mode differentiation over the primitive catalog.

use super::params::ParamStore;
use super::primitive::{self, Primitive, Saved};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Leaf,
    Param(String),
    Primitive {
        kind: Primitive,
        inputs: Vec<Var>,
        saved: Saved<T>,
    },
    /// Scalar computed outside the tape together with its local gradients.
    Fused {
        inputs: Vec<Var>,
        local: Vec<Tensor<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    training: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Free variable whose gradient is tracked (useful for checking primitives).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let (value, saved) = {
            let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            primitive::forward(&kind, &xs, self.training)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            value,
            Op::Primitive {
                kind,
                inputs: inputs.to_vec(),
                saved,
            },
            requires_grad,
        ))
    }

    /// Records a scalar whose local gradients w.r.t. `inputs` were computed by the caller.
    pub fn fused(&mut self, inputs: &[Var], value: T, local: Vec<Tensor<T>>) -> Result<Var> {
        if local.len() != inputs.len() {
            return Err(Error::shape(
                "fused",
                "one local gradient per input required",
            ));
        }
        for (v, g) in inputs.iter().zip(&local) {
            if self.nodes[v.0].value.shape() != g.shape() {
                return Err(Error::shape(
                    "fused",
                    format!(
                        "gradient {:?} vs input {:?}",
                        g.shape(),
                        self.nodes[v.0].value.shape()
                    ),
                ));
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                local,
            },
            requires_grad,
        ))
    }

    /// Batch mean and unbiased variance saved by a training-mode batch norm node.
    /// Batch mean and unbiased variance of a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        if !self.training {
            return None;
        }
        match &self.nodes[v.0].op {
            Op::Primitive {
                kind: Primitive::BatchNorm1d { .. },
                saved:
                    Saved::Norm {
                        batch_mean,
                        batch_var_unbiased,
                        ..
                    },
                ..
            } => Some((batch_mean, batch_var_unbiased)),
            _ => None,
        }
    }

    /// Hash of the active branch at every non-smooth point: relu input signs and
    /// max-pool argmax positions. Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            let Op::Primitive {
                kind,
                inputs,
                saved,
            } = &node.op
            else {
                continue;
            };
            match (kind, saved) {
                (Primitive::Relu, _) => {
                    for &v in self.nodes[inputs[0].0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                (Primitive::MaxPool1d { .. }, Saved::Indices(idx)) => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Smallest distance of any recorded relu input from zero, or of any max-pool
    /// window maximum from its runner-up. Finite differences are only trustworthy
    /// when this exceeds the perturbation's effect.
    pub fn kink_margin(&self) -> T {
        let mut margin = T::infinity();
        for node in &self.nodes {
            let Op::Primitive { kind, inputs, .. } = &node.op else {
                continue;
            };
            let x = &self.nodes[inputs[0].0].value;
            match kind {
                Primitive::Relu => {
                    for &v in x.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Primitive::MaxPool1d { kernel, stride } if *kernel > 1 => {
                    let l = x.shape()[2];
                    let lout = node.value.shape()[2];
                    for row in x.data().chunks(l) {
                        for t in 0..lout {
                            let mut w: Vec<T> = row[t * stride..t * stride + kernel].to_vec();
                            w.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                            margin = margin.min(w[0] - w[1]);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::NoForward("loss is not recorded on this graph".into()))?;
        if matches!(node.op, Op::Input | Op::Leaf | Op::Param(_)) {
            return Err(Error::NoForward(
                "loss was not produced by a recorded forward".into(),
            ));
        }
        if node.value.numel() != 1 {
            return Err(Error::NoForward(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(node.value.shape(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions: Vec<(Var, Tensor<T>)> = match &node.op {
                Op::Input | Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Primitive {
                    kind,
                    inputs,
                    saved,
                } => {
                    let xs: Vec<&Tensor<T>> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> = inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect();
                    let dx = primitive::backward(
                        kind,
                        &xs,
                        &node.value,
                        saved,
                        &g,
                        &needs,
                        self.training,
                    );
                    inputs
                        .iter()
                        .zip(dx)
                        .filter_map(|(v, d)| d.map(|d| (*v, d)))
                        .collect()
                }
                Op::Fused { inputs, local } => {
                    let up = g.item();
                    inputs
                        .iter()
                        .zip(local)
                        .filter(|(v, _)| self.nodes[v.0].requires_grad)
                        .map(|(v, l)| (*v, l.map(|x| x * up)))
                        .collect()
                }
            };
            grads[i] = Some(g);
            for (v, d) in contributions {
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(d),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Zeroes the store's gradients, then fills them with d(loss)/d(param).
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.zero_grads();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(name), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}
