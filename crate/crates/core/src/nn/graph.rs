//! Dynamically recorded reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every op applied to its
//! [`Var`]s. [`Graph::backward`] walks the record in reverse from a scalar loss
//! and returns gradients for the trainable parameters that contributed to it.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<F> = Box<dyn Fn(&Tensor<F>, &Values<'_, F>, &mut GradSink<F>)>;

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

struct Node<F> {
    value: Value<F>,
    requires_grad: bool,
    backward: Option<BackFn<F>>,
}

/// Read access to node values during the backward pass.
pub struct Values<'a, F> {
    nodes: &'a [Node<F>],
    store: &'a ParamStore<F>,
}

impl<'a, F: Real> Values<'a, F> {
    pub fn get(&self, v: Var) -> &'a Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.get(*id).value,
        }
    }
}

/// Gradient accumulators for the nodes of a graph.
pub struct GradSink<F> {
    grads: Vec<Option<Tensor<F>>>,
    requires: Vec<bool>,
}

impl<F: Real> GradSink<F> {
    /// Mutable gradient buffer for `v`, zero-initialised with `shape`, or
    /// `None` when `v` does not need a gradient.
    pub fn slot(&mut self, v: Var, shape: &[usize]) -> Option<&mut [F]> {
        if !self.requires[v.0] {
            return None;
        }
        let g = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        Some(g.data_mut())
    }

    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }
}

pub struct Graph<'s, F: Real> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'s, F: Real> Graph<'s, F> {
    /// Inference graph: dropout disabled.
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training graph: dropout active, masks drawn from `seed`.
    pub fn training(store: &'s ParamStore<F>, seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Graph::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.get(*id).value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            requires_grad: false,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            requires_grad: self.store.get(id).trainable,
            backward: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Records an op result. `backward` is kept only if a parent needs a gradient.
    pub(crate) fn push(
        &mut self,
        value: Tensor<F>,
        parents: &[Var],
        backward: impl Fn(&Tensor<F>, &Values<'_, F>, &mut GradSink<F>) + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every trainable parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let n = loss.0 + 1;
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            requires: self.nodes[..n].iter().map(|n| n.requires_grad).collect(),
        };
        let mut out = Grads::new(self.store.len());
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        sink.grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        let values = Values {
            nodes: &self.nodes,
            store: self.store,
        };
        for i in (0..n).rev() {
            let Some(g) = sink.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match (&node.value, &node.backward) {
                (Value::Param(id), _) => out.insert(*id, g),
                (_, Some(f)) => f(&g, &values, &mut sink),
                _ => {}
            }
        }
        Ok(out)
    }
}
