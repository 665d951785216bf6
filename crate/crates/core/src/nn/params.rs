use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Named parameter tensors of one or more modules.
///
/// Ids are dense insertion indices; names are dot-separated paths and unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, trainable: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = trainable(&p.name);
        }
    }

    /// Copies values for every parameter whose name also exists in `other`.
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore<F>) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "load",
                        format!(
                            "`{}`: {:?} vs {:?}",
                            p.name,
                            p.value.shape(),
                            src.value.shape()
                        ),
                    ));
                }
                p.value = src.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn convert<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.convert(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and values of parameters whose names start with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-parameter gradient accumulators, indexed like the owning store.
#[derive(Clone, Debug)]
pub struct Grads<F> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn new(num_params: usize) -> Self {
        Grads {
            slots: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<F>) {
        if id.0 >= self.slots.len() {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(existing) => existing.add_assign(&grad),
            slot => *slot = Some(grad),
        }
    }

    pub fn accumulate(&mut self, other: Grads<F>) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.insert(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::all_finite)
    }
}

/// Weight init `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<F: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape product")
}

pub fn normal<F: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape product")
}
