use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameters in insertion order.
///
/// Iteration order is the order of insertion and is what checkpoints use.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, name: &str, t: Tensor<T>) {
        if let Some(slot) = self.params.get_mut(name) {
            *slot = t;
        } else {
            self.params.insert(name.to_string(), t);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sub-store of parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self { params }
    }

    /// Copies every entry of `other` into `self` (insert or replace).
    pub fn merge(&mut self, other: &Self) {
        for (k, v) in other.iter() {
            self.set(k, v.clone());
        }
    }

    /// Puts every parameter on `graph`; `trainable` decides which ones
    /// require gradients.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(k, v.clone(), trainable(k))))
            .collect();
        Binding { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Parameter names mapped to the graph nodes that hold them.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Adds bindings from another store bound on the same graph.
    pub fn extend(&mut self, other: Binding) {
        self.vars.extend(other.vars);
    }
}

/// Orthogonal `rows x cols` matrix scaled by `gain`.
///
/// Gaussian draws are orthonormalised with modified Gram-Schmidt along the
/// shorter side.
pub fn orthogonal<T: Scalar>(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let (short, long) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut data = vec![T::zero(); rows * cols];
    for (s, b) in basis.iter().enumerate() {
        for (l, &x) in b.iter().enumerate() {
            let (r, c) = if rows <= cols { (s, l) } else { (l, s) };
            data[r * cols + c] = T::c(gain * x);
        }
    }
    Tensor::new(&[rows, cols], data).expect("sized above")
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::c(std * z)
        })
        .collect::<Vec<_>>();
    Tensor::new(shape, data).expect("sized above")
}
