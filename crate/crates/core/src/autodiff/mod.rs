//! A small reverse-mode differentiation core.
//!
//! A [`Graph`] records a forward pass as an append-only list of nodes; every
//! node can only reference earlier nodes, so the list is already in
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Parameters live in a [`ParamStore`] and are bound into a graph by name.

mod gradcheck;
mod graph;
pub(crate) mod ops;

pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use graph::{Gradients, Graph, Var};

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v], grad: None }
    }

    /// Uniform in `±bound`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { shape, data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch("gradient length differs from data".into()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Copies gradients into each tensor's `grad` slot; parameters absent from
    /// `grads` get a zero gradient.
    pub fn attach_grads(&mut self, grads: &Gradients) {
        for (name, t) in self.tensors.iter_mut() {
            let g = grads.get(name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            t.grad = Some(g);
        }
    }
}

/// First-order optimizers over a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient descent with a fixed step.
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        #[serde(skip)]
        state: AdamState,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd { lr: 1e-3 }
    }
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: AdamState::default() }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn set_lr(&mut self, value: f64) {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr = value,
        }
    }

    /// Applies one update. Parameters listed in `frozen` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, frozen: &[&str]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (name, t) in params.iter_mut() {
                    if frozen.iter().any(|f| name.starts_with(f)) {
                        continue;
                    }
                    if let Some(g) = grads.get(name) {
                        for (p, g) in t.data.iter_mut().zip(g) {
                            *p -= *lr * g;
                        }
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, state } => {
                state.step += 1;
                let bc1 = 1.0 - beta1.powi(state.step as i32);
                let bc2 = 1.0 - beta2.powi(state.step as i32);
                for (name, t) in params.iter_mut() {
                    if frozen.iter().any(|f| name.starts_with(f)) {
                        continue;
                    }
                    let Some(g) = grads.get(name) else { continue };
                    let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * g[i];
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        t.data[i] -= *lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::ShapeMismatch(_))));
        let mut t = Tensor::zeros(vec![2]);
        assert!(t.set_grad(vec![1.0]).is_err());
        t.set_grad(vec![1.0, 2.0]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn sgd_step_and_freeze() {
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        p.insert("b.w", Tensor::new(vec![1], vec![5.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param("a.w", p.get("a.w").unwrap());
        let b = g.param("b.w", p.get("b.w").unwrap());
        let sa = g.sum(a);
        let sb = g.sum(b);
        let loss = g.add(sa, sb);
        let grads = g.backward(loss).unwrap();
        let mut opt = Optimizer::Sgd { lr: 0.5 };
        opt.step(&mut p, &grads, &["b."]);
        assert_eq!(p.get("a.w").unwrap().data(), &[0.5, 1.5]);
        assert_eq!(p.get("b.w").unwrap().data(), &[5.0]);
    }
}
