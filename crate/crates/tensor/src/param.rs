//! Named parameters with Adam state.

use std::collections::HashMap;

use crate::backward::backward;
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Element = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// First moment estimate.
    pub m: Tensor<T>,
    /// Second moment estimate.
    pub v: Tensor<T>,
    /// Frozen parameters are bound as constants and skipped by the optimizer.
    pub frozen: bool,
}

/// Ordered collection of named parameters plus the optimizer step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T: Element = f32> {
    entries: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Element = f32> {
    map: HashMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let zeros = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Parameter { name, value, m: zeros.clone(), v: zeros, frozen: false });
        Ok(())
    }

    /// Insert a fully specified entry, moments included.
    pub fn insert_parameter(&mut self, p: Parameter<T>) -> Result<()> {
        if self.index.contains_key(&p.name) {
            return Err(TensorError::DuplicateParameter(p.name));
        }
        let ok = p.m.shape() == p.value.shape() && p.v.shape() == p.value.shape();
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "insert_parameter",
                detail: format!("moments of `{}` do not match {:?}", p.name, p.value.shape()),
            });
        }
        self.index.insert(p.name.clone(), self.entries.len());
        self.entries.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(TensorError::UnknownParameter(name.to_string())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.get_mut(name)?.frozen = frozen;
        Ok(())
    }

    /// Overwrite a parameter's value with zeros.
    pub fn zero(&mut self, name: &str) -> Result<()> {
        let p = self.get_mut(name)?;
        p.value = Tensor::zeros(p.value.shape().to_vec());
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter on `graph`; frozen ones become constants.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> BoundParams<'g, T> {
        self.bind_with(graph, true)
    }

    /// Register every parameter on `graph` as a constant.
    pub fn bind_constant<'g>(&self, graph: &'g Graph<T>) -> BoundParams<'g, T> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> BoundParams<'g, T> {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                let train = trainable && !p.frozen;
                (p.name.clone(), graph.input(&p.value, train), train)
            })
            .collect();
        BoundParams { vars, index: self.index.clone() }
    }

    /// One bias-corrected Adam update over all unfrozen parameters.
    pub fn adam_step(&mut self, grads: &Gradients<T>, cfg: &AdamConfig) -> Result<()> {
        for p in self.entries.iter().filter(|p| !p.frozen) {
            let g = grads.get(&p.name).ok_or_else(|| TensorError::MissingGradient(p.name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(TensorError::GradientShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 - cfg.beta1.powf(t));
        let c2 = T::lit(1.0 - cfg.beta2.powf(t));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let one = T::one();
        for p in self.entries.iter_mut().filter(|p| !p.frozen) {
            let g = grads.get(&p.name).expect("checked above").data();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            let w = p.value.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Parameters registered on one graph.
pub struct BoundParams<'g, T: Element = f32> {
    vars: Vec<(String, Var<'g, T>, bool)>,
    index: HashMap<String, usize>,
}

impl<'g, T: Element> BoundParams<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i].1)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> {
        self.vars.iter().filter(|v| v.2).map(|(n, v, _)| (n.as_str(), *v))
    }

    /// Gradients of `loss` for every trainable parameter.
    pub fn gradients(&self, loss: Var<'g, T>) -> Result<Gradients<T>> {
        let (names, vars): (Vec<&str>, Vec<Var<'g, T>>) = self.trainable().unzip();
        let grads = backward(loss, &vars, false)?;
        let mut out = Gradients::new();
        for (name, g) in names.into_iter().zip(grads) {
            out.insert(name, g.value());
        }
        Ok(out)
    }
}
