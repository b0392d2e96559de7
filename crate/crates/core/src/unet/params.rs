use std::collections::HashMap;

use crate::tensor::{Element, Graph, Tensor, Var};

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Panics on a duplicate name, which is a model bug.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Record every parameter on `g`, as trainable leaves or constants.
    pub fn bind<E: Element>(&self, g: &mut Graph<E>, trainable: bool) -> Binding<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let t = t.cast::<E>();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Binding { store: self, vars }
    }
}

/// Parameter handles on one graph.
#[derive(Debug)]
pub struct Binding<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Binding<'_> {
    /// Handle for `name`. Panics on unknown names, which is a model bug.
    pub fn var(&self, name: &str) -> Var {
        let i = self.store.position(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order, zeros where none flowed.
    pub fn grads<E: Element>(&self, g: &Graph<E>) -> Vec<Vec<f32>> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(v, t)| match g.grad(*v) {
                Some(d) => d.iter().map(|x| x.as_f64() as f32).collect(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }
}
