//! Minimal neural-network toolkit: autodiff graph, parameter storage, layers
//! and an SGD optimizer.

mod graph;
mod layers;

pub use graph::{ConvGeometry, Gradients, Graph, Node, PoolGeometry};
pub use layers::{Conv2d, Linear};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Flat list of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Array2<f64>>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.tensors.push(value);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Array2<f64> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Array2<f64> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every tensor on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Node> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t.clone()))
            .collect()
    }

    /// Records every tensor on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Node> {
        bind_constants(g, &self.tensors)
    }
}

pub fn bind_constants(g: &mut Graph, tensors: &[Array2<f64>]) -> Vec<Node> {
    tensors.iter().map(|t| g.constant(t.clone())).collect()
}

/// He-normal initialisation for a `rows × cols` weight with the given fan-in.
pub fn he_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(rng, rows, cols, std)
}

pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Array2<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params
                .tensors()
                .iter()
                .map(|t| Array2::zeros(t.dim()))
                .collect(),
        }
    }

    /// Applies one update; parameters without a gradient only decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::internal("optimizer state does not match parameters"));
        }
        for (id, (theta, vel)) in params
            .tensors_mut()
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .enumerate()
        {
            let Some(g) = grads.param(id) else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient for parameter {id}")));
            }
            let wd = self.weight_decay;
            let mu = self.momentum;
            ndarray::Zip::from(&mut *vel)
                .and(g)
                .and(&*theta)
                .for_each(|v, &gv, &t| *v = mu * *v + gv + wd * t);
            theta.scaled_add(-lr, vel);
        }
        Ok(())
    }
}
