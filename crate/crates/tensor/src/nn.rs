//! Parameter storage and the handful of layers the model is built from.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::{Grads, Graph, Scalar, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Binds a [`ParamStore`] to a [`Graph`] for one forward pass, creating leaf
/// variables lazily.
pub struct Binder<'g, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, T: Scalar> Binder<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Binder { graph, store, vars: RefCell::new(vec![None; store.len()]) }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.graph.leaf(self.store.get(id).clone()))
    }

    /// Per-parameter gradients; `None` for parameters that were never bound or
    /// that no path from the loss reaches.
    pub fn collect(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.borrow().iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

/// Seeded RNG used for parameter initialisation.
pub struct InitRng(StdRng);

impl InitRng {
    pub fn new(seed: u64) -> Self {
        InitRng(StdRng::seed_from_u64(seed))
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut self.0)))
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut self.0)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }
}

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform initialised layer.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), rng.uniform(&[in_dim, out_dim], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear { weight, bias, in_dim, out_dim }
    }

    /// Square layer initialised to the identity map.
    pub fn identity<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::eye(dim));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[dim])));
        Linear { weight, bias, in_dim: dim, out_dim: dim }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(p.param(self.weight), self.bias.map(|b| p.param(b)))
    }
}

/// 3×3×3 convolution layer.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv3d {
    /// He-normal initialised convolution.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let std = (2.0 / (cin * 27) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), rng.normal(&[cout, cin * 27], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv3d { weight, bias, stride }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv3d(p.param(self.weight), Some(p.param(self.bias)), self.stride)
    }
}

/// Which axis a [`Norm`] normalises over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per channel, over all voxels of a `[C, ...]` tensor.
    Instance,
    /// Per voxel, over the channels of a `[C, ...]` tensor.
    Channel,
    /// Per row of a `[m, n]` matrix.
    Layer,
}

/// Normalisation with a learnable affine map.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub kind: NormKind,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, kind: NormKind) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Norm { gamma, beta, kind }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let (g, b) = (p.param(self.gamma), p.param(self.beta));
        let eps = T::lit(1e-5);
        match self.kind {
            NormKind::Instance => x.instance_norm(g, b, eps),
            NormKind::Layer => x.layer_norm_rows(g, b, eps),
            NormKind::Channel => {
                let shape = x.shape();
                let v: usize = shape[1..].iter().product();
                x.reshape(&[shape[0], v])
                    .transpose()
                    .layer_norm_rows(g, b, eps)
                    .transpose()
                    .reshape(&shape)
            }
        }
    }
}
