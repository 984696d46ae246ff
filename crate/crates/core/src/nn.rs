//! Parameter storage and the handful of layers the network is built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Named parameters, keyed by hierarchical dotted names
/// (e.g. `backbone.rgb.s1.conv_a.weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters whose names start with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        Self { params }
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    /// Same-padded convolution with bias.
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride, pad: kernel / 2, bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Fan-in scaled normal weights (`std = gain / sqrt(fan_in)`), bias set to `bias_init`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, gain: f64, bias_init: f64) {
        let fan_in = (self.cin * self.kernel * self.kernel) as f64;
        let shape = [self.cout, self.cin, self.kernel, self.kernel];
        store.insert(self.weight_name(), normal_tensor(&shape, gain / fan_in.sqrt(), rng));
        if self.bias {
            store.insert(self.bias_name(), Tensor::full(&[self.cout], bias_init));
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, &self.weight_name());
        let b = self.bias.then(|| g.param(store, &self.bias_name()));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    /// Up to `max_groups` groups, reduced until it divides `channels`.
    pub fn new(name: impl Into<String>, channels: usize, max_groups: usize) -> Self {
        let mut groups = max_groups.min(channels).max(1);
        while !channels.is_multiple_of(groups) {
            groups -= 1;
        }
        Self { name: name.into(), channels, groups }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.name), Tensor::full(&[self.channels], 1.0));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, &format!("{}.gamma", self.name));
        let beta = g.param(store, &format!("{}.beta", self.name));
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}

/// Two 3x3 convolutions with a GELU between them, ending in one channel.
/// Used for every sigmoid-gated map branch (prior, reliability).
#[derive(Clone, Debug)]
pub struct MapBranch {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

impl MapBranch {
    pub fn new(name: &str, cin: usize, hidden: usize) -> Self {
        Self {
            conv_a: Conv2d::new(format!("{name}.conv_a"), cin, hidden, 3, 1),
            conv_b: Conv2d::new(format!("{name}.conv_b"), hidden, 1, 3, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, final_bias: f64) {
        self.conv_a.init(store, rng, 2f64.sqrt(), 0.0);
        self.conv_b.init(store, rng, 1.0, final_bias);
    }

    /// Pre-sigmoid logits.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv_a.forward(g, store, x);
        let h = g.gelu(h);
        self.conv_b.forward(g, store, h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let l = self.logits(g, store, x);
        g.sigmoid(l)
    }
}
