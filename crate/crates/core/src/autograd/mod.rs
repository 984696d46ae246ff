//! A small tape-based reverse-mode differentiation engine.
//!
//! Every operation appends a node holding its forward value and a closure that
//! maps the upstream gradient to gradients for each parent. Nodes are appended
//! after their parents, so reverse insertion order is a valid topological
//! order for the backward sweep.
//!
//! Operations are deliberately coarse: convolutions, normalization and the
//! matching/anchor kernels are single nodes with hand-derived adjoints, which
//! keeps tapes short and makes each adjoint checkable against finite
//! differences in isolation.

mod ops;

use std::collections::{BTreeMap, HashMap};

use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `(upstream grad, node output, parent values) -> grad per parent`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), false, None)
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), true, None)
    }

    /// The node for a named parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not registered")).clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Append a differentiable node computed outside the graph.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let parents: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let requires = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let backward = if requires { Some(backward) } else { None };
        self.push(value, parents, requires, backward)
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, parents, requires_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward() needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else { continue };
            let Some(upstream) = grads[idx].take() else { continue };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(&upstream, &node.value, &parent_vals);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads.get(v.0).and_then(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect();
        Gradients { grads, params }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if it was unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter touched by the graph. Parameters used but
    /// unreachable from the output get explicit zeros.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parent_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_parts(vec![2], vec![1.0, 2.0]));
        let y = g.mul(x, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(c, x);
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }
}
