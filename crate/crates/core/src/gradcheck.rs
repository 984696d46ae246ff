//! Central finite-difference checks for the hand-written adjoints.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward closures it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Uniform `[-1, 1)` tensor from a seed.
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform tensor in `[lo, hi)`.
pub fn rand_tensor_in(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Denominator floor for the relative error, so near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input or parameter label, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self { max_rel_err: 0.0, worst: None, checked: 0 }
    }

    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((label.to_string(), idx, analytic, numeric));
        }
    }
}

fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Checks the gradient of `f` with respect to every entry of every input,
/// or a deterministic sample of at most `max_per_input` entries per input.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, eps: f64, max_per_input: Option<usize>) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradCheckReport::new();
    for (k, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for idx in sample_indices(t.len(), max_per_input, k as u64) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= eps;
            let numeric = (eval_scalar(&plus, &f) - eval_scalar(&minus, &f)) / (2.0 * eps);
            report.record(&format!("input{k}"), idx, analytic.data()[idx], numeric);
        }
    }
    report
}

/// Panicking wrapper over [`check_inputs`] for unit tests.
pub fn assert_grads_match<F>(inputs: &[Tensor], f: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let report = check_inputs(inputs, f, 1e-6, None);
    assert!(
        report.max_rel_err < tol,
        "gradient check failed: max rel err {:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

/// Finite-difference check of parameter gradients. `loss` builds the scalar
/// from a fresh graph over `store`; up to `per_param` entries of each selected
/// parameter are perturbed.
pub fn check_params<F>(store: &ParamStore, names: &[String], loss: F, eps: f64, per_param: usize) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store);
    let grads = g.backward(out).into_params();
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let out = loss(&mut g, s);
        g.value(out).item()
    };

    let mut report = GradCheckReport::new();
    let mut work = store.clone();
    for (k, name) in names.iter().enumerate() {
        let base = store.get(name).unwrap_or_else(|| panic!("no parameter `{name}`")).clone();
        let zeros = Tensor::zeros(base.shape());
        let analytic = grads.get(name).unwrap_or(&zeros);
        for idx in sample_indices(base.len(), Some(per_param), 1000 + k as u64) {
            let orig = base.data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = orig + eps;
            let fp = eval(&work);
            work.get_mut(name).unwrap().data_mut()[idx] = orig - eps;
            let fm = eval(&work);
            work.get_mut(name).unwrap().data_mut()[idx] = orig;
            report.record(name, idx, analytic.data()[idx], (fp - fm) / (2.0 * eps));
        }
    }
    report
}

fn sample_indices(n: usize, max: Option<usize>, seed: u64) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..m {
                let j = rng.random_range(i..n);
                idx.swap(i, j);
            }
            idx.truncate(m);
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}
