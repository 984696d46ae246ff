//! Crowd-aware prior branch and its BCE + Dice supervision.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::data::NUM_STAGES;
use crate::error::{Error, Result};
use crate::nn::{MapBranch, ParamStore};
use crate::tensor::Tensor;

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;
/// BCE clamps predictions into `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-6;
/// Initial bias of every sigmoid-gated branch's last layer.
pub const SIGMOID_BRANCH_BIAS: f64 = -2.0;

/// One `phi_p^l` per stage: `4 d^l -> d^l -> 1`.
#[derive(Clone, Debug)]
pub struct PriorBranches {
    pub branches: Vec<MapBranch>,
}

impl PriorBranches {
    pub fn new(dims: [usize; NUM_STAGES]) -> Self {
        Self {
            branches: (0..NUM_STAGES)
                .map(|l| MapBranch::new(&format!("prior.{}", l + 1), 4 * dims[l], dims[l]))
                .collect(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.branches.iter().for_each(|b| b.init(store, rng, SIGMOID_BRANCH_BIAS));
    }

    /// `P^l = sigmoid(phi_p^l([Qr, Qt, |Qr - Qt|, Qr * Qt]))`; `l` is 1-based.
    pub fn crowd_prior(&self, g: &mut Graph, store: &ParamStore, l: usize, qr: Var, qt: Var) -> Result<Var> {
        if g.shape(qr) != g.shape(qt) {
            return Err(Error::ShapeMismatch(format!("Q_r {:?} vs Q_t {:?}", g.shape(qr), g.shape(qt))));
        }
        let x = prior_input(g, qr, qt);
        Ok(self.branches[l - 1].forward(g, store, x))
    }
}

pub(crate) fn prior_input(g: &mut Graph, qr: Var, qt: Var) -> Var {
    let diff = g.sub(qr, qt);
    let diff = g.abs(diff);
    let prod = g.mul(qr, qt);
    g.concat(&[qr, qt, diff, prod])
}

/// `mean BCE(P, P~) + 1 - Dice(P, P~)`.
pub fn cap_loss_value(p: &Tensor, target: &Tensor) -> Result<f64> {
    if p.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!("prior {:?} vs label {:?}", p.shape(), target.shape())));
    }
    let n = p.len() as f64;
    let mut bce = 0.0;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&x, &t) in p.data().iter().zip(target.data()) {
        let c = x.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        bce -= t * c.ln() + (1.0 - t) * (1.0 - c).ln();
        inter += x * t;
        sp += x;
        st += t;
    }
    let dice = (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS);
    Ok(bce / n + 1.0 - dice)
}

impl Graph {
    /// Differentiable [`cap_loss_value`]; the label receives no gradient.
    pub fn cap_loss(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let v = cap_loss_value(self.value(p), target)?;
        let t = target.clone();
        Ok(self.custom(
            &[p],
            Tensor::scalar(v),
            Box::new(move |g, _, par| {
                let p = par[0];
                let n = p.len() as f64;
                let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
                for (&x, &y) in p.data().iter().zip(t.data()) {
                    inter += x * y;
                    sp += x;
                    st += y;
                }
                let num = 2.0 * inter + DICE_EPS;
                let den = sp + st + DICE_EPS;
                let up = g.item();
                let d = p.zip_map(&t, |x, y| {
                    let dbce = if x > BCE_CLAMP && x < 1.0 - BCE_CLAMP { (x - y) / (x * (1.0 - x)) } else { 0.0 };
                    // d(1 - num/den)/dx = -(2y den - num) / den^2
                    let ddice = -(2.0 * y * den - num) / (den * den);
                    up * (dbce / n + ddice)
                });
                vec![d]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, check_params, rand_tensor, rand_tensor_in};
    use rand::SeedableRng;

    #[test]
    fn analytic_values() {
        let half = Tensor::full(&[1, 3, 3], 0.5);
        // soft Dice of two 0.5 maps over 9 pixels: (2 * 2.25 + 1) / (4.5 + 4.5 + 1)
        let v = cap_loss_value(&half, &half).unwrap();
        assert!((v - (2f64.ln() + 1.0 - 0.55)).abs() < 1e-12);
        let zero = Tensor::zeros(&[1, 3, 3]);
        assert!(cap_loss_value(&zero, &zero).unwrap().abs() < 1e-5);
        assert!(cap_loss_value(&zero, &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn matches_summation_oracle() {
        let p = rand_tensor_in(&[1, 8, 8], 0.0, 1.0, 1);
        let t = rand_tensor_in(&[1, 8, 8], 0.0, 1.0, 2);
        let mut bce = 0.0;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for i in 0..64 {
            let (x, y) = (p.data()[i], t.data()[i]);
            bce += -(y * x.ln() + (1.0 - y) * (1.0 - x).ln());
            a += x * y;
            b += x;
            c += y;
        }
        let want = bce / 64.0 + 1.0 - (2.0 * a + 1.0) / (b + c + 1.0);
        assert!((cap_loss_value(&p, &t).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let t = rand_tensor_in(&[1, 4, 4], 0.0, 1.0, 3);
        assert_grads_match(&[rand_tensor_in(&[1, 4, 4], 0.05, 0.95, 4)], |g, v| g.cap_loss(v[0], &t).unwrap(), 1e-5);
    }

    #[test]
    fn prior_in_unit_interval_and_matches_oracle() {
        let pb = PriorBranches::new([2, 2, 2, 2]);
        let mut store = ParamStore::new();
        pb.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let qr = rand_tensor(&[2, 4, 4], 5);
        let qt = rand_tensor(&[2, 4, 4], 6);
        let mut g = Graph::new();
        let (a, b) = (g.constant(qr.clone()), g.constant(qt.clone()));
        let p = pb.crowd_prior(&mut g, &store, 1, a, b).unwrap();
        let p = g.value(p).clone();
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));

        // straight-line oracle: four blocks, two 3x3 convs with zero padding
        let x: Vec<f64> = qr
            .data()
            .iter()
            .cloned()
            .chain(qt.data().iter().cloned())
            .chain(qr.data().iter().zip(qt.data()).map(|(a, b)| (a - b).abs()))
            .chain(qr.data().iter().zip(qt.data()).map(|(a, b)| a * b))
            .collect();
        let conv = |x: &[f64], cin: usize, w: &Tensor, b: &Tensor, cout: usize| {
            let mut y = vec![0.0; cout * 16];
            for co in 0..cout {
                for yy in 0..4i64 {
                    for xx in 0..4i64 {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (iy, ix) = (yy + ky - 1, xx + kx - 1);
                                    if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                        acc += w.data()[((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize]
                                            * x[ci * 16 + (iy * 4 + ix) as usize];
                                    }
                                }
                            }
                        }
                        y[co * 16 + (yy * 4 + xx) as usize] = acc;
                    }
                }
            }
            y
        };
        let h = conv(&x, 8, store.get("prior.1.conv_a.weight").unwrap(), store.get("prior.1.conv_a.bias").unwrap(), 2);
        let h: Vec<f64> = h
            .iter()
            .map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let o = conv(&h, 2, store.get("prior.1.conv_b.weight").unwrap(), store.get("prior.1.conv_b.bias").unwrap(), 1);
        for (a, b) in p.data().iter().zip(&o) {
            assert!((a - 1.0 / (1.0 + (-b).exp())).abs() < 1e-5);
        }
    }

    #[test]
    fn equal_inputs_are_well_defined() {
        let pb = PriorBranches::new([3, 3, 3, 3]);
        let mut store = ParamStore::new();
        pb.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let q = rand_tensor(&[3, 4, 4], 9);
        let mut g = Graph::new();
        let (a, b) = (g.constant(q.clone()), g.constant(q));
        let p = pb.crowd_prior(&mut g, &store, 2, a, b).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let c = g.constant(Tensor::zeros(&[2, 4, 4]));
        assert!(pb.crowd_prior(&mut g, &store, 2, a, c).is_err());
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let pb = PriorBranches::new([2, 2, 2, 2]);
        let mut store = ParamStore::new();
        pb.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let qr = rand_tensor(&[2, 4, 4], 10);
        let qt = rand_tensor(&[2, 4, 4], 11);
        let t = rand_tensor_in(&[1, 4, 4], 0.0, 1.0, 12);
        let names: Vec<String> = store.names().into_iter().filter(|n| n.starts_with("prior.1.")).collect();
        let r = check_params(
            &store,
            &names,
            |g, s| {
                let (a, b) = (g.constant(qr.clone()), g.constant(qt.clone()));
                let p = pb.crowd_prior(g, s, 1, a, b).unwrap();
                g.cap_loss(p, &t).unwrap()
            },
            1e-6,
            6,
        );
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
