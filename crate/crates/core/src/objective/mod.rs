//! Discrepancy-aware consistency, the Bayesian counting loss, the total
//! stage-2 objective and the evaluation metrics.

mod metrics;

use std::rc::Rc;

use rand::Rng;

pub use metrics::{cell_counts, game, game_single, mae, point_cell_counts, rmse};

use crate::autograd::{Graph, Var};
use crate::data::{PointAnnotation, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::prior::SIGMOID_BRANCH_BIAS;
use crate::tensor::Tensor;

/// Posterior kernel width in full-resolution pixels.
pub const POSTERIOR_SIGMA: f64 = 8.0;
/// Default consistency weight.
pub const LAMBDA_CONS: f64 = 0.1;

/// `phi_d^l`: one 3x3 convolution `d^l -> 1` per stage.
#[derive(Clone, Debug)]
pub struct DiscrepancyBranches {
    pub convs: Vec<Conv2d>,
}

impl DiscrepancyBranches {
    pub fn new(dims: [usize; NUM_STAGES]) -> Self {
        Self { convs: (0..NUM_STAGES).map(|l| Conv2d::new(format!("disc.{}", l + 1), dims[l], 1, 3, 1)).collect() }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.convs.iter().for_each(|c| c.init(store, rng, 1.0, SIGMOID_BRANCH_BIAS));
    }

    /// `D^l = sigmoid(phi_d^l(|Q_r - Q_t|))`.
    pub fn discrepancy(&self, g: &mut Graph, store: &ParamStore, l: usize, qr: Var, qt: Var) -> Result<Var> {
        if g.shape(qr) != g.shape(qt) {
            return Err(Error::ShapeMismatch(format!("Q_r {:?} vs Q_t {:?}", g.shape(qr), g.shape(qt))));
        }
        let d = g.sub(qr, qt);
        let d = g.abs(d);
        let d = self.convs[l - 1].forward(g, store, d);
        Ok(g.sigmoid(d))
    }
}

/// `mean_i (1 - D_i) |R_r(i) - R_t(i)|`.
pub fn cons_loss_value(rr: &Tensor, rt: &Tensor, d: &Tensor) -> Result<f64> {
    if rr.shape() != rt.shape() || rr.shape() != d.shape() {
        return Err(Error::ShapeMismatch(format!("R_r {:?}, R_t {:?}, D {:?}", rr.shape(), rt.shape(), d.shape())));
    }
    let s: f64 = rr.data().iter().zip(rt.data()).zip(d.data()).map(|((a, b), d)| (1.0 - d) * (a - b).abs()).sum();
    Ok(s / rr.len() as f64)
}

/// Bayesian-loss responsibilities `p_i[j] = g(x_j; z_i) / sum_k g(x_j; z_k)`
/// over pixel centres, one `[1, H, W]` map per point. Every pixel's unit of
/// mass is split among the points, so `sum_i p_i[j] = 1`.
pub fn point_posteriors(points: &[PointAnnotation], h: usize, w: usize, sigma: f64) -> Result<Vec<Tensor>> {
    if points.is_empty() {
        return Err(Error::NoPoints);
    }
    if sigma <= 0.0 {
        return Err(Error::Config(format!("posterior sigma must be positive, got {sigma}")));
    }
    let n = points.len();
    let mut out: Vec<Vec<f64>> = vec![vec![0.0; h * w]; n];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut logits = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut mx = f64::NEG_INFINITY;
            for (k, p) in points.iter().enumerate() {
                logits[k] = -((px - p.x).powi(2) + (py - p.y).powi(2)) * inv;
                mx = mx.max(logits[k]);
            }
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for k in 0..n {
                out[k][y * w + x] = (logits[k] - mx).exp() / z;
            }
        }
    }
    Ok(out.into_iter().map(|v| Tensor::from_parts(vec![1, h, w], v)).collect())
}

/// Expected count per point, `c_i = sum_j p_i[j] Y[j]`.
pub fn expected_counts(density: &Tensor, posteriors: &[Tensor]) -> Vec<f64> {
    posteriors.iter().map(|p| p.data().iter().zip(density.data()).map(|(a, b)| a * b).sum()).collect()
}

/// `mean_i |1 - c_i|`, or `sum Y` when there are no points.
pub fn count_loss_value(density: &Tensor, posteriors: &[Tensor]) -> f64 {
    if posteriors.is_empty() {
        return density.sum();
    }
    let c = expected_counts(density, posteriors);
    c.iter().map(|c| (1.0 - c).abs()).sum::<f64>() / c.len() as f64
}

/// Stage-2 objective `L_cnt + lambda * sum_l L_cons^l` from its parts.
pub fn total_loss_value(cnt: f64, cons: &[f64], lambda: f64) -> f64 {
    cnt + lambda * cons.iter().sum::<f64>()
}

impl Graph {
    /// Differentiable [`cons_loss_value`].
    pub fn cons_loss(&mut self, rr: Var, rt: Var, d: Var) -> Result<Var> {
        let v = cons_loss_value(self.value(rr), self.value(rt), self.value(d))?;
        Ok(self.custom(
            &[rr, rt, d],
            Tensor::scalar(v),
            Box::new(|g, _, p| {
                let n = p[0].len() as f64;
                let up = g.item() / n;
                let sh = p[0].shape().to_vec();
                let (mut da, mut db, mut dd) = (vec![0.0; p[0].len()], vec![0.0; p[0].len()], vec![0.0; p[0].len()]);
                for i in 0..p[0].len() {
                    let (a, b, d) = (p[0].data()[i], p[1].data()[i], p[2].data()[i]);
                    let s = if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    };
                    da[i] = up * (1.0 - d) * s;
                    db[i] = -da[i];
                    dd[i] = -up * (a - b).abs();
                }
                vec![Tensor::from_parts(sh.clone(), da), Tensor::from_parts(sh.clone(), db), Tensor::from_parts(sh, dd)]
            }),
        ))
    }

    /// Differentiable [`count_loss_value`] with respect to the density.
    pub fn count_loss(&mut self, density: Var, posteriors: Rc<Vec<Tensor>>) -> Result<Var> {
        if let Some(p) = posteriors.first() {
            if p.shape() != self.shape(density) {
                return Err(Error::ShapeMismatch(format!(
                    "posterior {:?} vs density {:?}",
                    p.shape(),
                    self.shape(density)
                )));
            }
        }
        let v = count_loss_value(self.value(density), &posteriors);
        Ok(self.custom(
            &[density],
            Tensor::scalar(v),
            Box::new(move |g, _, p| {
                let up = g.item();
                if posteriors.is_empty() {
                    return vec![Tensor::full(p[0].shape(), up)];
                }
                let c = expected_counts(p[0], &posteriors);
                let n = c.len() as f64;
                let mut d = Tensor::zeros(p[0].shape());
                for (ci, post) in c.iter().zip(posteriors.iter()) {
                    // d|1 - c|/dc = -sign(1 - c)
                    let s = if *ci < 1.0 {
                        -1.0
                    } else if *ci > 1.0 {
                        1.0
                    } else {
                        0.0
                    };
                    for (dv, pv) in d.data_mut().iter_mut().zip(post.data()) {
                        *dv += up * s * pv / n;
                    }
                }
                vec![d]
            }),
        ))
    }

    /// `L_cnt + lambda * sum(cons)`.
    pub fn total_loss(&mut self, cnt: Var, cons: &[Var], lambda: f64) -> Var {
        let mut acc: Option<Var> = None;
        for &c in cons {
            acc = Some(match acc {
                None => c,
                Some(a) => self.add(a, c),
            });
        }
        match acc {
            Some(a) if lambda != 0.0 => {
                let s = self.scale(a, lambda);
                self.add(cnt, s)
            }
            _ => cnt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, rand_tensor, rand_tensor_in};
    use rand::SeedableRng;

    #[test]
    fn cons_loss_cases() {
        let r = rand_tensor_in(&[1, 4, 4], 0.0, 1.0, 1);
        let d = rand_tensor_in(&[1, 4, 4], 0.0, 1.0, 2);
        assert_eq!(cons_loss_value(&r, &r, &d).unwrap(), 0.0);
        let r2 = rand_tensor_in(&[1, 4, 4], 0.0, 1.0, 3);
        assert_eq!(cons_loss_value(&r, &r2, &Tensor::full(&[1, 4, 4], 1.0)).unwrap(), 0.0);
        let one = Tensor::full(&[1, 4, 4], 1.0);
        let zero = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(cons_loss_value(&one, &zero, &zero).unwrap(), 1.0);
        assert!(cons_loss_value(&one, &zero, &Tensor::zeros(&[1, 4, 3])).is_err());
    }

    #[test]
    fn discrepancy_is_constant_on_equal_inputs() {
        let b = DiscrepancyBranches::new([3, 3, 3, 3]);
        let mut store = ParamStore::new();
        b.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&[3, 4, 4], 4));
        let d = b.discrepancy(&mut g, &store, 1, q, q).unwrap();
        let want = 1.0 / (1.0 + 2f64.exp());
        assert!(g.value(d).data().iter().all(|&v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn posteriors_partition_each_pixel() {
        let pts = vec![PointAnnotation::new(3.0, 4.0), PointAnnotation::new(10.5, 2.0), PointAnnotation::new(7.0, 7.0)];
        let post = point_posteriors(&pts, 9, 12, 2.0).unwrap();
        for j in 0..108 {
            let s: f64 = post.iter().map(|p| p.data()[j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let one = point_posteriors(&pts[..1], 5, 5, 8.0).unwrap();
        assert!(one[0].data().iter().all(|&v| v == 1.0));
        assert!(matches!(point_posteriors(&[], 4, 4, 8.0), Err(Error::NoPoints)));
    }

    #[test]
    fn far_apart_points_split_a_blob() {
        let pts = vec![PointAnnotation::new(10.0, 10.0), PointAnnotation::new(60.0, 60.0)];
        let (h, w) = (72, 72);
        let post = point_posteriors(&pts, h, w, POSTERIOR_SIGMA).unwrap();
        let mut y = Tensor::from_fn(&[1, h, w], |i| {
            let (yy, xx) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            (-((xx - 10.0).powi(2) + (yy - 10.0).powi(2)) / 8.0).exp()
        });
        let s = y.sum();
        y = y.scale(1.0 / s);
        let c = expected_counts(&y, &post);
        assert!((c[0] - 1.0).abs() < 0.05 && c[1].abs() < 0.05, "{c:?}");
    }

    #[test]
    fn count_loss_cases() {
        // mirror-symmetric pair: a uniform density splits evenly
        let pts = vec![PointAnnotation::new(2.0, 4.0), PointAnnotation::new(6.0, 4.0)];
        let post = point_posteriors(&pts, 8, 8, 8.0).unwrap();
        assert_eq!(count_loss_value(&Tensor::zeros(&[1, 8, 8]), &post), 1.0);
        assert_eq!(count_loss_value(&Tensor::full(&[1, 8, 8], 0.5), &[]), 32.0);
        let y = Tensor::full(&[1, 8, 8], 2.0 / 64.0);
        assert!(count_loss_value(&y, &post) < 1e-12);
    }

    #[test]
    fn total_loss_reduces_to_count() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(0.7));
        let a = g.constant(Tensor::scalar(0.2));
        let b = g.constant(Tensor::scalar(0.4));
        let t0 = g.total_loss(c, &[a, b], 0.0);
        assert_eq!(g.value(t0).item(), 0.7);
        let t1 = g.total_loss(c, &[a, b], 0.1);
        assert!((g.value(t1).item() - total_loss_value(0.7, &[0.2, 0.4], 0.1)).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert_grads_match(
            &[
                rand_tensor_in(&[1, 4, 4], 0.0, 1.0, 5),
                rand_tensor_in(&[1, 4, 4], 0.0, 1.0, 6),
                rand_tensor_in(&[1, 4, 4], 0.0, 1.0, 7),
            ],
            |g, v| g.cons_loss(v[0], v[1], v[2]).unwrap(),
            1e-5,
        );
        let pts = vec![PointAnnotation::new(1.5, 2.0), PointAnnotation::new(4.0, 3.5), PointAnnotation::new(5.5, 0.5)];
        let post = Rc::new(point_posteriors(&pts, 6, 6, 2.0).unwrap());
        assert_grads_match(
            &[rand_tensor_in(&[1, 6, 6], 0.0, 0.2, 8)],
            |g, v| g.count_loss(v[0], post.clone()).unwrap(),
            1e-5,
        );
    }
}
