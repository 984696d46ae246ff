//! Sparse softmax aggregation shared by local soft matching, anchor
//! redistribution and the dense attention baseline.
//!
//! Every query `i` owns a candidate list of key indices. The weight of key
//! `m` is the softmax over the list of `q_i . k_m * scale + b_m`, and the
//! output is `sum_m alpha_im k_m`: keys double as values.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Candidate keys per query in compressed-row form. Each entry also carries a
/// slot number so weights can be laid out on a fixed window grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub queries: usize,
    pub keys: usize,
    /// Width of the slot layout (window size); entries use `slot < slots`.
    pub slots: usize,
    offsets: Vec<usize>,
    key: Vec<u32>,
    slot: Vec<u32>,
}

impl Candidates {
    pub fn builder(queries: usize, keys: usize, slots: usize) -> CandidatesBuilder {
        CandidatesBuilder {
            c: Candidates {
                queries,
                keys,
                slots,
                offsets: Vec::with_capacity(queries + 1),
                key: Vec::new(),
                slot: Vec::new(),
            },
        }
    }

    /// Every query sees every key.
    pub fn dense(queries: usize, keys: usize) -> Self {
        let mut b = Self::builder(queries, keys, keys);
        for _ in 0..queries {
            for m in 0..keys {
                b.push(m, m);
            }
            b.finish_query();
        }
        b.build()
    }

    /// Total query-key pairs, i.e. the number of similarity evaluations.
    pub fn interactions(&self) -> usize {
        self.key.len()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn key_at(&self, e: usize) -> usize {
        self.key[e] as usize
    }

    pub fn slot_at(&self, e: usize) -> usize {
        self.slot[e] as usize
    }
}

pub struct CandidatesBuilder {
    c: Candidates,
}

impl CandidatesBuilder {
    pub fn push(&mut self, key: usize, slot: usize) {
        debug_assert!(key < self.c.keys && slot < self.c.slots);
        if self.c.offsets.is_empty() {
            self.c.offsets.push(0);
        }
        self.c.key.push(key as u32);
        self.c.slot.push(slot as u32);
    }

    pub fn finish_query(&mut self) {
        if self.c.offsets.is_empty() {
            self.c.offsets.push(0);
        }
        self.c.offsets.push(self.c.key.len());
    }

    pub fn build(mut self) -> Candidates {
        if self.c.offsets.is_empty() {
            self.c.offsets.push(0);
        }
        assert_eq!(self.c.offsets.len(), self.c.queries + 1, "finish_query not called for every query");
        self.c
    }
}

/// Result of a forward evaluation; `alpha` is aligned with the candidate entries.
#[derive(Clone, Debug)]
pub struct Attention {
    pub out: Tensor,
    pub alpha: Vec<f64>,
    pub logits: Vec<f64>,
    pub interactions: usize,
}

impl Attention {
    /// Weights laid out as `[slots, H, W]` for a query grid of `h x w`;
    /// absent candidates hold 0.
    pub fn alpha_grid(&self, cand: &Candidates, h: usize, w: usize) -> Tensor {
        assert_eq!(h * w, cand.queries);
        let mut t = vec![0.0; cand.slots * h * w];
        for i in 0..cand.queries {
            for e in cand.range(i) {
                t[cand.slot_at(e) * h * w + i] = self.alpha[e];
            }
        }
        Tensor::from_parts(vec![cand.slots, h, w], t)
    }
}

/// Channel-major `[d, N]` to pixel-major `[N, d]`.
fn pixel_major(t: &Tensor, d: usize) -> Vec<f64> {
    let n = t.len() / d;
    let src = t.data();
    let mut out = vec![0.0; n * d];
    for c in 0..d {
        for i in 0..n {
            out[i * d + c] = src[c * n + i];
        }
    }
    out
}

fn channel_major(v: &[f64], d: usize, shape: Vec<usize>) -> Tensor {
    let n = v.len() / d;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            out[c * n + i] = v[i * d + c];
        }
    }
    Tensor::from_parts(shape, out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `q` is `[d, ...]` (N queries), `keys` is `[d, ...]` (M keys), `bias` has M
/// entries. Queries with no candidates produce a zero output.
pub fn attend_forward(q: &Tensor, keys: &Tensor, bias: Option<&Tensor>, cand: &Candidates, scale: f64) -> Attention {
    let d = q.shape()[0];
    assert_eq!(keys.shape()[0], d, "attend: channel mismatch");
    assert_eq!(q.len() / d, cand.queries, "attend: query count");
    assert_eq!(keys.len() / d, cand.keys, "attend: key count");
    if let Some(b) = bias {
        assert_eq!(b.len(), cand.keys, "attend: bias length");
    }
    let qp = pixel_major(q, d);
    let kp = pixel_major(keys, d);
    let mut out = vec![0.0; cand.queries * d];
    let mut alpha = vec![0.0; cand.interactions()];
    let mut logits = vec![0.0; cand.interactions()];
    for i in 0..cand.queries {
        let r = cand.range(i);
        if r.is_empty() {
            continue;
        }
        let qi = &qp[i * d..(i + 1) * d];
        let mut mx = f64::NEG_INFINITY;
        for e in r.clone() {
            let m = cand.key_at(e);
            let mut l = dot(qi, &kp[m * d..(m + 1) * d]) * scale;
            if let Some(b) = bias {
                l += b.data()[m];
            }
            logits[e] = l;
            mx = mx.max(l);
        }
        let mut z = 0.0;
        for e in r.clone() {
            let a = (logits[e] - mx).exp();
            alpha[e] = a;
            z += a;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for e in r {
            alpha[e] /= z;
            let m = cand.key_at(e);
            for (o, k) in oi.iter_mut().zip(&kp[m * d..(m + 1) * d]) {
                *o += alpha[e] * k;
            }
        }
    }
    Attention { out: channel_major(&out, d, q.shape().to_vec()), alpha, logits, interactions: cand.interactions() }
}

/// Adjoint of [`attend_forward`]: returns `(dq, dkeys, dbias)`.
fn attend_backward(
    grad: &Tensor,
    q: &Tensor,
    keys: &Tensor,
    cand: &Candidates,
    alpha: &[f64],
    scale: f64,
) -> (Tensor, Tensor, Vec<f64>) {
    let d = q.shape()[0];
    let qp = pixel_major(q, d);
    let kp = pixel_major(keys, d);
    let gp = pixel_major(grad, d);
    let mut dq = vec![0.0; qp.len()];
    let mut dk = vec![0.0; kp.len()];
    let mut db = vec![0.0; cand.keys];
    let mut dl = Vec::new();
    for i in 0..cand.queries {
        let r = cand.range(i);
        if r.is_empty() {
            continue;
        }
        let gi = &gp[i * d..(i + 1) * d];
        let qi = &qp[i * d..(i + 1) * d];
        // d alpha_e = g_i . k_m; d logit_e = alpha_e (d alpha_e - sum alpha d alpha)
        dl.clear();
        let mut mean = 0.0;
        for e in r.clone() {
            let m = cand.key_at(e);
            let da = dot(gi, &kp[m * d..(m + 1) * d]);
            mean += alpha[e] * da;
            dl.push(da);
        }
        for (t, e) in r.enumerate() {
            let m = cand.key_at(e);
            let g_logit = alpha[e] * (dl[t] - mean);
            db[m] += g_logit;
            let km = &kp[m * d..(m + 1) * d];
            let dqi = &mut dq[i * d..(i + 1) * d];
            for c in 0..d {
                dqi[c] += g_logit * scale * km[c];
            }
            let dkm = &mut dk[m * d..(m + 1) * d];
            for c in 0..d {
                dkm[c] += alpha[e] * gi[c] + g_logit * scale * qi[c];
            }
        }
    }
    (channel_major(&dq, d, q.shape().to_vec()), channel_major(&dk, d, keys.shape().to_vec()), db)
}

impl Graph {
    /// Differentiable [`attend_forward`]. `bias`, when present, must hold
    /// one entry per key.
    pub fn attend(
        &mut self,
        q: Var,
        keys: Var,
        bias: Option<Var>,
        cand: Rc<Candidates>,
        scale: f64,
    ) -> (Var, Attention) {
        let att = attend_forward(self.value(q), self.value(keys), bias.map(|b| self.value(b)), &cand, scale);
        let alpha = att.alpha.clone();
        let inputs: Vec<Var> = match bias {
            Some(b) => vec![q, keys, b],
            None => vec![q, keys],
        };
        let v = self.custom(
            &inputs,
            att.out.clone(),
            Box::new(move |g, _, p| {
                let (dq, dk, db) = attend_backward(g, p[0], p[1], &cand, &alpha, scale);
                let mut out = vec![dq, dk];
                if p.len() == 3 {
                    out.push(Tensor::from_parts(p[2].shape().to_vec(), db));
                }
                out
            }),
        );
        (v, att)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, rand_tensor};

    fn ring(n: usize, m: usize) -> Candidates {
        let mut b = Candidates::builder(n, m, 3);
        for i in 0..n {
            for s in 0..3 {
                if (i + s) % 4 != 3 {
                    b.push((i + s) % m, s);
                }
            }
            b.finish_query();
        }
        b.build()
    }

    #[test]
    fn weights_match_direct_softmax() {
        let q = rand_tensor(&[3, 5], 1);
        let k = rand_tensor(&[3, 4], 2);
        let b = rand_tensor(&[4], 3);
        let cand = ring(5, 4);
        let att = attend_forward(&q, &k, Some(&b), &cand, 0.7);
        for i in 0..5 {
            let r = cand.range(i);
            let ls: Vec<f64> = r
                .clone()
                .map(|e| {
                    let m = cand.key_at(e);
                    (0..3).map(|c| q.data()[c * 5 + i] * k.data()[c * 4 + m]).sum::<f64>() * 0.7 + b.data()[m]
                })
                .collect();
            let z: f64 = ls.iter().map(|l| l.exp()).sum();
            for (t, e) in r.clone().enumerate() {
                assert!((att.alpha[e] - ls[t].exp() / z).abs() < 1e-12);
            }
            for c in 0..3 {
                let want: f64 = r.clone().map(|e| att.alpha[e] * k.data()[c * 4 + cand.key_at(e)]).sum();
                assert!((att.out.data()[c * 5 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cand = Rc::new(ring(6, 4));
        assert_grads_match(
            &[rand_tensor(&[3, 6], 4), rand_tensor(&[3, 4], 5), rand_tensor(&[4], 6), rand_tensor(&[3, 6], 7)],
            |g, v| {
                let (o, _) = g.attend(v[0], v[1], Some(v[2]), cand.clone(), 0.6);
                let w = g.mul(o, v[3]);
                g.sum(w)
            },
            1e-5,
        );
    }

    #[test]
    fn dense_counts_all_pairs() {
        let c = Candidates::dense(7, 5);
        assert_eq!(c.interactions(), 35);
        assert_eq!(c.range(3).len(), 5);
    }
}
