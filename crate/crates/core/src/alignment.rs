//! Prior-guided local bidirectional soft matching and the warm-up objective.

use std::rc::Rc;

use crate::attend::{attend_forward, Candidates};
use crate::autograd::{Graph, Var};
use crate::backbone::Backbone;
use crate::data::{stage_stride, SamplePair, SceneMeta, SoftLabelSet, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::prior::PriorBranches;
use crate::tensor::Tensor;

/// Denominator guard of the alignment loss.
pub const ALIGN_EPS: f64 = 1e-6;

/// Square offset window of radius `k`; slot `(dy + k) * (2k + 1) + (dx + k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchWindow {
    pub radius: usize,
}

impl MatchWindow {
    pub fn new(radius: usize) -> Self {
        Self { radius }
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn slots(&self) -> usize {
        self.side() * self.side()
    }

    /// `(dx, dy)` of a slot.
    pub fn offset(&self, slot: usize) -> (i64, i64) {
        let k = self.radius as i64;
        ((slot % self.side()) as i64 - k, (slot / self.side()) as i64 - k)
    }

    pub fn slot(&self, dx: i64, dy: i64) -> Option<usize> {
        let k = self.radius as i64;
        (dx.abs() <= k && dy.abs() <= k).then(|| ((dy + k) as usize) * self.side() + (dx + k) as usize)
    }

    /// In-bounds offsets of every pixel of an `h x w` map.
    pub fn candidates(&self, h: usize, w: usize) -> Candidates {
        let mut b = Candidates::builder(h * w, h * w, self.slots());
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for s in 0..self.slots() {
                    let (dx, dy) = self.offset(s);
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                        b.push(yy as usize * w + xx as usize, s);
                    }
                }
                b.finish_query();
            }
        }
        b.build()
    }
}

/// One direction of soft matching.
#[derive(Clone, Debug)]
pub struct SoftMatch {
    /// `Q~`, same shape as the inputs.
    pub aligned: Tensor,
    /// `[slots, H, W]`; out-of-bounds offsets hold 0.
    pub alpha: Tensor,
    /// `[slots, H, W]` pre-softmax scores; out-of-bounds offsets hold `-inf`.
    pub scores: Tensor,
    pub window: MatchWindow,
}

impl SoftMatch {
    /// Offset with the largest weight at each pixel, first slot winning ties.
    pub fn argmax_offsets(&self) -> Vec<(i64, i64)> {
        let (s, h, w) = self.alpha.chw();
        (0..h * w)
            .map(|i| {
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..s {
                    let a = self.alpha.data()[k * h * w + i];
                    if a > best.1 {
                        best = (k, a);
                    }
                }
                self.window.offset(best.0)
            })
            .collect()
    }
}

fn check_match_inputs(src: &Tensor, dst: &Tensor, win: MatchWindow) -> Result<(usize, usize, usize)> {
    if src.shape() != dst.shape() || src.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!("soft_match {:?} vs {:?}", src.shape(), dst.shape())));
    }
    let (d, h, w) = src.chw();
    if win.radius >= h.min(w) {
        return Err(Error::ShapeViolation(format!("match radius {} >= map side {}", win.radius, h.min(w))));
    }
    Ok((d, h, w))
}

fn assemble(att: crate::attend::Attention, cand: &Candidates, h: usize, w: usize, win: MatchWindow) -> SoftMatch {
    let alpha = att.alpha_grid(cand, h, w);
    let mut scores = vec![f64::NEG_INFINITY; cand.slots * h * w];
    for i in 0..h * w {
        for e in cand.range(i) {
            scores[cand.slot_at(e) * h * w + i] = att.logits[e];
        }
    }
    SoftMatch { aligned: att.out, alpha, scores: Tensor::from_parts(vec![cand.slots, h, w], scores), window: win }
}

/// `e = Q_src(i) . Q_dst(i + delta) / sqrt(d)`, softmax over in-bounds
/// offsets, `Q~(i) = sum alpha Q_dst(i + delta)`.
pub fn soft_match(src: &Tensor, dst: &Tensor, win: MatchWindow) -> Result<SoftMatch> {
    let (d, h, w) = check_match_inputs(src, dst, win)?;
    let cand = win.candidates(h, w);
    let att = attend_forward(src, dst, None, &cand, 1.0 / (d as f64).sqrt());
    Ok(assemble(att, &cand, h, w, win))
}

impl Graph {
    /// Differentiable [`soft_match`]; gradients flow into both inputs.
    pub fn soft_match(&mut self, src: Var, dst: Var, win: MatchWindow) -> Result<(Var, SoftMatch)> {
        let (d, h, w) = check_match_inputs(self.value(src), self.value(dst), win)?;
        let cand = Rc::new(win.candidates(h, w));
        let (v, att) = self.attend(src, dst, None, cand.clone(), 1.0 / (d as f64).sqrt());
        Ok((v, assemble(att, &cand, h, w, win)))
    }
}

/// `sum_i P_i (|Qr - Q~t|_1 + |Qt - Q~r|_1) / (sum_i P_i + eps)`.
pub fn align_loss_value(qr: &Tensor, qt: &Tensor, qt_al: &Tensor, qr_al: &Tensor, p: &Tensor) -> Result<f64> {
    let (num, den) = align_parts(qr, qt, qt_al, qr_al, p)?;
    Ok(num / (den + ALIGN_EPS))
}

fn align_parts(qr: &Tensor, qt: &Tensor, qt_al: &Tensor, qr_al: &Tensor, p: &Tensor) -> Result<(f64, f64)> {
    for (name, t) in [("Q_t", qt), ("Q~_t", qt_al), ("Q~_r", qr_al)] {
        if t.shape() != qr.shape() {
            return Err(Error::ShapeMismatch(format!("{name} {:?} vs Q_r {:?}", t.shape(), qr.shape())));
        }
    }
    let (d, h, w) = qr.chw();
    if p.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch(format!("prior {:?} vs features {:?}", p.shape(), qr.shape())));
    }
    let hw = h * w;
    let l1 = per_pixel_l1(qr, qt, qt_al, qr_al, d, hw);
    let num = l1.iter().zip(p.data()).map(|(a, b)| a * b).sum();
    Ok((num, p.sum()))
}

fn per_pixel_l1(qr: &Tensor, qt: &Tensor, qt_al: &Tensor, qr_al: &Tensor, d: usize, hw: usize) -> Vec<f64> {
    let mut l1 = vec![0.0; hw];
    for c in 0..d {
        for i in 0..hw {
            let k = c * hw + i;
            l1[i] += (qr.data()[k] - qt_al.data()[k]).abs() + (qt.data()[k] - qr_al.data()[k]).abs();
        }
    }
    l1
}

impl Graph {
    /// Differentiable alignment loss over `(Q_r, Q_t, Q~_t, Q~_r, P)`.
    pub fn align_loss(&mut self, qr: Var, qt: Var, qt_al: Var, qr_al: Var, p: Var) -> Result<Var> {
        let v = align_loss_value(self.value(qr), self.value(qt), self.value(qt_al), self.value(qr_al), self.value(p))?;
        Ok(self.custom(
            &[qr, qt, qt_al, qr_al, p],
            Tensor::scalar(v),
            Box::new(|g, _, par| {
                let (qr, qt, qt_al, qr_al, p) = (par[0], par[1], par[2], par[3], par[4]);
                let (d, h, w) = qr.chw();
                let hw = h * w;
                let z = p.sum() + ALIGN_EPS;
                let up = g.item();
                let l1 = per_pixel_l1(qr, qt, qt_al, qr_al, d, hw);
                let num: f64 = l1.iter().zip(p.data()).map(|(a, b)| a * b).sum();
                let sgn = |a: f64, b: f64| {
                    if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    }
                };
                let mut dqr = vec![0.0; d * hw];
                let mut dqt = vec![0.0; d * hw];
                let mut dqt_al = vec![0.0; d * hw];
                let mut dqr_al = vec![0.0; d * hw];
                for c in 0..d {
                    for i in 0..hw {
                        let k = c * hw + i;
                        let wgt = up * p.data()[i] / z;
                        let s1 = sgn(qr.data()[k], qt_al.data()[k]) * wgt;
                        let s2 = sgn(qt.data()[k], qr_al.data()[k]) * wgt;
                        dqr[k] = s1;
                        dqt_al[k] = -s1;
                        dqt[k] = s2;
                        dqr_al[k] = -s2;
                    }
                }
                let dp: Vec<f64> = l1.iter().map(|&l| up * (l * z - num) / (z * z)).collect();
                let sh = qr.shape().to_vec();
                vec![
                    Tensor::from_parts(sh.clone(), dqr),
                    Tensor::from_parts(sh.clone(), dqt),
                    Tensor::from_parts(sh.clone(), dqt_al),
                    Tensor::from_parts(sh, dqr_al),
                    Tensor::from_parts(p.shape().to_vec(), dp),
                ]
            }),
        ))
    }
}

/// Radius actually used at a stage: the configured radius, reduced so the
/// window fits inside the map.
pub fn stage_radius(k_delta: usize, h: usize, w: usize) -> usize {
    k_delta.min(h.min(w).saturating_sub(1))
}

/// Per-stage values of one warm-up evaluation.
#[derive(Clone, Debug)]
pub struct WarmupStage {
    pub cap: f64,
    pub align: f64,
    pub prior: Tensor,
    /// `r -> t` matching of this stage.
    pub match_rt: SoftMatch,
}

pub struct Warmup {
    pub loss: Var,
    pub stages: Vec<WarmupStage>,
}

/// `L_warm = sum_l (L_cap^l + L_align^l)` for one sample. The prior weight
/// inside `L_align` is held constant.
pub fn warmup_objective(
    g: &mut Graph,
    store: &ParamStore,
    backbone: &Backbone,
    priors: &PriorBranches,
    pair: &SamplePair,
    labels: &SoftLabelSet,
    k_delta: usize,
) -> Result<Warmup> {
    let rgb = g.constant(pair.rgb.clone());
    let th = g.constant(pair.thermal.clone());
    let (fr, ft) = backbone.extract(g, store, rgb, th)?;
    let mut total: Option<Var> = None;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for l in 1..=NUM_STAGES {
        let (qr, qt) = backbone.project(g, store, l, fr[l - 1], ft[l - 1]);
        let p = priors.crowd_prior(g, store, l, qr, qt)?;
        let cap = g.cap_loss(p, labels.stage_prior(l))?;
        let (_, h, w) = g.value(qr).chw();
        let win = MatchWindow::new(stage_radius(k_delta, h, w));
        let (qt_al, m_rt) = g.soft_match(qr, qt, win)?;
        let (qr_al, _) = g.soft_match(qt, qr, win)?;
        let p_const = g.constant(g.value(p).clone());
        let align = g.align_loss(qr, qt, qt_al, qr_al, p_const)?;
        stages.push(WarmupStage {
            cap: g.value(cap).item(),
            align: g.value(align).item(),
            prior: g.value(p).clone(),
            match_rt: m_rt,
        });
        let s = g.add(cap, align);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    Ok(Warmup { loss: total.expect("at least one stage"), stages })
}

/// Counts pixels of stage `l` whose label prior exceeds `threshold` and,
/// among them, those whose argmax `r -> t` offset equals the true shift
/// (in stage cells) recorded by the generator.
pub fn shift_hits(m: &SoftMatch, meta: &SceneMeta, label: &Tensor, l: usize, threshold: f64) -> (usize, usize) {
    let (_, h, w) = label.chw();
    let stride = stage_stride(l) as f64;
    let arg = m.argmax_offsets();
    let (mut hits, mut total) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            if label.data()[y * w + x] <= threshold {
                continue;
            }
            total += 1;
            let [dx, dy] = meta.shift_at((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            let want = ((dx as f64 / stride).round() as i64, (dy as f64 / stride).round() as i64);
            if arg[y * w + x] == want {
                hits += 1;
            }
        }
    }
    (hits, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, rand_tensor, rand_tensor_in};

    #[test]
    fn constant_destination_gives_uniform_weights() {
        let src = rand_tensor(&[3, 5, 5], 1);
        let dst = Tensor::from_fn(&[3, 5, 5], |i| [0.3, -1.0, 2.0][i / 25]);
        let m = soft_match(&src, &dst, MatchWindow::new(1)).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let inb = (0..9).filter(|&s| m.alpha.at3(s, y, x) > 0.0).count();
                let expect = [y, x].iter().map(|&v| if v == 0 || v == 4 { 2 } else { 3 }).product::<usize>();
                assert_eq!(inb, expect);
                for s in 0..9 {
                    let a = m.alpha.at3(s, y, x);
                    assert!(a == 0.0 || (a - 1.0 / expect as f64).abs() < 1e-12);
                }
                for c in 0..3 {
                    assert!((m.aligned.at3(c, y, x) - dst.at3(c, y, x)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn orthogonal_codes_recover_shift() {
        // one-hot pixel codes; dst(i + (1, 0)) = src(i)
        let (h, w) = (4, 5);
        let src = Tensor::from_fn(&[h * w, h, w], |i| if i / (h * w) == i % (h * w) { 4.0 } else { 0.0 });
        let dst = Tensor::from_fn(&[h * w, h, w], |i| {
            let (c, r) = (i / (h * w), i % (h * w));
            let (y, x) = (r / w, r % w);
            if x >= 1 && c == y * w + x - 1 {
                4.0
            } else {
                0.0
            }
        });
        let m = soft_match(&src, &dst, MatchWindow::new(1)).unwrap();
        let arg = m.argmax_offsets();
        for y in 0..h {
            for x in 0..w - 1 {
                assert_eq!(arg[y * w + x], (1, 0));
            }
        }
    }

    #[test]
    fn generated_shift_matches_offset_convention() {
        use crate::data::{generate_scene, SceneSpec};
        for shift in [[4, 0], [-4, 0], [0, 4], [4, -4]] {
            let spec = SceneSpec { seed: 11, canvas: [64, 64], fixed_shift: Some(shift), ..Default::default() };
            let pair = generate_scene(&spec).unwrap();
            let meta = pair.meta.as_ref().unwrap();
            // thermal people sit at the RGB position plus the shift
            let at = |x: f64, y: f64| pair.thermal.at3(0, (y as usize).min(63), (x as usize).min(63));
            let (dx, dy) = (shift[0] as f64, shift[1] as f64);
            let inside = |p: &&crate::data::PointAnnotation| {
                [p.x + dx, p.x - dx].iter().all(|v| (0.0..64.0).contains(v))
                    && [p.y + dy, p.y - dy].iter().all(|v| (0.0..64.0).contains(v))
            };
            let forward =
                pair.points.iter().filter(inside).filter(|p| at(p.x + dx, p.y + dy) > at(p.x - dx, p.y - dy)).count();
            assert!(forward * 10 >= pair.points.iter().filter(inside).count() * 8, "{shift:?}");

            // a destination that is the source moved by the shift is recovered everywhere
            let (cx, cy) = (shift[0] as i64 / 4, shift[1] as i64 / 4);
            // unit-norm descriptors so a self match has the top score
            let raw = rand_tensor(&[8, 16, 16], 5);
            let norm: Vec<f64> =
                (0..256).map(|i| (0..8).map(|c| raw.data()[c * 256 + i].powi(2)).sum::<f64>().sqrt()).collect();
            let src = Tensor::from_fn(&[8, 16, 16], |i| raw.data()[i] / norm[i % 256]);
            let dst = Tensor::from_fn(&[8, 16, 16], |i| {
                let (c, y, x) = ((i / 256) as i64, (i / 16 % 16) as i64, (i % 16) as i64);
                let (sy, sx) = ((y - cy).clamp(0, 15), (x - cx).clamp(0, 15));
                src.data()[(c * 256 + sy * 16 + sx) as usize]
            });
            let m = soft_match(&src, &dst, MatchWindow::new(1)).unwrap();
            let interior = Tensor::from_fn(&[1, 16, 16], |i| {
                if (1..15).contains(&(i / 16)) && (1..15).contains(&(i % 16)) {
                    1.0
                } else {
                    0.0
                }
            });
            let (hits, total) = shift_hits(&m, meta, &interior, 1, 0.5);
            assert_eq!((hits, total), (196, 196), "{shift:?}");
        }
    }

    #[test]
    fn scores_are_bilinear() {
        let a = rand_tensor(&[4, 3, 3], 2);
        let b = rand_tensor(&[4, 3, 3], 3);
        let m1 = soft_match(&a, &b, MatchWindow::new(1)).unwrap();
        let m2 = soft_match(&a.scale(1.5), &b.scale(1.5), MatchWindow::new(1)).unwrap();
        for (x, y) in m1.scores.data().iter().zip(m2.scores.data()) {
            assert!(x.is_infinite() && y.is_infinite() || (y - 2.25 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = rand_tensor(&[2, 3, 3], 2);
        assert!(matches!(
            soft_match(&a, &rand_tensor(&[2, 3, 4], 1), MatchWindow::new(1)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(soft_match(&a, &a, MatchWindow::new(3)), Err(Error::ShapeViolation(_))));
    }

    #[test]
    fn symmetric_instance_gives_identical_fields() {
        let q = rand_tensor(&[3, 6, 6], 4);
        let m1 = soft_match(&q, &q.clone(), MatchWindow::new(2)).unwrap();
        let m2 = soft_match(&q.clone(), &q, MatchWindow::new(2)).unwrap();
        assert_eq!(m1.alpha, m2.alpha);
    }

    #[test]
    fn align_loss_special_cases() {
        let q = Tensor::full(&[2, 4, 4], 0.7);
        let m = soft_match(&q, &q, MatchWindow::new(1)).unwrap();
        let p = rand_tensor_in(&[1, 4, 4], 0.0, 1.0, 5);
        assert!(align_loss_value(&q, &q, &m.aligned, &m.aligned, &p).unwrap().abs() < 1e-12);
        let (a, b) = (rand_tensor(&[2, 4, 4], 6), rand_tensor(&[2, 4, 4], 7));
        assert_eq!(align_loss_value(&a, &b, &b, &a, &Tensor::zeros(&[1, 4, 4])).unwrap(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert_grads_match(
            &[rand_tensor(&[3, 4, 5], 8), rand_tensor(&[3, 4, 5], 9), rand_tensor(&[3, 4, 5], 10)],
            |g, v| {
                let (o, _) = g.soft_match(v[0], v[1], MatchWindow::new(1)).unwrap();
                let m = g.mul(o, v[2]);
                g.sum(m)
            },
            1e-5,
        );
        assert_grads_match(
            &[
                rand_tensor(&[2, 4, 4], 11),
                rand_tensor(&[2, 4, 4], 12),
                rand_tensor(&[2, 4, 4], 13),
                rand_tensor(&[2, 4, 4], 14),
                rand_tensor_in(&[1, 4, 4], 0.1, 1.0, 15),
            ],
            |g, v| g.align_loss(v[0], v[1], v[2], v[3], v[4]).unwrap(),
            1e-5,
        );
    }

    #[test]
    fn stage_radius_fits_map() {
        assert_eq!(stage_radius(1, 2, 2), 1);
        assert_eq!(stage_radius(3, 2, 2), 1);
        assert_eq!(stage_radius(2, 16, 16), 2);
    }
}
