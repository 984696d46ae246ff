//! Local anchor fusion: per-modality reliability, the joint feature,
//! crowd-aware anchor sparsification and anchor-guided pixel redistribution.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attend::{attend_forward, Candidates};
use crate::autograd::{Graph, Var};
use crate::backbone::Modality;
use crate::data::NUM_STAGES;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, MapBranch, ParamStore};
use crate::prior::SIGMOID_BRANCH_BIAS;
use crate::tensor::Tensor;

/// Guard in the prototype denominator and inside `log(p + eps)`.
pub const ANCHOR_EPS: f64 = 1e-6;

/// How the joint feature is refined into `F_out`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Anchor sparsification plus local redistribution.
    #[default]
    Lafm,
    /// Every pixel attends to every pixel of the joint feature.
    Dense,
}

/// Anchor layout of an `h x w` map tiled by `ka x ka` windows (zero-padded
/// on the bottom/right to a multiple of `ka`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorLayout {
    pub h: usize,
    pub w: usize,
    pub ka: usize,
}

impl AnchorLayout {
    pub fn new(h: usize, w: usize, ka: usize) -> Result<Self> {
        if ka == 0 || ka.is_multiple_of(2) {
            return Err(Error::Config(format!("anchor window {ka} must be odd and positive")));
        }
        Ok(Self { h, w, ka })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h.div_ceil(self.ka), self.w.div_ceil(self.ka))
    }

    pub fn anchors(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn anchor_of(&self, y: usize, x: usize) -> (usize, usize) {
        (y / self.ka, x / self.ka)
    }

    /// Candidate anchors for every pixel: the `kn x kn` anchor block centred
    /// on the pixel's own anchor, clipped to the grid.
    pub fn candidates(&self, kn: usize) -> Result<Candidates> {
        if kn == 0 || kn.is_multiple_of(2) {
            return Err(Error::Config(format!("neighbourhood {kn} must be odd and positive")));
        }
        let (gh, gw) = self.grid();
        let r = (kn / 2) as i64;
        let mut b = Candidates::builder(self.h * self.w, gh * gw, kn * kn);
        for y in 0..self.h {
            for x in 0..self.w {
                let (ay, ax) = self.anchor_of(y, x);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (my, mx) = (ay as i64 + dy, ax as i64 + dx);
                        if my >= 0 && mx >= 0 && my < gh as i64 && mx < gw as i64 {
                            b.push(my as usize * gw + mx as usize, ((dy + r) * kn as i64 + dx + r) as usize);
                        }
                    }
                }
                b.finish_query();
            }
        }
        Ok(b.build())
    }
}

/// Sparse anchor set of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub layout: AnchorLayout,
    /// `[d, gh, gw]` semantic prototypes `s_m`.
    pub prototypes: Tensor,
    /// `[1, gh, gw]` prior scores `p_m`.
    pub priors: Tensor,
}

fn weights(p: &Tensor, rr: &Tensor, rt: &Tensor) -> Vec<f64> {
    p.data().iter().zip(rr.data()).zip(rt.data()).map(|((p, a), b)| p * 0.5 * (a + b)).collect()
}

fn check_maps(j: &Tensor, maps: &[(&str, &Tensor)]) -> Result<(usize, usize, usize)> {
    let (d, h, w) = j.chw();
    for (name, m) in maps {
        if m.shape() != [1, h, w] {
            return Err(Error::ShapeMismatch(format!("{name} {:?} vs joint feature {:?}", m.shape(), j.shape())));
        }
    }
    Ok((d, h, w))
}

fn prototypes_forward(j: &Tensor, wts: &[f64], lay: AnchorLayout) -> (Tensor, Vec<f64>) {
    let (d, h, w) = j.chw();
    let (gh, gw) = lay.grid();
    let mut num = vec![0.0; d * gh * gw];
    let mut den = vec![ANCHOR_EPS; gh * gw];
    for y in 0..h {
        for x in 0..w {
            let (ay, ax) = lay.anchor_of(y, x);
            let m = ay * gw + ax;
            let wi = wts[y * w + x];
            den[m] += wi;
            for c in 0..d {
                num[c * gh * gw + m] += wi * j.data()[(c * h + y) * w + x];
            }
        }
    }
    let s = Tensor::from_fn(&[d, gh, gw], |k| num[k] / den[k % (gh * gw)]);
    (s, den)
}

fn anchor_priors_forward(p: &Tensor, lay: AnchorLayout) -> Tensor {
    let (_, h, w) = p.chw();
    let (gh, gw) = lay.grid();
    let mut sum = vec![0.0; gh * gw];
    let mut cnt = vec![0usize; gh * gw];
    for y in 0..h {
        for x in 0..w {
            let (ay, ax) = lay.anchor_of(y, x);
            sum[ay * gw + ax] += p.data()[y * w + x];
            cnt[ay * gw + ax] += 1;
        }
    }
    Tensor::from_fn(&[1, gh, gw], |m| sum[m] / cnt[m] as f64)
}

/// `w_i = P_i (R_r + R_t) / 2`, `s_m = sum w j / (sum w + eps)`,
/// `p_m` = mean of `P` over the unpadded pixels of the window.
pub fn sparsify(j: &Tensor, p: &Tensor, rr: &Tensor, rt: &Tensor, ka: usize) -> Result<AnchorGrid> {
    let (_, h, w) = check_maps(j, &[("P", p), ("R_r", rr), ("R_t", rt)])?;
    let layout = AnchorLayout::new(h, w, ka)?;
    let (prototypes, _) = prototypes_forward(j, &weights(p, rr, rt), layout);
    Ok(AnchorGrid { layout, prototypes, priors: anchor_priors_forward(p, layout) })
}

/// Output of [`redistribute`].
#[derive(Clone, Debug)]
pub struct Redistribution {
    pub out: Tensor,
    /// `[kn^2, H, W]`, zero for clipped neighbours.
    pub alpha: Tensor,
    /// Pixel-anchor similarity evaluations.
    pub interactions: usize,
}

fn redistribution_logit_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// `l_im = j_i . s_m / sqrt(d) + log(p_m + eps)`, softmax over the anchor
/// neighbourhood, `f_i = sum alpha s_m`.
pub fn redistribute(j: &Tensor, grid: &AnchorGrid, kn: usize) -> Result<Redistribution> {
    let (d, h, w) = j.chw();
    if (h, w) != (grid.layout.h, grid.layout.w) || grid.prototypes.shape()[0] != d {
        return Err(Error::ShapeMismatch(format!("joint {:?} vs anchors {:?}", j.shape(), grid.prototypes.shape())));
    }
    let cand = grid.layout.candidates(kn)?;
    let bias = grid.priors.map(|p| (p + ANCHOR_EPS).ln());
    let att = attend_forward(j, &grid.prototypes, Some(&bias), &cand, redistribution_logit_scale(d));
    Ok(Redistribution { alpha: att.alpha_grid(&cand, h, w), out: att.out, interactions: att.interactions })
}

/// Dense self-attention over the joint feature; the quadratic reference.
pub fn dense_attention(j: &Tensor) -> Redistribution {
    let (d, h, w) = j.chw();
    let cand = Candidates::dense(h * w, h * w);
    let att = attend_forward(j, j, None, &cand, redistribution_logit_scale(d));
    Redistribution { alpha: att.alpha_grid(&cand, h, w), out: att.out, interactions: att.interactions }
}

impl Graph {
    /// Differentiable anchor prototypes over `(J, P, R_r, R_t)`.
    pub fn anchor_prototypes(&mut self, j: Var, p: Var, rr: Var, rt: Var, ka: usize) -> Result<Var> {
        let (_, h, w) =
            check_maps(self.value(j), &[("P", self.value(p)), ("R_r", self.value(rr)), ("R_t", self.value(rt))])?;
        let lay = AnchorLayout::new(h, w, ka)?;
        let wts = weights(self.value(p), self.value(rr), self.value(rt));
        let (s, _) = prototypes_forward(self.value(j), &wts, lay);
        Ok(self.custom(
            &[j, p, rr, rt],
            s,
            Box::new(move |g, s, par| {
                let (j, p, rr, rt) = (par[0], par[1], par[2], par[3]);
                let (d, h, w) = j.chw();
                let (gh, gw) = lay.grid();
                let gg = gh * gw;
                let wts = weights(p, rr, rt);
                let (_, den) = prototypes_forward(j, &wts, lay);
                let mut dj = vec![0.0; d * h * w];
                let (mut dp, mut drr, mut drt) = (vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]);
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let (ay, ax) = lay.anchor_of(y, x);
                        let m = ay * gw + ax;
                        // d s_m / d j_i = w_i / W; d s_m / d w_i = (j_i - s_m) / W
                        let mut dw = 0.0;
                        for c in 0..d {
                            let gm = g.data()[c * gg + m];
                            dj[c * h * w + i] = gm * wts[i] / den[m];
                            dw += gm * (j.data()[c * h * w + i] - s.data()[c * gg + m]) / den[m];
                        }
                        dp[i] = dw * 0.5 * (rr.data()[i] + rt.data()[i]);
                        drr[i] = dw * 0.5 * p.data()[i];
                        drt[i] = dw * 0.5 * p.data()[i];
                    }
                }
                let map = |v| Tensor::from_parts(vec![1, h, w], v);
                vec![Tensor::from_parts(vec![d, h, w], dj), map(dp), map(drr), map(drt)]
            }),
        ))
    }

    /// Differentiable anchor prior scores.
    pub fn anchor_priors(&mut self, p: Var, ka: usize) -> Result<Var> {
        let (_, h, w) = self.value(p).chw();
        let lay = AnchorLayout::new(h, w, ka)?;
        let v = anchor_priors_forward(self.value(p), lay);
        Ok(self.custom(
            &[p],
            v,
            Box::new(move |g, _, _| {
                let (_, gw) = lay.grid();
                let mut cnt = vec![0usize; lay.anchors()];
                for y in 0..h {
                    for x in 0..w {
                        let (ay, ax) = lay.anchor_of(y, x);
                        cnt[ay * gw + ax] += 1;
                    }
                }
                let d = Tensor::from_fn(&[1, h, w], |i| {
                    let (ay, ax) = lay.anchor_of(i / w, i % w);
                    let m = ay * gw + ax;
                    g.data()[m] / cnt[m] as f64
                });
                vec![d]
            }),
        ))
    }

    /// Differentiable [`redistribute`] from prototype and prior nodes.
    pub fn redistribute(&mut self, j: Var, protos: Var, priors: Var, ka: usize, kn: usize) -> Result<(Var, usize)> {
        let (d, h, w) = self.value(j).chw();
        let cand = Rc::new(AnchorLayout::new(h, w, ka)?.candidates(kn)?);
        let bias = self.ln_eps(priors, ANCHOR_EPS);
        let (out, att) = self.attend(j, protos, Some(bias), cand, redistribution_logit_scale(d));
        Ok((out, att.interactions))
    }

    /// Differentiable [`dense_attention`].
    pub fn dense_attention(&mut self, j: Var) -> (Var, usize) {
        let (d, h, w) = self.value(j).chw();
        let cand = Rc::new(Candidates::dense(h * w, h * w));
        let (out, att) = self.attend(j, j, None, cand, redistribution_logit_scale(d));
        (out, att.interactions)
    }
}

/// Per-stage outputs of the fusion block.
#[derive(Clone, Copy, Debug)]
pub struct LafmStage {
    pub rr: Var,
    pub rt: Var,
    pub joint: Var,
    pub fout: Var,
    pub interactions: usize,
}

/// Reliability branches, top-down adapters and the fusion settings.
#[derive(Clone, Debug)]
pub struct Lafm {
    pub dims: [usize; NUM_STAGES],
    pub ka: usize,
    pub kn: usize,
    pub mode: FusionMode,
    rel: [Vec<MapBranch>; 2],
    adapters: Vec<Conv2d>,
}

impl Lafm {
    pub fn new(dims: [usize; NUM_STAGES], ka: usize, kn: usize, mode: FusionMode) -> Self {
        let rel = Modality::BOTH.map(|m| {
            (0..NUM_STAGES)
                .map(|l| MapBranch::new(&format!("rel_{}.{}", m.tag(), l + 1), dims[l] + 1, dims[l]))
                .collect()
        });
        let adapters = (0..NUM_STAGES - 1)
            .map(|l| Conv2d::new(format!("adapter.{}", l + 1), dims[l + 1], dims[l], 1, 1))
            .collect();
        Self { dims, ka, kn, mode, rel, adapters }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for b in self.rel.iter().flatten() {
            b.init(store, rng, SIGMOID_BRANCH_BIAS);
        }
        for a in &self.adapters {
            a.init(store, rng, 1.0, 0.0);
        }
    }

    /// `R^l = sigmoid(phi^l([Q^l, P^l]))` for one modality.
    pub fn reliability_one(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        m: Modality,
        l: usize,
        q: Var,
        p: Var,
    ) -> Result<Var> {
        let (_, h, w) = g.value(q).chw();
        if g.shape(p) != [1, h, w] {
            return Err(Error::ShapeMismatch(format!("prior {:?} vs features {:?}", g.shape(p), g.shape(q))));
        }
        let x = g.concat(&[q, p]);
        let idx = if m == Modality::Rgb { 0 } else { 1 };
        Ok(self.rel[idx][l - 1].forward(g, store, x))
    }

    pub fn reliability(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        l: usize,
        qr: Var,
        qt: Var,
        p: Var,
    ) -> Result<(Var, Var)> {
        if g.shape(qr) != g.shape(qt) {
            return Err(Error::ShapeMismatch(format!("Q_r {:?} vs Q_t {:?}", g.shape(qr), g.shape(qt))));
        }
        Ok((
            self.reliability_one(g, store, Modality::Rgb, l, qr, p)?,
            self.reliability_one(g, store, Modality::Thermal, l, qt, p)?,
        ))
    }

    /// `J^l = R_r Q_r + R_t Q_t + adapter(up2(F_out^{l+1}))`.
    #[allow(clippy::too_many_arguments)]
    pub fn joint_feature(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        l: usize,
        qr: Var,
        qt: Var,
        rr: Var,
        rt: Var,
        above: Option<Var>,
    ) -> Result<Var> {
        let a = g.mul_map(qr, rr);
        let b = g.mul_map(qt, rt);
        let mut j = g.add(a, b);
        if let Some(up) = above {
            if l >= NUM_STAGES {
                return Err(Error::ShapeMismatch("the coarsest stage has no stage above it".into()));
            }
            let (c, h, w) = g.value(up).chw();
            let (_, jh, jw) = g.value(j).chw();
            if c != self.dims[l] || (2 * h, 2 * w) != (jh, jw) {
                return Err(Error::ShapeMismatch(format!(
                    "F_out^{} {:?} vs J^{l} {:?}",
                    l + 1,
                    g.shape(up),
                    g.shape(j)
                )));
            }
            let u = g.upsample_nearest(up, 2, 1.0);
            let u = self.adapters[l - 1].forward(g, store, u);
            j = g.add(j, u);
        }
        Ok(j)
    }

    /// Refines `J^l` into `F_out^l` with the configured fusion mode.
    pub fn refine(&self, g: &mut Graph, j: Var, p: Var, rr: Var, rt: Var) -> Result<(Var, usize)> {
        match self.mode {
            FusionMode::Lafm => {
                let s = g.anchor_prototypes(j, p, rr, rt, self.ka)?;
                let pm = g.anchor_priors(p, self.ka)?;
                g.redistribute(j, s, pm, self.ka, self.kn)
            }
            FusionMode::Dense => Ok(g.dense_attention(j)),
        }
    }

    /// Runs stages 4 down to 1. `q` holds `(Q_r^l, Q_t^l)` and `p` holds `P^l`
    /// for l = 1..4; the result is indexed the same way.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: &[(Var, Var)], p: &[Var]) -> Result<Vec<LafmStage>> {
        let mut out: Vec<Option<LafmStage>> = vec![None; NUM_STAGES];
        let mut above = None;
        for l in (1..=NUM_STAGES).rev() {
            let (qr, qt) = q[l - 1];
            let (rr, rt) = self.reliability(g, store, l, qr, qt, p[l - 1])?;
            let j = self.joint_feature(g, store, l, qr, qt, rr, rt, above)?;
            let (fout, interactions) = self.refine(g, j, p[l - 1], rr, rt)?;
            out[l - 1] = Some(LafmStage { rr, rt, joint: j, fout, interactions });
            above = Some(fout);
        }
        Ok(out.into_iter().map(|s| s.expect("every stage visited")).collect())
    }
}
