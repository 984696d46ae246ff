//! The full stage-2 network: backbone and prior transferred from
//! pretraining, per-stage fusion, the progressive decoder and the density head.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{warmup_objective, Warmup};
use crate::autograd::{Graph, Var};
use crate::backbone::Backbone;
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::{SamplePair, SigmaPolicy, SoftLabelSet, NUM_STAGES};
use crate::error::{Error, Result};
use crate::lafm::{FusionMode, Lafm};
use crate::nn::{Conv2d, ParamStore};
use crate::objective::{game, point_posteriors, rmse, DiscrepancyBranches, LAMBDA_CONS, POSTERIOR_SIGMA};
use crate::optim::AdamW;
use crate::prior::PriorBranches;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

/// Parameter prefixes trained in stage 1 and transferred to stage 2.
pub const PRETRAIN_PREFIXES: [&str; 3] = ["backbone.", "proj.", "prior."];

/// Architecture and loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone widths `C^1..C^4`.
    pub channels: [usize; NUM_STAGES],
    /// Projection widths `d^1..d^4`; the decoder reuses them.
    pub dims: [usize; NUM_STAGES],
    /// Upper bound on normalization groups.
    pub groups: usize,
    /// Anchor window; must equal `2 * k_delta + 1`.
    pub ka: usize,
    /// Anchor neighbourhood.
    pub kn: usize,
    /// Matching radius.
    pub k_delta: usize,
    pub fusion: FusionMode,
    pub lambda_cons: f64,
    pub posterior_sigma: f64,
    /// Kernel widths of the soft labels.
    pub labels: SigmaPolicy,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 160],
            dims: [32, 32, 64, 64],
            groups: 8,
            ka: 3,
            kn: 5,
            k_delta: 1,
            fusion: FusionMode::Lafm,
            lambda_cons: LAMBDA_CONS,
            posterior_sigma: POSTERIOR_SIGMA,
            labels: SigmaPolicy::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the tests.
    pub fn tiny() -> Self {
        Self { channels: [8, 16, 32, 32], dims: [8, 8, 16, 16], train: TrainConfig::desk(), ..Self::default() }
    }

    /// Sets `ka` and the matching radius together.
    pub fn with_anchor_window(mut self, ka: usize) -> Self {
        self.ka = ka;
        self.k_delta = ka.saturating_sub(1) / 2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().chain(&self.dims).any(|&c| c == 0) || self.groups == 0 {
            return Err(Error::Config("channel widths and group count must be positive".into()));
        }
        if self.ka != 2 * self.k_delta + 1 {
            return Err(Error::Config(format!(
                "ka = {} must equal 2 * k_delta + 1 = {}",
                self.ka,
                2 * self.k_delta + 1
            )));
        }
        if self.kn == 0 || self.kn.is_multiple_of(2) {
            return Err(Error::Config(format!("kn = {} must be odd and positive", self.kn)));
        }
        if !(self.lambda_cons >= 0.0) || !self.lambda_cons.is_finite() {
            return Err(Error::Config(format!(
                "lambda_cons = {} must be a finite non-negative number",
                self.lambda_cons
            )));
        }
        if !(self.posterior_sigma > 0.0) {
            return Err(Error::Config("posterior_sigma must be positive".into()));
        }
        self.train.validate()
    }

    /// Hash of everything that determines parameter names and shapes.
    pub fn fingerprint(&self) -> String {
        let desc = format!("channels={:?};dims={:?};groups={}", self.channels, self.dims, self.groups);
        Sha256::digest(desc.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Graph handles of one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub qr: Var,
    pub qt: Var,
    pub p: Var,
    pub rr: Var,
    pub rt: Var,
    pub d: Var,
    pub joint: Var,
    pub fout: Var,
    pub interactions: usize,
}

pub struct ForwardVars {
    pub density: Var,
    pub stages: Vec<StageVars>,
}

/// Detached per-stage maps.
#[derive(Clone, Debug, PartialEq)]
pub struct StageMaps {
    pub p: Tensor,
    pub rr: Tensor,
    pub rt: Tensor,
    pub d: Tensor,
    pub fout: Tensor,
    pub interactions: usize,
}

impl ForwardVars {
    pub fn maps(&self, g: &Graph) -> Vec<StageMaps> {
        self.stages
            .iter()
            .map(|s| StageMaps {
                p: g.value(s.p).clone(),
                rr: g.value(s.rr).clone(),
                rt: g.value(s.rt).clone(),
                d: g.value(s.d).clone(),
                fout: g.value(s.fout).clone(),
                interactions: s.interactions,
            })
            .collect()
    }
}

/// Scalar terms of one stage-2 evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossScalars {
    pub cnt: f64,
    pub cons: Vec<f64>,
    pub total: f64,
}

pub struct SampleLoss {
    pub total: Var,
    pub scalars: LossScalars,
    pub forward: ForwardVars,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub priors: PriorBranches,
    pub lafm: Lafm,
    pub disc: DiscrepancyBranches,
    /// `decoder[l - 1]` fuses `up2(x)` with `F_out^l`, for l = 1..3.
    decoder: Vec<Conv2d>,
    head: Conv2d,
}

const HEAD_SCALE: &str = "head.norm.scale";
const HEAD_SHIFT: &str = "head.norm.shift";
/// Head output is upsampled 4x; each source value is spread over 16 pixels.
const HEAD_GAIN: f64 = 1.0 / 16.0;

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims;
        let decoder = (0..NUM_STAGES - 1)
            .map(|l| Conv2d::new(format!("decoder.{}", l + 1), d[l + 1] + d[l], d[l], 3, 1))
            .collect();
        Ok(Self {
            backbone: Backbone::new(cfg.channels, cfg.dims, cfg.groups),
            priors: PriorBranches::new(cfg.dims),
            lafm: Lafm::new(cfg.dims, cfg.ka, cfg.kn, cfg.fusion),
            disc: DiscrepancyBranches::new(cfg.dims),
            decoder,
            head: Conv2d::new("head.conv", d[0], 1, 3, 1),
            cfg,
        })
    }

    /// Fresh parameters drawn from the configured seed.
    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, &mut rng);
        self.priors.init(&mut store, &mut rng);
        self.lafm.init(&mut store, &mut rng);
        self.disc.init(&mut store, &mut rng);
        for c in &self.decoder {
            c.init(&mut store, &mut rng, 2f64.sqrt(), 0.0);
        }
        self.head.init(&mut store, &mut rng, 0.1, 0.0);
        store.insert(HEAD_SCALE, Tensor::full(&[1], 1.0));
        store.insert(HEAD_SHIFT, Tensor::full(&[1], 0.02));
        store
    }

    /// Full forward pass on a stage-aligned pair.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pair: &SamplePair) -> Result<ForwardVars> {
        pair.ensure_stage_aligned()?;
        let rgb = g.constant(pair.rgb.clone());
        let th = g.constant(pair.thermal.clone());
        let (fr, ft) = self.backbone.extract(g, store, rgb, th)?;
        let mut q = Vec::with_capacity(NUM_STAGES);
        let mut p = Vec::with_capacity(NUM_STAGES);
        for l in 1..=NUM_STAGES {
            let (qr, qt) = self.backbone.project(g, store, l, fr[l - 1], ft[l - 1]);
            p.push(self.priors.crowd_prior(g, store, l, qr, qt)?);
            q.push((qr, qt));
        }
        let fused = self.lafm.forward(g, store, &q, &p)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for l in 1..=NUM_STAGES {
            let (qr, qt) = q[l - 1];
            let d = self.disc.discrepancy(g, store, l, qr, qt)?;
            let f = &fused[l - 1];
            stages.push(StageVars {
                qr,
                qt,
                p: p[l - 1],
                rr: f.rr,
                rt: f.rt,
                d,
                joint: f.joint,
                fout: f.fout,
                interactions: f.interactions,
            });
        }
        let density = self.decode(g, store, &stages.iter().map(|s| s.fout).collect::<Vec<_>>());
        Ok(ForwardVars { density, stages })
    }

    /// `x = F_out^4`; for l = 3, 2, 1: `x = GELU(conv3x3([up2(x), F_out^l]))`;
    /// then head conv, affine normalization, ReLU and 4x upsampling.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, fout: &[Var]) -> Var {
        let mut x = fout[NUM_STAGES - 1];
        for l in (1..NUM_STAGES).rev() {
            let u = g.upsample_nearest(x, 2, 1.0);
            let c = g.concat(&[u, fout[l - 1]]);
            let c = self.decoder[l - 1].forward(g, store, c);
            x = g.gelu(c);
        }
        let y = self.head.forward(g, store, x);
        let scale = g.param(store, HEAD_SCALE);
        let shift = g.param(store, HEAD_SHIFT);
        let y = g.channel_affine(y, scale, shift);
        let y = g.relu(y);
        g.upsample_nearest(y, 4, HEAD_GAIN)
    }

    /// `L_total` of one (already augmented) sample.
    pub fn sample_loss(&self, g: &mut Graph, store: &ParamStore, pair: &SamplePair) -> Result<SampleLoss> {
        let fwd = self.forward(g, store, pair)?;
        let post = if pair.points.is_empty() {
            Vec::new()
        } else {
            point_posteriors(&pair.points, pair.height(), pair.width(), self.cfg.posterior_sigma)?
        };
        let cnt = g.count_loss(fwd.density, Rc::new(post))?;
        let mut cons = Vec::with_capacity(NUM_STAGES);
        for s in &fwd.stages {
            cons.push(g.cons_loss(s.rr, s.rt, s.d)?);
        }
        let total = g.total_loss(cnt, &cons, self.cfg.lambda_cons);
        let scalars = LossScalars {
            cnt: g.value(cnt).item(),
            cons: cons.iter().map(|&c| g.value(c).item()).collect(),
            total: g.value(total).item(),
        };
        if !scalars.cnt.is_finite() {
            return Err(Error::NonFiniteLoss { stage: "output".into(), term: "count".into() });
        }
        if let Some(l) = scalars.cons.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFiniteLoss { stage: (l + 1).to_string(), term: "consistency".into() });
        }
        Ok(SampleLoss { total, scalars, forward: fwd })
    }

    /// `L_warm` of one sample, with its per-stage terms.
    pub fn warmup(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pair: &SamplePair,
        labels: &SoftLabelSet,
    ) -> Result<Warmup> {
        let w = warmup_objective(g, store, &self.backbone, &self.priors, pair, labels, self.cfg.k_delta)?;
        for (l, s) in w.stages.iter().enumerate() {
            for (term, v) in [("prior", s.cap), ("alignment", s.align)] {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { stage: (l + 1).to_string(), term: term.into() });
                }
            }
        }
        Ok(w)
    }

    /// Density for an arbitrary-size pair: reflect-pads to multiples of 32,
    /// runs the network and crops the prediction back.
    pub fn predict(&self, store: &ParamStore, pair: &SamplePair) -> Result<(Tensor, Vec<StageMaps>)> {
        let padded = reflect_pad_pair(pair)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, &padded)?;
        let (h, w) = (pair.height(), pair.width());
        let y = g.crop_top_left(fwd.density, h, w);
        Ok((g.value(y).clone(), fwd.maps(&g)))
    }
}

/// Counting metrics over a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// GAME(0)..GAME(3).
    pub game: [f64; 4],
    pub rmse: f64,
}

/// Per-image outcome of an evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub id: String,
    pub predicted: f64,
    pub actual: usize,
}

/// Metrics of arbitrary density maps against point annotations.
pub fn metrics_from_densities(densities: &[Tensor], points: &[Vec<crate::data::PointAnnotation>]) -> Result<Metrics> {
    let mut m = Metrics::default();
    for (level, slot) in m.game.iter_mut().enumerate() {
        *slot = game(densities, points, level as i64)?;
    }
    let pred: Vec<f64> = densities.iter().map(Tensor::sum).collect();
    let gt: Vec<f64> = points.iter().map(|p| p.len() as f64).collect();
    m.rmse = rmse(&pred, &gt)?;
    Ok(m)
}

impl Model {
    /// Full-image metrics; densities are returned in dataset order.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        samples: &[SamplePair],
    ) -> Result<(Metrics, Vec<ImageResult>, Vec<Tensor>)> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut dens = Vec::with_capacity(samples.len());
        for s in samples {
            dens.push(self.predict(store, s)?.0);
        }
        let points: Vec<_> = samples.iter().map(|s| s.points.clone()).collect();
        let metrics = metrics_from_densities(&dens, &points)?;
        let per = samples
            .iter()
            .zip(&dens)
            .map(|(s, d)| ImageResult { id: s.id.clone(), predicted: d.sum(), actual: s.points.len() })
            .collect();
        Ok((metrics, per, dens))
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * n - 2 - i
    }
}

fn reflect_pad(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = t.chw();
    Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let (y, x) = ((i % (oh * ow)) / ow, i % ow);
        t.at3(ch, reflect_index(y, h), reflect_index(x, w))
    })
}

/// Pads bottom/right with reflection up to the next multiples of 32.
pub fn reflect_pad_pair(pair: &SamplePair) -> Result<SamplePair> {
    let (h, w) = (pair.height(), pair.width());
    let (oh, ow) = (h.div_ceil(32).max(1) * 32, w.div_ceil(32).max(1) * 32);
    if (oh, ow) == (h, w) {
        return Ok(pair.clone());
    }
    if oh - h >= h || ow - w >= w {
        return Err(Error::ShapeViolation(format!("{h}x{w} is too small to reflect-pad to {oh}x{ow}")));
    }
    Ok(SamplePair {
        id: pair.id.clone(),
        rgb: reflect_pad(&pair.rgb, oh, ow),
        thermal: reflect_pad(&pair.thermal, oh, ow),
        points: pair.points.clone(),
        meta: pair.meta.clone(),
    })
}

/// Parameters, optimizer state and progress counters.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: Model,
    pub params: ParamStore,
    pub opt: AdamW,
    pub epoch: u64,
    pub step: u64,
}

/// Scalars returned by one optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossScalars,
    /// L2 norm of the discrepancy-branch gradient.
    pub disc_grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub warm: f64,
    pub cap: Vec<f64>,
    pub align: Vec<f64>,
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

fn check_grads(grads: &BTreeMap<String, Tensor>) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.all_finite()) {
        Some((name, _)) => Err(Error::NonFiniteLoss { stage: name.clone(), term: "gradient".into() }),
        None => Ok(()),
    }
}

impl ModelState {
    /// Fresh state; with `pretrained`, the backbone, projections and prior
    /// branches are copied from it verbatim.
    pub fn build(cfg: ModelConfig, pretrained: Option<&Checkpoint>) -> Result<Self> {
        let model = Model::new(cfg)?;
        let mut params = model.init_params();
        if let Some(ck) = pretrained {
            let want = model.cfg.fingerprint();
            if ck.fingerprint != want {
                return Err(Error::FingerprintMismatch { expected: want, found: ck.fingerprint.clone() });
            }
            for (name, t) in ck.params.iter() {
                if !PRETRAIN_PREFIXES.iter().any(|p| name.starts_with(p)) {
                    continue;
                }
                let slot = params
                    .get_mut(name)
                    .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint parameter `{name}` is unknown")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::ShapeMismatch(format!("`{name}`: {:?} vs {:?}", slot.shape(), t.shape())));
                }
                *slot = t.clone();
            }
        }
        let opt = AdamW::new(model.cfg.train.optim.clone());
        Ok(Self { model, params, opt, epoch: 0, step: 0 })
    }

    /// Restores a saved state, verifying the fingerprint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(&ck.config).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let model = Model::new(cfg)?;
        let want = model.cfg.fingerprint();
        if ck.fingerprint != want {
            return Err(Error::FingerprintMismatch { expected: want, found: ck.fingerprint.clone() });
        }
        let fresh = model.init_params();
        let subset: Vec<String> = match ck.kind {
            CheckpointKind::Full => fresh.names(),
            CheckpointKind::Pretrain => {
                fresh.names().into_iter().filter(|n| PRETRAIN_PREFIXES.iter().any(|p| n.starts_with(p))).collect()
            }
        };
        for name in &subset {
            let t = ck.params.get(name).ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != fresh.get(name).expect("listed").shape() {
                return Err(Error::ShapeMismatch(format!("`{name}` has shape {:?}", t.shape())));
            }
        }
        Ok(Self { model, params: ck.params.clone(), opt: ck.opt.clone(), epoch: ck.epoch, step: ck.step })
    }

    pub fn to_checkpoint(&self, kind: CheckpointKind) -> Checkpoint {
        let params = match kind {
            CheckpointKind::Full => self.params.clone(),
            CheckpointKind::Pretrain => self.params.subset(&PRETRAIN_PREFIXES),
        };
        Checkpoint {
            kind,
            fingerprint: self.model.cfg.fingerprint(),
            config: toml::to_string(&self.model.cfg).expect("config serializes"),
            epoch: self.epoch,
            step: self.step,
            params,
            opt: self.opt.clone(),
        }
    }

    /// One AdamW step on the batch-mean of `L_total`.
    pub fn train_step(&mut self, batch: &[SamplePair], lr: f64) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut acc = BTreeMap::new();
        let mut sum = LossScalars { cons: vec![0.0; NUM_STAGES], ..Default::default() };
        for pair in batch {
            let mut g = Graph::new();
            let sl = self.model.sample_loss(&mut g, &self.params, pair)?;
            accumulate(&mut acc, g.backward(sl.total).into_params());
            sum.cnt += sl.scalars.cnt;
            sum.total += sl.scalars.total;
            for (a, b) in sum.cons.iter_mut().zip(&sl.scalars.cons) {
                *a += b;
            }
        }
        let n = batch.len() as f64;
        for g in acc.values_mut() {
            *g = g.scale(1.0 / n);
        }
        check_grads(&acc)?;
        let disc_grad_norm = acc
            .iter()
            .filter(|(k, _)| k.starts_with("disc."))
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        self.opt.step(&mut self.params, &acc, lr);
        self.step += 1;
        Ok(StepReport {
            losses: LossScalars {
                cnt: sum.cnt / n,
                cons: sum.cons.iter().map(|c| c / n).collect(),
                total: sum.total / n,
            },
            disc_grad_norm,
        })
    }

    /// One AdamW step on the batch-mean of `L_warm`; only stage-1 parameters move.
    pub fn pretrain_step(&mut self, batch: &[(SamplePair, SoftLabelSet)], lr: f64) -> Result<WarmupReport> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut acc = BTreeMap::new();
        let mut rep = WarmupReport { warm: 0.0, cap: vec![0.0; NUM_STAGES], align: vec![0.0; NUM_STAGES] };
        for (pair, labels) in batch {
            let mut g = Graph::new();
            let w = self.model.warmup(&mut g, &self.params, pair, labels)?;
            rep.warm += g.value(w.loss).item();
            for (l, s) in w.stages.iter().enumerate() {
                rep.cap[l] += s.cap;
                rep.align[l] += s.align;
            }
            accumulate(&mut acc, g.backward(w.loss).into_params());
        }
        let n = batch.len() as f64;
        for g in acc.values_mut() {
            *g = g.scale(1.0 / n);
        }
        check_grads(&acc)?;
        self.opt.step(&mut self.params, &acc, lr);
        self.step += 1;
        rep.warm /= n;
        rep.cap.iter_mut().chain(rep.align.iter_mut()).for_each(|v| *v /= n);
        Ok(rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};

    fn pair(seed: u64, size: usize) -> SamplePair {
        generate_scene(&SceneSpec { seed, canvas: [size, size], count_range: [3, 6], ..Default::default() }).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::tiny().validate().is_ok());
        assert!(ModelConfig { ka: 5, ..ModelConfig::tiny() }.validate().is_err());
        assert!(ModelConfig { kn: 4, ..ModelConfig::tiny() }.validate().is_err());
        assert!(ModelConfig::tiny().with_anchor_window(7).validate().is_ok());
        assert_eq!(ModelConfig::tiny().fingerprint(), ModelConfig { kn: 3, ..ModelConfig::tiny() }.fingerprint());
        assert_ne!(ModelConfig::tiny().fingerprint(), ModelConfig::default().fingerprint());
    }

    #[test]
    fn forward_shapes_and_nonnegative_density() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let store = m.init_params();
        let s = pair(1, 64);
        let mut g = Graph::new();
        let f = m.forward(&mut g, &store, &s).unwrap();
        assert_eq!(g.shape(f.density), &[1, 64, 64]);
        assert!(g.value(f.density).data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        let want = [[8, 16, 16], [8, 8, 8], [16, 4, 4], [16, 2, 2]];
        for (l, st) in f.stages.iter().enumerate() {
            assert_eq!(g.shape(st.fout), want[l]);
        }
    }

    #[test]
    fn predict_pads_and_crops() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let store = m.init_params();
        let s = generate_scene(&SceneSpec { seed: 2, canvas: [40, 70], count_range: [1, 3], ..Default::default() })
            .unwrap();
        let (y, maps) = m.predict(&store, &s).unwrap();
        assert_eq!(y.shape(), &[1, 40, 70]);
        assert_eq!(maps[0].p.shape(), &[1, 16, 24]);
    }

    #[test]
    fn zero_lambda_leaves_discrepancy_untouched() {
        let cfg = ModelConfig { lambda_cons: 0.0, ..ModelConfig::tiny() };
        let mut st = ModelState::build(cfg, None).unwrap();
        let before = st.params.subset(&["disc."]);
        let r = st.train_step(&[pair(3, 64)], 1e-3).unwrap();
        assert_eq!(r.disc_grad_norm, 0.0);
        // weight decay still applies to parameters with (zero) gradients
        let after = st.params.subset(&["disc."]);
        for ((_, a), (_, b)) in before.iter().zip(after.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-3 * 1e-4 * x.abs() + 1e-15);
            }
        }
        assert!(r.losses.total == r.losses.cnt);
    }

    #[test]
    fn build_transfers_stage_one_parameters() {
        let cfg = ModelConfig::tiny();
        let mut pre = ModelState::build(ModelConfig { seed: 9, ..cfg.clone() }, None).unwrap();
        let s = pair(4, 64);
        let l = crate::data::make_soft_labels(&s, &cfg.labels);
        pre.pretrain_step(&[(s, l)], 1e-3).unwrap();
        let ck = pre.to_checkpoint(CheckpointKind::Pretrain);
        let st = ModelState::build(cfg.clone(), Some(&ck)).unwrap();
        for (k, v) in ck.params.iter() {
            assert_eq!(st.params.get(k).unwrap(), v);
        }
        assert!(ck.params.names().iter().all(|n| PRETRAIN_PREFIXES.iter().any(|p| n.starts_with(p))));
        let other = ModelConfig { dims: [4, 4, 8, 8], ..cfg };
        assert!(matches!(ModelState::build(other, Some(&ck)), Err(Error::FingerprintMismatch { .. })));
    }
}
