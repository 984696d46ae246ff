//! Stage-1 and stage-2 training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{shift_hits, warmup_objective};
use crate::autograd::Graph;
use crate::data::{make_soft_labels, random_crop_flip, SamplePair, SigmaPolicy, SoftLabelSet};
use crate::error::{Error, Result};
use crate::model::{Metrics, ModelState};
use crate::nn::ParamStore;
use crate::optim::AdamWConfig;

/// Optimization schedule. The defaults are the full-scale settings; the
/// `desk` preset is what runs on a single CPU core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub crop: usize,
    pub batch_size: usize,
    pub flip_p: f64,
    pub pretrain_lr: f64,
    pub train_lr: f64,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    /// Stage-2 steps over which the learning rate ramps linearly up to `train_lr`.
    pub train_warmup_steps: usize,
    /// Validate every this many stage-2 epochs (and after the last).
    pub eval_every: usize,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop: 256,
            batch_size: 16,
            flip_p: 0.5,
            pretrain_lr: 1e-5,
            train_lr: 1e-4,
            pretrain_epochs: 30,
            train_epochs: 300,
            train_warmup_steps: 0,
            eval_every: 10,
            optim: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            crop: 64,
            batch_size: 4,
            pretrain_lr: 3e-3,
            train_lr: 1e-3,
            pretrain_epochs: 30,
            train_epochs: 40,
            train_warmup_steps: 48,
            eval_every: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || !self.crop.is_multiple_of(32) {
            return Err(Error::Config(format!("crop = {} must be a positive multiple of 32", self.crop)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.pretrain_lr > 0.0 && self.train_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Stage-2 learning rate for the optimizer step that follows `done` steps.
    pub fn train_lr_at(&self, done: u64) -> f64 {
        let w = self.train_warmup_steps as u64;
        if done >= w {
            self.train_lr
        } else {
            self.train_lr * (done + 1) as f64 / (w + 1) as f64
        }
    }
}

/// One line of the stage-1 log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "L_warm")]
    pub l_warm: f64,
    #[serde(rename = "L_cap")]
    pub l_cap: Vec<f64>,
    #[serde(rename = "L_align")]
    pub l_align: Vec<f64>,
    pub lr: f64,
}

/// One line of the stage-2 log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "L_cnt")]
    pub l_cnt: f64,
    #[serde(rename = "L_cons")]
    pub l_cons: Vec<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
    pub disc_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub metrics: Metrics,
}

/// Soft labels of every sample under `policy`.
pub fn label_all(samples: &[SamplePair], policy: &SigmaPolicy) -> Vec<SoftLabelSet> {
    samples.iter().map(|s| make_soft_labels(s, policy)).collect()
}

/// Seeded shuffle of `0..n` cut into batches; a short tail batch is kept.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn augment(
    samples: &[SamplePair],
    labels: &[SoftLabelSet],
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(SamplePair, SoftLabelSet)>> {
    idx.iter().map(|&i| random_crop_flip(&samples[i], &labels[i], cfg.crop, cfg.flip_p, rng)).collect()
}

const PRETRAIN_STREAM: u64 = 0x5052_4554;
const TRAIN_STREAM: u64 = 0x5452_4149;

/// Stage 1: optimizes `L_warm` for `pretrain_epochs`, calling `log` after every step.
pub fn pretrain(
    state: &mut ModelState,
    samples: &[SamplePair],
    mut log: impl FnMut(&PretrainRecord) -> Result<()>,
) -> Result<Vec<PretrainRecord>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = state.model.cfg.train.clone();
    let labels = label_all(samples, &state.model.cfg.labels);
    let mut rng = ChaCha8Rng::seed_from_u64(state.model.cfg.seed ^ PRETRAIN_STREAM);
    let mut out = Vec::new();
    for epoch in 1..=cfg.pretrain_epochs {
        for idx in epoch_batches(samples.len(), cfg.batch_size, &mut rng) {
            let batch = augment(samples, &labels, &idx, &cfg, &mut rng)?;
            let r = state.pretrain_step(&batch, cfg.pretrain_lr)?;
            let rec = PretrainRecord {
                epoch,
                step: state.step,
                l_warm: r.warm,
                l_cap: r.cap,
                l_align: r.align,
                lr: cfg.pretrain_lr,
            };
            log(&rec)?;
            out.push(rec);
        }
        state.epoch = epoch as u64;
    }
    Ok(out)
}

/// Fraction of stage-`l` cells with label prior above `threshold` whose
/// argmax RGB-to-thermal offset equals the true scene shift.
pub fn shift_recovery(state: &ModelState, samples: &[SamplePair], l: usize, threshold: f64) -> Result<f64> {
    let m = &state.model;
    let (mut hits, mut total) = (0, 0);
    for s in samples {
        let Some(meta) = &s.meta else { continue };
        let labels = make_soft_labels(s, &m.cfg.labels);
        let mut g = Graph::new();
        let w = warmup_objective(&mut g, &state.params, &m.backbone, &m.priors, s, &labels, m.cfg.k_delta)?;
        let (h, t) = shift_hits(&w.stages[l - 1].match_rt, meta, labels.stage_prior(l), l, threshold);
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(hits as f64 / total as f64)
}

/// Outcome of stage 2. `best` holds the parameters with the lowest
/// validation GAME(0) seen at an evaluation point.
pub struct TrainOutcome {
    pub log: Vec<TrainRecord>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<(EvalRecord, ParamStore)>,
}

/// Stage 2: optimizes `L_total`; validates every `eval_every` epochs when
/// `val` is non-empty.
pub fn train(
    state: &mut ModelState,
    samples: &[SamplePair],
    val: &[SamplePair],
    mut log: impl FnMut(&TrainRecord) -> Result<()>,
    mut on_eval: impl FnMut(&EvalRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = state.model.cfg.train.clone();
    let labels = label_all(samples, &state.model.cfg.labels);
    let mut rng = ChaCha8Rng::seed_from_u64(state.model.cfg.seed ^ TRAIN_STREAM);
    let mut out = TrainOutcome { log: Vec::new(), evals: Vec::new(), best: None };
    let mut done = 0u64;
    for epoch in 1..=cfg.train_epochs {
        for idx in epoch_batches(samples.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<SamplePair> =
                augment(samples, &labels, &idx, &cfg, &mut rng)?.into_iter().map(|(p, _)| p).collect();
            let lr = cfg.train_lr_at(done);
            done += 1;
            let r = state.train_step(&batch, lr)?;
            let rec = TrainRecord {
                epoch,
                step: state.step,
                l_cnt: r.losses.cnt,
                l_cons: r.losses.cons,
                l_total: r.losses.total,
                lr,
                disc_grad_norm: r.disc_grad_norm,
            };
            log(&rec)?;
            out.log.push(rec);
        }
        state.epoch = epoch as u64;
        if !val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.train_epochs) {
            let (metrics, _, _) = state.model.evaluate(&state.params, val)?;
            let ev = EvalRecord { epoch, step: state.step, metrics };
            on_eval(&ev)?;
            let better = out.best.as_ref().is_none_or(|(b, _)| ev.metrics.game[0] < b.metrics.game[0]);
            if better {
                out.best = Some((ev.clone(), state.params.clone()));
            }
            out.evals.push(ev);
        }
    }
    Ok(out)
}
