//! Subcommands behind the `rgbt-crowd` binary: dataset synthesis,
//! pretraining, training, evaluation and ablation sweeps.

pub mod report;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::{generate_scene, read_dataset, write_dataset, SamplePair, SceneSpec};
use crate::error::{Error, Result};
use crate::lafm::FusionMode;
use crate::model::{Metrics, ModelConfig, ModelState};
use crate::train::{pretrain, shift_recovery, train};
use report::{fmt4, write_csv, CsvCell};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Dataset synthesis settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Template for every scene; its seed is replaced per sample.
    pub scene: SceneSpec,
    /// Share of scenes with low-light RGB.
    pub dark_fraction: f64,
    /// Share of scenes with thermal clutter (drawn after the dark ones).
    pub clutter_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 96,
            val: 12,
            test: 60,
            scene: SceneSpec::default(),
            dark_fraction: 1.0 / 3.0,
            clutter_fraction: 1.0 / 3.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let f = [self.dark_fraction, self.clutter_fraction];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || f[0] + f[1] > 1.0 {
            return Err(Error::Config(
                "dark_fraction and clutter_fraction must be in [0, 1] and sum to at most 1".into(),
            ));
        }
        self.scene.validate()
    }

    pub fn split_len(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

/// Everything a subcommand needs besides paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, synth: SynthConfig::default(), model: ModelConfig::tiny() }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub ka: Option<usize>,
    pub kn: Option<usize>,
    pub lambda_cons: Option<f64>,
    pub no_cons: bool,
}

impl RunConfig {
    /// Built-in defaults, replaced by the file when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies overrides and validates the result. The run seed drives both
    /// the generator and the model.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.model.seed = self.seed;
        if let Some(e) = o.epochs {
            self.model.train.pretrain_epochs = e;
            self.model.train.train_epochs = e;
        }
        if let Some(ka) = o.ka {
            self.model = self.model.with_anchor_window(ka);
        }
        if let Some(kn) = o.kn {
            self.model.kn = kn;
        }
        if let Some(l) = o.lambda_cons {
            self.model.lambda_cons = l;
        }
        if o.no_cons {
            self.model.lambda_cons = 0.0;
        }
        self.synth.validate()?;
        self.model.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the effective config next to an artifact.
pub fn dump_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
}

/// The scenes of one split; a pure function of the config, seed and split.
pub fn synth_split(cfg: &SynthConfig, seed: u64, split: &str) -> Result<Vec<SamplePair>> {
    let stream = SPLITS.iter().position(|s| *s == split).unwrap_or(SPLITS.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream);
    (0..cfg.split_len(split))
        .map(|i| {
            let mut spec = SceneSpec { seed: rng.random(), ..cfg.scene.clone() };
            let u: f64 = rng.random();
            if u < cfg.dark_fraction {
                spec.corruption.illumination.get_or_insert_with(Default::default);
            } else if u < cfg.dark_fraction + cfg.clutter_fraction {
                spec.corruption.thermal.get_or_insert_with(Default::default);
            }
            let mut s = generate_scene(&spec)?;
            s.id = format!("{split}_{i:04}");
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub samples: usize,
    pub points_total: usize,
    pub points_min: usize,
    pub points_max: usize,
    pub points_mean: f64,
    pub dark: usize,
    pub clutter: usize,
}

fn summarize(split: &str, s: &[SamplePair]) -> SplitSummary {
    let counts: Vec<usize> = s.iter().map(|p| p.points.len()).collect();
    let total: usize = counts.iter().sum();
    let flag = |f: fn(&crate::data::SceneMeta) -> bool| s.iter().filter(|p| p.meta.as_ref().is_some_and(f)).count();
    SplitSummary {
        split: split.to_string(),
        samples: s.len(),
        points_total: total,
        points_min: counts.iter().copied().min().unwrap_or(0),
        points_max: counts.iter().copied().max().unwrap_or(0),
        points_mean: if s.is_empty() { 0.0 } else { total as f64 / s.len() as f64 },
        dark: flag(crate::data::SceneMeta::is_dark),
        clutter: flag(crate::data::SceneMeta::has_thermal_clutter),
    }
}

/// `synth`: writes `train/`, `val/` and `test/` under `data`.
pub fn cmd_synth(cfg: &RunConfig, data: &Path) -> Result<Vec<SplitSummary>> {
    let mut out = Vec::new();
    for split in SPLITS {
        let samples = synth_split(&cfg.synth, cfg.seed, split)?;
        write_dataset(&data.join(split), &samples)?;
        out.push(summarize(split, &samples));
    }
    dump_config(data, cfg)?;
    Ok(out)
}

fn read_split(data: &Path, split: &str) -> Result<Vec<SamplePair>> {
    let s = read_dataset(&data.join(split))?;
    if s.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(s)
}

struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?)))
    }

    fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.0, "{line}").map_err(|e| Error::io("log", e))
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush().map_err(|e| Error::io("log", e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Stage-1 shift recovery on the validation split.
    pub shift_recovery: Option<f64>,
}

/// `pretrain`: stage 1 on `data/train`; writes `pretrain.ckpt`,
/// `pretrain_log.jsonl` and `config.toml` into `out`.
pub fn cmd_pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PretrainSummary> {
    let train_set = read_split(data, "train")?;
    let val = read_dataset(&data.join("val")).unwrap_or_default();
    dump_config(out, cfg)?;
    let mut state = ModelState::build(cfg.model.clone(), None)?;
    let mut log = JsonLines::create(&out.join("pretrain_log.jsonl"))?;
    let recs = if cfg.model.train.pretrain_epochs == 0 {
        Vec::new()
    } else {
        pretrain(&mut state, &train_set, |r| log.write(r))?
    };
    log.finish()?;
    let checkpoint = out.join("pretrain.ckpt");
    state.to_checkpoint(CheckpointKind::Pretrain).save(&checkpoint)?;
    let shift = if val.iter().any(|s| s.meta.is_some()) { shift_recovery(&state, &val, 1, 0.5).ok() } else { None };
    Ok(PretrainSummary {
        checkpoint,
        steps: state.step,
        initial_loss: recs.first().map(|r| r.l_warm),
        final_loss: recs.last().map(|r| r.l_warm),
        shift_recovery: shift,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best: Metrics,
    pub steps: u64,
}

fn metric_cells(m: &Metrics) -> Vec<CsvCell> {
    m.game.iter().chain([&m.rmse]).map(|&v| CsvCell::Float(v)).collect()
}

pub const METRIC_COLUMNS: [&str; 5] = ["game0", "game1", "game2", "game3", "rmse"];

/// `train`: stage 2 on `data/train`, validated on `data/val`. Writes
/// `best.ckpt`, `last.ckpt`, `train_log.jsonl`, `metrics.csv` and `config.toml`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, pretrained: Option<&Path>) -> Result<TrainSummary> {
    let train_set = read_split(data, "train")?;
    let val = read_split(data, "val")?;
    dump_config(out, cfg)?;
    let ck = pretrained.map(Checkpoint::load).transpose()?;
    let mut state = ModelState::build(cfg.model.clone(), ck.as_ref())?;
    let mut log = JsonLines::create(&out.join("train_log.jsonl"))?;
    let mut rows = Vec::new();
    let outcome = train(
        &mut state,
        &train_set,
        &val,
        |r| log.write(r),
        |e| {
            let mut row = vec![CsvCell::Int(e.epoch as u64), CsvCell::Int(e.step)];
            row.extend(metric_cells(&e.metrics));
            rows.push(row);
            Ok(())
        },
    )?;
    log.finish()?;
    let mut header = vec!["epoch", "step"];
    header.extend(METRIC_COLUMNS);
    write_csv(&out.join("metrics.csv"), &header, &rows)?;
    let last_checkpoint = out.join("last.ckpt");
    state.to_checkpoint(CheckpointKind::Full).save(&last_checkpoint)?;
    let (best_rec, best_params) = outcome.best.ok_or(Error::EmptyDataset)?;
    let best_checkpoint = out.join("best.ckpt");
    let mut best_state = state.clone();
    best_state.params = best_params;
    best_state.epoch = best_rec.epoch as u64;
    best_state.step = best_rec.step;
    best_state.to_checkpoint(CheckpointKind::Full).save(&best_checkpoint)?;
    Ok(TrainSummary {
        best_checkpoint,
        last_checkpoint,
        best_epoch: best_rec.epoch,
        best: best_rec.metrics,
        steps: state.step,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metrics: Metrics,
    pub samples: usize,
    pub predicted: Vec<f64>,
    pub actual: Vec<usize>,
}

/// Heatmap columns written per sample, in display order.
pub const HEATMAP_COLUMNS: [&str; 7] = ["rgb", "thermal", "prior", "rel_rgb", "rel_thermal", "fout", "density"];

/// `eval`: full-image metrics of a full checkpoint on one split directory.
/// Writes `metrics.csv`, `per_image.csv`, `summary.json`, and per-sample
/// PNG heatmaps plus raw `.npy` arrays.
pub fn cmd_eval(ckpt: &Path, split_dir: &Path, out: &Path) -> Result<EvalSummary> {
    let samples = read_dataset(split_dir)?;
    let ck = Checkpoint::load(ckpt)?;
    if ck.kind != CheckpointKind::Full {
        return Err(Error::Config(format!("{} is a pretraining checkpoint", ckpt.display())));
    }
    let state = ModelState::from_checkpoint(&ck)?;
    let heat = out.join("heatmaps");
    let arrays = out.join("arrays");
    create_dir(&heat)?;
    create_dir(&arrays)?;
    let mut dens = Vec::with_capacity(samples.len());
    let mut per_rows = Vec::new();
    for s in &samples {
        let (y, maps) = state.model.predict(&state.params, s)?;
        let m1 = &maps[0];
        let cols = [
            (s.rgb.clone(), 0),
            (s.thermal.clone(), 0),
            (m1.p.clone(), 4),
            (m1.rr.clone(), 4),
            (m1.rt.clone(), 4),
            (m1.fout.channel_mean(), 4),
            (y.clone(), 1),
        ];
        for (name, (t, factor)) in HEATMAP_COLUMNS.iter().zip(cols) {
            let png = heat.join(format!("{}_{name}.png", s.id));
            if factor == 0 {
                report::save_image(&png, &t)?;
            } else {
                report::save_heatmap(&png, &t, factor)?;
            }
            report::write_npy(&arrays.join(format!("{}_{name}.npy", s.id)), &t)?;
        }
        per_rows.push(vec![CsvCell::Text(s.id.clone()), CsvCell::Int(s.points.len() as u64), CsvCell::Float(y.sum())]);
        dens.push(y);
    }
    let points: Vec<_> = samples.iter().map(|s| s.points.clone()).collect();
    let metrics = crate::model::metrics_from_densities(&dens, &points)?;
    write_csv(&out.join("metrics.csv"), &METRIC_COLUMNS, &[metric_cells(&metrics)])?;
    write_csv(&out.join("per_image.csv"), &["id", "actual", "predicted"], &per_rows)?;
    let summary = EvalSummary {
        metrics,
        samples: samples.len(),
        predicted: dens.iter().map(|d| d.sum()).collect(),
        actual: samples.iter().map(|s| s.points.len()).collect(),
    };
    let p = out.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}

/// A sweep dimension of `ablate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Anchor window `K_a` (the matching radius follows it).
    Ka,
    /// Anchor neighbourhood `k_n`.
    Kn,
    LambdaCons,
    /// `lafm` or `dense` fusion.
    Fusion,
    /// `full`, `no-pretrain` or `no-cons`.
    Component,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ka" => Axis::Ka,
            "kn" => Axis::Kn,
            "lambda-cons" | "lambda_cons" => Axis::LambdaCons,
            "fusion" => Axis::Fusion,
            "component" => Axis::Component,
            _ => return Err(Error::Config(format!("unknown ablation axis `{s}`"))),
        })
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Ka => "ka",
            Axis::Kn => "kn",
            Axis::LambdaCons => "lambda_cons",
            Axis::Fusion => "fusion",
            Axis::Component => "component",
        }
    }

    /// The values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Ka => &["1", "3", "5", "7", "9"],
            Axis::Kn => &["3", "5", "7", "9"],
            Axis::LambdaCons => &["0.001", "0.01", "0.1", "1", "10"],
            Axis::Fusion => &["lafm", "dense"],
            Axis::Component => &["full", "no-pretrain", "no-cons"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Applies one axis value; returns whether the cell uses pretraining.
    /// `cfg` is left untouched when the value is rejected.
    pub fn apply(self, value: &str, cfg: &mut RunConfig) -> Result<bool> {
        let mut next = cfg.clone();
        let pretrained = self.apply_to(value, &mut next)?;
        next.model.validate()?;
        *cfg = next;
        Ok(pretrained)
    }

    fn apply_to(self, value: &str, cfg: &mut RunConfig) -> Result<bool> {
        let bad = || Error::Config(format!("`{value}` is not a legal value for axis {}", self.name()));
        let mut pretrained = true;
        match self {
            Axis::Ka => cfg.model = cfg.model.clone().with_anchor_window(value.parse().map_err(|_| bad())?),
            Axis::Kn => cfg.model.kn = value.parse().map_err(|_| bad())?,
            Axis::LambdaCons => cfg.model.lambda_cons = value.parse().map_err(|_| bad())?,
            Axis::Fusion => {
                cfg.model.fusion = match value {
                    "lafm" => FusionMode::Lafm,
                    "dense" => FusionMode::Dense,
                    _ => return Err(bad()),
                }
            }
            Axis::Component => match value {
                "full" => {}
                "no-pretrain" => pretrained = false,
                "no-cons" => cfg.model.lambda_cons = 0.0,
                _ => return Err(bad()),
            },
        }
        Ok(pretrained)
    }

    /// Whether stage 1 depends on the swept value.
    fn changes_pretraining(self) -> bool {
        self == Axis::Ka
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub metrics: Metrics,
    pub checkpoint: PathBuf,
}

fn cell_dir_name(axis: Axis, value: &str) -> String {
    format!("{}={}", axis.name(), value)
}

/// `ablate`: one stage-2 run per axis value, evaluated on `data/test`.
/// A cell whose `result.json` exists is reused, so an interrupted sweep
/// resumes where it stopped. Writes `report.csv` and `report.md`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    axis: Axis,
    values: &[String],
    use_pretraining: bool,
) -> Result<Vec<AblationRow>> {
    let test = read_split(data, "test")?;
    // validate every value before any training starts
    let cells = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            let pre = axis.apply(v, &mut c)? && use_pretraining;
            Ok((v.clone(), c, pre))
        })
        .collect::<Result<Vec<_>>>()?;
    dump_config(out, cfg)?;
    let mut rows = Vec::new();
    for (value, c, pre) in cells {
        let dir = out.join(cell_dir_name(axis, &value));
        let result = dir.join("result.json");
        if let Ok(text) = std::fs::read_to_string(&result) {
            if let Ok(row) = serde_json::from_str::<AblationRow>(&text) {
                rows.push(row);
                continue;
            }
        }
        let ckpt = if !pre {
            None
        } else if axis.changes_pretraining() {
            Some(cmd_pretrain(&c, data, &dir.join("pretrain"))?.checkpoint)
        } else {
            let shared = out.join("pretrain");
            let p = shared.join("pretrain.ckpt");
            if !p.exists() {
                cmd_pretrain(cfg, data, &shared)?;
            }
            Some(p)
        };
        let t = cmd_train(&c, data, &dir, ckpt.as_deref())?;
        let ck = Checkpoint::load(&t.best_checkpoint)?;
        let state = ModelState::from_checkpoint(&ck)?;
        let (metrics, _, _) = state.model.evaluate(&state.params, &test)?;
        let row = AblationRow { value, metrics, checkpoint: t.best_checkpoint };
        std::fs::write(&result, serde_json::to_string_pretty(&row).expect("row serializes"))
            .map_err(|e| Error::io(&result, e))?;
        rows.push(row);
    }
    let header = [axis.name(), "game0", "game1", "game2", "game3", "rmse", "checkpoint"];
    let table: Vec<Vec<CsvCell>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![CsvCell::Text(r.value.clone())];
            row.extend(metric_cells(&r.metrics));
            row.push(CsvCell::Text(r.checkpoint.display().to_string()));
            row
        })
        .collect();
    write_csv(&out.join("report.csv"), &header, &table)?;
    let md = out.join("report.md");
    std::fs::write(&md, report::markdown_table(&header, &table)).map_err(|e| Error::io(&md, e))?;
    Ok(rows)
}

/// One-line rendering of metrics for terminal output.
pub fn metrics_line(m: &Metrics) -> String {
    format!(
        "GAME0 {} GAME1 {} GAME2 {} GAME3 {} RMSE {}",
        fmt4(m.game[0]),
        fmt4(m.game[1]),
        fmt4(m.game[2]),
        fmt4(m.game[3]),
        fmt4(m.rmse)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let o = Overrides { seed: Some(5), ka: Some(5), kn: Some(7), no_cons: true, ..Default::default() };
        let c = RunConfig::default().resolve(&o).unwrap();
        assert_eq!((c.seed, c.model.seed, c.model.ka, c.model.k_delta, c.model.kn), (5, 5, 5, 2, 7));
        assert_eq!(c.model.lambda_cons, 0.0);
        assert!(RunConfig::default().resolve(&Overrides { kn: Some(4), ..Default::default() }).is_err());
    }

    #[test]
    fn config_file_round_trips_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        let mut c = RunConfig::default();
        c.synth.train = 3;
        c.model.kn = 7;
        std::fs::write(&p, c.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&p)).unwrap(), c);
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(Error::Config(_))));
    }

    #[test]
    fn axis_values_are_checked() {
        let mut c = RunConfig::default();
        assert!(Axis::Ka.apply("4", &mut c).is_err());
        assert!(Axis::Fusion.apply("sparse", &mut c).is_err());
        assert!(!Axis::Component.apply("no-pretrain", &mut c).unwrap());
        assert!(Axis::LambdaCons.apply("-1", &mut c).is_err());
        assert_eq!(Axis::LambdaCons.default_values().len(), 5);
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn synth_split_is_deterministic_and_mixed() {
        let cfg = SynthConfig { test: 12, ..Default::default() };
        let a = synth_split(&cfg, 3, "test").unwrap();
        assert_eq!(a, synth_split(&cfg, 3, "test").unwrap());
        assert_ne!(a, synth_split(&cfg, 4, "test").unwrap());
        let s = summarize("test", &a);
        assert_eq!(s.samples, 12);
        assert!(s.dark > 0 && s.clutter > 0 && s.dark + s.clutter < 12);
    }
}
