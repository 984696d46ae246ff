//! Python bindings. Tensors cross the boundary as flat row-major lists of
//! floats plus an explicit shape.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

use rgbt_crowd::checkpoint::{Checkpoint, CheckpointKind};
use rgbt_crowd::data::{generate_scene, make_soft_labels, read_dataset, PointAnnotation, SamplePair, SceneSpec};
use rgbt_crowd::harness::{self, RunConfig};
use rgbt_crowd::model::{Metrics, ModelConfig, ModelState};
use rgbt_crowd::{alignment, objective, Error, Tensor};

create_exception!(rgbt_crowd, CrowdError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::ShapeMismatch(_) | Error::ShapeViolation(_) | Error::NegativeLevel(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } | Error::DatasetMissing(_) => PyIOError::new_err(e.to_string()),
        _ => CrowdError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

type Flat = (Vec<f64>, Vec<usize>);

fn flat(t: &Tensor) -> Flat {
    (t.data().to_vec(), t.shape().to_vec())
}

fn points(pts: Vec<(f64, f64)>) -> Vec<PointAnnotation> {
    pts.into_iter().map(|(x, y)| PointAnnotation::new(x, y)).collect()
}

fn metrics_tuple(m: &Metrics) -> ([f64; 4], f64) {
    (m.game, m.rmse)
}

/// One RGB-thermal pair with its head annotations.
#[pyclass(name = "Sample", module = "rgbt_crowd", frozen, from_py_object)]
#[derive(Clone)]
struct PySample(SamplePair);

#[pymethods]
impl PySample {
    /// Renders a synthetic scene.
    #[staticmethod]
    #[pyo3(signature = (seed, height = 128, width = 128, min_count = 4, max_count = 24, dark = false, clutter = false))]
    fn synthesize(
        seed: u64,
        height: usize,
        width: usize,
        min_count: usize,
        max_count: usize,
        dark: bool,
        clutter: bool,
    ) -> PyResult<Self> {
        let mut spec =
            SceneSpec { seed, canvas: [height, width], count_range: [min_count, max_count], ..Default::default() };
        if dark {
            spec.corruption.illumination = Some(Default::default());
        }
        if clutter {
            spec.corruption.thermal = Some(Default::default());
        }
        generate_scene(&spec).map(Self).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (id, rgb, thermal, shape, points))]
    fn from_arrays(
        id: String,
        rgb: Vec<f64>,
        thermal: Vec<f64>,
        shape: (usize, usize),
        points: Vec<(f64, f64)>,
    ) -> PyResult<Self> {
        let (h, w) = shape;
        let rgb = tensor(rgb, vec![3, h, w])?;
        let thermal = tensor(thermal, vec![1, h, w])?;
        SamplePair::new(id, rgb, thermal, self::points(points), None).map(Self).map_err(to_py)
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    #[getter]
    fn rgb(&self) -> Flat {
        flat(&self.0.rgb)
    }

    #[getter]
    fn thermal(&self) -> Flat {
        flat(&self.0.thermal)
    }

    /// `(x, y)` head positions in pixels.
    #[getter]
    fn points(&self) -> Vec<(f64, f64)> {
        self.0.points.iter().map(|p| (p.x, p.y)).collect()
    }

    #[getter]
    fn is_dark(&self) -> bool {
        self.0.meta.as_ref().is_some_and(|m| m.is_dark())
    }

    #[getter]
    fn has_thermal_clutter(&self) -> bool {
        self.0.meta.as_ref().is_some_and(|m| m.has_thermal_clutter())
    }

    fn __len__(&self) -> usize {
        self.0.points.len()
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, shape={:?}, count={})", self.0.id, self.shape(), self.0.points.len())
    }
}

/// Model parameters with optimizer state.
#[pyclass(name = "Model", module = "rgbt_crowd")]
struct PyModel(ModelState);

#[pymethods]
impl PyModel {
    /// Fresh desk-scale model, or one built from a TOML model config.
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::tiny(),
        };
        cfg.seed = seed;
        cfg.validate().map_err(to_py)?;
        ModelState::build(cfg, None).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        ModelState::from_checkpoint(&ck).map(Self).map_err(to_py)
    }

    /// Writes a full checkpoint, or only the stage-1 parameters with `stage1=True`.
    #[pyo3(signature = (path, stage1 = false))]
    fn save(&self, path: PathBuf, stage1: bool) -> PyResult<()> {
        let kind = if stage1 { CheckpointKind::Pretrain } else { CheckpointKind::Full };
        self.0.to_checkpoint(kind).save(&path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> String {
        toml::to_string(&self.0.model.cfg).expect("config serializes")
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.params.num_scalars()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step
    }

    /// Density map `(values, [1, H, W])` of a sample of any size.
    fn predict(&self, sample: &PySample) -> PyResult<Flat> {
        let (y, _) = self.0.model.predict(&self.0.params, &sample.0).map_err(to_py)?;
        Ok(flat(&y))
    }

    fn count(&self, sample: &PySample) -> PyResult<f64> {
        Ok(self.0.model.predict(&self.0.params, &sample.0).map_err(to_py)?.0.sum())
    }

    /// Stage-1 maps `P`, `R_r`, `R_t` of the finest stage.
    fn stage_maps(&self, sample: &PySample) -> PyResult<(Flat, Flat, Flat)> {
        let (_, maps) = self.0.model.predict(&self.0.params, &sample.0).map_err(to_py)?;
        Ok((flat(&maps[0].p), flat(&maps[0].rr), flat(&maps[0].rt)))
    }

    /// One stage-2 step; returns `(L_cnt, L_total, disc_grad_norm)`.
    #[pyo3(signature = (batch, lr = None))]
    fn train_step(&mut self, batch: Vec<PySample>, lr: Option<f64>) -> PyResult<(f64, f64, f64)> {
        let lr = lr.unwrap_or(self.0.model.cfg.train.train_lr);
        let batch: Vec<SamplePair> = batch.into_iter().map(|s| s.0).collect();
        let r = self.0.train_step(&batch, lr).map_err(to_py)?;
        Ok((r.losses.cnt, r.losses.total, r.disc_grad_norm))
    }

    /// One stage-1 step; returns `L_warm`.
    #[pyo3(signature = (batch, lr = None))]
    fn pretrain_step(&mut self, batch: Vec<PySample>, lr: Option<f64>) -> PyResult<f64> {
        let lr = lr.unwrap_or(self.0.model.cfg.train.pretrain_lr);
        let policy = &self.0.model.cfg.labels;
        let batch: Vec<_> = batch.into_iter().map(|s| (s.0.clone(), make_soft_labels(&s.0, policy))).collect();
        Ok(self.0.pretrain_step(&batch, lr).map_err(to_py)?.warm)
    }

    /// `([GAME0..GAME3], RMSE)` over the samples.
    fn evaluate(&self, samples: Vec<PySample>) -> PyResult<([f64; 4], f64)> {
        let samples: Vec<SamplePair> = samples.into_iter().map(|s| s.0).collect();
        let (m, _, _) = self.0.model.evaluate(&self.0.params, &samples).map_err(to_py)?;
        Ok(metrics_tuple(&m))
    }
}

/// Soft matching of `src` onto `dst` (both `[d, H, W]`); returns the aligned
/// features and the `[(2r+1)^2, H, W]` weights.
#[pyfunction]
fn soft_match(src: Vec<f64>, dst: Vec<f64>, shape: (usize, usize, usize), radius: usize) -> PyResult<(Flat, Flat)> {
    let (d, h, w) = shape;
    let m = alignment::soft_match(
        &tensor(src, vec![d, h, w])?,
        &tensor(dst, vec![d, h, w])?,
        alignment::MatchWindow::new(radius),
    )
    .map_err(to_py)?;
    Ok((flat(&m.aligned), flat(&m.alpha)))
}

#[pyfunction]
fn game(density: Vec<f64>, shape: (usize, usize), points: Vec<(f64, f64)>, level: i64) -> PyResult<f64> {
    let d = tensor(density, vec![1, shape.0, shape.1])?;
    objective::game_single(&d, &self::points(points), level).map_err(to_py)
}

#[pyfunction]
fn rmse(pred: Vec<f64>, gt: Vec<f64>) -> PyResult<f64> {
    objective::rmse(&pred, &gt).map_err(to_py)
}

#[pyfunction]
fn mae(pred: Vec<f64>, gt: Vec<f64>) -> PyResult<f64> {
    objective::mae(&pred, &gt).map_err(to_py)
}

/// Reads every sample of a dataset directory.
#[pyfunction]
fn load_dataset(dir: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(read_dataset(&dir).map_err(to_py)?.into_iter().map(PySample).collect())
}

/// Writes `train/`, `val/` and `test/` splits; returns the sample counts.
#[pyfunction]
#[pyo3(signature = (data, seed = 0, config = None))]
fn synth(data: PathBuf, seed: u64, config: Option<PathBuf>) -> PyResult<Vec<(String, usize)>> {
    let cfg = RunConfig::load(config.as_deref())
        .and_then(|c| c.resolve(&harness::Overrides { seed: Some(seed), ..Default::default() }))
        .map_err(to_py)?;
    let s = harness::cmd_synth(&cfg, &data).map_err(to_py)?;
    Ok(s.into_iter().map(|s| (s.split, s.samples)).collect())
}

#[pymodule(name = "rgbt_crowd")]
fn rgbt_crowd_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CrowdError", m.py().get_type::<CrowdError>())?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(soft_match, m)?)?;
    m.add_function(wrap_pyfunction!(game, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
