//! Python bindings: geometry kernels, metrics, synthetic data and the
//! pre-training harness, exposed as the `mmpt` module.

pub mod convert;

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmpt_core::data::{self, DataConfig, ShapeSpec, Split};
use mmpt_core::geometry::{self, PointCloud};
use mmpt_core::harness::{self, checkpoint, FewShotSpec, ProbeOptions, StepLog, TrainConfig};
use mmpt_core::losses;
use mmpt_core::tensor::GradCheckOptions;
use mmpt_core::MmptError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use convert::{error_class, points_from_rows, rows_from_points, step_fields, ErrorClass};

fn py_err(e: MmptError) -> PyErr {
    let msg = e.to_string();
    match error_class(&e) {
        ErrorClass::Value => PyValueError::new_err(msg),
        ErrorClass::Os => PyOSError::new_err(msg),
        ErrorClass::Arithmetic => PyArithmeticError::new_err(msg),
        ErrorClass::Runtime => PyRuntimeError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for Result<T, MmptError> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

type Rows = Vec<Vec<f64>>;

fn cloud(rows: &[Vec<f64>]) -> PyResult<PointCloud> {
    PointCloud::new(points_from_rows(rows).py()?).py()
}

fn step_dict<'py>(py: Python<'py>, log: &StepLog) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in step_fields(log) {
        if k == "step" {
            d.set_item(k, log.step)?;
        } else {
            d.set_item(k, v)?;
        }
    }
    Ok(d)
}

/// Farthest point sampling; returns `m` indices starting at `seed_index`.
#[pyfunction]
#[pyo3(signature = (points, m, seed_index = 0))]
fn farthest_point_sample(points: Vec<Vec<f64>>, m: usize, seed_index: usize) -> PyResult<Vec<usize>> {
    geometry::farthest_point_sample(&cloud(&points)?, m, seed_index).py()
}

/// k-NN groups around `centers`: `(neighbor_indices, center_relative_points)`, one list per center.
#[pyfunction]
fn knn_group(points: Vec<Vec<f64>>, centers: Vec<usize>, k: usize) -> PyResult<(Vec<Vec<usize>>, Vec<Rows>)> {
    let ps = geometry::knn_group(&cloud(&points)?, &centers, k).py()?;
    let idx = ps.neighbors.chunks(k).map(<[usize]>::to_vec).collect();
    let rel = (0..ps.m).map(|j| rows_from_points(ps.patch(j))).collect();
    Ok((idx, rel))
}

/// Unit-sphere normalisation (centroid to origin, max radius 1).
#[pyfunction]
fn normalize_unit_sphere(points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows_from_points(geometry::normalize_unit_sphere(&cloud(&points)?).py()?.points()))
}

#[pyfunction]
fn mask_count(m: usize, ratio: f64) -> usize {
    geometry::mask_count(m, ratio)
}

/// Random `(masked, visible)` split of `0..m`.
#[pyfunction]
#[pyo3(signature = (m, ratio, seed = 0))]
fn random_mask(m: usize, ratio: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let p = geometry::random_mask(m, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).py()?;
    Ok((p.masked, p.visible))
}

#[pyfunction]
fn chamfer_l1(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::chamfer_l1(&points_from_rows(&pred).py()?, &points_from_rows(&gt).py()?).py()
}

#[pyfunction]
fn chamfer_l2(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::chamfer_l2(&points_from_rows(&pred).py()?, &points_from_rows(&gt).py()?).py()
}

/// `(precision, recall, f)` at the given distance threshold.
#[pyfunction]
#[pyo3(signature = (pred, gt, threshold = losses::FSCORE_THRESHOLD))]
fn fscore(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>, threshold: f64) -> PyResult<(f64, f64, f64)> {
    let s = losses::fscore(&points_from_rows(&pred).py()?, &points_from_rows(&gt).py()?, threshold).py()?;
    Ok((s.precision, s.recall, s.f))
}

/// One synthetic shape (sphere, cube, torus, cylinder, cone, plane), unit-normalised.
#[pyfunction]
#[pyo3(signature = (kind, n = 512, noise_sigma = 0.01, seed = 0))]
fn generate_shape(kind: &str, n: usize, noise_sigma: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec = ShapeSpec {
        kind: kind.parse().py()?,
        n,
        noise_sigma,
    };
    let c = data::generate_shape(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).py()?;
    Ok(rows_from_points(c.points()))
}

/// Finite-difference check of the task losses on a toy model; maps case name to max relative error.
#[pyfunction]
#[pyo3(signature = (tol = 1e-4, seed = 0))]
fn gradcheck(tol: f64, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let opts = GradCheckOptions {
        tol,
        seed,
        ..GradCheckOptions::default()
    };
    let cases = harness::toy_gradient_suite(&opts).py()?;
    Ok(cases
        .into_iter()
        .map(|c| (c.name.to_string(), c.report.max_rel_error, c.report.passed()))
        .collect())
}

/// Training configuration in `key = value` form.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => TrainConfig::from_text(t).py()?,
            None => TrainConfig::desk(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: TrainConfig::desk(),
        }
    }

    #[staticmethod]
    fn paper() -> Self {
        Self {
            inner: TrainConfig::paper(),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(seed={}, steps={}, tasks={})",
            self.inner.seed, self.inner.steps, self.inner.tasks
        )
    }
}

/// Labelled synthetic clouds with train/val/test splits.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

fn parse_split(s: &str) -> PyResult<Split> {
    s.parse().py()
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (per_class = 10, n_points = 512, noise_sigma = 0.01, seed = 0))]
    fn new(per_class: usize, n_points: usize, noise_sigma: f64, seed: u64) -> PyResult<Self> {
        let cfg = DataConfig {
            per_class,
            n_points,
            noise_sigma,
            seed,
            ..DataConfig::default()
        };
        Ok(Self {
            inner: data::build_dataset(&cfg).py()?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::Dataset::import(&dir).py()?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.export(&dir).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Sample indices of a split ("train", "val" or "test").
    fn indices(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.split(parse_split(split)?).to_vec())
    }

    /// `(points, class_id)` of one sample.
    fn sample(&self, index: usize) -> PyResult<(Vec<Vec<f64>>, usize)> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sample {index} out of range")))?;
        Ok((rows_from_points(s.cloud.points()), s.class_id))
    }
}

/// Pre-training state: model, optimizer, momentum encoder and queue.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: harness::Trainer,
    data: data::Dataset,
}

impl PyTrainer {
    fn probe_opts(&self) -> ProbeOptions {
        let c = &self.inner.cfg;
        ProbeOptions {
            epochs: c.probe_epochs,
            lr: c.probe_lr,
            l2: c.probe_l2,
        }
    }
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: PyTrainConfig, data: PyDataset) -> PyResult<Self> {
        config.inner.validate().py()?;
        let inner = harness::Trainer::new(config.inner, data.inner.train.len()).py()?;
        Ok(Self { inner, data: data.inner })
    }

    /// Restores a checkpoint; `data` supplies the training clouds for further steps.
    #[staticmethod]
    fn load(path: PathBuf, data: PyDataset) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).py()?,
            data: data.inner,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).py()
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.inner.step
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.inner.total_steps
    }

    /// One optimizer step; returns the loss record.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let log = self.inner.train_step(&self.data).py()?;
        step_dict(py, &log)
    }

    /// Trains until `until` steps (default: the configured total) and returns every record.
    #[pyo3(signature = (until = None))]
    fn run<'py>(&mut self, py: Python<'py>, until: Option<usize>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let until = until.unwrap_or(self.inner.total_steps);
        let mut logs = Vec::new();
        self.inner.run(&self.data, until, |l| logs.push(*l)).py()?;
        logs.iter().map(|l| step_dict(py, l)).collect()
    }

    /// Global feature (class token and max-pooled tokens) of each cloud.
    fn embed(&self, clouds: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let clouds = clouds.iter().map(|c| cloud(c)).collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        harness::global_features(&self.inner.model, &self.inner.store, &refs).py()
    }

    fn linear_probe(&self, eval: PyDataset) -> PyResult<f64> {
        harness::linear_probe(&self.inner.model, &self.inner.store, &eval.inner, &self.probe_opts()).py()
    }

    /// `(mean, std)` episodic few-shot accuracy.
    #[pyo3(signature = (eval, way = 5, shot = 10, queries = 20, episodes = 10, seed = 0))]
    fn few_shot(&self, eval: PyDataset, way: usize, shot: usize, queries: usize, episodes: usize, seed: u64) -> PyResult<(f64, f64)> {
        let spec = FewShotSpec {
            way,
            shot,
            queries,
            episodes,
            seed,
        };
        let r = harness::few_shot_eval(&self.inner.model, &self.inner.store, &eval.inner, &spec, &self.probe_opts()).py()?;
        Ok((r.mean, r.std))
    }

    /// Reconstruction table on the test split, as printed by `mmpt recon-eval`.
    #[pyo3(signature = (eval, seed = 0))]
    fn recon_eval(&self, eval: PyDataset, seed: u64) -> PyResult<String> {
        Ok(harness::recon_eval(&self.inner.model, &self.inner.store, &eval.inner, seed)
            .py()?
            .to_text())
    }
}

#[pymodule(name = "mmpt")]
fn mmpt_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(farthest_point_sample, m)?)?;
    m.add_function(wrap_pyfunction!(knn_group, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_unit_sphere, m)?)?;
    m.add_function(wrap_pyfunction!(mask_count, m)?)?;
    m.add_function(wrap_pyfunction!(random_mask, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_l1, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_l2, m)?)?;
    m.add_function(wrap_pyfunction!(fscore, m)?)?;
    m.add_function(wrap_pyfunction!(generate_shape, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    Ok(())
}
