//! Python bindings: MNIST loading, models, attribution, occlusion, metrics
//! and the sweep harness.

use std::path::PathBuf;
use std::str::FromStr;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use occbench::attribution::{self, Method, RankOrder};
use occbench::data::{self, DatasetStats, Normalization};
use occbench::model::{self, Architecture, Checkpoint};
use occbench::occlusion::{self, Direction, ReplacementStrategy};
use occbench::sweep::{self, SweepConfig, Task};
use occbench::{metrics, verify, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_input_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// A normalized MNIST split.
#[pyclass(module = "pyoccbench", frozen)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Loads the `train` or `t10k` split from `data_dir`, keeping `digits`.
    #[staticmethod]
    #[pyo3(signature = (data_dir, split, digits = (0..10).collect()))]
    fn load(data_dir: PathBuf, split: &str, digits: Vec<u8>) -> PyResult<Self> {
        let split = match split {
            "train" => data::Split::Train,
            "test" | "t10k" => data::Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
        };
        let raw = data::load_raw(&data_dir, split).map_err(py_err)?;
        let raw = data::filter_digits(&raw, &digits).map_err(py_err)?;
        let inner = data::normalize(&raw, Normalization::default()).map_err(py_err)?;
        Ok(Dataset { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(pixels, label)` for example `i`.
    fn example(&self, i: usize) -> PyResult<(Vec<f32>, u8)> {
        if i >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        let ex = self.inner.example(i);
        Ok((ex.pixels.to_vec(), ex.label))
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.inner.stats.mean
    }
}

/// A classifier with a log-softmax or sigmoid head.
#[pyclass(module = "pyoccbench", frozen)]
struct Model {
    inner: model::GradModel<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (architecture = "cnn-ref", classes = 2, seed = 0))]
    fn new(architecture: &str, classes: usize, seed: u64) -> PyResult<Self> {
        let arch: Architecture = parse(architecture)?;
        let inner = model::build_model(arch, classes, seed).map_err(py_err)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = model::load_checkpoint(&path)
            .and_then(|c| c.to_model())
            .map_err(py_err)?;
        Ok(Model { inner })
    }

    #[pyo3(signature = (path, seed = 0, final_metric = 0.0))]
    fn save(&self, path: PathBuf, seed: u32, final_metric: f64) -> PyResult<()> {
        model::save_checkpoint(
            &path,
            &Checkpoint::from_model(&self.inner, seed, final_metric),
        )
        .map_err(py_err)
    }

    /// Trains a copy of this model and returns it with the per-epoch mean
    /// losses.
    #[pyo3(signature = (dataset, epochs = 3, seed = 0, learning_rate = 0.01))]
    fn train(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        epochs: usize,
        seed: u64,
        learning_rate: f64,
    ) -> PyResult<(Model, Vec<f64>)> {
        let cfg = model::TrainConfig {
            seed,
            epochs,
            learning_rate,
            ..model::TrainConfig::default()
        };
        let start = self.inner.clone();
        let (inner, history) = py
            .detach(|| model::train(start, &dataset.inner, None, &cfg))
            .map_err(py_err)?;
        Ok((
            Model { inner },
            history.epochs.iter().map(|e| e.mean_loss).collect(),
        ))
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Class probabilities, or `[p]` for a sigmoid head.
    fn predict(&self, x: Vec<f32>) -> PyResult<Vec<f64>> {
        Ok(self.inner.predict_score(&x).map_err(py_err)?.probs)
    }

    fn accuracy(&self, py: Python<'_>, dataset: &Dataset) -> PyResult<f64> {
        py.detach(|| model::test_accuracy(&self.inner, &dataset.inner, 256))
            .map_err(py_err)
    }

    /// Gradient of the loss at `x` for `label` with respect to the input.
    fn loss_gradient(&self, x: Vec<f32>, label: usize) -> PyResult<Vec<f32>> {
        attribution::loss_gradient(&self.inner, &x, label).map_err(py_err)
    }
}

/// Attribution scores for `method` from input `x` and loss-gradient `g`.
#[pyfunction]
#[pyo3(signature = (method, x, g, seed = 0))]
fn attribute(method: &str, x: Vec<f64>, g: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
    let method: Method = parse(method)?;
    Ok(attribution::attribute(method, &x, &g, seed)
        .map_err(py_err)?
        .scores)
}

/// Feature indices from highest to lowest ranked under `method`.
#[pyfunction]
#[pyo3(signature = (method, x, g, seed = 0))]
fn rank(method: &str, x: Vec<f64>, g: Vec<f64>, seed: u64) -> PyResult<Vec<u32>> {
    let method: Method = parse(method)?;
    let map = attribution::attribute(method, &x, &g, seed).map_err(py_err)?;
    Ok(attribution::rank(&map).as_slice().to_vec())
}

/// Replaces the `fraction` of features at the `direction` end of `order`.
#[pyfunction]
#[pyo3(signature = (x, order, fraction, direction = "highest", strategy = "dataset_mean", dataset_mean = 0.0))]
fn occlude(
    x: Vec<f64>,
    order: Vec<u32>,
    fraction: f64,
    direction: &str,
    strategy: &str,
    dataset_mean: f64,
) -> PyResult<Vec<f64>> {
    let plan = occlusion::OcclusionPlan {
        amount: occlusion::Amount::Fraction(fraction),
        direction: parse::<Direction>(direction)?,
        strategy: parse::<ReplacementStrategy>(strategy)?,
    };
    let order = RankOrder::from_permutation(order).map_err(py_err)?;
    let stats = DatasetStats {
        mean: dataset_mean,
        per_pixel_mean: vec![dataset_mean; x.len()],
    };
    plan.apply(&x, &order, &stats).map_err(py_err)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(py_err)
}

/// Default sweep configuration for `task` as JSON.
#[pyfunction]
#[pyo3(signature = (task = "mnist-2-logsoftmax"))]
fn default_config(task: &str) -> PyResult<String> {
    let task: Task = parse(task)?;
    serde_json::to_string_pretty(&SweepConfig::for_task(task))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs the sweep described by a JSON config and returns the records and
/// summary as CSV text. Files are exported when `export` is true.
#[pyfunction]
#[pyo3(signature = (config_json, export = false))]
fn run_sweep(py: Python<'_>, config_json: &str, export: bool) -> PyResult<(String, String)> {
    let cfg = SweepConfig::from_json(config_json).map_err(py_err)?;
    let result = py.detach(|| sweep::run_sweep(&cfg)).map_err(py_err)?;
    if export {
        sweep::export_all(&cfg, &result).map_err(py_err)?;
    }
    Ok((
        sweep::records_csv(&result.records),
        sweep::summary_csv(&result.summary),
    ))
}

/// The built-in checks as `(name, passed, detail)` triples.
#[pyfunction]
#[pyo3(signature = (trials = 200, seed = 0))]
fn selftest(py: Python<'_>, trials: usize, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let outcomes = py
        .detach(|| verify::selftest(trials, seed))
        .map_err(py_err)?;
    Ok(outcomes
        .into_iter()
        .map(|o| (o.check, o.passed, o.detail))
        .collect())
}

#[pymodule]
fn pyoccbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(attribute, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(occlude, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
