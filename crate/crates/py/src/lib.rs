//! Python bindings. Matrices cross the boundary as lists of rows, images as
//! flat lists in `(batch, channel, row, column)` order.

use gcpool::data::{gen_cov_task, Dataset, SyntheticCovTaskSpec};
use gcpool::gradcheck::{run_gradcheck, GradcheckOptions};
use gcpool::net::{Architecture, HeadKind, Network, Shape, Tensor};
use gcpool::optim::{emit_schedule, lr_at, ScheduleSpec};
use gcpool::pooling::{self, FeatureMatrix};
use gcpool::probes::{lipschitz_samples, predictiveness_samples, ProbeDirection, QuadraticOracle, StepGrid};
use gcpool::robustness::flip_probability as fp;
use gcpool::tensor::{sym_eig as eig, Mat, SymMat, EIG_TOL};
use gcpool::train::{evaluate, run_probed_training, ProbeOptions, TrainOptions};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: gcpool::Error) -> PyErr {
    match e {
        gcpool::Error::Io(_) | gcpool::Error::Parse { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Mat::new(r, c, rows.concat()).map_err(py_err)
}

fn to_sym(rows: Vec<Vec<f64>>) -> PyResult<SymMat> {
    SymMat::new(to_mat(rows)?).map_err(py_err)
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn schedule_spec(schedule: &str) -> PyResult<ScheduleSpec> {
    match ScheduleSpec::preset(schedule) {
        Some(s) => Ok(s),
        None => serde_json::from_str(schedule).map_err(|e| {
            PyValueError::new_err(format!(
                "schedule must be a preset ({}) or a JSON spec: {e}",
                ScheduleSpec::PRESETS.join(", ")
            ))
        }),
    }
}

fn head_kind(head: &str) -> PyResult<HeadKind> {
    match head {
        "gap" => Ok(HeadKind::Gap),
        "gcp" => Ok(HeadKind::Gcp),
        other => Err(PyValueError::new_err(format!("head must be 'gap' or 'gcp', got '{other}'"))),
    }
}

/// Eigenvalues (descending) and eigenvectors (as columns) of a symmetric matrix.
#[pyfunction]
fn sym_eig(a: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let e = eig(&to_sym(a)?, EIG_TOL).map_err(py_err)?;
    Ok((e.lambda.clone(), from_mat(&e.u)))
}

/// Sample covariance `XᵀJX` of an `N × D` feature matrix.
#[pyfunction]
fn covariance(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (sigma, _) = pooling::covariance(&FeatureMatrix::new(to_mat(x)?).map_err(py_err)?).map_err(py_err)?;
    Ok(from_mat(sigma.as_mat()))
}

#[pyfunction]
fn matrix_sqrt(sigma: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let sigma = to_sym(sigma)?;
    let e = eig(&sigma, EIG_TOL).map_err(py_err)?;
    let (z, _) = pooling::matrix_sqrt(&sigma, pooling::default_eps_lambda(&e.lambda)).map_err(py_err)?;
    Ok(from_mat(z.as_mat()))
}

/// Square-root normalized covariance of `x`: the pooled vector and `Z`.
#[pyfunction]
fn gcp_forward(x: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let (v, ctx) = pooling::gcp_forward(&FeatureMatrix::new(to_mat(x)?).map_err(py_err)?).map_err(py_err)?;
    Ok((v.0, from_mat(ctx.z.as_mat())))
}

/// `∂L/∂X` given `∂L/∂Z`; `trimmed` selects the simplified gradient.
#[pyfunction]
#[pyo3(signature = (x, dz, trimmed = false))]
fn gcp_backward(x: Vec<Vec<f64>>, dz: Vec<Vec<f64>>, trimmed: bool) -> PyResult<Vec<Vec<f64>>> {
    let (_, ctx) = pooling::gcp_forward(&FeatureMatrix::new(to_mat(x)?).map_err(py_err)?).map_err(py_err)?;
    let dz = to_sym(dz)?;
    let dx = if trimmed { pooling::gcp_backward_trimmed(&ctx, &dz) } else { pooling::gcp_backward(&ctx, &dz) };
    Ok(from_mat(dx.map_err(py_err)?.values()))
}

/// Relative error of every finite-difference case as `(n, d, rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, cases = 20))]
fn gradcheck(seed: u64, cases: usize) -> Vec<(usize, usize, f64, bool)> {
    run_gradcheck(seed, cases, &GradcheckOptions::default()).into_iter().map(|r| (r.n, r.d, r.rel_error, r.passed)).collect()
}

/// `(epoch, lr)` rows for `horizon` epochs of a preset name or JSON spec.
#[pyfunction]
#[pyo3(signature = (schedule, horizon = 100))]
fn schedule(schedule: &str, horizon: u32) -> PyResult<Vec<(u32, f64)>> {
    let csv = emit_schedule(&schedule_spec(schedule)?, horizon).map_err(py_err)?;
    Ok(csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(e, v)| (e.parse().unwrap_or_default(), v.parse().unwrap_or(f64::NAN)))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (schedule, epoch, step = 0))]
fn learning_rate(schedule: &str, epoch: u32, step: u64) -> PyResult<f64> {
    lr_at(&schedule_spec(schedule)?, epoch, step).map_err(py_err)
}

/// Loss and gradient-distance samples of `½‖x‖²` along its gradient.
#[pyfunction]
#[pyo3(signature = (x, a = 0.05, b = 2.0, count = 50))]
fn probe_quadratic(x: Vec<f64>, a: f64, b: f64, count: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let grid = StepGrid::new(a, b, count).map_err(py_err)?;
    let target = QuadraticOracle { x };
    let dl = lipschitz_samples(&target, &grid, ProbeDirection::Ascent).map_err(py_err)?;
    let dg = predictiveness_samples(&target, &grid, ProbeDirection::Ascent).map_err(py_err)?;
    Ok((grid.points(), dl.samples, dg.samples))
}

#[pyfunction]
fn flip_probability(predictions: Vec<usize>) -> PyResult<f64> {
    fp(&predictions).map_err(py_err)
}

#[pyclass(name = "Dataset", module = "gcpool", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Dataset::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(channels, height, width)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.inner.shape();
        (s.c, s.h, s.w)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn images(&self) -> Vec<f64> {
        self.inner.images.data.clone()
    }
}

/// Train and test splits of the synthetic covariance task.
#[pyfunction]
#[pyo3(signature = (seed = 1, classes = 4, channels = 8, height = 6, width = 6, train_per_class = 128, test_per_class = 64))]
fn synthetic_task(
    seed: u64,
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    train_per_class: usize,
    test_per_class: usize,
) -> PyResult<(PyDataset, PyDataset)> {
    let spec = SyntheticCovTaskSpec {
        classes,
        channels,
        height,
        width,
        train_per_class,
        test_per_class,
        ..Default::default()
    };
    let task = gen_cov_task(&spec, seed).map_err(py_err)?;
    Ok((PyDataset { inner: task.train }, PyDataset { inner: task.test }))
}

#[pyclass(name = "Network", module = "gcpool")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    /// `architecture` is `"toy"` (ReLU trunk) or `"linear"`.
    #[new]
    #[pyo3(signature = (shape, classes, head = "gcp", architecture = "toy", reduce_dim = 16, seed = 0))]
    fn new(shape: (usize, usize, usize), classes: usize, head: &str, architecture: &str, reduce_dim: usize, seed: u64) -> PyResult<Self> {
        let arch = match architecture {
            "toy" => Architecture::Toy { reduce_dim },
            "linear" => Architecture::Linear { reduce_dim },
            other => return Err(PyValueError::new_err(format!("unknown architecture '{other}'"))),
        };
        let shape = Shape::new(shape.0, shape.1, shape.2);
        let inner = Network::from_architecture(arch, shape, classes, head_kind(head)?, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Network::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn head(&self) -> String {
        self.inner.head_kind().to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Predicted class of every image in a flat batch.
    fn predict(&self, images: Vec<f64>) -> PyResult<Vec<usize>> {
        let shape = self.inner.input_shape();
        if !images.len().is_multiple_of(shape.len()) {
            return Err(PyValueError::new_err(format!("image data is not a multiple of {shape}")));
        }
        let t = Tensor::new(images.len() / shape.len(), shape, images).map_err(py_err)?;
        self.inner.predict(&t).map_err(py_err)
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        evaluate(&self.inner, &data.inner).map_err(py_err)
    }

    /// Trains in place and returns a dict with `steps`, `epoch_accuracy`,
    /// `convergence_csv` and, when `probe_cadence` is set, `probes_csv`.
    #[pyo3(signature = (
        train, test, epochs = 20, schedule = None, batch_size = 32, momentum = 0.9,
        weight_decay = 1e-4, seed = 0, max_steps = None, probe_cadence = None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train: &PyDataset,
        test: &PyDataset,
        epochs: u32,
        schedule: Option<&str>,
        batch_size: usize,
        momentum: f64,
        weight_decay: f64,
        seed: u64,
        max_steps: Option<u64>,
        probe_cadence: Option<u64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let schedule = match schedule {
            Some(s) => schedule_spec(s)?,
            None => ScheduleSpec::Polynomial { l0: 0.05, e_s: 0, e_f: epochs.max(1), rho: 2.0 },
        };
        let opts = TrainOptions {
            epochs,
            max_steps,
            batch_size,
            schedule,
            momentum,
            weight_decay,
            seed,
            probe: probe_cadence.map(|cadence| ProbeOptions { cadence, ..Default::default() }),
        };
        let net = &mut self.inner;
        let report = py
            .detach(|| run_probed_training(net, &train.inner, &test.inner, &opts))
            .map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("steps", report.steps)?;
        out.set_item("epoch_accuracy", report.epoch_accuracy.clone())?;
        out.set_item("convergence_csv", report.convergence_csv())?;
        if let Some(p) = &report.probes {
            out.set_item("probes_csv", p.to_csv())?;
        }
        Ok(out)
    }
}

#[pymodule]
#[pyo3(name = "gcpool")]
pub fn gcpool_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(sym_eig, m)?)?;
    m.add_function(wrap_pyfunction!(covariance, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_sqrt, m)?)?;
    m.add_function(wrap_pyfunction!(gcp_forward, m)?)?;
    m.add_function(wrap_pyfunction!(gcp_backward, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(probe_quadratic, m)?)?;
    m.add_function(wrap_pyfunction!(flip_probability, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_task, m)?)?;
    Ok(())
}
