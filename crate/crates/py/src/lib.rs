//! Python bindings. Tensors cross the boundary as `(shape, flat list)` pairs.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use matten::analysis::{self, model_cost, VideoShape};
use matten::blocks::ModelConfig;
use matten::harness::gradcheck::{run_suite, Suite};
use matten::harness::{gen_sprites, inter_frame_difference, Precision, SpriteDatasetSpec, StepLosses, TrainConfig, Trainer};
use matten::ssm::{discretize_zoh, scan_parallel, scan_sequential, zoh_scalar, ScanMode};
use matten::tensor::Tensor;

type Flat = (Vec<usize>, Vec<f64>);

fn err(e: matten::Error) -> PyErr {
    match e {
        matten::Error::Config(_) | matten::Error::Shape(_) | matten::Error::Param(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> PyResult<Tensor<f64>> {
    Tensor::new(shape, data).map_err(err)
}

fn flat<T: matten::tensor::Real>(t: &Tensor<T>) -> Flat {
    (t.shape().to_vec(), t.data().iter().map(|v| v.f64()).collect())
}

/// Scalar zero-order hold: returns `(a_bar, b_bar)`.
#[pyfunction]
fn zoh(delta: f64, a: f64, b: f64) -> PyResult<(f64, f64)> {
    zoh_scalar(delta, a, b).map_err(err)
}

/// Discretizes and scans one sequence.
///
/// `a: [Din, N]`, `b, c: [J, N]`, `delta, x: [J, Din]`, `d: [Din]`; returns `y: [J, Din]`.
#[pyfunction]
#[pyo3(signature = (a, b, c, d, delta, x, mode = "par"))]
#[allow(clippy::too_many_arguments)]
fn selective_scan(a: Flat, b: Flat, c: Flat, d: Flat, delta: Flat, x: Flat, mode: &str) -> PyResult<Flat> {
    let mode: ScanMode = mode.parse().map_err(err)?;
    let a = tensor(&a.0, a.1)?;
    let b = tensor(&b.0, b.1)?;
    let c = tensor(&c.0, c.1)?;
    let d = tensor(&d.0, d.1)?;
    let delta = tensor(&delta.0, delta.1)?;
    let x = tensor(&x.0, x.1)?;
    let disc = discretize_zoh(&a, &b, &delta).map_err(err)?;
    let y = match mode {
        ScanMode::Sequential => scan_sequential(&disc, &c, &d, &x),
        ScanMode::Parallel => scan_parallel(&disc, &c, &d, &x),
    }
    .map_err(err)?;
    Ok(flat(&y))
}

#[pyfunction]
fn flops_sa(j: u64, d: u64) -> u64 {
    analysis::flops_sa(j, d)
}

#[pyfunction]
fn flops_ffn(j: u64, d: u64) -> u64 {
    analysis::flops_ffn(j, d)
}

#[pyfunction]
fn flops_ssm(j: u64, d: u64, n: u64) -> u64 {
    analysis::flops_ssm(j, d, n)
}

#[pyfunction]
fn crossover_length(n: u64) -> u64 {
    analysis::crossover_length(n)
}

/// Procedural bouncing-sprite videos `[N, F, H, W, C]` and their labels.
#[pyfunction]
#[pyo3(signature = (frames, height, width, count, seed = 0, classes = None))]
fn sprites(frames: usize, height: usize, width: usize, count: usize, seed: u64, classes: Option<usize>) -> PyResult<(Flat, Option<Vec<usize>>)> {
    let mut spec = SpriteDatasetSpec::new(frames, height, width, count, seed);
    spec.classes = classes;
    let ds = gen_sprites::<f64>(&spec).map_err(err)?;
    Ok((flat(&ds.videos), ds.labels))
}

/// Mean absolute difference between consecutive frames of `[N, F, ...]` videos.
#[pyfunction]
fn motion(videos: Flat) -> PyResult<f64> {
    inter_frame_difference(&tensor(&videos.0, videos.1)?).map_err(err)
}

/// Runs a finite-difference suite (`"small"` or `"full"`); returns `{name: max_rel_err}`.
#[pyfunction]
#[pyo3(signature = (suite = "small"))]
fn gradcheck<'py>(py: Python<'py>, suite: &str) -> PyResult<Bound<'py, PyDict>> {
    let suite: Suite = suite.parse().map_err(err)?;
    let cases = py.allow_threads(|| run_suite(suite)).map_err(err)?;
    let out = PyDict::new(py);
    for c in cases {
        out.set_item(c.name, c.report.max_rel_err)?;
    }
    Ok(out)
}

/// Model hyperparameters.
#[pyclass(name = "ModelConfig")]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (variant, layers, hidden))]
    fn new(variant: u8, layers: usize, hidden: usize) -> PyResult<Self> {
        let inner = ModelConfig::new(variant, layers, hidden);
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Named size `S`, `B`, `L` or `XL`.
    #[staticmethod]
    #[pyo3(signature = (name, variant = 3))]
    fn preset(name: &str, variant: u8) -> PyResult<Self> {
        Ok(Self {
            inner: ModelConfig::preset(name, variant).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ModelConfig::from_json(s).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn param_count(&self) -> PyResult<u64> {
        analysis::param_count(&self.inner).map_err(err)
    }

    /// Per-sublayer cost rows for a latent video shape `"FxHxWxC"`.
    fn cost<'py>(&self, py: Python<'py>, shape: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let shape: VideoShape = shape.parse().map_err(err)?;
        let cost = model_cost(&self.inner, shape).map_err(err)?;
        cost.entries
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("name", &e.name)?;
                d.set_item("params", e.params)?;
                d.set_item("matmul", e.matmul)?;
                d.set_item("attention", e.attention)?;
                d.set_item("scan", e.scan)?;
                d.set_item("conv", e.conv)?;
                d.set_item("flops", e.flops())?;
                Ok(d)
            })
            .collect()
    }

    /// Total forward GFLOPs for a latent video shape `"FxHxWxC"`.
    fn gflops(&self, shape: &str) -> PyResult<f64> {
        let shape: VideoShape = shape.parse().map_err(err)?;
        Ok(model_cost(&self.inner, shape).map_err(err)?.gflops())
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(variant={}, layers={}, hidden={})",
            self.inner.variant, self.inner.layers, self.inner.hidden
        )
    }
}

enum AnyTrainer {
    F32(Box<Trainer<f32>>),
    F64(Box<Trainer<f64>>),
}

/// Diffusion trainer on procedural sprite data.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: AnyTrainer,
}

fn losses_dict<'py>(py: Python<'py>, l: &StepLosses) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", l.step)?;
    d.set_item("loss_simple", l.simple)?;
    d.set_item("loss_vlb", l.vlb)?;
    d.set_item("total", l.total)?;
    Ok(d)
}

#[pymethods]
impl PyTrainer {
    /// Builds a trainer from a training-config JSON document.
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg = TrainConfig::from_json(config_json).map_err(err)?;
        let inner = match cfg.precision {
            Precision::F32 => AnyTrainer::F32(Box::new(Trainer::new(cfg).map_err(err)?)),
            Precision::F64 => AnyTrainer::F64(Box::new(Trainer::new(cfg).map_err(err)?)),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let inner = match matten::harness::train::checkpoint_precision(dir.as_ref()).map_err(err)? {
            Precision::F32 => AnyTrainer::F32(Box::new(Trainer::load(dir).map_err(err)?)),
            Precision::F64 => AnyTrainer::F64(Box::new(Trainer::load(dir).map_err(err)?)),
        };
        Ok(Self { inner })
    }

    #[getter]
    fn step(&self) -> u64 {
        match &self.inner {
            AnyTrainer::F32(t) => t.step,
            AnyTrainer::F64(t) => t.step,
        }
    }

    /// One optimizer step; returns the step's losses.
    fn train_step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let l = match &mut self.inner {
            AnyTrainer::F32(t) => t.train_step(None),
            AnyTrainer::F64(t) => t.train_step(None),
        }
        .map_err(err)?;
        losses_dict(py, &l)
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        match &self.inner {
            AnyTrainer::F32(t) => t.save(dir),
            AnyTrainer::F64(t) => t.save(dir),
        }
        .map_err(err)
    }

    /// Samples `count` videos from the EMA weights; returns `(shape, flat)`.
    #[pyo3(signature = (count, seed = 0, labels = None))]
    fn sample(&self, count: usize, seed: u64, labels: Option<Vec<usize>>) -> PyResult<Flat> {
        let videos = match &self.inner {
            AnyTrainer::F32(t) => t.sample(count, seed, labels).map_err(err)?.videos.map(|v| flat(&v)),
            AnyTrainer::F64(t) => t.sample(count, seed, labels).map_err(err)?.videos.map(|v| flat(&v)),
        };
        Ok(videos.unwrap_or((vec![0], Vec::new())))
    }
}

#[pymodule]
fn matten_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(zoh, m)?)?;
    m.add_function(wrap_pyfunction!(selective_scan, m)?)?;
    m.add_function(wrap_pyfunction!(flops_sa, m)?)?;
    m.add_function(wrap_pyfunction!(flops_ffn, m)?)?;
    m.add_function(wrap_pyfunction!(flops_ssm, m)?)?;
    m.add_function(wrap_pyfunction!(crossover_length, m)?)?;
    m.add_function(wrap_pyfunction!(sprites, m)?)?;
    m.add_function(wrap_pyfunction!(motion, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyTrainer>()?;
    Ok(())
}
