//! Python bindings: task sampling, the critic, meta-learners, experiment
//! runs and the statistics helpers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use metacritic::harness::{self, gradcheck, ExperimentConfig, Settings};
use metacritic::metalearn::MetaLearner;
use metacritic::networks::checkpoint::Checkpoint;
use metacritic::networks::{self, CriticSpec};
use metacritic::tasks::{self, BlobsSpec, GlyphsSpec, Split};
use metacritic::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Task(_) | Error::Architecture(_) | Error::Unknown { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn split(name: &str) -> PyResult<Split> {
    name.parse().map_err(py_err)
}

/// Settings from a dict of `section.key` to a value rendered with `str()`.
fn settings(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Settings> {
    let mut s = Settings::default();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            let value = match value.as_str() {
                "True" => "true".to_string(),
                "False" => "false".to_string(),
                _ => value,
            };
            s.set(&key, &value).map_err(py_err)?;
        }
    }
    Ok(s)
}

fn to_py_json<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// One few-shot episode. Inputs are flat row-major lists with `sample_shape`
/// giving the per-sample shape.
#[pyclass(module = "metacritic_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Episode {
    inner: tasks::Episode,
}

#[pymethods]
impl Episode {
    #[getter]
    fn task_id(&self) -> String {
        self.inner.task_id.clone()
    }

    #[getter]
    fn way(&self) -> usize {
        self.inner.way
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.inner.support.x.shape()[1..].to_vec()
    }

    #[getter]
    fn support_x(&self) -> Vec<f64> {
        self.inner.support.x.to_vec()
    }

    #[getter]
    fn support_y(&self) -> Vec<usize> {
        self.inner.support.y.clone()
    }

    #[getter]
    fn target_x(&self) -> Vec<f64> {
        self.inner.target.x.to_vec()
    }

    #[getter]
    fn target_y(&self) -> Vec<usize> {
        self.inner.target.y.clone()
    }

    /// Copy with the target labels replaced; inputs are untouched.
    fn with_target_labels(&self, labels: Vec<usize>) -> PyResult<Episode> {
        if labels.len() != self.inner.target.y.len() || labels.iter().any(|&y| y >= self.inner.way) {
            return Err(PyValueError::new_err("labels must match the target set size and lie in 0..way"));
        }
        let mut inner = self.inner.clone();
        inner.target.y = labels;
        Ok(Episode { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Episode({}, {}-way {}-shot, {} target samples)",
            self.inner.task_id,
            self.inner.way,
            self.inner.shot,
            self.inner.target.len()
        )
    }
}

#[pyclass(module = "metacritic_py", frozen)]
struct TaskFamily {
    inner: tasks::TaskFamily,
}

#[pymethods]
impl TaskFamily {
    #[staticmethod]
    #[pyo3(signature = (seed, dim=16, noise=0.5))]
    fn gaussian_blobs(seed: u64, dim: usize, noise: f64) -> PyResult<Self> {
        let spec = BlobsSpec {
            dim,
            noise,
            ..BlobsSpec::default()
        };
        Ok(Self {
            inner: spec.build(seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn pattern_glyphs(seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: GlyphsSpec::default().build(seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tasks::TaskFamily::load_episode_file(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_episode_file(&path).map_err(py_err)
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.inner.sample_shape.clone()
    }

    fn pool_size(&self, split_name: &str) -> PyResult<usize> {
        Ok(self.inner.pool_size(split(split_name)?))
    }

    fn sample_episode(&self, split_name: &str, index: u64, way: usize, shot: usize, query: usize) -> PyResult<Episode> {
        let inner = self
            .inner
            .sample_episode(split(split_name)?, index, way, shot, query)
            .map_err(py_err)?;
        Ok(Episode { inner })
    }
}

/// A critic with freshly initialized weights.
#[pyclass(module = "metacritic_py", frozen)]
struct Critic {
    spec: CriticSpec,
    weights: metacritic::ParamSet,
}

#[pymethods]
impl Critic {
    #[new]
    #[pyo3(signature = (input_len, seed=0, kernels_per_layer=8))]
    fn new(input_len: usize, seed: u64, kernels_per_layer: usize) -> PyResult<Self> {
        let spec = CriticSpec::with_width(input_len, kernels_per_layer);
        let weights = spec.init_params(seed).map_err(py_err)?;
        Ok(Self { spec, weights })
    }

    #[getter]
    fn fc_in_dim(&self) -> usize {
        self.spec.fc_in_dim()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    fn conv_out_lens(&self) -> PyResult<Vec<usize>> {
        Ok(self.spec.shapes().map_err(py_err)?.conv_out_lens)
    }

    fn __call__(&self, features: Vec<f64>) -> PyResult<f64> {
        let f = Tensor::constant(&[1, features.len()], features).map_err(|e| py_err(e.into()))?;
        let c = networks::critic_forward(&self.spec, &self.weights, &f).map_err(py_err)?;
        c.item().map_err(|e| py_err(e.into()))
    }

    fn input_gradient_norm(&self, features: Vec<f64>) -> PyResult<f64> {
        let f = Tensor::constant(&[1, features.len()], features).map_err(|e| py_err(e.into()))?;
        networks::critic_input_gradient_norm(&self.spec, &self.weights, &f).map_err(py_err)
    }
}

/// A resolved experiment configuration.
#[pyclass(module = "metacritic_py", frozen)]
struct Experiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (overrides=None))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = ExperimentConfig::resolve(settings(overrides)?).map_err(py_err)?;
        Ok(Self { cfg })
    }

    fn settings(&self) -> BTreeMap<String, String> {
        self.cfg
            .settings
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn family(&self) -> PyResult<TaskFamily> {
        Ok(TaskFamily {
            inner: self.cfg.build_family().map_err(py_err)?,
        })
    }

    /// A fresh learner for `seed`, shaped for this experiment's episodes.
    fn learner(&self, seed: u64) -> PyResult<Learner> {
        let family = self.cfg.build_family().map_err(py_err)?;
        let arch = self.cfg.build_arch(&family.sample_shape).map_err(py_err)?;
        let inner = MetaLearner::new(
            arch,
            self.cfg.meta.clone(),
            self.cfg.init,
            self.cfg.way * self.cfg.query,
            seed,
        )
        .map_err(py_err)?;
        Ok(Learner { inner })
    }

    /// Train and test every seed; returns the result record as a dict.
    fn run(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let cfg = self.cfg.clone();
        let result = py.detach(move || harness::run_experiment(&cfg)).map_err(py_err)?;
        to_py_json(py, &result)
    }
}

#[pyclass(module = "metacritic_py")]
struct Learner {
    inner: MetaLearner,
}

#[pymethods]
impl Learner {
    #[getter]
    fn num_params(&self) -> usize {
        self.inner.theta.numel()
    }

    #[getter]
    fn critic_params(&self) -> usize {
        self.inner.critic.numel()
    }

    fn adapted_names(&self) -> Vec<String> {
        self.inner.theta.adapted_names()
    }

    fn theta(&self) -> Vec<f64> {
        self.inner.theta.flat_values()
    }

    /// One outer update; returns the step metrics as a dict.
    fn meta_step(&mut self, py: Python<'_>, episodes: Vec<PyRef<'_, Episode>>, epoch: usize) -> PyResult<Py<PyAny>> {
        let batch: Vec<tasks::Episode> = episodes.iter().map(|e| e.inner.clone()).collect();
        let m = self.inner.meta_step(&batch, epoch).map_err(py_err)?;
        to_py_json(py, &m)
    }

    fn evaluate(&self, py: Python<'_>, episode: &Episode) -> PyResult<Py<PyAny>> {
        let out = self.inner.evaluate(&episode.inner).map_err(py_err)?;
        to_py_json(py, &out)
    }

    /// Final fast weights after adapting to `episode` (flat, parameter order).
    fn adapted_weights(&self, episode: &Episode) -> PyResult<Vec<f64>> {
        let l = &self.inner;
        let traj = l
            .adapt(&l.theta.to_vars(), &l.lslr.detached(), &l.critic.detached(), &episode.inner, false, false)
            .map_err(py_err)?;
        Ok(traj.last().flat_values())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint(BTreeMap::new()).save(&path).map_err(py_err)
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        self.inner.load_checkpoint(&ck).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (params, bytes_per_value=4))]
fn estimate_critic_memory(params: u64, bytes_per_value: u64) -> PyResult<u128> {
    networks::estimate_critic_memory(params, bytes_per_value).map_err(py_err)
}

#[pyfunction]
fn pad_for_layer(layer: usize) -> PyResult<(usize, usize)> {
    networks::pad_for_layer(layer).map_err(py_err)
}

#[pyfunction]
fn ci95(values: Vec<f64>) -> PyResult<f64> {
    harness::ci95(&values).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (mean, ci=None))]
fn format_cell(mean: f64, ci: Option<f64>) -> String {
    harness::format_cell(mean, ci)
}

/// Finite-difference checks of every primitive and the critic-driven outer loss.
#[pyfunction]
fn gradcheck_suite(py: Python<'_>) -> PyResult<Py<PyAny>> {
    let entries = py.detach(gradcheck::full_suite).map_err(py_err)?;
    to_py_json(py, &entries)
}

#[pymodule]
fn metacritic_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Episode>()?;
    m.add_class::<TaskFamily>()?;
    m.add_class::<Critic>()?;
    m.add_class::<Experiment>()?;
    m.add_class::<Learner>()?;
    m.add_function(wrap_pyfunction!(estimate_critic_memory, m)?)?;
    m.add_function(wrap_pyfunction!(pad_for_layer, m)?)?;
    m.add_function(wrap_pyfunction!(ci95, m)?)?;
    m.add_function(wrap_pyfunction!(format_cell, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_suite, m)?)?;
    Ok(())
}
