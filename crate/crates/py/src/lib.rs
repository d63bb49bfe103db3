//! Python bindings: configuration, the toy world, datasets, training stages,
//! checkpoints and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use wog::checkpoint::Checkpoint;
use wog::config::RunConfig;
use wog::eval::{self, EvalReport, ExpertController, PolicyHandle, Setup};
use wog::sim::{self, SourceTag, Task, TaskParams, WorldState};
use wog::tensor::{run_op_suite, Tensor};
use wog::training::{self, Dataset, StageConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(err)
}

#[pyclass(name = "RunConfig", module = "wog", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_toml(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Dotted override such as `model.dim` = `"32"`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(err)?;
        next.validate().map_err(err)?;
        self.inner = next;
        Ok(())
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn exec_horizon(&self) -> usize {
        self.inner.exec_horizon
    }
}

#[pyclass(name = "World", module = "wog")]
struct PyWorld {
    state: WorldState,
    render: sim::RenderConfig,
}

#[pymethods]
impl PyWorld {
    #[new]
    #[pyo3(signature = (task, seed, obstacles = 1))]
    fn new(task: &str, seed: u64, obstacles: usize) -> PyResult<Self> {
        let params = TaskParams {
            obstacles,
            ..TaskParams::default()
        };
        Ok(Self {
            state: sim::reset(parse(task)?, seed, &params).map_err(err)?,
            render: sim::RenderConfig::default(),
        })
    }

    /// Applies `[dx, dy, grip]` and returns whether the task is now solved.
    fn step(&mut self, action: [f64; 3]) -> PyResult<bool> {
        self.state = sim::step(&self.state, action).map_err(err)?;
        Ok(sim::success(&self.state))
    }

    fn success(&self) -> bool {
        sim::success(&self.state)
    }

    fn expert_action(&self) -> [f64; 3] {
        sim::expert_action(&self.state)
    }

    fn instruction(&self) -> Vec<u32> {
        sim::instruction(&self.state)
    }

    /// Row-major `height x width x 3` floats in `[0, 1]`.
    fn render(&self) -> PyResult<(usize, usize, Vec<f64>)> {
        let img = sim::render(&self.state, &self.render).map_err(err)?;
        Ok((self.render.height, self.render.width, img.to_f64()))
    }

    fn state_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.state).map_err(err)
    }

    #[getter]
    fn steps(&self) -> u32 {
        self.state.step_count
    }
}

#[pyclass(name = "Dataset", module = "wog")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Expert episodes; `source` is `robot`, `human_video` or `umi`.
    #[staticmethod]
    #[pyo3(signature = (task, n, seed, source = "robot", label_fraction = 1.0))]
    fn generate(task: &str, n: usize, seed: u64, source: &str, label_fraction: f64) -> PyResult<Self> {
        let source: SourceTag = parse(source)?;
        let eps = sim::generate_demos(parse(task)?, n, seed, &sim::RenderConfig::default(), source, label_fraction)
            .map_err(err)?;
        Ok(Self {
            inner: Dataset::new(eps),
        })
    }

    fn extend(&mut self, other: &PyDataset) {
        self.inner.episodes.extend(other.inner.episodes.iter().cloned());
    }

    fn __len__(&self) -> usize {
        self.inner.episodes.len()
    }

    fn labeled(&self) -> usize {
        self.inner.labeled().count()
    }
}

#[pyclass(name = "Checkpoint", module = "wog", skip_from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(buf: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::from_bytes(buf).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_bytes().map_err(err)?))
    }

    #[getter]
    fn stage(&self) -> &'static str {
        self.inner.stage.as_str()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn encoder_checksum(&self) -> Option<String> {
        self.inner.encoder_checksum.clone()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(_, p)| p.name.clone()).collect()
    }

    /// `(shape, flat data, frozen)` of one parameter.
    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>, bool)> {
        let p = self.inner.params.by_name(name).map_err(err)?;
        Ok((p.tensor.shape().to_vec(), p.tensor.data().to_vec(), p.frozen))
    }
}

fn stage_cfg(base: &StageConfig, seed: u64, steps: Option<usize>) -> StageConfig {
    StageConfig {
        seed,
        steps: steps.unwrap_or(base.steps),
        ..base.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (data, config, seed = 0, steps = None))]
fn train_stage1(data: &PyDataset, config: &PyRunConfig, seed: u64, steps: Option<usize>) -> PyResult<PyCheckpoint> {
    let c = &config.inner;
    let out = training::train_stage1(&data.inner, &c.mix, &c.model, &c.vision_config(), &stage_cfg(&c.stage1, seed, steps))
        .map_err(err)?;
    Ok(PyCheckpoint { inner: out.checkpoint })
}

/// Stage II from a stage-I checkpoint. `cotrain=False` gives the flow-only
/// ablation.
#[pyfunction]
#[pyo3(signature = (data, config, init, steps = None, cotrain = true))]
fn train_stage2(
    data: &PyDataset,
    config: &PyRunConfig,
    init: &PyCheckpoint,
    steps: Option<usize>,
    cotrain: bool,
) -> PyResult<PyCheckpoint> {
    let c = &config.inner;
    let cfg = stage_cfg(&c.stage2, init.inner.seed, steps);
    let out = if cotrain {
        training::train_stage2(&data.inner, &c.mix, &cfg, &init.inner)
    } else {
        training::train_stage2_wo_cotrain(&data.inner, &c.mix, &cfg, &init.inner)
    }
    .map_err(err)?;
    Ok(PyCheckpoint { inner: out.checkpoint })
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Vec<Bound<'py, PyDict>>> {
    r.cells
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("task", c.task.as_str())?;
            d.set_item("setup", c.setup.as_str())?;
            d.set_item("trials", c.trials)?;
            d.set_item("successes", c.successes)?;
            d.set_item("success_rate", c.success_rate)?;
            d.set_item("mean_episode_length", c.mean_episode_length)?;
            Ok(d)
        })
        .collect()
}

fn cells(tasks: Vec<String>, setups: Vec<String>) -> PyResult<Vec<eval::SuiteCell>> {
    let tasks: Vec<Task> = tasks.iter().map(|t| parse(t)).collect::<PyResult<_>>()?;
    let setups: Vec<Setup> = setups.iter().map(|s| parse(s)).collect::<PyResult<_>>()?;
    Ok(eval::suite(&tasks, &setups))
}

fn options(n_trials: usize, seed: u64) -> eval::EvalOptions {
    eval::EvalOptions {
        n_trials,
        seed,
        ..eval::EvalOptions::default()
    }
}

/// Closed-loop success of a stage-II or finetuned checkpoint, one dict per cell.
#[pyfunction]
#[pyo3(signature = (checkpoint, tasks, setups, n_trials = 50, seed = 0))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: &PyCheckpoint,
    tasks: Vec<String>,
    setups: Vec<String>,
    n_trials: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let handle = PolicyHandle::from_checkpoint(&checkpoint.inner).map_err(err)?;
    let r = eval::evaluate(&handle, &cells(tasks, setups)?, &options(n_trials, seed)).map_err(err)?;
    report_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (tasks, setups, n_trials = 50, seed = 0))]
fn evaluate_expert<'py>(
    py: Python<'py>,
    tasks: Vec<String>,
    setups: Vec<String>,
    n_trials: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let r = eval::evaluate(&ExpertController::default(), &cells(tasks, setups)?, &options(n_trials, seed)).map_err(err)?;
    report_dict(py, &r)
}

/// Mean token cosine between predicted and encoder conditions.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, samples = 256, seed = 0))]
fn condition_probe(checkpoint: &PyCheckpoint, data: &PyDataset, samples: usize, seed: u64) -> PyResult<f64> {
    Ok(eval::condition_probe(&checkpoint.inner, &data.inner, samples, seed)
        .map_err(err)?
        .mean_token_cosine)
}

/// Worst relative finite-difference error of every registered op.
#[pyfunction]
#[pyo3(signature = (trials = 3, seed = 0))]
fn gradcheck<'py>(py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for r in run_op_suite(trials, seed, 1e-5).map_err(err)? {
        d.set_item(r.name, r.max_rel_error)?;
    }
    Ok(d)
}

/// `(a_tau, v_star)` for chunk `a1`, noise `a0` (both `T x A`) and `tau`.
#[pyfunction]
fn flow_target(a1: Vec<Vec<f64>>, a0: Vec<Vec<f64>>, tau: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let to_t = |rows: Vec<Vec<f64>>| -> PyResult<Tensor> {
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        Tensor::new([n, cols], rows.into_iter().flatten().collect()).map_err(err)
    };
    let ft = training::flow_target_from(&to_t(a1)?, &to_t(a0)?, tau).map_err(err)?;
    Ok((ft.a_tau.into_data(), ft.v_star.into_data()))
}

#[pymodule]
#[pyo3(name = "wog")]
fn wog_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train_stage1, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage2, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_expert, m)?)?;
    m.add_function(wrap_pyfunction!(condition_probe, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(flow_target, m)?)?;
    Ok(())
}
