//! Python bindings for the grid environments, exploration, robustification
//! and policy-based exploration.

use std::path::PathBuf;

use goexplore_core::archive::Archive;
use goexplore_core::cellmap::CellMapper;
use goexplore_core::cli;
use goexplore_core::env::{make_env, make_sticky_env, EnvConfig, Environment, GridWorld, StickyEnv};
use goexplore_core::explorer::{im_baseline, run_exploration_phase, ExploreConfig, ImConfig};
use goexplore_core::learner::PolicyModel;
use goexplore_core::policyge::{run_policy_ge, PolicyGeConfig};
use goexplore_core::robustify::{extract_demo, run_backward, BackwardConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

#[pyclass(name = "EnvConfig", module = "goexplore", skip_from_py_object)]
#[derive(Clone)]
struct PyEnvConfig {
    inner: EnvConfig,
}

#[pymethods]
impl PyEnvConfig {
    #[staticmethod]
    #[pyo3(signature = (width, height, seed = 0))]
    fn deceptive_maze(width: usize, height: usize, seed: u64) -> PyResult<Self> {
        Self::checked(EnvConfig::deceptive_maze(width, height, seed))
    }

    #[staticmethod]
    #[pyo3(signature = (width, height, n_rooms = 2, seed = 0))]
    fn key_door_world(width: usize, height: usize, n_rooms: usize, seed: u64) -> PyResult<Self> {
        Self::checked(EnvConfig::key_door_world(width, height, n_rooms, seed))
    }

    #[staticmethod]
    #[pyo3(signature = (width, height, seed = 0))]
    fn pixel_maze(width: usize, height: usize, seed: u64) -> PyResult<Self> {
        Self::checked(EnvConfig::pixel_maze(width, height, seed))
    }

    #[staticmethod]
    fn open_grid(width: usize, height: usize) -> PyResult<Self> {
        Self::checked(EnvConfig::open_grid(width, height))
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.to_string()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn max_episode_steps(&self) -> u32 {
        self.inner.max_episode_steps
    }

    #[setter]
    fn set_max_episode_steps(&mut self, v: u32) {
        self.inner.max_episode_steps = v;
    }

    fn digest(&self) -> String {
        format!("{:016x}", self.inner.digest())
    }

    fn __repr__(&self) -> String {
        format!("EnvConfig({} {}x{}, rooms={}, seed={})", self.inner.name, self.inner.width, self.inner.height, self.inner.n_rooms, self.inner.seed)
    }
}

impl PyEnvConfig {
    fn checked(inner: EnvConfig) -> PyResult<Self> {
        inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }
}

/// A grid world with optional sticky actions.
#[pyclass(name = "Env", module = "goexplore")]
struct PyEnv {
    inner: StickyEnv<GridWorld>,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (config, stickiness = 0.0, seed = 0))]
    fn new(config: &PyEnvConfig, stickiness: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: make_sticky_env(&config.inner, stickiness, seed).map_err(err)? })
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn max_score(&self) -> f64 {
        self.inner.inner().max_score()
    }

    /// Returns the feature vector after reset.
    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset().features
    }

    /// Returns (features, reward, done).
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool)> {
        let r = self.inner.step(action).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok((r.observation.features, r.reward, r.done))
    }

    /// Domain cell of the current state as (room, x, y, keys, level).
    fn cell(&self) -> (u32, u32, u32, Vec<u32>, u32) {
        let d = self.inner.observe().domain;
        (d.room, d.x, d.y, d.keys, d.level)
    }

    fn snapshot(&self) -> Vec<u8> {
        self.inner.snapshot().bytes
    }

    fn is_done(&self) -> bool {
        self.inner.is_done()
    }
}

#[pyclass(name = "Archive", module = "goexplore")]
struct PyArchive {
    inner: Archive,
    env_digest: u64,
}

#[pymethods]
impl PyArchive {
    #[staticmethod]
    fn load(path: PathBuf, config: &PyEnvConfig) -> PyResult<Self> {
        let digest = config.inner.digest();
        Ok(Self { inner: cli::load_archive(&path, digest).map_err(err)?, env_digest: digest })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut buf = Vec::new();
        self.inner.write_to(&mut buf, self.env_digest).map_err(err)?;
        std::fs::write(path, buf).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.cell_count()
    }

    fn best_score(&self) -> Option<f64> {
        self.inner.best_end_of_episode_score()
    }

    /// (key, score, length, c_seen, c_steps) for every real cell.
    fn cells(&self) -> Vec<(String, f64, u32, u64, u64)> {
        self.inner.cells().map(|r| (r.key.encode(), r.score, r.length, r.c_seen, r.c_steps)).collect()
    }

    /// Action sequence stored for a cell key as returned by `cells`.
    fn trajectory(&self, key: &str) -> PyResult<Vec<u8>> {
        let k = goexplore_core::cellmap::CellKey::decode(key).ok_or_else(|| PyValueError::new_err(format!("bad cell key `{key}`")))?;
        self.inner.get(&k).map(|r| r.trajectory.clone()).ok_or_else(|| PyValueError::new_err(format!("no cell `{key}`")))
    }
}

#[pyclass(name = "PolicyModel", module = "goexplore")]
struct PyPolicyModel {
    inner: PolicyModel,
}

#[pymethods]
impl PyPolicyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: cli::load_model(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut buf = Vec::new();
        self.inner.write_to(&mut buf).map_err(err)?;
        std::fs::write(path, buf).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.len()
    }

    /// (logits, value) for a feature vector and optional goal encoding.
    #[pyo3(signature = (features, goal = None))]
    fn forward(&self, features: Vec<f64>, goal: Option<Vec<f64>>) -> PyResult<(Vec<f64>, f64)> {
        let out = self.inner.forward(&features, goal.as_deref()).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok((out.logits, out.value))
    }

    /// Mean score, standard error and success rate (reaching the env's
    /// maximum score) from reset.
    #[pyo3(signature = (config, episodes = 100, stickiness = 0.25, seed = 0, greedy = false))]
    fn evaluate(&self, py: Python<'_>, config: &PyEnvConfig, episodes: usize, stickiness: f64, seed: u64, greedy: bool) -> PyResult<(f64, f64, f64)> {
        let cfg = config.inner.clone();
        let r = py.detach(|| cli::evaluate(&self.inner, &cfg, episodes, stickiness, seed, greedy)).map_err(err)?;
        Ok((r.mean, r.std_error, r.success_rate))
    }
}

/// Restore-based exploration with domain cells. Returns the archive and the
/// discovery log as (frames, cells, best_score) rows.
#[pyfunction]
#[pyo3(signature = (config, frame_budget, seed = 0, explore_steps = 100))]
fn explore(py: Python<'_>, config: &PyEnvConfig, frame_budget: u64, seed: u64, explore_steps: usize) -> PyResult<(PyArchive, Vec<(u64, usize, Option<f64>)>)> {
    let cfg = config.inner.clone();
    let mut ec = ExploreConfig::new(frame_budget, seed);
    ec.explore_steps = explore_steps;
    let res = py.detach(|| run_exploration_phase(|| make_env(&cfg), CellMapper::domain(1, 1), ec)).map_err(err)?;
    let log = res.discovery_log.iter().map(|r| (r.frames, r.cells, r.best_score)).collect();
    Ok((PyArchive { inner: res.archive, env_digest: cfg.digest() }, log))
}

/// Count-based intrinsic-motivation baseline (`intrinsic_scale = 0` gives
/// plain PPO). Returns the visited-cell archive.
#[pyfunction]
#[pyo3(signature = (config, frame_budget, seed = 0, intrinsic_scale = 1.0))]
fn intrinsic_baseline(py: Python<'_>, config: &PyEnvConfig, frame_budget: u64, seed: u64, intrinsic_scale: f64) -> PyResult<PyArchive> {
    let cfg = config.inner.clone();
    let mut ic = ImConfig::new(frame_budget, seed);
    ic.intrinsic_scale = intrinsic_scale;
    let res = py.detach(|| im_baseline(|| make_env(&cfg), CellMapper::domain(1, 1), &ic)).map_err(err)?;
    Ok(PyArchive { inner: res.archive, env_digest: cfg.digest() })
}

/// Trains a policy with the backward algorithm from the archive's best
/// finished trajectory. Returns the model and whether the curriculum reached
/// the start.
#[pyfunction]
#[pyo3(signature = (config, archive, frame_budget, seed = 0, stickiness = 0.25))]
fn robustify(py: Python<'_>, config: &PyEnvConfig, archive: &PyArchive, frame_budget: u64, seed: u64, stickiness: f64) -> PyResult<(PyPolicyModel, bool)> {
    let cfg = config.inner.clone();
    let demo = extract_demo(&archive.inner, &mut make_env(&cfg).map_err(err)?).map_err(err)?;
    let bc = BackwardConfig::new(frame_budget, seed);
    let res = py.detach(|| run_backward(|s| make_sticky_env(&cfg, stickiness, s), std::slice::from_ref(&demo), &bc)).map_err(err)?;
    Ok((PyPolicyModel { inner: res.model }, res.converged))
}

/// Policy-based exploration under sticky actions. Returns the archive and
/// the goal-conditioned model.
#[pyfunction]
#[pyo3(signature = (config, frame_budget, seed = 0, stickiness = 0.25, n_actors = 16))]
fn policy_go_explore(
    py: Python<'_>,
    config: &PyEnvConfig,
    frame_budget: u64,
    seed: u64,
    stickiness: f64,
    n_actors: usize,
) -> PyResult<(PyArchive, PyPolicyModel)> {
    let cfg = config.inner.clone();
    let mut pc = PolicyGeConfig::new(frame_budget, seed);
    pc.n_actors = n_actors;
    let res = py.detach(|| run_policy_ge(|s| make_sticky_env(&cfg, stickiness, s), CellMapper::domain(1, 1), &pc)).map_err(err)?;
    Ok((PyArchive { inner: res.archive, env_digest: cfg.digest() }, PyPolicyModel { inner: res.model }))
}

/// Mean, min and max curves over metrics CSV texts.
#[pyfunction]
fn export_curves(texts: Vec<String>) -> PyResult<String> {
    let files: Vec<(String, String)> = texts.into_iter().enumerate().map(|(i, t)| (format!("run{i}"), t)).collect();
    Ok(cli::export_curves(&files).map_err(err)?.csv)
}

#[pymodule]
pub fn goexplore(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnvConfig>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyArchive>()?;
    m.add_class::<PyPolicyModel>()?;
    m.add_function(wrap_pyfunction!(explore, m)?)?;
    m.add_function(wrap_pyfunction!(intrinsic_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(robustify, m)?)?;
    m.add_function(wrap_pyfunction!(policy_go_explore, m)?)?;
    m.add_function(wrap_pyfunction!(export_curves, m)?)?;
    Ok(())
}
