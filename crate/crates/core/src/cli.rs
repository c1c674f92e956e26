//! Experiment harness behind the `goexplore` binary: config files, per-seed
//! runs with checkpoints, metrics files and curve export.
//!
//! Config files are flat `key = value` lines with dotted sections, e.g.
//! `explore.batch_size = 100`. `#` starts a comment line. Unknown keys are
//! errors.
//!
//! Every run writes into `<out_dir>/<mode>-seed<seed>/`:
//! `manifest.json`, `metrics.csv`, `timing.csv` and mode-specific files
//! (`archive.txt`, `model.txt`, `discovery.csv`, `curriculum.csv`,
//! `attribution.csv`, `evaluation.csv`).
//!
//! `metrics.csv` columns: `run_id,seed,frames,cells,best_score,success_rate`,
//! preceded by a `# env=<digest>` line. Wall-clock time lives in
//! `timing.csv` (`frames,wall_seconds`) so metrics are reproducible.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::archive::{Archive, WeightMode};
use crate::cellmap::{CellMapper, DownscaleParams};
use crate::env::{make_env, make_sticky_env, EnvConfig, EnvName, Environment};
use crate::explorer::{discovery_csv, im_baseline, DiscoveryRow, ExploreConfig, Explorer, ImConfig};
use crate::learner::{LossWeights, OptimizerConfig, OptimizerKind, PolicyModel};
use crate::policyge::{attribution_csv, policy_ge_metrics_csv, run_policy_ge_with, PolicyGeConfig};
use crate::robustify::{curriculum_csv, evaluate_policy, extract_demo, run_backward_with, BackwardConfig, EvalReport};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const DEFAULT_CHECKPOINT_EVERY: u64 = 100_000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error (line {line}, field `{field}`): {msg}")]
    Config { line: usize, field: String, msg: String },
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }

    fn config(field: &str, msg: impl Into<String>) -> Self {
        CliError::Config { line: 0, field: field.to_string(), msg: msg.into() }
    }
}

fn runtime<E: fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Explore,
    Robustify,
    PolicyGe,
    ImBaseline,
    PpoBaseline,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explore" => Ok(Mode::Explore),
            "robustify" => Ok(Mode::Robustify),
            "policy_ge" => Ok(Mode::PolicyGe),
            "im_baseline" => Ok(Mode::ImBaseline),
            "ppo_baseline" => Ok(Mode::PpoBaseline),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Explore => "explore",
            Mode::Robustify => "robustify",
            Mode::PolicyGe => "policy_ge",
            Mode::ImBaseline => "im_baseline",
            Mode::PpoBaseline => "ppo_baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub env: EnvConfig,
    /// Sticky-action probability for every mode that does not restore.
    pub stickiness: f64,
    pub seeds: Vec<u64>,
    /// Budget of the selected mode's main phase.
    pub frame_budget: u64,
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    pub mapper: CellMapper,
    pub explore: ExploreConfig,
    pub robustify: BackwardConfig,
    /// Archive to take the demonstration from; explored first when unset.
    pub robustify_archive: Option<PathBuf>,
    pub robustify_explore_budget: u64,
    pub eval_episodes: usize,
    pub policy_ge: PolicyGeConfig,
    pub im: ImConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            env: EnvConfig::deceptive_maze(11, 11, 0),
            stickiness: 0.0,
            seeds: vec![0],
            frame_budget: 1_000_000,
            out_dir: PathBuf::from("runs"),
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            mapper: CellMapper::domain(1, 1),
            explore: ExploreConfig::new(0, 0),
            robustify: BackwardConfig::new(0, 0),
            robustify_archive: None,
            robustify_explore_budget: 1_000_000,
            eval_episodes: 200,
            policy_ge: PolicyGeConfig::new(0, 0),
            im: ImConfig::new(0, 0),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_hidden(v: &str) -> Result<[usize; 2], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([parse(a)?, parse(b)?]),
        [a] => {
            let h = parse(a)?;
            Ok([h, h])
        }
        _ => Err(format!("expected `a,b`, got `{v}`")),
    }
}

/// Keys shared by every trained model.
fn apply_learner(
    key: &str,
    v: &str,
    hidden: &mut [usize; 2],
    w: &mut LossWeights,
    opt: &mut OptimizerConfig,
) -> Result<bool, String> {
    match key {
        "hidden" => *hidden = parse_hidden(v)?,
        "optimizer" => {
            opt.kind = match v {
                "momentum" => OptimizerKind::Momentum,
                "adam" => OptimizerKind::Adam,
                _ => return Err(format!("unknown optimizer `{v}`")),
            }
        }
        "learning_rate" => opt.learning_rate = parse(v)?,
        "momentum" => opt.momentum = parse(v)?,
        "beta2" => opt.beta2 = parse(v)?,
        "max_grad_norm" => opt.max_grad_norm = if v == "none" { None } else { Some(parse(v)?) },
        "epochs" => opt.epochs = parse(v)?,
        "minibatches" => opt.minibatches = parse(v)?,
        "normalize_advantages" => opt.normalize_advantages = parse(v)?,
        "gamma" => w.gamma = parse(v)?,
        "lambda" => w.lambda = parse(v)?,
        "clip_eps" => w.clip_eps = parse(v)?,
        "w_vf" => w.w_vf = parse(v)?,
        "w_ent" => w.w_ent = parse(v)?,
        "w_l2" => w.w_l2 = parse(v)?,
        "w_sil" => w.w_sil = parse(v)?,
        "w_sil_vf" => w.w_sil_vf = parse(v)?,
        "w_sil_ent" => w.w_sil_ent = parse(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn env_preset(name: EnvName, base: &EnvConfig) -> EnvConfig {
    match name {
        EnvName::DeceptiveMaze => EnvConfig::deceptive_maze(base.width, base.height, base.seed),
        EnvName::KeyDoorWorld => EnvConfig::key_door_world(base.width, base.height, base.n_rooms.max(2), base.seed),
        EnvName::PixelMaze => EnvConfig::pixel_maze(base.width, base.height, base.seed),
    }
}

struct CellsSpec {
    kind: String,
    bucket: (u32, u32),
    params: (usize, usize, u32),
}

impl RunConfig {
    /// Parses a config file. Every key is optional; omitted keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries: IndexMap<String, (usize, String)> = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(CliError::Config { line, field: trimmed.to_string(), msg: "expected `key = value`".into() });
            };
            let key = k.trim().to_string();
            if entries.contains_key(&key) {
                return Err(CliError::Config { line, field: key, msg: "duplicate key".into() });
            }
            entries.insert(key, (line, v.trim().to_string()));
        }
        // The env preset must be in place before its fields are overridden.
        entries.sort_by_cached_key(|k, _| k != "env.name");
        let mut cfg = RunConfig::default();
        let mut cells = CellsSpec { kind: "domain".into(), bucket: (1, 1), params: (11, 8, 8) };
        for (key, (line, value)) in &entries {
            cfg.apply(key, value, &mut cells).map_err(|msg| CliError::Config { line: *line, field: key.clone(), msg })?;
        }
        cfg.mapper = match cells.kind.as_str() {
            "domain" => CellMapper::domain(cells.bucket.0, cells.bucket.1),
            "downscale" => CellMapper::Downscale { params: DownscaleParams::new(cells.params.0, cells.params.1, cells.params.2) },
            other => {
                let line = entries.get("cells.kind").map_or(0, |e| e.0);
                return Err(CliError::Config { line, field: "cells.kind".into(), msg: format!("unknown cell kind `{other}`") });
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str, cells: &mut CellsSpec) -> Result<(), String> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let unknown = || Err(format!("unknown key `{key}`"));
        match section {
            "" => match field {
                "mode" => self.mode = Some(parse(v)?),
                "seeds" => self.seeds = v.split(',').map(|s| parse(s.trim())).collect::<Result<_, _>>()?,
                "frame_budget" => self.frame_budget = parse(v)?,
                "out_dir" => self.out_dir = PathBuf::from(v),
                "checkpoint_every" => self.checkpoint_every = parse(v)?,
                _ => return unknown(),
            },
            "env" => {
                let e = &mut self.env;
                match field {
                    "name" => *e = env_preset(parse(v)?, e),
                    "width" => e.width = parse(v)?,
                    "height" => e.height = parse(v)?,
                    "n_rooms" => e.n_rooms = parse(v)?,
                    "n_levels" => e.n_levels = parse(v)?,
                    "seed" => e.seed = parse(v)?,
                    "max_episode_steps" => e.max_episode_steps = parse(v)?,
                    "lives" => e.lives = parse(v)?,
                    "terminate_on_first_death" => e.terminate_on_first_death = parse(v)?,
                    "open_layout" => e.open_layout = parse(v)?,
                    "reward_free" => e.reward_free = parse(v)?,
                    "stickiness" => self.stickiness = parse(v)?,
                    _ => return unknown(),
                }
            }
            "cells" => match field {
                "kind" => cells.kind = v.to_string(),
                "bucket_x" => cells.bucket.0 = parse(v)?,
                "bucket_y" => cells.bucket.1 = parse(v)?,
                "w" => cells.params.0 = parse(v)?,
                "h" => cells.params.1 = parse(v)?,
                "d" => cells.params.2 = parse(v)?,
                _ => return unknown(),
            },
            "explore" => {
                let e = &mut self.explore;
                match field {
                    "batch_size" => e.batch_size = parse(v)?,
                    "explore_steps" => e.explore_steps = parse(v)?,
                    "action_repeat_prob" => e.action_repeat_prob = parse(v)?,
                    "weights" => e.weights.mode = parse::<WeightMode>(v)?,
                    "target_fraction" => e.target_fraction = parse(v)?,
                    "recompute_every" => e.recompute_every = parse(v)?,
                    "recompute_cell_limit" => e.recompute_cell_limit = parse(v)?,
                    "search_iterations" => e.search_iterations = parse(v)?,
                    "sample_capacity" => e.sample_capacity = parse(v)?,
                    "sample_prob" => e.sample_prob = parse(v)?,
                    _ => return unknown(),
                }
            }
            "robustify" => {
                let r = &mut self.robustify;
                if apply_learner(field, v, &mut r.hidden, &mut r.weights, &mut r.optimizer)? {
                    return Ok(());
                }
                match field {
                    "archive" => self.robustify_archive = Some(PathBuf::from(v)),
                    "explore_budget" => self.robustify_explore_budget = parse(v)?,
                    "eval_episodes" => self.eval_episodes = parse(v)?,
                    "allowed_lag" => r.allowed_lag = parse(v)?,
                    "extra_frame_coef" => r.extra_frame_coef = parse(v)?,
                    "move_threshold" => r.move_threshold = parse(v)?,
                    "n_demos" => r.n_demos = parse(v)?,
                    "virtual_demo" => r.virtual_demo = parse(v)?,
                    "window_size" => r.window_size = parse(v)?,
                    "sil_from_start_prob" => r.sil_from_start_prob = parse(v)?,
                    "reward_target" => r.reward_target = parse(v)?,
                    "success_window" => r.success_window = parse(v)?,
                    "min_episodes_to_move" => r.min_episodes_to_move = parse(v)?,
                    "converged_success" => r.converged_success = parse(v)?,
                    "n_actors" => r.n_actors = parse(v)?,
                    "n_sil_actors" => r.n_sil_actors = parse(v)?,
                    "steps_per_batch" => r.steps_per_batch = parse(v)?,
                    _ => return unknown(),
                }
            }
            "policy_ge" => {
                let p = &mut self.policy_ge;
                if apply_learner(field, v, &mut p.hidden, &mut p.weights, &mut p.optimizer)? {
                    return Ok(());
                }
                match field {
                    "n_actors" => p.n_actors = parse(v)?,
                    "n_sil_actors" => p.n_sil_actors = parse(v)?,
                    "steps_per_batch" => p.steps_per_batch = parse(v)?,
                    "window" => p.window = parse(v)?,
                    "regoal_steps" => p.regoal_steps = parse(v)?,
                    "policy_explore_prob" => p.policy_explore_prob = parse(v)?,
                    "action_repeat_prob" => p.action_repeat_prob = parse(v)?,
                    "reward_clip" => p.reward_clip = parse(v)?,
                    "entropy_increase_factor" => p.entropy.increase_factor = parse(v)?,
                    "entropy_increase_power" => p.entropy.increase_power = parse(v)?,
                    "explore_threshold" => p.entropy.explore_threshold = parse(v)?,
                    "max_stall" => p.entropy.max_stall = parse(v)?,
                    "unseen_neighbour_prob" => p.goal_rules.unseen_neighbour = parse(v)?,
                    "neighbour_prob" => p.goal_rules.neighbour = parse(v)?,
                    _ => return unknown(),
                }
            }
            "im" => {
                let m = &mut self.im;
                if apply_learner(field, v, &mut m.hidden, &mut m.weights, &mut m.optimizer)? {
                    return Ok(());
                }
                match field {
                    "n_actors" => m.n_actors = parse(v)?,
                    "steps_per_batch" => m.steps_per_batch = parse(v)?,
                    "intrinsic_scale" => m.intrinsic_scale = parse(v)?,
                    _ => return unknown(),
                }
            }
            _ => return unknown(),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed is required"));
        }
        if self.checkpoint_every == 0 {
            return Err(CliError::config("checkpoint_every", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.stickiness) {
            return Err(CliError::config("env.stickiness", "must lie in [0, 1]"));
        }
        self.env.validate().map_err(|e| CliError::config("env", e.to_string()))?;
        self.explore.validate().map_err(|e| CliError::config("explore", e.to_string()))?;
        self.robustify.validate().map_err(|e| CliError::config("robustify", e.to_string()))?;
        self.policy_ge.validate().map_err(|e| CliError::config("policy_ge", e.to_string()))?;
        self.im.weights.validate().map_err(|e| CliError::config("im", e.to_string()))?;
        if self.im.n_actors == 0 || self.im.steps_per_batch == 0 {
            return Err(CliError::config("im", "n_actors and steps_per_batch must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub frames: u64,
    pub cells: Option<usize>,
    pub best_score: Option<f64>,
    pub success_rate: Option<f64>,
    pub wall_seconds: f64,
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow], env_digest: u64) -> String {
    let mut s = format!("# env={env_digest:016x}\nrun_id,seed,frames,cells,best_score,success_rate\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.run_id, r.seed, r.frames, opt(r.cells), opt(r.best_score), opt(r.success_rate));
    }
    s
}

pub fn timing_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("frames,wall_seconds\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.3}", r.frames, r.wall_seconds);
    }
    s
}

fn discovery_rows(run_id: &str, seed: u64, log: &[DiscoveryRow], wall: &[f64]) -> Vec<MetricsRow> {
    log.iter()
        .zip(wall)
        .map(|(d, &w)| MetricsRow {
            run_id: run_id.to_string(),
            seed,
            frames: d.frames,
            cells: Some(d.cells),
            best_score: d.best_score,
            success_rate: None,
            wall_seconds: w,
        })
        .collect()
}

/// Writes through a temporary file so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_archive(path: &Path, archive: &Archive, env_digest: u64) -> Result<(), CliError> {
    let mut buf = Vec::new();
    archive.write_to(&mut buf, env_digest).map_err(runtime)?;
    write_atomic(path, &buf)
}

fn save_model(path: &Path, model: &PolicyModel) -> Result<(), CliError> {
    let mut buf = Vec::new();
    model.write_to(&mut buf).map_err(runtime)?;
    write_atomic(path, &buf)
}

pub fn load_archive(path: &Path, env_digest: u64) -> Result<Archive, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Archive::read_from(BufReader::new(f), Some(env_digest)).map_err(runtime)
}

pub fn load_model(path: &Path) -> Result<PolicyModel, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    PolicyModel::read_from(BufReader::new(f)).map_err(runtime)
}

fn git_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'a str,
    revision: String,
    mode: String,
    seed: u64,
    config_sha256: String,
    env_digest: String,
    resumed_from: Option<String>,
    config: &'a str,
}

/// Checkpoint trigger: fires each time `frames` crosses a multiple of `every`.
struct Cadence {
    every: u64,
    next: u64,
}

impl Cadence {
    fn new(every: u64, start: u64) -> Self {
        Self { every, next: (start / every + 1) * every }
    }

    fn due(&mut self, frames: u64) -> bool {
        if frames < self.next {
            return false;
        }
        self.next = (frames / self.every + 1) * self.every;
        true
    }
}

/// Files produced by one seed's run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: String,
}

/// Runs `mode` for every configured seed, one after another.
pub fn run(mode: Mode, cfg: &RunConfig, config_text: &str, resume: Option<&Path>) -> Result<Vec<RunOutput>, CliError> {
    if let Some(m) = cfg.mode {
        if m != mode && !(mode == Mode::ImBaseline && m == Mode::PpoBaseline) {
            return Err(CliError::config("mode", format!("config says `{m}` but the command runs `{mode}`")));
        }
    }
    let mode = cfg.mode.unwrap_or(mode);
    if resume.is_some() && !matches!(mode, Mode::Explore | Mode::PolicyGe) {
        return Err(CliError::config("--resume", format!("resuming is not supported for `{mode}`")));
    }
    cfg.seeds.iter().map(|&seed| run_seed(mode, cfg, config_text, seed, resume)).collect()
}

pub fn run_seed(mode: Mode, cfg: &RunConfig, config_text: &str, seed: u64, resume: Option<&Path>) -> Result<RunOutput, CliError> {
    let dir = cfg.out_dir.join(format!("{mode}-seed{seed}"));
    fs::create_dir_all(&dir)?;
    let env_digest = cfg.env.digest();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        revision: git_revision(),
        mode: mode.to_string(),
        seed,
        config_sha256: sha256_hex(config_text.as_bytes()),
        env_digest: format!("{env_digest:016x}"),
        resumed_from: resume.map(|p| p.display().to_string()),
        config: config_text,
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).map_err(runtime)?.as_bytes())?;
    let run_id = format!("{mode}-{seed}");
    let rows = match mode {
        Mode::Explore => run_explore(cfg, seed, &dir, &run_id, resume)?,
        Mode::Robustify => run_robustify(cfg, seed, &dir, &run_id)?,
        Mode::PolicyGe => run_policy(cfg, seed, &dir, &run_id, resume)?,
        Mode::ImBaseline | Mode::PpoBaseline => run_baseline(cfg, mode, seed, &dir, &run_id)?,
    };
    let metrics = metrics_csv(&rows, env_digest);
    write_atomic(&dir.join("metrics.csv"), metrics.as_bytes())?;
    write_atomic(&dir.join("timing.csv"), timing_csv(&rows).as_bytes())?;
    Ok(RunOutput { dir, metrics })
}

fn run_explore(cfg: &RunConfig, seed: u64, dir: &Path, run_id: &str, resume: Option<&Path>) -> Result<Vec<MetricsRow>, CliError> {
    let env_cfg = &cfg.env;
    let digest = env_cfg.digest();
    let mut ec = cfg.explore.clone();
    ec.frame_budget = cfg.frame_budget;
    ec.seed = seed;
    let factory = || make_env(env_cfg);
    let mut explorer = match resume {
        Some(path) => {
            let archive = load_archive(&path.join("archive.txt"), digest)?;
            let mapper = match archive.params {
                Some(params) => CellMapper::Downscale { params },
                None => cfg.mapper.clone(),
            };
            Explorer::resume(factory, mapper, ec, archive).map_err(runtime)?
        }
        None => Explorer::new(factory, cfg.mapper.clone(), ec).map_err(runtime)?,
    };
    let mut cadence = Cadence::new(cfg.checkpoint_every, explorer.frames_used());
    let archive_path = dir.join("archive.txt");
    let mut io_error = None;
    explorer
        .run(|ex| {
            if cadence.due(ex.frames_used()) {
                if let Err(e) = save_archive(&archive_path, &ex.archive, digest) {
                    io_error = Some(e);
                    return Err(crate::explorer::ExploreError::Config("checkpoint write failed".into()));
                }
            }
            Ok(())
        })
        .map_err(|e| io_error.take().unwrap_or_else(|| runtime(e)))?;
    save_archive(&archive_path, &explorer.archive, digest)?;
    write_atomic(&dir.join("discovery.csv"), discovery_csv(&explorer.discovery_log, digest).as_bytes())?;
    Ok(discovery_rows(run_id, seed, &explorer.discovery_log, &explorer.wall_seconds))
}

fn run_robustify(cfg: &RunConfig, seed: u64, dir: &Path, run_id: &str) -> Result<Vec<MetricsRow>, CliError> {
    let env_cfg = &cfg.env;
    let digest = env_cfg.digest();
    let archive = match &cfg.robustify_archive {
        Some(path) => load_archive(path, digest)?,
        None => {
            let mut ec = cfg.explore.clone();
            ec.frame_budget = cfg.robustify_explore_budget;
            ec.seed = seed;
            let mut ex = Explorer::new(|| make_env(env_cfg), cfg.mapper.clone(), ec).map_err(runtime)?;
            ex.run(|_| Ok(())).map_err(runtime)?;
            save_archive(&dir.join("archive.txt"), &ex.archive, digest)?;
            ex.archive
        }
    };
    let demo = extract_demo(&archive, &mut make_env(env_cfg).map_err(runtime)?).map_err(runtime)?;
    let target = demo.total_score;
    let mut bc = cfg.robustify.clone();
    bc.frame_budget = cfg.frame_budget;
    bc.seed = seed;
    let stickiness = cfg.stickiness;
    let factory = |s: u64| make_sticky_env(env_cfg, stickiness, s);
    let started = Instant::now();
    let mut cadence = Cadence::new(cfg.checkpoint_every, 0);
    let model_path = dir.join("model.txt");
    let mut wall = Vec::new();
    let result = run_backward_with(factory, std::slice::from_ref(&demo), &bc, |r| {
        wall.push(started.elapsed().as_secs_f64());
        if cadence.due(r.frames_used) {
            save_model(&model_path, &r.model).map_err(|e| crate::robustify::RobustifyError::Config(e.to_string()))?;
        }
        Ok(())
    })
    .map_err(runtime)?;
    save_model(&model_path, &result.model)?;
    write_atomic(&dir.join("curriculum.csv"), curriculum_csv(&result.log).as_bytes())?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    let report = evaluate_policy(&result.model, factory, cfg.eval_episodes, eval_rng.random(), 0, target, false).map_err(runtime)?;
    write_atomic(&dir.join("evaluation.csv"), evaluation_csv(&report).as_bytes())?;
    Ok(result
        .log
        .iter()
        .zip(wall)
        .map(|(row, w)| MetricsRow {
            run_id: run_id.to_string(),
            seed,
            frames: row.frames,
            cells: None,
            best_score: None,
            success_rate: Some(row.success_rate),
            wall_seconds: w,
        })
        .collect())
}

pub fn evaluation_csv(r: &EvalReport) -> String {
    format!("episodes,mean,std_error,success_rate\n{},{},{},{}\n", r.scores.len(), r.mean, r.std_error, r.success_rate)
}

fn run_policy(cfg: &RunConfig, seed: u64, dir: &Path, run_id: &str, resume: Option<&Path>) -> Result<Vec<MetricsRow>, CliError> {
    let env_cfg = &cfg.env;
    let digest = env_cfg.digest();
    let mut pc = cfg.policy_ge.clone();
    pc.frame_budget = cfg.frame_budget;
    pc.seed = seed;
    let start = match resume {
        Some(path) => Some((load_archive(&path.join("archive.txt"), digest)?, load_model(&path.join("model.txt"))?)),
        None => None,
    };
    let start_frames = start.as_ref().map_or(0, |(a, _)| a.frame_budget_used);
    let stickiness = cfg.stickiness;
    let mut cadence = Cadence::new(cfg.checkpoint_every, start_frames);
    let (archive_path, model_path) = (dir.join("archive.txt"), dir.join("model.txt"));
    let result = run_policy_ge_with(|s| make_sticky_env(env_cfg, stickiness, s), cfg.mapper.clone(), &pc, start, |r| {
        if cadence.due(r.frames_used) {
            let saved = save_archive(&archive_path, &r.archive, digest).and_then(|_| save_model(&model_path, &r.model));
            saved.map_err(|e| crate::policyge::PolicyGeError::Config(e.to_string()))?;
        }
        Ok(())
    })
    .map_err(runtime)?;
    save_archive(&archive_path, &result.archive, digest)?;
    save_model(&model_path, &result.model)?;
    write_atomic(&dir.join("attribution.csv"), attribution_csv(&result.log, digest).as_bytes())?;
    write_atomic(&dir.join("policy_ge.csv"), policy_ge_metrics_csv(&result.log).as_bytes())?;
    Ok(result
        .log
        .iter()
        .zip(&result.wall_seconds)
        .map(|(row, &w)| {
            let k = row.round;
            let tried = k.return_successes + k.return_failures;
            MetricsRow {
                run_id: run_id.to_string(),
                seed,
                frames: row.frames,
                cells: Some(row.cells),
                best_score: row.best_score,
                success_rate: (tried > 0).then(|| k.return_successes as f64 / tried as f64),
                wall_seconds: w,
            }
        })
        .collect())
}

fn run_baseline(cfg: &RunConfig, mode: Mode, seed: u64, dir: &Path, run_id: &str) -> Result<Vec<MetricsRow>, CliError> {
    let env_cfg = &cfg.env;
    let digest = env_cfg.digest();
    let mut ic = cfg.im.clone();
    ic.frame_budget = cfg.frame_budget;
    ic.seed = seed;
    if mode == Mode::PpoBaseline {
        ic.intrinsic_scale = 0.0;
    }
    let env_seeds = AtomicU64::new(ChaCha8Rng::seed_from_u64(seed).random());
    let stickiness = cfg.stickiness;
    let factory = || make_sticky_env(env_cfg, stickiness, env_seeds.fetch_add(1, Ordering::Relaxed));
    let result = im_baseline(factory, cfg.mapper.clone(), &ic).map_err(runtime)?;
    save_archive(&dir.join("archive.txt"), &result.archive, digest)?;
    write_atomic(&dir.join("discovery.csv"), discovery_csv(&result.discovery_log, digest).as_bytes())?;
    Ok(discovery_rows(run_id, seed, &result.discovery_log, &result.wall_seconds))
}

/// Runs a checkpointed policy from reset and reports its score statistics.
/// Success means reaching the environment's maximum score.
pub fn evaluate(
    model: &PolicyModel,
    env_cfg: &EnvConfig,
    episodes: usize,
    stickiness: f64,
    seed: u64,
    greedy: bool,
) -> Result<EvalReport, CliError> {
    let probe = make_env(env_cfg).map_err(runtime)?;
    if model.arch.obs_dim != probe.feature_width() || model.arch.goal_dim != 0 || model.arch.n_actions != probe.num_actions() {
        return Err(CliError::Runtime(format!(
            "checkpoint shape {:?} does not fit env (features {}, actions {})",
            model.arch,
            probe.feature_width(),
            probe.num_actions()
        )));
    }
    evaluate_policy(model, |s| make_sticky_env(env_cfg, stickiness, s), episodes, seed, 0, probe.max_score(), greedy).map_err(runtime)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportResult {
    pub csv: String,
    pub rows: usize,
    /// Rows dropped from longer runs.
    pub truncated: usize,
}

struct ParsedMetrics {
    env: String,
    rows: Vec<(u64, [Option<f64>; 3])>,
}

fn parse_metrics(text: &str, name: &str) -> Result<ParsedMetrics, CliError> {
    let bad = |msg: String| CliError::Runtime(format!("{name}: {msg}"));
    let mut lines = text.lines();
    let env = lines
        .next()
        .and_then(|l| l.strip_prefix("# env="))
        .ok_or_else(|| bad("missing `# env=` header".into()))?
        .to_string();
    if lines.next() != Some("run_id,seed,frames,cells,best_score,success_rate") {
        return Err(bad("unexpected column header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("row {} has {} fields", i + 1, f.len())));
        }
        let num = |s: &str| -> Result<Option<f64>, CliError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}` in row {}", i + 1)))
            }
        };
        let frames = f[2].parse().map_err(|_| bad(format!("bad frames `{}` in row {}", f[2], i + 1)))?;
        rows.push((frames, [num(f[3])?, num(f[4])?, num(f[5])?]));
    }
    Ok(ParsedMetrics { env, rows })
}

/// Aggregates metrics files row by row (mean, min, max of cells, best score
/// and success rate). Runs of unequal length are cut to the shortest.
pub fn export_curves(files: &[(String, String)]) -> Result<ExportResult, CliError> {
    if files.is_empty() {
        return Err(CliError::Runtime("no metrics files given".into()));
    }
    let runs = files.iter().map(|(name, text)| parse_metrics(text, name)).collect::<Result<Vec<_>, _>>()?;
    if let Some((i, r)) = runs.iter().enumerate().find(|(_, r)| r.env != runs[0].env) {
        return Err(CliError::Runtime(format!("env digest {} of {} differs from {} of {}", r.env, files[i].0, runs[0].env, files[0].0)));
    }
    let n = runs.iter().map(|r| r.rows.len()).min().unwrap();
    let longest = runs.iter().map(|r| r.rows.len()).max().unwrap();
    let mut csv = format!("# env={}\nframes,runs", runs[0].env);
    for col in ["cells", "best_score", "success_rate"] {
        let _ = write!(csv, ",{col}_mean,{col}_min,{col}_max");
    }
    csv.push('\n');
    for i in 0..n {
        let frames = runs[0].rows[i].0;
        if let Some(r) = runs.iter().position(|r| r.rows[i].0 != frames) {
            return Err(CliError::Runtime(format!("row {} of {} is at {} frames, expected {frames}", i + 1, files[r].0, runs[r].rows[i].0)));
        }
        let _ = write!(csv, "{frames},{}", runs.len());
        for c in 0..3 {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.rows[i].1[c]).collect();
            if vals.is_empty() {
                csv.push_str(",,,");
            } else {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let _ = write!(csv, ",{mean},{min},{max}");
            }
        }
        csv.push('\n');
    }
    if longest > n {
        let _ = writeln!(csv, "# warning: truncated to {n} rows, {} rows dropped from longer runs", longest - n);
    }
    Ok(ExportResult { csv, rows: n, truncated: longest - n })
}

/// Reads metrics files from disk and writes the aggregate to `out`.
pub fn export_files(inputs: &[PathBuf], out: &Path) -> Result<ExportResult, CliError> {
    let files = inputs
        .iter()
        .map(|p| fs::read_to_string(p).map(|t| (p.display().to_string(), t)).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let result = export_curves(&files)?;
    let mut w = BufWriter::new(fs::File::create(out)?);
    w.write_all(result.csv.as_bytes())?;
    w.flush()?;
    Ok(result)
}
