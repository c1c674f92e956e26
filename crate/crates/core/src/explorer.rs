//! Restore-based exploration: select cells, return to them by restoring their
//! snapshot, explore randomly, and fold everything seen back into the archive.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::archive::{Archive, ArchiveError, Candidate, SelectionWeightConfig, WeightMode};
use crate::cellmap::{search_representation, CellError, CellKey, CellMapper, FrameSampleSet, ParamBounds};
use crate::env::{EnvError, Environment, GrayFrame, Observation};
use crate::learner::{
    prepare_ppo, sample_action, softmax, train_step, Architecture, LossWeights, OptimizerConfig, OptimizerState, PolicyModel, Rollout,
    StepRecord,
};

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("invalid exploration config: {0}")]
    Config(String),
    #[error("selected cell {0} has no snapshot")]
    NoSnapshot(String),
    #[error("training failed: {0}")]
    Training(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreConfig {
    pub batch_size: usize,
    pub explore_steps: usize,
    pub action_repeat_prob: f64,
    pub frame_budget: u64,
    pub weights: SelectionWeightConfig,
    pub seed: u64,
    /// Pixel mode: target cell count as a fraction of the frame sample size.
    pub target_fraction: f64,
    /// Pixel mode: batches between representation searches.
    pub recompute_every: u64,
    /// Pixel mode: archive size that forces an immediate search.
    pub recompute_cell_limit: usize,
    pub search_iterations: usize,
    pub sample_capacity: usize,
    pub sample_prob: f64,
}

impl ExploreConfig {
    pub fn new(frame_budget: u64, seed: u64) -> Self {
        Self {
            batch_size: 100,
            explore_steps: 100,
            action_repeat_prob: 0.95,
            frame_budget,
            weights: SelectionWeightConfig::new(WeightMode::Plain),
            seed,
            target_fraction: 0.1,
            recompute_every: 100,
            recompute_cell_limit: 50_000,
            search_iterations: 500,
            sample_capacity: crate::cellmap::FRAME_SAMPLE_CAPACITY,
            sample_prob: crate::cellmap::FRAME_SAMPLE_PROB,
        }
    }

    pub fn validate(&self) -> Result<(), ExploreError> {
        let bad = |m: &str| Err(ExploreError::Config(m.to_string()));
        if self.batch_size == 0 || self.explore_steps == 0 {
            return bad("batch_size and explore_steps must be positive");
        }
        if !(0.0..=1.0).contains(&self.action_repeat_prob) || !(0.0..=1.0).contains(&self.sample_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.target_fraction > 0.0) || self.recompute_every == 0 || self.sample_capacity == 0 {
            return bad("target_fraction, recompute_every and sample_capacity must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub action: usize,
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Picks the next exploration action: repeat `previous` with probability
/// `repeat_prob`, otherwise draw uniformly.
pub fn random_action<R: Rng + ?Sized>(previous: Option<usize>, n_actions: usize, repeat_prob: f64, rng: &mut R) -> usize {
    match previous {
        Some(a) if rng.random::<f64>() < repeat_prob => a,
        _ => rng.random_range(0..n_actions),
    }
}

/// Runs up to `steps` random actions from the env's current state, calling
/// `visit` after every transition. Stops early when the episode ends.
/// Returns the number of steps taken.
pub fn explore_with<E, R, F>(env: &mut E, steps: usize, repeat_prob: f64, rng: &mut R, mut visit: F) -> Result<usize, ExploreError>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
    F: FnMut(&E, Transition) -> Result<(), ExploreError>,
{
    let mut previous = None;
    let n = env.num_actions();
    for t in 0..steps {
        if env.is_done() {
            return Ok(t);
        }
        let action = random_action(previous, n, repeat_prob, rng);
        previous = Some(action);
        let step = env.step(action)?;
        let done = step.done;
        visit(env, Transition { action, observation: step.observation, reward: step.reward, done })?;
        if done {
            return Ok(t + 1);
        }
    }
    Ok(steps)
}

pub fn explore_from<E: Environment + ?Sized, R: Rng + ?Sized>(
    env: &mut E,
    steps: usize,
    repeat_prob: f64,
    rng: &mut R,
) -> Result<Vec<Transition>, ExploreError> {
    let mut out = Vec::with_capacity(steps);
    explore_with(env, steps, repeat_prob, rng, |_, t| {
        out.push(t);
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryRow {
    pub frames: u64,
    pub cells: usize,
    pub best_score: Option<f64>,
}

/// Renders discovery rows as CSV. Timing is deliberately absent so that
/// reruns with the same seed produce identical files.
pub fn discovery_csv(rows: &[DiscoveryRow], env_digest: u64) -> String {
    let mut s = format!("# env={env_digest:016x}\nframes,cells,best_score\n");
    for r in rows {
        let best = r.best_score.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", r.frames, r.cells, best);
    }
    s
}

#[derive(Debug, Clone)]
pub struct ExplorationResult {
    pub archive: Archive,
    pub mapper: CellMapper,
    pub frames_used: u64,
    pub discovery_log: Vec<DiscoveryRow>,
    /// Wall-clock seconds at each discovery row.
    pub wall_seconds: Vec<f64>,
}

struct JobOutput {
    candidates: IndexMap<CellKey, Candidate>,
    visits: IndexMap<CellKey, u64>,
    frames: u64,
    sampled: Vec<GrayFrame>,
}

struct Job<'a> {
    archive: &'a Archive,
    mapper: &'a CellMapper,
    start: CellKey,
    steps: usize,
    repeat_prob: f64,
    sample_prob: f64,
    seed: u64,
}

fn run_job<E: Environment>(env: &mut E, job: Job<'_>) -> Result<JobOutput, ExploreError> {
    let record = job.archive.get(&job.start).ok_or(ArchiveError::Empty)?;
    let snapshot = record.snapshot.as_ref().ok_or_else(|| ExploreError::NoSnapshot(job.start.encode()))?;
    env.restore(snapshot)?;
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(job.seed);
    sample_rng.set_stream(1);

    let mut trajectory = record.trajectory.clone();
    let mut score = record.score;
    let mut length = record.length;
    let mut current = job.start.clone();
    let mut candidates: IndexMap<CellKey, Candidate> = IndexMap::new();
    let mut visits: IndexMap<CellKey, u64> = IndexMap::new();
    visits.insert(current.clone(), 0);
    let mut sampled = Vec::new();

    let frames = explore_with(env, job.steps, job.repeat_prob, &mut rng, |env, t| {
        *visits.entry(current.clone()).or_insert(0) += 1;
        trajectory.push(t.action as u8);
        score += t.reward;
        length += 1;
        if let Some(frame) = &t.observation.frame {
            if sample_rng.random::<f64>() < job.sample_prob {
                sampled.push(frame.clone());
            }
        }
        let key = if t.done { CellKey::EpisodeEnd } else { job.mapper.map(&t.observation)? };
        let improves_local = candidates.get(&key).is_none_or(|c| crate::archive::is_better(score, length, c.score, c.length));
        if improves_local && job.archive.would_accept(&key, score, length) {
            let candidate = Candidate {
                trajectory: trajectory.clone(),
                score,
                length,
                snapshot: (!t.done).then(|| env.snapshot()),
                frame: if t.done { None } else { t.observation.frame.clone() },
                cell_path: None,
            };
            candidates.insert(key.clone(), candidate);
        }
        if !t.done {
            visits.entry(key.clone()).or_insert(0);
            current = key;
        }
        Ok(())
    })?;
    Ok(JobOutput { candidates, visits, frames: frames as u64, sampled })
}

/// Stateful exploration driver. [`run_exploration_phase`] wraps it for
/// one-shot use; the CLI drives it batch by batch to write checkpoints.
pub struct Explorer<E> {
    envs: Vec<E>,
    pub config: ExploreConfig,
    pub mapper: CellMapper,
    pub archive: Archive,
    rng: ChaCha8Rng,
    sample: FrameSampleSet,
    bounds: Option<ParamBounds>,
    batches: u64,
    pub discovery_log: Vec<DiscoveryRow>,
    pub wall_seconds: Vec<f64>,
    started: Instant,
}

impl<E: Environment> Explorer<E> {
    /// Starts a fresh run whose archive holds only the reset cell.
    pub fn new<F>(factory: F, mapper: CellMapper, config: ExploreConfig) -> Result<Self, ExploreError>
    where
        F: Fn() -> Result<E, EnvError>,
    {
        let mut envs = Self::build_envs(&factory, &config)?;
        let env = &mut envs[0];
        let obs = env.reset();
        let key = mapper.map(&obs)?;
        let mut archive = Archive { params: mapper.params(), ..Archive::default() };
        archive.update(
            key,
            Candidate {
                trajectory: Vec::new(),
                score: 0.0,
                length: 0,
                snapshot: Some(env.snapshot()),
                frame: obs.frame.clone(),
                cell_path: None,
            },
        );
        Self::from_parts(envs, mapper, config, archive)
    }

    /// Continues from a saved archive. The random stream is derived from the
    /// seed and the frames already used.
    pub fn resume<F>(factory: F, mapper: CellMapper, config: ExploreConfig, archive: Archive) -> Result<Self, ExploreError>
    where
        F: Fn() -> Result<E, EnvError>,
    {
        if archive.cells().next().is_none() {
            return Err(ArchiveError::Empty.into());
        }
        let envs = Self::build_envs(&factory, &config)?;
        let mut explorer = Self::from_parts(envs, mapper, config, archive)?;
        explorer.rng = ChaCha8Rng::seed_from_u64(explorer.config.seed ^ explorer.archive.frame_budget_used.rotate_left(32));
        Ok(explorer)
    }

    fn build_envs<F: Fn() -> Result<E, EnvError>>(factory: &F, config: &ExploreConfig) -> Result<Vec<E>, ExploreError> {
        config.validate()?;
        (0..config.batch_size).map(|_| factory().map_err(ExploreError::from)).collect()
    }

    fn from_parts(envs: Vec<E>, mapper: CellMapper, config: ExploreConfig, archive: Archive) -> Result<Self, ExploreError> {
        let bounds = match &mapper {
            CellMapper::Downscale { .. } => {
                let frame = envs[0].render_frame()?;
                Some(ParamBounds::for_frame(frame.width, frame.height))
            }
            CellMapper::Domain { .. } => None,
        };
        let sample = FrameSampleSet::new(config.sample_capacity, config.sample_prob);
        let mut explorer = Self {
            envs,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            mapper,
            archive,
            sample,
            bounds,
            batches: 0,
            discovery_log: Vec::new(),
            wall_seconds: Vec::new(),
            started: Instant::now(),
        };
        explorer.log_row();
        Ok(explorer)
    }

    pub fn frames_used(&self) -> u64 {
        self.archive.frame_budget_used
    }

    pub fn is_finished(&self) -> bool {
        self.frames_used() >= self.config.frame_budget
    }

    fn log_row(&mut self) {
        self.discovery_log.push(DiscoveryRow {
            frames: self.archive.frame_budget_used,
            cells: self.archive.cell_count(),
            best_score: self.archive.best_end_of_episode_score(),
        });
        self.wall_seconds.push(self.started.elapsed().as_secs_f64());
    }

    /// Runs one select/go/explore/update batch. Returns false once the frame
    /// budget is exhausted.
    pub fn run_batch(&mut self) -> Result<bool, ExploreError> {
        if self.is_finished() {
            return Ok(false);
        }
        let mut remaining = self.config.frame_budget - self.frames_used();
        let picks = self.archive.select_cells(self.config.batch_size, &self.config.weights, &mut self.rng)?;
        let mut jobs = Vec::with_capacity(picks.len());
        for start in picks {
            let seed = self.rng.random::<u64>();
            let steps = (self.config.explore_steps as u64).min(remaining) as usize;
            remaining -= steps as u64;
            if steps > 0 {
                jobs.push(Job {
                    archive: &self.archive,
                    mapper: &self.mapper,
                    start,
                    steps,
                    repeat_prob: self.config.action_repeat_prob,
                    sample_prob: self.config.sample_prob,
                    seed,
                });
            }
        }
        let outputs: Vec<Result<JobOutput, ExploreError>> =
            self.envs.par_iter_mut().zip(jobs.into_par_iter()).map(|(env, job)| run_job(env, job)).collect();

        for out in outputs {
            let out = out?;
            for (key, candidate) in out.candidates {
                self.archive.update(key, candidate);
            }
            self.archive.bump_counters(&out.visits);
            self.archive.frame_budget_used += out.frames;
            for frame in out.sampled {
                self.sample.insert(frame);
            }
        }
        self.batches += 1;
        if self.bounds.is_some()
            && (self.batches % self.config.recompute_every == 0 || self.archive.cell_count() > self.config.recompute_cell_limit)
        {
            self.recompute_representation()?;
        }
        self.log_row();
        Ok(true)
    }

    /// Searches for better downscaling parameters on the frame sample and
    /// converts the archive if they change.
    pub fn recompute_representation(&mut self) -> Result<(), ExploreError> {
        let (Some(bounds), Some(current)) = (self.bounds, self.mapper.params()) else {
            return Ok(());
        };
        if self.sample.is_empty() {
            return Ok(());
        }
        let (params, _) = search_representation(
            &self.sample,
            current,
            bounds,
            self.config.search_iterations,
            self.config.target_fraction,
            &mut self.rng,
        )?;
        if params != current {
            self.archive = self.archive.remap(params)?;
            self.mapper = CellMapper::Downscale { params };
        }
        Ok(())
    }

    /// Runs batches until the budget is spent, calling `on_batch` after each.
    pub fn run<C>(&mut self, mut on_batch: C) -> Result<(), ExploreError>
    where
        C: FnMut(&Self) -> Result<(), ExploreError>,
    {
        while self.run_batch()? {
            on_batch(self)?;
        }
        Ok(())
    }

    /// Checks that every stored snapshot restores into a state that maps to
    /// its record's key. Returns the offending keys.
    pub fn snapshot_mismatches(&mut self) -> Result<Vec<CellKey>, ExploreError> {
        let env = &mut self.envs[0];
        let mut bad = Vec::new();
        for rec in self.archive.cells() {
            if let Some(s) = &rec.snapshot {
                env.restore(s)?;
                if self.mapper.map(&env.observe())? != rec.key {
                    bad.push(rec.key.clone());
                }
            }
        }
        Ok(bad)
    }

    pub fn into_result(self) -> ExplorationResult {
        ExplorationResult {
            frames_used: self.archive.frame_budget_used,
            archive: self.archive,
            mapper: self.mapper,
            discovery_log: self.discovery_log,
            wall_seconds: self.wall_seconds,
        }
    }
}

pub fn run_exploration_phase<E, F>(factory: F, mapper: CellMapper, config: ExploreConfig) -> Result<ExplorationResult, ExploreError>
where
    E: Environment,
    F: Fn() -> Result<E, EnvError>,
{
    let mut explorer = Explorer::new(factory, mapper, config)?;
    explorer.run(|_| Ok(()))?;
    Ok(explorer.into_result())
}

/// Settings of the count-based intrinsic-motivation baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImConfig {
    pub n_actors: usize,
    pub steps_per_batch: usize,
    pub frame_budget: u64,
    /// Scale of the 1/sqrt(n) bonus; 0 gives plain PPO.
    pub intrinsic_scale: f64,
    pub hidden: [usize; 2],
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl ImConfig {
    pub fn new(frame_budget: u64, seed: u64) -> Self {
        Self {
            n_actors: 16,
            steps_per_batch: 128,
            frame_budget,
            intrinsic_scale: 1.0,
            hidden: [64, 64],
            weights: LossWeights::policy_based(),
            optimizer: OptimizerConfig::default(),
            seed,
        }
    }
}

/// Count-based bonus for the n-th episode that visits a cell.
pub fn intrinsic_reward(n: u64) -> f64 {
    1.0 / (n as f64).sqrt()
}

struct ImActor<E> {
    env: E,
    rng: ChaCha8Rng,
    obs: Observation,
    trajectory: Vec<u8>,
    score: f64,
    seen_this_episode: HashSet<CellKey>,
}

struct ImBatch {
    rollout: Rollout,
    candidates: Vec<(CellKey, Candidate)>,
    new_visits: Vec<CellKey>,
}

impl<E: Environment> ImActor<E> {
    fn collect(
        &mut self,
        model: &PolicyModel,
        mapper: &CellMapper,
        counts: &HashMap<CellKey, u64>,
        cfg: &ImConfig,
    ) -> Result<ImBatch, ExploreError> {
        let mut steps = Vec::with_capacity(cfg.steps_per_batch);
        let mut candidates = Vec::new();
        let mut new_visits = Vec::new();
        let mut local: HashMap<CellKey, u64> = HashMap::new();
        for _ in 0..cfg.steps_per_batch {
            let out = model.forward_input(&self.obs.features);
            let probs = softmax(&out.logits, 1.0);
            let action = sample_action(&probs, &mut self.rng);
            let r = self.env.step(action)?;
            self.trajectory.push(action as u8);
            self.score += r.reward;
            let key = if r.done { CellKey::EpisodeEnd } else { mapper.map(&r.observation)? };
            let mut bonus = 0.0;
            if !r.done && self.seen_this_episode.insert(key.clone()) {
                let extra = local.entry(key.clone()).or_insert(0);
                *extra += 1;
                bonus = cfg.intrinsic_scale * intrinsic_reward(counts.get(&key).copied().unwrap_or(0) + *extra);
                new_visits.push(key.clone());
            }
            candidates.push((
                key,
                Candidate {
                    trajectory: self.trajectory.clone(),
                    score: self.score,
                    length: self.trajectory.len() as u32,
                    snapshot: None,
                    frame: if r.done { None } else { r.observation.frame.clone() },
                    cell_path: None,
                },
            ));
            let input = std::mem::replace(&mut self.obs, r.observation).features;
            steps.push(StepRecord {
                input,
                action,
                reward: r.reward + bonus,
                done: r.done,
                logp_old: probs[action].ln(),
                v_old: out.value,
                temperature: 1.0,
                trainable: true,
            });
            if r.done {
                self.obs = self.env.reset();
                self.trajectory.clear();
                self.score = 0.0;
                self.seen_this_episode.clear();
                self.seen_this_episode.insert(mapper.map(&self.obs)?);
            }
        }
        let bootstrap_value = model.forward_input(&self.obs.features).value;
        Ok(ImBatch { rollout: Rollout { steps, bootstrap_value }, candidates, new_visits })
    }
}

/// PPO with a count-based novelty bonus, run without any state restoration.
/// Discoveries are recorded in an archive with the same mapper so the
/// discovery log is comparable to [`run_exploration_phase`].
pub fn im_baseline<E, F>(factory: F, mapper: CellMapper, cfg: &ImConfig) -> Result<ExplorationResult, ExploreError>
where
    E: Environment,
    F: Fn() -> Result<E, EnvError>,
{
    if cfg.n_actors == 0 || cfg.steps_per_batch == 0 {
        return Err(ExploreError::Config("n_actors and steps_per_batch must be positive".into()));
    }
    let started = Instant::now();
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut actors = Vec::with_capacity(cfg.n_actors);
    let mut archive = Archive { params: mapper.params(), ..Archive::default() };
    for _ in 0..cfg.n_actors {
        let mut env = factory()?;
        let obs = env.reset();
        let key = mapper.map(&obs)?;
        archive.update(
            key.clone(),
            Candidate { trajectory: Vec::new(), score: 0.0, length: 0, snapshot: None, frame: obs.frame.clone(), cell_path: None },
        );
        actors.push(ImActor {
            env,
            rng: ChaCha8Rng::seed_from_u64(master.random()),
            obs,
            trajectory: Vec::new(),
            score: 0.0,
            seen_this_episode: HashSet::from([key]),
        });
    }
    let arch = Architecture { obs_dim: actors[0].env.feature_width(), goal_dim: 0, hidden: cfg.hidden, n_actions: actors[0].env.num_actions() };
    let mut model = PolicyModel::new(arch, master.random());
    let mut opt = OptimizerState::new(model.params.len());
    let mut counts: HashMap<CellKey, u64> = HashMap::new();
    let mut log = vec![DiscoveryRow { frames: 0, cells: archive.cell_count(), best_score: None }];
    let mut wall = vec![started.elapsed().as_secs_f64()];
    while archive.frame_budget_used < cfg.frame_budget {
        let batches: Vec<Result<ImBatch, ExploreError>> =
            actors.par_iter_mut().map(|a| a.collect(&model, &mapper, &counts, cfg)).collect();
        let mut rollouts = Vec::with_capacity(batches.len());
        for b in batches {
            let b = b?;
            for (key, c) in b.candidates {
                archive.update(key, c);
            }
            for key in b.new_visits {
                *counts.entry(key).or_insert(0) += 1;
            }
            rollouts.push(b.rollout);
        }
        let samples = prepare_ppo(&rollouts, cfg.weights.gamma, cfg.weights.lambda, cfg.optimizer.normalize_advantages);
        train_step(&mut model, &samples, &[], &cfg.weights, &cfg.optimizer, &mut opt, &mut master)
            .map_err(|e| ExploreError::Training(e.to_string()))?;
        archive.frame_budget_used += (cfg.n_actors * cfg.steps_per_batch) as u64;
        log.push(DiscoveryRow { frames: archive.frame_budget_used, cells: archive.cell_count(), best_score: archive.best_end_of_episode_score() });
        wall.push(started.elapsed().as_secs_f64());
    }
    Ok(ExplorationResult { frames_used: archive.frame_budget_used, archive, mapper, discovery_log: log, wall_seconds: wall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, EnvConfig, GridWorld};
    use std::collections::BTreeSet;

    fn open3() -> EnvConfig {
        EnvConfig::open_grid(3, 3)
    }

    #[test]
    fn repeat_prob_extremes() {
        let mut env = make_env(&EnvConfig::open_grid(9, 9)).unwrap();
        env.reset();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = explore_from(&mut env, 50, 1.0, &mut rng).unwrap();
        assert!(t.iter().all(|x| x.action == t[0].action));
        let mut counts = [0usize; 5];
        for _ in 0..2000 {
            counts[random_action(Some(0), 5, 0.0, &mut rng)] += 1;
        }
        assert!(counts.iter().all(|&c| c > 300), "{counts:?}");
    }

    #[test]
    fn early_stop_on_done() {
        let mut cfg = open3();
        cfg.max_episode_steps = 12;
        let mut env = make_env(&cfg).unwrap();
        env.reset();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = explore_from(&mut env, 100, 0.5, &mut rng).unwrap();
        assert_eq!(t.len(), 12);
        assert!(t.last().unwrap().done);
    }

    #[test]
    fn zero_budget_keeps_reset_cell() {
        let cfg = open3();
        let res = run_exploration_phase(|| make_env(&cfg), CellMapper::domain(1, 1), ExploreConfig::new(0, 1)).unwrap();
        assert_eq!(res.archive.len(), 1);
        assert_eq!(res.frames_used, 0);
        assert_eq!(res.discovery_log.len(), 1);
    }

    fn reachable_cells(env: &GridWorld, mapper: &CellMapper) -> BTreeSet<CellKey> {
        env.enumerate_reachable()
            .into_iter()
            .filter(|s| !s.observation.done)
            .map(|s| mapper.map(&s.observation).unwrap())
            .collect()
    }

    #[test]
    fn open_grid_covers_bfs_set_and_frames_add_up() {
        let cfg = open3();
        let mapper = CellMapper::domain(1, 1);
        let mut ec = ExploreConfig::new(20_000, 7);
        ec.batch_size = 10;
        ec.explore_steps = 30;
        let mut ex = Explorer::new(|| make_env(&cfg), mapper.clone(), ec).unwrap();
        ex.run(|_| Ok(())).unwrap();
        assert_eq!(ex.frames_used(), 20_000);
        assert!(ex.snapshot_mismatches().unwrap().is_empty());
        let got: BTreeSet<_> = ex.archive.cells().map(|r| r.key.clone()).collect();
        assert_eq!(got, reachable_cells(&make_env(&cfg).unwrap(), &mapper));
        let log = &ex.discovery_log;
        assert!(log.windows(2).all(|w| w[0].frames <= w[1].frames && w[0].cells <= w[1].cells));
    }

    #[test]
    fn trajectories_replay_to_their_cells() {
        let cfg = EnvConfig::key_door_world(4, 4, 2, 5);
        let mapper = CellMapper::domain(1, 1);
        let mut ec = ExploreConfig::new(30_000, 2);
        ec.batch_size = 20;
        ec.explore_steps = 40;
        let res = run_exploration_phase(|| make_env(&cfg), mapper.clone(), ec).unwrap();
        let mut env = make_env(&cfg).unwrap();
        for rec in res.archive.records.values() {
            let mut obs = env.reset();
            let mut score = 0.0;
            for &a in &rec.trajectory {
                let s = env.step(a as usize).unwrap();
                score += s.reward;
                obs = s.observation;
            }
            assert_eq!(score, rec.score);
            assert_eq!(rec.trajectory.len() as u32, rec.length);
            let key = if obs.done { CellKey::EpisodeEnd } else { mapper.map(&obs).unwrap() };
            assert_eq!(key, rec.key);
        }
    }

    #[test]
    fn same_seed_same_log() {
        let cfg = EnvConfig::deceptive_maze(5, 5, 3);
        let run = || {
            let mut ec = ExploreConfig::new(15_000, 11);
            ec.explore_steps = 30;
            run_exploration_phase(|| make_env(&cfg), CellMapper::domain(1, 1), ec).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.discovery_log, b.discovery_log);
        assert_eq!(a.archive, b.archive);
    }

    #[test]
    fn pixel_mode_recomputes_and_stays_consistent() {
        let cfg = EnvConfig::pixel_maze(5, 5, 1);
        let mut ec = ExploreConfig::new(20_000, 4);
        ec.batch_size = 10;
        ec.explore_steps = 20;
        ec.recompute_every = 20;
        ec.sample_prob = 0.2;
        ec.search_iterations = 50;
        let start = crate::cellmap::DownscaleParams::new(11, 8, 8);
        let mut ex = Explorer::new(|| make_env(&cfg), CellMapper::Downscale { params: start }, ec).unwrap();
        ex.run(|_| Ok(())).unwrap();
        assert!(ex.archive.cell_count() >= 1);
        assert_eq!(ex.archive.params, ex.mapper.params());
        assert!(ex.snapshot_mismatches().unwrap().is_empty());
    }

    #[test]
    fn intrinsic_reward_values() {
        assert_eq!(intrinsic_reward(1), 1.0);
        assert_eq!(intrinsic_reward(4), 0.5);
    }

    #[test]
    fn im_baseline_runs_and_logs() {
        let cfg = EnvConfig::deceptive_maze(5, 5, 1);
        let mut ic = ImConfig::new(4096, 3);
        ic.n_actors = 4;
        ic.hidden = [8, 8];
        let res = im_baseline(|| make_env(&cfg), CellMapper::domain(1, 1), &ic).unwrap();
        assert_eq!(res.frames_used, 4096);
        assert_eq!(res.discovery_log.len(), 9);
        assert!(res.archive.cell_count() > 1);
    }

    #[test]
    fn csv_has_no_timing() {
        let rows = vec![DiscoveryRow { frames: 0, cells: 1, best_score: None }, DiscoveryRow { frames: 10, cells: 3, best_score: Some(1.5) }];
        assert_eq!(discovery_csv(&rows, 0xab), "# env=00000000000000ab\nframes,cells,best_score\n0,1,\n10,3,1.5\n");
    }
}
