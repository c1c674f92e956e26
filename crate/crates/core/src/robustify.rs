//! The backward algorithm: train a policy under sticky actions by starting
//! episodes near the end of demonstrations and moving the start point back as
//! the agent catches up.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::archive::Archive;
use crate::cellmap::CellKey;
use crate::env::{random_noop_start, EnvError, EnvSnapshot, Environment};
use crate::learner::{
    discounted_returns, log_softmax, prepare_ppo, sample_action, softmax, train_step, Architecture, LearnerError,
    LossWeights, OptimizerConfig, OptimizerState, PolicyModel, Rollout, SilSample, StepRecord,
};

#[derive(Debug, Error)]
pub enum RobustifyError {
    #[error("archive has no finished episode to extract a demonstration from")]
    NoFinishedEpisode,
    #[error("no demonstrations given")]
    NoDemos,
    #[error("demonstration rewards are all zero; the reward multiplier is undefined")]
    ZeroValueScale,
    #[error("demonstration action {action} at step {step} is invalid or the episode ended early")]
    BadDemo { step: usize, action: u8 },
    #[error("invalid backward config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub actions: Vec<u8>,
    pub rewards: Vec<f64>,
    /// `snapshots[i]` is the state after `i` actions.
    pub snapshots: Vec<EnvSnapshot>,
    /// `observations[i]` are the features after `i` actions.
    pub observations: Vec<Vec<f64>>,
    pub total_score: f64,
    pub length: usize,
}

impl Demonstration {
    /// Replays `actions` from reset in a deterministic env, recording rewards,
    /// snapshots and observations.
    pub fn replay<E: Environment + ?Sized>(env: &mut E, actions: &[u8]) -> Result<Self, RobustifyError> {
        let obs = env.reset();
        let mut snapshots = vec![env.snapshot()];
        let mut observations = vec![obs.features];
        let mut rewards = Vec::with_capacity(actions.len());
        for (step, &a) in actions.iter().enumerate() {
            if env.is_done() {
                return Err(RobustifyError::BadDemo { step, action: a });
            }
            let r = env.step(a as usize).map_err(|_| RobustifyError::BadDemo { step, action: a })?;
            rewards.push(r.reward);
            snapshots.push(env.snapshot());
            observations.push(r.observation.features);
        }
        Ok(Self {
            actions: actions.to_vec(),
            total_score: rewards.iter().sum(),
            length: actions.len(),
            rewards,
            snapshots,
            observations,
        })
    }

    /// Score still to be collected after `start` actions.
    pub fn remaining_score(&self, start: usize) -> f64 {
        self.rewards[start.min(self.length)..].iter().sum()
    }
}

/// The best finished trajectory in the archive (highest score, then shortest),
/// replayed in `env`.
pub fn extract_demo<E: Environment + ?Sized>(archive: &Archive, env: &mut E) -> Result<Demonstration, RobustifyError> {
    let rec = archive.get(&CellKey::EpisodeEnd).ok_or(RobustifyError::NoFinishedEpisode)?;
    Demonstration::replay(env, &rec.trajectory)
}

/// Fraction of differing actions over the first min(|a|, |b|) positions.
pub fn demo_difference(a: &[u8], b: &[u8]) -> f64 {
    let l = a.len().min(b.len());
    if l == 0 {
        return 0.0;
    }
    a.iter().zip(b).take(l).filter(|(x, y)| x != y).count() as f64 / l as f64
}

/// Greedy diverse selection among the highest-scoring candidates: start from
/// the shortest, then repeatedly add the one with the largest mean difference
/// to those already chosen. Ties go to the lowest index.
pub fn select_diverse_demos(candidates: &[Demonstration], k: usize) -> Vec<Demonstration> {
    let Some(best) = candidates.iter().map(|d| d.total_score).reduce(f64::max) else {
        return Vec::new();
    };
    let successful: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].total_score == best).collect();
    let first = *successful.iter().min_by_key(|&&i| (candidates[i].length, i)).unwrap();
    let mut chosen = vec![first];
    while chosen.len() < k {
        let mut pick: Option<(usize, f64)> = None;
        for &i in &successful {
            if chosen.contains(&i) {
                continue;
            }
            let mean = chosen.iter().map(|&j| demo_difference(&candidates[i].actions, &candidates[j].actions)).sum::<f64>()
                / chosen.len() as f64;
            if pick.is_none_or(|(_, m)| mean > m) {
                pick = Some((i, mean));
            }
        }
        match pick {
            Some((i, _)) => chosen.push(i),
            None => break,
        }
    }
    chosen.into_iter().map(|i| candidates[i].clone()).collect()
}

/// m = C / mean over demos and steps of |discounted return-to-go|.
pub fn reward_multiplier(demos: &[Demonstration], c: f64, gamma: f64) -> Result<f64, RobustifyError> {
    if demos.is_empty() {
        return Err(RobustifyError::NoDemos);
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for d in demos {
        for v in discounted_returns(&d.rewards, gamma) {
            sum += v.abs();
            n += 1;
        }
    }
    if n == 0 || sum == 0.0 {
        return Err(RobustifyError::ZeroValueScale);
    }
    Ok(c / (sum / n as f64))
}

/// ⌊e^{cX}⌋ extra steps after success.
pub fn extra_frames(c: f64, x: f64) -> u64 {
    (c * x).exp().floor() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardConfig {
    pub allowed_lag: usize,
    pub extra_frame_coef: f64,
    pub move_threshold: f64,
    pub n_demos: usize,
    pub virtual_demo: bool,
    pub window_size: usize,
    pub sil_from_start_prob: f64,
    pub reward_target: f64,
    /// Episodes in the rolling success statistic per demo.
    pub success_window: usize,
    /// Episodes required in the window before the start point may move.
    pub min_episodes_to_move: usize,
    /// Rolling success from reset needed to stop early once every start is 0.
    pub converged_success: f64,
    pub n_actors: usize,
    pub n_sil_actors: usize,
    pub steps_per_batch: usize,
    pub frame_budget: u64,
    pub hidden: [usize; 2],
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl BackwardConfig {
    pub fn new(frame_budget: u64, seed: u64) -> Self {
        Self {
            allowed_lag: 10,
            extra_frame_coef: 7.0,
            move_threshold: 0.1,
            n_demos: 10,
            virtual_demo: true,
            window_size: 16,
            sil_from_start_prob: 0.3,
            reward_target: 10.0,
            success_window: 50,
            min_episodes_to_move: 20,
            converged_success: 0.95,
            n_actors: 16,
            n_sil_actors: 1,
            steps_per_batch: 128,
            frame_budget,
            hidden: [64, 64],
            weights: LossWeights::robustification(),
            optimizer: OptimizerConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), RobustifyError> {
        let bad = |m: &str| Err(RobustifyError::Config(m.to_string()));
        if !(self.move_threshold > 0.0 && self.move_threshold <= 1.0) {
            return bad("move_threshold must lie in (0, 1]");
        }
        if self.window_size == 0 || self.n_actors == 0 || self.steps_per_batch == 0 || self.success_window == 0 {
            return bad("window_size, n_actors, steps_per_batch and success_window must be positive");
        }
        if !(0.0..=1.0).contains(&self.sil_from_start_prob) || !(self.reward_target > 0.0) || self.extra_frame_coef < 0.0 {
            return bad("sil_from_start_prob must be a probability, reward_target and extra_frame_coef non-negative");
        }
        self.weights.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartChoice {
    Virtual,
    Demo { index: usize, step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoProgress {
    /// Furthest-back start index; only ever decreases.
    pub max_start: usize,
    pub recent: VecDeque<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardState {
    pub demos: Vec<DemoProgress>,
    pub virtual_demo: bool,
    pub window_size: usize,
    virtual_lengths: VecDeque<f64>,
    demo_lengths: VecDeque<f64>,
    pub reset_recent: VecDeque<bool>,
}

const LENGTH_WINDOW: usize = 100;

fn mean_or_one(v: &VecDeque<f64>) -> f64 {
    if v.is_empty() {
        1.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn push_bounded<T>(q: &mut VecDeque<T>, v: T, cap: usize) {
    q.push_back(v);
    if q.len() > cap {
        q.pop_front();
    }
}

impl BackwardState {
    /// Every demo starts one step before its end.
    pub fn new(demos: &[Demonstration], virtual_demo: bool, window_size: usize) -> Self {
        Self {
            demos: demos
                .iter()
                .map(|d| DemoProgress { max_start: d.length.saturating_sub(1), recent: VecDeque::new() })
                .collect(),
            virtual_demo,
            window_size,
            virtual_lengths: VecDeque::new(),
            demo_lengths: VecDeque::new(),
            reset_recent: VecDeque::new(),
        }
    }

    /// Mean episode lengths (l_v, l_d), 1 before any data.
    pub fn mean_lengths(&self) -> (f64, f64) {
        (mean_or_one(&self.virtual_lengths), mean_or_one(&self.demo_lengths))
    }

    pub fn set_mean_lengths_for_test(&mut self, l_v: f64, l_d: f64) {
        self.virtual_lengths = VecDeque::from(vec![l_v]);
        self.demo_lengths = VecDeque::from(vec![l_d]);
    }

    pub fn virtual_probability(&self) -> f64 {
        if !self.virtual_demo {
            return 0.0;
        }
        if self.demos.is_empty() {
            return 1.0;
        }
        let (l_v, l_d) = self.mean_lengths();
        (1.0 / (self.demos.len() as f64 + 1.0) * (l_d / l_v)).min(1.0)
    }

    pub fn all_at_start(&self) -> bool {
        self.demos.iter().all(|d| d.max_start == 0)
    }
}

/// Picks where the next episode starts.
pub fn sample_start<R: Rng + ?Sized>(state: &BackwardState, rng: &mut R) -> StartChoice {
    let p_virtual = state.virtual_probability();
    if state.demos.is_empty() || (p_virtual > 0.0 && rng.random::<f64>() < p_virtual) {
        return StartChoice::Virtual;
    }
    let index = rng.random_range(0..state.demos.len());
    let max = state.demos[index].max_start;
    let lo = max.saturating_sub(state.window_size);
    StartChoice::Demo { index, step: rng.random_range(lo..=max) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success { at_step: usize },
    Failure,
}

/// Tracks one training episode against its demonstration target.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTracker {
    pub target: f64,
    /// Steps allowed before failure is declared.
    pub deadline: Option<usize>,
    pub extra: u64,
    pub score: f64,
    pub steps: usize,
    pub success_at: Option<usize>,
}

impl EpisodeTracker {
    pub fn for_demo<R: Rng + ?Sized>(demo: &Demonstration, start: usize, allowed_lag: usize, c: f64, rng: &mut R) -> Self {
        let x: f64 = rng.random();
        Self {
            target: demo.remaining_score(start),
            deadline: Some(demo.length - start.min(demo.length) + allowed_lag),
            extra: extra_frames(c, x),
            score: 0.0,
            steps: 0,
            success_at: None,
        }
    }

    /// From reset with no deadline beyond the env's own limit.
    pub fn for_virtual(target: f64) -> Self {
        Self { target, deadline: None, extra: 0, score: 0.0, steps: 0, success_at: None }
    }

    /// Records one step's unscaled reward. Returns true when the episode
    /// should be cut off (failure deadline or success plus extra steps).
    pub fn record(&mut self, reward: f64) -> bool {
        self.score += reward;
        self.steps += 1;
        if self.success_at.is_none() && self.score >= self.target && self.deadline.is_none_or(|d| self.steps <= d) {
            self.success_at = Some(self.steps);
        }
        match (self.success_at, self.deadline) {
            (Some(s), _) => (self.steps - s) as u64 >= self.extra,
            (None, Some(d)) => self.steps >= d,
            (None, None) => false,
        }
    }

    pub fn outcome(&self) -> Outcome {
        match self.success_at {
            Some(at_step) => Outcome::Success { at_step },
            None => Outcome::Failure,
        }
    }
}

/// Outcome of a finished episode's reward sequence started at `start`.
pub fn episode_outcome(rewards: &[f64], demo: &Demonstration, start: usize, allowed_lag: usize) -> Outcome {
    let mut t = EpisodeTracker {
        target: demo.remaining_score(start),
        deadline: Some(demo.length - start.min(demo.length) + allowed_lag),
        extra: u64::MAX,
        score: 0.0,
        steps: 0,
        success_at: None,
    };
    for &r in rewards {
        if t.record(r) {
            break;
        }
    }
    t.outcome()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub choice: StartChoice,
    /// The demo's max_start when the episode was sampled.
    pub frontier: usize,
    pub success: bool,
    pub score: f64,
    pub length: usize,
}

struct Episode {
    choice: StartChoice,
    frontier: usize,
    tracker: EpisodeTracker,
}

struct Actor<E> {
    env: E,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    episode: Option<Episode>,
}

struct Shared<'a> {
    model: &'a PolicyModel,
    state: &'a BackwardState,
    demos: &'a [Demonstration],
    cfg: &'a BackwardConfig,
    multiplier: f64,
    best_score: f64,
}

impl<E: Environment> Actor<E> {
    fn begin(&mut self, sh: &Shared<'_>) -> Result<(), RobustifyError> {
        let choice = sample_start(sh.state, &mut self.rng);
        let (obs, tracker, frontier) = match choice {
            StartChoice::Virtual => (self.env.reset().features, EpisodeTracker::for_virtual(sh.best_score), 0),
            StartChoice::Demo { index, step } => {
                let demo = &sh.demos[index];
                self.env.restore(&demo.snapshots[step])?;
                let t = EpisodeTracker::for_demo(demo, step, sh.cfg.allowed_lag, sh.cfg.extra_frame_coef, &mut self.rng);
                (self.env.observe().features, t, sh.state.demos[index].max_start)
            }
        };
        self.obs = obs;
        self.episode = Some(Episode { choice, frontier, tracker });
        Ok(())
    }

    fn collect(&mut self, sh: &Shared<'_>) -> Result<(Rollout, Vec<EpisodeSummary>), RobustifyError> {
        let mut steps = Vec::with_capacity(sh.cfg.steps_per_batch);
        let mut finished = Vec::new();
        for _ in 0..sh.cfg.steps_per_batch {
            if self.episode.is_none() {
                self.begin(sh)?;
            }
            let out = sh.model.forward_input(&self.obs);
            let probs = softmax(&out.logits, 1.0);
            let action = sample_action(&probs, &mut self.rng);
            let logp = log_softmax(&out.logits, 1.0)[action];
            let r = self.env.step(action)?;
            let ep = self.episode.as_mut().unwrap();
            let cut = ep.tracker.record(r.reward);
            let done = r.done || cut;
            steps.push(StepRecord {
                input: std::mem::replace(&mut self.obs, r.observation.features),
                action,
                reward: r.reward * sh.multiplier,
                done,
                logp_old: logp,
                v_old: out.value,
                temperature: 1.0,
                trainable: true,
            });
            if done {
                let ep = self.episode.take().unwrap();
                finished.push(EpisodeSummary {
                    choice: ep.choice,
                    frontier: ep.frontier,
                    success: matches!(ep.tracker.outcome(), Outcome::Success { .. }),
                    score: ep.tracker.score,
                    length: ep.tracker.steps,
                });
            }
        }
        let bootstrap_value = if self.episode.is_some() { sh.model.forward_input(&self.obs).value } else { 0.0 };
        Ok((Rollout { steps, bootstrap_value }, finished))
    }
}

/// Replays a demonstration segment into SIL samples.
fn sil_samples<R: Rng + ?Sized>(sh: &Shared<'_>, rng: &mut R, budget: usize) -> Vec<SilSample> {
    let mut out = Vec::with_capacity(budget);
    while out.len() < budget && !sh.demos.is_empty() {
        let index = rng.random_range(0..sh.demos.len());
        let demo = &sh.demos[index];
        if demo.length == 0 {
            break;
        }
        let start = if rng.random::<f64>() < sh.cfg.sil_from_start_prob {
            0
        } else {
            let max = sh.state.demos[index].max_start;
            rng.random_range(max.saturating_sub(sh.cfg.window_size)..=max)
        };
        let scaled: Vec<f64> = demo.rewards.iter().map(|r| r * sh.multiplier).collect();
        let returns = discounted_returns(&scaled, sh.cfg.weights.gamma);
        for t in start..demo.length {
            if out.len() >= budget {
                break;
            }
            let input = demo.observations[t].clone();
            let v_old = sh.model.forward_input(&input).value;
            out.push(SilSample { input, action: demo.actions[t] as usize, ret: returns[t], v_old });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumRow {
    pub iteration: u64,
    pub frames: u64,
    pub max_starts: Vec<usize>,
    pub success_rate: f64,
    pub mean_score: f64,
}

pub fn curriculum_csv(rows: &[CurriculumRow]) -> String {
    let mut s = String::from("iteration,frames,max_start,success_rate,mean_score\n");
    for r in rows {
        let starts: Vec<String> = r.max_starts.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.frames, starts.join(";"), r.success_rate, r.mean_score);
    }
    s
}

#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub model: PolicyModel,
    pub state: BackwardState,
    pub frames_used: u64,
    pub converged: bool,
    pub log: Vec<CurriculumRow>,
}

fn apply_summaries(state: &mut BackwardState, cfg: &BackwardConfig, summaries: &[EpisodeSummary]) {
    for s in summaries {
        match s.choice {
            StartChoice::Virtual => {
                push_bounded(&mut state.virtual_lengths, s.length as f64, LENGTH_WINDOW);
                push_bounded(&mut state.reset_recent, s.success, cfg.success_window);
            }
            StartChoice::Demo { index, step } => {
                push_bounded(&mut state.demo_lengths, s.length as f64, LENGTH_WINDOW);
                if step == 0 {
                    push_bounded(&mut state.reset_recent, s.success, cfg.success_window);
                }
                let progress = &mut state.demos[index];
                if s.frontier != progress.max_start {
                    continue;
                }
                push_bounded(&mut progress.recent, s.success, cfg.success_window);
                let rate = progress.recent.iter().filter(|&&b| b).count() as f64 / progress.recent.len() as f64;
                if progress.max_start > 0 && progress.recent.len() >= cfg.min_episodes_to_move && rate >= cfg.move_threshold {
                    progress.max_start = progress.max_start.saturating_sub(state.window_size);
                    progress.recent.clear();
                }
            }
        }
    }
}

fn success_rate(v: &VecDeque<bool>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
    }
}

/// Trains a policy with the backward algorithm on `demos`. With no demos
/// and the virtual demo enabled this is plain PPO from reset.
pub fn run_backward<E, F>(factory: F, demos: &[Demonstration], cfg: &BackwardConfig) -> Result<BackwardResult, RobustifyError>
where
    E: Environment,
    F: Fn(u64) -> Result<E, EnvError>,
{
    run_backward_with(factory, demos, cfg, |_| Ok(()))
}

/// [`run_backward`] with a callback after every iteration (for checkpoints).
pub fn run_backward_with<E, F, C>(factory: F, demos: &[Demonstration], cfg: &BackwardConfig, mut on_iter: C) -> Result<BackwardResult, RobustifyError>
where
    E: Environment,
    F: Fn(u64) -> Result<E, EnvError>,
    C: FnMut(&BackwardResult) -> Result<(), RobustifyError>,
{
    cfg.validate()?;
    if demos.is_empty() && !cfg.virtual_demo {
        return Err(RobustifyError::NoDemos);
    }
    let multiplier = if demos.is_empty() { 1.0 } else { reward_multiplier(demos, cfg.reward_target, cfg.weights.gamma)? };
    let best_score = demos.iter().map(|d| d.total_score).reduce(f64::max).unwrap_or(f64::INFINITY);

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut actors = Vec::with_capacity(cfg.n_actors);
    for _ in 0..cfg.n_actors {
        let env_seed = master.random::<u64>();
        actors.push(Actor { env: factory(env_seed)?, rng: ChaCha8Rng::seed_from_u64(master.random()), obs: Vec::new(), episode: None });
    }
    let obs_dim = actors[0].env.feature_width();
    let arch = Architecture { obs_dim, goal_dim: 0, hidden: cfg.hidden, n_actions: actors[0].env.num_actions() };
    let mut result = BackwardResult {
        model: PolicyModel::new(arch, master.random()),
        state: BackwardState::new(demos, cfg.virtual_demo, cfg.window_size),
        frames_used: 0,
        converged: false,
        log: Vec::new(),
    };
    let mut opt = OptimizerState::new(result.model.params.len());
    let mut iteration = 0u64;
    while result.frames_used < cfg.frame_budget {
        let shared = Shared { model: &result.model, state: &result.state, demos, cfg, multiplier, best_score };
        let collected: Vec<Result<(Rollout, Vec<EpisodeSummary>), RobustifyError>> =
            actors.par_iter_mut().map(|a| a.collect(&shared)).collect();
        let mut rollouts = Vec::with_capacity(collected.len());
        let mut summaries = Vec::new();
        for c in collected {
            let (r, s) = c?;
            rollouts.push(r);
            summaries.extend(s);
        }
        let sil = sil_samples(&shared, &mut master, cfg.n_sil_actors * cfg.steps_per_batch);
        let ppo = prepare_ppo(&rollouts, cfg.weights.gamma, cfg.weights.lambda, cfg.optimizer.normalize_advantages);
        train_step(&mut result.model, &ppo, &sil, &cfg.weights, &cfg.optimizer, &mut opt, &mut master)?;

        apply_summaries(&mut result.state, cfg, &summaries);
        result.frames_used += (cfg.n_actors * cfg.steps_per_batch) as u64;
        iteration += 1;
        let n = summaries.len().max(1) as f64;
        result.log.push(CurriculumRow {
            iteration,
            frames: result.frames_used,
            max_starts: result.state.demos.iter().map(|d| d.max_start).collect(),
            success_rate: summaries.iter().filter(|s| s.success).count() as f64 / n,
            mean_score: summaries.iter().map(|s| s.score).sum::<f64>() / n,
        });
        let reset = &result.state.reset_recent;
        if result.state.all_at_start() && reset.len() >= cfg.success_window && success_rate(reset) >= cfg.converged_success {
            result.converged = true;
        }
        on_iter(&result)?;
        if result.converged {
            break;
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
    pub success_rate: f64,
}

/// Runs `episodes` episodes from reset (after up to `max_noops` random no-ops)
/// sampling from the policy, or acting greedily when `greedy` is set.
/// An episode succeeds when its score reaches `target`.
pub fn evaluate_policy<E, F>(
    model: &PolicyModel,
    factory: F,
    episodes: usize,
    seed: u64,
    max_noops: usize,
    target: f64,
    greedy: bool,
) -> Result<EvalReport, RobustifyError>
where
    E: Environment,
    F: Fn(u64) -> Result<E, EnvError> + Sync,
{
    let scores: Vec<Result<f64, RobustifyError>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut env = factory(rng.random())?;
            env.reset();
            let mut score = 0.0;
            random_noop_start(&mut env, max_noops, &mut rng)?;
            while !env.is_done() {
                let out = model.forward_input(&env.observe().features);
                let action = if greedy {
                    let mut best = 0;
                    for (i, l) in out.logits.iter().enumerate() {
                        if *l > out.logits[best] {
                            best = i;
                        }
                    }
                    best
                } else {
                    sample_action(&softmax(&out.logits, 1.0), &mut rng)
                };
                score += env.step(action)?.reward;
            }
            Ok(score)
        })
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = scores.len().max(1) as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = if scores.len() > 1 { scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(EvalReport {
        success_rate: scores.iter().filter(|&&s| s >= target).count() as f64 / n,
        std_error: (var / n).sqrt(),
        mean,
        scores,
    })
}
