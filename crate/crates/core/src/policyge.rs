//! Policy-based exploration for stochastic environments. A goal-conditioned
//! policy returns to an archived cell by following that cell's trajectory of
//! cells, then explores either with the policy or with random actions.
//! Nothing is restored, so the environment may be sticky.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::archive::{Archive, ArchiveError, Candidate, PathHop, SelectionWeightConfig, UpdateOutcome, WeightMode};
use crate::cellmap::{CellError, CellKey, CellMapper};
use crate::env::{EnvConfig, EnvError, Environment, Observation};
use crate::explorer::random_action;
use crate::learner::{
    discounted_returns, log_softmax, prepare_ppo, sample_action, softmax, train_step, Architecture, LearnerError, LossWeights,
    OptimizerConfig, OptimizerState, PolicyModel, Rollout, SilSample, StepRecord,
};

pub const TRAJECTORY_WINDOW: usize = 10;
pub const HOP_REWARD: f64 = 1.0;
pub const FINAL_REWARD: f64 = 3.0;

#[derive(Debug, Error)]
pub enum PolicyGeError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("invalid policy-based config: {0}")]
    Config(String),
    #[error("cell {0} cannot be encoded as a goal")]
    BadGoal(String),
}

/// Layout of the goal input: one one-hot block per cell attribute
/// (room, x bucket, y bucket, key count, level).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoalEncoding {
    pub rooms: usize,
    pub x_buckets: usize,
    pub y_buckets: usize,
    pub key_counts: usize,
    pub levels: usize,
}

impl GoalEncoding {
    pub fn new(env: &EnvConfig, mapper: &CellMapper) -> Result<Self, PolicyGeError> {
        let CellMapper::Domain { bucket_x, bucket_y } = *mapper else {
            return Err(PolicyGeError::Config("policy-based exploration needs domain cells".into()));
        };
        Ok(Self {
            rooms: env.n_rooms,
            x_buckets: env.width.div_ceil(bucket_x.max(1) as usize),
            y_buckets: env.height.div_ceil(bucket_y.max(1) as usize),
            key_counts: env.n_rooms + 1,
            levels: env.n_levels as usize,
        })
    }

    fn sizes(&self) -> [usize; 5] {
        [self.rooms, self.x_buckets, self.y_buckets, self.key_counts, self.levels]
    }

    pub fn width(&self) -> usize {
        self.sizes().iter().sum()
    }

    fn indices(&self, cell: &CellKey) -> Option<[usize; 5]> {
        let CellKey::Domain { room, x, y, keys, level } = cell else {
            return None;
        };
        let idx = [*room as usize, *x as usize, *y as usize, keys.len(), *level as usize];
        idx.iter().zip(self.sizes()).all(|(i, n)| *i < n).then_some(idx)
    }

    pub fn contains(&self, cell: &CellKey) -> bool {
        self.indices(cell).is_some()
    }

    pub fn encode(&self, cell: &CellKey) -> Result<Vec<f64>, PolicyGeError> {
        let idx = self.indices(cell).ok_or_else(|| PolicyGeError::BadGoal(cell.encode()))?;
        let mut v = vec![0.0; self.width()];
        let mut offset = 0;
        for (i, n) in idx.iter().zip(self.sizes()) {
            v[offset + i] = 1.0;
            offset += n;
        }
        Ok(v)
    }

    /// Cells one bucket away in exactly one of x and y, with the same room,
    /// level and keys. Empty for cells outside the layout.
    pub fn adjacent(&self, cell: &CellKey) -> Vec<CellKey> {
        let Some(_) = self.indices(cell) else {
            return Vec::new();
        };
        let CellKey::Domain { room, x, y, keys, level } = cell else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(4);
        let mut push = |nx: i64, ny: i64| {
            if nx >= 0 && ny >= 0 && (nx as usize) < self.x_buckets && (ny as usize) < self.y_buckets {
                out.push(CellKey::Domain { room: *room, x: nx as u32, y: ny as u32, keys: keys.clone(), level: *level });
            }
        };
        let (x, y) = (i64::from(*x), i64::from(*y));
        push(x - 1, y);
        push(x + 1, y);
        push(x, y - 1);
        push(x, y + 1);
        out
    }
}

/// Drops consecutive duplicates.
pub fn collapse<T: PartialEq + Clone>(cells: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(cells.len());
    for c in cells {
        if out.last() != Some(c) {
            out.push(c.clone());
        }
    }
    out
}

/// A cell trajectory followed with a look-ahead window.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTrajectory {
    pub cells: Vec<CellKey>,
    /// Actions the archived trajectory spent between consecutive cells.
    pub hop_steps: Vec<u32>,
    pub cursor: usize,
    pub window: usize,
}

impl SoftTrajectory {
    pub fn new(hops: &[PathHop], window: usize) -> Self {
        let mut cells: Vec<CellKey> = Vec::with_capacity(hops.len());
        let mut hop_steps: Vec<u32> = Vec::with_capacity(hops.len());
        for h in hops {
            if cells.last() == Some(&h.cell) {
                *hop_steps.last_mut().unwrap() += h.steps;
            } else {
                cells.push(h.cell.clone());
                hop_steps.push(h.steps);
            }
        }
        Self { cells, hop_steps, cursor: 0, window: window.max(1) }
    }

    pub fn goal(&self) -> Option<&CellKey> {
        self.cells.get(self.cursor)
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.cells.len()
    }

    /// Steps the archived trajectory needed to reach the current goal.
    pub fn hop_budget(&self) -> u32 {
        self.hop_steps.get(self.cursor).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalUpdate {
    Miss,
    Advanced { cursor: usize },
    Done,
}

impl GoalUpdate {
    pub fn reward(&self) -> f64 {
        match self {
            GoalUpdate::Miss => 0.0,
            GoalUpdate::Advanced { .. } => HOP_REWARD,
            GoalUpdate::Done => FINAL_REWARD,
        }
    }
}

/// Checks `reached` against the window starting at the cursor. On a match
/// the cursor jumps past the last occurrence of the matched cell.
pub fn soft_goal_update(traj: &mut SoftTrajectory, reached: &CellKey) -> GoalUpdate {
    let n = traj.cells.len();
    if traj.cursor >= n {
        return GoalUpdate::Miss;
    }
    let end = (traj.cursor + traj.window).min(n);
    match (traj.cursor..end).rev().find(|&i| traj.cells[i] == *reached) {
        None => GoalUpdate::Miss,
        Some(i) if i + 1 == n => {
            traj.cursor = n;
            GoalUpdate::Done
        }
        Some(i) => {
            traj.cursor = i + 1;
            GoalUpdate::Advanced { cursor: i + 1 }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyConfig {
    pub increase_factor: f64,
    pub increase_power: f64,
    /// Exploring steps without a new cell before the entropy starts rising.
    pub explore_threshold: u64,
    /// Steps past the threshold after which the episode is abandoned.
    pub max_stall: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { increase_factor: 0.01, increase_power: 2.0, explore_threshold: 50, max_stall: 1000 }
    }
}

/// Divisor applied to the logits: 1 + (max(0, t - threshold) * e_f)^e_p.
pub fn entropy_scale(t_hat: f64, threshold: f64, cfg: &EntropyConfig) -> f64 {
    1.0 + ((t_hat - threshold).max(0.0) * cfg.increase_factor).powf(cfg.increase_power)
}

/// Weighted sampler over the real cells of an archive.
#[derive(Debug, Clone)]
pub struct CellSelector {
    keys: Vec<CellKey>,
    dist: WeightedIndex<f64>,
}

impl CellSelector {
    pub fn new(archive: &Archive, cfg: &SelectionWeightConfig) -> Result<Self, ArchiveError> {
        let weighted = archive.selection_weights(cfg)?;
        if let Some((key, w)) = weighted.iter().find(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(ArchiveError::BadWeight { key: key.encode(), weight: *w });
        }
        let dist = WeightedIndex::new(weighted.iter().map(|(_, w)| *w)).map_err(|_| ArchiveError::Empty)?;
        Ok(Self { keys: weighted.into_iter().map(|(k, _)| k).collect(), dist })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &CellKey {
        &self.keys[self.dist.sample(rng)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalRule {
    UnseenNeighbour,
    Neighbour,
    Archive,
}

/// Probabilities of the first two goal rules; the archive rule gets the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalRuleProbs {
    pub unseen_neighbour: f64,
    pub neighbour: f64,
}

impl Default for GoalRuleProbs {
    fn default() -> Self {
        Self { unseen_neighbour: 0.1, neighbour: 0.225 }
    }
}

/// Picks an exploration goal near `current`. When every neighbour is
/// already archived, the unseen-neighbour mass is shared by the other two
/// rules in proportion.
pub fn choose_exploration_goal<R: Rng + ?Sized>(
    archive: &Archive,
    selector: &CellSelector,
    encoding: &GoalEncoding,
    current: &CellKey,
    probs: GoalRuleProbs,
    rng: &mut R,
) -> (GoalRule, CellKey) {
    let neighbours = encoding.adjacent(current);
    let unseen: Vec<&CellKey> = neighbours.iter().filter(|c| !archive.contains(c)).collect();
    let p_rest = 1.0 - probs.unseen_neighbour - probs.neighbour;
    let u = rng.random::<f64>();
    let rule = if !unseen.is_empty() {
        if u < probs.unseen_neighbour {
            GoalRule::UnseenNeighbour
        } else if u < probs.unseen_neighbour + probs.neighbour {
            GoalRule::Neighbour
        } else {
            GoalRule::Archive
        }
    } else if !neighbours.is_empty() && u < probs.neighbour / (probs.neighbour + p_rest) {
        GoalRule::Neighbour
    } else {
        GoalRule::Archive
    };
    let goal = match rule {
        GoalRule::UnseenNeighbour => unseen[rng.random_range(0..unseen.len())].clone(),
        GoalRule::Neighbour => neighbours[rng.random_range(0..neighbours.len())].clone(),
        GoalRule::Archive => selector.sample(rng).clone(),
    };
    (rule, goal)
}

/// Phase an agent step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Return,
    PolicyExplore,
    RandomExplore,
}

/// Fair-coin style commitment for one explore step.
pub fn choose_explore_phase<R: Rng + ?Sized>(policy_prob: f64, rng: &mut R) -> Phase {
    if rng.random::<f64>() < policy_prob {
        Phase::PolicyExplore
    } else {
        Phase::RandomExplore
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGeConfig {
    pub n_actors: usize,
    /// SIL replay steps per iteration, in units of `steps_per_batch`.
    pub n_sil_actors: usize,
    pub steps_per_batch: usize,
    pub frame_budget: u64,
    pub seed: u64,
    pub hidden: [usize; 2],
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub selection: SelectionWeightConfig,
    pub window: usize,
    pub entropy: EntropyConfig,
    pub goal_rules: GoalRuleProbs,
    /// Steps before an unmet exploration goal is replaced.
    pub regoal_steps: u64,
    pub policy_explore_prob: f64,
    pub action_repeat_prob: f64,
    pub reward_clip: f64,
}

impl PolicyGeConfig {
    pub fn new(frame_budget: u64, seed: u64) -> Self {
        Self {
            n_actors: 16,
            n_sil_actors: 1,
            steps_per_batch: 128,
            frame_budget,
            seed,
            hidden: [64, 64],
            weights: LossWeights::policy_based(),
            optimizer: OptimizerConfig::default(),
            selection: SelectionWeightConfig::new(WeightMode::PolicyBased),
            window: TRAJECTORY_WINDOW,
            entropy: EntropyConfig::default(),
            goal_rules: GoalRuleProbs::default(),
            regoal_steps: 100,
            policy_explore_prob: 0.5,
            action_repeat_prob: 0.95,
            reward_clip: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyGeError> {
        let bad = |m: &str| Err(PolicyGeError::Config(m.to_string()));
        if self.n_actors == 0 || self.steps_per_batch == 0 || self.window == 0 || self.regoal_steps == 0 {
            return bad("n_actors, steps_per_batch, window and regoal_steps must be positive");
        }
        let p = self.goal_rules;
        if !(p.unseen_neighbour >= 0.0 && p.neighbour >= 0.0 && p.unseen_neighbour + p.neighbour < 1.0) {
            return bad("goal rule probabilities must be non-negative and sum below 1");
        }
        if !(0.0..=1.0).contains(&self.policy_explore_prob) || !(0.0..=1.0).contains(&self.action_repeat_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        let e = self.entropy;
        if !(e.increase_factor > 0.0 && e.increase_power > 0.0 && e.max_stall > 0) {
            return bad("entropy parameters must be positive");
        }
        if !(self.reward_clip > 0.0) {
            return bad("reward_clip must be positive");
        }
        self.weights.validate()?;
        Ok(())
    }
}

enum Mode {
    Return { traj: SoftTrajectory, goal_input: Vec<f64>, since_progress: u64 },
    Policy { goal: CellKey, goal_input: Vec<f64>, goal_steps: u64 },
    Random { previous: Option<usize> },
}

struct Episode {
    mode: Mode,
    actions: Vec<u8>,
    score: f64,
    path: Vec<PathHop>,
    cell: CellKey,
    since_hop: u32,
    since_new: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundStats {
    pub return_successes: u64,
    pub return_failures: u64,
    pub policy_episodes: u64,
    pub random_episodes: u64,
}

impl RoundStats {
    fn add(&mut self, o: &RoundStats) {
        self.return_successes += o.return_successes;
        self.return_failures += o.return_failures;
        self.policy_episodes += o.policy_episodes;
        self.random_episodes += o.random_episodes;
    }
}

struct Shared<'a> {
    model: &'a PolicyModel,
    archive: &'a Archive,
    selector: &'a CellSelector,
    encoding: &'a GoalEncoding,
    mapper: &'a CellMapper,
    cfg: &'a PolicyGeConfig,
}

struct RoundOutput {
    rollout: Rollout,
    candidates: IndexMap<CellKey, (Phase, Candidate)>,
    visits: HashMap<CellKey, u64>,
    stats: RoundStats,
}

struct Actor<E> {
    env: E,
    rng: ChaCha8Rng,
    obs: Observation,
    episode: Option<Episode>,
}

/// The trajectory to follow back to `target`. Records without a cell path
/// (for instance from restore-based exploration) become a single hop.
fn trajectory_to(archive: &Archive, target: &CellKey, window: usize) -> SoftTrajectory {
    match archive.get(target) {
        Some(rec) => match &rec.cell_path {
            Some(path) => SoftTrajectory::new(path, window),
            None => SoftTrajectory::new(&[PathHop { cell: target.clone(), steps: rec.length }], window),
        },
        None => SoftTrajectory::new(&[], window),
    }
}

fn goal_input(obs: &[f64], goal: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.len() + goal.len());
    x.extend_from_slice(obs);
    x.extend_from_slice(goal);
    x
}

impl<E: Environment> Actor<E> {
    fn begin(&mut self, sh: &Shared<'_>, stats: &mut RoundStats) -> Result<(), PolicyGeError> {
        self.obs = self.env.reset();
        let cell = sh.mapper.map(&self.obs)?;
        let target = sh.selector.sample(&mut self.rng).clone();
        let traj = trajectory_to(sh.archive, &target, sh.cfg.window);
        let mut ep = Episode {
            mode: Mode::Random { previous: None },
            actions: Vec::new(),
            score: 0.0,
            path: Vec::new(),
            cell,
            since_hop: 0,
            since_new: 0,
        };
        match traj.goal() {
            Some(goal) => {
                let goal_input = sh.encoding.encode(goal)?;
                ep.mode = Mode::Return { traj, goal_input, since_progress: 0 };
            }
            None => self.commit(sh, &mut ep, stats)?,
        }
        self.episode = Some(ep);
        Ok(())
    }

    fn commit(&mut self, sh: &Shared<'_>, ep: &mut Episode, stats: &mut RoundStats) -> Result<(), PolicyGeError> {
        ep.since_new = 0;
        match choose_explore_phase(sh.cfg.policy_explore_prob, &mut self.rng) {
            Phase::PolicyExplore => {
                stats.policy_episodes += 1;
                ep.mode = self.policy_goal(sh, &ep.cell)?;
            }
            _ => {
                stats.random_episodes += 1;
                ep.mode = Mode::Random { previous: None };
            }
        }
        Ok(())
    }

    fn policy_goal(&mut self, sh: &Shared<'_>, current: &CellKey) -> Result<Mode, PolicyGeError> {
        let (_, goal) = choose_exploration_goal(sh.archive, sh.selector, sh.encoding, current, sh.cfg.goal_rules, &mut self.rng);
        let goal_input = sh.encoding.encode(&goal)?;
        Ok(Mode::Policy { goal, goal_input, goal_steps: 0 })
    }

    fn collect(&mut self, sh: &Shared<'_>) -> Result<RoundOutput, PolicyGeError> {
        let cfg = sh.cfg;
        let mut out = RoundOutput {
            rollout: Rollout::default(),
            candidates: IndexMap::new(),
            visits: HashMap::new(),
            stats: RoundStats::default(),
        };
        let n_actions = self.env.num_actions();
        for _ in 0..cfg.steps_per_batch {
            if self.episode.is_none() {
                self.begin(sh, &mut out.stats)?;
            }
            let mut ep = self.episode.take().unwrap();
            let policy_step = match &ep.mode {
                Mode::Return { traj, goal_input: g, since_progress } => {
                    let temp = entropy_scale(*since_progress as f64, f64::from(traj.hop_budget()), &cfg.entropy);
                    Some((goal_input(&self.obs.features, g), temp))
                }
                Mode::Policy { goal_input: g, .. } => {
                    let temp = entropy_scale(ep.since_new as f64, cfg.entropy.explore_threshold as f64, &cfg.entropy);
                    Some((goal_input(&self.obs.features, g), temp))
                }
                Mode::Random { .. } => None,
            };
            let (action, record) = match policy_step {
                Some((input, temp)) => {
                    let f = sh.model.forward_input(&input);
                    let action = sample_action(&softmax(&f.logits, temp), &mut self.rng);
                    let logp = log_softmax(&f.logits, temp)[action];
                    (action, Some((input, temp, logp, f.value)))
                }
                None => {
                    let Mode::Random { previous } = &mut ep.mode else { unreachable!() };
                    let a = random_action(*previous, n_actions, cfg.action_repeat_prob, &mut self.rng);
                    *previous = Some(a);
                    (a, None)
                }
            };
            let r = self.env.step(action)?;
            *out.visits.entry(ep.cell.clone()).or_insert(0) += 1;
            ep.actions.push(action as u8);
            ep.score += r.reward;
            let key = if r.done { CellKey::EpisodeEnd } else { sh.mapper.map(&r.observation)? };
            ep.since_hop += 1;
            if !r.done && key != ep.cell {
                ep.path.push(PathHop { cell: key.clone(), steps: ep.since_hop });
                ep.since_hop = 0;
            }
            let novel = !sh.archive.contains(&key) && !out.candidates.contains_key(&key);
            let phase = match ep.mode {
                Mode::Return { .. } => Phase::Return,
                Mode::Policy { .. } => Phase::PolicyExplore,
                Mode::Random { .. } => Phase::RandomExplore,
            };
            offer(&mut out.candidates, sh.archive, &key, &ep, phase, r.observation.frame.clone());

            let mut shaped = 0.0;
            let mut cut = false;
            let mut ended = r.done;
            match &mut ep.mode {
                Mode::Return { traj, goal_input: g, since_progress } => {
                    let upd = if r.done { GoalUpdate::Miss } else { soft_goal_update(traj, &key) };
                    shaped = upd.reward();
                    match upd {
                        GoalUpdate::Done => {
                            out.stats.return_successes += 1;
                            cut = true;
                        }
                        GoalUpdate::Advanced { .. } => {
                            *since_progress = 0;
                            *g = sh.encoding.encode(traj.goal().unwrap())?;
                        }
                        GoalUpdate::Miss => {
                            *since_progress += 1;
                            if *since_progress > u64::from(traj.hop_budget()) + cfg.entropy.max_stall {
                                ended = true;
                            }
                            if ended {
                                out.stats.return_failures += 1;
                            }
                        }
                    }
                }
                Mode::Policy { goal, goal_steps, .. } => {
                    *goal_steps += 1;
                    if !r.done && key == *goal && key != ep.cell {
                        shaped = HOP_REWARD;
                    }
                }
                Mode::Random { .. } => {}
            }
            if !matches!(ep.mode, Mode::Return { .. }) {
                ep.since_new = if novel { 0 } else { ep.since_new + 1 };
                if ep.since_new >= cfg.entropy.max_stall {
                    ended = true;
                }
            }
            ep.cell = key;
            if let Some((input, temperature, logp_old, v_old)) = record {
                out.rollout.steps.push(StepRecord {
                    input,
                    action,
                    reward: shaped + r.reward.clamp(-cfg.reward_clip, cfg.reward_clip),
                    done: ended || cut,
                    logp_old,
                    v_old,
                    temperature,
                    trainable: true,
                });
            }
            self.obs = r.observation;
            if ended {
                continue;
            }
            if cut {
                self.commit(sh, &mut ep, &mut out.stats)?;
            } else if let Mode::Policy { goal, goal_steps, .. } = &ep.mode {
                if *goal == ep.cell || *goal_steps >= cfg.regoal_steps {
                    ep.mode = self.policy_goal(sh, &ep.cell)?;
                }
            }
            self.episode = Some(ep);
        }
        out.rollout.bootstrap_value = match self.episode.as_ref().map(|e| &e.mode) {
            Some(Mode::Return { goal_input: g, .. }) | Some(Mode::Policy { goal_input: g, .. }) => {
                sh.model.forward_input(&goal_input(&self.obs.features, g)).value
            }
            _ => 0.0,
        };
        Ok(out)
    }
}

/// Keeps the best candidate per cell seen by one actor in one round, tagged
/// with the phase that first reached the cell.
fn offer(
    local: &mut IndexMap<CellKey, (Phase, Candidate)>,
    archive: &Archive,
    key: &CellKey,
    ep: &Episode,
    phase: Phase,
    frame: Option<crate::env::GrayFrame>,
) {
    let (score, length) = (ep.score, ep.actions.len() as u32);
    if !archive.would_accept(key, score, length) {
        return;
    }
    let tag = match local.get(key) {
        Some((_, c)) if !crate::archive::is_better(score, length, c.score, c.length) => return,
        Some((t, _)) => *t,
        None => phase,
    };
    let candidate = Candidate {
        trajectory: ep.actions.clone(),
        score,
        length,
        snapshot: None,
        frame: if key.is_episode_end() { None } else { frame },
        cell_path: Some(ep.path.clone()),
    };
    local.insert(key.clone(), (tag, candidate));
}

/// Replays archived action sequences while tracking their cell trajectory,
/// producing goal-conditioned SIL samples. Returns the samples and the
/// number of environment steps taken.
fn sil_replays<E: Environment>(
    env: &mut E,
    sh: &Shared<'_>,
    rng: &mut ChaCha8Rng,
    budget: usize,
) -> Result<(Vec<SilSample>, u64), PolicyGeError> {
    let cfg = sh.cfg;
    let mut samples = Vec::with_capacity(budget);
    let mut steps = 0u64;
    let mut attempts = 0;
    while samples.len() < budget && attempts < budget {
        attempts += 1;
        let target = sh.selector.sample(rng).clone();
        let Some(rec) = sh.archive.get(&target) else { continue };
        let mut traj = trajectory_to(sh.archive, &target, cfg.window);
        if traj.is_done() || rec.trajectory.is_empty() {
            continue;
        }
        let mut obs = env.reset();
        let mut inputs = Vec::new();
        let mut rewards = Vec::new();
        for &a in &rec.trajectory {
            let Some(goal) = traj.goal() else { break };
            inputs.push((goal_input(&obs.features, &sh.encoding.encode(goal)?), a as usize));
            let r = env.step(a as usize)?;
            steps += 1;
            let upd = if r.done { GoalUpdate::Miss } else { soft_goal_update(&mut traj, &sh.mapper.map(&r.observation)?) };
            rewards.push(upd.reward() + r.reward.clamp(-cfg.reward_clip, cfg.reward_clip));
            obs = r.observation;
            if r.done || samples.len() + inputs.len() >= budget {
                break;
            }
        }
        let returns = discounted_returns(&rewards, cfg.weights.gamma);
        for ((input, action), ret) in inputs.into_iter().zip(returns) {
            let v_old = sh.model.forward_input(&input).value;
            samples.push(SilSample { input, action, ret, v_old });
        }
    }
    Ok((samples, steps))
}

/// One iteration of the run: cumulative discovery attribution plus the
/// iteration's own episode statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGeRow {
    pub frames: u64,
    pub cells: usize,
    pub best_score: Option<f64>,
    pub cells_by_return: u64,
    pub cells_by_policy_explore: u64,
    pub cells_by_random_explore: u64,
    pub round: RoundStats,
}

/// Discovery attribution: cells found after the initial archive, by phase.
pub fn attribution_csv(rows: &[PolicyGeRow], env_digest: u64) -> String {
    let mut s = format!("# env={env_digest:016x}\nframes,cells_by_return,cells_by_policy_explore,cells_by_random_explore\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.frames, r.cells_by_return, r.cells_by_policy_explore, r.cells_by_random_explore);
    }
    s
}

/// Per-iteration episode statistics.
pub fn policy_ge_metrics_csv(rows: &[PolicyGeRow]) -> String {
    let mut s = String::from("frames,cells,best_score,return_successes,return_failures,policy_episodes,random_episodes\n");
    for r in rows {
        let best = r.best_score.map(|b| b.to_string()).unwrap_or_default();
        let k = r.round;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.frames, r.cells, best, k.return_successes, k.return_failures, k.policy_episodes, k.random_episodes
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct PolicyGeResult {
    pub archive: Archive,
    pub model: PolicyModel,
    pub frames_used: u64,
    pub log: Vec<PolicyGeRow>,
    pub wall_seconds: Vec<f64>,
}

pub fn run_policy_ge<E, F>(factory: F, mapper: CellMapper, cfg: &PolicyGeConfig) -> Result<PolicyGeResult, PolicyGeError>
where
    E: Environment,
    F: Fn(u64) -> Result<E, EnvError>,
{
    run_policy_ge_with(factory, mapper, cfg, None, |_| Ok(()))
}

/// [`run_policy_ge`] starting from an optional archive and model, with a
/// callback after every iteration.
pub fn run_policy_ge_with<E, F, C>(
    factory: F,
    mapper: CellMapper,
    cfg: &PolicyGeConfig,
    start: Option<(Archive, PolicyModel)>,
    mut on_iter: C,
) -> Result<PolicyGeResult, PolicyGeError>
where
    E: Environment,
    F: Fn(u64) -> Result<E, EnvError>,
    C: FnMut(&PolicyGeResult) -> Result<(), PolicyGeError>,
{
    cfg.validate()?;
    let started = Instant::now();
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut actors = Vec::with_capacity(cfg.n_actors);
    for _ in 0..cfg.n_actors {
        let mut env = factory(master.random())?;
        let obs = env.reset();
        actors.push(Actor { env, rng: ChaCha8Rng::seed_from_u64(master.random()), obs, episode: None });
    }
    let mut sil_env = factory(master.random())?;
    let encoding = GoalEncoding::new(actors[0].env.config(), &mapper)?;
    let arch = Architecture {
        obs_dim: actors[0].env.feature_width(),
        goal_dim: encoding.width(),
        hidden: cfg.hidden,
        n_actions: actors[0].env.num_actions(),
    };
    let fresh_model = PolicyModel::new(arch, master.random());
    let (archive, model) = match start {
        Some((archive, model)) => {
            if model.arch != arch {
                return Err(PolicyGeError::Learner(LearnerError::BadCheckpoint(format!("model shape {:?} != {:?}", model.arch, arch))));
            }
            (archive, model)
        }
        None => {
            let mut archive = Archive::new();
            let obs = &actors[0].obs;
            archive.update(
                mapper.map(obs)?,
                Candidate { trajectory: Vec::new(), score: 0.0, length: 0, snapshot: None, frame: obs.frame.clone(), cell_path: Some(Vec::new()) },
            );
            (archive, fresh_model)
        }
    };
    let mut result = PolicyGeResult { frames_used: archive.frame_budget_used, archive, model, log: Vec::new(), wall_seconds: Vec::new() };
    let mut opt = OptimizerState::new(result.model.params.len());
    let (mut by_return, mut by_policy, mut by_random) = (0u64, 0u64, 0u64);
    while result.frames_used < cfg.frame_budget {
        let selector = CellSelector::new(&result.archive, &cfg.selection)?;
        let sh = Shared { model: &result.model, archive: &result.archive, selector: &selector, encoding: &encoding, mapper: &mapper, cfg };
        let outputs: Vec<Result<RoundOutput, PolicyGeError>> = actors.par_iter_mut().map(|a| a.collect(&sh)).collect();
        let (sil, sil_steps) = sil_replays(&mut sil_env, &sh, &mut master, cfg.n_sil_actors * cfg.steps_per_batch)?;
        let mut rollouts = Vec::with_capacity(outputs.len());
        let mut stats = RoundStats::default();
        let mut updates = Vec::new();
        let mut visits = Vec::new();
        for o in outputs {
            let o = o?;
            rollouts.push(o.rollout);
            stats.add(&o.stats);
            updates.push(o.candidates);
            visits.push(o.visits);
        }
        for (key, (phase, candidate)) in updates.into_iter().flatten() {
            let real = !key.is_episode_end();
            if result.archive.update(key, candidate) == UpdateOutcome::Inserted && real {
                match phase {
                    Phase::Return => by_return += 1,
                    Phase::PolicyExplore => by_policy += 1,
                    Phase::RandomExplore => by_random += 1,
                }
            }
        }
        for v in &visits {
            result.archive.bump_counters(v.iter());
        }
        let ppo = prepare_ppo(&rollouts, cfg.weights.gamma, cfg.weights.lambda, cfg.optimizer.normalize_advantages);
        train_step(&mut result.model, &ppo, &sil, &cfg.weights, &cfg.optimizer, &mut opt, &mut master)?;
        result.frames_used += (cfg.n_actors * cfg.steps_per_batch) as u64 + sil_steps;
        result.archive.frame_budget_used = result.frames_used;
        result.log.push(PolicyGeRow {
            frames: result.frames_used,
            cells: result.archive.cell_count(),
            best_score: result.archive.best_end_of_episode_score(),
            cells_by_return: by_return,
            cells_by_policy_explore: by_policy,
            cells_by_random_explore: by_random,
            round: stats,
        });
        result.wall_seconds.push(started.elapsed().as_secs_f64());
        on_iter(&result)?;
    }
    Ok(result)
}

/// Fraction of `episodes` in which the policy follows `path` from reset to
/// its final cell, under the same entropy and stall rules as training.
pub fn evaluate_return<E, F>(
    model: &PolicyModel,
    factory: F,
    mapper: &CellMapper,
    path: &[PathHop],
    cfg: &PolicyGeConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64, PolicyGeError>
where
    E: Environment,
    F: Fn(u64) -> Result<E, EnvError> + Sync,
{
    let results: Vec<Result<bool, PolicyGeError>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut env = factory(rng.random())?;
            let encoding = GoalEncoding::new(env.config(), mapper)?;
            let mut obs = env.reset();
            let mut traj = SoftTrajectory::new(path, cfg.window);
            let mut since_progress = 0u64;
            while let Some(goal) = traj.goal() {
                let temp = entropy_scale(since_progress as f64, f64::from(traj.hop_budget()), &cfg.entropy);
                let f = model.forward_input(&goal_input(&obs.features, &encoding.encode(goal)?));
                let r = env.step(sample_action(&softmax(&f.logits, temp), &mut rng))?;
                if r.done {
                    return Ok(false);
                }
                match soft_goal_update(&mut traj, &mapper.map(&r.observation)?) {
                    GoalUpdate::Done => return Ok(true),
                    GoalUpdate::Advanced { .. } => since_progress = 0,
                    GoalUpdate::Miss => {
                        since_progress += 1;
                        if since_progress > u64::from(traj.hop_budget()) + cfg.entropy.max_stall {
                            return Ok(false);
                        }
                    }
                }
                obs = r.observation;
            }
            Ok(true)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(results.iter().filter(|&&b| b).count() as f64 / results.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, make_sticky_env};

    fn cell(x: u32) -> CellKey {
        CellKey::domain(0, x, 0, vec![], 0)
    }

    fn hops(xs: &[u32]) -> Vec<PathHop> {
        xs.iter().map(|&x| PathHop { cell: cell(x), steps: 1 }).collect()
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&['A', 'A', 'B', 'B', 'B', 'C']), vec!['A', 'B', 'C']);
        assert_eq!(collapse(&['A', 'B', 'A']), vec!['A', 'B', 'A']);
        assert!(collapse::<u8>(&[]).is_empty());
    }

    #[test]
    fn soft_update_follows_window_and_last_occurrence() {
        let mut t = SoftTrajectory::new(&hops(&(0..20).collect::<Vec<_>>()), 10);
        t.cursor = 5;
        assert_eq!(soft_goal_update(&mut t, &cell(9)), GoalUpdate::Advanced { cursor: 10 });
        assert_eq!(soft_goal_update(&mut t, &cell(25)), GoalUpdate::Miss);
        assert_eq!(soft_goal_update(&mut t, &cell(3)), GoalUpdate::Miss);
        assert_eq!(t.cursor, 10);
        // Cell 20 sits past the window.
        let mut t = SoftTrajectory::new(&hops(&[0, 1, 2, 3, 4, 5, 7, 8, 9, 10, 11, 12]), 10);
        assert_eq!(soft_goal_update(&mut t, &cell(12)), GoalUpdate::Miss);

        let mut t = SoftTrajectory::new(&hops(&[1, 2, 3, 4, 5, 6, 50, 7, 8, 50, 9, 10]), 10);
        assert_eq!(soft_goal_update(&mut t, &cell(50)), GoalUpdate::Advanced { cursor: 10 });

        let mut t = SoftTrajectory::new(&hops(&[1, 2, 3]), 10);
        assert_eq!(soft_goal_update(&mut t, &cell(3)), GoalUpdate::Done);
        assert_eq!(GoalUpdate::Done.reward(), 3.0);
        assert!(t.is_done());
    }

    #[test]
    fn trajectory_sums_steps_of_repeated_hops() {
        let path = vec![
            PathHop { cell: cell(1), steps: 2 },
            PathHop { cell: cell(1), steps: 3 },
            PathHop { cell: cell(2), steps: 4 },
        ];
        let t = SoftTrajectory::new(&path, 10);
        assert_eq!(t.cells, vec![cell(1), cell(2)]);
        assert_eq!(t.hop_steps, vec![5, 4]);
        assert_eq!(t.hop_budget(), 5);
    }

    #[test]
    fn entropy_scale_examples() {
        let c = EntropyConfig::default();
        assert_eq!(entropy_scale(10.0, 50.0, &c), 1.0);
        assert_eq!(entropy_scale(50.0, 50.0, &c), 1.0);
        assert!((entropy_scale(150.0, 50.0, &c) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn encoding_is_one_hot_per_block() {
        let cfg = EnvConfig::key_door_world(5, 4, 2, 0);
        let enc = GoalEncoding::new(&cfg, &CellMapper::domain(1, 1)).unwrap();
        assert_eq!(enc.width(), 2 + 5 + 4 + 3 + 1);
        let v = enc.encode(&CellKey::domain(1, 4, 2, vec![0], 0)).unwrap();
        assert_eq!(v.iter().sum::<f64>(), 5.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2 + 4], 1.0);
        assert_eq!(v[7 + 2], 1.0);
        assert_eq!(v[11 + 1], 1.0);
        assert!(enc.encode(&CellKey::domain(2, 0, 0, vec![], 0)).is_err());
        assert!(enc.encode(&CellKey::EpisodeEnd).is_err());
        assert!(GoalEncoding::new(&cfg, &CellMapper::Downscale { params: crate::cellmap::DownscaleParams::new(4, 4, 8) }).is_err());
    }

    #[test]
    fn adjacency_stays_in_bounds() {
        let cfg = EnvConfig::open_grid(3, 3);
        let enc = GoalEncoding::new(&cfg, &CellMapper::domain(1, 1)).unwrap();
        assert_eq!(enc.adjacent(&CellKey::domain(0, 0, 0, vec![], 0)).len(), 2);
        assert_eq!(enc.adjacent(&CellKey::domain(0, 1, 1, vec![], 0)).len(), 4);
        let one = GoalEncoding::new(&EnvConfig::open_grid(1, 1), &CellMapper::domain(1, 1)).unwrap();
        assert!(one.adjacent(&CellKey::domain(0, 0, 0, vec![], 0)).is_empty());
    }

    fn archive_of(cells: &[CellKey]) -> Archive {
        let mut a = Archive::new();
        for c in cells {
            a.update(c.clone(), Candidate { trajectory: vec![], score: 0.0, length: 0, snapshot: None, frame: None, cell_path: None });
        }
        a
    }

    fn rule_frequencies(archive: &Archive, enc: &GoalEncoding, current: &CellKey, draws: usize) -> [f64; 3] {
        let sel = CellSelector::new(archive, &SelectionWeightConfig::new(WeightMode::PolicyBased)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let (rule, _) = choose_exploration_goal(archive, &sel, enc, current, GoalRuleProbs::default(), &mut rng);
            counts[rule as usize] += 1;
        }
        counts.map(|c| c as f64 / draws as f64)
    }

    #[test]
    fn goal_rule_frequencies() {
        let enc = GoalEncoding::new(&EnvConfig::open_grid(3, 3), &CellMapper::domain(1, 1)).unwrap();
        let centre = CellKey::domain(0, 1, 1, vec![], 0);
        let f = rule_frequencies(&archive_of(&[centre.clone()]), &enc, &centre, 100_000);
        for (got, want) in f.iter().zip([0.1, 0.225, 0.675]) {
            assert!((got - want).abs() < 0.01, "{f:?}");
        }
        let all: Vec<CellKey> = (0..3).flat_map(|x| (0..3).map(move |y| CellKey::domain(0, x, y, vec![], 0))).collect();
        let f = rule_frequencies(&archive_of(&all), &enc, &centre, 100_000);
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 0.25).abs() < 0.01 && (f[2] - 0.75).abs() < 0.01, "{f:?}");
    }

    #[test]
    fn lone_cell_without_neighbours_is_its_own_goal() {
        let enc = GoalEncoding::new(&EnvConfig::open_grid(1, 1), &CellMapper::domain(1, 1)).unwrap();
        let only = CellKey::domain(0, 0, 0, vec![], 0);
        let a = archive_of(&[only.clone()]);
        let sel = CellSelector::new(&a, &SelectionWeightConfig::new(WeightMode::PolicyBased)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(choose_exploration_goal(&a, &sel, &enc, &only, GoalRuleProbs::default(), &mut rng), (GoalRule::Archive, only.clone()));
        }
    }

    #[test]
    fn explore_commitment_is_a_fair_coin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = (0..10_000).filter(|_| choose_explore_phase(0.5, &mut rng) == Phase::PolicyExplore).count();
        assert!((4800..=5200).contains(&n), "{n}");
    }

    fn small_cfg(budget: u64, seed: u64) -> PolicyGeConfig {
        let mut c = PolicyGeConfig::new(budget, seed);
        c.n_actors = 4;
        c.hidden = [16, 16];
        c
    }

    #[test]
    fn attribution_adds_up_and_archive_replays() {
        let env_cfg = EnvConfig::key_door_world(4, 4, 2, 3);
        let mapper = CellMapper::domain(1, 1);
        let res = run_policy_ge(|s| make_sticky_env(&env_cfg, 0.25, s), mapper.clone(), &small_cfg(8_000, 2)).unwrap();
        let last = res.log.last().unwrap();
        assert_eq!(
            (last.cells_by_return + last.cells_by_policy_explore + last.cells_by_random_explore) as usize + 1,
            res.archive.cell_count()
        );
        assert!(res.frames_used >= 8_000);
        assert!(res.log.windows(2).all(|w| w[0].cells <= w[1].cells));
        for rec in res.archive.cells() {
            let path = rec.cell_path.as_ref().unwrap();
            assert_eq!(path.iter().map(|h| h.steps).sum::<u32>() <= rec.length, true);
            if let Some(last) = path.last() {
                assert_eq!(last.cell, rec.key);
            }
        }
        let csv = attribution_csv(&res.log, env_cfg.digest());
        assert_eq!(csv.lines().count(), res.log.len() + 2);
    }

    #[test]
    fn same_seed_same_run() {
        let env_cfg = EnvConfig::key_door_world(4, 4, 1, 1);
        let run = || run_policy_ge(|s| make_sticky_env(&env_cfg, 0.25, s), CellMapper::domain(1, 1), &small_cfg(3_000, 5)).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.archive, b.archive);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn corridor_return_is_learned() {
        let env_cfg = EnvConfig::open_grid(6, 1);
        let mapper = CellMapper::domain(1, 1);
        let far: Vec<PathHop> = hops(&[1, 2, 3, 4, 5]);
        let mut archive = archive_of(&[cell(0)]);
        archive.update(
            cell(5),
            Candidate { trajectory: vec![4; 5], score: 0.0, length: 5, snapshot: None, frame: None, cell_path: Some(far.clone()) },
        );
        let cfg = small_cfg(40_000, 3);
        let probe = make_env(&env_cfg).unwrap();
        let enc = GoalEncoding::new(probe.config(), &mapper).unwrap();
        let arch = Architecture { obs_dim: probe.feature_width(), goal_dim: enc.width(), hidden: cfg.hidden, n_actions: probe.num_actions() };
        let model = PolicyModel::new(arch, 0);
        // Each hop must be made within three steps.
        let mut strict = cfg.clone();
        strict.entropy.max_stall = 2;
        let before = evaluate_return(&model, |_| make_env(&env_cfg), &mapper, &far, &strict, 200, 1).unwrap();
        assert!(before < 0.5, "{before}");
        let res = run_policy_ge_with(|_| make_env(&env_cfg), mapper.clone(), &cfg, Some((archive, model)), |_| Ok(())).unwrap();
        let rate = evaluate_return(&res.model, |_| make_env(&env_cfg), &mapper, &far, &strict, 200, 1).unwrap();
        assert!(rate > 0.95, "{rate}");
    }
}
