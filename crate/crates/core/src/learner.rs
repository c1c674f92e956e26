//! A small tanh MLP policy/value network with PPO, GAE, entropy, L2 and
//! self-imitation losses and hand-derived gradients.

use std::borrow::Borrow;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const INIT_SCALE: f64 = 0.05;
const GRAD_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("input width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("loss diverged: {loss} exceeds 1000x the initial {initial}")]
    Diverged { loss: f64, initial: f64 },
    #[error("bad model checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("invalid learner config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub obs_dim: usize,
    pub goal_dim: usize,
    pub hidden: [usize; 2],
    pub n_actions: usize,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.goal_dim
    }

    pub fn param_count(&self) -> usize {
        let [h1, h2] = self.hidden;
        h1 * self.input_dim() + h1 + h2 * h1 + h2 + self.n_actions * h2 + self.n_actions + h2 + 1
    }

    fn offsets(&self) -> Offsets {
        let [h1, h2] = self.hidden;
        let w1 = 0;
        let b1 = w1 + h1 * self.input_dim();
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let wp = b2 + h2;
        let bp = wp + self.n_actions * h2;
        let wv = bp + self.n_actions;
        let bv = wv + h2;
        Offsets { w1, b1, w2, b2, wp, bp, wv, bv }
    }
}

#[derive(Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wp: usize,
    bp: usize,
    wv: usize,
    bv: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub value: f64,
}

struct Activations {
    /// Indices of non-zero inputs; observations are mostly one-hot.
    nz: Vec<usize>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
    value: f64,
}

impl PolicyModel {
    /// Uniform initialization in [-0.05, 0.05] from a seeded stream.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..arch.param_count()).map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE)).collect();
        Self { arch, params }
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self { arch, params: vec![0.0; arch.param_count()] }
    }

    /// Concatenates observation and goal into the network input.
    pub fn input(&self, obs: &[f64], goal: Option<&[f64]>) -> Result<Vec<f64>, LearnerError> {
        let goal = goal.unwrap_or(&[]);
        if obs.len() != self.arch.obs_dim || goal.len() != self.arch.goal_dim {
            return Err(LearnerError::WidthMismatch { expected: self.arch.input_dim(), got: obs.len() + goal.len() });
        }
        let mut x = Vec::with_capacity(self.arch.input_dim());
        x.extend_from_slice(obs);
        x.extend_from_slice(goal);
        Ok(x)
    }

    pub fn forward(&self, obs: &[f64], goal: Option<&[f64]>) -> Result<ForwardOutput, LearnerError> {
        let x = self.input(obs, goal)?;
        Ok(self.forward_input(&x))
    }

    /// Forward pass on an already concatenated input.
    pub fn forward_input(&self, x: &[f64]) -> ForwardOutput {
        let a = self.activations(x);
        ForwardOutput { logits: a.logits, value: a.value }
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let arch = &self.arch;
        let o = arch.offsets();
        let p = &self.params;
        let [n1, n2] = arch.hidden;
        let d = arch.input_dim();
        let nz: Vec<usize> = (0..d).filter(|&k| x[k] != 0.0).collect();
        let h1: Vec<f64> = (0..n1)
            .map(|i| {
                let row = &p[o.w1 + i * d..o.w1 + (i + 1) * d];
                (p[o.b1 + i] + nz.iter().map(|&k| row[k] * x[k]).sum::<f64>()).tanh()
            })
            .collect();
        let h2: Vec<f64> = (0..n2).map(|i| (p[o.b2 + i] + dot(&p[o.w2 + i * n1..o.w2 + (i + 1) * n1], &h1)).tanh()).collect();
        let logits = (0..arch.n_actions).map(|i| p[o.bp + i] + dot(&p[o.wp + i * n2..o.wp + (i + 1) * n2], &h2)).collect();
        let value = p[o.bv] + dot(&p[o.wv..o.wv + n2], &h2);
        Activations { nz, h1, h2, logits, value }
    }

    /// Accumulates into `grad` the parameter gradient given dL/dlogits and dL/dV.
    fn backward(&self, x: &[f64], act: &Activations, g_logits: &[f64], g_value: f64, grad: &mut [f64]) {
        let arch = &self.arch;
        let o = arch.offsets();
        let p = &self.params;
        let [n1, n2] = arch.hidden;
        let d = arch.input_dim();
        let mut g_h2 = vec![0.0; n2];
        for (a, &g) in g_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[o.bp + a] += g;
            let row = o.wp + a * n2;
            axpy2(g, &act.h2, &p[row..row + n2], &mut grad[row..row + n2], &mut g_h2);
        }
        grad[o.bv] += g_value;
        axpy2(g_value, &act.h2, &p[o.wv..o.wv + n2], &mut grad[o.wv..o.wv + n2], &mut g_h2);
        let mut g_h1 = vec![0.0; n1];
        for j in 0..n2 {
            let g = g_h2[j] * (1.0 - act.h2[j] * act.h2[j]);
            grad[o.b2 + j] += g;
            let row = o.w2 + j * n1;
            axpy2(g, &act.h1, &p[row..row + n1], &mut grad[row..row + n1], &mut g_h1);
        }
        for i in 0..n1 {
            let g = g_h1[i] * (1.0 - act.h1[i] * act.h1[i]);
            grad[o.b1 + i] += g;
            let row = o.w1 + i * d;
            for &k in &act.nz {
                grad[row + k] += g * x[k];
            }
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), LearnerError> {
        let a = &self.arch;
        writeln!(
            out,
            "#goexplore-model version={MODEL_FORMAT_VERSION} obs={} goal={} hidden={},{} actions={}",
            a.obs_dim, a.goal_dim, a.hidden[0], a.hidden[1], a.n_actions
        )?;
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        writeln!(out, "{}", B64.encode(bytes))?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, LearnerError> {
        let bad = |m: &str| LearnerError::BadCheckpoint(m.to_string());
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))??;
        let rest = header.strip_prefix("#goexplore-model ").ok_or_else(|| bad("missing header"))?;
        let get = |name: &str| -> Result<String, LearnerError> {
            rest.split(' ')
                .find_map(|kv| kv.strip_prefix(name).and_then(|v| v.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("missing {name}")))
        };
        let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad number"));
        if num(get("version")?)? != MODEL_FORMAT_VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let hidden = get("hidden")?;
        let (h1, h2) = hidden.split_once(',').ok_or_else(|| bad("bad hidden"))?;
        let arch = Architecture {
            obs_dim: num(get("obs")?)?,
            goal_dim: num(get("goal")?)?,
            hidden: [num(h1.to_string())?, num(h2.to_string())?],
            n_actions: num(get("actions")?)?,
        };
        let body = lines.next().ok_or_else(|| bad("missing parameters"))??;
        let bytes = B64.decode(body.trim()).map_err(|e| bad(&e.to_string()))?;
        if bytes.len() != arch.param_count() * 8 {
            return Err(bad("parameter count does not match architecture"));
        }
        let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { arch, params })
    }
}

/// grad_w += g * h and g_in += g * w, elementwise.
fn axpy2(g: f64, h: &[f64], w: &[f64], grad_w: &mut [f64], g_in: &mut [f64]) {
    for ((gw, &hv), (gi, &wv)) in grad_w.iter_mut().zip(h).zip(g_in.iter_mut().zip(w)) {
        *gw += g * hv;
        *gi += g * wv;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Softmax of `logits / temperature`, computed stably.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.into_iter().map(|v| v - lse).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Truncated generalized advantage estimation. At a done step the next value
/// is zero; `bootstrap_value` is used only after the last step.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap_value: f64, dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 == n {
            (bootstrap_value, 0.0)
        } else {
            (values[t + 1], next_adv)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    adv
}

/// Discounted return-to-go of a reward sequence.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_vf: f64,
    pub w_ent: f64,
    pub w_l2: f64,
    pub w_sil: f64,
    pub w_sil_vf: f64,
    pub w_sil_ent: f64,
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl LossWeights {
    /// Robustification defaults.
    pub fn robustification() -> Self {
        Self { w_vf: 0.5, w_ent: 1e-5, w_l2: 1e-7, w_sil: 0.1, w_sil_vf: 0.01, w_sil_ent: 1e-5, clip_eps: 0.1, gamma: 0.999, lambda: 0.95 }
    }

    /// Policy-based Go-Explore defaults.
    pub fn policy_based() -> Self {
        Self { w_vf: 0.5, w_ent: 1e-4, w_l2: 1e-7, w_sil: 0.1, w_sil_vf: 0.01, w_sil_ent: 0.0, clip_eps: 0.1, gamma: 0.99, lambda: 0.95 }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(LearnerError::Config("clip_eps must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(LearnerError::Config("gamma and lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One environment step as recorded by an actor.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Network input (observation and goal already concatenated).
    pub input: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub logp_old: f64,
    pub v_old: f64,
    pub temperature: f64,
    /// False for steps that feed advantage estimation but not the loss.
    pub trainable: bool,
}

/// A T-step segment of one actor's experience.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub steps: Vec<StepRecord>,
    pub bootstrap_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub input: Vec<f64>,
    pub action: usize,
    pub logp_old: f64,
    pub v_old: f64,
    pub advantage: f64,
    /// V_old + unnormalized advantage.
    pub ret: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SilSample {
    pub input: Vec<f64>,
    pub action: usize,
    /// Discounted return collected from this state along the stored trajectory.
    pub ret: f64,
    pub v_old: f64,
}

/// Runs GAE per rollout and flattens the trainable steps into PPO samples.
pub fn prepare_ppo(rollouts: &[Rollout], gamma: f64, lambda: f64, normalize: bool) -> Vec<PpoSample> {
    let mut out = Vec::new();
    for r in rollouts {
        let rewards: Vec<f64> = r.steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = r.steps.iter().map(|s| s.v_old).collect();
        let dones: Vec<bool> = r.steps.iter().map(|s| s.done).collect();
        let adv = gae(&rewards, &values, r.bootstrap_value, &dones, gamma, lambda);
        for (s, a) in r.steps.iter().zip(adv) {
            if s.trainable {
                out.push(PpoSample {
                    input: s.input.clone(),
                    action: s.action,
                    logp_old: s.logp_old,
                    v_old: s.v_old,
                    advantage: a,
                    ret: s.v_old + a,
                    temperature: s.temperature,
                });
            }
        }
    }
    if normalize && out.len() > 1 {
        let n = out.len() as f64;
        let mean = out.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = out.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        for s in &mut out {
            s.advantage = (s.advantage - mean) / std;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub pg: f64,
    pub vf: f64,
    pub ent: f64,
    pub l2: f64,
    pub sil_pg: f64,
    pub sil_vf: f64,
    pub sil_ent: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn sil(&self, w: &LossWeights) -> f64 {
        self.sil_pg + w.w_sil_vf * self.sil_vf + w.w_sil_ent * self.sil_ent
    }
}

/// Per-sample PPO terms and their gradients w.r.t. logits and value.
struct PpoTerm {
    pg: f64,
    vf: f64,
    ent: f64,
    g_logits: Vec<f64>,
    g_value: f64,
}

fn ppo_term(s: &PpoSample, out: &Activations, w: &LossWeights, need_grad: bool) -> PpoTerm {
    let t = s.temperature;
    let logp = log_softmax(&out.logits, t);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let eps = w.clip_eps;

    let ratio = (logp[s.action] - s.logp_old).exp();
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    let unclipped_term = -s.advantage * ratio;
    let clipped_term = -s.advantage * clipped;
    let pg = unclipped_term.max(clipped_term);
    // The unclipped branch carries the gradient unless the clipped constant
    // strictly dominates.
    let g_logp = if unclipped_term >= clipped_term { -s.advantage * ratio } else { 0.0 };

    let v = out.value;
    let a = (v - s.ret).powi(2);
    let vc = (v - s.v_old).clamp(-eps, eps) + s.v_old - s.ret;
    let b = vc * vc;
    let vf = a.max(b);
    let g_vf = if a >= b {
        2.0 * (v - s.ret)
    } else if (v - s.v_old).abs() < eps {
        2.0 * vc
    } else {
        0.0
    };

    let h = entropy(&probs);
    let mut g_logits = Vec::new();
    if need_grad {
        g_logits = vec![0.0; probs.len()];
        for i in 0..probs.len() {
            let dlogp = f64::from(u8::from(i == s.action)) - probs[i];
            // L_ENT = -H; dH/dz_i = -p_i (log p_i + H)
            let dneg_h = probs[i] * (logp[i] + h);
            g_logits[i] = (g_logp * dlogp + w.w_ent * dneg_h) / t;
        }
    }
    PpoTerm { pg, vf, ent: -h, g_logits, g_value: w.w_vf * g_vf }
}

struct SilTerm {
    pg: f64,
    vf: f64,
    ent: f64,
    g_logits: Vec<f64>,
    g_value: f64,
}

fn sil_term(s: &SilSample, out: &Activations, w: &LossWeights, need_grad: bool) -> SilTerm {
    let logp = log_softmax(&out.logits, 1.0);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let hinge = (s.ret - s.v_old).max(0.0);
    let pg = -logp[s.action] * hinge;
    let gap = (s.ret - out.value).max(0.0);
    let vf = 0.5 * gap * gap;
    let h = entropy(&probs);
    let mut g_logits = Vec::new();
    if need_grad {
        g_logits = vec![0.0; probs.len()];
        for i in 0..probs.len() {
            let dlogp = f64::from(u8::from(i == s.action)) - probs[i];
            let dneg_h = probs[i] * (logp[i] + h);
            g_logits[i] = w.w_sil * (-hinge * dlogp + w.w_sil_ent * dneg_h);
        }
    }
    SilTerm { pg, vf, ent: -h, g_logits, g_value: w.w_sil * w.w_sil_vf * (-gap) }
}

/// Total loss (and optionally its gradient) over PPO and SIL samples.
/// Each term is a mean over its own sample set.
pub fn loss_and_grad(
    model: &PolicyModel,
    ppo: &[PpoSample],
    sil: &[SilSample],
    w: &LossWeights,
    need_grad: bool,
) -> Result<(LossComponents, Vec<f64>), LearnerError> {
    loss_and_grad_of(model, ppo, sil, w, need_grad)
}

fn loss_and_grad_of<P, S>(model: &PolicyModel, ppo: &[P], sil: &[S], w: &LossWeights, need_grad: bool) -> Result<(LossComponents, Vec<f64>), LearnerError>
where
    P: Borrow<PpoSample> + Sync,
    S: Borrow<SilSample> + Sync,
{
    let n_params = model.params.len();
    let np = ppo.len().max(1) as f64;
    let ns = sil.len().max(1) as f64;

    // Fixed chunking and in-order summation keep results independent of the
    // thread count.
    let ppo_parts: Vec<(f64, f64, f64, Vec<f64>)> = ppo
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = if need_grad { vec![0.0; n_params] } else { Vec::new() };
            let (mut pg, mut vf, mut ent) = (0.0, 0.0, 0.0);
            for s in chunk {
                let s = s.borrow();
                let act = model.activations(&s.input);
                let term = ppo_term(s, &act, w, need_grad);
                pg += term.pg;
                vf += term.vf;
                ent += term.ent;
                if need_grad {
                    let gl: Vec<f64> = term.g_logits.iter().map(|g| g / np).collect();
                    model.backward(&s.input, &act, &gl, term.g_value / np, &mut grad);
                }
            }
            (pg, vf, ent, grad)
        })
        .collect();
    let sil_parts: Vec<(f64, f64, f64, Vec<f64>)> = sil
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = if need_grad { vec![0.0; n_params] } else { Vec::new() };
            let (mut pg, mut vf, mut ent) = (0.0, 0.0, 0.0);
            for s in chunk {
                let s = s.borrow();
                let act = model.activations(&s.input);
                let term = sil_term(s, &act, w, need_grad);
                pg += term.pg;
                vf += term.vf;
                ent += term.ent;
                if need_grad {
                    let gl: Vec<f64> = term.g_logits.iter().map(|g| g / ns).collect();
                    model.backward(&s.input, &act, &gl, term.g_value / ns, &mut grad);
                }
            }
            (pg, vf, ent, grad)
        })
        .collect();

    let mut c = LossComponents::default();
    let mut grad = if need_grad { vec![0.0; n_params] } else { Vec::new() };
    for (pg, vf, ent, g) in &ppo_parts {
        c.pg += pg / np;
        c.vf += vf / np;
        c.ent += ent / np;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    for (pg, vf, ent, g) in &sil_parts {
        c.sil_pg += pg / ns;
        c.sil_vf += vf / ns;
        c.sil_ent += ent / ns;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    c.l2 = model.params.iter().map(|p| p * p).sum();
    if need_grad {
        for (g, p) in grad.iter_mut().zip(&model.params) {
            *g += w.w_l2 * 2.0 * p;
        }
    }
    c.total = c.pg + w.w_vf * c.vf + w.w_ent * c.ent + w.w_l2 * c.l2;
    if !sil.is_empty() {
        c.total += w.w_sil * c.sil(w);
    }
    if !c.total.is_finite() {
        return Err(LearnerError::NonFinite("loss"));
    }
    if need_grad && grad.iter().any(|g| !g.is_finite()) {
        return Err(LearnerError::NonFinite("gradient"));
    }
    Ok((c, grad))
}

/// PPO loss alone (no SIL data).
pub fn ppo_loss(model: &PolicyModel, batch: &[PpoSample], w: &LossWeights) -> Result<(LossComponents, Vec<f64>), LearnerError> {
    loss_and_grad(model, batch, &[], w, true)
}

/// Weighted SIL loss w_SIL * (SIL_PG + w_SIL_VF SIL_VF + w_SIL_ENT SIL_ENT)
/// and its gradient, without PPO or L2 terms.
pub fn sil_loss(model: &PolicyModel, batch: &[SilSample], w: &LossWeights) -> Result<(f64, Vec<f64>), LearnerError> {
    let only_sil = LossWeights { w_l2: 0.0, ..*w };
    let (c, g) = loss_and_grad(model, &[], batch, &only_sil, true)?;
    Ok((c.total, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub max_grad_norm: Option<f64>,
    pub epochs: usize,
    pub minibatches: usize,
    pub normalize_advantages: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            learning_rate: 0.01,
            momentum: 0.9,
            beta2: 0.999,
            max_grad_norm: Some(0.5),
            epochs: 4,
            minibatches: 4,
            normalize_advantages: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    fn apply(&mut self, cfg: &OptimizerConfig, params: &mut [f64], grad: &mut [f64]) {
        if let Some(max) = cfg.max_grad_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grad.iter_mut().for_each(|g| *g *= max / norm);
            }
        }
        self.t += 1;
        match cfg.kind {
            OptimizerKind::Momentum => {
                for ((p, g), m) in params.iter_mut().zip(grad.iter()).zip(self.m.iter_mut()) {
                    *m = cfg.momentum * *m + g;
                    *p -= cfg.learning_rate * *m;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (cfg.momentum, cfg.beta2);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grad.iter()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainStats {
    pub first: LossComponents,
    pub last: LossComponents,
    pub updates: usize,
}

/// Runs `epochs` passes of minibatch gradient descent over the samples.
/// SIL samples are split across the same number of minibatches.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut PolicyModel,
    ppo: &[PpoSample],
    sil: &[SilSample],
    w: &LossWeights,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    rng: &mut R,
) -> Result<TrainStats, LearnerError> {
    if ppo.is_empty() && sil.is_empty() {
        return Ok(TrainStats::default());
    }
    let k = cfg.minibatches.max(1);
    let mut ppo_idx: Vec<usize> = (0..ppo.len()).collect();
    let mut sil_idx: Vec<usize> = (0..sil.len()).collect();
    let mut stats = TrainStats::default();
    let mut initial: Option<f64> = None;
    for _ in 0..cfg.epochs {
        ppo_idx.shuffle(rng);
        sil_idx.shuffle(rng);
        for mb in 0..k {
            let pick = |idx: &[usize], n: usize| -> Vec<usize> { idx[mb * n / k..(mb + 1) * n / k].to_vec() };
            let p: Vec<&PpoSample> = pick(&ppo_idx, ppo.len()).into_iter().map(|i| &ppo[i]).collect();
            let s: Vec<&SilSample> = pick(&sil_idx, sil.len()).into_iter().map(|i| &sil[i]).collect();
            if p.is_empty() && s.is_empty() {
                continue;
            }
            let (c, mut grad) = loss_and_grad_of(model, &p, &s, w, true)?;
            let init = *initial.get_or_insert(c.total);
            if c.total > 1e3 * init.abs().max(1.0) {
                return Err(LearnerError::Diverged { loss: c.total, initial: init });
            }
            if stats.updates == 0 {
                stats.first = c;
            }
            stats.last = c;
            stats.updates += 1;
            state.apply(cfg, &mut model.params, &mut grad);
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(goal: usize) -> Architecture {
        Architecture { obs_dim: 3, goal_dim: goal, hidden: [4, 3], n_actions: 3 }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = PolicyModel::zeros(arch(0));
        let out = m.forward(&[1.0, -2.0, 0.5], None).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(softmax(&out.logits, 1.0), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = PolicyModel::new(arch(2), 0);
        assert!(m.forward(&[0.0; 3], None).is_err());
        assert!(m.forward(&[0.0; 3], Some(&[1.0, 0.0])).is_ok());
    }

    #[test]
    fn high_temperature_approaches_uniform() {
        let p = softmax(&[5.0, -3.0, 1.0], 1e9);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-8));
    }

    #[test]
    fn gae_cases() {
        assert_eq!(gae(&[1.0], &[0.0], 5.0, &[true], 0.99, 0.95), vec![1.0]);
        let r = [1.0, 0.0, 2.0];
        let v = [0.5, 0.2, -0.1];
        let d = [false, false, false];
        let lam0 = gae(&r, &v, 0.3, &d, 0.9, 0.0);
        let delta = [1.0 + 0.9 * 0.2 - 0.5, 0.9 * -0.1 - 0.2, 2.0 + 0.9 * 0.3 + 0.1];
        for (a, b) in lam0.iter().zip(delta) {
            assert!((a - b).abs() < 1e-15);
        }
        let full = gae(&r, &v, 0.3, &d, 0.9, 0.95);
        let gl = 0.9 * 0.95;
        let expect0 = delta[0] + gl * delta[1] + gl * gl * delta[2];
        assert!((full[0] - expect0).abs() < 1e-12);
        // A done in the middle cuts the recursion.
        let cut = gae(&r, &v, 0.3, &[false, true, false], 0.9, 0.95);
        assert!((cut[1] - (0.0 - 0.2)).abs() < 1e-15);
        assert!((cut[0] - (delta[0] + gl * -0.2)).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut m = PolicyModel::new(arch(0), 1);
        let before = m.params.clone();
        let batch = vec![PpoSample { input: vec![1.0, 0.0, 0.0], action: 0, logp_old: -1.0, v_old: 0.0, advantage: 1.0, ret: 1.0, temperature: 1.0 }];
        let cfg = OptimizerConfig { learning_rate: 0.0, ..OptimizerConfig::default() };
        let mut st = OptimizerState::new(m.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(&mut m, &batch, &[], &LossWeights::robustification(), &cfg, &mut st, &mut rng).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn sil_hinges() {
        let m = PolicyModel::new(arch(0), 2);
        let w = LossWeights::robustification();
        let s = SilSample { input: vec![0.1, 0.2, 0.3], action: 1, ret: -5.0, v_old: 0.0 };
        let (c, _) = loss_and_grad(&m, &[], &[s], &w, false).unwrap();
        assert_eq!(c.sil_pg, 0.0);
        assert_eq!(c.sil_vf, 0.0);
    }

    #[test]
    fn clipped_branch_has_zero_pg_gradient() {
        let m = PolicyModel::new(arch(0), 3);
        let input = vec![0.3, -0.2, 0.9];
        let out = m.forward_input(&input);
        let logp = log_softmax(&out.logits, 1.0);
        // logp_old far below current: ratio >> 1 + eps with positive advantage.
        let s = PpoSample { input, action: 0, logp_old: logp[0] - 1.0, v_old: out.value, advantage: 1.0, ret: out.value, temperature: 1.0 };
        let w = LossWeights { w_ent: 0.0, w_vf: 0.0, w_l2: 0.0, ..LossWeights::robustification() };
        let (_, g) = ppo_loss(&m, &[s], &w).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    fn random_batch(rng: &mut ChaCha8Rng, m: &PolicyModel, n: usize) -> (Vec<PpoSample>, Vec<SilSample>) {
        let d = m.arch.input_dim();
        let ppo = (0..n)
            .map(|_| {
                let input: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let out = m.forward_input(&input);
                PpoSample {
                    action: rng.random_range(0..m.arch.n_actions),
                    logp_old: log_softmax(&out.logits, 1.3)[0] + rng.random_range(-0.05..0.05),
                    v_old: out.value + rng.random_range(-0.3..0.3),
                    advantage: rng.random_range(-2.0..2.0),
                    ret: rng.random_range(-1.0..1.0),
                    temperature: 1.3,
                    input,
                }
            })
            .collect();
        let sil = (0..n)
            .map(|_| SilSample {
                input: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: rng.random_range(0..m.arch.n_actions),
                ret: rng.random_range(-1.0..1.0),
                v_old: rng.random_range(-1.0..1.0),
            })
            .collect();
        (ppo, sil)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = LossWeights { w_ent: 0.3, w_l2: 0.01, w_sil_ent: 0.2, ..LossWeights::robustification() };
        for seed in 0..5 {
            let mut m = PolicyModel::new(arch(2), seed);
            m.params.iter_mut().for_each(|p| *p *= 10.0);
            let (ppo, sil) = random_batch(&mut rng, &m, 6);
            let (_, g) = loss_and_grad(&m, &ppo, &sil, &w, true).unwrap();
            let h = 1e-6;
            for i in 0..m.params.len() {
                let mut plus = m.clone();
                plus.params[i] += h;
                let mut minus = m.clone();
                minus.params[i] -= h;
                let fp = loss_and_grad(&plus, &ppo, &sil, &w, false).unwrap().0.total;
                let fm = loss_and_grad(&minus, &ppo, &sil, &w, false).unwrap().0.total;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(g[i].abs()).max(1e-2), "param {i}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = PolicyModel::new(arch(2), 9);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = PolicyModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(PolicyModel::read_from(&b"#goexplore-model version=1 obs=1 goal=0 hidden=1,1 actions=1\nAAAA\n"[..]).is_err());
    }

    #[test]
    fn bandit_learns_rewarded_action() {
        let a = Architecture { obs_dim: 1, goal_dim: 0, hidden: [4, 4], n_actions: 2 };
        let mut m = PolicyModel::new(a, 0);
        let w = LossWeights::robustification();
        let cfg = OptimizerConfig::default();
        let mut st = OptimizerState::new(m.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p0 = 0.0;
        for _ in 0..500 {
            let out = m.forward_input(&[1.0]);
            let probs = softmax(&out.logits, 1.0);
            p0 = probs[0];
            let steps = (0..16)
                .map(|_| {
                    let act = sample_action(&probs, &mut rng);
                    StepRecord {
                        input: vec![1.0],
                        action: act,
                        reward: if act == 0 { 1.0 } else { 0.0 },
                        done: true,
                        logp_old: probs[act].ln(),
                        v_old: out.value,
                        temperature: 1.0,
                        trainable: true,
                    }
                })
                .collect();
            let samples = prepare_ppo(&[Rollout { steps, bootstrap_value: 0.0 }], w.gamma, w.lambda, true);
            train_step(&mut m, &samples, &[], &w, &cfg, &mut st, &mut rng).unwrap();
            if p0 > 0.99 {
                break;
            }
        }
        assert!(p0 > 0.99, "{p0}");
    }
}
