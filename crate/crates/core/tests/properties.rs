use std::collections::HashSet;

use goexplore_core::archive::{is_better, Archive, Candidate, SelectionWeightConfig, WeightMode};
use goexplore_core::cellmap::{
    downscale, downscale_objective, normalized_entropy, search_representation, size_penalty, CellKey, CellMapper, DownscaleParams,
    FrameSampleSet, ParamBounds,
};
use goexplore_core::env::{make_env, EnvConfig, Environment, GrayFrame};
use goexplore_core::explorer::{run_exploration_phase, ExploreConfig};
use goexplore_core::learner::{entropy, gae, log_softmax, ppo_loss, softmax, Architecture, LossWeights, PolicyModel, PpoSample};
use goexplore_core::policyge::{soft_goal_update, GoalUpdate, SoftTrajectory};
use goexplore_core::archive::PathHop;
use goexplore_core::robustify::{episode_outcome, sample_start, BackwardState, Demonstration, StartChoice};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env_config() -> impl Strategy<Value = EnvConfig> {
    prop_oneof![
        (3usize..8, 3usize..8, 0u64..50).prop_map(|(w, h, s)| EnvConfig::deceptive_maze(w, h, s)),
        (3usize..6, 3usize..6, 1usize..4, 0u64..50).prop_map(|(w, h, r, s)| EnvConfig::key_door_world(w, h, r, s)),
    ]
}

fn frame(w: usize, h: usize) -> impl Strategy<Value = GrayFrame> {
    proptest::collection::vec(any::<u8>(), w * h).prop_map(move |p| GrayFrame::new(w, h, p))
}

fn candidate(score: f64, length: u32) -> Candidate {
    Candidate { trajectory: vec![0; length as usize], score, length, snapshot: None, frame: None, cell_path: None }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn env_is_deterministic_and_restorable(cfg in env_config(), actions in proptest::collection::vec(0usize..5, 1..80), cut in 0usize..80) {
        let mut a = make_env(&cfg).unwrap();
        let mut b = make_env(&cfg).unwrap();
        a.reset();
        b.reset();
        let cut = cut.min(actions.len());
        let mut total = 0.0;
        let mut snapshot = None;
        let mut original = Vec::new();
        for (i, &act) in actions.iter().enumerate() {
            if i == cut {
                snapshot = Some(a.snapshot());
            }
            if a.is_done() {
                break;
            }
            let ra = a.step(act).unwrap();
            let rb = b.step(act).unwrap();
            prop_assert_eq!(&ra.observation, &rb.observation);
            prop_assert_eq!(ra.reward, rb.reward);
            total += ra.reward;
            prop_assert_eq!(ra.observation.score_so_far, total);
            if i >= cut {
                original.push((ra.observation, ra.reward));
            }
        }
        if let Some(snap) = snapshot {
            let mut c = make_env(&cfg).unwrap();
            c.reset();
            c.restore(&snap).unwrap();
            let replay: Vec<_> = actions[cut..].iter().take(original.len()).map(|&act| {
                let r = c.step(act).unwrap();
                (r.observation, r.reward)
            }).collect();
            prop_assert_eq!(replay, original);
        }
    }

    #[test]
    fn downscale_is_pure(f in frame(7, 5), w in 1usize..=7, h in 1usize..=5, d in 1u32..=255) {
        let p = DownscaleParams::new(w, h, d);
        prop_assert_eq!(downscale(&f, p).unwrap(), downscale(&f.clone(), p).unwrap());
    }

    #[test]
    fn entropy_and_penalty_bounds(raw in proptest::collection::vec(0.001f64..1.0, 1..30), n in 1usize..500, t in 1usize..500) {
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let h = normalized_entropy(&p).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
        if raw.len() >= 2 {
            let uniform = vec![1.0 / raw.len() as f64; raw.len()];
            prop_assert!((normalized_entropy(&uniform).unwrap() - 1.0).abs() < 1e-12);
        }
        let l = size_penalty(n, t as f64);
        prop_assert!(l >= 1.0);
        prop_assert_eq!(l == 1.0, n == t);
    }

    #[test]
    fn objective_bounded_and_order_free(frames in proptest::collection::vec(frame(4, 4), 1..20), w in 1usize..=4, h in 1usize..=4, d in 1u32..=32, frac in 0.05f64..1.0) {
        let p = DownscaleParams::new(w, h, d);
        let mut fwd = FrameSampleSet::new(64, 1.0);
        let mut rev = FrameSampleSet::new(64, 1.0);
        for f in &frames {
            fwd.insert(f.clone());
        }
        for f in frames.iter().rev() {
            rev.insert(f.clone());
        }
        let a = downscale_objective(&fwd, p, frac).unwrap();
        prop_assert!(a <= 1.0 + 1e-12);
        prop_assert_eq!(a, downscale_objective(&rev, p, frac).unwrap());
    }

    #[test]
    fn search_never_loses_to_its_start(frames in proptest::collection::vec(frame(6, 6), 2..15), seed in any::<u64>(), w in 1usize..=6, h in 1usize..=6, d in 1u32..=20) {
        let mut sample = FrameSampleSet::new(64, 1.0);
        for f in frames {
            sample.insert(f);
        }
        let start = DownscaleParams::new(w, h, d);
        let before = downscale_objective(&sample, start, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, after) = search_representation(&sample, start, ParamBounds { max_w: 6, max_h: 6, max_d: 20 }, 30, 0.2, &mut rng).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn sample_set_bounded_and_distinct(values in proptest::collection::vec(0u8..20, 0..100), cap in 1usize..10) {
        let mut set = FrameSampleSet::new(cap, 1.0);
        for v in values {
            set.insert(GrayFrame::filled(2, 2, v));
            prop_assert!(set.len() <= cap);
        }
        let distinct: HashSet<&GrayFrame> = set.frames().collect();
        prop_assert_eq!(distinct.len(), set.len());
    }

    #[test]
    fn archive_quality_is_monotone(updates in proptest::collection::vec((0u32..4, 0u32..3, 0u32..40), 1..80)) {
        let mut archive = Archive::new();
        let key = |k: u32| CellKey::domain(0, k, 0, vec![], 0);
        let mut best: Vec<Option<(f64, u32)>> = vec![None; 4];
        for (k, score, length) in updates {
            archive.update(key(k), candidate(score as f64, length));
            let rec = archive.get(&key(k)).unwrap();
            if let Some((s, l)) = best[k as usize] {
                prop_assert!(!is_better(s, l, rec.score, rec.length));
            }
            best[k as usize] = Some((rec.score, rec.length));
        }
        archive.bump_counters([(&key(0), &5u64)]);
        for mode in [WeightMode::Plain, WeightMode::PolicyBased, WeightMode::MontezumaDomain] {
            for (_, w) in archive.selection_weights(&SelectionWeightConfig::new(mode)).unwrap() {
                prop_assert!(w > 0.0 && w.is_finite());
                if mode != WeightMode::MontezumaDomain {
                    prop_assert!(w <= 1.0);
                }
            }
        }
    }

    #[test]
    fn counters_survive_replacement(seen in 1u64..50) {
        let mut archive = Archive::new();
        let k = CellKey::domain(0, 1, 1, vec![], 0);
        archive.update(k.clone(), candidate(0.0, 10));
        for _ in 0..seen {
            archive.bump_counters([(&k, &1u64)]);
        }
        archive.update(k.clone(), candidate(1.0, 20));
        let rec = archive.get(&k).unwrap();
        prop_assert_eq!(rec.score, 1.0);
        prop_assert_eq!(rec.c_seen, seen);
        prop_assert_eq!(rec.c_steps, seen);
    }

    #[test]
    fn softmax_and_entropy_bounds(logits in proptest::collection::vec(-30.0f64..30.0, 1..8), t in 0.1f64..10.0) {
        let p = softmax(&logits, t);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = entropy(&p);
        prop_assert!(h >= -1e-12 && h <= (logits.len() as f64).ln() + 1e-12);
        let lp = log_softmax(&logits, t);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a < 1e-300);
        }
    }

    #[test]
    fn gae_is_linear_in_rewards(
        r1 in proptest::collection::vec(-5.0f64..5.0, 1..20),
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = r1.len();
        let r2: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let zero = vec![0.0; n];
        let mixed: Vec<f64> = r1.iter().zip(&r2).map(|(x, y)| a * x + b * y).collect();
        let g = |r: &[f64]| gae(r, &zero, 0.0, &dones, 0.99, 0.95);
        for ((m, x), y) in g(&mixed).iter().zip(g(&r1)).zip(g(&r2)) {
            prop_assert!((m - (a * x + b * y)).abs() < 1e-9);
        }
    }

    #[test]
    fn ppo_loss_ignores_batch_order(seed in 0u64..1000, rot in 0usize..6) {
        use rand::Rng;
        let m = PolicyModel::new(Architecture { obs_dim: 3, goal_dim: 0, hidden: [4, 4], n_actions: 5 }, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<PpoSample> = (0..6).map(|_| PpoSample {
            input: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: rng.random_range(0..5),
            logp_old: -1.6 + rng.random_range(-0.2..0.2),
            v_old: rng.random_range(-1.0..1.0),
            advantage: rng.random_range(-1.0..1.0),
            ret: rng.random_range(-1.0..1.0),
            temperature: 1.0,
        }).collect();
        let mut rotated = batch.clone();
        rotated.rotate_left(rot);
        let w = LossWeights::policy_based();
        let (a, _) = ppo_loss(&m, &batch, &w).unwrap();
        let (b, _) = ppo_loss(&m, &rotated, &w).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-12 * a.total.abs().max(1.0));
    }

    #[test]
    fn soft_cursor_only_moves_forward(path in proptest::collection::vec(0u32..6, 1..30), visits in proptest::collection::vec(0u32..6, 0..60), window in 1usize..12) {
        let cell = |x: u32| CellKey::domain(0, x, 0, vec![], 0);
        let hops: Vec<PathHop> = path.iter().map(|&x| PathHop { cell: cell(x), steps: 1 }).collect();
        let mut traj = SoftTrajectory::new(&hops, window);
        let n = traj.cells.len();
        let mut reward = 0.0;
        for v in visits {
            let before = traj.cursor;
            let update = soft_goal_update(&mut traj, &cell(v));
            prop_assert!(traj.cursor >= before);
            if update == GoalUpdate::Done {
                prop_assert!(traj.is_done());
            }
            reward += update.reward();
        }
        prop_assert!(reward <= (n - 1) as f64 + 3.0);
    }

    #[test]
    fn outcome_ignores_reward_scale(rewards in proptest::collection::vec(prop_oneof![Just(0.0), 1.0f64..10.0], 1..30), start in 0usize..30, exp in -4i32..5) {
        let m = 2f64.powi(exp);
        let demo = Demonstration { actions: vec![0; rewards.len()], total_score: rewards.iter().sum(), length: rewards.len(), snapshots: vec![], observations: vec![], rewards: rewards.clone() };
        let scaled: Vec<f64> = rewards.iter().map(|r| r * m).collect();
        let scaled_demo = Demonstration { total_score: demo.total_score * m, rewards: scaled.clone(), ..demo.clone() };
        let start = start.min(rewards.len());
        prop_assert_eq!(episode_outcome(&rewards, &demo, start, 5), episode_outcome(&scaled, &scaled_demo, start, 5));
    }

    #[test]
    fn starts_stay_inside_the_demo(len in 1usize..200, window in 1usize..20, seed in any::<u64>()) {
        let demo = Demonstration { actions: vec![0; len], rewards: vec![1.0; len], snapshots: vec![], observations: vec![], total_score: len as f64, length: len };
        let state = BackwardState::new(std::slice::from_ref(&demo), false, window);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            match sample_start(&state, &mut rng) {
                StartChoice::Demo { index, step } => {
                    prop_assert_eq!(index, 0);
                    prop_assert!(step <= len);
                }
                StartChoice::Virtual => prop_assert!(false, "virtual start without a virtual demo"),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn exploration_logs_are_monotone_and_reproducible(seed in 0u64..1000, env_seed in 0u64..20) {
        let cfg = EnvConfig::key_door_world(4, 4, 2, env_seed);
        let run = || {
            let mut ec = ExploreConfig::new(20_000, seed);
            ec.batch_size = 20;
            ec.explore_steps = 40;
            run_exploration_phase(|| make_env(&cfg), CellMapper::domain(1, 1), ec).unwrap()
        };
        let a = run();
        for w in a.discovery_log.windows(2) {
            prop_assert!(w[0].frames <= w[1].frames && w[0].cells <= w[1].cells);
            prop_assert!(w[0].best_score.unwrap_or(f64::MIN) <= w[1].best_score.unwrap_or(f64::MIN));
        }
        prop_assert_eq!(a.frames_used, 20_000);
        let b = run();
        let (mut sa, mut sb) = (Vec::new(), Vec::new());
        a.archive.write_to(&mut sa, 0).unwrap();
        b.archive.write_to(&mut sb, 0).unwrap();
        prop_assert_eq!(sa, sb);
        prop_assert_eq!(a.discovery_log, b.discovery_log);
    }
}
