use candle_core::Tensor;
use cord::agent::select_actions;
use cord::checkpoint;
use cord::env::{GridConfig, TeamSpec, N_ACTIONS};
use cord::learner::{forward_pass, td_loss, Learner, LearnerConfig, Method};
use cord::model::{NetConfig, Networks};
use cord::replay::{assemble, Episode, EpisodeBatch, ReplayBuffer};
use cord::rollout::{batch_dims, run_episode, RolloutConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_grid() -> GridConfig {
    GridConfig { episode_limit: 12, invader_period: 4, ..GridConfig::default() }
}

fn episodes(nets: &Networks, method: Method, sizes: &[usize], seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RolloutConfig::training(method, 3, 1.0);
    sizes
        .iter()
        .map(|&n| run_episode(nets, &small_grid(), TeamSpec::full(n, rng.random()), &cfg, &mut rng).unwrap().episode)
        .collect()
}

fn batch(eps: &[Episode]) -> EpisodeBatch {
    let refs: Vec<&Episode> = eps.iter().collect();
    assemble(&refs, &small_grid(), batch_dims(&small_grid(), &NetConfig::tiny())).unwrap()
}

fn learner(method: Method, seed: u64) -> Learner {
    let cfg = LearnerConfig { method, lambda_c: 0.5, lambda_d: 0.5, target_period: 3, ..LearnerConfig::default() };
    Learner::new(cfg, Networks::new(&NetConfig::tiny(), seed).unwrap()).unwrap()
}

fn perturb(nets: &Networks, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape, vals) in nets.params.to_flat().unwrap() {
        let moved = vals.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
        nets.params.load_flat(&name, &shape, moved).unwrap();
    }
}

/// The first `len` steps of `ep`, as if the run had been cut short.
fn truncated(ep: &Episode, len: usize) -> Episode {
    Episode {
        spec: ep.spec.clone(),
        states: ep.states[..=len].to_vec(),
        actions: ep.actions[..len].to_vec(),
        rewards: ep.rewards[..len].to_vec(),
        terminal: false,
        assignments: ep.assignments.iter().filter(|a| a.step < len).cloned().collect(),
    }
}

fn argmax(q: &[f64]) -> usize {
    (0..q.len()).fold(0, |best, a| if q[a] > q[best] { a } else { best })
}

/// Double-Q targets rebuilt step by step on the host: the online utilities
/// choose next actions, the target recurrent core is stepped one row at a
/// time, and the target mixer scores each next state.
fn oracle_targets(l: &Learner, eb: &EpisodeBatch, shaped: &[f64], choose_with_target: bool) -> Vec<f64> {
    let online_q = l.online_forward(eb).unwrap().q.to_vec3::<f64>().unwrap();
    let roles = forward_pass(&l.target, eb, l.cfg.method, false, &eb.batch.actions).unwrap().roles;
    let x = l.target.utility.embed(&eb.batch, &roles).unwrap();
    let n_slots = eb.batch.n_agents;
    let mut out = Vec::new();
    for e in 0..eb.episodes {
        let mut h = l.target.utility.initial_state(1, n_slots).unwrap();
        let mut target_q = Vec::new();
        for t in 0..eb.rows_per_episode() {
            let xt = x.get(eb.row(e, t)).unwrap().unsqueeze(0).unwrap();
            h = l.target.utility.step(&xt, &h).unwrap();
            target_q.push(l.target.utility.q_values(&h).unwrap().get(0).unwrap().to_vec2::<f64>().unwrap());
        }
        for t in 0..eb.steps {
            let next = eb.row(e, t + 1);
            let n = eb.batch.agent_counts[next];
            let utilities: Vec<f64> = (0..n)
                .map(|i| {
                    let chooser = if choose_with_target { &target_q[t + 1][i] } else { &online_q[next][i] };
                    target_q[t + 1][i][argmax(chooser)]
                })
                .collect();
            let v = l.target.mixer.mix(&utilities, &eb.batch, next).unwrap();
            let k = eb.transition(e, t);
            out.push(if eb.terminals[k] { shaped[k] } else { shaped[k] + l.cfg.gamma * v });
        }
    }
    out
}

#[test]
fn td_targets_match_a_step_by_step_double_q_oracle() {
    for method in Method::ALL {
        let l = learner(method, 5);
        perturb(&l.target, 0.5, 9);
        let eps = episodes(&l.online, method, &[2, 3, 1], 17);
        let eb = batch(&eps);
        let online = l.online_forward(&eb).unwrap();
        let (shaped, _, _) = l.shaped_rewards(&eb, &online).unwrap();
        let targets = l.td_targets(&eb, &online, &shaped).unwrap();
        let oracle = oracle_targets(&l, &eb, &shaped, false);
        let worst = targets.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "{}: worst target gap {worst}", method.name());

        let single_q = oracle_targets(&l, &eb, &shaped, true);
        let gap = targets.iter().zip(&single_q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap > 1e-6, "{}: target network chose the next actions", method.name());
    }
}

#[test]
fn shaped_causal_reward_respects_the_per_agent_cap() {
    let cap = 1e-3;
    let cfg = LearnerConfig { r_c_agent_cap: cap, ..LearnerConfig::default() };
    let l = Learner::new(cfg, Networks::new(&NetConfig::tiny(), 6).unwrap()).unwrap();
    perturb(&l.online, 2.0, 6);
    let eb = batch(&episodes(&l.online, Method::Cord, &[2, 4], 6));
    let online = l.online_forward(&eb).unwrap();
    let (_, rc, _) = l.shaped_rewards(&eb, &online).unwrap();
    assert!(rc.iter().all(|&v| v <= 4.0 * cap + 1e-15));
    assert!(rc.iter().any(|&v| v > 0.0));
}

#[test]
fn shaped_rewards_follow_the_method() {
    for method in Method::ALL {
        let l = learner(method, 2);
        let eb = batch(&episodes(&l.online, method, &[3, 4], 1));
        let online = l.online_forward(&eb).unwrap();
        let (shaped, rc, rd) = l.shaped_rewards(&eb, &online).unwrap();
        for k in 0..shaped.len() {
            let expected = match method {
                Method::Cord => eb.rewards[k] + 0.5 * rc[k] + 0.5 * rd[k],
                Method::CordNoI | Method::Maxent => eb.rewards[k],
            };
            assert!((shaped[k] - expected).abs() < 1e-12);
        }
        if method == Method::Maxent {
            assert!(rc.iter().chain(&rd).all(|&v| v == 0.0));
        } else {
            assert!(rc.iter().zip(&eb.valid).any(|(&v, &ok)| ok && v > 0.0));
        }
    }
}

#[test]
fn loss_is_the_mean_squared_error_over_valid_transitions() {
    let l = learner(Method::Cord, 3);
    let mut eps = episodes(&l.online, Method::Cord, &[2, 5], 4);
    eps[0] = truncated(&eps[0], 7);
    let eb = batch(&eps);
    let q_tot = l.online_forward(&eb).unwrap().q_tot.to_vec1::<f64>().unwrap();
    let exact: Vec<f64> = (0..eb.episodes)
        .flat_map(|e| (0..eb.steps).map(move |t| (e, t)))
        .map(|(e, t)| q_tot[eb.row(e, t)])
        .collect();
    let q = Tensor::new(q_tot.as_slice(), &candle_core::Device::Cpu).unwrap();
    let zero = td_loss(&eb, &q, &exact).unwrap().to_scalar::<f64>().unwrap();
    assert!(zero.abs() < 1e-24);
    let shifted: Vec<f64> = exact.iter().map(|v| v + 2.0).collect();
    let four = td_loss(&eb, &q, &shifted).unwrap().to_scalar::<f64>().unwrap();
    assert!((four - 4.0).abs() < 1e-12);
    // Invalid padding transitions do not count, whatever their target.
    let mut noisy = exact.clone();
    for (k, ok) in eb.valid.iter().enumerate() {
        if !ok {
            noisy[k] = 1e6;
        }
    }
    assert!(eb.valid.iter().any(|v| !v));
    assert!(td_loss(&eb, &q, &noisy).unwrap().to_scalar::<f64>().unwrap().abs() < 1e-24);
}

#[test]
fn loss_ignores_episode_order() {
    let l = learner(Method::Cord, 8);
    let eps = episodes(&l.online, Method::Cord, &[2, 4, 3], 21);
    let loss_of = |eps: &[Episode]| {
        let eb = batch(eps);
        let on = l.online_forward(&eb).unwrap();
        let (shaped, _, _) = l.shaped_rewards(&eb, &on).unwrap();
        let y = l.td_targets(&eb, &on, &shaped).unwrap();
        l.td_loss(&eb, &on, &y).unwrap().to_scalar::<f64>().unwrap()
    };
    let reversed: Vec<Episode> = eps.iter().rev().cloned().collect();
    let (a, b) = (loss_of(&eps), loss_of(&reversed));
    assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn targets_copy_exactly_on_schedule() {
    let mut l = learner(Method::Cord, 4);
    let eb = batch(&episodes(&l.online, Method::Cord, &[2, 3], 6));
    let snapshot = |n: &Networks| n.params.to_flat().unwrap();
    let before = snapshot(&l.target);
    for k in 1..=3u64 {
        l.train_step(&eb).unwrap();
        let copied = l.note_episodes(1).unwrap();
        assert_eq!(copied, k == 3);
        if k < 3 {
            assert_eq!(snapshot(&l.target), before);
            assert_ne!(snapshot(&l.online), before);
        }
    }
    assert_eq!(snapshot(&l.target), snapshot(&l.online));
    assert_eq!(l.episodes_since_target_update, 0);
    // Adam keeps plain values, not autograd graphs.
    assert!(l.optim.m.iter().chain(&l.optim.v).all(|t| !t.track_op()));
}

#[test]
fn checkpoints_round_trip_every_piece_of_learner_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    let mut l = learner(Method::Cord, 7);
    let eb = batch(&episodes(&l.online, Method::Cord, &[3, 2], 3));
    l.train_step(&eb).unwrap();
    l.note_episodes(2).unwrap();
    perturb(&l.target, 0.01, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let _: u64 = rng.random();
    checkpoint::save(&path, &l, 1234, &rng, serde_json::json!({"note": "test"})).unwrap();

    let ck = checkpoint::load(&path).unwrap();
    let mut fresh = learner(Method::Cord, 99);
    ck.restore_into(&mut fresh).unwrap();
    assert_eq!(fresh.online.params.to_flat().unwrap(), l.online.params.to_flat().unwrap());
    assert_eq!(fresh.target.params.to_flat().unwrap(), l.target.params.to_flat().unwrap());
    for (a, b) in fresh.optim.m.iter().zip(&l.optim.m).chain(fresh.optim.v.iter().zip(&l.optim.v)) {
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap(), b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }
    assert_eq!(
        (fresh.optim.step, fresh.train_steps, fresh.episodes_seen, fresh.episodes_since_target_update),
        (l.optim.step, l.train_steps, l.episodes_seen, l.episodes_since_target_update)
    );
    assert_eq!(fresh.episodes_since_target_update, 2);
    assert_eq!(ck.state.env_steps, 1234);
    let mut restored = ck.state.rng.restore().unwrap();
    assert_eq!(restored.random::<u64>(), rng.random::<u64>());
    assert_eq!(ck.networks().unwrap().params.to_flat().unwrap(), l.online.params.to_flat().unwrap());

    let other = Learner::new(LearnerConfig::default(), Networks::new(&NetConfig::default(), 0).unwrap()).unwrap();
    let mut other = other;
    assert!(ck.restore_into(&mut other).is_err());
}

fn chi_square_p(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn fully_exploratory_actions_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = vec![vec![9.0, 0.0, 0.0, 0.0, 0.0]; 3];
    let avail = vec![vec![true; N_ACTIONS]; 3];
    let mut counts = vec![[0usize; N_ACTIONS]; 3];
    for _ in 0..10_000 {
        for (i, a) in select_actions(&q, &avail, 1.0, &mut rng).unwrap().into_iter().enumerate() {
            counts[i][a] += 1;
        }
    }
    for c in &counts {
        assert!(chi_square_p(c) > 0.01, "{c:?}");
    }
    assert_eq!(select_actions(&q, &avail, 0.0, &mut rng).unwrap(), vec![0, 0, 0]);
    assert!(select_actions(&q, &avail, 1.5, &mut rng).is_err());
}

#[test]
fn replay_sampling_is_uniform_and_capacity_is_respected() {
    let nets = Networks::new(&NetConfig::tiny(), 0).unwrap();
    let eps = episodes(&nets, Method::Maxent, &[1, 2, 3, 1, 2, 3, 1, 2], 5);
    let mut buf = ReplayBuffer::new(6).unwrap();
    for e in eps {
        buf.add(e).unwrap();
    }
    assert_eq!(buf.len(), 6);
    assert_eq!(buf.total_steps(), 6 * small_grid().episode_limit);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = vec![0usize; 6];
    for _ in 0..12_000 {
        let idx = buf.sample_indices(1, &mut rng).unwrap();
        assert_eq!(idx.len(), 1);
        counts[idx[0]] += 1;
    }
    assert!(chi_square_p(&counts) > 0.01, "{counts:?}");
    let covered: usize = buf.sample(40, &mut rng).unwrap().iter().map(|e| e.len()).sum();
    assert!(covered >= 40);
}

#[test]
fn maxent_roles_stay_in_the_box_without_controller_passes() {
    let nets = Networks::new(&NetConfig::tiny(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = RolloutConfig::training(Method::Maxent, 3, 0.5);
    let r = run_episode(&nets, &small_grid(), TeamSpec::full(4, 3), &cfg, &mut rng).unwrap();
    assert_eq!(r.controller_passes, 0);
    assert_eq!((r.mean_r_c, r.mean_r_d), (0.0, 0.0));
    assert_eq!(r.episode.assignments.len(), small_grid().episode_limit.div_ceil(3));
    for a in &r.episode.assignments {
        assert!(a.roles.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    }
    let cord = run_episode(&nets, &small_grid(), TeamSpec::full(4, 3), &RolloutConfig::training(Method::Cord, 3, 0.5), &mut rng).unwrap();
    assert_eq!(cord.controller_passes, cord.episode.assignments.len());
}

#[test]
fn every_method_starts_from_the_same_weights() {
    let a = learner(Method::Cord, 11);
    let b = learner(Method::CordNoI, 11);
    let c = learner(Method::Maxent, 11);
    let flat = |l: &Learner| l.online.params.to_flat().unwrap();
    assert_eq!(flat(&a), flat(&b));
    assert_eq!(flat(&a), flat(&c));
}
