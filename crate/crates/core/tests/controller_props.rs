use cord::batch::{build, Batch, RowInput};
use cord::controller::{audit_attention, ControllerOutput};
use cord::env::{observe_team, EntityObservation, GridConfig, ResourceCollection, TeamSpec, WorldState, N_ACTIONS};
use cord::model::{NetConfig, Networks};
use cord::role_math::{LOG_STD_MAX, LOG_STD_MIN};
use cord::rollout::batch_dims;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Scene {
    state: WorldState,
    last_actions: Vec<usize>,
    last_roles: Vec<Vec<f64>>,
}

fn scene(n: usize, steps: usize, seed: u64, d_role: usize) -> Scene {
    let grid = GridConfig::default();
    let (mut env, _) = ResourceCollection::new(grid, TeamSpec::full(n, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut last_actions = vec![0; n];
    for _ in 0..steps {
        last_actions = (0..n).map(|_| rng.random_range(0..N_ACTIONS)).collect();
        env.step(&last_actions).unwrap();
    }
    let last_roles = (0..n).map(|_| (0..d_role).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    Scene { state: env.state().clone(), last_actions, last_roles }
}

fn batch_of(scenes: &[&Scene], net: &NetConfig) -> Batch {
    let grid = GridConfig::default();
    let obs: Vec<EntityObservation> = scenes.iter().map(|s| observe_team(&s.state, &grid, &s.last_actions)).collect();
    let rows: Vec<RowInput<'_>> = obs
        .iter()
        .zip(scenes)
        .enumerate()
        .map(|(r, (o, s))| RowInput {
            obs: o,
            last_roles: &s.last_roles,
            role_noise: &s.last_roles,
            roles: &s.last_roles,
            assign_row: r,
            actions: None,
        })
        .collect();
    build(&rows, batch_dims(&grid, net)).unwrap()
}

fn agent_rows(t: &candle_core::Tensor, row: usize, n: usize) -> Vec<Vec<f64>> {
    t.get(row).unwrap().narrow(0, 0, n).unwrap().to_vec2().unwrap()
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn forward(nets: &Networks, b: &Batch) -> ControllerOutput {
    nets.controller.forward(b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relabelling_agents_permutes_their_roles(seed: u64, n in 2usize..=8, steps in 0usize..30, shift in 1usize..8) {
        let net = NetConfig::default();
        let nets = Networks::new(&net, seed % 7).unwrap();
        let s = scene(n, steps, seed, net.d_role);
        // Agent i of the relabelled team is agent perm[i] of the original.
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let p = Scene {
            state: WorldState { agents: perm.iter().map(|&k| s.state.agents[k].clone()).collect(), ..s.state.clone() },
            last_actions: perm.iter().map(|&k| s.last_actions[k]).collect(),
            last_roles: perm.iter().map(|&k| s.last_roles[k].clone()).collect(),
        };
        let a = forward(&nets, &batch_of(&[&s], &net));
        let b = forward(&nets, &batch_of(&[&p], &net));
        for t in [(&a.post_mean, &b.post_mean), (&a.post_log_std, &b.post_log_std), (&a.influence, &b.influence)] {
            let orig = agent_rows(t.0, 0, n);
            let relabelled = agent_rows(t.1, 0, n);
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&k| orig[k].clone()).collect();
            prop_assert!(max_abs_diff(&permuted, &relabelled) < 1e-10);
        }
    }

    #[test]
    fn padding_does_not_leak_into_real_agents(seed: u64, small in 1usize..=4, big in 5usize..=8, steps in 0usize..60) {
        let net = NetConfig::default();
        let nets = Networks::new(&net, 3).unwrap();
        let s = scene(small, steps, seed, net.d_role);
        let other = scene(big, steps + 25, seed.wrapping_add(1), net.d_role);
        let alone = forward(&nets, &batch_of(&[&s], &net));
        let padded = forward(&nets, &batch_of(&[&s, &other], &net));
        for (x, y) in [
            (&alone.post_mean, &padded.post_mean),
            (&alone.post_log_std, &padded.post_log_std),
            (&alone.base_mean, &padded.base_mean),
        ] {
            prop_assert!(max_abs_diff(&agent_rows(x, 0, small), &agent_rows(y, 0, small)) < 1e-10);
        }
    }

    #[test]
    fn influence_is_a_convex_mixture_of_teammate_values(seed: u64, n in 1usize..=8, steps in 0usize..40) {
        let net = NetConfig::default();
        let nets = Networks::new(&net, seed % 5).unwrap();
        let s = scene(n, steps, seed, net.d_role);
        let b = batch_of(&[&s], &net);
        let out = forward(&nets, &b);
        prop_assert!(audit_attention(&b, &out).unwrap().passed(1e-9));
        let head_width = net.width / net.heads;
        for i in 0..n {
            let bundle = out.bundle(0, i, n).unwrap();
            for (h, w) in bundle.weights.iter().enumerate() {
                prop_assert_eq!(w[i], 0.0);
                let total: f64 = w.iter().sum();
                let expected_total = if n == 1 { 0.0 } else { 1.0 };
                prop_assert!((total - expected_total).abs() < 1e-9);
                for d in h * head_width..(h + 1) * head_width {
                    let mix: f64 = (0..n).map(|j| w[j] * bundle.values[j][d]).sum();
                    prop_assert!((bundle.influence[d] - mix).abs() < 1e-9);
                    if n > 1 {
                        let others = (0..n).filter(|&j| j != i).map(|j| bundle.values[j][d]);
                        let (lo, hi) = others.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(v), u.max(v)));
                        prop_assert!(bundle.influence[d] >= lo - 1e-9 && bundle.influence[d] <= hi + 1e-9);
                    }
                }
            }
        }
    }
}

#[test]
fn identical_agents_at_reset_split_attention_evenly() {
    let net = NetConfig::default();
    let nets = Networks::new(&net, 0).unwrap();
    let mut s = scene(3, 0, 5, net.d_role);
    s.last_roles = vec![vec![0.0; net.d_role]; 3];
    let out = forward(&nets, &batch_of(&[&s], &net));
    for i in 0..3 {
        for w in out.bundle(0, i, 3).unwrap().weights {
            for (j, wij) in w.iter().enumerate() {
                let expected = if i == j { 0.0 } else { 0.5 };
                assert!((wij - expected).abs() < 1e-12, "agent {i} head weight on {j}: {wij}");
            }
        }
    }
}

#[test]
fn a_lone_agent_has_no_influence_and_its_posterior_is_the_baseline() {
    let net = NetConfig::default();
    let nets = Networks::new(&net, 1).unwrap();
    let s = scene(1, 17, 9, net.d_role);
    let out = forward(&nets, &batch_of(&[&s], &net));
    assert!(agent_rows(&out.influence, 0, 1)[0].iter().all(|&v| v == 0.0));
    assert_eq!(agent_rows(&out.post_mean, 0, 1), agent_rows(&out.base_mean, 0, 1));
    assert_eq!(agent_rows(&out.post_log_std, 0, 1), agent_rows(&out.base_log_std, 0, 1));
}

#[test]
fn do_baseline_is_the_head_at_zero_influence_and_influence_moves_the_posterior() {
    let net = NetConfig::default();
    let nets = Networks::new(&net, 2).unwrap();
    let s = scene(4, 12, 2, net.d_role);
    let out = forward(&nets, &batch_of(&[&s], &net));
    let (m0, l0) = nets.controller.role_head(&out.query, &out.query.zeros_like().unwrap()).unwrap();
    let (bm, bl) = nets.controller.do_baseline(&out.query).unwrap();
    assert_eq!(agent_rows(&m0, 0, 4), agent_rows(&bm, 0, 4));
    assert_eq!(agent_rows(&l0, 0, 4), agent_rows(&bl, 0, 4));

    let bumped = (&out.influence + 1e-3).unwrap();
    let (m1, _) = nets.controller.role_head(&out.query, &bumped).unwrap();
    assert!(max_abs_diff(&agent_rows(&m1, 0, 4), &agent_rows(&out.post_mean, 0, 4)) > 1e-7);
}

#[test]
fn log_std_stays_clamped_under_extreme_weights() {
    let net = NetConfig::default();
    let nets = Networks::new(&net, 4).unwrap();
    for (name, shape, vals) in nets.params.to_flat().unwrap() {
        if name.starts_with("controller.head_out") {
            nets.params.load_flat(&name, &shape, vals.iter().map(|v| v * 1e6).collect()).unwrap();
        }
    }
    let s = scene(6, 30, 4, net.d_role);
    let out = forward(&nets, &batch_of(&[&s], &net));
    let ls: Vec<f64> = agent_rows(&out.post_log_std, 0, 6).concat();
    assert!(ls.iter().all(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(v)));
    assert!(ls.iter().any(|&v| v == LOG_STD_MIN || v == LOG_STD_MAX));
}
