use cord::env::{
    builtin_action, observe_team, BuiltinPolicy, GridConfig, ResourceCollection, TeamSpec, N_ACTIONS,
};
use proptest::prelude::*;

fn rollout(spec: TeamSpec, actions: &[usize]) -> (Vec<String>, Vec<f64>, usize) {
    let cfg = GridConfig::default();
    let n = spec.n_agents;
    let (mut env, _) = ResourceCollection::new(cfg.clone(), spec).unwrap();
    let (mut hashes, mut rewards, mut deposits) = (vec![env.state().hash_hex()], Vec::new(), 0);
    let mut t = 0;
    while !env.done() {
        let joint: Vec<usize> = (0..n)
            .map(|i| {
                if env.spec().is_controlled(i) {
                    actions[(t * n + i) % actions.len()]
                } else {
                    builtin_action(env.state(), i, env.spec().builtin_policy).unwrap() as usize
                }
            })
            .collect();
        let out = env.step(&joint).unwrap();
        let expected = cfg.deposit_reward * out.info.deposits as f64
            + cfg.intercept_reward * out.info.intercepts as f64
            + cfg.breach_penalty * out.info.breaches as f64;
        assert_eq!(out.reward, expected);
        deposits += out.info.deposits;
        hashes.push(env.state().hash_hex());
        rewards.push(out.reward);
        t += 1;
    }
    (hashes, rewards, deposits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn episodes_are_reproducible_and_rewards_add_up(
        seed: u64,
        n in 1usize..=8,
        controlled in 1usize..=8,
        policy in prop_oneof![
            Just(BuiltinPolicy::GreedyCollector),
            Just(BuiltinPolicy::InvaderChaser),
            Just(BuiltinPolicy::Mixed)
        ],
        actions in proptest::collection::vec(0usize..N_ACTIONS, 64),
    ) {
        let spec = if controlled >= n {
            TeamSpec::full(n, seed)
        } else {
            TeamSpec::partial(n, controlled, policy, seed)
        };
        let (h1, r1, deposits) = rollout(spec.clone(), &actions);
        let (h2, r2, _) = rollout(spec, &actions);
        prop_assert_eq!(h1.len(), GridConfig::default().episode_limit + 1);
        prop_assert_eq!(h1, h2);
        prop_assert_eq!(r1, r2);
        prop_assert!(deposits <= GridConfig::default().n_resources());
    }

    #[test]
    fn visibility_follows_chebyshev_radius(seed: u64, n in 1usize..=8, steps in 0usize..40) {
        let cfg = GridConfig::default();
        let (mut env, _) = ResourceCollection::new(cfg.clone(), TeamSpec::full(n, seed)).unwrap();
        for t in 0..steps {
            let joint: Vec<usize> = (0..n).map(|i| (seed as usize + 3 * t + i) % N_ACTIONS).collect();
            env.step(&joint).unwrap();
        }
        let obs = observe_team(env.state(), &cfg, &vec![0; n]);
        let state = env.state();
        let pos_of = |row: usize| {
            let f = obs.features[row];
            let scale = (cfg.grid_size - 1) as f64;
            ((f[10] * scale).round() as i32, (f[11] * scale).round() as i32)
        };
        for i in 0..obs.n_agent_slots {
            for row in 0..obs.n_entities() {
                let expected = i < n
                    && obs.team_mask[row]
                    && (row == i || row == obs.home_row() || {
                        let (x, y) = pos_of(row);
                        let p = state.agents[i].pos;
                        (p.x - x).abs().max((p.y - y).abs()) <= cfg.visibility_radius
                    });
                prop_assert_eq!(obs.obs_mask[i][row], expected, "agent {} row {}", i, row);
            }
        }
    }
}

#[test]
fn oversized_and_empty_teams_are_config_errors() {
    let cfg = GridConfig::default();
    assert!(ResourceCollection::new(cfg.clone(), TeamSpec::full(cfg.max_agents + 1, 0)).is_err());
    assert!(ResourceCollection::new(cfg.clone(), TeamSpec::full(0, 0)).is_err());
    assert!(BuiltinPolicy::parse("teleporter").is_err());
}
