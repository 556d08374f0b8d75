//! Grid-world episodes replayed against an independent re-simulation.

use commformer_core::envs::{AgentClass, Env, GridConfig, GridEnv};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Moves in action-index order: up, down, left, right, stay, capture.
fn shadow_move(pos: (usize, usize), a: usize, g: usize) -> (usize, usize) {
    let (r, c) = pos;
    match a {
        0 => (r.saturating_sub(1), c),
        1 => ((r + 1).min(g - 1), c),
        2 => (r, c.saturating_sub(1)),
        3 => (r, (c + 1).min(g - 1)),
        _ => (r, c),
    }
}

fn config(capture: bool) -> GridConfig {
    if capture {
        GridConfig::predator_capture_prey()
    } else {
        GridConfig::predator_prey()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rewards_and_outcomes_match_a_recount(seed in any::<u64>(), capture in any::<bool>()) {
        let cfg = config(capture);
        let mut env = GridEnv::new(cfg.clone()).unwrap();
        env.reset(seed);
        let start = env.state().clone();
        let n = env.n_agents();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);

        let mut pos = start.positions.clone();
        let mut finished = vec![false; n];
        let mut total = 0.0;
        let mut expected_penalty_units = 0usize;
        let mut last_finish = 0;
        loop {
            let avail = env.available();
            let actions: Vec<usize> = (0..n)
                .map(|i| {
                    let ok: Vec<usize> = (0..env.n_actions()).filter(|&a| avail[i * env.n_actions() + a]).collect();
                    // lean toward the prey so some episodes finish
                    if rng.random_bool(0.5) { ok[rng.random_range(0..ok.len())] } else {
                        let (r, c) = pos[i];
                        let (pr, pc) = start.prey;
                        if r > pr { 0 } else if r < pr { 1 } else if c > pc { 2 } else if c < pc { 3 }
                        else if start.classes[i] == AgentClass::Capture { 5 } else { 4 }
                    }
                })
                .collect();
            let out = env.step(&actions).unwrap();
            for i in 0..n {
                if finished[i] {
                    continue;
                }
                pos[i] = shadow_move(pos[i], actions[i], cfg.grid_size);
                let on = pos[i] == start.prey;
                finished[i] = match start.classes[i] {
                    AgentClass::Predator => on,
                    AgentClass::Capture => on && actions[i] == 5,
                };
                if finished[i] {
                    last_finish = env.state().step;
                }
            }
            prop_assert_eq!(&env.state().positions, &pos);
            let active = finished.iter().filter(|&&f| !f).count();
            expected_penalty_units += active;
            total += out.reward;
            prop_assert!(out.reward.is_finite());
            prop_assert_eq!(out.info.success, active == 0);
            if out.done {
                prop_assert!(out.info.success || env.state().step == cfg.max_steps);
                if out.info.success {
                    prop_assert_eq!(out.info.steps_taken, last_finish);
                }
                break;
            }
        }
        prop_assert!(env.state().step <= cfg.max_steps);
        prop_assert!((total - cfg.step_penalty * expected_penalty_units as f64).abs() < 1e-12);
    }

    #[test]
    fn a_seed_and_an_action_sequence_fix_the_trajectory(seed in any::<u64>(), acts in proptest::collection::vec(0usize..5, 60)) {
        let mut a = GridEnv::new(config(false)).unwrap();
        let mut b = GridEnv::new(config(false)).unwrap();
        prop_assert_eq!(a.reset(seed), b.reset(seed));
        for chunk in acts.chunks(3) {
            let ra = a.step(chunk).unwrap();
            let rb = b.step(chunk).unwrap();
            prop_assert_eq!(&ra, &rb);
            if ra.done {
                break;
            }
        }
    }
}
