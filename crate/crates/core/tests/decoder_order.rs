//! Auto-regressive decoding: causality, graph masking and consistency
//! between teacher forcing and step-by-step generation.

use commformer_core::commgraph::CommGraph;
use commformer_core::diffmath::{normal, Graph, ParameterStore, Tensor};
use commformer_core::relformer::{
    act_autoregressive, decode_policy, encode, init_decoder, init_encoder, ActMode, InitGains,
    ModelDims,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBS_DIM: usize = 3;
const ACTIONS: usize = 4;

fn model(n: usize, seed: u64) -> (ModelDims, ParameterStore<f64>) {
    let dims = ModelDims {
        n_agents: n,
        obs_dim: OBS_DIM,
        n_actions: ACTIONS,
        hidden: 8,
        blocks: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains = InitGains {
        output: 1.0,
        embedding_std: 0.5,
        ..Default::default()
    };
    let mut p = init_encoder(&dims, &gains, &mut rng).unwrap();
    p.merge(&init_decoder(&dims, &gains, &mut rng).unwrap());
    (dims, p)
}

fn edges(graph: &CommGraph) -> Tensor<f64> {
    let n = graph.n_agents();
    graph.to_tensor::<f64>().reshaped(&[1, n, n]).unwrap()
}

/// Teacher-forced action probabilities, `[B * N * A]`.
fn probs(
    dims: &ModelDims,
    p: &ParameterStore<f64>,
    obs: &Tensor<f64>,
    graph: &CommGraph,
    actions: &[usize],
) -> Vec<f64> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, |_| false);
    let o = g.constant(obs.clone());
    let e = g.constant(edges(graph));
    let enc = encode(&mut g, &b, dims, o, e).unwrap();
    let pol = decode_policy(&mut g, &b, dims, enc.reps, actions, e, None).unwrap();
    g.value(pol.probs).data().to_vec()
}

fn agent_slice(v: &[f64], m: usize) -> &[f64] {
    &v[m * ACTIONS..(m + 1) * ACTIONS]
}

fn random_graph(n: usize, rng: &mut impl Rng) -> CommGraph {
    let rows: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect())
        .collect();
    CommGraph::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn later_and_unheard_actions_do_not_move_a_distribution(seed in any::<u64>(), n in 2usize..6) {
        let (dims, p) = model(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let graph = random_graph(n, &mut rng);
        let obs = normal(&[1, n, OBS_DIM], 1.0, &mut rng);
        let base: Vec<usize> = (0..n).map(|_| rng.random_range(0..ACTIONS)).collect();
        let before = probs(&dims, &p, &obs, &graph, &base);
        for j in 0..n {
            let mut changed = base.clone();
            changed[j] = (base[j] + 1) % ACTIONS;
            let after = probs(&dims, &p, &obs, &graph, &changed);
            for m in 0..n {
                let visible = j < m && graph.get(m, j);
                if !visible {
                    prop_assert_eq!(agent_slice(&before, m), agent_slice(&after, m), "agent {} after changing {}", m, j);
                }
            }
        }
    }

    #[test]
    fn distributions_are_normalised(seed in any::<u64>(), n in 1usize..6) {
        let (dims, p) = model(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let graph = random_graph(n, &mut rng);
        let obs = normal(&[2, n, OBS_DIM], 1.0, &mut rng);
        let actions: Vec<usize> = (0..2 * n).map(|_| rng.random_range(0..ACTIONS)).collect();
        for row in probs(&dims, &p, &obs, &graph, &actions).chunks(ACTIONS) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_agrees_with_teacher_forcing(seed in any::<u64>(), n in 1usize..5) {
        let (dims, p) = model(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let graph = random_graph(n, &mut rng);
        let obs = normal(&[3, n, OBS_DIM], 1.0, &mut rng);
        let mut rngs: Vec<ChaCha8Rng> = (0..3).map(|r| ChaCha8Rng::seed_from_u64(seed ^ (r + 10))).collect();
        let acted = act_autoregressive(&p, &dims, &obs, &edges(&graph), None, ActMode::Sample, &mut rngs).unwrap();
        prop_assert!(acted.actions.iter().all(|&a| a < ACTIONS));
        let pr = probs(&dims, &p, &obs, &graph, &acted.actions);
        for (k, (&a, &lp)) in acted.actions.iter().zip(&acted.log_probs).enumerate() {
            prop_assert!((pr[k * ACTIONS + a].ln() - lp).abs() < 1e-6);
        }
    }
}

#[test]
fn greedy_generation_is_deterministic() {
    let (dims, p) = model(4, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let obs = normal(&[2, 4, OBS_DIM], 1.0, &mut rng);
    let e = edges(&CommGraph::full(4));
    let mut none: Vec<ChaCha8Rng> = Vec::new();
    let a = act_autoregressive(&p, &dims, &obs, &e, None, ActMode::Greedy, &mut none).unwrap();
    let b = act_autoregressive(&p, &dims, &obs, &e, None, ActMode::Greedy, &mut none).unwrap();
    assert_eq!(a.actions, b.actions);
    assert_eq!(a.log_probs, b.log_probs);
}

#[test]
fn unavailable_actions_are_never_chosen() {
    let n = 3;
    let (dims, p) = model(n, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let obs = normal(&[4, n, OBS_DIM], 1.0, &mut rng);
    // only the last action is allowed for every agent
    let avail: Vec<bool> = (0..4 * n * ACTIONS)
        .map(|k| k % ACTIONS == ACTIONS - 1)
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..4).map(ChaCha8Rng::seed_from_u64).collect();
    let e = edges(&CommGraph::full(n));
    let acted = act_autoregressive(
        &p,
        &dims,
        &obs,
        &e,
        Some(&avail),
        ActMode::Sample,
        &mut rngs,
    )
    .unwrap();
    assert!(acted.actions.iter().all(|&a| a == ACTIONS - 1));
    assert!(acted.log_probs.iter().all(|&lp| lp.abs() < 1e-12));
}

#[test]
fn isolated_agents_ignore_earlier_actions() {
    let n = 3;
    let (dims, p) = model(n, 61);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let obs = normal(&[1, n, OBS_DIM], 1.0, &mut rng);
    let graph = CommGraph::identity(n);
    let a = probs(&dims, &p, &obs, &graph, &[0, 1, 2]);
    let b = probs(&dims, &p, &obs, &graph, &[3, 0, 2]);
    assert_eq!(a, b);
    // the same change is heard once agent 1 receives from agent 0
    let chain = CommGraph::from_rows(&[vec![1, 0, 0], vec![1, 1, 0], vec![0, 0, 1]]).unwrap();
    let a = probs(&dims, &p, &obs, &chain, &[0, 1, 2]);
    let b = probs(&dims, &p, &obs, &chain, &[3, 0, 2]);
    assert_ne!(agent_slice(&a, 1), agent_slice(&b, 1));
    assert_eq!(agent_slice(&a, 2), agent_slice(&b, 2));
}

#[test]
fn isolated_agents_ignore_other_observations() {
    let n = 3;
    let (dims, p) = model(n, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let obs = normal(&[1, n, OBS_DIM], 1.0, &mut rng);
    let mut moved = obs.clone();
    moved.set(&[0, 1, 0], 9.0);
    let graph = CommGraph::identity(n);
    let actions = [1, 2, 3];
    let a = probs(&dims, &p, &obs, &graph, &actions);
    let b = probs(&dims, &p, &moved, &graph, &actions);
    assert_eq!(agent_slice(&a, 0), agent_slice(&b, 0));
    assert_eq!(agent_slice(&a, 2), agent_slice(&b, 2));
    assert_ne!(agent_slice(&a, 1), agent_slice(&b, 1));
}

#[test]
fn out_of_range_actions_are_rejected() {
    let (dims, p) = model(2, 51);
    let mut g = Graph::new();
    let b = p.bind(&mut g, |_| false);
    let o = g.constant(Tensor::zeros(&[1, 2, OBS_DIM]));
    let e = g.constant(edges(&CommGraph::full(2)));
    let enc = encode(&mut g, &b, &dims, o, e).unwrap();
    assert!(decode_policy(&mut g, &b, &dims, enc.reps, &[0, ACTIONS], e, None).is_err());
    assert!(decode_policy(&mut g, &b, &dims, enc.reps, &[0, 1, 2], e, None).is_err());
}
