use super::*;
use crate::scm::{ContextSpec, RandomScmSpec, ScmParams, TopologicalPolicy, UniformPolicy};
use crate::seed::{rng, rng_for};
use proptest::prelude::*;

fn state(n: usize, on: &[usize]) -> ViolationState {
    ViolationState {
        bitmap: Bitmap::from_indices(n, on),
        context: ContextSpec::single().cell_context(0),
        step: 0,
    }
}

fn four_layers() -> ConstraintGraph {
    ConstraintGraph::new(vec![1, 1, 2, 2, 3, 3, 4, 4], vec![(0, 2), (2, 4), (4, 6)]).unwrap()
}

#[test]
fn pruning_keeps_earliest_layer() {
    let g = four_layers();
    assert_eq!(prune_actions(&g, &state(8, &[2, 3, 6, 7])), vec![2, 3]);
    assert_eq!(prune_actions(&g, &state(8, &[7])), vec![7]);
    assert!(prune_actions(&g, &state(8, &[])).is_empty());
}

#[test]
fn flat_thompson_draws_are_uniform() {
    let post = EdgePosterior::flat(10_000);
    let mut draws = thompson_sample(&post, &mut rng(3)).unwrap();
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = draws.len() as f64;
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    // Kolmogorov critical value at level 0.01
    assert!(ks < 1.628 / n.sqrt(), "KS distance {ks}");
}

#[test]
fn concentrated_and_reproducible_draws() {
    let post = EdgePosterior {
        alpha: vec![1e6; 5],
        beta: vec![1.0; 5],
        observed: vec![0; 5],
    };
    assert!(thompson_sample(&post, &mut rng(1)).unwrap().iter().all(|&x| x > 0.99));
    let flat = EdgePosterior::flat(7);
    assert_eq!(
        thompson_sample(&flat, &mut rng(9)).unwrap(),
        thompson_sample(&flat, &mut rng(9)).unwrap()
    );
}

#[test]
fn conjugate_bookkeeping() {
    let g = ConstraintGraph::new(vec![1, 2, 2], vec![(0, 1), (0, 2)]).unwrap();
    let mut p = EdgePosterior::seeded(&[0.25, 0.5], 4.0);
    assert_eq!((p.alpha[0], p.beta[0]), (2.0, 4.0));
    let (a0, b0) = (p.alpha.clone(), p.beta.clone());
    let all = Bitmap::from_indices(3, &[0, 1, 2]);
    // child 1 stays, child 2 clears, three times
    for _ in 0..3 {
        let ev = p.update_from_step(&g, &all, 0, &Bitmap::from_indices(3, &[1]));
        assert_eq!(ev, vec![(0, true), (1, false)]);
    }
    // a failed repair is not evidence
    assert!(p.update_from_step(&g, &all, 0, &all).is_empty());
    assert_eq!(p.alpha[0], a0[0] + 3.0);
    assert_eq!(p.beta[0], b0[0]);
    assert_eq!(p.alpha[1], a0[1]);
    assert_eq!(p.beta[1], b0[1] + 3.0);
    assert_eq!(p.observed, vec![3, 3]);
}

/// Two layer-1 nodes: node 0 has three layer-2 children, node 1 has one;
/// all downstream weights are 0 and everything starts violated.
fn two_action_instance() -> Scm {
    let g = ConstraintGraph::new(
        vec![1, 1, 2, 2, 2, 2],
        vec![(0, 2), (0, 3), (0, 4), (1, 5)],
    )
    .unwrap();
    Scm::new(g.clone(), ScmParams::uniform(&g, 0.0, 1.0)).unwrap()
}

#[test]
fn search_prefers_the_root_with_more_descendants() {
    let m = two_action_instance();
    let cfg = PlannerConfig {
        depth: 2,
        simulations: 200,
        ..Default::default()
    };
    let s = Bitmap::ones(6);
    let model = m.dynamics(0);
    let hits = (0..100)
        .filter(|&seed| mcts_plan(&model, &s, &[0, 1], &cfg, 10, &mut rng(seed)).unwrap() == 0)
        .count();
    assert!(hits >= 95, "root chosen {hits}/100");
}

#[test]
fn depth_one_is_greedy() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let g = ConstraintGraph::generate_layered(3, 3, 0.5, &mut r).unwrap();
        let m = Scm::random(g, &RandomScmSpec::default(), &mut r).unwrap();
        let cfg = PlannerConfig {
            depth: 1,
            ..Default::default()
        };
        let s = m.sample_initial(&mut r);
        let acts: Vec<usize> = s.bitmap.iter_ones().collect();
        let model = m.dynamics(s.context.cell);
        let a = mcts_plan(&model, &s.bitmap, &acts, &cfg, 5, &mut r).unwrap();
        assert_eq!(a, greedy_action(&model, &s.bitmap, &acts));
    }
}

#[test]
fn single_action_skips_search() {
    let m = two_action_instance();
    let mut r = rng(5);
    let before = r.clone();
    let a = mcts_plan(&m.dynamics(0), &Bitmap::ones(6), &[1], &PlannerConfig::default(), 5, &mut r).unwrap();
    assert_eq!(a, 1);
    assert_eq!(r, before);
    assert!(mcts_plan(&m.dynamics(0), &Bitmap::ones(6), &[], &PlannerConfig::default(), 5, &mut r).is_err());
    let bad = PlannerConfig {
        simulations: 0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

fn small_random(seed: u64) -> Scm {
    let mut r = rng(seed);
    let g = ConstraintGraph::generate_layered(3, 3, 0.4, &mut r).unwrap();
    Scm::random(g, &RandomScmSpec::default(), &mut r).unwrap()
}

#[test]
fn planner_terminates_and_reproduces() {
    let m = small_random(4);
    let cfg = PlannerConfig {
        horizon: 12,
        simulations: 16,
        ..Default::default()
    };
    let w = WeightTable::oracle(&m);
    let empty = ViolationState {
        bitmap: Bitmap::zeros(9),
        context: m.context_spec().cell_context(0),
        step: 0,
    };
    let ep = run_planner(&m, &cfg, w.clone(), None, empty, &mut rng(1), &mut rng(2), 0).unwrap();
    assert_eq!(ep.episode.outcome, crate::scm::Outcome::Success);
    assert_eq!(ep.episode.steps(), 0);
    let run = |s: u64| {
        let start = m.sample_initial(&mut rng_for(s, "init", 0));
        run_planner(&m, &cfg, w.clone(), None, start, &mut rng(s), &mut rng(s + 100), 0).unwrap()
    };
    let (a, b) = (run(7), run(7));
    assert_eq!(a.episode, b.episode);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.len(), a.episode.steps());
    assert!(a.trace.iter().all(|t| t.pruned >= 1 && t.weights_digest.len() == 16));
}

#[test]
fn greedy_gap_grows_with_depth() {
    for l in 3..=6 {
        let gg = greedy_gap_instance(l).unwrap();
        assert!(gg.gap() >= l as usize - 2, "L={l} gap {}", gg.gap());
        assert_eq!(gg.optimal_steps, 2);
        assert_eq!(gg.greedy_steps, l as usize + 1);
    }
    assert!(greedy_gap_instance(2).is_err());
}

#[test]
fn brute_force_trivial_cases() {
    let g = ConstraintGraph::new(vec![1], vec![]).unwrap();
    let m = Scm::new(g.clone(), ScmParams::uniform(&g, 0.0, 1.0)).unwrap();
    let vt = optimal_policy_bruteforce(&m, 3, false).unwrap();
    assert_eq!(vt.value(0, 3, &Bitmap::zeros(1)), 0.0);
    assert_eq!(vt.value(0, 1, &Bitmap::ones(1)), 0.0);
    assert_eq!(vt.action(0, 1, &Bitmap::ones(1)), Some(0));
    let big = ConstraintGraph::new(vec![1; 13], vec![]).unwrap();
    let m = Scm::new(big.clone(), ScmParams::uniform(&big, 0.0, 1.0)).unwrap();
    assert!(matches!(
        optimal_policy_bruteforce(&m, 2, false),
        Err(Error::TooLarge { nodes: 13, limit: 12 })
    ));
}

#[test]
fn pruning_is_admissible_without_feedback() {
    for seed in 0..8 {
        let mut r = rng(seed);
        let g = ConstraintGraph::generate_layered(3, 3, 0.4, &mut r).unwrap();
        let spec = RandomScmSpec {
            context: ContextSpec::single(),
            ..Default::default()
        };
        let m = Scm::random(g, &spec, &mut r).unwrap();
        let full = optimal_policy_bruteforce(&m, 6, false).unwrap();
        let pruned = optimal_policy_bruteforce(&m, 6, true).unwrap();
        let worst = full.values[0]
            .iter()
            .flatten()
            .zip(pruned.values[0].iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "seed {seed}: {worst}");
    }
}

#[test]
fn topological_order_is_optimal_on_chains() {
    for tau in [0.0, 1.0] {
        let g = ConstraintGraph::new(vec![1, 2, 3, 4], vec![(0, 1), (1, 2), (2, 3)]).unwrap();
        let m = Scm::new(g.clone(), ScmParams::uniform(&g, tau, 1.0)).unwrap();
        let start = m.sample_initial(&mut rng(0));
        let ep = rollout_from(&m, start, &mut TopologicalPolicy { graph: &g }, 10, &mut rng(1), &mut rng(2), 0)
            .unwrap();
        let (opt, _) = optimal_steps(&m.dynamics(0), &Bitmap::ones(4), 10).unwrap().unwrap();
        assert_eq!(ep.steps(), opt, "tau {tau}");
    }
}

#[test]
fn tabular_learners_recover_good_policies() {
    let m = two_action_instance();
    let d = crate::scm::generate_dataset_with(&m, &mut UniformPolicy, 400, 8, 3).unwrap();
    for abs in [ActionAbstraction::Bitmap, ActionAbstraction::Counts] {
        let mut q = TabularQ::fit(&d, m.graph(), abs, 8);
        assert!(q.num_states() > 0);
        let (a, _) = q.choose(&state(6, &[0, 1, 2, 3, 4, 5]), &mut rng(0)).unwrap();
        match abs {
            ActionAbstraction::Bitmap => assert_eq!(a, 0),
            // layer 1 is the best layer; its lowest violated node is 0
            ActionAbstraction::Counts => assert_eq!(a, 0),
        }
    }
}

proptest! {
    #[test]
    fn posterior_mean_in_unit_interval(w in proptest::collection::vec(0.0f64..=1.0, 1..8), k in 0.0f64..50.0) {
        let p = EdgePosterior::seeded(&w, k);
        for e in 0..w.len() {
            prop_assert!(p.alpha[e] >= 1.0 && p.beta[e] >= 1.0);
            let m = p.mean(e);
            prop_assert!(m > 0.0 && m < 1.0);
        }
    }

    #[test]
    fn pruned_set_is_within_one_layer(bits in 1u64..256) {
        let g = four_layers();
        let s = state(8, &Bitmap::from_u64(8, bits).iter_ones().collect::<Vec<_>>());
        let a = prune_actions(&g, &s);
        prop_assert!(!a.is_empty() && a.len() <= g.width());
        let l = g.layer(a[0]);
        prop_assert!(a.iter().all(|&x| g.layer(x) == l && s.bitmap.get(x)));
        prop_assert!(s.bitmap.iter_ones().all(|x| g.layer(x) >= l));
    }
}
