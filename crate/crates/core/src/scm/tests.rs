use super::*;
use crate::seed::{rng, rng_for};
use proptest::prelude::*;

fn single_cell_state(b: Bitmap) -> ViolationState {
    ViolationState {
        bitmap: b,
        context: ContextSpec::single().cell_context(0),
        step: 0,
    }
}

#[test]
fn reward_is_negative_violation_fraction() {
    let b = Bitmap::from_indices(10, &[1, 4, 7]);
    assert!((reward(&b) - (-0.3)).abs() < 1e-15);
    assert_eq!(reward(&Bitmap::zeros(10)), 0.0);
}

#[test]
fn lone_node_repair_is_absorbing() {
    let g = ConstraintGraph::new(vec![1], vec![]).unwrap();
    let m = Scm::new(g.clone(), ScmParams::uniform(&g, 0.5, 1.0)).unwrap();
    let s = single_cell_state(Bitmap::ones(1));
    let (next, r) = m.step(&s, 0, &mut rng(0)).unwrap();
    assert!(next.bitmap.none());
    assert_eq!(r, 0.0);
    assert_eq!(next.step, 1);
}

#[test]
fn step_rejects_satisfied_action() {
    let g = ConstraintGraph::new(vec![1, 2], vec![(0, 1)]).unwrap();
    let m = Scm::new(g.clone(), ScmParams::uniform(&g, 0.5, 1.0)).unwrap();
    let s = single_cell_state(Bitmap::from_indices(2, &[1]));
    assert_eq!(m.step(&s, 0, &mut rng(0)).unwrap_err(), Error::ActionNotViolated(0));
}

#[test]
fn certain_propagation_keeps_child() {
    let g = ConstraintGraph::new(vec![1, 2], vec![(0, 1)]).unwrap();
    let m = Scm::new(g.clone(), ScmParams::uniform(&g, 1.0, 1.0)).unwrap();
    let s = single_cell_state(Bitmap::ones(2));
    let mut r = rng(5);
    let mut stays = 0;
    for _ in 0..10_000 {
        let (next, _) = m.step(&s, 0, &mut r).unwrap();
        assert!(!next.bitmap.get(0));
        stays += next.bitmap.get(1) as usize;
    }
    assert_eq!(stays, 10_000);
}

#[test]
fn constant_and_logistic_weights() {
    let g = ConstraintGraph::new(vec![1, 1, 2], vec![(0, 2), (1, 2)]).unwrap();
    let mut p = ScmParams::uniform(&g, 0.4, 0.5);
    p.context = ContextSpec::default();
    p.edges[1].tau = TauSpec::Logistic {
        bias: 0.0,
        slopes: vec![1.0, 0.0],
    };
    let m = Scm::new(g, p).unwrap();
    for cell in 0..9 {
        for pat in [Bitmap::zeros(3), Bitmap::from_indices(3, &[1])] {
            if !pat.get(1) {
                assert_eq!(m.true_edge_weight(0, 2, cell, &pat).unwrap(), 0.4);
            }
        }
    }
    // middle bin of dimension 0 sits at the center of the range
    let mid = m.context_spec().cell_of(&[1, 0]);
    assert_eq!(m.tau(1, mid), 0.5);
    assert_eq!(
        m.true_edge_weight(2, 0, 0, &Bitmap::zeros(3)).unwrap_err(),
        Error::NotAnEdge(2, 0)
    );
}

/// u (0) and z (1) in layer 1 are both parents of v (2).
fn triangle() -> Scm {
    let g = ConstraintGraph::new(vec![1, 1, 2], vec![(0, 2), (1, 2)]).unwrap();
    let mut p = ScmParams::uniform(&g, 0.0, 0.0);
    p.edges[0].tau = TauSpec::Constant { p: 0.3 };
    p.edges[1].tau = TauSpec::Constant { p: 0.5 };
    p.leak = vec![0.6, 0.4, 0.7];
    p.layer_gating = false;
    Scm::new(g, p).unwrap()
}

#[test]
fn marginal_weight_matches_hand_enumeration() {
    let m = triangle();
    // z is independent of (u, v) initially: P(z) = 0.4.
    // z satisfied: stay 0.3. z violated: 1 - 0.7 * 0.5 = 0.65.
    let expect = 0.6 * 0.3 + 0.4 * 0.65;
    let got = m.marginal_edge_weight_init(0, 2, 0).unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    let z = m.coparent_distribution(0, 2, 0).unwrap();
    assert_eq!(z.len(), 2);
    assert!((z[1].1 - 0.4).abs() < 1e-12);
}

#[test]
fn initial_distribution_normalizes_and_matches_sampling() {
    let mut r = rng(9);
    let g = ConstraintGraph::generate_layered(2, 3, 0.5, &mut r).unwrap();
    let m = Scm::random(g, &RandomScmSpec::default(), &mut r).unwrap();
    for cell in [0, 4, 8] {
        let d = m.initial_distribution(cell).unwrap();
        let total: f64 = d.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|(b, _)| b.any()));
        let draws = 40_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..draws {
            *counts.entry(m.sample_initial_bitmap(cell, &mut r)).or_insert(0usize) += 1;
        }
        for (b, p) in &d {
            let f = *counts.get(b).unwrap_or(&0) as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((f - p).abs() < 5.0 * se + 1e-4, "{b:?}: {f} vs {p}");
        }
    }
}

#[test]
fn sampled_steps_match_exact_distribution() {
    let mut r = rng(21);
    let g = ConstraintGraph::generate_layered(3, 2, 0.6, &mut r).unwrap();
    let spec = RandomScmSpec {
        feedback_prob: 0.2,
        wrong_order_factor: 0.6,
        base_fix: 0.9,
        layer_gating: false,
        ..RandomScmSpec::default()
    };
    let m = Scm::random(g, &spec, &mut r).unwrap();
    let s = ViolationState {
        bitmap: Bitmap::from_indices(6, &[1, 2, 3, 5]),
        context: m.context_spec().cell_context(3),
        step: 0,
    };
    for a in s.bitmap.iter_ones() {
        let d = m.transition_distribution(&s, a).unwrap();
        let draws = 20_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..draws {
            let (nx, _) = m.step(&s, a, &mut r).unwrap();
            *counts.entry(nx.bitmap).or_insert(0usize) += 1;
        }
        assert!(counts.keys().all(|b| d.iter().any(|x| x.0 == *b)));
        for (b, p) in &d {
            let f = *counts.get(b).unwrap_or(&0) as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((f - p).abs() < 5.0 * se + 2e-4);
        }
    }
}

#[test]
fn monotone_policy_never_moves_earliest_layer_back() {
    let mut r = rng(4);
    let g = ConstraintGraph::generate_layered(4, 3, 0.3, &mut r).unwrap();
    let m = Scm::random(g, &RandomScmSpec::default(), &mut r).unwrap();
    let mut pol = TopologicalPolicy { graph: m.graph() };
    for i in 0..1000 {
        let ep = rollout_episode(
            &m,
            &mut pol,
            16,
            &mut rng_for(1, "env", i),
            &mut rng_for(1, "pol", i),
            i as usize,
        )
        .unwrap();
        let mut prev = 0;
        for t in &ep.transitions {
            let l = m.graph().earliest_layer_unchecked(&t.state).unwrap();
            assert!(l >= prev);
            prev = l;
        }
    }
}

#[test]
fn empty_and_one_step_episodes() {
    let g = ConstraintGraph::new(vec![1], vec![]).unwrap();
    let empty = Scm::new(g.clone(), ScmParams::uniform(&g, 0.5, 0.0)).unwrap();
    let mut pol = UniformPolicy;
    let ep = rollout_episode(&empty, &mut pol, 5, &mut rng(0), &mut rng(1), 0).unwrap();
    assert_eq!(ep.outcome, Outcome::Success);
    assert!(ep.transitions.is_empty());
    let one = Scm::new(g.clone(), ScmParams::uniform(&g, 0.5, 1.0)).unwrap();
    let ep = rollout_episode(&one, &mut pol, 5, &mut rng(0), &mut rng(1), 0).unwrap();
    assert_eq!(ep.outcome, Outcome::Success);
    assert_eq!(ep.steps(), 1);
}

#[test]
fn cascade_rule_fires_on_growth() {
    // repairing the root never works (base_fix 0) and onset floods the chain
    let g = ConstraintGraph::new(vec![1, 2, 3, 4], vec![(0, 1), (1, 2), (2, 3)]).unwrap();
    let mut p = ScmParams::uniform(&g, 1.0, 0.0);
    p.leak[0] = 1.0;
    p.base_fix[0] = 0.0;
    for e in p.edges.iter_mut() {
        e.onset_factor = 1.0;
    }
    let s = Scm::new(g, p).unwrap();
    let start = single_cell_state(Bitmap::from_indices(4, &[0]));
    let mut pol = UniformPolicy;
    let ep = rollout_from(&s, start, &mut pol, 10, &mut rng(0), &mut rng(0), 0).unwrap();
    assert_eq!(ep.outcome, Outcome::CascadeFailure);
}

#[test]
fn dataset_propensities_and_roundtrip() {
    let mut r = rng(8);
    let g = ConstraintGraph::generate_layered(3, 3, 0.3, &mut r).unwrap();
    let m = Scm::random(g, &RandomScmSpec::default(), &mut r).unwrap();
    let d = generate_dataset(&m, 1.0, 300, 12, 77).unwrap();
    assert_eq!(d.episodes.len(), 300);
    for (_, t) in d.transitions() {
        let p = t.propensity.unwrap();
        assert!((p - 1.0 / t.state.count_ones() as f64).abs() < 1e-15);
        assert_eq!(t.reward, reward(&t.next));
    }
    let d2 = generate_dataset(&m, 1.0, 300, 12, 77).unwrap();
    assert_eq!(d, d2);
    let mut buf = Vec::new();
    d.write(&mut buf).unwrap();
    let back = Dataset::read(std::io::Cursor::new(&buf), &m).unwrap();
    assert_eq!(back, d);
    assert!(generate_dataset(&m, 0.0, 1, 1, 0).is_err());
}

#[test]
fn validation_catches_bad_parameters() {
    let g = ConstraintGraph::new(vec![1, 2], vec![(0, 1)]).unwrap();
    let mut p = ScmParams::uniform(&g, 0.5, 0.5);
    p.feedback_prob = 0.1;
    assert!(Scm::new(g.clone(), p.clone()).is_err());
    p.declared_regular = false;
    assert!(Scm::new(g.clone(), p.clone()).is_ok());
    p.edges[0].onset_factor = 3.0;
    assert!(Scm::new(g.clone(), p.clone()).is_err());
    let mut q = ScmParams::uniform(&g, 0.5, 0.5);
    q.leak.pop();
    assert!(Scm::new(g, q).is_err());
}

#[test]
fn toml_roundtrip_preserves_hash() {
    let mut r = rng(2);
    let g = ConstraintGraph::generate_layered(2, 2, 0.5, &mut r).unwrap();
    let m = Scm::random(g, &RandomScmSpec::default(), &mut r).unwrap();
    let text = toml::to_string(&m.to_file()).unwrap();
    let back: ScmFile = toml::from_str(&text).unwrap();
    let m2 = Scm::from_file(&back).unwrap();
    assert_eq!(m.descriptor_hash(), m2.descriptor_hash());
}

fn small_scm(seed: u64, gating: bool, feedback: f64) -> Scm {
    let mut r = rng(seed);
    let g = ConstraintGraph::generate_layered(3, 2, 0.5, &mut r).unwrap();
    let g = g.inject_backward_edges(0.1, &mut r).unwrap();
    let spec = RandomScmSpec {
        layer_gating: gating,
        feedback_prob: feedback,
        base_fix: 0.8,
        context: ContextSpec::single(),
        ..RandomScmSpec::default()
    };
    Scm::random(g, &spec, &mut r).unwrap()
}

proptest! {
    #[test]
    fn distribution_is_normalized_and_marginals_agree(seed in 0u64..300, bits in 1u64..64, gating: bool, fb in 0.0f64..0.5) {
        let m = small_scm(seed, gating, fb);
        let s = single_cell_state(Bitmap::from_u64(6, bits));
        let dynamics = m.dynamics(0);
        for a in s.bitmap.iter_ones() {
            let d = dynamics.distribution(&s.bitmap, a);
            let total: f64 = d.iter().map(|x| x.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let marg = dynamics.node_marginals(&s.bitmap, a);
            for w in 0..6 {
                let pw: f64 = d.iter().filter(|x| x.0.get(w)).map(|x| x.1).sum();
                prop_assert!((pw - marg[w]).abs() < 1e-12);
            }
            let exp: f64 = d.iter().map(|x| x.1 * x.0.count_ones() as f64).sum();
            prop_assert!((exp - dynamics.expected_next_count(&s.bitmap, a)).abs() < 1e-12);
        }
    }

    #[test]
    fn rewards_bounded(seed in 0u64..200) {
        let m = small_scm(seed, true, 0.0);
        let mut pol = UniformPolicy;
        let ep = rollout_episode(&m, &mut pol, 10, &mut rng(seed), &mut rng(seed + 1), 0).unwrap();
        for t in &ep.transitions {
            prop_assert!((-1.0..=0.0).contains(&t.reward));
            prop_assert_eq!(t.reward == 0.0, t.next.none());
        }
        prop_assert_eq!(ep.outcome == Outcome::Success, ep.final_bitmap().none());
    }

    #[test]
    fn earliest_layer_repair_does_not_raise_expected_count(seed in 0u64..300, bits in 1u64..64) {
        // no onset, no feedback, every weight below one
        let mut r = rng(seed);
        let g = ConstraintGraph::generate_layered(3, 2, 0.5, &mut r).unwrap();
        let spec = RandomScmSpec { onset_factor: 0.0, context: ContextSpec::single(), ..RandomScmSpec::default() };
        let m = Scm::random(g, &spec, &mut r).unwrap();
        let b = Bitmap::from_u64(6, bits);
        let l = m.graph().earliest_layer_unchecked(&b).unwrap();
        let dynamics = m.dynamics(0);
        for a in b.and(m.graph().layer_mask(l)).iter_ones() {
            prop_assert!(dynamics.expected_next_count(&b, a) <= b.count_ones() as f64 + 1e-12);
        }
    }
}
