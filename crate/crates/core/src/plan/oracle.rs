//! Exact finite-horizon value iteration for small instances, and the
//! adversarial instance on which one-step greedy repair is far from optimal.

use std::collections::{HashMap, VecDeque};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::graph::ConstraintGraph;
use rand::Rng;

use crate::scm::{CascadeRule, ContextSpec, Dynamics, EdgeParams, RandomScmSpec, Scm, ScmParams, TauSpec};
use crate::seed::rng_for;

use super::greedy_action;

/// Largest node count accepted by [`optimal_policy_bruteforce`].
pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Optimal values and actions indexed `[cell][steps_left][bitmap]`, where
/// the bitmap index is [`Bitmap::as_u64`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub horizon: usize,
    pub pruned: bool,
    pub values: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<Vec<Option<usize>>>>,
}

impl ValueTable {
    pub fn value(&self, cell: usize, steps_left: usize, s: &Bitmap) -> f64 {
        self.values[cell][steps_left][s.as_u64() as usize]
    }

    pub fn action(&self, cell: usize, steps_left: usize, s: &Bitmap) -> Option<usize> {
        self.actions[cell][steps_left][s.as_u64() as usize]
    }
}

/// Outcome of [`admissibility_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    pub instances: usize,
    pub states: usize,
    /// Largest |pruned - unpruned| optimal value over every state, step and cell.
    pub worst_gap: f64,
}

/// Draws `instances` random feedback-free Scms with at most 10 nodes and
/// compares pruned and unpruned optimal values at every state.
pub fn admissibility_sweep(instances: usize, horizon: usize, seed: u64) -> Result<AdmissibilityReport> {
    let mut report = AdmissibilityReport {
        instances,
        states: 0,
        worst_gap: 0.0,
    };
    for i in 0..instances {
        let mut rng = rng_for(seed, "admissibility", i as u64);
        let layers = rng.random_range(2..=4u32);
        let width = rng.random_range(1..=(10 / layers as usize).min(4));
        let g = ConstraintGraph::generate_layered(layers, width, rng.random_range(0.2..0.7), &mut rng)?;
        let spec = RandomScmSpec {
            context: if i % 2 == 0 {
                ContextSpec::single()
            } else {
                ContextSpec {
                    bins: vec![2],
                    ranges: vec![(0.5, 1.5)],
                }
            },
            tau_bias: (-3.0, 3.0),
            tau_slope: 2.0,
            onset_factor: rng.random_range(0.0..0.5),
            leak_first_layer: rng.random_range(0.3..0.9),
            leak_other: rng.random_range(0.0..0.4),
            base_fix: rng.random_range(0.6..1.0),
            wrong_order_factor: rng.random_range(0.3..1.0),
            feedback_prob: 0.0,
            ..RandomScmSpec::default()
        };
        let m = Scm::random(g, &spec, &mut rng)?;
        let full = optimal_policy_bruteforce(&m, horizon, false)?;
        let pruned = optimal_policy_bruteforce(&m, horizon, true)?;
        for (a, b) in full.values.iter().flatten().flatten().zip(pruned.values.iter().flatten().flatten()) {
            report.states += 1;
            report.worst_gap = report.worst_gap.max((a - b).abs());
        }
    }
    Ok(report)
}

fn candidate_actions(g: &ConstraintGraph, s: &Bitmap, pruned: bool) -> Vec<usize> {
    if pruned {
        match g.earliest_layer_unchecked(s) {
            Some(l) => s.and(g.layer_mask(l)).iter_ones().collect(),
            None => Vec::new(),
        }
    } else {
        s.iter_ones().collect()
    }
}

/// Value iteration over every bitmap with oracle transition probabilities
/// and per-step reward `-|V'| / n`; the empty set is absorbing with value 0.
/// With `pruned`, only earliest-layer repairs are considered. Ties go to the
/// lowest node id.
pub fn optimal_policy_bruteforce(scm: &Scm, horizon: usize, pruned: bool) -> Result<ValueTable> {
    let n = scm.num_nodes();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            nodes: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let g = scm.graph();
    let size = 1usize << n;
    let mut values = Vec::with_capacity(scm.num_cells());
    let mut actions = Vec::with_capacity(scm.num_cells());
    for cell in 0..scm.num_cells() {
        let dynm = scm.dynamics(cell);
        // per state: per action (action, [(next index, prob)])
        let mut trans: Vec<Vec<(usize, Vec<(usize, f64)>)>> = Vec::with_capacity(size);
        for idx in 0..size {
            let s = Bitmap::from_u64(n, idx as u64);
            trans.push(
                candidate_actions(g, &s, pruned)
                    .into_iter()
                    .map(|a| {
                        let d = dynm.distribution(&s, a);
                        (a, d.into_iter().map(|(b, p)| (b.as_u64() as usize, p)).collect())
                    })
                    .collect(),
            );
        }
        let mut v = vec![vec![0.0; size]];
        let mut pol = vec![vec![None; size]];
        for _ in 1..=horizon {
            let prev = v.last().expect("nonempty");
            let mut cur = vec![0.0; size];
            let mut act = vec![None; size];
            for idx in 1..size {
                let mut best = f64::NEG_INFINITY;
                for (a, dist) in &trans[idx] {
                    let q: f64 = dist
                        .iter()
                        .map(|&(j, p)| p * (-(j.count_ones() as f64) / n as f64 + prev[j]))
                        .sum();
                    if q > best + 1e-12 {
                        best = q;
                        act[idx] = Some(*a);
                    }
                }
                cur[idx] = best;
            }
            v.push(cur);
            pol.push(act);
        }
        values.push(v);
        actions.push(pol);
    }
    Ok(ValueTable {
        horizon,
        pruned,
        values,
        actions,
    })
}

fn single_outcome(model: &Dynamics, s: &Bitmap, a: usize) -> Result<Bitmap> {
    let d = model.distribution(s, a);
    match d.as_slice() {
        [(b, p)] if (*p - 1.0).abs() < 1e-12 => Ok(*b),
        _ => Err(Error::Construction(format!(
            "transition from {} under {a} is not deterministic",
            s.to_hex()
        ))),
    }
}

/// Steps taken by exact one-step greedy (lowest expected next violation
/// count, ties to lowest id) from `start` on a deterministic kernel, or
/// `None` if it has not finished within `limit` steps.
pub fn greedy_steps(model: &Dynamics, start: &Bitmap, limit: usize) -> Result<Option<usize>> {
    let mut s = *start;
    for t in 0..limit {
        if s.none() {
            return Ok(Some(t));
        }
        let actions: Vec<usize> = s.iter_ones().collect();
        let a = greedy_action(model, &s, &actions);
        s = single_outcome(model, &s, a)?;
    }
    Ok(if s.none() { Some(limit) } else { None })
}

/// Fewest steps to the empty set on a deterministic kernel (breadth-first
/// search over all actions), with the first action of a shortest plan.
pub fn optimal_steps(model: &Dynamics, start: &Bitmap, limit: usize) -> Result<Option<(usize, Option<usize>)>> {
    let mut seen: HashMap<Bitmap, Option<usize>> = HashMap::new();
    let mut queue = VecDeque::new();
    seen.insert(*start, None);
    queue.push_back((*start, 0usize));
    while let Some((s, d)) = queue.pop_front() {
        if s.none() {
            return Ok(Some((d, seen[&s])));
        }
        if d == limit {
            continue;
        }
        for a in s.iter_ones() {
            let nx = single_outcome(model, &s, a)?;
            if !seen.contains_key(&nx) {
                let first = if d == 0 { Some(a) } else { seen[&s] };
                seen.insert(nx, first);
                queue.push_back((nx, d + 1));
            }
        }
    }
    Ok(None)
}

/// A verified adversarial instance for one-step greedy repair.
#[derive(Debug, Clone)]
pub struct GreedyGap {
    pub scm: Scm,
    pub layers: u32,
    /// Node whose repair first removes the most violations.
    pub decoy: usize,
    /// Node an optimal plan repairs first.
    pub root: usize,
    pub greedy_steps: usize,
    pub optimal_steps: usize,
}

impl GreedyGap {
    pub fn gap(&self) -> usize {
        self.greedy_steps - self.optimal_steps
    }
}

/// Layer 1 holds a decoy `q` (node 0) and a root `r` (node 1); layer 2 holds
/// `z` (node 2), cleared outright by fixing `q`; layers 2..=L each hold one
/// `y` (nodes 3..) with parents `q` (weight 0) and `r` (weight 1). Every node
/// starts violated and repairs are gated by layer. Fixing `q` first removes
/// two violations but leaves every `y` pinned by `r`, so each must then be
/// repaired on its own; fixing `r` then `q` clears everything in two steps.
///
/// The gap is verified by simulation of greedy, breadth-first search, and
/// value iteration when small enough; a failed check is an error.
pub fn greedy_gap_instance(layers: u32) -> Result<GreedyGap> {
    if layers < 3 {
        return Err(Error::InvalidParameter("greedy gap instance needs L >= 3".into()));
    }
    let (q, r, z) = (0usize, 1usize, 2usize);
    let mut layer_of = vec![1, 1, 2];
    let mut edges = vec![(q, z)];
    for l in 2..=layers {
        let y = layer_of.len();
        layer_of.push(l);
        edges.push((q, y));
        edges.push((r, y));
    }
    let g = ConstraintGraph::with_loa(layer_of, edges)?;
    let n = g.num_nodes();
    let params = ScmParams {
        context: ContextSpec::single(),
        edges: g
            .edges()
            .iter()
            .map(|&(u, _)| EdgeParams {
                tau: TauSpec::Constant {
                    p: if u == r { 1.0 } else { 0.0 },
                },
                onset_factor: 0.0,
            })
            .collect(),
        base_fix: vec![1.0; n],
        wrong_order_factor: 1.0,
        layer_gating: true,
        feedback_prob: 0.0,
        declared_regular: true,
        noise_sd: 0.0,
        leak: vec![1.0; n],
        require_violation: false,
        cascade: CascadeRule::default(),
    };
    let scm = Scm::new(g, params)?;
    let start = Bitmap::ones(n);
    let model = scm.dynamics(0);
    let limit = 4 * n;
    let greedy = greedy_steps(&model, &start, limit)?
        .ok_or_else(|| Error::Construction("greedy never clears the instance".into()))?;
    let (opt, first) = optimal_steps(&model, &start, limit)?
        .ok_or_else(|| Error::Construction("instance cannot be cleared".into()))?;
    let need = layers as usize - 2;
    if greedy < opt + need {
        return Err(Error::Construction(format!(
            "gap {} below L - 2 = {need}",
            greedy - opt
        )));
    }
    if first != Some(r) {
        return Err(Error::Construction("shortest plan does not start at the root".into()));
    }
    if n <= BRUTE_FORCE_LIMIT {
        let vt = optimal_policy_bruteforce(&scm, greedy, false)?;
        if vt.action(0, greedy, &start) != Some(r) {
            return Err(Error::Construction(
                "value iteration does not repair the root first".into(),
            ));
        }
    }
    Ok(GreedyGap {
        scm,
        layers,
        decoy: q,
        root: r,
        greedy_steps: greedy,
        optimal_steps: opt,
    })
}
