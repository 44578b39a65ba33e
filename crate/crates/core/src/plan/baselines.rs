//! Baseline policies that are not configurations of the main planner:
//! exact one-step greedy and offline tabular Q over bitmaps or count states.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::bitmap::Bitmap;
use crate::compress::layer_counts;
use crate::error::Result;
use crate::graph::ConstraintGraph;
use crate::scm::{Dataset, Dynamics, Policy, ViolationState};
use crate::seed::SimRng;

/// Action with the lowest expected next violation count under `model`;
/// ties go to the lowest node id. `actions` must be nonempty.
pub fn greedy_action(model: &Dynamics, s: &Bitmap, actions: &[usize]) -> usize {
    let mut best = actions[0];
    let mut best_v = f64::INFINITY;
    for &a in actions {
        let v = model.expected_next_count(s, a);
        if v < best_v - 1e-12 || (v < best_v + 1e-12 && a < best) {
            best_v = v;
            best = a;
        }
    }
    best
}

/// State and action space of a tabular learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionAbstraction {
    /// Raw bitmaps; actions are node ids.
    Bitmap,
    /// Per-layer counts; actions are layers, executed on the lowest violated
    /// node id of the chosen layer.
    Counts,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Key {
    Bits(usize, Bitmap),
    Counts(usize, Vec<u32>),
}

/// Q values fit offline by value iteration on the empirical transition
/// model of a logged dataset. Unvisited next states are valued at the
/// pessimistic completion cost; unvisited current states are acted on
/// uniformly at random.
#[derive(Debug, Clone)]
pub struct TabularQ {
    pub abstraction: ActionAbstraction,
    graph: ConstraintGraph,
    q: HashMap<Key, BTreeMap<usize, f64>>,
}

impl TabularQ {
    fn key(&self, cell: usize, b: &Bitmap) -> Key {
        key_of(self.abstraction, &self.graph, cell, b)
    }

    fn abstract_action(&self, a: usize) -> usize {
        match self.abstraction {
            ActionAbstraction::Bitmap => a,
            ActionAbstraction::Counts => self.graph.layer(a) as usize,
        }
    }

    fn concrete(&self, s: &Bitmap, x: usize) -> Option<usize> {
        match self.abstraction {
            ActionAbstraction::Bitmap => s.get(x).then_some(x),
            ActionAbstraction::Counts => s.and(self.graph.layer_mask(x as u32)).iter_ones().next(),
        }
    }

    /// Fits with `sweeps` rounds of undiscounted value iteration.
    pub fn fit(d: &Dataset, g: &ConstraintGraph, abstraction: ActionAbstraction, sweeps: usize) -> Self {
        let n = g.num_nodes() as f64;
        let mut model: HashMap<Key, BTreeMap<usize, HashMap<Key, (usize, f64)>>> = HashMap::new();
        let mut ids: HashMap<Key, usize> = HashMap::new();
        let mut me = TabularQ {
            abstraction,
            graph: g.clone(),
            q: HashMap::new(),
        };
        for (cell, t) in d.transitions() {
            let k = me.key(cell, &t.state);
            let nk = me.key(cell, &t.next);
            let x = me.abstract_action(t.action);
            let size = t.next.count_ones() as f64;
            let e = model.entry(k).or_default().entry(x).or_default().entry(nk.clone()).or_insert((0, size));
            e.0 += 1;
            let len = ids.len();
            ids.entry(nk).or_insert(len);
        }
        let mut v: HashMap<Key, f64> = HashMap::new();
        for k in 1..=sweeps.max(1) {
            let later = (k - 1) as f64;
            let mut q: HashMap<Key, BTreeMap<usize, f64>> = HashMap::new();
            for (s, acts) in &model {
                let row = q.entry(s.clone()).or_default();
                for (&x, outs) in acts {
                    let total: usize = outs.values().map(|o| o.0).sum();
                    let mut acc = 0.0;
                    for (nk, &(c, size)) in outs {
                        let cont = if size == 0.0 {
                            0.0
                        } else {
                            v.get(nk).copied().unwrap_or(-size / n * later)
                        };
                        acc += c as f64 * (-size / n + cont);
                    }
                    row.insert(x, acc / total as f64);
                }
            }
            v = q
                .iter()
                .map(|(s, row)| (s.clone(), row.values().copied().fold(f64::NEG_INFINITY, f64::max)))
                .collect();
            me.q = q;
        }
        me
    }

    pub fn num_states(&self) -> usize {
        self.q.len()
    }
}

fn key_of(abstraction: ActionAbstraction, g: &ConstraintGraph, cell: usize, b: &Bitmap) -> Key {
    match abstraction {
        ActionAbstraction::Bitmap => Key::Bits(cell, *b),
        ActionAbstraction::Counts => Key::Counts(cell, layer_counts(g, b)),
    }
}

impl Policy for TabularQ {
    fn choose(&mut self, s: &ViolationState, rng: &mut SimRng) -> Result<(usize, Option<f64>)> {
        let key = self.key(s.context.cell, &s.bitmap);
        if let Some(row) = self.q.get(&key) {
            let mut best: Option<(usize, f64)> = None;
            for (&x, &val) in row {
                if let Some(a) = self.concrete(&s.bitmap, x) {
                    if best.is_none_or(|(_, b)| val > b + 1e-12) {
                        best = Some((a, val));
                    }
                }
            }
            if let Some((a, _)) = best {
                return Ok((a, None));
            }
        }
        let v: Vec<usize> = s.bitmap.iter_ones().collect();
        if v.is_empty() {
            return Err(crate::error::Error::InvalidParameter("no violated node to repair".into()));
        }
        Ok((v[rng.random_range(0..v.len())], None))
    }
}
