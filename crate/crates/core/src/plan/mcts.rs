//! UCT over count states. Tree nodes are keyed by depth and per-layer
//! violation counts; each simulation carries its own concrete bitmap, so the
//! available actions at a node are those of the particle that reached it.

use std::collections::{BTreeMap, HashMap};

use crate::bitmap::Bitmap;
use crate::compress::layer_counts;
use crate::error::{Error, Result};
use crate::scm::Dynamics;
use crate::seed::SimRng;

use super::{greedy_action, PlannerConfig};

#[derive(Default)]
struct Node {
    visits: u32,
    /// action -> (visits, summed normalized return)
    arms: BTreeMap<usize, (u32, f64)>,
}

impl Node {
    /// UCB1 on arm means rescaled to [0, 1] within the node. Per-step
    /// differences between actions are about `1/n` of the return scale, so
    /// raw means would leave the exploration term dominant.
    fn select(&self, actions: &[usize], c: f64) -> usize {
        if let Some(&a) = actions.iter().find(|a| !self.arms.contains_key(a)) {
            return a;
        }
        let means: Vec<f64> = actions
            .iter()
            .map(|a| {
                let (n, sum) = self.arms[a];
                sum / n as f64
            })
            .collect();
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let ln = (self.visits.max(1) as f64).ln();
        let mut best = actions[0];
        let mut best_score = f64::NEG_INFINITY;
        for (&a, &q) in actions.iter().zip(&means) {
            let n = self.arms[&a].0;
            let q = if span > 0.0 { (q - lo) / span } else { 0.5 };
            let score = q + c * (ln / n as f64).sqrt();
            if score > best_score {
                best_score = score;
                best = a;
            }
        }
        best
    }
}

fn expand_actions(model: &Dynamics, b: &Bitmap, pruning: bool) -> Vec<usize> {
    if pruning {
        match model.graph.earliest_layer_unchecked(b) {
            Some(l) => b.and(model.graph.layer_mask(l)).iter_ones().collect(),
            None => Vec::new(),
        }
    } else {
        b.iter_ones().collect()
    }
}

/// Picks an action from `actions` at bitmap `s` with `remaining` steps left
/// in the episode. Depth 1 scores each action by its exact expected next
/// violation count; deeper searches run `simulations` UCT rollouts of at most
/// `depth` steps and return the most visited root action. Ties go to the
/// lowest node id.
pub fn mcts_plan(
    model: &Dynamics,
    s: &Bitmap,
    actions: &[usize],
    cfg: &PlannerConfig,
    remaining: usize,
    rng: &mut SimRng,
) -> Result<usize> {
    cfg.validate()?;
    let mut sorted = actions.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(Error::InvalidParameter("no actions to plan over".into()));
    }
    if let Some(&a) = sorted.iter().find(|&&a| !s.get(a)) {
        return Err(Error::ActionNotViolated(a));
    }
    if sorted.len() == 1 {
        return Ok(sorted[0]);
    }
    if cfg.depth == 1 {
        return Ok(greedy_action(model, s, &sorted));
    }
    let n = model.num_nodes() as f64;
    let remaining = remaining.max(1);
    let g = model.graph;
    let mut tree: HashMap<(usize, Vec<u32>), Node> = HashMap::new();
    let root_key = (0, layer_counts(g, s));
    let mut path: Vec<((usize, Vec<u32>), usize)> = Vec::with_capacity(cfg.depth);
    let mut rewards: Vec<f64> = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.simulations {
        path.clear();
        rewards.clear();
        let mut b = *s;
        for d in 0..cfg.depth.min(remaining) {
            if b.none() {
                break;
            }
            let (key, acts) = if d == 0 {
                (root_key.clone(), sorted.clone())
            } else {
                ((d, layer_counts(g, &b)), expand_actions(model, &b, cfg.use_pruning))
            };
            let a = tree.entry(key.clone()).or_default().select(&acts, cfg.exploration);
            b = model.step(&b, a, rng);
            rewards.push(-(b.count_ones() as f64) / n);
            path.push((key, a));
        }
        let left = remaining - rewards.len();
        let mut ret = -(b.count_ones() as f64) / n * left as f64;
        for (i, (key, a)) in path.iter().enumerate().rev() {
            ret += rewards[i];
            let node = tree.get_mut(key).expect("visited node");
            node.visits += 1;
            let arm = node.arms.entry(*a).or_insert((0, 0.0));
            arm.0 += 1;
            arm.1 += ret / (remaining - i) as f64;
        }
    }
    let root = &tree[&root_key];
    let mut best = sorted[0];
    let mut most = 0;
    for &a in &sorted {
        let v = root.arms.get(&a).map_or(0, |x| x.0);
        if v > most {
            most = v;
            best = a;
        }
    }
    Ok(best)
}
