//! Repair policies and the logging policies used to collect datasets.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::ConstraintGraph;
use crate::seed::SimRng;

use super::ViolationState;

/// Anything that picks a violated node to repair.
pub trait Policy {
    /// Returns the chosen action and its probability under the policy when known.
    fn choose(&mut self, state: &ViolationState, rng: &mut SimRng) -> Result<(usize, Option<f64>)>;

    /// Called once at the start of each episode.
    fn reset(&mut self, _initial: &ViolationState) {}

    /// Called after every executed step.
    fn observe(&mut self, _prev: &ViolationState, _action: usize, _next: &ViolationState) {}
}

/// A stochastic policy with an explicit action distribution, so logged
/// propensities are exact.
pub trait LoggingPolicy {
    /// Action probabilities over violated nodes, ascending by node id.
    fn action_probs(&self, state: &ViolationState) -> Vec<(usize, f64)>;
}

/// Samples from `action_probs` with one uniform draw.
pub fn sample_action(probs: &[(usize, f64)], rng: &mut SimRng) -> Result<(usize, f64)> {
    let last = probs
        .iter()
        .rev()
        .find(|x| x.1 > 0.0)
        .copied()
        .ok_or_else(|| Error::InvalidParameter("policy has no action with positive probability".into()))?;
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for &(a, p) in probs {
        acc += p;
        if p > 0.0 && u < acc {
            return Ok((a, p));
        }
    }
    Ok(last)
}

impl<T: LoggingPolicy> Policy for T {
    fn choose(&mut self, state: &ViolationState, rng: &mut SimRng) -> Result<(usize, Option<f64>)> {
        let probs = self.action_probs(state);
        let (a, p) = sample_action(&probs, rng)?;
        Ok((a, Some(p)))
    }
}

/// Uniform over violated nodes.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl LoggingPolicy for UniformPolicy {
    fn action_probs(&self, s: &ViolationState) -> Vec<(usize, f64)> {
        let k = s.bitmap.count_ones() as f64;
        s.bitmap.iter_ones().map(|a| (a, 1.0 / k)).collect()
    }
}

/// Lowest layer first, lowest node id within a layer.
#[derive(Debug, Clone, Copy)]
pub struct TopologicalPolicy<'g> {
    pub graph: &'g ConstraintGraph,
}

impl TopologicalPolicy<'_> {
    pub fn pick(&self, s: &ViolationState) -> Option<usize> {
        s.bitmap
            .iter_ones()
            .min_by_key(|&v| (self.graph.layer(v), v))
    }
}

impl LoggingPolicy for TopologicalPolicy<'_> {
    fn action_probs(&self, s: &ViolationState) -> Vec<(usize, f64)> {
        self.pick(s).map(|a| vec![(a, 1.0)]).unwrap_or_default()
    }
}

/// Uniform over the violated nodes of the earliest violated layer.
#[derive(Debug, Clone, Copy)]
pub struct EarliestLayerUniform<'g> {
    pub graph: &'g ConstraintGraph,
}

impl LoggingPolicy for EarliestLayerUniform<'_> {
    fn action_probs(&self, s: &ViolationState) -> Vec<(usize, f64)> {
        let Some(l) = self.graph.earliest_layer_unchecked(&s.bitmap) else {
            return Vec::new();
        };
        let front = s.bitmap.and(self.graph.layer_mask(l));
        let k = front.count_ones() as f64;
        front.iter_ones().map(|a| (a, 1.0 / k)).collect()
    }
}

/// With probability `epsilon` uniform over violated nodes, otherwise the
/// topological choice.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonTopological<'g> {
    pub graph: &'g ConstraintGraph,
    pub epsilon: f64,
}

impl LoggingPolicy for EpsilonTopological<'_> {
    fn action_probs(&self, s: &ViolationState) -> Vec<(usize, f64)> {
        let topo = TopologicalPolicy { graph: self.graph }.pick(s);
        let k = s.bitmap.count_ones() as f64;
        s.bitmap
            .iter_ones()
            .map(|a| {
                let greedy = if Some(a) == topo { 1.0 - self.epsilon } else { 0.0 };
                (a, self.epsilon / k + greedy)
            })
            .collect()
    }
}

/// Repairs `target` with probability at least `epsilon` whenever it is
/// violated; the remaining mass is uniform over all violated nodes.
#[derive(Debug, Clone, Copy)]
pub struct TargetedPolicy {
    pub target: usize,
    pub epsilon: f64,
}

impl LoggingPolicy for TargetedPolicy {
    fn action_probs(&self, s: &ViolationState) -> Vec<(usize, f64)> {
        let k = s.bitmap.count_ones() as f64;
        let hit = s.bitmap.get(self.target);
        s.bitmap
            .iter_ones()
            .map(|a| {
                let base = if hit { (1.0 - self.epsilon) / k } else { 1.0 / k };
                let bonus = if hit && a == self.target { self.epsilon } else { 0.0 };
                (a, base + bonus)
            })
            .collect()
    }
}

/// Wraps a closure returning action probabilities.
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&ViolationState) -> Vec<(usize, f64)>> LoggingPolicy for FnPolicy<F> {
    fn action_probs(&self, s: &ViolationState) -> Vec<(usize, f64)> {
        (self.0)(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitmap::Bitmap;
    use crate::scm::ContextSpec;

    fn state(n: usize, on: &[usize]) -> ViolationState {
        ViolationState {
            bitmap: Bitmap::from_indices(n, on),
            context: ContextSpec::single().cell_context(0),
            step: 0,
        }
    }

    #[test]
    fn epsilon_policy_probabilities() {
        let g = ConstraintGraph::new(vec![1, 2, 2, 3], vec![(0, 1), (0, 2), (1, 3)]).unwrap();
        let s = state(4, &[1, 2, 3]);
        let full = EpsilonTopological { graph: &g, epsilon: 1.0 }.action_probs(&s);
        assert!(full.iter().all(|&(_, p)| (p - 1.0 / 3.0).abs() < 1e-15));
        let half = EpsilonTopological { graph: &g, epsilon: 0.5 }.action_probs(&s);
        assert_eq!(half[0].0, 1);
        assert!((half[0].1 - (0.5 / 3.0 + 0.5)).abs() < 1e-15);
        let total: f64 = half.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let t = TargetedPolicy { target: 2, epsilon: 0.4 }.action_probs(&s);
        assert!((t.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t.iter().find(|x| x.0 == 2).unwrap().1 >= 0.4);
    }

    #[test]
    fn sampling_respects_support() {
        let mut rng = crate::seed::rng(3);
        for _ in 0..100 {
            let (a, p) = sample_action(&[(1, 0.0), (4, 1.0), (6, 0.0)], &mut rng).unwrap();
            assert_eq!((a, p), (4, 1.0));
        }
        assert!(sample_action(&[], &mut rng).is_err());
    }
}
