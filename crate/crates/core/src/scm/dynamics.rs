//! One-step transition kernel for a fixed context cell.
//!
//! Given violation set `V` and repaired node `a`:
//!
//! 1. `a` is fixed with probability `base_fix[a] * wrong_order^k`, where `k`
//!    counts violated parents of `a`; with layer gating the probability is 0
//!    while any node in a lower layer than `a` is violated.
//! 2. If fixed, every violated child `v` of `a` stays violated with the
//!    noisy-OR probability `1 - (1 - stay[a,v]) * prod(1 - stay[u,v])` over its
//!    other violated parents `u`; otherwise it clears. Call the result `V1`.
//! 3. Every node outside `V1` becomes violated with probability
//!    `1 - prod(1 - onset[p,w])` over its parents `p` in `V1`.
//! 4. If fixed, each satisfied ancestor of `a` in a lower layer re-violates
//!    with probability `feedback`.
//!
//! Random draws happen in that order, ascending by node id within a stage,
//! one uniform per candidate, so trajectories are reproducible.

use std::collections::HashMap;

use rand::Rng;

use crate::bitmap::Bitmap;
use crate::graph::ConstraintGraph;

#[derive(Debug, Clone)]
pub struct Dynamics<'g> {
    pub graph: &'g ConstraintGraph,
    /// Stay factor per edge.
    pub stay: Vec<f64>,
    /// Onset probability per edge.
    pub onset: Vec<f64>,
    pub base_fix: &'g [f64],
    pub wrong_order_factor: f64,
    pub layer_gating: bool,
    pub feedback_prob: f64,
}

impl<'g> Dynamics<'g> {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// True when repairing `a` can take effect (no lower-layer violation
    /// under gating).
    #[inline]
    pub fn is_ungated(&self, v: &Bitmap, a: usize) -> bool {
        !self.layer_gating || !v.intersects(self.graph.lower_mask(self.graph.layer(a)))
    }

    pub fn fix_prob(&self, v: &Bitmap, a: usize) -> f64 {
        if !self.is_ungated(v, a) {
            return 0.0;
        }
        let mut p = self.base_fix[a];
        for &(u, _) in self.graph.parents(a) {
            if v.get(u) {
                p *= self.wrong_order_factor;
            }
        }
        p
    }

    /// Probability that violated child `c` of `a` stays violated once `a` is fixed.
    #[inline]
    pub fn stay_prob(&self, v: &Bitmap, a: usize, c: usize) -> f64 {
        let mut q = 1.0;
        for &(u, e) in self.graph.parents(c) {
            if u == a || v.get(u) {
                q *= 1.0 - self.stay[e];
            }
        }
        1.0 - q
    }

    #[inline]
    fn onset_prob(&self, v1: &Bitmap, w: usize) -> f64 {
        let mut q = 1.0;
        for &(p, e) in self.graph.parents(w) {
            if v1.get(p) {
                q *= 1.0 - self.onset[e];
            }
        }
        1.0 - q
    }

    fn onset_candidates(&self, v1: &Bitmap) -> Bitmap {
        let mut mask = Bitmap::zeros(v1.len());
        for p in v1.iter_ones() {
            mask = mask.or(self.graph.child_mask(p));
        }
        mask.and_not(v1)
    }

    fn feedback_candidates(&self, v2: &Bitmap, a: usize) -> Bitmap {
        self.graph
            .ancestors(a)
            .and(self.graph.lower_mask(self.graph.layer(a)))
            .and_not(v2)
    }

    /// Samples the next violation set. Caller guarantees `v.get(a)`.
    pub fn step<R: Rng + ?Sized>(&self, v: &Bitmap, a: usize, rng: &mut R) -> Bitmap {
        debug_assert!(v.get(a));
        let fix_p = self.fix_prob(v, a);
        let fixed = rng.random::<f64>() < fix_p;
        let mut v1 = *v;
        if fixed {
            v1.clear(a);
            for &(c, _) in self.graph.children(a) {
                if v.get(c) {
                    let s = self.stay_prob(v, a, c);
                    if rng.random::<f64>() >= s {
                        v1.clear(c);
                    }
                }
            }
        }
        let mut v2 = v1;
        for w in self.onset_candidates(&v1).iter_ones() {
            let o = self.onset_prob(&v1, w);
            if rng.random::<f64>() < o {
                v2.set(w);
            }
        }
        if fixed && self.feedback_prob > 0.0 {
            for x in self.feedback_candidates(&v2, a).iter_ones() {
                if rng.random::<f64>() < self.feedback_prob {
                    v2.set(x);
                }
            }
        }
        v2
    }

    /// Exact next-state distribution, sorted by bitmap.
    pub fn distribution(&self, v: &Bitmap, a: usize) -> Vec<(Bitmap, f64)> {
        let fix_p = self.fix_prob(v, a);
        let mut out: HashMap<Bitmap, f64> = HashMap::new();
        for (fixed, pf) in [(true, fix_p), (false, 1.0 - fix_p)] {
            if pf <= 0.0 {
                continue;
            }
            let mut branches = vec![(*v, pf)];
            if fixed {
                branches[0].0.clear(a);
                for &(c, _) in self.graph.children(a) {
                    if !v.get(c) {
                        continue;
                    }
                    let s = self.stay_prob(v, a, c);
                    branches = split(branches, c, s, true);
                }
            }
            let mut after_onset = Vec::new();
            for (b, p) in branches {
                let mut res = vec![(b, p)];
                for w in self.onset_candidates(&b).iter_ones() {
                    let o = self.onset_prob(&b, w);
                    res = split(res, w, o, false);
                }
                after_onset.extend(res);
            }
            for (b, p) in merge(after_onset) {
                let mut res = vec![(b, p)];
                if fixed && self.feedback_prob > 0.0 {
                    for x in self.feedback_candidates(&b, a).iter_ones() {
                        res = split(res, x, self.feedback_prob, false);
                    }
                }
                for (r, q) in res {
                    *out.entry(r).or_insert(0.0) += q;
                }
            }
        }
        let mut d: Vec<(Bitmap, f64)> = out.into_iter().collect();
        d.sort_by_key(|x| x.0);
        d
    }

    /// Exact per-node probability of being violated after repairing `a`.
    pub fn node_marginals(&self, v: &Bitmap, a: usize) -> Vec<f64> {
        let n = self.num_nodes();
        let fix_p = self.fix_prob(v, a);
        let mut total = vec![0.0; n];
        for (fixed, pf) in [(true, fix_p), (false, 1.0 - fix_p)] {
            if pf <= 0.0 {
                continue;
            }
            let mut p1 = vec![0.0; n];
            for w in v.iter_ones() {
                p1[w] = 1.0;
            }
            if fixed {
                p1[a] = 0.0;
                for &(c, _) in self.graph.children(a) {
                    if v.get(c) {
                        p1[c] = self.stay_prob(v, a, c);
                    }
                }
            }
            let mut p2 = p1.clone();
            for w in 0..n {
                if p1[w] >= 1.0 {
                    continue;
                }
                let mut q = 1.0;
                for &(p, e) in self.graph.parents(w) {
                    q *= 1.0 - p1[p] * self.onset[e];
                }
                p2[w] = p1[w] + (1.0 - p1[w]) * (1.0 - q);
            }
            if fixed && self.feedback_prob > 0.0 {
                let anc = self
                    .graph
                    .ancestors(a)
                    .and(self.graph.lower_mask(self.graph.layer(a)));
                for x in anc.iter_ones() {
                    p2[x] += (1.0 - p2[x]) * self.feedback_prob;
                }
            }
            for w in 0..n {
                total[w] += pf * p2[w];
            }
        }
        total
    }

    pub fn expected_next_count(&self, v: &Bitmap, a: usize) -> f64 {
        self.node_marginals(v, a).iter().sum()
    }
}

fn merge(branches: Vec<(Bitmap, f64)>) -> Vec<(Bitmap, f64)> {
    let mut m: HashMap<Bitmap, f64> = HashMap::with_capacity(branches.len());
    for (b, p) in branches {
        *m.entry(b).or_insert(0.0) += p;
    }
    let mut v: Vec<(Bitmap, f64)> = m.into_iter().collect();
    v.sort_by_key(|x| x.0);
    v
}

/// Splits every branch on node `w` turning on (`set = false`: becomes
/// violated with probability `p`) or staying on (`set = true`: stays violated
/// with probability `p`, else cleared).
fn split(branches: Vec<(Bitmap, f64)>, w: usize, p: f64, currently_on: bool) -> Vec<(Bitmap, f64)> {
    if p <= 0.0 {
        if currently_on {
            return branches
                .into_iter()
                .map(|(mut b, q)| {
                    b.clear(w);
                    (b, q)
                })
                .collect();
        }
        return branches;
    }
    if p >= 1.0 {
        if currently_on {
            return branches;
        }
        return branches
            .into_iter()
            .map(|(mut b, q)| {
                b.set(w);
                (b, q)
            })
            .collect();
    }
    let mut out = Vec::with_capacity(branches.len() * 2);
    for (b, q) in branches {
        let mut on = b;
        on.set(w);
        let mut off = b;
        off.clear(w);
        out.push((on, q * p));
        out.push((off, q * (1.0 - p)));
    }
    out
}
