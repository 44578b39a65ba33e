//! Ground-truth structural causal model and episodic simulator.
//!
//! Edge weights depend on the context cell through a logistic link evaluated
//! at standardized bin centers, so every per-cell quantity is exact. The
//! initial violation set is drawn by a forward noisy-OR over edges `u -> v`
//! with `u < v`: node `v` is violated with probability
//! `1 - (1 - leak[v]) * prod(1 - onset[u,v])` over its violated forward parents.

mod context;
pub mod dataset;
mod dynamics;
pub mod policy;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::graph::{ConstraintGraph, GraphSpec};

pub use context::{Context, ContextSpec};
pub use dataset::{
    generate_dataset, generate_dataset_with, rollout_episode, rollout_from, Dataset, Episode,
    Outcome, Transition,
};
pub use dynamics::Dynamics;
pub use policy::{
    EarliestLayerUniform, EpsilonTopological, FnPolicy, LoggingPolicy, Policy, TargetedPolicy, TopologicalPolicy,
    UniformPolicy,
};

/// Largest node count for exact enumeration over initial bitmaps.
pub const ENUMERATION_LIMIT: usize = 20;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Context dependence of one edge weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TauSpec {
    Constant { p: f64 },
    /// `sigm(bias + sum_d slopes[d] * z_d)` with `z_d` the standardized bin center.
    Logistic { bias: f64, slopes: Vec<f64> },
}

impl TauSpec {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            TauSpec::Constant { p } => *p,
            TauSpec::Logistic { bias, slopes } => {
                sigmoid(bias + slopes.iter().zip(z).map(|(s, x)| s * x).sum::<f64>())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeParams {
    pub tau: TauSpec,
    /// Onset probability as a multiple of the edge weight.
    pub onset_factor: f64,
}

/// Divergence rule tagging an episode as a cascade failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeRule {
    /// Strictly increasing steps in a row that count as divergence.
    pub consecutive_increases: usize,
    /// Divergence once the count exceeds this multiple of the initial count.
    pub growth_factor: f64,
}

impl Default for CascadeRule {
    fn default() -> Self {
        CascadeRule {
            consecutive_increases: 3,
            growth_factor: 2.0,
        }
    }
}

/// Serializable parameters of an [`Scm`]. Per-edge vectors follow the
/// graph's sorted edge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmParams {
    pub context: ContextSpec,
    pub edges: Vec<EdgeParams>,
    /// Repair success probability per node when all its parents are satisfied.
    pub base_fix: Vec<f64>,
    /// Multiplier on repair success per violated parent of the repaired node.
    pub wrong_order_factor: f64,
    /// Repairs have no effect while a lower layer is still violated.
    pub layer_gating: bool,
    pub feedback_prob: f64,
    /// Declares the environment layer-priority regular, which forces zero feedback.
    pub declared_regular: bool,
    pub noise_sd: f64,
    /// Spontaneous initial violation probability per node.
    pub leak: Vec<f64>,
    /// Resample initial bitmaps until at least one node is violated.
    pub require_violation: bool,
    pub cascade: CascadeRule,
}

impl ScmParams {
    /// Constant-weight parameters with everything else at defaults.
    pub fn uniform(graph: &ConstraintGraph, tau: f64, leak: f64) -> Self {
        ScmParams {
            context: ContextSpec::single(),
            edges: vec![
                EdgeParams {
                    tau: TauSpec::Constant { p: tau },
                    onset_factor: 0.0,
                };
                graph.num_edges()
            ],
            base_fix: vec![1.0; graph.num_nodes()],
            wrong_order_factor: 1.0,
            layer_gating: true,
            feedback_prob: 0.0,
            declared_regular: true,
            noise_sd: 0.5,
            leak: vec![leak; graph.num_nodes()],
            require_violation: false,
            cascade: CascadeRule::default(),
        }
    }
}

/// Knobs for randomly drawn Scms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomScmSpec {
    pub context: ContextSpec,
    /// Range of the logistic intercept per edge.
    pub tau_bias: (f64, f64),
    /// Slopes drawn uniformly from `[-tau_slope, tau_slope]`.
    pub tau_slope: f64,
    pub onset_factor: f64,
    pub leak_first_layer: f64,
    pub leak_other: f64,
    pub base_fix: f64,
    pub wrong_order_factor: f64,
    pub layer_gating: bool,
    pub feedback_prob: f64,
    pub require_violation: bool,
    pub cascade: CascadeRule,
}

impl RandomScmSpec {
    /// One edge's logistic weight and onset factor.
    pub fn draw_edge<R: Rng + ?Sized>(&self, rng: &mut R) -> EdgeParams {
        let bias = self.tau_bias.0 + (self.tau_bias.1 - self.tau_bias.0) * rng.random::<f64>();
        let slopes = (0..self.context.num_dims())
            .map(|_| self.tau_slope * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        EdgeParams {
            tau: TauSpec::Logistic { bias, slopes },
            onset_factor: self.onset_factor,
        }
    }
}

impl Default for RandomScmSpec {
    fn default() -> Self {
        RandomScmSpec {
            context: ContextSpec::default(),
            tau_bias: (-2.0, 1.0),
            tau_slope: 1.0,
            onset_factor: 0.3,
            leak_first_layer: 0.3,
            leak_other: 0.05,
            base_fix: 1.0,
            wrong_order_factor: 0.5,
            layer_gating: true,
            feedback_prob: 0.0,
            require_violation: true,
            cascade: CascadeRule::default(),
        }
    }
}

/// On-disk form of a generated environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmFile {
    pub graph: GraphSpec,
    pub scm: ScmParams,
}

/// MDP state: violation bitmap, context and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationState {
    pub bitmap: Bitmap,
    pub context: Context,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct Scm {
    graph: ConstraintGraph,
    params: ScmParams,
    /// `tau[e * cells + cell]`
    tau: Vec<f64>,
    onset: Vec<f64>,
    cells: usize,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {p} is not a probability")))
    }
}

#[inline]
pub fn reward(next: &Bitmap) -> f64 {
    if next.is_empty() {
        0.0
    } else {
        -(next.count_ones() as f64) / next.len() as f64
    }
}

impl Scm {
    pub fn new(graph: ConstraintGraph, params: ScmParams) -> Result<Self> {
        params.context.validate()?;
        let n = graph.num_nodes();
        let m = graph.num_edges();
        if params.edges.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                got: params.edges.len(),
            });
        }
        for v in [&params.base_fix, &params.leak] {
            if v.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        for (v, (&b, &l)) in params.base_fix.iter().zip(&params.leak).enumerate() {
            check_prob(&format!("base_fix[{v}]"), b)?;
            check_prob(&format!("leak[{v}]"), l)?;
        }
        check_prob("wrong_order_factor", params.wrong_order_factor)?;
        check_prob("feedback_prob", params.feedback_prob)?;
        if params.declared_regular && params.feedback_prob != 0.0 {
            return Err(Error::InvalidParameter(
                "a layer-priority regular environment must have zero feedback".into(),
            ));
        }
        if !(params.noise_sd >= 0.0 && params.noise_sd.is_finite()) {
            return Err(Error::InvalidParameter("noise_sd must be finite and >= 0".into()));
        }
        if params.cascade.consecutive_increases == 0 || params.cascade.growth_factor <= 0.0 {
            return Err(Error::InvalidParameter("cascade rule thresholds must be positive".into()));
        }
        if params.require_violation && params.leak.iter().all(|&l| l == 0.0) {
            return Err(Error::InvalidParameter(
                "require_violation needs a nonzero leak somewhere".into(),
            ));
        }
        let dims = params.context.num_dims();
        let cells = params.context.num_cells();
        let zs: Vec<Vec<f64>> = (0..cells).map(|c| params.context.standardized_cell(c)).collect();
        let mut tau = Vec::with_capacity(m * cells);
        let mut onset = Vec::with_capacity(m * cells);
        for (e, ep) in params.edges.iter().enumerate() {
            if let TauSpec::Logistic { slopes, .. } = &ep.tau {
                if slopes.len() != dims {
                    return Err(Error::LengthMismatch {
                        expected: dims,
                        got: slopes.len(),
                    });
                }
            }
            for z in &zs {
                let t = ep.tau.eval(z);
                check_prob(&format!("tau on edge {e}"), t)?;
                let o = ep.onset_factor * t;
                check_prob(&format!("onset on edge {e}"), o)?;
                tau.push(t);
                onset.push(o);
            }
        }
        Ok(Scm {
            graph,
            params,
            tau,
            onset,
            cells,
        })
    }

    /// Draws per-edge logistic weights; the graph is kept as given.
    pub fn random<R: Rng + ?Sized>(
        graph: ConstraintGraph,
        spec: &RandomScmSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let edges = (0..graph.num_edges()).map(|_| spec.draw_edge(rng)).collect();
        let n = graph.num_nodes();
        let leak = (0..n)
            .map(|v| {
                if graph.layer(v) == 1 {
                    spec.leak_first_layer
                } else {
                    spec.leak_other
                }
            })
            .collect();
        let params = ScmParams {
            context: spec.context.clone(),
            edges,
            base_fix: vec![spec.base_fix; n],
            wrong_order_factor: spec.wrong_order_factor,
            layer_gating: spec.layer_gating,
            feedback_prob: spec.feedback_prob,
            declared_regular: spec.feedback_prob == 0.0,
            noise_sd: 0.5,
            leak,
            require_violation: spec.require_violation,
            cascade: spec.cascade,
        };
        Scm::new(graph, params)
    }

    pub fn from_file(file: &ScmFile) -> Result<Self> {
        Scm::new(ConstraintGraph::from_spec(&file.graph)?, file.scm.clone())
    }

    pub fn to_file(&self) -> ScmFile {
        ScmFile {
            graph: self.graph.to_spec(),
            scm: self.params.clone(),
        }
    }

    /// SHA-256 of the TOML serialization, hex encoded.
    pub fn descriptor_hash(&self) -> String {
        let text = toml::to_string(&self.to_file()).expect("scm parameters serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn graph(&self) -> &ConstraintGraph {
        &self.graph
    }

    pub fn params(&self) -> &ScmParams {
        &self.params
    }

    pub fn context_spec(&self) -> &ContextSpec {
        &self.params.context
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_cells(&self) -> usize {
        self.cells
    }

    #[inline]
    pub fn tau(&self, edge: usize, cell: usize) -> f64 {
        self.tau[edge * self.cells + cell]
    }

    #[inline]
    pub fn onset(&self, edge: usize, cell: usize) -> f64 {
        self.onset[edge * self.cells + cell]
    }

    pub fn onset_factors(&self) -> Vec<f64> {
        self.params.edges.iter().map(|e| e.onset_factor).collect()
    }

    pub fn cascade(&self) -> CascadeRule {
        self.params.cascade
    }

    /// Kernel with this Scm's own edge weights in `cell`.
    pub fn dynamics(&self, cell: usize) -> Dynamics<'_> {
        let m = self.graph.num_edges();
        self.dynamics_with(
            (0..m).map(|e| self.tau(e, cell)).collect(),
            (0..m).map(|e| self.onset(e, cell)).collect(),
        )
    }

    /// Kernel sharing this Scm's structure but with supplied edge weights.
    pub fn dynamics_with(&self, stay: Vec<f64>, onset: Vec<f64>) -> Dynamics<'_> {
        Dynamics {
            graph: &self.graph,
            stay,
            onset,
            base_fix: &self.params.base_fix,
            wrong_order_factor: self.params.wrong_order_factor,
            layer_gating: self.params.layer_gating,
            feedback_prob: self.params.feedback_prob,
        }
    }

    /// Kernel for planning with weights `w`: onset is `onset_factor * w`.
    pub fn model_dynamics(&self, weights: &[f64]) -> Dynamics<'_> {
        let onset = weights
            .iter()
            .zip(&self.params.edges)
            .map(|(w, p)| (w * p.onset_factor).clamp(0.0, 1.0))
            .collect();
        self.dynamics_with(weights.to_vec(), onset)
    }

    fn check_state(&self, s: &ViolationState) -> Result<()> {
        if s.bitmap.len() != self.num_nodes() {
            return Err(Error::LengthMismatch {
                expected: self.num_nodes(),
                got: s.bitmap.len(),
            });
        }
        if s.context.cell >= self.cells {
            return Err(Error::InvalidParameter(format!(
                "context cell {} out of range",
                s.context.cell
            )));
        }
        Ok(())
    }

    /// Applies `do(A = a)`; returns the next state and its reward.
    pub fn step<R: Rng + ?Sized>(
        &self,
        s: &ViolationState,
        a: usize,
        rng: &mut R,
    ) -> Result<(ViolationState, f64)> {
        self.check_state(s)?;
        if a >= self.num_nodes() || !s.bitmap.get(a) {
            return Err(Error::ActionNotViolated(a));
        }
        let next = self.dynamics(s.context.cell).step(&s.bitmap, a, rng);
        let r = reward(&next);
        Ok((
            ViolationState {
                bitmap: next,
                context: s.context.clone(),
                step: s.step + 1,
            },
            r,
        ))
    }

    /// Exact next-state distribution under `do(A = a)`.
    pub fn transition_distribution(&self, s: &ViolationState, a: usize) -> Result<Vec<(Bitmap, f64)>> {
        self.check_state(s)?;
        if a >= self.num_nodes() || !s.bitmap.get(a) {
            return Err(Error::ActionNotViolated(a));
        }
        Ok(self.dynamics(s.context.cell).distribution(&s.bitmap, a))
    }

    fn init_node_prob(&self, b: &Bitmap, v: usize, cell: usize) -> f64 {
        let mut q = 1.0 - self.params.leak[v];
        for &(u, e) in self.graph.parents(v) {
            if u < v && b.get(u) {
                q *= 1.0 - self.onset(e, cell);
            }
        }
        1.0 - q
    }

    fn sample_bitmap_once<R: Rng + ?Sized>(&self, cell: usize, rng: &mut R) -> Bitmap {
        let n = self.num_nodes();
        let mut b = Bitmap::zeros(n);
        for v in 0..n {
            let p = self.init_node_prob(&b, v, cell);
            if rng.random::<f64>() < p {
                b.set(v);
            }
        }
        b
    }

    pub fn sample_initial_bitmap<R: Rng + ?Sized>(&self, cell: usize, rng: &mut R) -> Bitmap {
        loop {
            let b = self.sample_bitmap_once(cell, rng);
            if !self.params.require_violation || b.any() {
                return b;
            }
        }
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> ViolationState {
        let context = self.params.context.sample(rng);
        let bitmap = self.sample_initial_bitmap(context.cell, rng);
        ViolationState {
            bitmap,
            context,
            step: 0,
        }
    }

    /// Exact initial-bitmap distribution in `cell`, sorted by bitmap.
    pub fn initial_distribution(&self, cell: usize) -> Result<Vec<(Bitmap, f64)>> {
        let n = self.num_nodes();
        if n > ENUMERATION_LIMIT {
            return Err(Error::TooLarge {
                nodes: n,
                limit: ENUMERATION_LIMIT,
            });
        }
        let mut branches = vec![(Bitmap::zeros(n), 1.0)];
        for v in 0..n {
            let mut next = Vec::with_capacity(branches.len() * 2);
            for (b, p) in branches {
                let q = self.init_node_prob(&b, v, cell);
                if q > 0.0 {
                    let mut on = b;
                    on.set(v);
                    next.push((on, p * q));
                }
                if q < 1.0 {
                    next.push((b, p * (1.0 - q)));
                }
            }
            branches = next;
        }
        if self.params.require_violation {
            let empty: f64 = branches.iter().filter(|(b, _)| b.none()).map(|x| x.1).sum();
            branches.retain(|(b, _)| b.any());
            for x in branches.iter_mut() {
                x.1 /= 1.0 - empty;
            }
        }
        branches.sort_by_key(|x| x.0);
        Ok(branches)
    }

    fn edge(&self, u: usize, v: usize) -> Result<usize> {
        self.graph.edge_id(u, v).ok_or(Error::NotAnEdge(u, v))
    }

    /// Oracle weight of `u -> v` in `cell` given the co-parent pattern (bits
    /// of `Pa(v) \ {u}` read from `pattern`): probability that `v`, violated
    /// together with `u`, is violated after `u` is repaired. Co-parents are
    /// held at their pattern, so it is the noisy-OR stay probability plus
    /// re-onset from violated co-parents.
    pub fn true_edge_weight(&self, u: usize, v: usize, cell: usize, pattern: &Bitmap) -> Result<f64> {
        let e = self.edge(u, v)?;
        let mut q_stay = 1.0 - self.tau(e, cell);
        let mut q_onset = 1.0;
        for &(z, ez) in self.graph.parents(v) {
            if z != u && pattern.get(z) {
                q_stay *= 1.0 - self.tau(ez, cell);
                q_onset *= 1.0 - self.onset(ez, cell);
            }
        }
        let stay = 1.0 - q_stay;
        Ok(stay + (1.0 - stay) * (1.0 - q_onset))
    }

    /// Oracle weight averaged over co-parent patterns drawn from `states`
    /// restricted to those where `u` and `v` are both violated.
    pub fn marginal_edge_weight(
        &self,
        u: usize,
        v: usize,
        cell: usize,
        states: &[(Bitmap, f64)],
    ) -> Result<f64> {
        self.edge(u, v)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for (b, p) in states {
            if b.get(u) && b.get(v) {
                num += p * self.true_edge_weight(u, v, cell, b)?;
                den += p;
            }
        }
        if den == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "edge ({u}, {v}) is never at risk in cell {cell}"
            )));
        }
        Ok(num / den)
    }

    /// Marginal oracle weight under the initial distribution of `cell`.
    pub fn marginal_edge_weight_init(&self, u: usize, v: usize, cell: usize) -> Result<f64> {
        let dist = self.initial_distribution(cell)?;
        self.marginal_edge_weight(u, v, cell, &dist)
    }

    /// Co-parent pattern distribution `P(Z = z | c, u and v violated)`
    /// under the initial distribution, keyed by the pattern restricted to `Z`.
    pub fn coparent_distribution(&self, u: usize, v: usize, cell: usize) -> Result<Vec<(Bitmap, f64)>> {
        self.edge(u, v)?;
        let z = self.coparent_mask(u, v);
        let mut m: HashMap<Bitmap, f64> = HashMap::new();
        let mut den = 0.0;
        for (b, p) in self.initial_distribution(cell)? {
            if b.get(u) && b.get(v) {
                *m.entry(b.and(&z)).or_insert(0.0) += p;
                den += p;
            }
        }
        let mut out: Vec<(Bitmap, f64)> = m.into_iter().map(|(b, p)| (b, p / den)).collect();
        out.sort_by_key(|x| x.0);
        Ok(out)
    }

    pub fn coparent_mask(&self, u: usize, v: usize) -> Bitmap {
        let mut z = Bitmap::zeros(self.num_nodes());
        for &(p, _) in self.graph.parents(v) {
            if p != u {
                z.set(p);
            }
        }
        z
    }
}

#[cfg(test)]
mod tests;
