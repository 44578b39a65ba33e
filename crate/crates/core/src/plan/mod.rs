//! Planning: earliest-layer action pruning, Beta posteriors with Thompson
//! draws, UCT search over count states, the full planning loop, baseline
//! policies and exact value-iteration oracles for small instances.

mod baselines;
mod mcts;
mod oracle;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::estimate::BlendedModel;
use crate::graph::ConstraintGraph;
use crate::scm::{rollout_from, Episode, Policy, Scm, ViolationState};
use crate::seed::SimRng;

pub use baselines::{greedy_action, ActionAbstraction, TabularQ};
pub use mcts::mcts_plan;
pub use oracle::{
    admissibility_sweep, greedy_gap_instance, greedy_steps, optimal_policy_bruteforce, optimal_steps, GreedyGap,
    AdmissibilityReport, ValueTable, BRUTE_FORCE_LIMIT,
};

/// Where the planner's default edge weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Blended,
    PhysicsOnly,
    NeuralOnly,
    Observational,
    PosteriorMean,
}

impl WeightSource {
    pub fn name(self) -> &'static str {
        match self {
            WeightSource::Blended => "blended",
            WeightSource::PhysicsOnly => "physics_only",
            WeightSource::NeuralOnly => "neural_only",
            WeightSource::Observational => "observational",
            WeightSource::PosteriorMean => "posterior_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Search depth `D`; depth 1 scores actions by exact one-step expectation.
    pub depth: usize,
    pub simulations: usize,
    pub exploration: f64,
    pub horizon: usize,
    pub use_pruning: bool,
    pub use_thompson: bool,
    pub weight_source: WeightSource,
    /// Pseudo-count placed on the default weight when seeding posteriors;
    /// 0 gives the flat Beta(1, 1) prior.
    pub prior_strength: f64,
    /// Learning rate of the in-episode gradient step on the blend model;
    /// 0 freezes the model.
    pub online_learning_rate: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            depth: 2,
            simulations: 500,
            exploration: 0.5,
            horizon: 20,
            use_pruning: true,
            use_thompson: true,
            weight_source: WeightSource::Blended,
            prior_strength: 2.0,
            online_learning_rate: 0.0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.simulations == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "depth, simulations and horizon must be at least 1".into(),
            ));
        }
        if !(self.exploration >= 0.0 && self.exploration.is_finite()) {
            return Err(Error::Config("exploration must be finite and nonnegative".into()));
        }
        if !(self.prior_strength >= 0.0) || !(self.online_learning_rate >= 0.0) {
            return Err(Error::Config(
                "prior_strength and online_learning_rate must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Beta posterior over each edge's stay probability. `alpha` counts
/// propagation (child stayed violated), `beta` counts clearing.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePosterior {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Events observed since the prior was set.
    pub observed: Vec<u32>,
}

impl EdgePosterior {
    pub fn flat(edges: usize) -> Self {
        EdgePosterior {
            alpha: vec![1.0; edges],
            beta: vec![1.0; edges],
            observed: vec![0; edges],
        }
    }

    /// `Beta(1 + k w, 1 + k (1 - w))` per edge.
    pub fn seeded(weights: &[f64], strength: f64) -> Self {
        EdgePosterior {
            alpha: weights.iter().map(|w| 1.0 + strength * w.clamp(0.0, 1.0)).collect(),
            beta: weights.iter().map(|w| 1.0 + strength * (1.0 - w.clamp(0.0, 1.0))).collect(),
            observed: vec![0; weights.len()],
        }
    }

    pub fn mean(&self, e: usize) -> f64 {
        self.alpha[e] / (self.alpha[e] + self.beta[e])
    }

    pub fn record(&mut self, e: usize, propagated: bool) {
        if propagated {
            self.alpha[e] += 1.0;
        } else {
            self.beta[e] += 1.0;
        }
        self.observed[e] += 1;
    }

    /// Credits edges `(a, v)` for every child `v` violated before the step,
    /// provided the repair of `a` took effect. Returns `(edge, propagated)`.
    pub fn update_from_step(
        &mut self,
        g: &ConstraintGraph,
        prev: &Bitmap,
        a: usize,
        next: &Bitmap,
    ) -> Vec<(usize, bool)> {
        if next.get(a) {
            return Vec::new();
        }
        let mut out = Vec::new();
        for &(v, e) in g.children(a) {
            if prev.get(v) {
                let stayed = next.get(v);
                self.record(e, stayed);
                out.push((e, stayed));
            }
        }
        out
    }
}

/// Violated nodes of the earliest violated layer; empty when nothing is violated.
pub fn prune_actions(g: &ConstraintGraph, s: &ViolationState) -> Vec<usize> {
    match g.earliest_layer_unchecked(&s.bitmap) {
        Some(l) => s.bitmap.and(g.layer_mask(l)).iter_ones().collect(),
        None => Vec::new(),
    }
}

/// One independent Beta draw per edge.
pub fn thompson_sample<R: Rng + ?Sized>(post: &EdgePosterior, rng: &mut R) -> Result<Vec<f64>> {
    post.alpha
        .iter()
        .zip(&post.beta)
        .map(|(&a, &b)| {
            let d = Beta::new(a, b)
                .map_err(|e| Error::InvalidParameter(format!("Beta({a}, {b}): {e}")))?;
            Ok(d.sample(rng))
        })
        .collect()
}

/// Default weights per cell (`[cell][edge]`) for one planner.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub by_cell: Vec<Vec<f64>>,
}

impl WeightTable {
    pub fn constant(edges: usize, cells: usize, w: f64) -> Self {
        WeightTable {
            by_cell: vec![vec![w; edges]; cells],
        }
    }

    /// The environment's own weights, for oracle planners.
    pub fn oracle(scm: &Scm) -> Self {
        let m = scm.graph().num_edges();
        WeightTable {
            by_cell: (0..scm.num_cells())
                .map(|c| (0..m).map(|e| scm.tau(e, c)).collect())
                .collect(),
        }
    }
}

/// In-episode learning state of the blend model.
#[derive(Debug, Clone)]
pub struct OnlineBlend {
    pub model: BlendedModel,
    /// Physics prior per edge and cell, `edge * cells + cell`.
    pub prior: Vec<f64>,
}

/// One decision of the planner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub episode: usize,
    pub step: usize,
    /// Hex bitmap of the state acted on.
    pub state: String,
    pub pruned: usize,
    pub action: usize,
    /// First 16 hex digits of SHA-256 over the weights used by the search.
    pub weights_digest: String,
}

fn digest(weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// The planning loop as a [`Policy`]: prune, draw weights, search, and
/// update posteriors after each executed step.
pub struct PiCmdpPolicy<'a> {
    pub scm: &'a Scm,
    pub config: PlannerConfig,
    pub weights: WeightTable,
    pub posterior: EdgePosterior,
    pub blend: Option<OnlineBlend>,
    pub trace: Vec<TraceRow>,
    pub episode: usize,
    cell: usize,
}

impl<'a> PiCmdpPolicy<'a> {
    pub fn new(scm: &'a Scm, config: PlannerConfig, weights: WeightTable) -> Result<Self> {
        config.validate()?;
        if weights.by_cell.len() != scm.num_cells()
            || weights.by_cell.iter().any(|w| w.len() != scm.graph().num_edges())
        {
            return Err(Error::LengthMismatch {
                expected: scm.num_cells() * scm.graph().num_edges(),
                got: weights.by_cell.iter().map(|w| w.len()).sum(),
            });
        }
        let m = scm.graph().num_edges();
        Ok(PiCmdpPolicy {
            scm,
            config,
            weights,
            posterior: EdgePosterior::flat(m),
            blend: None,
            trace: Vec::new(),
            episode: 0,
            cell: 0,
        })
    }

    pub fn with_blend(mut self, blend: OnlineBlend) -> Self {
        self.blend = Some(blend);
        self
    }

    fn defaults(&self) -> &[f64] {
        &self.weights.by_cell[self.cell]
    }

    /// Search weights: Thompson draws on edges observed this episode and the
    /// default weights elsewhere.
    fn search_weights(&self, rng: &mut SimRng) -> Result<Vec<f64>> {
        let w = self.defaults();
        if self.config.weight_source == WeightSource::PosteriorMean && !self.config.use_thompson {
            return Ok((0..w.len()).map(|e| self.posterior.mean(e)).collect());
        }
        if !self.config.use_thompson {
            return Ok(w.to_vec());
        }
        let draws = thompson_sample(&self.posterior, rng)?;
        Ok(w.iter()
            .zip(draws)
            .zip(&self.posterior.observed)
            .map(|((&w, d), &k)| if k > 0 { d } else { w })
            .collect())
    }
}

impl Policy for PiCmdpPolicy<'_> {
    fn reset(&mut self, initial: &ViolationState) {
        self.cell = initial.context.cell;
        self.posterior = EdgePosterior::seeded(self.defaults(), self.config.prior_strength);
    }

    fn choose(&mut self, s: &ViolationState, rng: &mut SimRng) -> Result<(usize, Option<f64>)> {
        let g = self.scm.graph();
        let actions: Vec<usize> = if self.config.use_pruning {
            prune_actions(g, s)
        } else {
            s.bitmap.iter_ones().collect()
        };
        let weights = self.search_weights(rng)?;
        let remaining = self.config.horizon.saturating_sub(s.step).max(1);
        let model = self.scm.model_dynamics(&weights);
        let a = mcts_plan(&model, &s.bitmap, &actions, &self.config, remaining, rng)?;
        self.trace.push(TraceRow {
            episode: self.episode,
            step: s.step,
            state: s.bitmap.to_hex(),
            pruned: actions.len(),
            action: a,
            weights_digest: digest(&weights),
        });
        Ok((a, None))
    }

    fn observe(&mut self, prev: &ViolationState, a: usize, next: &ViolationState) {
        let g = self.scm.graph();
        let events = self.posterior.update_from_step(g, &prev.bitmap, a, &next.bitmap);
        let lr = self.config.online_learning_rate;
        if lr > 0.0 && !events.is_empty() {
            if let Some(b) = self.blend.as_mut() {
                let cells = self.scm.num_cells();
                let cell = self.cell;
                let batch: Vec<_> = events
                    .iter()
                    .map(|&(e, stayed)| crate::estimate::BlendSample {
                        edge: e,
                        cell,
                        phi: b.prior[e * cells + cell],
                        target: stayed as u8 as f64,
                    })
                    .collect();
                if b.model.update_blend(&batch, lr).is_ok()
                    && self.config.weight_source == WeightSource::Blended
                {
                    self.weights.by_cell[cell] = b.model.weights_for_cell(&b.prior, cells, cell);
                }
            }
        }
    }
}

/// Result of one planned episode.
#[derive(Debug, Clone)]
pub struct PlannedEpisode {
    pub episode: Episode,
    pub trace: Vec<TraceRow>,
    pub posterior: EdgePosterior,
    pub blend: Option<OnlineBlend>,
}

/// Runs the planning loop from `start` until success, cascade failure or
/// the configured horizon.
pub fn run_planner(
    scm: &Scm,
    config: &PlannerConfig,
    weights: WeightTable,
    blend: Option<OnlineBlend>,
    start: ViolationState,
    env_rng: &mut SimRng,
    plan_rng: &mut SimRng,
    id: usize,
) -> Result<PlannedEpisode> {
    let mut p = PiCmdpPolicy::new(scm, config.clone(), weights)?;
    p.blend = blend;
    p.episode = id;
    let episode = rollout_from(scm, start, &mut p, config.horizon, env_rng, plan_rng, id)?;
    Ok(PlannedEpisode {
        episode,
        trace: p.trace,
        posterior: p.posterior,
        blend: p.blend,
    })
}

/// Writes trace rows as CSV.
pub fn write_trace_csv<W: std::io::Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "step", "state", "pruned", "action", "weights_digest"])?;
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            r.step.to_string(),
            r.state.clone(),
            r.pruned.to_string(),
            r.action.to_string(),
            r.weights_digest.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
