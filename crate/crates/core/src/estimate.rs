//! Doubly robust edge-weight estimation, physics priors and the blended
//! physics/learned edge-weight model.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::graph::ConstraintGraph;
use crate::identify::{at_risk, observational_estimate, EdgeEstimate, Method};
use crate::scm::{
    generate_dataset_with, sigmoid, Context, Dataset, Scm, TargetedPolicy, Transition,
};
use crate::seed::derive_seed;

/// Default lower clip for estimated propensities.
pub const PROPENSITY_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorKind {
    /// `sigm(raw[0] / raw[1] - c_cfl)`.
    Cfl { c_cfl: f64 },
    /// The environment's own link shifted by exactly `delta0` per edge and cell.
    LogisticLink { delta0: f64, seed: u64 },
    /// Explicit values, indexed `edge * cells + cell`.
    Table { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsPrior {
    pub kind: PriorKind,
    /// Per edge and cell; empty for the CFL kind, which reads raw context.
    table: Vec<f64>,
    cells: usize,
    /// Sup-norm error against the oracle weight when known.
    pub delta0: f64,
}

fn mix(seed: u64, e: usize, c: usize) -> u64 {
    // splitmix64 finalizer over the packed key
    let mut z = seed ^ ((e as u64) << 20) ^ c as u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl PhysicsPrior {
    pub fn cfl(c_cfl: f64) -> Self {
        PhysicsPrior {
            kind: PriorKind::Cfl { c_cfl },
            table: vec![],
            cells: 0,
            delta0: f64::NAN,
        }
    }

    /// Oracle weights moved by `delta0` in a pseudo-random direction, or in
    /// the only direction that stays inside `[0, 1]`.
    pub fn logistic_link(scm: &Scm, delta0: f64, seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&delta0) {
            return Err(Error::InvalidParameter(format!("delta0 {delta0} outside [0, 0.5]")));
        }
        let cells = scm.num_cells();
        let mut table = Vec::with_capacity(scm.graph().num_edges() * cells);
        for e in 0..scm.graph().num_edges() {
            for c in 0..cells {
                let t = scm.tau(e, c);
                let up = mix(seed, e, c) & 1 == 1;
                let v = if (up && t + delta0 <= 1.0) || t - delta0 < 0.0 {
                    t + delta0
                } else {
                    t - delta0
                };
                table.push(v);
            }
        }
        Ok(PhysicsPrior {
            kind: PriorKind::LogisticLink { delta0, seed },
            table,
            cells,
            delta0,
        })
    }

    pub fn table(values: Vec<f64>, cells: usize) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("prior table values must be probabilities".into()));
        }
        Ok(PhysicsPrior {
            kind: PriorKind::Table {
                values: values.clone(),
            },
            table: values,
            cells,
            delta0: f64::NAN,
        })
    }

    pub fn from_kind(kind: &PriorKind, scm: &Scm) -> Result<Self> {
        match kind {
            PriorKind::Cfl { c_cfl } => Ok(Self::cfl(*c_cfl)),
            PriorKind::LogisticLink { delta0, seed } => Self::logistic_link(scm, *delta0, *seed),
            PriorKind::Table { values } => Self::table(values.clone(), scm.num_cells()),
        }
    }

    /// Prior weight of edge index `e` in context `ctx`.
    pub fn value(&self, e: usize, ctx: &Context) -> Result<f64> {
        match &self.kind {
            PriorKind::Cfl { c_cfl } => {
                if ctx.raw.len() < 2 {
                    return Err(Error::LengthMismatch {
                        expected: 2,
                        got: ctx.raw.len(),
                    });
                }
                if ctx.raw[1] == 0.0 {
                    return Err(Error::InvalidParameter("zero mesh ratio in context".into()));
                }
                Ok(sigmoid(ctx.raw[0] / ctx.raw[1] - c_cfl))
            }
            _ => self
                .table
                .get(e * self.cells + ctx.cell)
                .copied()
                .ok_or_else(|| Error::InvalidParameter(format!("no prior for edge {e} cell {}", ctx.cell))),
        }
    }

    /// Per edge and cell values, evaluating the CFL kind at cell centers.
    pub fn cell_table(&self, scm: &Scm) -> Result<Vec<f64>> {
        let cells = scm.num_cells();
        let mut out = Vec::with_capacity(scm.graph().num_edges() * cells);
        for e in 0..scm.graph().num_edges() {
            for c in 0..cells {
                out.push(self.value(e, &scm.context_spec().cell_context(c))?);
            }
        }
        Ok(out)
    }

    /// `max |prior - oracle|` over edges and cells.
    pub fn sup_error(&self, scm: &Scm) -> Result<f64> {
        let t = self.cell_table(scm)?;
        let cells = scm.num_cells();
        Ok(t.iter()
            .enumerate()
            .map(|(i, p)| (p - scm.tau(i / cells, i % cells)).abs())
            .fold(0.0, f64::max))
    }
}

/// Where AIPW gets `e(u | s)` from.
pub enum Propensity<'a> {
    Logged,
    Fitted(&'a PropensityModel),
}

/// Frequency model of the logging policy: the probability of repairing a
/// node depends on the cell, the violation count, and whether the node is
/// the topological choice. This is the exact sufficient statistic of
/// ε-topological logging.
#[derive(Debug, Clone, Default)]
pub struct PropensityModel {
    counts: HashMap<(usize, usize, bool), (usize, usize)>,
    topo_layers: Vec<u32>,
}

impl PropensityModel {
    pub fn fit(d: &Dataset, g: &ConstraintGraph) -> Self {
        let mut m = PropensityModel {
            counts: HashMap::new(),
            topo_layers: g.layers().to_vec(),
        };
        for (cell, t) in d.transitions() {
            let topo = m.topo(&t.state);
            let k = t.state.count_ones();
            for x in t.state.iter_ones() {
                let e = m.counts.entry((cell, k, Some(x) == topo)).or_insert((0, 0));
                e.0 += 1;
                e.1 += (x == t.action) as usize;
            }
        }
        m
    }

    fn topo(&self, s: &Bitmap) -> Option<usize> {
        s.iter_ones().min_by_key(|&v| (self.topo_layers[v], v))
    }

    pub fn prob(&self, cell: usize, s: &Bitmap, a: usize) -> f64 {
        let key = (cell, s.count_ones(), Some(a) == self.topo(s));
        match self.counts.get(&key) {
            Some(&(n, k)) if n > 0 => k as f64 / n as f64,
            _ => 0.0,
        }
    }
}

/// One AIPW term per at-risk transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoOutcome {
    pub state: Bitmap,
    pub treated: bool,
    pub outcome: bool,
    pub propensity: f64,
    pub model: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AipwResult {
    pub estimate: EdgeEstimate,
    pub pseudo: Vec<PseudoOutcome>,
    pub clipped: usize,
}

/// `(1/N) sum_i [m_i + 1{A_i = u} (Y_i - m_i) / e_i]` over at-risk
/// transitions of `edge` in `cell`, with `m_i = outcome_model(state_i)`.
pub fn aipw_estimate(
    d: &Dataset,
    edge: (usize, usize),
    cell: usize,
    outcome_model: &dyn Fn(&Bitmap) -> f64,
    propensity: &Propensity<'_>,
    floor: f64,
) -> Result<AipwResult> {
    let (u, v) = edge;
    let mut pseudo = Vec::new();
    let mut clipped = 0;
    for t in at_risk(d, u, v, cell) {
        let treated = t.action == u;
        let m = outcome_model(&t.state);
        let e = match propensity {
            Propensity::Logged => logged_propensity(t, u)?,
            Propensity::Fitted(pm) => pm.prob(cell, &t.state, u),
        };
        let e = if e < floor {
            clipped += 1;
            floor
        } else {
            e
        };
        let y = t.next.get(v);
        let value = if treated {
            m + (y as u8 as f64 - m) / e
        } else {
            m
        };
        pseudo.push(PseudoOutcome {
            state: t.state,
            treated,
            outcome: y,
            propensity: e,
            model: m,
            value,
        });
    }
    let n = pseudo.len();
    let mut warnings = Vec::new();
    if clipped > 0 {
        warnings.push(format!("{clipped} propensities clipped at {floor}"));
    }
    if n == 0 {
        warnings.push(format!("edge ({u}, {v}) never at risk in cell {cell}"));
    }
    let value = (n > 0).then(|| pseudo.iter().map(|p| p.value).sum::<f64>() / n as f64);
    Ok(AipwResult {
        estimate: EdgeEstimate {
            edge,
            cell,
            value,
            n_effective: n,
            method: Method::Aipw,
            warnings,
        },
        pseudo,
        clipped,
    })
}

/// Logged probability that `u` was chosen in the state of `t`. Only the
/// chosen action's propensity is logged, so for untreated transitions the
/// value is irrelevant and reported as 1.
fn logged_propensity(t: &Transition, u: usize) -> Result<f64> {
    if t.action != u {
        return Ok(1.0);
    }
    t.propensity
        .ok_or_else(|| Error::InvalidParameter("transition lacks a logged propensity".into()))
}

/// Sparse feature vector of `f_theta`.
pub type Features = Vec<(usize, f64)>;

/// Feature layout over edge index `e` and cell `c` (with `m` edges and `k`
/// cells): edge one-hot, edge-by-cell one-hot, cell one-hot, normalized layer
/// gap, intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub edges: usize,
    pub cells: usize,
    /// `(layer(v) - layer(u)) / L` per edge.
    pub gap: Vec<f64>,
}

impl FeatureMap {
    pub fn new(g: &ConstraintGraph, cells: usize) -> Self {
        let l = g.num_layers().max(1) as f64;
        FeatureMap {
            edges: g.num_edges(),
            cells,
            gap: g
                .edges()
                .iter()
                .map(|&(u, v)| (g.layer(v) as f64 - g.layer(u) as f64) / l)
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.edges + self.edges * self.cells + self.cells + 2
    }

    pub fn features(&self, e: usize, c: usize) -> Features {
        let m = self.edges;
        let k = self.cells;
        vec![
            (e, 1.0),
            (m + e * k + c, 1.0),
            (m + m * k + c, 1.0),
            (m + m * k + k, self.gap[e]),
            (m + m * k + k + 1, 1.0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendedModel {
    /// Logit of the physics weight, per edge (or a single entry in global mode).
    pub lambda: Vec<f64>,
    pub theta: Vec<f64>,
    pub features: FeatureMap,
    /// Ridge penalty on `theta`.
    pub l2: f64,
}

/// One training example: edge index, cell, prior value, AIPW pseudo-outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendSample {
    pub edge: usize,
    pub cell: usize,
    pub phi: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub lambda: Vec<f64>,
    pub theta: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub applied: bool,
}

impl BlendedModel {
    pub fn new(features: FeatureMap, lambda0: f64, global_lambda: bool, l2: f64) -> Self {
        let nl = if global_lambda { 1 } else { features.edges };
        BlendedModel {
            lambda: vec![lambda0; nl],
            theta: vec![0.0; features.dim()],
            features,
            l2,
        }
    }

    #[inline]
    fn lambda_index(&self, e: usize) -> usize {
        if self.lambda.len() == 1 {
            0
        } else {
            e
        }
    }

    pub fn f_theta(&self, e: usize, c: usize) -> f64 {
        let z: f64 = self
            .features
            .features(e, c)
            .iter()
            .map(|&(i, x)| self.theta[i] * x)
            .sum();
        sigmoid(z)
    }

    /// `sigm(lambda) * phi + (1 - sigm(lambda)) * f_theta`.
    pub fn blended_weight(&self, e: usize, c: usize, phi: f64) -> f64 {
        let s = sigmoid(self.lambda[self.lambda_index(e)]);
        s * phi + (1.0 - s) * self.f_theta(e, c)
    }

    /// Mean squared error against pseudo-outcomes plus `l2/2 * |theta|^2`.
    pub fn loss(&self, batch: &[BlendSample]) -> f64 {
        let b = batch.len() as f64;
        let se: f64 = batch
            .iter()
            .map(|s| (self.blended_weight(s.edge, s.cell, s.phi) - s.target).powi(2))
            .sum();
        se / b + 0.5 * self.l2 * self.theta.iter().map(|t| t * t).sum::<f64>()
    }

    pub fn gradient(&self, batch: &[BlendSample]) -> Gradient {
        let b = batch.len() as f64;
        let mut gl = vec![0.0; self.lambda.len()];
        let mut gt: Vec<f64> = self.theta.iter().map(|t| self.l2 * t).collect();
        for s in batch {
            let li = self.lambda_index(s.edge);
            let sl = sigmoid(self.lambda[li]);
            let x = self.features.features(s.edge, s.cell);
            let f = sigmoid(x.iter().map(|&(i, v)| self.theta[i] * v).sum());
            let w = sl * s.phi + (1.0 - sl) * f;
            let r = 2.0 * (w - s.target) / b;
            gl[li] += r * (s.phi - f) * sl * (1.0 - sl);
            let df = r * (1.0 - sl) * f * (1.0 - f);
            for (i, v) in x {
                gt[i] += df * v;
            }
        }
        Gradient {
            lambda: gl,
            theta: gt,
            loss: self.loss(batch),
        }
    }

    /// One gradient step on the loss; skipped when the gradient is not finite.
    pub fn update_blend(&mut self, batch: &[BlendSample], learning_rate: f64) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty training batch".into()));
        }
        let g = self.gradient(batch);
        if !g.lambda.iter().chain(&g.theta).all(|x| x.is_finite()) {
            return Ok(StepReport {
                loss: g.loss,
                applied: false,
            });
        }
        for (l, d) in self.lambda.iter_mut().zip(&g.lambda) {
            *l -= learning_rate * d;
        }
        for (t, d) in self.theta.iter_mut().zip(&g.theta) {
            *t -= learning_rate * d;
        }
        Ok(StepReport {
            loss: g.loss,
            applied: true,
        })
    }

    /// Adam on the same loss; used for offline training.
    pub fn fit(&mut self, batch: &[BlendSample], cfg: &FitConfig) -> Result<f64> {
        if batch.is_empty() {
            return Ok(f64::NAN);
        }
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let nl = self.lambda.len();
        let mut m = vec![0.0; nl + self.theta.len()];
        let mut v = m.clone();
        let mut loss = f64::NAN;
        for it in 1..=cfg.iterations {
            let g = self.gradient(batch);
            loss = g.loss;
            let grads = g.lambda.iter().chain(&g.theta);
            let lam_frozen = !cfg.train_lambda;
            for (i, gi) in grads.enumerate() {
                if !gi.is_finite() || (lam_frozen && i < nl) {
                    continue;
                }
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / (1.0 - f64::powi(b1, it as i32));
                let vh = v[i] / (1.0 - f64::powi(b2, it as i32));
                let step = cfg.learning_rate * mh / (vh.sqrt() + eps);
                if i < nl {
                    self.lambda[i] -= step;
                } else {
                    self.theta[i - nl] -= step;
                }
            }
        }
        Ok(loss)
    }

    /// Blended weight for every edge in `cell`.
    pub fn weights_for_cell(&self, prior: &[f64], cells: usize, cell: usize) -> Vec<f64> {
        (0..self.features.edges)
            .map(|e| self.blended_weight(e, cell, prior[e * cells + cell]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub train_lambda: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 400,
            learning_rate: 0.05,
            train_lambda: true,
        }
    }
}

/// One row of the MSE benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseRow {
    pub estimator: String,
    pub n_c: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub delta0: f64,
    pub mse: f64,
    pub bound: f64,
    /// Sup-norm error of the fitted outcome model used by standard DR.
    pub delta_mu: f64,
}

pub fn write_mse_csv<W: Write>(out: W, rows: &[MseRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "estimator", "n_c", "seed", "epsilon", "delta0", "mse", "bound", "delta_mu",
    ])?;
    for r in rows {
        w.write_record([
            r.estimator.clone(),
            r.n_c.to_string(),
            r.seed.to_string(),
            r.epsilon.to_string(),
            r.delta0.to_string(),
            r.mse.to_string(),
            r.bound.to_string(),
            r.delta_mu.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(sigma^2 + delta0^2) / (epsilon^2 N_c)`.
pub fn mse_bound(sigma: f64, delta0: f64, epsilon: f64, n_c: usize) -> f64 {
    (sigma * sigma + delta0 * delta0) / (epsilon * epsilon * n_c as f64)
}

/// Settings of the AIPW mean-squared-error experiment on one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct MseConfig {
    pub edge: (usize, usize),
    pub cell: usize,
    pub n_c_grid: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub delta0s: Vec<f64>,
    pub replications: usize,
    pub sigma: f64,
    pub seed: u64,
}

/// Repeatedly logs `n_c` one-step episodes with [`TargetedPolicy`] on
/// `edge.0` and returns one AIPW estimate per replication, with outcome model
/// `model(state, sample)` built from each replication's data.
pub fn aipw_replications(
    scm: &Scm,
    edge: (usize, usize),
    cell: usize,
    epsilon: f64,
    n_c: usize,
    replications: usize,
    seed: u64,
    model: &dyn Fn(&Dataset) -> Box<dyn Fn(&Bitmap) -> f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(replications);
    let mut pol = TargetedPolicy {
        target: edge.0,
        epsilon,
    };
    for r in 0..replications {
        let d = generate_dataset_with(scm, &mut pol, n_c, 1, derive_seed(seed, "replication", r as u64))?;
        let m = model(&d);
        let res = aipw_estimate(&d, edge, cell, m.as_ref(), &Propensity::Logged, PROPENSITY_FLOOR)?;
        if res.estimate.n_effective != n_c {
            return Err(Error::InvalidParameter(format!(
                "edge ({}, {}) at risk in {} of {n_c} episodes",
                edge.0, edge.1, res.estimate.n_effective
            )));
        }
        out.push(res.estimate.value.expect("nonempty"));
    }
    Ok(out)
}

/// Pooled treated-outcome frequency; the misspecified outcome model of
/// standard DR (it ignores co-parent state).
fn pooled_mean(d: &Dataset, edge: (usize, usize), cell: usize) -> f64 {
    observational_estimate(d, edge, cell).value.unwrap_or(0.5)
}

/// Empirical MSE of PI-DR (physics outcome model off the truth by `delta0`),
/// standard DR (pooled fitted outcome model) and the blend of the two whose
/// mixing weight is fit to inverse-propensity targets.
pub fn mse_benchmark(scm: &Scm, cfg: &MseConfig) -> Result<Vec<MseRow>> {
    let (u, v) = cfg.edge;
    let cell = cfg.cell;
    let truth = scm.marginal_edge_weight_init(u, v, cell)?;
    let mu = move |s: &Bitmap| scm.true_edge_weight(u, v, cell, s).expect("edge checked");
    let mut rows = Vec::new();
    for &eps in &cfg.epsilons {
        for &d0 in &cfg.delta0s {
            for &n_c in &cfg.n_c_grid {
                let seed = derive_seed(cfg.seed, "mse", n_c as u64);
                let phys = move |s: &Bitmap| (mu(s) + d0).clamp(0.0, 1.0);
                let mut sq = [0.0f64; 3];
                let mut delta_mu = 0.0;
                let mut pol = TargetedPolicy { target: u, epsilon: eps };
                for r in 0..cfg.replications {
                    let d = generate_dataset_with(scm, &mut pol, n_c, 1, derive_seed(seed, "replication", r as u64))?;
                    let fitted = pooled_mean(&d, cfg.edge, cell);
                    let pi = aipw_estimate(&d, cfg.edge, cell, &phys, &Propensity::Logged, PROPENSITY_FLOOR)?;
                    let dr = aipw_estimate(&d, cfg.edge, cell, &|_| fitted, &Propensity::Logged, PROPENSITY_FLOOR)?;
                    // mixing weight by least squares against IPW targets
                    let ipw = aipw_estimate(&d, cfg.edge, cell, &|_| 0.0, &Propensity::Logged, PROPENSITY_FLOOR)?;
                    let (mut num, mut den) = (0.0, 0.0);
                    let mut dm: f64 = 0.0;
                    for p in &ipw.pseudo {
                        let a = phys(&p.state) - fitted;
                        num += a * (p.value - fitted);
                        den += a * a;
                        dm = dm.max((fitted - mu(&p.state)).abs());
                    }
                    delta_mu += dm;
                    let alpha = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.5 };
                    let blend = move |s: &Bitmap| alpha * phys(s) + (1.0 - alpha) * fitted;
                    let bl = aipw_estimate(&d, cfg.edge, cell, &blend, &Propensity::Logged, PROPENSITY_FLOOR)?;
                    for (acc, res) in sq.iter_mut().zip([&pi, &dr, &bl]) {
                        let val = res.estimate.value.ok_or_else(|| {
                            Error::InvalidParameter("edge never at risk in replication".into())
                        })?;
                        *acc += (val - truth).powi(2);
                    }
                }
                let reps = cfg.replications as f64;
                let bound = mse_bound(cfg.sigma, d0, eps, n_c);
                for (name, acc) in ["pi_dr", "dr", "blended"].iter().zip(sq) {
                    rows.push(MseRow {
                        estimator: name.to_string(),
                        n_c,
                        seed: cfg.seed,
                        epsilon: eps,
                        delta0: d0,
                        mse: acc / reps,
                        bound,
                        delta_mu: delta_mu / reps,
                    });
                }
            }
        }
    }
    Ok(rows)
}
