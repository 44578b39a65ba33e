//! Edge-weight identification from logged transitions.
//!
//! A transition puts edge `u -> v` *at risk* when both `u` and `v` are
//! violated in its source state; its outcome is `Y = 1{v violated next}`.
//! All estimators work per context cell without smoothing across cells.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::graph::ConstraintGraph;
use crate::scm::{
    CascadeRule, ContextSpec, Dataset, EdgeParams, Scm, ScmParams, TauSpec, Transition,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Backdoor,
    Observational,
    Aipw,
    Blended,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Backdoor => "backdoor",
            Method::Observational => "observational",
            Method::Aipw => "aipw",
            Method::Blended => "blended",
            Method::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEstimate {
    pub edge: (usize, usize),
    pub cell: usize,
    /// `None` when no transition contributed.
    pub value: Option<f64>,
    pub n_effective: usize,
    pub method: Method,
    pub warnings: Vec<String>,
}

impl EdgeEstimate {
    pub fn is_defined(&self) -> bool {
        self.value.is_some()
    }
}

/// At-risk transitions of `u -> v` in `cell`.
pub fn at_risk<'d>(
    d: &'d Dataset,
    u: usize,
    v: usize,
    cell: usize,
) -> impl Iterator<Item = &'d Transition> + 'd {
    d.transitions()
        .filter(move |(c, t)| *c == cell && t.state.get(u) && t.state.get(v))
        .map(|(_, t)| t)
}

fn structural_warnings(g: &ConstraintGraph, u: usize, v: usize) -> Result<Vec<String>> {
    if g.edge_id(u, v).is_none() {
        return Err(Error::NotAnEdge(u, v));
    }
    let mut w = Vec::new();
    if g.layer(u) >= g.layer(v) {
        w.push(format!("edge ({u}, {v}) is not a cross-layer forward edge"));
    }
    let beta = g.beta();
    if beta > 0.0 {
        w.push(format!("graph has backward-edge density {beta:.4}; adjustment may be biased"));
    }
    Ok(w)
}

fn coparents(g: &ConstraintGraph, u: usize, v: usize) -> Bitmap {
    let mut z = Bitmap::zeros(g.num_nodes());
    for &(p, _) in g.parents(v) {
        if p != u {
            z.set(p);
        }
    }
    z
}

/// Backdoor adjustment over the co-parents `Z = Pa(v) \ {u}`:
/// `sum_z P(Y | A = u, Z = z, c) P(Z = z | c)`.
pub fn backdoor_estimate(
    d: &Dataset,
    g: &ConstraintGraph,
    edge: (usize, usize),
    cell: usize,
) -> Result<EdgeEstimate> {
    let (u, v) = edge;
    let mut warnings = structural_warnings(g, u, v)?;
    let z = coparents(g, u, v);
    // stratum -> (at-risk count, A = u count, A = u outcome sum)
    let mut strata: BTreeMap<Bitmap, (usize, usize, usize)> = BTreeMap::new();
    for t in at_risk(d, u, v, cell) {
        let e = strata.entry(t.state.and(&z)).or_insert((0, 0, 0));
        e.0 += 1;
        if t.action == u {
            e.1 += 1;
            e.2 += t.next.get(v) as usize;
        }
    }
    let total: usize = strata.values().map(|x| x.0).sum();
    let n_eff: usize = strata.values().map(|x| x.1).sum();
    if n_eff == 0 {
        warnings.push(format!("no transitions repair {u} in cell {cell}"));
        return Ok(EdgeEstimate {
            edge,
            cell,
            value: None,
            n_effective: 0,
            method: Method::Backdoor,
            warnings,
        });
    }
    let mut covered = 0.0;
    let mut acc = 0.0;
    let mut dropped = 0;
    for &(n, k, y) in strata.values() {
        let pz = n as f64 / total as f64;
        if k == 0 {
            dropped += 1;
            continue;
        }
        covered += pz;
        acc += pz * y as f64 / k as f64;
    }
    if dropped > 0 {
        warnings.push(format!(
            "{dropped} co-parent strata lack A = {u} transitions; {:.4} of the mass renormalized",
            1.0 - covered
        ));
    }
    Ok(EdgeEstimate {
        edge,
        cell,
        value: Some(acc / covered),
        n_effective: n_eff,
        method: Method::Backdoor,
        warnings,
    })
}

/// Unadjusted conditional frequency `P(Y | A = u, c)`.
pub fn observational_estimate(d: &Dataset, edge: (usize, usize), cell: usize) -> EdgeEstimate {
    let (u, v) = edge;
    let mut k = 0usize;
    let mut y = 0usize;
    for t in at_risk(d, u, v, cell) {
        if t.action == u {
            k += 1;
            y += t.next.get(v) as usize;
        }
    }
    let mut warnings = Vec::new();
    if k == 0 {
        warnings.push(format!("no transitions repair {u} in cell {cell}"));
    }
    EdgeEstimate {
        edge,
        cell,
        value: (k > 0).then(|| y as f64 / k as f64),
        n_effective: k,
        method: Method::Observational,
        warnings,
    }
}

/// `b / (1 - b)` with `b = beta * edge_count * gamma`; infinite once `b >= 1`.
pub fn partial_id_bound(beta: f64, edge_count: usize, gamma: f64) -> f64 {
    let b = beta * edge_count as f64 * gamma;
    if b >= 1.0 {
        f64::INFINITY
    } else {
        b / (1.0 - b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub edge: (usize, usize),
    pub cell: usize,
    pub observational: f64,
    pub oracle: f64,
    pub gap: f64,
    /// Sampling allowance added to the bound (multiple of the standard error).
    pub allowance: f64,
    pub n: usize,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub beta: f64,
    pub edge_count: usize,
    pub gamma: f64,
    pub bound: f64,
    pub rows: Vec<AuditRow>,
    /// (edge, cell) pairs without data.
    pub skipped: usize,
    pub violations: usize,
}

/// Compares the observational estimate of every cross-layer edge with the
/// oracle weight (co-parents satisfied) and checks the gap against the
/// partial-identification bound plus `se_mult` standard errors.
pub fn bias_audit(d: &Dataset, m: &Scm, gamma: f64, se_mult: f64) -> Result<AuditReport> {
    let g = m.graph();
    let beta = g.beta();
    let bound = partial_id_bound(beta, g.num_edges(), gamma);
    let clear = Bitmap::zeros(g.num_nodes());
    let mut rows = Vec::new();
    let mut skipped = 0;
    for &(u, v) in g.edges() {
        if g.layer(u) >= g.layer(v) {
            continue;
        }
        for cell in 0..m.num_cells() {
            let est = observational_estimate(d, (u, v), cell);
            let Some(obs) = est.value else {
                skipped += 1;
                continue;
            };
            let oracle = m.true_edge_weight(u, v, cell, &clear)?;
            let n = est.n_effective;
            let p = oracle.clamp(0.0, 1.0);
            let allowance = se_mult * (p * (1.0 - p) / n as f64).sqrt() + 0.5 / n as f64;
            let gap = (obs - oracle).abs();
            rows.push(AuditRow {
                edge: (u, v),
                cell,
                observational: obs,
                oracle,
                gap,
                allowance,
                n,
                violated: gap > bound + allowance,
            });
        }
    }
    let violations = rows.iter().filter(|r| r.violated).count();
    Ok(AuditReport {
        beta,
        edge_count: g.num_edges(),
        gamma,
        bound,
        rows,
        skipped,
        violations,
    })
}

/// Parameters of a γ-respecting environment: every node above layer 1 has
/// exactly one forward parent (in the previous layer), and each backward edge
/// moves a child's stay or onset probability by at most `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaScmSpec {
    pub layers: u32,
    pub width: usize,
    pub beta: f64,
    pub gamma: f64,
    pub context: ContextSpec,
    pub leak: f64,
}

pub fn gamma_respecting_scm<R: Rng + ?Sized>(spec: &GammaScmSpec, rng: &mut R) -> Result<Scm> {
    if spec.layers < 2 {
        return Err(Error::InvalidParameter("need at least two layers".into()));
    }
    if !(0.0..=1.0).contains(&spec.gamma) {
        return Err(Error::InvalidParameter(format!("gamma {} outside [0, 1]", spec.gamma)));
    }
    let w = spec.width;
    let n = spec.layers as usize * w;
    let layers: Vec<u32> = (0..n).map(|v| (v / w) as u32 + 1).collect();
    let mut edges = Vec::new();
    for v in w..n {
        let l = v / w;
        edges.push(((l - 1) * w + rng.random_range(0..w), v));
    }
    let forward = ConstraintGraph::with_loa(layers, edges)?;
    let g = forward.inject_backward_edges(spec.beta, rng)?;
    let dims = spec.context.num_dims();
    let params: Vec<EdgeParams> = g
        .edges()
        .iter()
        .map(|&(u, v)| {
            if g.is_backward(u, v) {
                EdgeParams {
                    tau: TauSpec::Constant {
                        p: spec.gamma * rng.random::<f64>(),
                    },
                    onset_factor: 1.0,
                }
            } else {
                EdgeParams {
                    tau: TauSpec::Logistic {
                        bias: -1.0 + 1.5 * rng.random::<f64>(),
                        slopes: (0..dims).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect(),
                    },
                    onset_factor: 0.0,
                }
            }
        })
        .collect();
    let scm = ScmParams {
        context: spec.context.clone(),
        edges: params,
        base_fix: vec![1.0; n],
        wrong_order_factor: 1.0,
        layer_gating: false,
        feedback_prob: 0.0,
        declared_regular: true,
        noise_sd: 0.5,
        leak: vec![spec.leak; n],
        require_violation: true,
        cascade: CascadeRule::default(),
    };
    Scm::new(g, scm)
}

pub fn write_estimates_csv<W: Write>(out: W, rows: &[EdgeEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["u", "v", "cell", "method", "value", "n_effective"])?;
    for r in rows {
        w.write_record([
            r.edge.0.to_string(),
            r.edge.1.to_string(),
            r.cell.to_string(),
            r.method.name().to_string(),
            r.value.map(|x| x.to_string()).unwrap_or_else(|| "NA".into()),
            r.n_effective.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
