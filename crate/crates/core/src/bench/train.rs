//! Offline training of every planner's edge weights from a logged dataset.

use crate::error::Result;
use crate::estimate::{BlendSample, BlendedModel, FeatureMap, FitConfig, PhysicsPrior, PROPENSITY_FLOOR};
use crate::plan::WeightTable;
use crate::scm::{Dataset, Scm};

/// Edge weights and models learned from one training set.
#[derive(Debug, Clone)]
pub struct Trained {
    /// Physics prior per edge and cell, `edge * cells + cell`.
    pub prior: Vec<f64>,
    /// Unadjusted treated-outcome frequencies.
    pub observational: WeightTable,
    /// Blend fit on physics-anchored pseudo-outcomes.
    pub blended: BlendedModel,
    /// Learned component alone, fit on the same pseudo-outcomes.
    pub neural: BlendedModel,
    /// Learned component fit on standard DR pseudo-outcomes.
    pub dr: BlendedModel,
    pub samples: usize,
}

impl Trained {
    fn table(&self, cells: usize, f: impl Fn(usize, usize) -> f64) -> WeightTable {
        let m = self.blended.features.edges;
        WeightTable {
            by_cell: (0..cells).map(|c| (0..m).map(|e| f(e, c)).collect()).collect(),
        }
    }

    pub fn physics_table(&self, cells: usize) -> WeightTable {
        self.table(cells, |e, c| self.prior[e * cells + c])
    }

    pub fn blended_table(&self, cells: usize) -> WeightTable {
        self.table(cells, |e, c| self.blended.blended_weight(e, c, self.prior[e * cells + c]))
    }

    pub fn neural_table(&self, cells: usize) -> WeightTable {
        self.table(cells, |e, c| self.neural.f_theta(e, c))
    }

    pub fn dr_table(&self, cells: usize) -> WeightTable {
        self.table(cells, |e, c| self.dr.f_theta(e, c))
    }
}

/// One at-risk observation in the identifying stratum.
struct Obs {
    edge: usize,
    cell: usize,
    treated: bool,
    propensity: f64,
    stayed: bool,
}

/// At-risk pairs `(u, v)` where the repair of `u` would take full effect
/// (no lower-layer violation, no violated parent of `u`) and every other
/// parent of `v` is satisfied, so the outcome isolates the edge's own stay
/// factor.
fn stratum(scm: &Scm, d: &Dataset) -> Vec<Obs> {
    let g = scm.graph();
    let mut out = Vec::new();
    for (cell, t) in d.transitions() {
        let s = &t.state;
        let Some(front) = g.earliest_layer_unchecked(s) else {
            continue;
        };
        for u in s.and(g.layer_mask(front)).iter_ones() {
            if g.parents(u).iter().any(|&(p, _)| s.get(p)) {
                continue;
            }
            for &(v, e) in g.children(u) {
                if !s.get(v) || g.parents(v).iter().any(|&(p, _)| p != u && s.get(p)) {
                    continue;
                }
                let treated = t.action == u;
                out.push(Obs {
                    edge: e,
                    cell,
                    treated,
                    propensity: if treated { t.propensity.unwrap_or(1.0) } else { 1.0 },
                    stayed: t.next.get(v),
                });
            }
        }
    }
    out
}

fn pseudo(o: &Obs, m: f64) -> f64 {
    if o.treated {
        m + (o.stayed as u8 as f64 - m) / o.propensity.max(PROPENSITY_FLOOR)
    } else {
        m
    }
}

/// Fits the observational table, the physics-anchored blend, its learned
/// component alone, and the standard-DR learned model.
pub fn train(
    scm: &Scm,
    d: &Dataset,
    prior: &PhysicsPrior,
    fit: &FitConfig,
    l2: f64,
) -> Result<Trained> {
    let g = scm.graph();
    let cells = scm.num_cells();
    let m = g.num_edges();
    let prior = prior.cell_table(scm)?;

    // observational: all at-risk transitions with A = u
    let mut obs = vec![(0usize, 0usize); m * cells];
    for (cell, t) in d.transitions() {
        let u = t.action;
        for &(v, e) in g.children(u) {
            if t.state.get(v) {
                let x = &mut obs[e * cells + cell];
                x.0 += 1;
                x.1 += t.next.get(v) as usize;
            }
        }
    }
    let (tk, ty) = obs.iter().fold((0, 0), |a, x| (a.0 + x.0, a.1 + x.1));
    let global = if tk > 0 { ty as f64 / tk as f64 } else { 0.5 };
    let mut observational = WeightTable::constant(m, cells, global);
    for e in 0..m {
        let (ek, ey) = (0..cells).fold((0, 0), |a, c| (a.0 + obs[e * cells + c].0, a.1 + obs[e * cells + c].1));
        for c in 0..cells {
            let (k, y) = obs[e * cells + c];
            observational.by_cell[c][e] = if k > 0 {
                y as f64 / k as f64
            } else if ek > 0 {
                ey as f64 / ek as f64
            } else {
                global
            };
        }
    }

    let strat = stratum(scm, d);
    // standard DR outcome model: treated frequency per edge, pooled over cells
    let mut mu = vec![(0usize, 0usize); m];
    for o in strat.iter().filter(|o| o.treated) {
        mu[o.edge].0 += 1;
        mu[o.edge].1 += o.stayed as usize;
    }
    let (sk, sy) = mu.iter().fold((0, 0), |a, x| (a.0 + x.0, a.1 + x.1));
    let mu_global = if sk > 0 { sy as f64 / sk as f64 } else { 0.5 };
    let mu_hat: Vec<f64> = mu
        .iter()
        .map(|&(k, y)| if k > 0 { y as f64 / k as f64 } else { mu_global })
        .collect();

    let pi_batch: Vec<BlendSample> = strat
        .iter()
        .map(|o| {
            let phi = prior[o.edge * cells + o.cell];
            BlendSample {
                edge: o.edge,
                cell: o.cell,
                phi,
                target: pseudo(o, phi),
            }
        })
        .collect();
    let dr_batch: Vec<BlendSample> = strat
        .iter()
        .map(|o| BlendSample {
            edge: o.edge,
            cell: o.cell,
            phi: prior[o.edge * cells + o.cell],
            target: pseudo(o, mu_hat[o.edge]),
        })
        .collect();

    let features = FeatureMap::new(g, cells);
    let mut blended = BlendedModel::new(features.clone(), 0.0, false, l2);
    blended.fit(&pi_batch, fit)?;
    let frozen = FitConfig {
        train_lambda: false,
        ..*fit
    };
    let mut neural = BlendedModel::new(features.clone(), -50.0, false, l2);
    neural.fit(&pi_batch, &frozen)?;
    let mut dr = BlendedModel::new(features, -50.0, false, l2);
    dr.fit(&dr_batch, &frozen)?;
    Ok(Trained {
        prior,
        observational,
        blended,
        neural,
        dr,
        samples: strat.len(),
    })
}
