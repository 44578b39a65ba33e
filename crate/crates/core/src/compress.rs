//! Count-state abstraction: per-layer violation counts plus the context cell,
//! exact cardinality accounting, and permutation tests for the exchangeability
//! and Markov-sufficiency conditions the abstraction relies on.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::bitmap::Bitmap;
use crate::error::Result;
use crate::graph::ConstraintGraph;
use crate::scm::{Dataset, ViolationState};
use crate::seed::rng;

/// Violation counts per layer (index 0 is layer 1) and the context cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CountState {
    pub counts: Vec<u32>,
    pub cell: usize,
}

impl CountState {
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// Earliest layer with a nonzero count.
    pub fn earliest_layer(&self) -> Option<u32> {
        self.counts.iter().position(|&c| c > 0).map(|i| i as u32 + 1)
    }
}

/// Per-layer violation counts of a bitmap.
pub fn layer_counts(g: &ConstraintGraph, b: &Bitmap) -> Vec<u32> {
    (1..=g.num_layers())
        .map(|l| b.and(g.layer_mask(l)).count_ones() as u32)
        .collect()
}

pub fn to_count_state(g: &ConstraintGraph, s: &ViolationState) -> CountState {
    CountState {
        counts: layer_counts(g, &s.bitmap),
        cell: s.context.cell,
    }
}

/// State-space sizes of the bitmap and the count abstraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Cardinalities {
    /// `2^(W L)`.
    pub bitmap: BigUint,
    /// `(W + 1)^L`.
    pub compact: BigUint,
    /// `log2(bitmap / compact) = W L - L log2(W + 1)`.
    pub log2_ratio: f64,
}

pub fn state_cardinalities(width: u32, layers: u32) -> Cardinalities {
    let bitmap = BigUint::from(1u8) << (width as u64 * layers as u64);
    let compact = BigUint::from(width + 1).pow(layers);
    let log2_ratio = (width as f64) * (layers as f64) - (layers as f64) * ((width + 1) as f64).log2();
    Cardinalities {
        bitmap,
        compact,
        log2_ratio,
    }
}

/// Settings shared by the permutation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationConfig {
    pub permutations: usize,
    /// Cells with fewer observations are skipped.
    pub min_count: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        PermutationConfig {
            permutations: 1000,
            min_count: 20,
            alpha: 0.05,
            seed: 0,
        }
    }
}

/// Observations in one cell: (group label, outcome label).
type Cell = Vec<(usize, usize)>;

/// Mass-weighted total-variation distance of each group's outcome
/// distribution from the pooled one.
fn tv_statistic(groups: &[usize], outcomes: &[usize], n_groups: usize, n_outcomes: usize) -> f64 {
    let n = groups.len() as f64;
    let mut table = vec![0.0; n_groups * n_outcomes];
    let mut gsize = vec![0.0; n_groups];
    let mut pooled = vec![0.0; n_outcomes];
    for (&g, &o) in groups.iter().zip(outcomes) {
        table[g * n_outcomes + o] += 1.0;
        gsize[g] += 1.0;
        pooled[o] += 1.0;
    }
    let mut stat = 0.0;
    for g in 0..n_groups {
        if gsize[g] == 0.0 {
            continue;
        }
        let tv: f64 = (0..n_outcomes)
            .map(|o| (table[g * n_outcomes + o] / gsize[g] - pooled[o] / n).abs())
            .sum::<f64>()
            / 2.0;
        stat += gsize[g] / n * tv;
    }
    stat
}

/// Relabeled cell ready for repeated statistic evaluation.
struct Prepared {
    groups: Vec<usize>,
    outcomes: Vec<usize>,
    n_groups: usize,
    n_outcomes: usize,
}

impl Prepared {
    fn new(cell: &Cell) -> Self {
        let mut gmap = BTreeMap::new();
        let mut omap = BTreeMap::new();
        let mut groups = Vec::with_capacity(cell.len());
        let mut outcomes = Vec::with_capacity(cell.len());
        for &(g, o) in cell {
            let k = gmap.len();
            groups.push(*gmap.entry(g).or_insert(k));
            let k = omap.len();
            outcomes.push(*omap.entry(o).or_insert(k));
        }
        Prepared {
            groups,
            outcomes,
            n_groups: gmap.len(),
            n_outcomes: omap.len(),
        }
    }

    fn stat(&self, groups: &[usize]) -> f64 {
        tv_statistic(groups, &self.outcomes, self.n_groups, self.n_outcomes)
    }
}

/// One tested cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellTest {
    pub layer: u32,
    /// Count state and context cell, e.g. `2-0-1@3`.
    pub cell: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Layer-level result pooled over its cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTest {
    pub layer: u32,
    pub statistic: f64,
    pub p_value: f64,
    pub cells: usize,
    pub n: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PermutationReport {
    pub cells: Vec<CellTest>,
    pub layers: Vec<LayerTest>,
    /// Cells with at least two groups but too few observations.
    pub skipped: usize,
    /// Fraction of eligible observations that fell in tested cells.
    pub coverage: f64,
}

impl PermutationReport {
    pub fn flagged_layers(&self) -> Vec<u32> {
        self.layers.iter().filter(|l| l.flagged).map(|l| l.layer).collect()
    }

    /// CSV with columns `layer,cell,statistic,p,n`; layer rows use cell `all`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "cell", "statistic", "p", "n"])?;
        for c in &self.cells {
            w.write_record([
                c.layer.to_string(),
                c.cell.clone(),
                c.statistic.to_string(),
                c.p_value.to_string(),
                c.n.to_string(),
            ])?;
        }
        for l in &self.layers {
            w.write_record([
                l.layer.to_string(),
                "all".to_string(),
                l.statistic.to_string(),
                l.p_value.to_string(),
                l.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cell_key(cs: &CountState) -> String {
    let counts: Vec<String> = cs.counts.iter().map(|c| c.to_string()).collect();
    format!("{}@{}", counts.join("-"), cs.cell)
}

/// Runs per-cell permutation tests and a stratified per-layer test that
/// permutes group labels within every cell of the layer at once.
fn permutation_tests(
    cells: BTreeMap<(u32, CountState), Cell>,
    cfg: &PermutationConfig,
) -> PermutationReport {
    let mut report = PermutationReport::default();
    let mut r = rng(cfg.seed);
    let eligible: usize = cells.values().map(|c| c.len()).sum();
    let mut tested_n = 0;
    let mut by_layer: BTreeMap<u32, Vec<(String, Prepared)>> = BTreeMap::new();
    for ((layer, cs), cell) in cells {
        let prep = Prepared::new(&cell);
        if prep.n_groups < 2 {
            continue;
        }
        if cell.len() < cfg.min_count {
            report.skipped += 1;
            continue;
        }
        tested_n += cell.len();
        by_layer.entry(layer).or_default().push((cell_key(&cs), prep));
    }
    report.coverage = if eligible == 0 {
        0.0
    } else {
        tested_n as f64 / eligible as f64
    };
    let b = cfg.permutations;
    for (layer, preps) in by_layer {
        let total: usize = preps.iter().map(|p| p.1.groups.len()).sum();
        let weight = |p: &Prepared| p.groups.len() as f64 / total as f64;
        let observed: Vec<f64> = preps.iter().map(|(_, p)| p.stat(&p.groups)).collect();
        let layer_obs: f64 = preps.iter().zip(&observed).map(|((_, p), s)| weight(p) * s).sum();
        let mut cell_hits = vec![0usize; preps.len()];
        let mut layer_hits = 0usize;
        let mut shuffled: Vec<Vec<usize>> = preps.iter().map(|(_, p)| p.groups.clone()).collect();
        for _ in 0..b {
            let mut layer_stat = 0.0;
            for (i, (_, p)) in preps.iter().enumerate() {
                shuffled[i].shuffle(&mut r);
                let s = p.stat(&shuffled[i]);
                if s >= observed[i] - 1e-12 {
                    cell_hits[i] += 1;
                }
                layer_stat += weight(p) * s;
            }
            if layer_stat >= layer_obs - 1e-12 {
                layer_hits += 1;
            }
        }
        let pval = |hits: usize| (1 + hits) as f64 / (1 + b) as f64;
        for (i, (key, p)) in preps.iter().enumerate() {
            report.cells.push(CellTest {
                layer,
                cell: key.clone(),
                statistic: observed[i],
                p_value: pval(cell_hits[i]),
                n: p.groups.len(),
            });
        }
        let p_value = pval(layer_hits);
        report.layers.push(LayerTest {
            layer,
            statistic: layer_obs,
            p_value,
            cells: preps.len(),
            n: total,
            flagged: p_value < cfg.alpha,
        });
    }
    report
}

/// Dense ids for next count states.
fn outcome_ids(g: &ConstraintGraph, d: &Dataset) -> HashMap<Vec<u32>, usize> {
    let mut ids = HashMap::new();
    for (_, t) in d.transitions() {
        let k = ids.len();
        ids.entry(layer_counts(g, &t.next)).or_insert(k);
    }
    ids
}

/// Tests whether, within a count state and context cell, the next count
/// state depends on which node of the acted-on layer was repaired.
pub fn exchangeability_test(
    d: &Dataset,
    g: &ConstraintGraph,
    cfg: &PermutationConfig,
) -> PermutationReport {
    let ids = outcome_ids(g, d);
    let mut cells: BTreeMap<(u32, CountState), Cell> = BTreeMap::new();
    for (cell, t) in d.transitions() {
        let cs = CountState {
            counts: layer_counts(g, &t.state),
            cell,
        };
        let out = ids[&layer_counts(g, &t.next)];
        cells.entry((g.layer(t.action), cs)).or_default().push((t.action, out));
    }
    permutation_tests(cells, cfg)
}

/// Among transitions that repair a node of the earliest violated layer,
/// tests whether the next count state depends on the underlying bitmap
/// once the count state, action layer and context cell are fixed.
pub fn markov_sufficiency_check(
    d: &Dataset,
    g: &ConstraintGraph,
    cfg: &PermutationConfig,
) -> PermutationReport {
    let ids = outcome_ids(g, d);
    let mut labels: HashMap<Bitmap, usize> = HashMap::new();
    let mut cells: BTreeMap<(u32, CountState), Cell> = BTreeMap::new();
    for (cell, t) in d.transitions() {
        let layer = g.layer(t.action);
        if g.earliest_layer_unchecked(&t.state) != Some(layer) {
            continue;
        }
        let cs = CountState {
            counts: layer_counts(g, &t.state),
            cell,
        };
        let k = labels.len();
        let label = *labels.entry(t.state).or_insert(k);
        let out = ids[&layer_counts(g, &t.next)];
        cells.entry((layer, cs)).or_default().push((label, out));
    }
    permutation_tests(cells, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{generate_dataset_with, EarliestLayerUniform, Scm, ScmParams, TauSpec};
    use num_traits::ToPrimitive;
    use proptest::prelude::*;

    #[test]
    fn count_state_basics() {
        let g = ConstraintGraph::new(vec![1, 1, 1, 2, 2, 2], vec![(0, 3)]).unwrap();
        assert_eq!(layer_counts(&g, &Bitmap::zeros(6)), vec![0, 0]);
        assert_eq!(layer_counts(&g, &Bitmap::ones(6)), vec![3, 3]);
        let a = layer_counts(&g, &Bitmap::from_indices(6, &[0, 4]));
        let b = layer_counts(&g, &Bitmap::from_indices(6, &[2, 5]));
        assert_eq!(a, b);
    }

    #[test]
    fn cardinalities() {
        let c = state_cardinalities(22, 5);
        assert_eq!(c.bitmap, BigUint::from(2u8).pow(110));
        assert_eq!(c.compact, BigUint::from(6_436_343u32));
        let one = state_cardinalities(1, 1);
        assert_eq!((one.bitmap.clone(), one.compact.clone()), (BigUint::from(2u8), BigUint::from(2u8)));
        assert_eq!(one.log2_ratio, 0.0);
    }

    /// log2 of a big integer from its top 64 bits.
    fn big_log2(x: &BigUint) -> f64 {
        let bits = x.bits();
        let shift = bits.saturating_sub(64);
        (x >> shift).to_f64().unwrap().log2() + shift as f64
    }

    proptest! {
        #[test]
        fn log_ratio_matches_big_integers(w in 1u32..64, l in 1u32..12) {
            let c = state_cardinalities(w, l);
            let direct = big_log2(&c.bitmap) - big_log2(&c.compact);
            prop_assert!((direct - c.log2_ratio).abs() < 1e-9 * (1.0 + direct.abs()));
        }

        #[test]
        fn counts_ignore_within_layer_relabeling(bits in 0u64..(1 << 12), seed in 0u64..1000) {
            let layers: Vec<u32> = (0..12).map(|v| v / 4 + 1).collect();
            let g = ConstraintGraph::new(layers, vec![]).unwrap();
            let b = Bitmap::from_u64(12, bits);
            let mut perm: Vec<usize> = (0..12).collect();
            let mut r = rng(seed);
            for l in 0..3 {
                perm[l * 4..l * 4 + 4].shuffle(&mut r);
            }
            let mut p = Bitmap::zeros(12);
            for v in b.iter_ones() {
                p.set(perm[v]);
            }
            prop_assert_eq!(layer_counts(&g, &b), layer_counts(&g, &p));
        }
    }

    /// Complete bipartite links between consecutive layers with equal
    /// weights, so nodes within a layer are interchangeable; `deviant`
    /// raises the stay probability on one node's outgoing edges.
    fn symmetric_scm(deviant: Option<(usize, f64)>) -> Scm {
        let (l, w) = (3u32, 3usize);
        let layers: Vec<u32> = (0..l * w as u32).map(|v| v / w as u32 + 1).collect();
        let mut edges = Vec::new();
        for a in 0..(l as usize - 1) * w {
            let la = a / w;
            for b in (la + 1) * w..(la + 2) * w {
                edges.push((a, b));
            }
        }
        let g = ConstraintGraph::new(layers, edges).unwrap();
        let mut p = ScmParams::uniform(&g, 0.3, 0.6);
        p.require_violation = true;
        if let Some((node, off)) = deviant {
            for (i, &(u, _)) in g.edges().iter().enumerate() {
                if u == node {
                    p.edges[i].tau = TauSpec::Constant { p: 0.3 + off };
                }
            }
        }
        Scm::new(g, p).unwrap()
    }

    fn logged(m: &Scm, seed: u64) -> Dataset {
        let mut pol = EarliestLayerUniform { graph: m.graph() };
        generate_dataset_with(m, &mut pol, 3000, 12, seed).unwrap()
    }

    #[test]
    fn exchangeable_env_rarely_flagged() {
        let m = symmetric_scm(None);
        let mut flags = 0;
        for seed in 0..5 {
            let cfg = PermutationConfig {
                seed,
                ..Default::default()
            };
            let rep = exchangeability_test(&logged(&m, seed), m.graph(), &cfg);
            assert!(!rep.layers.is_empty());
            flags += rep.flagged_layers().len();
        }
        // five seeds, two testable layers each, nominal level 0.05
        assert!(flags <= 1, "{flags} layers flagged");
    }

    #[test]
    fn deviant_node_flags_its_layer() {
        let m = symmetric_scm(Some((1, 0.3)));
        let cfg = PermutationConfig::default();
        let rep = exchangeability_test(&logged(&m, 7), m.graph(), &cfg);
        assert!(rep.flagged_layers().contains(&1), "{:?}", rep.layers);
    }

    #[test]
    fn markov_check_on_symmetric_and_deviant_envs() {
        let cfg = PermutationConfig::default();
        let m = symmetric_scm(None);
        let rep = markov_sufficiency_check(&logged(&m, 3), m.graph(), &cfg);
        assert!(rep.flagged_layers().is_empty(), "{:?}", rep.layers);
        let dev = symmetric_scm(Some((1, 0.3)));
        let rep = markov_sufficiency_check(&logged(&dev, 3), dev.graph(), &cfg);
        assert_eq!(rep.flagged_layers(), vec![1], "{:?}", rep.layers);
    }

    #[test]
    fn empty_dataset_skips_everything() {
        let m = symmetric_scm(None);
        let d = Dataset {
            seed: 0,
            scm_hash: String::new(),
            num_nodes: 9,
            episodes: vec![],
        };
        let rep = exchangeability_test(&d, m.graph(), &PermutationConfig::default());
        assert!(rep.cells.is_empty() && rep.layers.is_empty());
        assert_eq!(rep.coverage, 0.0);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), "layer,cell,statistic,p,n");
    }
}
