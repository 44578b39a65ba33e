//! Layered constraint-dependency graph.
//!
//! Nodes are constraints `0..n`, each assigned to exactly one layer in `1..=L`.
//! An edge `(u, v)` means a violation of `u` can propagate to `v`. Under the
//! lifecycle ordering every edge satisfies `layer(u) <= layer(v)` and the graph
//! is acyclic; edges with `layer(u) > layer(v)` are *backward* and their share
//! of the edge set is the backward-edge density β.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitmap::{Bitmap, MAX_NODES};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ConstraintGraph {
    layer: Vec<u32>,
    num_layers: u32,
    edges: Vec<(usize, usize)>,
    edge_index: HashMap<(usize, usize), usize>,
    /// (parent, edge index) per node, ascending by parent.
    parents: Vec<Vec<(usize, usize)>>,
    /// (child, edge index) per node, ascending by child.
    children: Vec<Vec<(usize, usize)>>,
    child_mask: Vec<Bitmap>,
    layer_mask: Vec<Bitmap>,
    /// `lower_mask[l - 1]` holds every node in layers `< l`.
    lower_mask: Vec<Bitmap>,
    ancestors: Vec<Bitmap>,
    width: usize,
}

/// Result of checking the lifecycle ordering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoaReport {
    pub is_dag: bool,
    pub beta: f64,
    pub backward_edges: Vec<(usize, usize)>,
    pub cycles: Vec<Vec<usize>>,
}

impl LoaReport {
    pub fn holds(&self) -> bool {
        self.is_dag && self.backward_edges.is_empty()
    }
}

/// Serializable graph description used by config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub layers: Vec<u32>,
    pub edges: Vec<(usize, usize)>,
}

impl ConstraintGraph {
    /// Builds a graph from per-node layers (1-based, `0` meaning unassigned)
    /// and an edge list. Layer count is the largest layer used.
    pub fn new(layers: Vec<u32>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let l = layers.iter().copied().max().unwrap_or(0);
        Self::with_layer_count(layers, edges, l)
    }

    pub fn with_layer_count(
        layers: Vec<u32>,
        mut edges: Vec<(usize, usize)>,
        num_layers: u32,
    ) -> Result<Self> {
        let n = layers.len();
        if n > MAX_NODES {
            return Err(Error::TooLarge {
                nodes: n,
                limit: MAX_NODES,
            });
        }
        for (v, &l) in layers.iter().enumerate() {
            if l == 0 {
                return Err(Error::MissingLayer { node: v });
            }
            if l > num_layers {
                return Err(Error::Structure(format!(
                    "node {v} has layer {l} beyond layer count {num_layers}"
                )));
            }
        }
        edges.sort_unstable();
        let mut edge_index = HashMap::with_capacity(edges.len());
        for (i, &(u, v)) in edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(Error::Structure(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u == v {
                return Err(Error::SelfEdge(u));
            }
            if edge_index.insert((u, v), i).is_some() {
                return Err(Error::DuplicateEdge(u, v));
            }
        }

        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut child_mask = vec![Bitmap::zeros(n); n];
        for (i, &(u, v)) in edges.iter().enumerate() {
            parents[v].push((u, i));
            children[u].push((v, i));
            child_mask[u].set(v);
        }
        for p in parents.iter_mut() {
            p.sort_unstable();
        }

        let mut layer_mask = vec![Bitmap::zeros(n); num_layers as usize];
        for (v, &l) in layers.iter().enumerate() {
            layer_mask[(l - 1) as usize].set(v);
        }
        let mut lower_mask = Vec::with_capacity(num_layers as usize);
        let mut acc = Bitmap::zeros(n);
        for m in &layer_mask {
            lower_mask.push(acc);
            acc = acc.or(m);
        }
        let width = layer_mask.iter().map(|m| m.count_ones()).max().unwrap_or(0);

        let mut g = ConstraintGraph {
            layer: layers,
            num_layers,
            edges,
            edge_index,
            parents,
            children,
            child_mask,
            layer_mask,
            lower_mask,
            ancestors: Vec::new(),
            width,
        };
        g.ancestors = (0..n).map(|v| g.collect_ancestors(v)).collect();
        Ok(g)
    }

    /// Builds a graph and rejects it unless it is a DAG with no backward edges.
    pub fn with_loa(layers: Vec<u32>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let g = Self::new(layers, edges)?;
        let report = g.validate_loa();
        if !report.is_dag {
            return Err(Error::Structure(format!(
                "graph has cycles: {:?}",
                report.cycles
            )));
        }
        if let Some(&(u, v)) = report.backward_edges.first() {
            return Err(Error::Structure(format!(
                "edge ({u}, {v}) points from layer {} back to layer {}",
                g.layer(u),
                g.layer(v)
            )));
        }
        Ok(g)
    }

    /// Builds a graph from a sparse `(node, layer)` assignment; every node in
    /// `0..n` must appear exactly once.
    pub fn from_assignment(
        n: usize,
        assignment: &[(usize, u32)],
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let mut layers = vec![0u32; n];
        for &(v, l) in assignment {
            if v >= n {
                return Err(Error::Structure(format!("layer given for unknown node {v}")));
            }
            if layers[v] != 0 {
                return Err(Error::Structure(format!("node {v} assigned two layers")));
            }
            if l == 0 {
                return Err(Error::Structure(format!("node {v} has layer 0; layers start at 1")));
            }
            layers[v] = l;
        }
        Self::new(layers, edges)
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        Self::new(spec.layers.clone(), spec.edges.clone())
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            layers: self.layer.clone(),
            edges: self.edges.clone(),
        }
    }

    fn collect_ancestors(&self, v: usize) -> Bitmap {
        let n = self.num_nodes();
        let mut seen = Bitmap::zeros(n);
        let mut stack: Vec<usize> = self.parents[v].iter().map(|&(p, _)| p).collect();
        while let Some(u) = stack.pop() {
            if seen.get(u) {
                continue;
            }
            seen.set(u);
            stack.extend(self.parents[u].iter().map(|&(p, _)| p));
        }
        seen.clear(v);
        seen
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.layer.len()
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    #[inline]
    pub fn num_layers(&self) -> u32 {
        self.num_layers
    }

    /// Maximum layer width W.
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn layer(&self, v: usize) -> u32 {
        self.layer[v]
    }

    pub fn layers(&self) -> &[u32] {
        &self.layer
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_id(&self, u: usize, v: usize) -> Option<usize> {
        self.edge_index.get(&(u, v)).copied()
    }

    #[inline]
    pub fn parents(&self, v: usize) -> &[(usize, usize)] {
        &self.parents[v]
    }

    #[inline]
    pub fn children(&self, u: usize) -> &[(usize, usize)] {
        &self.children[u]
    }

    #[inline]
    pub fn child_mask(&self, u: usize) -> &Bitmap {
        &self.child_mask[u]
    }

    /// Nodes in layer `l` (1-based).
    #[inline]
    pub fn layer_mask(&self, l: u32) -> &Bitmap {
        &self.layer_mask[(l - 1) as usize]
    }

    /// Nodes in layers strictly below `l`.
    #[inline]
    pub fn lower_mask(&self, l: u32) -> &Bitmap {
        &self.lower_mask[(l - 1) as usize]
    }

    #[inline]
    pub fn ancestors(&self, v: usize) -> &Bitmap {
        &self.ancestors[v]
    }

    pub fn layer_size(&self, l: u32) -> usize {
        self.layer_mask(l).count_ones()
    }

    #[inline]
    pub fn is_backward(&self, u: usize, v: usize) -> bool {
        self.layer[u] > self.layer[v]
    }

    pub fn validate_loa(&self) -> LoaReport {
        let backward_edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .copied()
            .filter(|&(u, v)| self.is_backward(u, v))
            .collect();
        let beta = if self.edges.is_empty() {
            0.0
        } else {
            backward_edges.len() as f64 / self.edges.len() as f64
        };
        let cycles = self.cyclic_components();
        LoaReport {
            is_dag: cycles.is_empty(),
            beta,
            backward_edges,
            cycles,
        }
    }

    pub fn beta(&self) -> f64 {
        self.validate_loa().beta
    }

    /// Strongly connected components with more than one node (Kosaraju).
    fn cyclic_components(&self) -> Vec<Vec<usize>> {
        let n = self.num_nodes();
        let mut order = Vec::with_capacity(n);
        let mut visited = vec![false; n];
        for s in 0..n {
            if visited[s] {
                continue;
            }
            // iterative post-order DFS
            let mut stack = vec![(s, 0usize)];
            visited[s] = true;
            while let Some((u, i)) = stack.pop() {
                if i < self.children[u].len() {
                    stack.push((u, i + 1));
                    let w = self.children[u][i].0;
                    if !visited[w] {
                        visited[w] = true;
                        stack.push((w, 0));
                    }
                } else {
                    order.push(u);
                }
            }
        }
        let mut comp = vec![usize::MAX; n];
        let mut out = Vec::new();
        for &s in order.iter().rev() {
            if comp[s] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![];
            let mut stack = vec![s];
            comp[s] = id;
            while let Some(u) = stack.pop() {
                members.push(u);
                for &(p, _) in &self.parents[u] {
                    if comp[p] == usize::MAX {
                        comp[p] = id;
                        stack.push(p);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out.retain(|c| c.len() > 1);
        out.sort();
        out
    }

    /// Adds uniformly drawn backward edges until β reaches the smallest
    /// achievable value at or above `target_beta`. Existing edges are kept.
    pub fn inject_backward_edges<R: Rng + ?Sized>(
        &self,
        target_beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&target_beta) {
            return Err(Error::InvalidParameter(format!(
                "target beta must lie in [0, 1), got {target_beta}"
            )));
        }
        let m = self.num_edges();
        let b = self.validate_loa().backward_edges.len();
        let mut candidates = Vec::new();
        let n = self.num_nodes();
        for u in 0..n {
            for v in 0..n {
                if self.layer[u] > self.layer[v] && !self.edge_index.contains_key(&(u, v)) {
                    candidates.push((u, v));
                }
            }
        }
        let reaches = |k: usize| (b + k) as f64 >= target_beta * (m + k) as f64 - 1e-12;
        let mut k = 0usize;
        while !reaches(k) {
            k += 1;
            if k > candidates.len() {
                let c = candidates.len();
                let max_achievable = if m + c == 0 {
                    0.0
                } else {
                    (b + c) as f64 / (m + c) as f64
                };
                return Err(Error::BetaUnachievable {
                    target: target_beta,
                    max_achievable,
                });
            }
        }
        if k == 0 {
            return Ok(self.clone());
        }
        let mut edges = self.edges.clone();
        for i in index::sample(rng, candidates.len(), k).into_iter() {
            edges.push(candidates[i]);
        }
        Self::with_layer_count(self.layer.clone(), edges, self.num_layers)
    }

    /// Smallest layer holding a set bit, or `None` for an all-clear bitmap.
    pub fn earliest_violated_layer(&self, bitmap: &Bitmap) -> Result<Option<u32>> {
        if bitmap.len() != self.num_nodes() {
            return Err(Error::LengthMismatch {
                expected: self.num_nodes(),
                got: bitmap.len(),
            });
        }
        Ok(self.earliest_layer_unchecked(bitmap))
    }

    #[inline]
    pub(crate) fn earliest_layer_unchecked(&self, bitmap: &Bitmap) -> Option<u32> {
        (1..=self.num_layers).find(|&l| bitmap.intersects(self.layer_mask(l)))
    }

    /// Generates `layers x width` nodes; node `(l - 1) * width + i` sits in
    /// layer `l`. Every pair `u < v` is forward-eligible (intra-layer pairs
    /// are oriented by index) and gets an edge with probability
    /// `edge_density`. Nodes above layer 1 left without parents receive one
    /// from the previous layer.
    pub fn generate_layered<R: Rng + ?Sized>(
        layers: u32,
        width: usize,
        edge_density: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 || width == 0 {
            return Err(Error::InvalidParameter(
                "layer count and width must be at least 1".into(),
            ));
        }
        if !(edge_density > 0.0 && edge_density <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "edge density must lie in (0, 1], got {edge_density}"
            )));
        }
        let n = layers as usize * width;
        if n > MAX_NODES {
            return Err(Error::TooLarge {
                nodes: n,
                limit: MAX_NODES,
            });
        }
        let layer_of: Vec<u32> = (0..n).map(|v| (v / width) as u32 + 1).collect();
        let mut edges = Vec::new();
        let mut has_parent = vec![false; n];
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random::<f64>() < edge_density {
                    edges.push((u, v));
                    has_parent[v] = true;
                }
            }
        }
        for v in width..n {
            if !has_parent[v] {
                let l = layer_of[v] as usize;
                let p = (l - 2) * width + rng.random_range(0..width);
                edges.push((p, v));
            }
        }
        Self::with_layer_count(layer_of, edges, layers)
    }

    pub fn export_dot(&self) -> String {
        let mut s = String::from("digraph cdg {\n  rankdir=LR;\n");
        for v in 0..self.num_nodes() {
            let _ = writeln!(
                s,
                "  n{v} [label=\"{v} (L{})\", layer={}];",
                self.layer[v], self.layer[v]
            );
        }
        for &(u, v) in &self.edges {
            if self.is_backward(u, v) {
                let _ = writeln!(s, "  n{u} -> n{v} [style=dashed, color=red];");
            } else {
                let _ = writeln!(s, "  n{u} -> n{v};");
            }
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain() -> ConstraintGraph {
        ConstraintGraph::new(vec![1, 2, 3], vec![(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn forward_chain_is_loa() {
        let r = chain().validate_loa();
        assert!(r.is_dag);
        assert_eq!(r.beta, 0.0);
        assert!(r.backward_edges.is_empty());
    }

    #[test]
    fn one_backward_edge_of_three() {
        let g = ConstraintGraph::new(vec![1, 2, 3], vec![(0, 1), (1, 2), (2, 0)]).unwrap();
        let r = g.validate_loa();
        assert!((r.beta - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.backward_edges, vec![(2, 0)]);
        assert!(!r.is_dag);
        assert_eq!(r.cycles, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn structural_errors_name_the_element() {
        assert_eq!(
            ConstraintGraph::new(vec![1, 0], vec![]).unwrap_err(),
            Error::MissingLayer { node: 1 }
        );
        assert_eq!(
            ConstraintGraph::new(vec![1, 2], vec![(0, 1), (0, 1)]).unwrap_err(),
            Error::DuplicateEdge(0, 1)
        );
        assert_eq!(
            ConstraintGraph::new(vec![1, 2], vec![(1, 1)]).unwrap_err(),
            Error::SelfEdge(1)
        );
        assert!(ConstraintGraph::from_assignment(3, &[(0, 1), (2, 2)], vec![]).is_err());
        assert!(ConstraintGraph::with_loa(vec![1, 2], vec![(1, 0)]).is_err());
    }

    #[test]
    fn earliest_layer_queries() {
        let g = ConstraintGraph::new(vec![1, 2, 3, 4, 5], vec![]).unwrap();
        assert_eq!(g.earliest_violated_layer(&Bitmap::zeros(5)).unwrap(), None);
        let b = Bitmap::from_indices(5, &[2, 4]);
        assert_eq!(g.earliest_violated_layer(&b).unwrap(), Some(3));
        assert_eq!(
            g.earliest_violated_layer(&Bitmap::from_indices(5, &[0])).unwrap(),
            Some(1)
        );
        assert!(matches!(
            g.earliest_violated_layer(&Bitmap::zeros(4)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn forward_13() -> ConstraintGraph {
        // 13 forward edges over three layers of width 3.
        let layers = vec![1, 1, 1, 2, 2, 2, 3, 3, 3];
        let edges = vec![
            (0, 3),
            (0, 4),
            (1, 4),
            (1, 5),
            (2, 5),
            (3, 4),
            (3, 6),
            (4, 7),
            (5, 8),
            (3, 7),
            (4, 8),
            (6, 7),
            (0, 8),
        ];
        ConstraintGraph::with_loa(layers, edges).unwrap()
    }

    #[test]
    fn injection_hits_smallest_achievable_beta() {
        // k / (13 + k) >= 0.10 first holds at k = 2
        let k = (0..).find(|&k: &usize| k as f64 / (13 + k) as f64 >= 0.10).unwrap();
        assert_eq!(k, 2);
        let g = forward_13();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = g.inject_backward_edges(0.10, &mut rng).unwrap();
        let r = h.validate_loa();
        assert_eq!(r.backward_edges.len(), 2);
        assert!((r.beta - 2.0 / 15.0).abs() < 1e-15);
        assert!(r.beta - 0.10 < 1.0 / 15.0);
    }

    #[test]
    fn injection_zero_target_and_determinism() {
        let g = forward_13();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(g.inject_backward_edges(0.0, &mut rng).unwrap().edges(), g.edges());
        let a = g
            .inject_backward_edges(0.2, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let b = g
            .inject_backward_edges(0.2, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(a.edges(), b.edges());
    }

    #[test]
    fn injection_reports_max_beta() {
        let g = ConstraintGraph::new(vec![1, 2], vec![(0, 1)]).unwrap();
        let err = g
            .inject_backward_edges(0.9, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert_eq!(
            err,
            Error::BetaUnachievable {
                target: 0.9,
                max_achievable: 0.5
            }
        );
    }

    #[test]
    fn generated_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ConstraintGraph::generate_layered(5, 22, 0.02, &mut rng).unwrap();
        assert_eq!(g.num_nodes(), 110);
        assert_eq!(g.width(), 22);
        let single = ConstraintGraph::generate_layered(1, 3, 1.0, &mut rng).unwrap();
        assert_eq!(single.num_nodes(), 3);
        assert_eq!(single.edges(), &[(0, 1), (0, 2), (1, 2)]);
        assert!(single.validate_loa().holds());
    }

    #[test]
    fn dot_export() {
        let g = ConstraintGraph::new(vec![1, 2], vec![(0, 1)]).unwrap();
        let dot = g.export_dot();
        assert!(dot.contains("n0 [") && dot.contains("n1 ["));
        assert_eq!(dot.matches("->").count(), 1);
        let empty = ConstraintGraph::new(vec![1, 1, 2], vec![]).unwrap().export_dot();
        assert_eq!(empty.matches("[label=").count(), 3);
        assert!(!empty.contains("->"));
        let back = ConstraintGraph::new(vec![1, 2], vec![(1, 0)]).unwrap();
        assert!(back.export_dot().contains("dashed"));
    }

    proptest! {
        #[test]
        fn generated_graphs_satisfy_loa(seed in 0u64..500, l in 1u32..6, w in 1usize..8, d in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ConstraintGraph::generate_layered(l, w, d, &mut rng).unwrap();
            let r = g.validate_loa();
            prop_assert!(r.is_dag);
            prop_assert_eq!(r.beta, 0.0);
            for v in w..g.num_nodes() {
                prop_assert!(!g.parents(v).is_empty());
            }
        }

        #[test]
        fn injection_is_monotone(seed in 0u64..200, target in 0.0f64..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ConstraintGraph::generate_layered(3, 3, 0.4, &mut rng).unwrap();
            if let Ok(h) = g.inject_backward_edges(target, &mut rng) {
                prop_assert!(h.beta() >= g.beta());
                prop_assert!(h.beta() + 1e-12 >= target);
                for e in g.edges() {
                    prop_assert!(h.edge_id(e.0, e.1).is_some());
                }
                let forward: Vec<_> = h.edges().iter().filter(|&&(u, v)| !h.is_backward(u, v)).copied().collect();
                prop_assert_eq!(forward, g.edges().to_vec());
            }
        }

        #[test]
        fn earliest_layer_is_lower_bound(bits in proptest::collection::vec(any::<bool>(), 12)) {
            let layers: Vec<u32> = (0..12).map(|v| v as u32 / 3 + 1).collect();
            let g = ConstraintGraph::new(layers, vec![]).unwrap();
            let b = Bitmap::from_bools(&bits);
            let e = g.earliest_violated_layer(&b).unwrap();
            for v in b.iter_ones() {
                prop_assert!(e.unwrap() <= g.layer(v));
            }
            prop_assert_eq!(e.is_none(), b.none());
        }
    }
}
