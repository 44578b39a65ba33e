//! Small hand-built environments with known ground truth.

use crate::error::Result;
use crate::graph::ConstraintGraph;
use crate::scm::{
    CascadeRule, ContextSpec, EdgeParams, LoggingPolicy, Scm, ScmParams, TauSpec,
    ViolationState,
};

fn constant(p: f64) -> EdgeParams {
    EdgeParams {
        tau: TauSpec::Constant { p },
        onset_factor: 0.0,
    }
}

/// Node ids of the three-node confounded instances.
pub const P: usize = 0;
pub const U: usize = 1;
pub const V: usize = 2;

/// `p` in layer 1; `u` and `v` in layer 2 with edges `p -> u`, `p -> v`,
/// `u -> v`. Repairing `u` leaves `v` violated with probability `tau_uv`
/// when `p` is satisfied and `1 - (1 - tau_uv)(1 - tau_pv)` when it is
/// violated. `u` and `v` always start violated, `p` with probability `p_leak`.
pub fn confounded(tau_uv: f64, tau_pv: f64, p_leak: f64) -> Result<Scm> {
    let g = ConstraintGraph::new(vec![1, 2, 2], vec![(P, U), (P, V), (U, V)])?;
    let params = ScmParams {
        context: ContextSpec::single(),
        // sorted edge order: (0,1), (0,2), (1,2)
        edges: vec![constant(0.5), constant(tau_pv), constant(tau_uv)],
        base_fix: vec![1.0; 3],
        wrong_order_factor: 1.0,
        layer_gating: false,
        feedback_prob: 0.0,
        declared_regular: true,
        noise_sd: 0.5,
        leak: vec![p_leak, 1.0, 1.0],
        require_violation: false,
        cascade: CascadeRule::default(),
    };
    Scm::new(g, params)
}

/// Intra-layer confounding: `v` stays at 0.8 when `p` is violated, 0.2 otherwise.
pub fn intra_layer_confounded() -> Result<Scm> {
    confounded(0.2, 0.75, 0.5)
}

/// Variance-envelope instance: stay 0.6 with `p` violated (probability 0.3),
/// 0.2 otherwise.
pub fn variance_instance() -> Result<Scm> {
    confounded(0.2, 0.5, 0.3)
}

/// Logging that repairs `u` with probability `if_violated` when `p` is
/// violated and `if_satisfied` otherwise; the rest is uniform over the other
/// violated nodes.
#[derive(Debug, Clone, Copy)]
pub struct ConfoundedLogging {
    pub if_violated: f64,
    pub if_satisfied: f64,
}

impl LoggingPolicy for ConfoundedLogging {
    fn action_probs(&self, s: &ViolationState) -> Vec<(usize, f64)> {
        let b = &s.bitmap;
        if !b.get(U) {
            let k = b.count_ones() as f64;
            return b.iter_ones().map(|a| (a, 1.0 / k)).collect();
        }
        let pu = if b.get(P) { self.if_violated } else { self.if_satisfied };
        let others = b.count_ones() - 1;
        if others == 0 {
            return vec![(U, 1.0)];
        }
        b.iter_ones()
            .map(|a| (a, if a == U { pu } else { (1.0 - pu) / others as f64 }))
            .collect()
    }
}

/// Initial violation probability of every node in [`identification_instance`].
pub const IDENT_LEAK: f64 = 0.95;

/// Identification benchmark: three layers of width three, nine context
/// cells, no backward edges, no gating, every repair succeeds. Layer-2 and
/// layer-3 nodes have two parents each so adjustment sets are nonempty.
///
/// Each child has one strong parent (stay near 1) and one weak parent (stay
/// near 0). The strong co-parent makes the weak edge's observational
/// frequency depend on who else is violated, while keeping outcome variance
/// low enough for tight per-cell checks.
pub fn identification_instance() -> Result<Scm> {
    identification_instance_with(IDENT_LEAK)
}

/// [`identification_instance`] with a custom per-node leak.
pub fn identification_instance_with(leak: f64) -> Result<Scm> {
    let layers = vec![1, 1, 1, 2, 2, 2, 3, 3, 3];
    let edges = [
        (0, 3),
        (1, 3),
        (1, 4),
        (2, 4),
        (2, 5),
        (0, 5),
        (3, 6),
        (4, 6),
        (4, 7),
        (5, 7),
        (5, 8),
        (3, 8),
    ];
    let g = ConstraintGraph::with_loa(layers, edges.to_vec())?;
    let biases = [4.6, -4.4, 4.2, -4.8, 4.4, -4.6, -4.2, 4.8, -4.5, 4.3, -4.7, 4.5];
    let slopes = [
        [0.6, -0.4],
        [-0.5, 0.3],
        [0.4, 0.4],
        [-0.3, -0.6],
        [0.5, -0.2],
        [0.2, 0.5],
        [-0.6, 0.3],
        [0.3, -0.3],
        [0.5, 0.5],
        [-0.4, 0.2],
        [0.2, -0.5],
        [-0.3, 0.4],
    ];
    let mut params = Vec::with_capacity(edges.len());
    for e in g.edges() {
        let i = edges.iter().position(|x| x == e).expect("edge listed");
        params.push(EdgeParams {
            tau: TauSpec::Logistic {
                bias: biases[i],
                slopes: slopes[i].to_vec(),
            },
            onset_factor: 0.0,
        });
    }
    let scm = ScmParams {
        context: ContextSpec::default(),
        edges: params,
        base_fix: vec![1.0; 9],
        wrong_order_factor: 1.0,
        layer_gating: false,
        feedback_prob: 0.0,
        declared_regular: true,
        noise_sd: 0.5,
        leak: vec![leak; 9],
        require_violation: true,
        cascade: CascadeRule::default(),
    };
    Scm::new(g, scm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confounded_oracle_is_average_of_strata() {
        let m = intra_layer_confounded().unwrap();
        let o = m.marginal_edge_weight_init(U, V, 0).unwrap();
        assert!((o - 0.5).abs() < 1e-12);
        let w = variance_instance().unwrap();
        let o = w.marginal_edge_weight_init(U, V, 0).unwrap();
        assert!((o - (0.7 * 0.2 + 0.3 * 0.6)).abs() < 1e-12);
    }

    #[test]
    fn logging_normalizes() {
        let pol = ConfoundedLogging {
            if_violated: 0.8,
            if_satisfied: 0.2,
        };
        for bits in 1u64..8 {
            let s = ViolationState {
                bitmap: crate::bitmap::Bitmap::from_u64(3, bits),
                context: ContextSpec::single().cell_context(0),
                step: 0,
            };
            let t: f64 = pol.action_probs(&s).iter().map(|x| x.1).sum();
            assert!((t - 1.0).abs() < 1e-12);
        }
    }
}
