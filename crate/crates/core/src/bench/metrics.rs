//! Episode-level repair metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scm::{Episode, Outcome};

/// Repair success rate, mean steps over successes, cascade failure rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub rsr: f64,
    /// `None` when no episode succeeded.
    pub ars: Option<f64>,
    pub cfr: f64,
    /// Failures that ran out of steps, as a fraction of all episodes.
    pub horizon_failure_rate: f64,
    pub episodes: usize,
}

pub fn compute_metrics(episodes: &[Episode]) -> Result<Metrics> {
    if episodes.is_empty() {
        return Err(Error::InvalidParameter("no episodes to score".into()));
    }
    let n = episodes.len();
    let (mut ok, mut steps, mut cascade, mut horizon) = (0usize, 0usize, 0usize, 0usize);
    for e in episodes {
        match e.outcome {
            Outcome::Success => {
                ok += 1;
                steps += e.steps();
            }
            Outcome::CascadeFailure => cascade += 1,
            Outcome::HorizonExhausted => horizon += 1,
        }
    }
    Ok(Metrics {
        rsr: ok as f64 / n as f64,
        ars: (ok > 0).then(|| steps as f64 / ok as f64),
        cfr: cascade as f64 / n as f64,
        horizon_failure_rate: horizon as f64 / n as f64,
        episodes: n,
    })
}

/// One (method, environment, seed, grid point) result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub n_train: usize,
    pub beta: f64,
    pub rsr: f64,
    pub ars: Option<f64>,
    pub cfr: f64,
    pub episodes: usize,
    /// Free-form labels, `;`-separated.
    pub tags: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitmap::Bitmap;
    use crate::scm::{ContextSpec, Transition};

    fn episode(outcome: Outcome, steps: usize) -> Episode {
        let b = Bitmap::ones(1);
        Episode {
            id: 0,
            context: ContextSpec::single().cell_context(0),
            initial: b,
            transitions: (0..steps)
                .map(|i| Transition {
                    step: i,
                    state: b,
                    action: 0,
                    next: b,
                    reward: -1.0,
                    propensity: None,
                })
                .collect(),
            outcome,
        }
    }

    #[test]
    fn arithmetic_examples() {
        let mut eps: Vec<Episode> = (0..8).map(|_| episode(Outcome::Success, 3)).collect();
        eps.push(episode(Outcome::CascadeFailure, 4));
        eps.push(episode(Outcome::HorizonExhausted, 9));
        let m = compute_metrics(&eps).unwrap();
        assert_eq!((m.rsr, m.ars, m.cfr), (0.8, Some(3.0), 0.1));
        assert_eq!(m.rsr + m.cfr + m.horizon_failure_rate, 1.0);
        let fail = compute_metrics(&[episode(Outcome::HorizonExhausted, 2)]).unwrap();
        assert_eq!((fail.rsr, fail.ars), (0.0, None));
        let one = compute_metrics(&vec![episode(Outcome::Success, 1); 4]).unwrap();
        assert_eq!((one.rsr, one.ars, one.cfr), (1.0, Some(1.0), 0.0));
        assert!(compute_metrics(&[]).is_err());
    }
}
