//! Discretized simulation context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layout of the context space: each dimension has a raw range and a bin
/// count; cells are the cartesian product of bins (row-major, dimension 0
/// most significant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextSpec {
    /// Bin count per dimension.
    pub bins: Vec<usize>,
    /// Raw value range per dimension; raw values are sampled uniformly.
    pub ranges: Vec<(f64, f64)>,
}

impl Default for ContextSpec {
    fn default() -> Self {
        ContextSpec {
            bins: vec![3, 3],
            ranges: vec![(0.5, 1.5), (0.5, 1.5)],
        }
    }
}

/// A concrete context: raw values plus their bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub raw: Vec<f64>,
    pub bins: Vec<usize>,
    /// Flat cell index.
    pub cell: usize,
}

impl ContextSpec {
    /// Context space with a single cell and no dimensions.
    pub fn single() -> Self {
        ContextSpec {
            bins: vec![],
            ranges: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins.len() != self.ranges.len() {
            return Err(Error::InvalidParameter(format!(
                "context has {} bin counts but {} ranges",
                self.bins.len(),
                self.ranges.len()
            )));
        }
        for (d, (&k, &(lo, hi))) in self.bins.iter().zip(&self.ranges).enumerate() {
            if k == 0 {
                return Err(Error::InvalidParameter(format!("context dim {d} has zero bins")));
            }
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidParameter(format!(
                    "context dim {d} has invalid range ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    pub fn num_dims(&self) -> usize {
        self.bins.len()
    }

    pub fn num_cells(&self) -> usize {
        self.bins.iter().product()
    }

    pub fn cell_of(&self, bins: &[usize]) -> usize {
        bins.iter()
            .zip(&self.bins)
            .fold(0, |acc, (&b, &k)| acc * k + b)
    }

    pub fn bins_of(&self, mut cell: usize) -> Vec<usize> {
        let mut out = vec![0; self.bins.len()];
        for d in (0..self.bins.len()).rev() {
            out[d] = cell % self.bins[d];
            cell /= self.bins[d];
        }
        out
    }

    pub fn bin_of(&self, d: usize, x: f64) -> usize {
        let (lo, hi) = self.ranges[d];
        let k = self.bins[d];
        let f = ((x - lo) / (hi - lo) * k as f64).floor();
        (f.max(0.0) as usize).min(k - 1)
    }

    pub fn bin_center(&self, d: usize, bin: usize) -> f64 {
        let (lo, hi) = self.ranges[d];
        lo + (bin as f64 + 0.5) * (hi - lo) / self.bins[d] as f64
    }

    /// Bin center rescaled to `[-1, 1]`; zero for single-bin dimensions.
    pub fn standardized(&self, d: usize, bin: usize) -> f64 {
        let k = self.bins[d];
        if k == 1 {
            0.0
        } else {
            2.0 * (bin as f64 + 0.5) / k as f64 - 1.0
        }
    }

    pub fn standardized_cell(&self, cell: usize) -> Vec<f64> {
        self.bins_of(cell)
            .iter()
            .enumerate()
            .map(|(d, &b)| self.standardized(d, b))
            .collect()
    }

    pub fn from_raw(&self, raw: &[f64]) -> Result<Context> {
        if raw.len() != self.num_dims() {
            return Err(Error::LengthMismatch {
                expected: self.num_dims(),
                got: raw.len(),
            });
        }
        let bins: Vec<usize> = raw.iter().enumerate().map(|(d, &x)| self.bin_of(d, x)).collect();
        Ok(Context {
            raw: raw.to_vec(),
            cell: self.cell_of(&bins),
            bins,
        })
    }

    /// Representative context of a cell (raw values at bin centers).
    pub fn cell_context(&self, cell: usize) -> Context {
        let bins = self.bins_of(cell);
        let raw = bins
            .iter()
            .enumerate()
            .map(|(d, &b)| self.bin_center(d, b))
            .collect();
        Context { raw, bins, cell }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Context {
        let raw: Vec<f64> = self
            .ranges
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        let bins: Vec<usize> = raw.iter().enumerate().map(|(d, &x)| self.bin_of(d, x)).collect();
        Context {
            cell: self.cell_of(&bins),
            raw,
            bins,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_roundtrip() {
        let s = ContextSpec::default();
        assert_eq!(s.num_cells(), 9);
        for c in 0..9 {
            assert_eq!(s.cell_of(&s.bins_of(c)), c);
            let ctx = s.cell_context(c);
            assert_eq!(s.from_raw(&ctx.raw).unwrap().cell, c);
        }
        assert_eq!(s.bins_of(5), vec![1, 2]);
        assert_eq!(s.standardized(0, 1), 0.0);
        assert_eq!(s.bin_of(0, 1.5), 2);
        assert_eq!(s.bin_of(0, 0.5), 0);
        assert_eq!(ContextSpec::single().num_cells(), 1);
    }
}
