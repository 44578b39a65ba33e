//! Paired t-tests and Pearson correlation.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
    /// Mean of `a - b`.
    pub delta: f64,
    /// Standard error of the mean difference.
    pub se_delta: f64,
    /// Set when the differences have zero variance: `t` is infinite (or NaN
    /// for an all-zero difference) and `p` is reported as 0 (or 1).
    pub degenerate: bool,
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn student_t_p_two_sided(t: f64, df: f64) -> Result<f64> {
    let d = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::InvalidParameter(format!("Student t with df {df}: {e}")))?;
    Ok((2.0 * d.cdf(-t.abs())).min(1.0))
}

/// t-test from a mean difference and its standard error with `n` pairs.
pub fn t_from_summary(delta: f64, se_delta: f64, n: usize) -> Result<TTest> {
    if n < 2 {
        return Err(Error::InvalidParameter("paired t-test needs at least two pairs".into()));
    }
    let df = (n - 1) as f64;
    if se_delta == 0.0 {
        let zero = delta == 0.0;
        return Ok(TTest {
            t: if zero { f64::NAN } else { delta.signum() * f64::INFINITY },
            df,
            p_two_sided: if zero { 1.0 } else { 0.0 },
            delta,
            se_delta,
            degenerate: true,
        });
    }
    let t = delta / se_delta;
    Ok(TTest {
        t,
        df,
        p_two_sided: student_t_p_two_sided(t, df)?,
        delta,
        se_delta,
        degenerate: false,
    })
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidParameter("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    t_from_summary(mean, (var / n as f64).sqrt(), n)
}

/// Sample correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::InvalidParameter("Pearson correlation needs at least three points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}
