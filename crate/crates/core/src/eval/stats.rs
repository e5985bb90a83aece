use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value; `NaN` when the test is degenerate.
    pub p: f64,
    pub n: usize,
    /// The differences have zero variance, so the statistic is undefined
    /// unless the mean difference is also zero.
    pub degenerate: bool,
}

/// Paired Student's t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Data("a paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(TTest {
            t: if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY },
            p: f64::NAN,
            n,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(TTest {
        t,
        p,
        n,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_samples_are_degenerate() {
        let a = [0.1, 0.5, 0.9];
        let r = paired_t_test(&a, &a).unwrap();
        assert!(r.degenerate && r.t == 0.0 && r.p.is_nan());
    }

    #[test]
    fn symmetric_two_pair_case() {
        let r = paired_t_test(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert_abs_diff_eq!(r.p, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shifted_samples_are_significant() {
        let b: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let a: Vec<f64> = b.iter().enumerate().map(|(i, x)| x + 1.0 + 0.01 * ((i % 3) as f64 - 1.0)).collect();
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.p < 0.05 && r.t > 0.0);
    }

    #[test]
    fn matches_reference_t_table() {
        // t = 2.045 is the two-sided 5% critical value for 29 degrees of freedom
        let d: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let spread = (d.iter().map(|x| x * x).sum::<f64>() - 0.0) / 29.0;
        let shift = 2.045 * (spread / 30.0).sqrt();
        let a: Vec<f64> = d.iter().map(|x| x + shift).collect();
        let r = paired_t_test(&a, &vec![0.0; 30]).unwrap();
        assert_abs_diff_eq!(r.t, 2.045, epsilon = 1e-9);
        assert_abs_diff_eq!(r.p, 0.05, epsilon = 5e-4);
    }

    #[test]
    fn length_checks() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }
}
