//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

mod suite;

pub use suite::{gradient_suite, SuiteEntry, COMPOSED_ENTRIES};

/// Above this many entries only a random subsample is perturbed.
pub const MAX_CHECKED_ENTRIES: usize = 10_000;

/// Gradient magnitudes below this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub total: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the gradient returned by `op` against central differences.
///
/// `op(x)` must return the scalar value and its gradient w.r.t. every entry of
/// `x`. Entries are checked exhaustively up to [`MAX_CHECKED_ENTRIES`], beyond
/// which a seeded random subsample of that size is used.
pub fn grad_check<F>(op: F, x: &[f64], epsilon: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    grad_check_limited(op, x, epsilon, seed, MAX_CHECKED_ENTRIES)
}

pub fn grad_check_limited<F>(
    op: F,
    x: &[f64],
    epsilon: f64,
    seed: u64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("grad_check input contains non-finite entries".into()));
    }
    let (_, analytic) = op(x)?;
    if analytic.len() != x.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite analytic gradient at entry {i}")));
    }

    let mut indices: Vec<usize> = (0..x.len()).collect();
    if indices.len() > max_entries {
        SplitMix64::new(seed).shuffle(&mut indices);
        indices.truncate(max_entries);
        indices.sort_unstable();
    }

    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: indices.len(),
        total: x.len(),
    };
    for &i in &indices {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let (plus, _) = op(&probe)?;
        probe[i] = orig - epsilon;
        let (minus, _) = op(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!("non-finite difference quotient at entry {i}")));
        }
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_gradient_is_exact() {
        // f(w) = sum_i c_i * (w . x_i): gradient is sum_i c_i x_i.
        let xs = [[1.0, -2.0, 0.5], [0.25, 4.0, -1.0]];
        let cs = [3.0, -0.5];
        let op = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut v = 0.0;
            let mut g = vec![0.0; 3];
            for (x, c) in xs.iter().zip(cs) {
                let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                v += c * dot;
                for j in 0..3 {
                    g[j] += c * x[j];
                }
            }
            Ok((v, g))
        };
        let (_, g) = op(&[0.1, 0.2, 0.3]).unwrap();
        let hand = [3.0 - 0.125, -6.0 - 2.0, 1.5 + 0.5];
        for (a, b) in g.iter().zip(hand) {
            assert!((a - b).abs() <= f64::EPSILON * 8.0);
        }
        let report = grad_check(op, &[0.1, 0.2, 0.3], 1e-5, 0).unwrap();
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let op = |x: &[f64]| Ok((x[0] * x[0], vec![x[0]]));
        let report = grad_check(op, &[1.5], 1e-5, 0).unwrap();
        assert!(report.max_rel_error > 0.4);
    }

    #[test]
    fn rejects_bad_epsilon_and_non_finite() {
        let op = |x: &[f64]| Ok((x[0], vec![1.0]));
        assert!(grad_check(op, &[1.0], 1e-2, 0).is_err());
        let nan = |_: &[f64]| Ok((0.0, vec![f64::NAN]));
        assert!(matches!(grad_check(nan, &[1.0], 1e-5, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn subsamples_large_inputs() {
        let op = |x: &[f64]| Ok((x.iter().map(|v| v * v).sum::<f64>(), x.iter().map(|v| 2.0 * v).collect()));
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let report = grad_check_limited(op, &x, 1e-5, 3, 10).unwrap();
        assert_eq!(report.checked, 10);
        assert_eq!(report.total, 50);
        assert!(report.max_rel_error < 1e-8);
    }
}
