//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares `analytic` against `(f(x+h) − f(x−h)) / 2h` on every coordinate.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(point)?;
    point.ensure_same_shape(&analytic)?;
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(|x| f(x).map(|(v, _)| v), &analytic, point, step, tolerance, &coords)
}

/// Like [`grad_check`] but only over `coords`, with the analytic gradient
/// supplied up front. Used for models whose full parameter vector is too
/// large to sweep.
pub fn grad_check_coords<F>(
    f: F,
    analytic: &Tensor,
    point: &Tensor,
    step: f64,
    tolerance: f64,
    coords: &[usize],
) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Evaluation(format!("step must be positive, got {step}")));
    }
    let mut probe = point.clone();
    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: 0,
        passed: true,
    };
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value near coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let exact = analytic.data()[i];
        let abs = (numeric - exact).abs();
        let rel = abs / exact.abs().max(numeric.abs()).max(1e-8);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_err <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let r = grad_check(
            |x| Ok((x.data().iter().map(|v| v * v).sum(), x.scale(2.0))),
            &x,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn abs_away_from_kink() {
        let x = Tensor::from_vec(&[4], vec![0.5, -0.3, 1.2, -0.11]).unwrap();
        let r = grad_check(
            |x| Ok((x.data().iter().map(|v| v.abs()).sum(), x.map(f64::signum))),
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed);
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(|x| Ok((x.sum(), x.scale(0.0))), &x, 1e-5, 1e-5).unwrap();
        assert!(!r.passed);
        assert!((r.max_abs_err - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let r = grad_check(|x| Ok((1.0 / x.data()[0].abs().min(0.0), x.clone())), &x, 1e-5, 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
