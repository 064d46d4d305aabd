use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_parameter_errors: Vec<f64>,
}

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the objective value and its analytic gradient at a point. The
/// per-parameter error is `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn grad_check<F>(f: F, point: &[f64], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    if analytic.len() != point.len() {
        return Err(Error::ShapeMismatch { expected: vec![point.len()], actual: vec![analytic.len()] });
    }
    let mut x = point.to_vec();
    let mut errors = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = f(&x)?.0;
        x[i] = orig - epsilon;
        let minus = f(&x)?.0;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        let fd = (plus - minus) / (2.0 * epsilon);
        let ga = analytic[i];
        errors.push((ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8));
    }
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_parameter_errors: errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_cross_entropy_grad;
    use rand::{Rng, SeedableRng};

    #[test]
    fn quadratic_is_exact() {
        let f = |w: &[f64]| Ok((w.iter().map(|v| v * v).sum(), w.iter().map(|v| 2.0 * v).collect()));
        let r = grad_check(f, &[0.3, -1.2, 4.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.max_rel_error, r.per_parameter_errors.iter().copied().fold(0.0, f64::max));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = rng.random_range(0..5);
            let r = grad_check(|l| softmax_cross_entropy_grad(l, t), &logits, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |w: &[f64]| Ok((w[0] * w[0], vec![w[0]]));
        let r = grad_check(f, &[1.0], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_objective_errors() {
        let f = |w: &[f64]| Ok((1.0 / (w[0] - 1.0).abs().min(0.0), vec![0.0]));
        assert!(grad_check(f, &[1.0], 1e-5).is_err());
    }
}
