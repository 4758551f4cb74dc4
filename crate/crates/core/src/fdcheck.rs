//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls forward evaluations supplied by the
//! caller, so it stays independent of the reverse-mode path it is used to
//! check.

/// Central-difference gradient of `f` at `x` with step `h` per coordinate.
pub fn central_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error `|a - n| / max(1, |a|, |n|)`, reduced over all
/// coordinates by max.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2, grad = 2x
        let x = [0.5, -1.25, 2.0];
        let num = central_diff_grad(|p| p.iter().map(|v| v * v).sum(), &x, 1e-5);
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(max_rel_err(&analytic, &num) < 1e-9);
    }

    #[test]
    fn rel_err_uses_unit_floor() {
        assert!(max_rel_err(&[0.0], &[1e-9]) < 1e-8);
        assert!(max_rel_err(&[100.0], &[101.0]) < 0.011);
    }
}
