//! Gamma-family special functions.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Trigamma ψ₁(x) for x > 0: upward recurrence to x ≥ 10, then the asymptotic series.
pub fn trigamma(x: f64) -> f64 {
    assert!(x > 0.0, "trigamma defined here for x > 0");
    let mut acc = 0.0;
    let mut y = x;
    while y < 10.0 {
        acc += 1.0 / (y * y);
        y += 1.0;
    }
    let r = 1.0 / y;
    let r2 = r * r;
    // 1/y + 1/(2y²) + Σ B₂ₖ / y^(2k+1)
    let series = r
        + 0.5 * r2
        + r * r2
            * (1.0 / 6.0
                + r2 * (-1.0 / 30.0
                    + r2 * (1.0 / 42.0 + r2 * (-1.0 / 30.0 + r2 * (5.0 / 66.0)))));
    acc + series
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigamma_known_values() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0) - pi2_6).abs() < 1e-12);
        assert!((trigamma(0.5) - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-12);
        assert!((trigamma(2.0) - (pi2_6 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        for &x in &[0.3, 1.7, 4.2, 9.5, 37.0, 400.0] {
            let h = 1e-5 * x;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd - trigamma(x)).abs() / trigamma(x) < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn digamma_reference() {
        // ψ(1) = −Euler–Mascheroni
        assert!((digamma(1.0) + 0.577_215_664_901_532_9).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
    }
}
