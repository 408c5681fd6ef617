//! Standard normal helpers with well-defined behaviour at the tails.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid standard normal")
}

pub fn pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    std_normal().pdf(x)
}

pub fn cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    std_normal().cdf(x)
}

/// `Phi^{-1}(p)`, returning `-inf`/`+inf` at 0 and 1.
pub fn quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    std_normal().inverse_cdf(p)
}

/// `phi(Phi^{-1}(p))`, which vanishes at both ends of `[0, 1]`.
pub fn pdf_at_quantile(p: f64) -> f64 {
    pdf(quantile(p))
}

/// Exact `int_a^b Phi^{-1}(r) dr`.
pub fn quantile_integral(a: f64, b: f64) -> f64 {
    pdf_at_quantile(a) - pdf_at_quantile(b)
}

/// Exact `int_a^b r Phi^{-1}(r) dr`.
///
/// With `x = Phi^{-1}(r)` the antiderivative is
/// `-Phi(x) phi(x) + Phi(sqrt(2) x) / (2 sqrt(pi))`.
pub fn weighted_quantile_integral(a: f64, b: f64) -> f64 {
    let anti = |r: f64| {
        let x = quantile(r);
        let first = if x.is_infinite() {
            0.0
        } else {
            -cdf(x) * pdf(x)
        };
        first + cdf(std::f64::consts::SQRT_2 * x) / (2.0 * std::f64::consts::PI.sqrt())
    };
    anti(b) - anti(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn midpoint(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        (0..n).map(|i| f(a + (i as f64 + 0.5) * h)).sum::<f64>() * h
    }

    #[test]
    fn closed_form_integrals_match_quadrature() {
        for &(a, b) in &[(0.1, 0.4), (0.3, 0.9), (0.5, 0.55)] {
            let q = midpoint(quantile, a, b, 200_000);
            assert!((quantile_integral(a, b) - q).abs() < 1e-9);
            let q = midpoint(|r| r * quantile(r), a, b, 200_000);
            assert!((weighted_quantile_integral(a, b) - q).abs() < 1e-9);
        }
        assert!(quantile_integral(0.0, 1.0).abs() < 1e-15);
        // int_0^1 r Phi^{-1}(r) dr = 1 / (2 sqrt(pi))
        let expect = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        assert!((weighted_quantile_integral(0.0, 1.0) - expect).abs() < 1e-12);
    }
}
