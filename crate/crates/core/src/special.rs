//! Regularized incomplete gamma functions.
//!
//! `P(a, x) = γ(a, x) / Γ(a)` and `Q(a, x) = 1 - P(a, x)`. The power series is
//! used below `x = a + 1` and a modified-Lentz continued fraction above it, so
//! that each branch converges quickly and neither has to form `1 - (≈1)`.

pub use statrs::function::gamma::ln_gamma;

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 100_000;
const TINY: f64 = 1e-300;

/// `ln(x^a e^{-x} / Γ(a))`, the common prefactor of both expansions.
fn ln_prefactor(a: f64, x: f64) -> f64 {
    a * x.ln() - x - ln_gamma(a)
}

fn series_p(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * ln_prefactor(a, x).exp()
}

fn continued_fraction_q(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h * ln_prefactor(a, x).exp()
}

/// Regularized lower incomplete gamma `P(a, x)`, for `a > 0`, `x >= 0`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else if x < a + 1.0 {
        series_p(a, x)
    } else {
        1.0 - continued_fraction_q(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`, for `a > 0`, `x >= 0`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else if x < a + 1.0 {
        1.0 - series_p(a, x)
    } else {
        continued_fraction_q(a, x)
    }
}
