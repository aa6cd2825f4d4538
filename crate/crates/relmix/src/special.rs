//! Digamma and log-gamma, the two special functions every variational
//! message update leans on.
//!
//! Both use the same scheme: shift the argument above a threshold with the
//! recurrence, then evaluate an asymptotic series. Accurate to better than
//! 1e-12 over the positive reals, which is what the message updates need.

/// Bernoulli-number coefficients of the asymptotic digamma series,
/// B_{2n} / 2n for n = 1..
const DIGAMMA_COEF: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// Digamma function Ψ(x) for x > 0.
///
/// Recurrence Ψ(x) = Ψ(x+1) − 1/x lifts the argument to ≥ 10, then the
/// asymptotic expansion Ψ(x) ≈ ln x − 1/2x − Σ B_{2n}/(2n x^{2n}) applies.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma requires x > 0, got {x}");
    let mut value = 0.0;
    let mut x = x;
    while x < 10.0 {
        value -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv2;
    for c in DIGAMMA_COEF {
        series += c * power;
        power *= inv2;
    }
    value + x.ln() - 0.5 * inv - series
}

/// Stirling-series coefficients B_{2n} / (2n (2n−1)) for ln Γ.
const LNGAMMA_COEF: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
];

const HALF_LN_TWO_PI: f64 = 0.9189385332046727;

/// Natural log of the gamma function for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma requires x > 0, got {x}");
    let mut shift = 0.0;
    let mut x = x;
    while x < 10.0 {
        shift -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv;
    for c in LNGAMMA_COEF {
        series += c * power;
        power *= inv2;
    }
    shift + (x - 0.5) * x.ln() - x + HALF_LN_TWO_PI + series
}
