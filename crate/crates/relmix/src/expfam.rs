//! Conjugate-exponential distribution arithmetic: variational moments,
//! expected log-likelihoods, and KL divergences.
//!
//! These are the quantities every message update and the ELBO are built
//! from. All functions are pure and operate in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma};

const LN_TWO_PI: f64 = 1.8378770664093453;

/// Dirichlet concentration vector. Length 1 is legal and denotes a
/// deterministic category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub concentration: Vec<f64>,
}

impl DirichletParams {
    pub fn symmetric(len: usize, alpha: f64) -> Self {
        DirichletParams { concentration: vec![alpha; len] }
    }

    pub fn len(&self) -> usize {
        self.concentration.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concentration.is_empty()
    }

    /// Posterior mean E[π].
    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.concentration.iter().sum();
        self.concentration.iter().map(|a| a / total).collect()
    }
}

/// Variational posterior over a Gaussian component mean.
/// Variance 0 denotes a point mass (used in tests only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeanParams {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianMeanParams {
    pub fn new(mean: f64, variance: f64) -> Self {
        GaussianMeanParams { mean, variance }
    }

    /// E[μ²] = m² + v.
    pub fn second_moment(&self) -> f64 {
        self.mean * self.mean + self.variance
    }
}

/// Variational posterior over a Gaussian component precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Self {
        GammaParams { shape, rate }
    }
}

/// Variational posterior over a Bernoulli success probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn new(a: f64, b: f64) -> Self {
        BetaParams { a, b }
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// A normalized discrete distribution (responsibilities, FK posteriors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDist {
    pub probabilities: Vec<f64>,
}

impl DiscreteDist {
    pub fn uniform(len: usize) -> Self {
        DiscreteDist { probabilities: vec![1.0 / len as f64; len] }
    }

    /// Builds a distribution from unnormalized log weights using the
    /// max-subtraction trick.
    pub fn from_log_weights(log_w: &[f64]) -> Self {
        DiscreteDist { probabilities: softmax(log_w) }
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probabilities)
    }

    /// (argmax index, max probability); ties break toward the lowest index.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = 0;
        let mut best_p = self.probabilities[0];
        for (i, &p) in self.probabilities.iter().enumerate().skip(1) {
            if p > best_p {
                best = i;
                best_p = p;
            }
        }
        (best, best_p)
    }
}

/// Softmax with max subtraction; returns probabilities summing to 1.
pub fn softmax(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = log_w.iter().map(|&w| (w - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Shannon entropy of a probability vector, with 0·ln 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>()
}

/// E[log π_k] = Ψ(α_k) − Ψ(Σα) for each k.
pub fn dirichlet_expected_log(d: &DirichletParams) -> Vec<f64> {
    let total: f64 = d.concentration.iter().sum();
    let dg_total = digamma(total);
    d.concentration.iter().map(|&a| digamma(a) - dg_total).collect()
}

/// (E[τ], E[log τ]) = (shape/rate, Ψ(shape) − ln rate).
pub fn gamma_moments(g: &GammaParams) -> (f64, f64) {
    (g.shape / g.rate, digamma(g.shape) - g.rate.ln())
}

/// Expected Gaussian log density under q(μ) q(τ):
/// ½(E[log τ] − ln 2π − E[τ](x² − 2x E[μ] + E[μ²])).
pub fn gaussian_expected_loglik(x: f64, mu: &GaussianMeanParams, tau: &GammaParams) -> f64 {
    let (e_tau, e_log_tau) = gamma_moments(tau);
    let quad = x * x - 2.0 * x * mu.mean + mu.second_moment();
    0.5 * (e_log_tau - LN_TWO_PI - e_tau * quad)
}

/// Expected Bernoulli log density: Ψ(a)−Ψ(a+b) if x, else Ψ(b)−Ψ(a+b).
pub fn beta_expected_loglik(x: bool, p: &BetaParams) -> f64 {
    let dg_total = digamma(p.a + p.b);
    if x {
        digamma(p.a) - dg_total
    } else {
        digamma(p.b) - dg_total
    }
}

/// Expected categorical log density: entry `x` of `dirichlet_expected_log`.
pub fn discrete_expected_loglik(x: usize, d: &DirichletParams) -> Result<f64> {
    if x >= d.len() {
        return Err(Error::Model(format!(
            "category index {x} out of range for {} levels",
            d.len()
        )));
    }
    let total: f64 = d.concentration.iter().sum();
    Ok(digamma(d.concentration[x]) - digamma(total))
}

/// KL(q ‖ prior) for Dirichlet pairs of matching length.
pub fn kl_dirichlet(prior: &DirichletParams, q: &DirichletParams) -> Result<f64> {
    if prior.len() != q.len() {
        return Err(Error::Model(format!(
            "Dirichlet dimension mismatch: prior {} vs posterior {}",
            prior.len(),
            q.len()
        )));
    }
    let a_sum: f64 = q.concentration.iter().sum();
    let b_sum: f64 = prior.concentration.iter().sum();
    let dg_a_sum = digamma(a_sum);
    let mut kl = ln_gamma(a_sum) - ln_gamma(b_sum);
    for (&a, &b) in q.concentration.iter().zip(&prior.concentration) {
        kl += ln_gamma(b) - ln_gamma(a) + (a - b) * (digamma(a) - dg_a_sum);
    }
    Ok(kl)
}

/// KL(q ‖ prior) for Gaussian mean posteriors.
pub fn kl_gaussian_mean(prior: &GaussianMeanParams, q: &GaussianMeanParams) -> f64 {
    let dm = q.mean - prior.mean;
    0.5 * (q.variance / prior.variance + dm * dm / prior.variance - 1.0
        + (prior.variance / q.variance).ln())
}

/// KL(q ‖ prior) for Gamma posteriors.
pub fn kl_gamma(prior: &GammaParams, q: &GammaParams) -> f64 {
    (q.shape - prior.shape) * digamma(q.shape) - ln_gamma(q.shape) + ln_gamma(prior.shape)
        + prior.shape * (q.rate.ln() - prior.rate.ln())
        + q.shape * (prior.rate - q.rate) / q.rate
}

/// KL(q ‖ prior) for Beta posteriors.
pub fn kl_beta(prior: &BetaParams, q: &BetaParams) -> f64 {
    let ln_beta = |a: f64, b: f64| ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    ln_beta(prior.a, prior.b) - ln_beta(q.a, q.b)
        + (q.a - prior.a) * digamma(q.a)
        + (q.b - prior.b) * digamma(q.b)
        + (prior.a - q.a + prior.b - q.b) * digamma(q.a + q.b)
}
