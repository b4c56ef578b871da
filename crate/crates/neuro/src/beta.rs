//! Beta distribution statistics for the stochastic policy head.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::NeuroError;
use crate::special::{digamma, ln_gamma};
use crate::tape::{Tape, Unary, Var};
use crate::tensor::Tensor;

/// Per-dimension Beta shape parameters. The head guarantees `α, β > 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Actions sampled on (0, 1) are pulled this far inside before evaluating
/// the density.
pub const ACTION_EPS: f64 = 1e-6;

pub fn clamp_unit(x: f64) -> f64 {
    x.clamp(ACTION_EPS, 1.0 - ACTION_EPS)
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn beta_mean(a: f64, b: f64) -> f64 {
    a / (a + b)
}

pub fn beta_log_prob(a: f64, b: f64, x: f64) -> Result<f64, NeuroError> {
    if !(x > 0.0 && x < 1.0) {
        return Err(NeuroError::DomainError(x));
    }
    Ok((a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta_fn(a, b))
}

pub fn beta_entropy(a: f64, b: f64) -> f64 {
    ln_beta_fn(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b)
}

impl BetaParams {
    pub fn dims(&self) -> usize {
        self.alpha.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(&a, &b)| beta_mean(a, b))
            .collect()
    }

    /// Joint log-density (sum over independent dimensions).
    pub fn log_prob(&self, x: &[f64]) -> Result<f64, NeuroError> {
        let mut total = 0.0;
        for ((&a, &b), &xi) in self.alpha.iter().zip(&self.beta).zip(x) {
            total += beta_log_prob(a, b, xi)?;
        }
        Ok(total)
    }

    pub fn entropy(&self) -> f64 {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(&a, &b)| beta_entropy(a, b))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(&a, &b)| {
                let d = Beta::new(a, b).expect("alpha and beta are positive");
                d.sample(rng)
            })
            .collect()
    }
}

/// Differentiable per-sample joint log-density.
///
/// `alpha`, `beta` are `B × d` nodes; `x` is a `B × d` constant already inside
/// (0, 1). Returns a `B × 1` node.
pub fn tape_log_prob(tape: &mut Tape, alpha: Var, beta: Var, x: &Tensor) -> Var {
    let ln_x = tape.input(x.map(f64::ln));
    let ln_1mx = tape.input(x.map(|v| (-v).ln_1p()));
    let am1 = tape.add_scalar(alpha, -1.0);
    let bm1 = tape.add_scalar(beta, -1.0);
    let t1 = tape.mul(am1, ln_x);
    let t2 = tape.mul(bm1, ln_1mx);
    let lb = tape_ln_beta(tape, alpha, beta);
    let s = tape.add(t1, t2);
    let per_dim = tape.sub(s, lb);
    row_sums(tape, per_dim)
}

/// Differentiable per-sample joint entropy, `B × 1`.
pub fn tape_entropy(tape: &mut Tape, alpha: Var, beta: Var) -> Var {
    let lb = tape_ln_beta(tape, alpha, beta);
    let am1 = tape.add_scalar(alpha, -1.0);
    let bm1 = tape.add_scalar(beta, -1.0);
    let ab = tape.add(alpha, beta);
    let abm2 = tape.add_scalar(ab, -2.0);
    let dg_a = tape.unary(alpha, Unary::Digamma);
    let dg_b = tape.unary(beta, Unary::Digamma);
    let dg_ab = tape.unary(ab, Unary::Digamma);
    let ta = tape.mul(am1, dg_a);
    let tb = tape.mul(bm1, dg_b);
    let tab = tape.mul(abm2, dg_ab);
    let e1 = tape.sub(lb, ta);
    let e2 = tape.sub(e1, tb);
    let per_dim = tape.add(e2, tab);
    row_sums(tape, per_dim)
}

fn tape_ln_beta(tape: &mut Tape, alpha: Var, beta: Var) -> Var {
    let la = tape.unary(alpha, Unary::LnGamma);
    let lb = tape.unary(beta, Unary::LnGamma);
    let ab = tape.add(alpha, beta);
    let lab = tape.unary(ab, Unary::LnGamma);
    let s = tape.add(la, lb);
    tape.sub(s, lab)
}

fn row_sums(tape: &mut Tape, m: Var) -> Var {
    let cols = tape.shape(m).1;
    let ones = tape.input(Tensor::filled(cols, 1, 1.0));
    tape.matmul(m, ones)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means() {
        assert_eq!(beta_mean(2.0, 2.0), 0.5);
        assert_eq!(beta_mean(3.0, 1.0), 0.75);
    }

    #[test]
    fn log_prob_rejects_boundary() {
        assert!(matches!(beta_log_prob(2.0, 2.0, 0.0), Err(NeuroError::DomainError(_))));
        assert!(matches!(beta_log_prob(2.0, 2.0, 1.0), Err(NeuroError::DomainError(_))));
        assert!(beta_log_prob(2.0, 2.0, 1.5).is_err());
    }

    #[test]
    fn log_prob_of_beta_2_2_at_half() {
        // density 6 x (1-x) = 1.5 at 0.5
        let lp = beta_log_prob(2.0, 2.0, 0.5).unwrap();
        assert!((lp - 1.5f64.ln()).abs() < 1e-13);
    }

    /// Midpoint-rule quadrature of −∫ p ln p on a 10⁶-point grid.
    #[test]
    fn entropy_matches_quadrature() {
        for &(a, b) in &[(2.0, 2.0), (1.3, 4.0), (7.5, 2.2)] {
            let n = 1_000_000;
            let h = 1.0 / n as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let x = (i as f64 + 0.5) * h;
                let lp = beta_log_prob(a, b, x).unwrap();
                acc -= lp.exp() * lp * h;
            }
            let e = beta_entropy(a, b);
            assert!((e - acc).abs() < 1e-6, "a={a} b={b}: {e} vs {acc}");
        }
    }

    #[test]
    fn tape_versions_agree_with_scalar_versions() {
        let alpha = Tensor::from_vec(2, 2, vec![1.5, 2.0, 3.0, 1.2]);
        let beta = Tensor::from_vec(2, 2, vec![2.5, 1.1, 1.7, 4.0]);
        let x = Tensor::from_vec(2, 2, vec![0.3, 0.9, 0.5, 0.05]);
        let mut tape = Tape::new();
        let av = tape.input(alpha.clone());
        let bv = tape.input(beta.clone());
        let lp = tape_log_prob(&mut tape, av, bv, &x);
        let ent = tape_entropy(&mut tape, av, bv);
        for r in 0..2 {
            let p = BetaParams {
                alpha: alpha.row(r).to_vec(),
                beta: beta.row(r).to_vec(),
            };
            let want_lp = p.log_prob(x.row(r)).unwrap();
            assert!((tape.value(lp).get(r, 0) - want_lp).abs() < 1e-12);
            assert!((tape.value(ent).get(r, 0) - p.entropy()).abs() < 1e-12);
        }
    }
}
