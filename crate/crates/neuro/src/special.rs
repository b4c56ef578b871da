//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! Small arguments are shifted up with the recurrence relations until the
//! asymptotic expansions are accurate to roughly machine precision.

const SHIFT_TO: f64 = 10.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma needs a positive argument, got {x}");
    let mut x = x;
    let mut shift = 0.0;
    while x < SHIFT_TO {
        shift += x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0 + inv2 * (-1.0 / 360.0 + inv2 * (1.0 / 1260.0 + inv2 * (-1.0 / 1680.0 + inv2 * (1.0 / 1188.0)))));
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series - shift
}

pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma needs a positive argument, got {x}");
    let mut x = x;
    let mut shift = 0.0;
    while x < SHIFT_TO {
        shift += 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series =
        inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    x.ln() - 0.5 * inv - series - shift
}

pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "trigamma needs a positive argument, got {x}");
    let mut x = x;
    let mut shift = 0.0;
    while x < SHIFT_TO {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv2
            * inv
            * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    series + shift
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma;

    #[test]
    fn ln_gamma_matches_statrs() {
        for i in 1..400 {
            let x = i as f64 * 0.05;
            let want = gamma::ln_gamma(x);
            assert!((ln_gamma(x) - want).abs() < 1e-12 * want.abs().max(1.0), "x={x}");
        }
        assert!((ln_gamma(1.0)).abs() < 1e-13, "{}", ln_gamma(1.0));
        assert!((ln_gamma(2.0)).abs() < 1e-13, "{}", ln_gamma(2.0));
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn digamma_matches_statrs() {
        for i in 1..400 {
            let x = i as f64 * 0.05;
            let want = gamma::digamma(x);
            assert!((digamma(x) - want).abs() < 1e-10 * want.abs().max(1.0), "x={x}");
        }
        // ψ(1) = −γ
        assert!(
            (digamma(1.0) + 0.577_215_664_901_532_9).abs() < 1e-13,
            "{}",
            digamma(1.0)
        );
    }

    #[test]
    fn trigamma_matches_finite_difference_of_digamma() {
        for i in 1..200 {
            let x = 0.1 + i as f64 * 0.07;
            let h = 1e-5;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((trigamma(x) - fd).abs() < 1e-6 * fd.abs().max(1.0), "x={x}");
        }
        // ψ'(1) = π²/6
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0) - pi2_6).abs() < 1e-13);
    }
}
