//! Intelligent driver model car-following law.

use serde::{Deserialize, Serialize};

/// Hard braking bound applied to the law's output.
pub const MAX_BRAKE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 10.0,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 1.5,
            comfortable_decel: 2.5,
            exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn with_speed(self, v0: f64) -> Self {
        Self {
            desired_speed: v0,
            ..self
        }
    }
}

/// Acceleration for speed `v` behind a leader at bumper gap `gap` moving at
/// `v_lead`. Pass `f64::INFINITY` as the gap for a free road.
pub fn idm_accel(v: f64, v_lead: f64, gap: f64, p: &IdmParams) -> f64 {
    let free = if p.desired_speed > 0.0 {
        1.0 - (v / p.desired_speed).powf(p.exponent)
    } else {
        // a zero desired speed means stay put
        if v > 0.0 {
            -f64::INFINITY
        } else {
            0.0
        }
    };
    let interaction = if gap.is_finite() {
        let s_star = p.min_gap
            + (v * p.time_headway + v * (v - v_lead) / (2.0 * (p.max_accel * p.comfortable_decel).sqrt())).max(0.0);
        let g = gap.max(1e-3);
        (s_star / g).powi(2)
    } else {
        0.0
    };
    (p.max_accel * (free - interaction)).clamp(-MAX_BRAKE, p.max_accel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_road() {
        let p = IdmParams::default().with_speed(15.0);
        assert_eq!(idm_accel(15.0, 0.0, f64::INFINITY, &p), 0.0);
        assert_eq!(idm_accel(0.0, 0.0, f64::INFINITY, &p), 1.5);
    }

    #[test]
    fn following_matches_direct_formula() {
        let p = IdmParams::default().with_speed(15.0);
        // s* = 2 + 10·1.5 = 17; a = 1.5 (1 − (10/15)^4 − (17/20)^2)
        let want = 1.5 * (1.0 - (10.0f64 / 15.0).powi(4) - (17.0f64 / 20.0).powi(2));
        assert!((idm_accel(10.0, 10.0, 20.0, &p) - want).abs() < 1e-12);
    }

    #[test]
    fn braking_is_bounded() {
        let p = IdmParams::default();
        assert_eq!(idm_accel(20.0, 0.0, 1.0, &p), -MAX_BRAKE);
        let still = IdmParams::default().with_speed(0.0);
        assert_eq!(idm_accel(0.0, 0.0, f64::INFINITY, &still), 0.0);
    }
}
