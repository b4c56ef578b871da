use serde::{Deserialize, Serialize};

/// Bounds of the bicycle action: acceleration (m/s²) and steering (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionRanges {
    pub acc: (f64, f64),
    pub steer: (f64, f64),
}

impl Default for ActionRanges {
    fn default() -> Self {
        Self {
            acc: (-6.0, 6.0),
            steer: (-0.3, 0.3),
        }
    }
}

fn lerp((lo, hi): (f64, f64), u: f64) -> f64 {
    lo + u * (hi - lo)
}

fn unlerp((lo, hi): (f64, f64), x: f64) -> f64 {
    (x - lo) / (hi - lo)
}

/// Unit-square sample to `[acc, steer]`.
pub fn map_action(u: [f64; 2], r: &ActionRanges) -> [f64; 2] {
    [lerp(r.acc, u[0]), lerp(r.steer, u[1])]
}

pub fn unmap_action(a: [f64; 2], r: &ActionRanges) -> [f64; 2] {
    [unlerp(r.acc, a[0]), unlerp(r.steer, a[1])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn midpoint_and_corners() {
        let r = ActionRanges::default();
        assert_eq!(map_action([0.5, 0.5], &r), [0.0, 0.0]);
        assert_eq!(map_action([1.0, 0.0], &r), [6.0, -0.3]);
    }

    proptest! {
        #[test]
        fn round_trip(u0 in 0.0f64..=1.0, u1 in 0.0f64..=1.0) {
            let r = ActionRanges::default();
            let back = unmap_action(map_action([u0, u1], &r), &r);
            prop_assert!((back[0] - u0).abs() < 1e-12);
            prop_assert!((back[1] - u1).abs() < 1e-12);
        }
    }
}
