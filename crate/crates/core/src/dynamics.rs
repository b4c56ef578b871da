//! Agent state, action spaces and the two transition functions.

use serde::{Deserialize, Serialize};

use crate::geometry::{sin_cos, wrap_angle, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, yaw: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, yaw, vx, vy }
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.yaw)
    }
}

pub const ACC_LIMIT: f64 = 6.0;
pub const STEER_LIMIT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleAction {
    pub acc: f64,
    pub steer: f64,
}

impl BicycleAction {
    pub fn new(acc: f64, steer: f64) -> Self {
        Self { acc, steer }
    }

    pub fn clamped(self) -> Self {
        Self {
            acc: self.acc.clamp(-ACC_LIMIT, ACC_LIMIT),
            steer: self.steer.clamp(-STEER_LIMIT, STEER_LIMIT),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaypointAction {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl WaypointAction {
    pub fn new(dx: f64, dy: f64, dyaw: f64) -> Self {
        Self { dx, dy, dyaw }
    }
}

/// Which heading rotates the new speed into `(vx′, vy′)` in the bicycle update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityHeading {
    #[default]
    Updated,
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Bicycle,
    Delta,
}

pub fn step_bicycle(s: &AgentState, a: BicycleAction, f: f64) -> AgentState {
    step_bicycle_with(s, a, f, VelocityHeading::Updated)
}

pub fn step_bicycle_with(s: &AgentState, a: BicycleAction, f: f64, vh: VelocityHeading) -> AgentState {
    let a = a.clamped();
    let (sin, cos) = sin_cos(s.yaw);
    let v = s.speed();
    let x = s.x + s.vx / f + a.acc * cos / (2.0 * f * f);
    let y = s.y + s.vy / f + a.acc * sin / (2.0 * f * f);
    let yaw = wrap_angle(s.yaw + a.steer * (v / f + a.acc / (2.0 * f * f)));
    // no reversing
    let v_next = (v + a.acc / f).max(0.0);
    let (vs, vc) = match vh {
        VelocityHeading::Updated => sin_cos(yaw),
        VelocityHeading::Previous => (sin, cos),
    };
    AgentState::new(x, y, yaw, v_next * vc, v_next * vs)
}

/// Ego-frame displacement, rotated into the world frame before it is added.
pub fn step_delta(s: &AgentState, a: WaypointAction, f: f64) -> AgentState {
    let (sin, cos) = sin_cos(s.yaw);
    let x = s.x + cos * a.dx - sin * a.dy;
    let y = s.y + sin * a.dx + cos * a.dy;
    AgentState::new(x, y, wrap_angle(s.yaw + a.dyaw), (x - s.x) * f, (y - s.y) * f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferredBicycle {
    pub action: BicycleAction,
    /// Set when the travelled distance is too small to recover a steer.
    pub degenerate: bool,
}

pub fn infer_bicycle_action(s: &AgentState, next: &AgentState, f: f64) -> InferredBicycle {
    let v = s.speed();
    let acc = (next.speed() - v) * f;
    let denom = v / f + acc / (2.0 * f * f);
    if denom.abs() < 1e-6 {
        return InferredBicycle {
            action: BicycleAction::new(acc, 0.0),
            degenerate: true,
        };
    }
    InferredBicycle {
        action: BicycleAction::new(acc, wrap_angle(next.yaw - s.yaw) / denom),
        degenerate: false,
    }
}

pub fn infer_waypoint_action(s: &AgentState, next: &AgentState) -> WaypointAction {
    let (sin, cos) = sin_cos(s.yaw);
    let dx = next.x - s.x;
    let dy = next.y - s.y;
    WaypointAction::new(cos * dx + sin * dy, -sin * dx + cos * dy, wrap_angle(next.yaw - s.yaw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn bicycle_examples() {
        let s = AgentState::new(0.0, 0.0, 0.0, 5.0, 0.0);
        assert_eq!(
            step_bicycle(&s, BicycleAction::new(0.0, 0.0), 10.0),
            AgentState::new(0.5, 0.0, 0.0, 5.0, 0.0)
        );
        let n = step_bicycle(&s, BicycleAction::new(2.0, 0.0), 10.0);
        assert!(close(n.x, 0.51) && close(n.speed(), 5.2) && close(n.vx, 5.2) && n.vy == 0.0);
        let n = step_bicycle(&s, BicycleAction::new(0.0, 0.1), 10.0);
        assert!(close(n.yaw, 0.05) && close(n.x, 0.5));
        assert!(close(n.vx, 5.0 * 0.05f64.cos()) && close(n.vy, 5.0 * 0.05f64.sin()));
        let p = step_bicycle_with(&s, BicycleAction::new(0.0, 0.1), 10.0, VelocityHeading::Previous);
        assert_eq!((p.vx, p.vy), (5.0, 0.0));
    }

    #[test]
    fn speed_floor() {
        let s = AgentState::new(0.0, 0.0, 0.0, 0.2, 0.0);
        let n = step_bicycle(&s, BicycleAction::new(-6.0, 0.0), 10.0);
        assert_eq!(n.speed(), 0.0);
    }

    #[test]
    fn zero_action_fixed_point_only_at_rest() {
        let rest = AgentState::new(3.0, 1.0, 0.4, 0.0, 0.0);
        assert_eq!(step_bicycle(&rest, BicycleAction::new(0.0, 0.0), 10.0), rest);
        let moving = AgentState::new(3.0, 1.0, 0.0, 2.0, 0.0);
        assert!(step_bicycle(&moving, BicycleAction::new(0.0, 0.0), 10.0).x > moving.x);
    }

    #[test]
    fn delta_examples() {
        let s = AgentState::new(1.0, 2.0, 0.3, 4.0, 1.0);
        let n = step_delta(&s, WaypointAction::new(0.0, 0.0, 0.0), 10.0);
        assert_eq!((n.x, n.y, n.vx, n.vy), (1.0, 2.0, 0.0, 0.0));
        let o = AgentState::new(0.0, 0.0, 0.0, 0.0, 0.0);
        let n = step_delta(&o, WaypointAction::new(0.5, 0.0, 0.0), 10.0);
        assert_eq!((n.x, n.vx), (0.5, 5.0));
        let o = AgentState::new(0.0, 0.0, FRAC_PI_2, 0.0, 0.0);
        let n = step_delta(&o, WaypointAction::new(0.5, 0.0, 0.0), 10.0);
        assert_eq!((n.x, n.y, n.vy), (0.0, 0.5, 5.0));
    }

    #[test]
    fn inverse_examples() {
        let s = AgentState::new(0.0, 0.0, 0.0, 5.0, 0.0);
        let n = step_bicycle(&s, BicycleAction::new(2.0, 0.1), 10.0);
        let inv = infer_bicycle_action(&s, &n, 10.0);
        assert!(close(inv.action.acc, 2.0) && close(inv.action.steer, 0.1) && !inv.degenerate);
        let inv = infer_bicycle_action(&s, &s, 10.0);
        assert_eq!(inv.action, BicycleAction::new(0.0, 0.0));
        let n = AgentState::new(0.5, 0.0, 0.05, 5.0 * 0.05f64.cos(), 5.0 * 0.05f64.sin());
        assert!(close(infer_bicycle_action(&s, &n, 10.0).action.steer, 0.1));
        let rest = AgentState::new(0.0, 0.0, 0.0, 0.0, 0.0);
        let inv = infer_bicycle_action(&rest, &rest, 10.0);
        assert!(inv.degenerate && inv.action == BicycleAction::new(0.0, 0.0));

        assert_eq!(infer_waypoint_action(&s, &s), WaypointAction::new(0.0, 0.0, 0.0));
        let o = AgentState::new(0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(
            infer_waypoint_action(&o, &AgentState::new(1.0, 0.0, 0.1, 0.0, 0.0)),
            WaypointAction::new(1.0, 0.0, 0.1)
        );
        let o = AgentState::new(0.0, 0.0, FRAC_PI_2, 0.0, 0.0);
        assert_eq!(
            infer_waypoint_action(&o, &AgentState::new(0.0, 1.0, FRAC_PI_2, 0.0, 0.0)),
            WaypointAction::new(1.0, 0.0, 0.0)
        );
    }

    proptest! {
        #[test]
        fn bicycle_round_trip(
            x in -50.0f64..50.0, y in -50.0f64..50.0, yaw in -3.1f64..3.1, v in 0.5f64..20.0,
            acc in -4.0f64..6.0, steer in -0.3f64..0.3,
        ) {
            let (s_, c_) = yaw.sin_cos();
            let s = AgentState::new(x, y, yaw, v * c_, v * s_);
            prop_assume!(v + acc / 10.0 >= 0.0);
            let n = step_bicycle(&s, BicycleAction::new(acc, steer), 10.0);
            let inv = infer_bicycle_action(&s, &n, 10.0);
            prop_assert!((inv.action.acc - acc).abs() < 1e-9);
            prop_assert!((inv.action.steer - steer).abs() < 1e-9);
            let r = step_bicycle(&s, inv.action, 10.0);
            prop_assert!((r.x - n.x).abs() < 1e-9 && (r.y - n.y).abs() < 1e-9);
        }

        #[test]
        fn delta_velocity_identity(dx in -3.0f64..3.0, dy in -3.0f64..3.0, yaw in -3.1f64..3.1) {
            let s = AgentState::new(1.5, -2.0, yaw, 0.0, 0.0);
            let n = step_delta(&s, WaypointAction::new(dx, dy, 0.1), 10.0);
            let lhs = n.vx * n.vx + n.vy * n.vy;
            let rhs = 100.0 * (dx * dx + dy * dy);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
        }

        #[test]
        fn waypoint_round_trip(dx in -3.0f64..3.0, dy in -3.0f64..3.0, dyaw in -1.0f64..1.0, yaw in -3.1f64..3.1) {
            let s = AgentState::new(1.5, -2.0, yaw, 0.0, 0.0);
            let a = WaypointAction::new(dx, dy, dyaw);
            let inv = infer_waypoint_action(&s, &step_delta(&s, a, 10.0));
            prop_assert!((inv.dx - dx).abs() < 1e-9 && (inv.dy - dy).abs() < 1e-9 && (inv.dyaw - dyaw).abs() < 1e-9);
        }
    }
}
