//! Scenario data model, text file format and procedural generator.

mod generate;
mod io;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::dynamics::AgentState;
use crate::geometry::{dist, OrientedRect, Point};
pub use generate::{generate_scenario, GeneratorTuning};
pub use io::{load_scenario, parse_scenario, save_scenario, to_json};

pub const SCHEMA_VERSION: i64 = 1;
pub const MAX_AGENTS: usize = 128;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error{}: field `{field}`: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse {
        line: Option<usize>,
        field: String,
        msg: String,
    },
    #[error("unsupported scenario schema version {0}")]
    VersionMismatch(i64),
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("could not generate a valid scenario in {attempts} attempts ({last})")]
    GenerationFailed { attempts: usize, last: String },
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Vehicle => "vehicle",
            AgentKind::Pedestrian => "pedestrian",
            AgentKind::Cyclist => "cyclist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vehicle" => Some(AgentKind::Vehicle),
            "pedestrian" => Some(AgentKind::Pedestrian),
            "cyclist" => Some(AgentKind::Cyclist),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentLog {
    pub kind: AgentKind,
    pub width: f64,
    pub length: f64,
    pub states: Vec<AgentState>,
}

impl AgentLog {
    /// Footprint at log step `t`.
    pub fn rect_at(&self, t: usize) -> OrientedRect {
        rect_for(&self.states[t], self.width, self.length)
    }

    pub fn max_speed(&self) -> f64 {
        self.states.iter().map(AgentState::speed).fold(0.0, f64::max)
    }
}

/// Footprint of an agent: the long side runs along its heading.
pub fn rect_for(s: &AgentState, width: f64, length: f64) -> OrientedRect {
    OrientedRect::new(s.x, s.y, length, width, s.yaw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Straight,
    Curve,
    Intersection,
    Parking,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Straight, Family::Curve, Family::Intersection, Family::Parking];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Straight => "straight",
            Family::Curve => "curve",
            Family::Intersection => "intersection",
            Family::Parking => "parking",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown family `{s}` (expected straight, curve, intersection or parking)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFamilySpec {
    pub family: Family,
    /// Number of non-ego agents.
    pub traffic_density: usize,
    /// Road curvature in 1/m; only the curve family reads it.
    pub curvature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub frequency_hz: f64,
    pub horizon_steps: usize,
    pub ego_index: usize,
    /// Road edges.
    pub map_polylines: Vec<Vec<Point>>,
    /// The ego's logged path.
    pub routing: Vec<Point>,
    pub agents: Vec<AgentLog>,
}

impl Scenario {
    pub fn ego(&self) -> &AgentLog {
        &self.agents[self.ego_index]
    }

    pub fn route_length(&self) -> f64 {
        self.routing.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Family tag encoded in generated ids (`<family>-...`), if any.
    pub fn family(&self) -> Option<Family> {
        self.id.split('-').next().and_then(|f| f.parse().ok())
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Validation(m));
        if self.horizon_steps == 0 {
            return bad("horizon_steps must be at least 1".into());
        }
        if !(self.frequency_hz > 0.0) {
            return bad(format!("frequency_hz must be positive, got {}", self.frequency_hz));
        }
        if self.agents.is_empty() || self.agents.len() > MAX_AGENTS {
            return bad(format!("agent count {} outside 1..={MAX_AGENTS}", self.agents.len()));
        }
        if self.ego_index >= self.agents.len() {
            return bad(format!("ego_index {} out of range", self.ego_index));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.width > 0.0 && a.length > 0.0) {
                return bad(format!("agent {i} has non-positive size"));
            }
            if a.states.len() != self.horizon_steps {
                return bad(format!(
                    "agent {i} has {} states, expected {}",
                    a.states.len(),
                    self.horizon_steps
                ));
            }
            for s in &a.states {
                if ![s.x, s.y, s.yaw, s.vx, s.vy].iter().all(|v| v.is_finite()) {
                    return bad(format!("agent {i} has a non-finite state"));
                }
                if !(s.yaw > -std::f64::consts::PI && s.yaw <= std::f64::consts::PI) {
                    return bad(format!("agent {i} yaw {} outside (-pi, pi]", s.yaw));
                }
            }
        }
        for (k, pl) in self.map_polylines.iter().enumerate() {
            if pl.len() < 2 {
                return bad(format!("map polyline {k} has fewer than 2 points"));
            }
        }
        let ego = self.ego();
        if self.routing.len() != ego.states.len()
            || self
                .routing
                .iter()
                .zip(&ego.states)
                .any(|(p, s)| p[0] != s.x || p[1] != s.y)
        {
            return bad("routing must equal the ego's logged positions".into());
        }
        Ok(())
    }
}

/// Round to 9 significant digits, mapping −0 to 0.
pub fn quantize(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { 0.0 } else { v };
    }
    let q: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_keeps_nine_digits() {
        assert_eq!(quantize(1.234567891234), 1.23456789);
        assert_eq!(quantize(-0.0).to_bits(), 0.0f64.to_bits());
        assert_eq!(quantize(quantize(std::f64::consts::PI)), quantize(std::f64::consts::PI));
        assert!(quantize(std::f64::consts::PI) <= std::f64::consts::PI);
    }

    #[test]
    fn family_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
        }
        assert!("highway".parse::<Family>().is_err());
    }
}
