//! Scenario text format: JSON with sorted keys and 9-significant-digit
//! numbers, one agent state per line.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use super::{AgentKind, AgentLog, AgentState, Scenario, ScenarioError, SCHEMA_VERSION};
use crate::geometry::Point;

fn num(v: f64) -> String {
    let q = super::quantize(v);
    format!("{q}")
}

fn points_json(out: &mut String, pts: &[Point], indent: &str) {
    out.push('[');
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "\n{indent}  [{}, {}]", num(p[0]), num(p[1]));
    }
    let _ = write!(out, "\n{indent}]");
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// Canonical text of a scenario.
pub fn to_json(s: &Scenario) -> String {
    let mut out = String::from("{\n  \"agents\": [");
    for (i, a) in s.agents.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(
            out,
            "\n    {{\n      \"kind\": {},\n      \"length\": {},\n      \"states\": [",
            json_string(a.kind.as_str()),
            num(a.length)
        );
        for (k, st) in a.states.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(
                out,
                "\n        [{}, {}, {}, {}, {}]",
                num(st.x),
                num(st.y),
                num(st.yaw),
                num(st.vx),
                num(st.vy)
            );
        }
        let _ = write!(out, "\n      ],\n      \"width\": {}\n    }}", num(a.width));
    }
    let _ = write!(
        out,
        "\n  ],\n  \"ego_index\": {},\n  \"frequency_hz\": {},\n  \"horizon_steps\": {},\n  \"id\": {},\n  \"map_polylines\": [",
        s.ego_index,
        num(s.frequency_hz),
        s.horizon_steps,
        json_string(&s.id)
    );
    for (i, pl) in s.map_polylines.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("\n    {\n      \"kind\": \"road_edge\",\n      \"points\": ");
        points_json(&mut out, pl, "      ");
        out.push_str("\n    }");
    }
    out.push_str("\n  ],\n  \"routing\": ");
    points_json(&mut out, &s.routing, "  ");
    let _ = write!(out, ",\n  \"version\": {SCHEMA_VERSION}\n}}\n");
    out
}

fn perr(field: &str, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line: None,
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn field<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Value, ScenarioError> {
    let name = if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    };
    obj.get(key).ok_or_else(|| perr(&name, "missing"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64, ScenarioError> {
    v.as_f64().ok_or_else(|| perr(path, "expected a number"))
}

fn as_usize(v: &Value, path: &str) -> Result<usize, ScenarioError> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| perr(path, "expected a non-negative integer"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, ScenarioError> {
    v.as_array().ok_or_else(|| perr(path, "expected a list"))
}

fn parse_points(v: &Value, path: &str) -> Result<Vec<Point>, ScenarioError> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let ip = format!("{path}[{i}]");
            let a = as_array(p, &ip)?;
            if a.len() != 2 {
                return Err(perr(&ip, "expected [x, y]"));
            }
            Ok([as_f64(&a[0], &ip)?, as_f64(&a[1], &ip)?])
        })
        .collect()
}

fn check_keys(obj: &Value, allowed: &[&str], path: &str) -> Result<(), ScenarioError> {
    if let Some(map) = obj.as_object() {
        for k in map.keys() {
            if !allowed.contains(&k.as_str()) {
                let name = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                return Err(perr(&name, "unknown key"));
            }
        }
        Ok(())
    } else {
        Err(perr(
            if path.is_empty() { "<root>" } else { path },
            "expected an object",
        ))
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let root: Value = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: Some(e.line()),
        field: "<syntax>".into(),
        msg: e.to_string(),
    })?;
    check_keys(
        &root,
        &[
            "agents",
            "ego_index",
            "frequency_hz",
            "horizon_steps",
            "id",
            "map_polylines",
            "routing",
            "version",
        ],
        "",
    )?;
    let version = field(&root, "version", "")?
        .as_i64()
        .ok_or_else(|| perr("version", "expected an integer"))?;
    if version != SCHEMA_VERSION {
        return Err(ScenarioError::VersionMismatch(version));
    }
    let id = field(&root, "id", "")?
        .as_str()
        .ok_or_else(|| perr("id", "expected a string"))?
        .to_string();
    let frequency_hz = as_f64(field(&root, "frequency_hz", "")?, "frequency_hz")?;
    let horizon_steps = as_usize(field(&root, "horizon_steps", "")?, "horizon_steps")?;
    let ego_index = as_usize(field(&root, "ego_index", "")?, "ego_index")?;
    let routing = parse_points(field(&root, "routing", "")?, "routing")?;
    let mut map_polylines = Vec::new();
    for (i, pl) in as_array(field(&root, "map_polylines", "")?, "map_polylines")?
        .iter()
        .enumerate()
    {
        let path = format!("map_polylines[{i}]");
        check_keys(pl, &["kind", "points"], &path)?;
        let kind = field(pl, "kind", &path)?.as_str();
        if kind != Some("road_edge") {
            return Err(perr(&format!("{path}.kind"), "expected \"road_edge\""));
        }
        map_polylines.push(parse_points(field(pl, "points", &path)?, &format!("{path}.points"))?);
    }
    let mut agents = Vec::new();
    for (i, a) in as_array(field(&root, "agents", "")?, "agents")?.iter().enumerate() {
        let path = format!("agents[{i}]");
        check_keys(a, &["kind", "length", "states", "width"], &path)?;
        let kind_s = field(a, "kind", &path)?
            .as_str()
            .ok_or_else(|| perr(&format!("{path}.kind"), "expected a string"))?;
        let kind = AgentKind::parse(kind_s)
            .ok_or_else(|| perr(&format!("{path}.kind"), format!("unknown kind `{kind_s}`")))?;
        let width = as_f64(field(a, "width", &path)?, &format!("{path}.width"))?;
        let length = as_f64(field(a, "length", &path)?, &format!("{path}.length"))?;
        let mut states = Vec::new();
        for (k, st) in as_array(field(a, "states", &path)?, &format!("{path}.states"))?
            .iter()
            .enumerate()
        {
            let sp = format!("{path}.states[{k}]");
            let v = as_array(st, &sp)?;
            if v.len() != 5 {
                return Err(perr(&sp, "expected [x, y, yaw, vx, vy]"));
            }
            let f = |j: usize| as_f64(&v[j], &sp);
            states.push(AgentState::new(f(0)?, f(1)?, f(2)?, f(3)?, f(4)?));
        }
        agents.push(AgentLog {
            kind,
            width,
            length,
            states,
        });
    }
    let s = Scenario {
        id,
        frequency_hz,
        horizon_steps,
        ego_index,
        map_polylines,
        routing,
        agents,
    };
    s.validate()?;
    Ok(s)
}

pub fn save_scenario(s: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    std::fs::write(path, to_json(s))?;
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    parse_scenario(&std::fs::read_to_string(path)?)
}
