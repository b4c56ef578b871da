//! Rectangle-token observations in the ego frame.

use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::dynamics::AgentState;
use crate::geometry::{dist, polyline_to_rects, rdp_simplify, world_to_ego_point, wrap_angle, IdRect, Point};
use crate::scenario::Scenario;

pub const TOKEN_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Segment {
    Routing = 0,
    RoadEdge = 1,
    NonEgo = 2,
    Ego = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub n_rt: usize,
    pub n_rd: usize,
    pub n_nego: usize,
    pub fov_w: f64,
    pub fov_h: f64,
    pub road_edge_width: f64,
    pub include_ego_token: bool,
    pub rdp_eps_road: f64,
    pub rdp_eps_routing: f64,
    /// Road-edge rectangles longer than this are split evenly, so that long
    /// straight edges still have centres inside the field of view.
    pub max_edge_rect: Option<f64>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            n_rt: 32,
            n_rd: 64,
            n_nego: 32,
            fov_w: 80.0,
            fov_h: 20.0,
            road_edge_width: 0.5,
            include_ego_token: true,
            rdp_eps_road: 0.5,
            rdp_eps_routing: 0.1,
            max_edge_rect: Some(10.0),
        }
    }
}

impl TokenizerConfig {
    pub fn rows(&self) -> usize {
        self.n_rt + self.n_rd + self.n_nego + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_rt == 0 || self.n_rd == 0 || self.n_nego == 0 {
            return Err("token counts must be at least 1".into());
        }
        if !(self.fov_w > 0.0 && self.fov_h > 0.0 && self.road_edge_width > 0.0) {
            return Err("fov and road edge width must be positive".into());
        }
        if self.rdp_eps_road < 0.0 || self.rdp_eps_routing < 0.0 {
            return Err("rdp epsilons must be non-negative".into());
        }
        Ok(())
    }
}

/// World-frame rectangles that do not change during an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticCache {
    pub routing: Vec<IdRect>,
    pub road: Vec<IdRect>,
    pub ego_width: f64,
    pub ego_length: f64,
}

fn dedup(points: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(points.len());
    for p in points {
        if out.last().is_none_or(|q| dist(*q, *p) > 1e-9) {
            out.push(*p);
        }
    }
    out
}

fn split_long(points: &[Point], max_len: f64) -> Vec<Point> {
    let mut out = vec![points[0]];
    for w in points.windows(2) {
        let n = (dist(w[0], w[1]) / max_len).ceil().max(1.0) as usize;
        for k in 1..=n {
            let t = k as f64 / n as f64;
            out.push([w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])]);
        }
    }
    out
}

pub fn preprocess_static(s: &Scenario, cfg: &TokenizerConfig) -> StaticCache {
    let ego = s.ego();
    let route = rdp_simplify(&dedup(&s.routing), cfg.rdp_eps_routing);
    let routing = if route.len() >= 2 {
        polyline_to_rects(&route, ego.width, 0)
    } else {
        Vec::new()
    };
    let mut road = Vec::new();
    for edge in &s.map_polylines {
        let pts = dedup(edge);
        if pts.len() < 2 {
            continue;
        }
        let mut simple = rdp_simplify(&pts, cfg.rdp_eps_road);
        if let Some(m) = cfg.max_edge_rect {
            simple = split_long(&simple, m);
        }
        let rects = polyline_to_rects(&simple, cfg.road_edge_width, road.len());
        road.extend(rects);
    }
    StaticCache {
        routing,
        road,
        ego_width: ego.width,
        ego_length: ego.length,
    }
}

/// One other agent as seen by the tokenizer.
#[derive(Debug, Clone, Copy)]
pub struct AgentView {
    pub state: AgentState,
    pub width: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Row-major `rows × 7`.
    pub tokens: Vec<f64>,
    pub mask: Vec<bool>,
    /// Tokens dropped by the per-class capacity limits.
    pub truncated: usize,
}

impl Observation {
    pub fn rows(&self) -> usize {
        self.mask.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.tokens[r * TOKEN_DIM..(r + 1) * TOKEN_DIM]
    }

    pub fn valid_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows()).filter(|&r| self.mask[r]).map(|r| self.row(r))
    }
}

struct Candidate {
    dist: f64,
    id: usize,
    row: [f64; TOKEN_DIM],
}

fn place(out: &mut Observation, start: usize, cap: usize, mut cands: Vec<Candidate>) {
    cands.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(a.id.cmp(&b.id)));
    if cands.len() > cap {
        out.truncated += cands.len() - cap;
        cands.truncate(cap);
    }
    for (k, c) in cands.iter().enumerate() {
        let r = start + k;
        // adding +0 folds −0 into +0 so equal scenes give equal bits
        for (dst, v) in out.tokens[r * TOKEN_DIM..(r + 1) * TOKEN_DIM].iter_mut().zip(c.row) {
            *dst = v + 0.0;
        }
        out.mask[r] = true;
    }
}

fn rect_candidate(r: &IdRect, ego: &AgentState, seg: Segment) -> Candidate {
    let pose = ego.pose();
    let [x, y] = world_to_ego_point([r.rect.cx, r.rect.cy], &pose);
    Candidate {
        dist: x.hypot(y),
        id: r.id,
        row: [
            x,
            y,
            r.rect.w,
            r.rect.h,
            wrap_angle(r.rect.yaw - pose.yaw),
            r.id as f64,
            seg as u8 as f64,
        ],
    }
}

/// Token stack `[routing | road edges | other agents | ego]` with fixed
/// per-class capacities. Padding rows are zero and masked out.
pub fn tokenize(ego: &AgentState, others: &[AgentView], cache: &StaticCache, cfg: &TokenizerConfig) -> Observation {
    let rows = cfg.rows();
    let mut out = Observation {
        tokens: vec![0.0; rows * TOKEN_DIM],
        mask: vec![false; rows],
        truncated: 0,
    };
    let (hw, hh) = (cfg.fov_w / 2.0, cfg.fov_h / 2.0);
    let in_fov = |c: &Candidate| c.row[0].abs() <= hw && c.row[1].abs() <= hh;

    let routing = cache
        .routing
        .iter()
        .map(|r| rect_candidate(r, ego, Segment::Routing))
        .collect();
    place(&mut out, 0, cfg.n_rt, routing);

    let road = cache
        .road
        .iter()
        .map(|r| rect_candidate(r, ego, Segment::RoadEdge))
        .filter(in_fov)
        .collect();
    place(&mut out, cfg.n_rt, cfg.n_rd, road);

    let pose = ego.pose();
    let agents = others
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let [x, y] = world_to_ego_point([a.state.x, a.state.y], &pose);
            Candidate {
                dist: x.hypot(y),
                id: i,
                row: [
                    x,
                    y,
                    a.width,
                    a.length,
                    wrap_angle(a.state.yaw - pose.yaw),
                    a.state.speed(),
                    Segment::NonEgo as u8 as f64,
                ],
            }
        })
        .filter(in_fov)
        .collect();
    place(&mut out, cfg.n_rt + cfg.n_rd, cfg.n_nego, agents);

    if cfg.include_ego_token {
        let r = rows - 1;
        out.tokens[r * TOKEN_DIM..].copy_from_slice(&[
            0.0,
            0.0,
            cache.ego_width,
            cache.ego_length,
            0.0,
            ego.speed(),
            Segment::Ego as u8 as f64,
        ]);
        out.mask[r] = true;
    }
    out
}

/// Views of every non-ego agent at log step `t`.
pub fn logged_views(s: &Scenario, t: usize) -> Vec<AgentView> {
    s.agents
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != s.ego_index)
        .map(|(_, a)| AgentView {
            state: a.states[t],
            width: a.width,
            length: a.length,
        })
        .collect()
}

/// One training sample: observation plus the expert action that followed.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsRecord {
    pub scenario_id: String,
    pub step: u32,
    pub tokens: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: Vec<f64>,
}

const DUMP_MAGIC: &str = "CHAUFFEUR-OBS v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub rows: usize,
    pub action_dim: usize,
}

pub fn write_dump_header<W: Write>(w: &mut W, h: DumpHeader) -> io::Result<()> {
    write!(
        w,
        "{DUMP_MAGIC}\nrows {}\ntoken_dim {TOKEN_DIM}\naction_dim {}\nend\n",
        h.rows, h.action_dim
    )
}

pub fn append_record<W: Write>(w: &mut W, r: &ObsRecord) -> io::Result<()> {
    let id = r.scenario_id.as_bytes();
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id)?;
    w.write_all(&r.step.to_le_bytes())?;
    for v in &r.tokens {
        w.write_all(&v.to_le_bytes())?;
    }
    let mask: Vec<u8> = r.mask.iter().map(|&m| m as u8).collect();
    w.write_all(&mask)?;
    for v in &r.action {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_dump<R: BufRead>(mut r: R) -> io::Result<(DumpHeader, Vec<ObsRecord>)> {
    let mut line = String::new();
    let mut next = |r: &mut R| -> io::Result<String> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim_end().to_string())
    };
    if next(&mut r)? != DUMP_MAGIC {
        return Err(bad("not an observation dump"));
    }
    let mut field = |r: &mut R, key: &str| -> io::Result<usize> {
        let l = next(r)?;
        l.strip_prefix(key)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("expected `{key}` line, got `{l}`")))
    };
    let rows = field(&mut r, "rows")?;
    if field(&mut r, "token_dim")? != TOKEN_DIM {
        return Err(bad("token_dim mismatch"));
    }
    let action_dim = field(&mut r, "action_dim")?;
    if next(&mut r)? != "end" {
        return Err(bad("missing header terminator"));
    }
    let mut records = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
        let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut id)?;
        let mut step = [0u8; 4];
        r.read_exact(&mut step)?;
        let tokens = read_f64s(&mut r, rows * TOKEN_DIM)?;
        let mut mask = vec![0u8; rows];
        r.read_exact(&mut mask)?;
        let action = read_f64s(&mut r, action_dim)?;
        records.push(ObsRecord {
            scenario_id: String::from_utf8(id).map_err(|_| bad("scenario id is not utf-8"))?,
            step: u32::from_le_bytes(step),
            tokens,
            mask: mask.into_iter().map(|m| m != 0).collect(),
            action,
        });
    }
    Ok((DumpHeader { rows, action_dim }, records))
}
