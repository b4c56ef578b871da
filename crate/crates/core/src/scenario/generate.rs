//! Procedural scenarios with scripted drivers.
//!
//! The ego follows its lane with pure pursuit and an IDM speed controller
//! that also respects a lateral-acceleration cap ahead of bends; its log is
//! integrated with the bicycle transition so it is kinematically feasible.
//! Other agents run one-dimensional IDM along their lanes, or stand still.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    quantize, rect_for, AgentKind, AgentLog, AgentState, Family, Scenario, ScenarioError, ScenarioFamilySpec,
    MAX_AGENTS,
};
use crate::dynamics::{step_bicycle, BicycleAction, ACC_LIMIT, STEER_LIMIT};
use crate::geometry::{
    cumulative_lengths, dist, heading, obb_overlap, obb_polyline_overlap, polyline_nearest, sin_cos,
    world_to_ego_point, wrap_angle, Point,
};
use crate::idm::{idm_accel, IdmParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorTuning {
    pub horizon_steps: usize,
    pub frequency_hz: f64,
    /// Pure-pursuit lookahead distance.
    pub lookahead: f64,
    /// Lateral acceleration the expert allows in bends.
    pub lat_accel: f64,
    pub max_attempts: usize,
}

impl Default for GeneratorTuning {
    fn default() -> Self {
        Self {
            horizon_steps: 80,
            frequency_hz: 10.0,
            lookahead: 6.0,
            lat_accel: 3.0,
            max_attempts: 100,
        }
    }
}

const LANE_W: f64 = 3.5;
const MIN_EGO_SPEED: f64 = 0.5;
const COORD_LIMIT: f64 = 100.0;

/// Dense path with arclength lookups that extend linearly past both ends.
#[derive(Debug, Clone)]
struct Path {
    pts: Vec<Point>,
    cum: Vec<f64>,
    curv: Vec<f64>,
}

impl Path {
    fn new(pts: Vec<Point>) -> Self {
        let cum = cumulative_lengths(&pts);
        let n = pts.len();
        let mut curv = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = heading(pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1]);
            let h1 = heading(pts[i + 1][0] - pts[i][0], pts[i + 1][1] - pts[i][1]);
            let ds = 0.5 * (cum[i + 1] - cum[i - 1]);
            curv[i] = (wrap_angle(h1 - h0) / ds).abs();
        }
        Self { pts, cum, curv }
    }

    fn len(&self) -> f64 {
        *self.cum.last().expect("non-empty path")
    }

    fn segment(&self, s: f64) -> usize {
        match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.pts.len() - 2),
        }
    }

    fn at(&self, s: f64) -> (Point, f64) {
        let i = self.segment(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let t = (s - self.cum[i]) / len;
        (
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])],
            heading(b[0] - a[0], b[1] - a[1]),
        )
    }

    fn curvature(&self, s: f64) -> f64 {
        let i = self.segment(s);
        self.curv[i].max(self.curv[i + 1])
    }

    /// Arclength and signed lateral offset (left positive) of `q`.
    fn project(&self, q: Point) -> (f64, f64) {
        let n = polyline_nearest(q, &self.pts);
        let (p, h) = self.at(n.arclength);
        let (sn, cs) = sin_cos(h);
        let dx = q[0] - p[0];
        let dy = q[1] - p[1];
        // extend along the end tangents
        let along = cs * dx + sn * dy;
        let lat = -sn * dx + cs * dy;
        (n.arclength + along, lat)
    }

    fn offset(&self, d: f64) -> Path {
        let n = self.pts.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let a = self.pts[i.saturating_sub(1)];
            let b = self.pts[(i + 1).min(n - 1)];
            let h = heading(b[0] - a[0], b[1] - a[1]);
            let (s, c) = sin_cos(h);
            out.push([self.pts[i][0] - d * s, self.pts[i][1] + d * c]);
        }
        Path::new(out)
    }

    fn reversed(&self) -> Path {
        let mut p = self.pts.clone();
        p.reverse();
        Path::new(p)
    }
}

struct Builder {
    pts: Vec<Point>,
    heading: f64,
}

impl Builder {
    fn new(start: Point, heading: f64) -> Self {
        Self {
            pts: vec![start],
            heading,
        }
    }

    fn last(&self) -> Point {
        *self.pts.last().expect("builder has a start point")
    }

    fn straight(mut self, len: f64, ds: f64) -> Self {
        let p0 = self.last();
        let (s, c) = sin_cos(self.heading);
        let n = (len / ds).ceil().max(1.0) as usize;
        for k in 1..=n {
            let t = len * k as f64 / n as f64;
            self.pts.push([p0[0] + t * c, p0[1] + t * s]);
        }
        self
    }

    /// Circular arc; positive `angle` turns left.
    fn arc(mut self, radius: f64, angle: f64, ds: f64) -> Self {
        let p0 = self.last();
        let sign = angle.signum();
        let (s0, c0) = sin_cos(self.heading);
        let center = [p0[0] - sign * radius * s0, p0[1] + sign * radius * c0];
        let n = (angle.abs() * radius / ds).ceil().max(1.0) as usize;
        for k in 1..=n {
            let h = self.heading + angle * k as f64 / n as f64;
            let (s, c) = h.sin_cos();
            self.pts
                .push([center[0] + sign * radius * s, center[1] - sign * radius * c]);
        }
        self.heading = wrap_angle(self.heading + angle);
        self
    }

    fn build(self) -> Path {
        Path::new(self.pts)
    }
}

/// An agent driven by one-dimensional IDM along a lane.
struct Mover {
    lane: usize,
    s: f64,
    v: f64,
    idm: IdmParams,
    width: f64,
    length: f64,
    kind: AgentKind,
}

struct StaticAgent {
    state: AgentState,
    width: f64,
    length: f64,
    kind: AgentKind,
}

struct Layout {
    edges: Vec<Vec<Point>>,
    lanes: Vec<Path>,
    ego_path: Path,
    ego_s: f64,
    ego_v: f64,
    ego_limit: f64,
    ego_width: f64,
    ego_length: f64,
    movers: Vec<Mover>,
    statics: Vec<StaticAgent>,
}

fn vehicle_size(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.random_range(1.8..2.1), rng.random_range(4.2..5.0))
}

fn line(a: Point, b: Point, ds: f64) -> Path {
    let len = dist(a, b);
    Builder::new(a, heading(b[0] - a[0], b[1] - a[1]))
        .straight(len, ds)
        .build()
}

/// Pick a lane position clear of agents already on that lane.
fn free_slot(
    rng: &mut ChaCha8Rng,
    taken: &[(usize, f64, f64)],
    lane: usize,
    lo: f64,
    hi: f64,
    length: f64,
) -> Option<f64> {
    if hi <= lo {
        return None;
    }
    for _ in 0..30 {
        let s = rng.random_range(lo..hi);
        let clear = taken
            .iter()
            .filter(|(l, _, _)| *l == lane)
            .all(|(_, s2, l2)| (s - s2).abs() > 0.5 * (length + l2) + 4.0);
        if clear {
            return Some(s);
        }
    }
    None
}

fn straight_layout(rng: &mut ChaCha8Rng, density: usize, horizon_s: f64) -> Result<Layout, String> {
    let x_end = 92.0;
    let n_same = rng.random_range(1..=2usize);
    let n_opp = rng.random_range(0..=2usize);
    let y_right = -(n_same as f64) * LANE_W - 0.5;
    let y_left = n_opp as f64 * LANE_W + 0.5;
    let edges = vec![
        vec![[-x_end, y_right], [x_end, y_right]],
        vec![[-x_end, y_left], [x_end, y_left]],
    ];
    let mut lanes = Vec::new();
    for i in 0..n_same {
        let y = -(i as f64 + 0.5) * LANE_W;
        lanes.push(line([-x_end, y], [x_end, y], 4.0));
    }
    for j in 0..n_opp {
        let y = (j as f64 + 0.5) * LANE_W;
        lanes.push(line([x_end, y], [-x_end, y], 4.0));
    }
    let ego_lane = rng.random_range(0..n_same);
    let ego_s = rng.random_range(4.0..14.0);
    let ego_limit = rng.random_range(10.0..14.0);
    let (ego_width, ego_length) = vehicle_size(rng);
    let mut taken = vec![(ego_lane, ego_s, ego_length)];
    let mut movers = Vec::new();
    for _ in 0..density {
        let lane = rng.random_range(0..lanes.len());
        let cyclist = lane < n_same && rng.random_bool(0.15);
        let (kind, (width, length), v0) = if cyclist {
            (AgentKind::Cyclist, (0.8, 1.9), rng.random_range(3.0..6.0))
        } else {
            (
                AgentKind::Vehicle,
                vehicle_size(rng),
                rng.random_range(0.6..1.0) * ego_limit,
            )
        };
        let len = lanes[lane].len();
        let lo = if lane == ego_lane { ego_s + 14.0 } else { 3.0 };
        let hi = len - v0 * horizon_s - 6.0;
        let s = free_slot(rng, &taken, lane, lo, hi, length).ok_or("no room for a lane agent")?;
        taken.push((lane, s, length));
        movers.push(Mover {
            lane,
            s,
            v: v0 * rng.random_range(0.7..1.0),
            idm: IdmParams::default().with_speed(v0),
            width,
            length,
            kind,
        });
    }
    Ok(Layout {
        edges,
        ego_path: lanes[ego_lane].clone(),
        lanes,
        ego_s,
        ego_v: rng.random_range(1.0..4.0),
        ego_limit,
        ego_width,
        ego_length,
        movers,
        statics: Vec::new(),
    })
}

fn curve_layout(rng: &mut ChaCha8Rng, density: usize, curvature: f64, horizon_s: f64) -> Result<Layout, String> {
    let total = 170.0;
    let lead_in = 25.0;
    let mut b = Builder::new([0.0, 0.0], 0.0).straight(lead_in, 1.0);
    let mut used = lead_in;
    if curvature > 1e-4 {
        let radius = 1.0 / curvature;
        let angle = (120.0 * curvature).min(0.9 * PI);
        // non-negative curvature turns left
        b = b.arc(radius, angle, 1.0);
        used += angle * radius;
    }
    let center = b.straight(total - used, 1.0).build();
    // centre the road on the origin
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &center.pts {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let center = Path::new(center.pts.iter().map(|p| [p[0] - mid[0], p[1] - mid[1]]).collect());
    let half = LANE_W + 0.5;
    let edges = vec![center.offset(-half).pts, center.offset(half).pts];
    let lanes = vec![center.offset(-LANE_W / 2.0), center.offset(LANE_W / 2.0).reversed()];
    let ego_s = rng.random_range(3.0..10.0);
    let ego_limit = rng.random_range(9.0..12.0);
    let (ego_width, ego_length) = vehicle_size(rng);
    let mut taken = vec![(0usize, ego_s, ego_length)];
    let mut movers = Vec::new();
    for _ in 0..density {
        let lane = rng.random_range(0..2usize);
        let (width, length) = vehicle_size(rng);
        let v0 = rng.random_range(0.6..1.0) * ego_limit;
        let lo = if lane == 0 { ego_s + 14.0 } else { 3.0 };
        let hi = lanes[lane].len() - v0 * horizon_s - 6.0;
        let s = free_slot(rng, &taken, lane, lo, hi, length).ok_or("no room for a lane agent")?;
        taken.push((lane, s, length));
        movers.push(Mover {
            lane,
            s,
            v: v0 * rng.random_range(0.7..1.0),
            idm: IdmParams::default().with_speed(v0),
            width,
            length,
            kind: AgentKind::Vehicle,
        });
    }
    Ok(Layout {
        edges,
        ego_path: lanes[0].clone(),
        lanes,
        ego_s,
        ego_v: rng.random_range(1.0..4.0),
        ego_limit,
        ego_width,
        ego_length,
        movers,
        statics: Vec::new(),
    })
}

fn intersection_layout(rng: &mut ChaCha8Rng, density: usize) -> Result<Layout, String> {
    let hw = 5.0;
    let rc = 8.0;
    let arm = 60.0;
    let mut edges = Vec::new();
    for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
        let mut pts = vec![[sx * hw, sy * arm], [sx * hw, sy * (hw + rc)]];
        let c = [sx * (hw + rc), sy * (hw + rc)];
        let phi0 = heading(-sx, 0.0);
        let phi1 = heading(0.0, -sy);
        let dphi = wrap_angle(phi1 - phi0);
        let n = 12;
        for k in 1..n {
            let phi = phi0 + dphi * k as f64 / n as f64;
            pts.push([c[0] + rc * phi.cos(), c[1] + rc * phi.sin()]);
        }
        pts.push([sx * (hw + rc), sy * hw]);
        pts.push([sx * arm, sy * hw]);
        edges.push(pts);
    }
    let lane_x = LANE_W / 2.0;
    let approach = arm - (hw + rc);
    let start = Builder::new([lane_x, -arm], FRAC_PI_2);
    let ego_path = match rng.random_range(0..3u8) {
        0 => start.straight(2.0 * arm, 1.0).build(),
        1 => start
            .straight(approach, 1.0)
            .arc(hw + rc - lane_x, -FRAC_PI_2, 0.5)
            .straight(approach, 1.0)
            .build(),
        _ => start
            .straight(approach, 1.0)
            .arc(hw + rc + lane_x, FRAC_PI_2, 0.5)
            .straight(approach, 1.0)
            .build(),
    };
    let lanes = vec![ego_path.clone()];
    let ego_s = rng.random_range(5.0..15.0);
    let ego_limit = rng.random_range(7.0..10.0);
    let (ego_width, ego_length) = vehicle_size(rng);
    let leaders = rng.random_range(0..=density.min(2));
    let mut movers = Vec::new();
    let mut s_next = ego_s + 15.0;
    for _ in 0..leaders {
        let (width, length) = vehicle_size(rng);
        let s = s_next + rng.random_range(0.0..5.0) + length / 2.0;
        s_next = s + length / 2.0 + 12.0;
        let v0 = rng.random_range(0.7..1.0) * ego_limit;
        movers.push(Mover {
            lane: 0,
            s,
            v: v0 * rng.random_range(0.5..0.8),
            idm: IdmParams::default().with_speed(v0),
            width,
            length,
            kind: AgentKind::Vehicle,
        });
    }
    // queues waiting at the other three approaches
    let mut queue_len = [hw + 2.0; 3];
    let mut statics = Vec::new();
    for _ in leaders..density {
        let k = rng.random_range(0..3usize);
        let (width, length) = vehicle_size(rng);
        let d = queue_len[k] + length / 2.0;
        queue_len[k] += length + 2.5;
        if queue_len[k] > arm - 2.0 {
            return Err("approach queue overflows its arm".into());
        }
        let (x, y, yaw) = match k {
            0 => (-lane_x, d, -FRAC_PI_2),
            1 => (d, lane_x, PI),
            _ => (-d, -lane_x, 0.0),
        };
        statics.push(StaticAgent {
            state: AgentState::new(x, y, yaw, 0.0, 0.0),
            width,
            length,
            kind: AgentKind::Vehicle,
        });
    }
    Ok(Layout {
        edges,
        ego_path,
        lanes,
        ego_s,
        ego_v: rng.random_range(1.0..4.0),
        ego_limit,
        ego_width,
        ego_length,
        movers,
        statics,
    })
}

fn parking_layout(rng: &mut ChaCha8Rng, density: usize, horizon_s: f64) -> Result<Layout, String> {
    let x_end = 70.0;
    let aisle = 3.5;
    let depth = 5.5;
    let edge_y = aisle + depth;
    let edges = vec![
        vec![[-x_end, -edge_y], [x_end, -edge_y]],
        vec![[-x_end, edge_y], [x_end, edge_y]],
    ];
    let ego_path = line([-x_end, 0.0], [x_end, 0.0], 4.0);
    let ped_y = aisle - 0.6;
    let lanes = vec![
        ego_path.clone(),
        line([-x_end, -ped_y], [x_end, -ped_y], 4.0),
        line([x_end, ped_y], [-x_end, ped_y], 4.0),
    ];
    let ego_s = rng.random_range(5.0..15.0);
    let ego_limit = rng.random_range(3.0..4.5);
    let (ego_width, ego_length) = vehicle_size(rng);
    let peds = rng.random_range(0..=(density / 3).min(4));
    let mut movers = Vec::new();
    let mut taken = Vec::new();
    for _ in 0..peds {
        let lane = rng.random_range(1..3usize);
        let v0 = rng.random_range(0.8..1.5);
        let hi = lanes[lane].len() - v0 * horizon_s - 3.0;
        let s = free_slot(rng, &taken, lane, 3.0, hi, 0.6).ok_or("no room for a pedestrian")?;
        taken.push((lane, s, 0.6));
        movers.push(Mover {
            lane,
            s,
            v: v0,
            idm: IdmParams::default().with_speed(v0),
            width: 0.6,
            length: 0.6,
            kind: AgentKind::Pedestrian,
        });
    }
    let pitch = 2.8;
    let per_side = ((2.0 * x_end - 8.0) / pitch) as usize;
    let mut stalls: Vec<usize> = (0..2 * per_side).collect();
    let parked = density - peds;
    if parked > stalls.len() {
        return Err("more parked cars than stalls".into());
    }
    let mut statics = Vec::new();
    for _ in 0..parked {
        let k = stalls.swap_remove(rng.random_range(0..stalls.len()));
        let side = if k < per_side { -1.0 } else { 1.0 };
        let x = -x_end + 4.0 + pitch * ((k % per_side) as f64 + 0.5);
        let y = side * (aisle + depth / 2.0);
        let yaw = if rng.random_bool(0.5) { FRAC_PI_2 } else { -FRAC_PI_2 };
        statics.push(StaticAgent {
            state: AgentState::new(x, y, yaw, 0.0, 0.0),
            width: rng.random_range(1.7..1.9),
            length: rng.random_range(4.2..4.8),
            kind: AgentKind::Vehicle,
        });
    }
    Ok(Layout {
        edges,
        ego_path,
        lanes,
        ego_s,
        ego_v: rng.random_range(1.0..2.0),
        ego_limit,
        ego_width,
        ego_length,
        movers,
        statics,
    })
}

fn simulate_movers(lanes: &[Path], movers: &mut [Mover], steps: usize, f: f64) -> Vec<Vec<AgentState>> {
    let mut logs = vec![Vec::with_capacity(steps); movers.len()];
    for t in 0..steps {
        for (m, log) in movers.iter().zip(logs.iter_mut()) {
            let (p, h) = lanes[m.lane].at(m.s);
            let (s, c) = sin_cos(h);
            log.push(AgentState::new(p[0], p[1], h, m.v * c, m.v * s));
        }
        if t + 1 == steps {
            break;
        }
        let accels: Vec<f64> = movers
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let leader = movers
                    .iter()
                    .enumerate()
                    .filter(|(j, o)| *j != i && o.lane == m.lane && o.s > m.s)
                    .min_by(|a, b| a.1.s.total_cmp(&b.1.s));
                match leader {
                    Some((_, l)) => idm_accel(m.v, l.v, l.s - m.s - 0.5 * (l.length + m.length), &m.idm),
                    None => idm_accel(m.v, 0.0, f64::INFINITY, &m.idm),
                }
            })
            .collect();
        for (m, a) in movers.iter_mut().zip(accels) {
            let a = a.max(-m.v * f);
            m.s += m.v / f + a / (2.0 * f * f);
            m.v = (m.v + a / f).max(0.0);
        }
    }
    logs
}

struct Other<'a> {
    states: &'a [AgentState],
    width: f64,
    length: f64,
}

/// Highest speed at `s` that can still slow to every bend's cap ahead.
fn bend_speed(path: &Path, s: f64, v: f64, lat_accel: f64) -> f64 {
    let decel = 2.0;
    let horizon = v * v / (2.0 * decel) + 10.0;
    let mut best = f64::INFINITY;
    let mut d = 0.0;
    while d <= horizon {
        let k = path.curvature(s + d);
        if k > 1e-4 {
            let cap = (lat_accel / k).sqrt();
            best = best.min((cap * cap + 2.0 * decel * d).sqrt());
        }
        d += 0.5;
    }
    best
}

fn drive_expert(layout: &Layout, others: &[Other], tuning: &GeneratorTuning) -> Vec<AgentState> {
    let f = tuning.frequency_hz;
    let path = &layout.ego_path;
    let (p0, h0) = path.at(layout.ego_s);
    let (s, c) = sin_cos(h0);
    let mut st = AgentState::new(p0[0], p0[1], h0, layout.ego_v * c, layout.ego_v * s);
    let mut out = Vec::with_capacity(tuning.horizon_steps);
    let base = IdmParams {
        max_accel: 2.0,
        ..IdmParams::default()
    };
    for t in 0..tuning.horizon_steps {
        out.push(st);
        if t + 1 == tuning.horizon_steps {
            break;
        }
        let (s_ego, _) = path.project([st.x, st.y]);
        let (target, _) = path.at(s_ego + tuning.lookahead);
        let local = world_to_ego_point(target, &st.pose());
        let ld2 = local[0] * local[0] + local[1] * local[1];
        let steer = (2.0 * local[1] / ld2).clamp(-STEER_LIMIT, STEER_LIMIT);

        let v = st.speed();
        let v_des = layout.ego_limit.min(bend_speed(path, s_ego, v, tuning.lat_accel));
        let mut lead: Option<(f64, f64)> = None;
        for o in others {
            let os = &o.states[t];
            let (so, lat) = path.project([os.x, os.y]);
            if so <= s_ego || lat.abs() > 0.5 * (layout.ego_width + o.width) + 0.4 {
                continue;
            }
            let (_, hp) = path.at(so);
            let gap = so - s_ego - 0.5 * (layout.ego_length + o.length);
            if lead.is_none_or(|(g, _)| gap < g) {
                lead = Some((gap, os.speed() * (os.yaw - hp).cos()));
            }
        }
        let idm = base.with_speed(v_des);
        let mut acc = match lead {
            Some((gap, vl)) => idm_accel(v, vl, gap, &idm),
            None => idm_accel(v, 0.0, f64::INFINITY, &idm),
        };
        acc = acc.clamp(-ACC_LIMIT, ACC_LIMIT).max((MIN_EGO_SPEED - v) * f);
        st = step_bicycle(&st, BicycleAction::new(acc, steer), f);
    }
    out
}

fn check(layout: &Layout, ego: &[AgentState], others: &[(Vec<AgentState>, f64, f64)]) -> Result<(), String> {
    let mut boxes0 = vec![rect_for(&ego[0], layout.ego_width, layout.ego_length)];
    boxes0.extend(others.iter().map(|(s, w, l)| rect_for(&s[0], *w, *l)));
    for i in 0..boxes0.len() {
        for j in i + 1..boxes0.len() {
            if obb_overlap(&boxes0[i], &boxes0[j]) {
                return Err(format!("agents {i} and {j} overlap at t=0"));
            }
        }
    }
    for (t, st) in ego.iter().enumerate() {
        let r = rect_for(st, layout.ego_width, layout.ego_length);
        if layout.edges.iter().any(|e| obb_polyline_overlap(&r, e)) {
            return Err(format!("ego leaves the road at step {t}"));
        }
        for (k, (s, w, l)) in others.iter().enumerate() {
            if obb_overlap(&r, &rect_for(&s[t], *w, *l)) {
                return Err(format!("ego collides with agent {k} at step {t}"));
            }
        }
    }
    let travelled: f64 = ego.windows(2).map(|w| dist([w[0].x, w[0].y], [w[1].x, w[1].y])).sum();
    if travelled < 15.0 {
        return Err(format!("ego only travels {travelled:.1} m"));
    }
    let all = ego.iter().chain(others.iter().flat_map(|(s, _, _)| s.iter()));
    let edge_pts = layout.edges.iter().flatten().map(|p| (p[0], p[1]));
    if all
        .map(|s| (s.x, s.y))
        .chain(edge_pts)
        .any(|(x, y)| x.abs() > COORD_LIMIT || y.abs() > COORD_LIMIT)
    {
        return Err("coordinates leave the +-100 m window".into());
    }
    Ok(())
}

fn rotate_state(s: &AgentState, sn: f64, cs: f64, theta: f64) -> AgentState {
    AgentState::new(
        quantize(cs * s.x - sn * s.y),
        quantize(sn * s.x + cs * s.y),
        quantize(wrap_angle(s.yaw + theta)),
        quantize(cs * s.vx - sn * s.vy),
        quantize(sn * s.vx + cs * s.vy),
    )
}

fn attempt(spec: &ScenarioFamilySpec, tuning: &GeneratorTuning, rng: &mut ChaCha8Rng) -> Result<Scenario, String> {
    let horizon_s = tuning.horizon_steps as f64 / tuning.frequency_hz;
    let mut layout = match spec.family {
        Family::Straight => straight_layout(rng, spec.traffic_density, horizon_s)?,
        Family::Curve => curve_layout(rng, spec.traffic_density, spec.curvature, horizon_s)?,
        Family::Intersection => intersection_layout(rng, spec.traffic_density)?,
        Family::Parking => parking_layout(rng, spec.traffic_density, horizon_s)?,
    };
    let mut movers = std::mem::take(&mut layout.movers);
    let mover_logs = simulate_movers(&layout.lanes, &mut movers, tuning.horizon_steps, tuning.frequency_hz);
    let mut others: Vec<(Vec<AgentState>, f64, f64)> = Vec::new();
    let mut kinds = Vec::new();
    for (m, log) in movers.iter().zip(mover_logs) {
        others.push((log, m.width, m.length));
        kinds.push(m.kind);
    }
    for st in &layout.statics {
        others.push((vec![st.state; tuning.horizon_steps], st.width, st.length));
        kinds.push(st.kind);
    }
    let views: Vec<Other> = others
        .iter()
        .map(|(s, w, l)| Other {
            states: s,
            width: *w,
            length: *l,
        })
        .collect();
    let ego = drive_expert(&layout, &views, tuning);
    check(&layout, &ego, &others)?;

    let theta = wrap_angle(rng.random_range(-PI..PI));
    let (sn, cs) = sin_cos(theta);
    let rot = |p: &Point| [quantize(cs * p[0] - sn * p[1]), quantize(sn * p[0] + cs * p[1])];
    let ego_index = rng.random_range(0..=others.len());
    let mut agents: Vec<AgentLog> = others
        .iter()
        .zip(&kinds)
        .map(|((s, w, l), k)| AgentLog {
            kind: *k,
            width: quantize(*w),
            length: quantize(*l),
            states: s.iter().map(|st| rotate_state(st, sn, cs, theta)).collect(),
        })
        .collect();
    let ego_log = AgentLog {
        kind: AgentKind::Vehicle,
        width: quantize(layout.ego_width),
        length: quantize(layout.ego_length),
        states: ego.iter().map(|st| rotate_state(st, sn, cs, theta)).collect(),
    };
    let routing = ego_log.states.iter().map(|s| [s.x, s.y]).collect();
    agents.insert(ego_index, ego_log);
    let scenario = Scenario {
        id: format!("{}-d{}-s{}", spec.family, spec.traffic_density, spec.seed),
        frequency_hz: tuning.frequency_hz,
        horizon_steps: tuning.horizon_steps,
        ego_index,
        map_polylines: layout.edges.iter().map(|e| e.iter().map(rot).collect()).collect(),
        routing,
        agents,
    };
    scenario.validate().map_err(|e| e.to_string())?;
    Ok(scenario)
}

pub fn generate_scenario(spec: &ScenarioFamilySpec) -> Result<Scenario, ScenarioError> {
    generate_with(spec, &GeneratorTuning::default())
}

pub fn generate_with(spec: &ScenarioFamilySpec, tuning: &GeneratorTuning) -> Result<Scenario, ScenarioError> {
    if spec.traffic_density >= MAX_AGENTS {
        return Err(ScenarioError::InvalidSpec(format!(
            "traffic_density {} exceeds {}",
            spec.traffic_density,
            MAX_AGENTS - 1
        )));
    }
    if !(spec.curvature >= 0.0 && spec.curvature <= 0.12) {
        return Err(ScenarioError::InvalidSpec(format!(
            "curvature {} outside [0, 0.12]",
            spec.curvature
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut last = String::new();
    for _ in 0..tuning.max_attempts {
        match attempt(spec, tuning, &mut rng) {
            Ok(s) => return Ok(s),
            Err(e) => last = e,
        }
    }
    Err(ScenarioError::GenerationFailed {
        attempts: tuning.max_attempts,
        last,
    })
}
