//! Ego shifting: bounded Gaussian perturbations of the ego's initial pose,
//! validity retries and sweeps over shift magnitudes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::AgentState;
use crate::geometry::{ego_to_world, heading, obb_polyline_overlap, sin_cos, wrap_angle, OrientedRect, Pose};
use crate::scenario::Scenario;
use crate::simulator::{
    aggregate, compute_metrics, ego_collides, ego_offroad, BenchmarkReport, EpisodeMetrics, Mode, SimConfig, SimError,
    Simulator,
};
use crate::training::{run_episode, Policy};

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("invalid shift configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Neuro(#[from] chauffeur_neuro::NeuroError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Position only.
    Axis,
    /// Heading only.
    Yaw,
    #[default]
    Both,
}

impl std::str::FromStr for ShiftMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "axis" => Ok(ShiftMode::Axis),
            "yaw" => Ok(ShiftMode::Yaw),
            "both" => Ok(ShiftMode::Both),
            _ => Err(format!("unknown shift mode `{s}` (expected axis, yaw or both)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Bound on each of dx, dy in metres.
    pub max_xy: f64,
    /// Bound on dyaw in radians.
    pub max_yaw: f64,
    pub mode: ShiftMode,
    /// Standard deviation as a fraction of the bound.
    pub sigma_frac: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            max_xy: 0.0,
            max_yaw: 0.0,
            mode: ShiftMode::Both,
            sigma_frac: 0.5,
            max_retries: 10,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<(), RobustnessError> {
        let bad = |m: &str| Err(RobustnessError::Config(m.into()));
        if !(self.max_xy >= 0.0 && self.max_xy.is_finite()) {
            return bad("max_xy must be finite and non-negative");
        }
        if !(self.max_yaw >= 0.0 && self.max_yaw.is_finite()) {
            return bad("max_yaw must be finite and non-negative");
        }
        if !(self.sigma_frac > 0.0 && self.sigma_frac.is_finite()) {
            return bad("sigma_frac must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftOutcome {
    pub applied: bool,
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
    pub attempts: usize,
}

impl ShiftOutcome {
    fn unshifted(attempts: usize) -> Self {
        Self {
            applied: false,
            dx: 0.0,
            dy: 0.0,
            dyaw: 0.0,
            attempts,
        }
    }

    fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.dyaw == 0.0
    }
}

/// Standard normal truncated to |z| <= bound by rejection.
fn truncated_unit<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= bound {
            return z;
        }
    }
}

/// One (dx, dy, dyaw) draw. All three components are drawn whatever the
/// mode and bounds so that the random stream, and hence the relative shift,
/// is the same for every configuration sharing a seed.
pub fn sample_shift<R: Rng + ?Sized>(cfg: &ShiftConfig, rng: &mut R) -> (f64, f64, f64) {
    let bound = 1.0 / cfg.sigma_frac;
    let zx = truncated_unit(rng, bound);
    let zy = truncated_unit(rng, bound);
    let zyaw = truncated_unit(rng, bound);
    let xy = cfg.sigma_frac * cfg.max_xy;
    let yaw = cfg.sigma_frac * cfg.max_yaw;
    // rounding in z * sigma can overshoot the bound by an ulp
    let clip = |v: f64, m: f64| v.clamp(-m, m) + 0.0;
    let (dx, dy) = match cfg.mode {
        ShiftMode::Yaw => (0.0, 0.0),
        _ => (clip(zx * xy, cfg.max_xy), clip(zy * xy, cfg.max_xy)),
    };
    let dyaw = match cfg.mode {
        ShiftMode::Axis => 0.0,
        _ => clip(zyaw * yaw, cfg.max_yaw),
    };
    (dx, dy, dyaw)
}

/// Initial ego pose moved by (dx forward, dy left) in its own frame and
/// turned by dyaw.
pub fn shifted_pose(scenario: &Scenario, dx: f64, dy: f64, dyaw: f64) -> Pose {
    let s0 = scenario.ego().states[0];
    let base = Pose::new(s0.x, s0.y, s0.yaw);
    let moved = ego_to_world(&Pose::new(dx, dy, 0.0), &base);
    Pose::new(moved.x, moved.y, wrap_angle(s0.yaw + dyaw))
}

/// Ego state at `pose` keeping the logged initial speed, as the simulator
/// builds it on reset.
pub fn shifted_state(scenario: &Scenario, pose: Pose) -> AgentState {
    let v = scenario.ego().states[0].speed();
    let (sin, cos) = sin_cos(pose.yaw);
    AgentState::new(pose.x, pose.y, pose.yaw, v * cos, v * sin)
}

/// Whether the ego may start at `pose`: its footprint touches no road edge
/// and no agent's initial footprint, and getting there from the logged
/// start does not cross a road edge (a footprint that jumped clean over an
/// edge would otherwise pass).
pub fn validate_shift(scenario: &Scenario, pose: Pose) -> bool {
    let ego = shifted_state(scenario, pose);
    let states: Vec<AgentState> = scenario.agents.iter().map(|a| a.states[0]).collect();
    !ego_offroad(scenario, &ego) && !ego_collides(scenario, &ego, &states) && !crosses_edge(scenario, pose)
}

fn crosses_edge(scenario: &Scenario, pose: Pose) -> bool {
    let s0 = scenario.ego().states[0];
    let (dx, dy) = (pose.x - s0.x, pose.y - s0.y);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return false;
    }
    let path = OrientedRect::new((s0.x + pose.x) / 2.0, (s0.y + pose.y) / 2.0, len, 0.0, heading(dx, dy));
    scenario.map_polylines.iter().any(|p| obb_polyline_overlap(&path, p))
}

/// Draw shifts until one is valid, at most `max_retries` times.
pub fn choose_shift<R: Rng + ?Sized>(scenario: &Scenario, cfg: &ShiftConfig, rng: &mut R) -> ShiftOutcome {
    for attempt in 1..=cfg.max_retries {
        let (dx, dy, dyaw) = sample_shift(cfg, rng);
        if validate_shift(scenario, shifted_pose(scenario, dx, dy, dyaw)) {
            let out = ShiftOutcome {
                applied: true,
                dx,
                dy,
                dyaw,
                attempts: attempt,
            };
            check_bounds(&out, cfg);
            return out;
        }
    }
    ShiftOutcome::unshifted(cfg.max_retries)
}

fn check_bounds(o: &ShiftOutcome, cfg: &ShiftConfig) {
    assert!(
        o.dx.abs() <= cfg.max_xy && o.dy.abs() <= cfg.max_xy,
        "xy shift out of bounds: {o:?}"
    );
    assert!(o.dyaw.abs() <= cfg.max_yaw, "yaw shift out of bounds: {o:?}");
    assert!(o.applied || o.is_zero(), "unapplied shift with non-zero deltas: {o:?}");
}

/// Override handed to the simulator; an exact zero shift keeps the logged
/// initial state untouched.
pub fn init_override(scenario: &Scenario, o: &ShiftOutcome) -> Option<Pose> {
    (o.applied && !o.is_zero()).then(|| shifted_pose(scenario, o.dx, o.dy, o.dyaw))
}

pub fn shifted_reset<'a, R: Rng + ?Sized>(
    scenario: &'a Scenario,
    mode: Mode,
    sim_cfg: SimConfig,
    cfg: &ShiftConfig,
    rng: &mut R,
) -> (Simulator<'a>, ShiftOutcome) {
    let out = choose_shift(scenario, cfg, rng);
    (
        Simulator::reset(scenario, mode, sim_cfg, init_override(scenario, &out)),
        out,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub max_xy: f64,
    pub max_yaw: f64,
    pub report: BenchmarkReport,
    pub applied_fraction: f64,
    pub per_episode: Vec<EpisodeMetrics>,
}

/// Seed of one episode, shared by every cell of a sweep.
pub fn episode_seed(base: u64, scenario: usize, episode: usize) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for v in [scenario as u64, episode as u64] {
        x = (x ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

/// Mean-action evaluation of `policy` under every (max_xy, max_yaw) pair,
/// `episodes` shifted starts per scenario.
pub fn shift_sweep(
    scenarios: &[Scenario],
    policy: &Policy,
    mode: Mode,
    sim_cfg: SimConfig,
    base: &ShiftConfig,
    grid_xy: &[f64],
    grid_yaw: &[f64],
    episodes: usize,
) -> Result<Vec<SweepCell>, RobustnessError> {
    if grid_xy.is_empty() || grid_yaw.is_empty() || episodes == 0 || scenarios.is_empty() {
        return Err(RobustnessError::Config(
            "sweep needs a non-empty grid, scenarios and episodes".into(),
        ));
    }
    let cells: Vec<ShiftConfig> = grid_xy
        .iter()
        .flat_map(|&max_xy| {
            grid_yaw.iter().map(move |&max_yaw| ShiftConfig {
                max_xy,
                max_yaw,
                ..*base
            })
        })
        .collect();
    for c in &cells {
        c.validate()?;
    }
    let jobs: Vec<(usize, usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..scenarios.len()).flat_map(move |s| (0..episodes).map(move |e| (c, s, e))))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(c, si, e)| {
            let s = &scenarios[si];
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(base.seed, si, e));
            let out = choose_shift(s, &cells[c], &mut rng);
            let rec = run_episode::<ChaCha8Rng>(s, policy, mode, sim_cfg, init_override(s, &out), None)?;
            Ok((compute_metrics(&rec, s, sim_cfg.arrival_progress), out.applied))
        })
        .collect::<Result<Vec<_>, RobustnessError>>()?;
    let per_cell = scenarios.len() * episodes;
    cells
        .iter()
        .zip(results.chunks(per_cell))
        .map(|(c, chunk)| {
            let per_episode: Vec<EpisodeMetrics> = chunk.iter().map(|r| r.0).collect();
            Ok(SweepCell {
                max_xy: c.max_xy,
                max_yaw: c.max_yaw,
                report: aggregate(&per_episode)?,
                applied_fraction: chunk.iter().filter(|r| r.1).count() as f64 / chunk.len() as f64,
                per_episode,
            })
        })
        .collect()
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("max_xy,max_yaw,AR,OR,CR,PR,episodes,applied_fraction\n");
    for c in cells {
        out += &format!(
            "{},{},{},{},{},{},{},{}\n",
            c.max_xy,
            c.max_yaw,
            c.report.ar,
            c.report.or,
            c.report.cr,
            c.report.pr,
            c.report.n_episodes,
            c.applied_fraction
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bounds_give_zero_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ShiftConfig::default();
        for _ in 0..100 {
            let (dx, dy, dyaw) = sample_shift(&cfg, &mut rng);
            assert_eq!((dx.to_bits(), dy.to_bits(), dyaw.to_bits()), (0, 0, 0));
        }
    }

    #[test]
    fn mode_gates_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let yaw = ShiftConfig {
            max_xy: 3.0,
            max_yaw: 0.3,
            mode: ShiftMode::Yaw,
            ..ShiftConfig::default()
        };
        let axis = ShiftConfig {
            mode: ShiftMode::Axis,
            ..yaw
        };
        for _ in 0..100 {
            let (dx, dy, _) = sample_shift(&yaw, &mut rng);
            assert_eq!((dx, dy), (0.0, 0.0));
            assert_eq!(sample_shift(&axis, &mut rng).2, 0.0);
        }
    }

    #[test]
    fn same_seed_scales_with_the_bound() {
        let small = ShiftConfig {
            max_xy: 1.0,
            max_yaw: 0.1,
            ..ShiftConfig::default()
        };
        let big = ShiftConfig {
            max_xy: 4.0,
            max_yaw: 0.4,
            ..small
        };
        let a = sample_shift(&small, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_shift(&big, &mut ChaCha8Rng::seed_from_u64(3));
        assert!((4.0 * a.0 - b.0).abs() < 1e-12 && (4.0 * a.2 - b.2).abs() < 1e-12);
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(0, 0, 1), episode_seed(0, 1, 0));
        assert_ne!(episode_seed(0, 0, 0), episode_seed(1, 0, 0));
    }
}
