use chauffeur_neuro::beta::clamp_unit;
use chauffeur_neuro::model::{forward, init_params};
use chauffeur_neuro::{
    checkpoint, map_action, ActionRanges, HeadMode, ModelConfig, NeuroError, ParamStore, TokenInput,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::Path;

use crate::dynamics::{BicycleAction, WaypointAction};
use crate::geometry::Pose;
use crate::observation::{preprocess_static, Observation, TokenizerConfig};
use crate::scenario::Scenario;
use crate::simulator::{compute_metrics, EgoAction, EpisodeMetrics, EpisodeRecord, Mode, SimConfig, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Bicycle,
    Waypoint,
}

/// Which head drives the ego.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    IlBicycle,
    IlWaypoint,
    Rl,
}

impl PolicyKind {
    pub fn head(self) -> HeadMode {
        match self {
            PolicyKind::IlBicycle => HeadMode::IlBicycle,
            PolicyKind::IlWaypoint => HeadMode::IlWaypoint,
            PolicyKind::Rl => HeadMode::Rl,
        }
    }

    pub fn action_space(self) -> ActionSpace {
        match self {
            PolicyKind::IlWaypoint => ActionSpace::Waypoint,
            _ => ActionSpace::Bicycle,
        }
    }
}

/// Fixed affine map from the imitation head's raw output to physical
/// units. Empty vectors mean identity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl OutputNorm {
    /// Per-dimension mean and spread of the targets; the spread is floored
    /// so constant targets stay representable.
    pub fn fit(targets: &[Vec<f64>], floor: f64) -> Self {
        let n = targets.len().max(1) as f64;
        let dims = targets.first().map_or(0, Vec::len);
        let shift: Vec<f64> = (0..dims)
            .map(|k| targets.iter().map(|t| t[k]).sum::<f64>() / n)
            .collect();
        let scale = (0..dims)
            .map(|k| {
                let var = targets.iter().map(|t| (t[k] - shift[k]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(floor)
            })
            .collect();
        Self { shift, scale }
    }

    pub fn is_identity(&self) -> bool {
        self.shift.is_empty()
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return raw.to_vec();
        }
        raw.iter()
            .zip(self.scale.iter().zip(&self.shift))
            .map(|(r, (s, m))| m + s * r)
            .collect()
    }
}

/// Parameters plus everything needed to turn a scene into an action.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: ParamStore,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub kind: PolicyKind,
    pub ranges: ActionRanges,
    pub il_norm: OutputNorm,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyMeta {
    kind: PolicyKind,
    model: ModelConfig,
    tokenizer: TokenizerConfig,
    ranges: ActionRanges,
    il_norm: OutputNorm,
}

impl Policy {
    pub fn fresh(model: ModelConfig, tokenizer: TokenizerConfig, kind: PolicyKind) -> Result<Self, NeuroError> {
        Ok(Self {
            params: init_params(&model)?,
            model,
            tokenizer,
            kind,
            ranges: ActionRanges::default(),
            il_norm: OutputNorm::default(),
        })
    }

    fn meta(&self) -> serde_json::Value {
        json!(PolicyMeta {
            kind: self.kind,
            model: self.model.clone(),
            tokenizer: self.tokenizer,
            ranges: self.ranges,
            il_norm: self.il_norm.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.params, &self.meta())
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuroError> {
        checkpoint::save(path, &self.params, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self, NeuroError> {
        let (params, meta) = checkpoint::load(path)?;
        let meta: PolicyMeta =
            serde_json::from_value(meta).map_err(|e| NeuroError::Checkpoint(format!("config: {e}")))?;
        let fresh = init_params(&meta.model)?;
        let mut out = Self {
            params: fresh,
            model: meta.model,
            tokenizer: meta.tokenizer,
            kind: meta.kind,
            ranges: meta.ranges,
            il_norm: meta.il_norm,
        };
        out.params.assign_from(&params)?;
        Ok(out)
    }

    /// Action for one observation. With an RNG the RL head samples from its
    /// Beta distribution, otherwise it takes the mean.
    pub fn act<R: Rng + ?Sized>(&self, obs: &Observation, rng: Option<&mut R>) -> Result<EgoAction, NeuroError> {
        let input = TokenInput {
            rows: &obs.tokens,
            mask: &obs.mask,
        };
        let out = forward(&self.params, &self.model, &[input], self.kind.head())?.remove(0);
        Ok(match self.kind {
            PolicyKind::IlBicycle => {
                let a = self.il_norm.apply(&out.action.expect("imitation head"));
                EgoAction::Bicycle(BicycleAction::new(a[0], a[1]))
            }
            PolicyKind::IlWaypoint => {
                let a = self.il_norm.apply(&out.action.expect("imitation head"));
                EgoAction::Waypoint(WaypointAction::new(a[0], a[1], a[2]))
            }
            PolicyKind::Rl => {
                let b = out.beta.expect("policy head");
                let u = match rng {
                    Some(r) => b.sample(r),
                    None => b.mean(),
                };
                let [acc, steer] = map_action([clamp_unit(u[0]), clamp_unit(u[1])], &self.ranges);
                EgoAction::Bicycle(BicycleAction::new(acc, steer))
            }
        })
    }
}

/// One closed-loop episode driven by `policy`.
pub fn run_episode<R: Rng + ?Sized>(
    scenario: &Scenario,
    policy: &Policy,
    mode: Mode,
    sim_cfg: SimConfig,
    init_override: Option<Pose>,
    mut rng: Option<&mut R>,
) -> Result<EpisodeRecord, NeuroError> {
    let cache = preprocess_static(scenario, &policy.tokenizer);
    let mut sim = Simulator::reset(scenario, mode, sim_cfg, init_override);
    while !sim.done() {
        let obs = sim.observe(&cache, &policy.tokenizer);
        let a = policy.act(&obs, rng.as_deref_mut())?;
        sim.step(a).expect("episode is running");
    }
    Ok(sim.into_record())
}

/// Deterministic (mean-action) evaluation, one episode per scenario.
pub fn evaluate(
    scenarios: &[Scenario],
    policy: &Policy,
    mode: Mode,
    sim_cfg: SimConfig,
) -> Result<Vec<(EpisodeRecord, EpisodeMetrics)>, NeuroError> {
    scenarios
        .par_iter()
        .map(|s| {
            let rec = run_episode::<rand_chacha::ChaCha8Rng>(s, policy, mode, sim_cfg, None, None)?;
            let m = compute_metrics(&rec, s, sim_cfg.arrival_progress);
            Ok((rec, m))
        })
        .collect()
}
