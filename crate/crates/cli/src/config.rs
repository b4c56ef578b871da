use std::path::Path;

use chauffeur::observation::TokenizerConfig;
use chauffeur::robustness::ShiftConfig;
use chauffeur::sampling::{FeatureAgg, SneConfig};
use chauffeur::scenario::Family;
use chauffeur::simulator::{Mode, SimConfig};
use chauffeur::training::{ActionSpace, ILConfig, PPOConfig, Policy};
use chauffeur_neuro::ModelConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEED_ENV: &str = "CHAUFFEUR_SEED";

/// Bad user input: unreadable or invalid configuration, flags or input
/// files. Maps to exit code 2.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenFamily {
    Straight,
    Curve,
    Intersection,
    Parking,
    /// Cycle through all four families.
    Mixed,
}

impl GenFamily {
    pub fn family_for(self, i: usize) -> Family {
        match self {
            GenFamily::Straight => Family::Straight,
            GenFamily::Curve => Family::Curve,
            GenFamily::Intersection => Family::Intersection,
            GenFamily::Parking => Family::Parking,
            GenFamily::Mixed => Family::ALL[i % 4],
        }
    }
}

impl std::str::FromStr for GenFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "mixed" {
            return Ok(GenFamily::Mixed);
        }
        s.parse::<Family>()
            .map(|f| match f {
                Family::Straight => GenFamily::Straight,
                Family::Curve => GenFamily::Curve,
                Family::Intersection => GenFamily::Intersection,
                Family::Parking => GenFamily::Parking,
            })
            .map_err(|e| format!("{e}, or mixed"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub family: GenFamily,
    pub count: usize,
    pub density: usize,
    pub curvature: f64,
    /// Scenario `i` uses seed `seed + i`.
    pub seed: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            family: GenFamily::Mixed,
            count: 8,
            density: 3,
            curvature: 0.03,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    /// Output of imitation training.
    pub il_action_space: ActionSpace,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            il_action_space: ActionSpace::Bicycle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: Mode,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mode: Mode::NonReactive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub agg: FeatureAgg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub grid_xy: Vec<f64>,
    /// Yaw bounds in degrees.
    pub grid_yaw_deg: Vec<f64>,
    /// Shifted starts per scenario and cell.
    pub episodes: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            grid_xy: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            grid_yaw_deg: vec![0.0, 4.0, 8.0, 15.0, 20.0],
            episodes: 4,
        }
    }
}

/// Everything a command may read, loadable from one TOML file. Sections
/// that a command does not use are still echoed in its resolved config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When set, replaces every per-section seed.
    pub seed: Option<u64>,
    pub gen: GenSection,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub policy: PolicySection,
    pub sim: SimConfig,
    pub eval: EvalSection,
    pub il: ILConfig,
    pub ppo: PPOConfig,
    pub features: FeatureSection,
    pub sne: SneConfig,
    pub shift: ShiftConfig,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
    }

    /// Seed precedence: flag, then environment, then config file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> anyhow::Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| config_err(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?,
            ),
            Err(_) => None,
        };
        if let Some(s) = flag.or(env).or(self.seed) {
            self.seed = Some(s);
            self.gen.seed = s;
            self.il.seed = s;
            self.ppo.seed = s;
            self.sne.seed = s;
            self.shift.seed = s;
        }
        Ok(())
    }

    /// Take the model and tokenizer a checkpoint was built with.
    pub fn adopt(&mut self, p: &Policy) {
        self.model = p.model.clone();
        self.tokenizer = p.tokenizer;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.tokenizer.validate().map_err(|e| config_err(e.to_string()))?;
        self.ppo.validate().map_err(|e| config_err(e.to_string()))?;
        self.shift.validate().map_err(|e| config_err(e.to_string()))?;
        if self
            .sweep
            .grid_xy
            .iter()
            .chain(&self.sweep.grid_yaw_deg)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(config_err("sweep grids must hold finite non-negative values"));
        }
        Ok(())
    }

    pub fn to_toml(&self, command: &str) -> String {
        let body = toml::to_string(self).expect("config serializes");
        format!("# resolved configuration of `{command}`\n{body}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_fill_defaults() {
        let c: ExperimentConfig = toml::from_str("[il]\nlr = 0.001\n[sweep]\nepisodes = 2\n").unwrap();
        assert_eq!(c.il.lr, 0.001);
        assert_eq!(c.il.epochs, ILConfig::default().epochs);
        assert_eq!(c.sweep.episodes, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[il]\nlearning_rate = 0.1\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = ExperimentConfig::default();
        c.resolve_seed(Some(9)).unwrap();
        let text = c.to_toml("test");
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.ppo.seed, 9);
    }
}
