use chauffeur_neuro::model::{encode, heads_forward};
use chauffeur_neuro::{adam_step, AdamConfig, AdamState, Tape, Tensor, TokenInput};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{ActionSpace, OutputNorm, Policy};

const TARGET_SPREAD_FLOOR: f64 = 1e-3;
use super::TrainingError;
use crate::dynamics::{infer_bicycle_action, infer_waypoint_action};
use crate::observation::{logged_views, preprocess_static, tokenize, ObsRecord, TokenizerConfig};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ILConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Scenarios tokenized together when dumping observations.
    pub scenarios_per_batch: usize,
    /// Observations per gradient step.
    pub batch_size: usize,
    pub w_acc: f64,
    pub w_steer: f64,
    pub w_x: f64,
    pub w_y: f64,
    pub w_yaw: f64,
    pub seed: u64,
    /// Stop after this many updates even if epochs remain.
    pub max_updates: Option<usize>,
    /// Fit the head's output map to the target mean and spread before
    /// training, so the network regresses unit-scale values.
    pub standardize_targets: bool,
}

impl Default for ILConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 5,
            scenarios_per_batch: 500,
            batch_size: 6,
            w_acc: 1.0,
            w_steer: 5.0,
            w_x: 1.0,
            w_y: 50.0,
            w_yaw: 50.0,
            seed: 0,
            max_updates: None,
            standardize_targets: true,
        }
    }
}

impl ILConfig {
    pub fn weights(&self, space: ActionSpace) -> Vec<f64> {
        match space {
            ActionSpace::Bicycle => vec![self.w_acc, self.w_steer],
            ActionSpace::Waypoint => vec![self.w_x, self.w_y, self.w_yaw],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlLoss {
    pub total: f64,
    /// Mean absolute error of each action component.
    pub per_term: Vec<f64>,
}

/// Weighted l1 imitation loss averaged over the batch.
pub fn il_loss(pred: &[Vec<f64>], gt: &[Vec<f64>], cfg: &ILConfig, space: ActionSpace) -> IlLoss {
    let w = cfg.weights(space);
    let mut per_term = vec![0.0; w.len()];
    for (p, g) in pred.iter().zip(gt) {
        assert_eq!(p.len(), w.len(), "prediction width");
        assert_eq!(g.len(), w.len(), "target width");
        for k in 0..w.len() {
            per_term[k] += (p[k] - g[k]).abs();
        }
    }
    let n = pred.len().max(1) as f64;
    per_term.iter_mut().for_each(|t| *t /= n);
    IlLoss {
        total: per_term.iter().zip(&w).map(|(t, w)| t * w).sum(),
        per_term,
    }
}

/// Observations at every logged ego state paired with the expert action
/// that leads to the next one.
pub fn build_il_dataset(scenarios: &[Scenario], tok: &TokenizerConfig, space: ActionSpace) -> Vec<ObsRecord> {
    let mut out = Vec::new();
    for s in scenarios {
        let cache = preprocess_static(s, tok);
        let ego = &s.ego().states;
        for t in 0..s.horizon_steps.saturating_sub(1) {
            let obs = tokenize(&ego[t], &logged_views(s, t), &cache, tok);
            let action = match space {
                ActionSpace::Bicycle => {
                    let a = infer_bicycle_action(&ego[t], &ego[t + 1], s.frequency_hz).action;
                    vec![a.acc, a.steer]
                }
                ActionSpace::Waypoint => {
                    let a = infer_waypoint_action(&ego[t], &ego[t + 1]);
                    vec![a.dx, a.dy, a.dyaw]
                }
            };
            out.push(ObsRecord {
                scenario_id: s.id.clone(),
                step: t as u32,
                tokens: obs.tokens,
                mask: obs.mask,
                action,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct IlOutcome {
    pub policy: Policy,
    /// Loss of every minibatch, in update order.
    pub curve: Vec<f64>,
}

/// Adam on the weighted l1 loss over shuffled minibatches. `policy.kind`
/// selects the head being trained.
pub fn train_il(dataset: &[ObsRecord], mut policy: Policy, cfg: &ILConfig) -> Result<IlOutcome, TrainingError> {
    if dataset.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(TrainingError::Config("batch_size must be at least 1".into()));
    }
    let space = policy.kind.action_space();
    let head = policy.kind.head();
    let weights = cfg.weights(space);
    let dims = weights.len();
    if let Some(bad) = dataset.iter().find(|r| r.action.len() != dims) {
        return Err(TrainingError::Config(format!(
            "record {}@{} has {} action values, the head expects {dims}",
            bad.scenario_id,
            bad.step,
            bad.action.len()
        )));
    }
    if cfg.standardize_targets {
        let targets: Vec<Vec<f64>> = dataset.iter().map(|r| r.action.clone()).collect();
        policy.il_norm = OutputNorm::fit(&targets, TARGET_SPREAD_FLOOR);
    }
    let (shift, scale) = if policy.il_norm.is_identity() {
        (vec![0.0; dims], vec![1.0; dims])
    } else {
        (policy.il_norm.shift.clone(), policy.il_norm.scale.clone())
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&policy.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::new();
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_updates.is_some_and(|m| curve.len() >= m) {
                break 'outer;
            }
            let grads = {
                let mut tape = Tape::with_params(&policy.params);
                let batch: Vec<TokenInput> = chunk
                    .iter()
                    .map(|&i| TokenInput {
                        rows: &dataset[i].tokens,
                        mask: &dataset[i].mask,
                    })
                    .collect();
                let latent = encode(&mut tape, &policy.model.encoder, &batch)?;
                let hv = heads_forward(&mut tape, &policy.model.heads, latent, head)?;
                let raw = hv.action.expect("imitation head");
                let scale = tape.input(Tensor::row_vector(scale.clone()));
                let shift = tape.input(Tensor::row_vector(shift.clone()));
                let scaled = tape.mul_row(raw, scale);
                let pred = tape.add_row(scaled, shift);
                let gt: Vec<f64> = chunk.iter().flat_map(|&i| dataset[i].action.iter().copied()).collect();
                let gt = tape.input(Tensor::from_vec(chunk.len(), dims, gt));
                let w = tape.input(Tensor::row_vector(weights.clone()));
                let diff = tape.sub(pred, gt);
                let abs = tape.abs(diff);
                let weighted = tape.mul_row(abs, w);
                let total = tape.sum(weighted);
                let loss = tape.scale(total, 1.0 / chunk.len() as f64);
                curve.push(tape.value(loss).item());
                tape.backward(loss)?
            };
            adam_step(&mut policy.params, &grads, &mut state, &adam);
        }
    }
    Ok(IlOutcome { policy, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let cfg = ILConfig::default();
        let z = il_loss(&[vec![1.0, 0.1]], &[vec![1.0, 0.1]], &cfg, ActionSpace::Bicycle);
        assert_eq!(z.total, 0.0);
        let b = il_loss(&[vec![1.1, 0.12]], &[vec![1.0, 0.1]], &cfg, ActionSpace::Bicycle);
        assert!((b.total - 0.2).abs() < 1e-12);
        let w = il_loss(&[vec![0.1, 0.01, 0.01]], &[vec![0.0; 3]], &cfg, ActionSpace::Waypoint);
        assert!((w.total - 1.1).abs() < 1e-12);
    }
}
