use chauffeur_neuro::beta::{clamp_unit, tape_entropy, tape_log_prob};
use chauffeur_neuro::model::{encode, forward, heads_forward};
use chauffeur_neuro::{adam_step, map_action, AdamConfig, AdamState, Gradients, HeadMode, Tape, Tensor, TokenInput};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gae::gae;
use super::policy::{Policy, PolicyKind};
use super::TrainingError;
use crate::dynamics::BicycleAction;
use crate::observation::{preprocess_static, StaticCache};
use crate::scenario::Scenario;
use crate::simulator::{EgoAction, Mode, SimConfig, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PPOConfig {
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub w_ent: f64,
    pub w_value: f64,
    /// Minibatch size; a wave is split into equal minibatches no larger
    /// than this.
    pub batch_size: usize,
    pub epochs_per_wave: usize,
    pub max_grad_norm: f64,
    pub total_timesteps: usize,
    /// Environment steps collected per scenario in each wave.
    pub steps_per_wave: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            gamma: 0.99,
            lambda: 0.9,
            clip: 0.2,
            w_ent: 1.0,
            w_value: 0.01,
            batch_size: 2500,
            epochs_per_wave: 1,
            max_grad_norm: 0.5,
            total_timesteps: 0,
            steps_per_wave: 320,
            mode: Mode::NonReactive,
            seed: 0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.clip <= 0.0 {
            return bad("clip must be positive");
        }
        if self.batch_size == 0 || self.steps_per_wave == 0 {
            return bad("batch_size and steps_per_wave must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub tokens: Vec<f64>,
    pub mask: Vec<bool>,
    /// Sampled action on the unit square, already clamped inside it.
    pub action: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scenario: usize,
    pub total_reward: f64,
    pub arrived: bool,
}

/// Steps in scenario-index order, one contiguous segment per environment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<RolloutStep>,
    /// `(start, len, bootstrap value)` per environment.
    pub segments: Vec<(usize, usize, f64)>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn advantages(&self, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let mut adv = Vec::with_capacity(self.len());
        let mut ret = Vec::with_capacity(self.len());
        for &(start, len, boot) in &self.segments {
            let seg = &self.steps[start..start + len];
            let r: Vec<f64> = seg.iter().map(|s| s.reward).collect();
            let v: Vec<f64> = seg.iter().map(|s| s.value).collect();
            let d: Vec<bool> = seg.iter().map(|s| s.done).collect();
            let (a, rt) = gae(&r, &v, &d, boot, gamma, lambda);
            adv.extend(a);
            ret.extend(rt);
        }
        (adv, ret)
    }
}

/// A persistent training environment: one scenario whose episodes restart
/// whenever they finish.
pub struct Env<'a> {
    pub index: usize,
    scenario: &'a Scenario,
    cache: StaticCache,
    sim: Simulator<'a>,
    rng: ChaCha8Rng,
    episode_reward: f64,
    mode: Mode,
    sim_cfg: SimConfig,
}

impl<'a> Env<'a> {
    pub fn new(
        index: usize,
        scenario: &'a Scenario,
        policy: &Policy,
        mode: Mode,
        sim_cfg: SimConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        Self {
            index,
            scenario,
            cache: preprocess_static(scenario, &policy.tokenizer),
            sim: Simulator::reset(scenario, mode, sim_cfg, None),
            rng,
            episode_reward: 0.0,
            mode,
            sim_cfg,
        }
    }

    fn collect(
        &mut self,
        policy: &Policy,
        n: usize,
    ) -> Result<(Vec<RolloutStep>, f64, Vec<EpisodeSummary>), TrainingError> {
        let mut steps = Vec::with_capacity(n);
        let mut episodes = Vec::new();
        let eval = |obs: &crate::observation::Observation| {
            let input = TokenInput {
                rows: &obs.tokens,
                mask: &obs.mask,
            };
            forward(&policy.params, &policy.model, &[input], HeadMode::Rl).map(|mut o| o.remove(0))
        };
        for _ in 0..n {
            let obs = self.sim.observe(&self.cache, &policy.tokenizer);
            let out = eval(&obs)?;
            let dist = out.beta.expect("policy head");
            let raw = dist.sample(&mut self.rng);
            let u = [clamp_unit(raw[0]), clamp_unit(raw[1])];
            let log_prob = dist.log_prob(&u)?;
            let [acc, steer] = map_action(u, &policy.ranges);
            let reward = self
                .sim
                .step(EgoAction::Bicycle(BicycleAction::new(acc, steer)))
                .expect("environment resets before it finishes")
                .total;
            self.episode_reward += reward;
            let done = self.sim.done();
            steps.push(RolloutStep {
                tokens: obs.tokens,
                mask: obs.mask,
                action: u,
                log_prob,
                value: out.value.expect("value head"),
                reward,
                done,
                alpha: [dist.alpha[0], dist.alpha[1]],
                beta: [dist.beta[0], dist.beta[1]],
            });
            if done {
                episodes.push(EpisodeSummary {
                    scenario: self.index,
                    total_reward: self.episode_reward,
                    arrived: self.sim.state().arrival,
                });
                self.episode_reward = 0.0;
                self.sim = Simulator::reset(self.scenario, self.mode, self.sim_cfg, None);
            }
        }
        let obs = self.sim.observe(&self.cache, &policy.tokenizer);
        let boot = eval(&obs)?.value.expect("value head");
        Ok((steps, boot, episodes))
    }
}

/// `steps_per_wave` sampled steps from every environment, concatenated in
/// environment order.
pub fn collect_rollouts(
    policy: &Policy,
    envs: &mut [Env],
    steps_per_wave: usize,
) -> Result<RolloutBuffer, TrainingError> {
    let parts = envs
        .par_iter_mut()
        .map(|e| e.collect(policy, steps_per_wave))
        .collect::<Result<Vec<_>, _>>()?;
    let mut buf = RolloutBuffer::default();
    for (steps, boot, episodes) in parts {
        buf.segments.push((buf.steps.len(), steps.len(), boot));
        buf.steps.extend(steps);
        buf.episodes.extend(episodes);
    }
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoLoss {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Reference evaluation of the clipped objective from plain numbers.
/// `entropy` holds per-sample policy entropies.
pub fn ppo_loss_values(
    ratio: &[f64],
    adv: &[f64],
    values: &[f64],
    returns: &[f64],
    entropy: &[f64],
    cfg: &PPOConfig,
) -> PpoLoss {
    let n = ratio.len() as f64;
    let policy = -ratio
        .iter()
        .zip(adv)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a))
        .sum::<f64>()
        / n;
    let value = values.iter().zip(returns).map(|(v, r)| (v - r).powi(2)).sum::<f64>() / n;
    let ent = -entropy.iter().sum::<f64>() / n;
    PpoLoss {
        policy,
        value,
        entropy: ent,
        total: policy + cfg.w_ent * ent + cfg.w_value * value,
    }
}

/// Samples per tape when accumulating a minibatch gradient.
const GRAD_CHUNK: usize = 64;

/// Gradient of the minibatch loss, accumulated chunk by chunk so each tape
/// stays small. Returns the loss components averaged over the minibatch.
fn minibatch_grad(
    policy: &Policy,
    buf: &RolloutBuffer,
    idx: &[usize],
    adv: &[f64],
    returns: &[f64],
    cfg: &PPOConfig,
) -> Result<(Gradients, PpoLoss), TrainingError> {
    let mut grads = Gradients::zeros_like(&policy.params);
    let mut parts = PpoLoss::default();
    let inv_n = 1.0 / idx.len() as f64;
    for (c, chunk) in idx.chunks(GRAD_CHUNK).enumerate() {
        let offset = c * GRAD_CHUNK;
        let m = chunk.len();
        let mut tape = Tape::with_params(&policy.params);
        let batch: Vec<TokenInput> = chunk
            .iter()
            .map(|&i| TokenInput {
                rows: &buf.steps[i].tokens,
                mask: &buf.steps[i].mask,
            })
            .collect();
        let latent = encode(&mut tape, &policy.model.encoder, &batch)?;
        let hv = heads_forward(&mut tape, &policy.model.heads, latent, HeadMode::Rl)?;
        let (alpha, beta, value) = (
            hv.alpha.expect("alpha"),
            hv.beta.expect("beta"),
            hv.value.expect("value"),
        );
        let x = Tensor::from_vec(m, 2, chunk.iter().flat_map(|&i| buf.steps[i].action).collect());
        let lp = tape_log_prob(&mut tape, alpha, beta, &x);
        let old = tape.input(Tensor::from_vec(
            m,
            1,
            chunk.iter().map(|&i| buf.steps[i].log_prob).collect(),
        ));
        let a = tape.input(Tensor::from_vec(m, 1, adv[offset..offset + m].to_vec()));
        let rt = tape.input(Tensor::from_vec(m, 1, returns[offset..offset + m].to_vec()));
        let diff = tape.sub(lp, old);
        let ratio = tape.exp(diff);
        let s1 = tape.mul(ratio, a);
        let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let s2 = tape.mul(clipped, a);
        let surr = tape.minimum(s1, s2);
        let surr = tape.sum(surr);
        let pol = tape.scale(surr, -inv_n);
        let err = tape.sub(value, rt);
        let sq = tape.square(err);
        let sq = tape.sum(sq);
        let val = tape.scale(sq, inv_n);
        let ent = tape_entropy(&mut tape, alpha, beta);
        let ent = tape.sum(ent);
        let ent = tape.scale(ent, -inv_n);
        let wv = tape.scale(val, cfg.w_value);
        let we = tape.scale(ent, cfg.w_ent);
        let t1 = tape.add(pol, wv);
        let loss = tape.add(t1, we);
        parts.policy += tape.value(pol).item();
        parts.value += tape.value(val).item();
        parts.entropy += tape.value(ent).item();
        parts.total += tape.value(loss).item();
        grads.add_assign(&tape.backward(loss)?);
    }
    Ok((grads, parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveLog {
    pub wave: usize,
    pub mean_step_reward: f64,
    /// Mean total reward of the episodes that finished during the wave;
    /// NaN when none did.
    pub mean_episode_reward: f64,
    pub episodes: usize,
    pub arrival_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PpoOutcome {
    pub policy: Policy,
    pub curve: Vec<WaveLog>,
}

/// Zero mean, unit standard deviation (population), as used per minibatch.
pub fn normalize_advantages(a: &[f64]) -> Vec<f64> {
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.len() as f64;
    a.iter().map(|x| (x - mean) / (var.sqrt() + 1e-8)).collect()
}

/// Alternating rollout waves and clipped-objective updates. Any head
/// weights in `init` are kept; the policy always acts through the RL head.
pub fn train_ppo(
    scenarios: &[Scenario],
    init: Policy,
    sim_cfg: SimConfig,
    cfg: &PPOConfig,
    mut on_wave: impl FnMut(&WaveLog),
) -> Result<PpoOutcome, TrainingError> {
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(TrainingError::NoScenarios);
    }
    let mut policy = Policy {
        kind: PolicyKind::Rl,
        ..init
    };
    let per_wave = scenarios.len() * cfg.steps_per_wave;
    let waves = cfg.total_timesteps / per_wave;
    let mut envs: Vec<Env> = scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| Env::new(i, s, &policy, cfg.mode, sim_cfg, cfg.seed))
        .collect();
    let adam = AdamConfig {
        lr: cfg.lr,
        max_grad_norm: Some(cfg.max_grad_norm),
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&policy.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f99);
    let mut curve = Vec::with_capacity(waves);
    for wave in 0..waves {
        let buf = collect_rollouts(&policy, &mut envs, cfg.steps_per_wave)?;
        let (adv, returns) = buf.advantages(cfg.gamma, cfg.lambda);
        let n = buf.len();
        let n_mb = n.div_ceil(cfg.batch_size);
        let mut order: Vec<usize> = (0..n).collect();
        let mut sums = PpoLoss::default();
        let mut norm_sum = 0.0;
        let mut updates = 0;
        for _ in 0..cfg.epochs_per_wave {
            order.shuffle(&mut rng);
            for k in 0..n_mb {
                let idx = &order[k * n / n_mb..(k + 1) * n / n_mb];
                let a = normalize_advantages(&idx.iter().map(|&i| adv[i]).collect::<Vec<_>>());
                let r: Vec<f64> = idx.iter().map(|&i| returns[i]).collect();
                let (grads, parts) = minibatch_grad(&policy, &buf, idx, &a, &r, cfg)?;
                norm_sum += adam_step(&mut policy.params, &grads, &mut state, &adam);
                sums.policy += parts.policy;
                sums.value += parts.value;
                sums.entropy += parts.entropy;
                updates += 1;
            }
        }
        let u = updates.max(1) as f64;
        let finished = buf.episodes.len();
        let log = WaveLog {
            wave,
            mean_step_reward: buf.steps.iter().map(|s| s.reward).sum::<f64>() / n as f64,
            mean_episode_reward: if finished > 0 {
                buf.episodes.iter().map(|e| e.total_reward).sum::<f64>() / finished as f64
            } else {
                f64::NAN
            },
            episodes: finished,
            arrival_rate: if finished > 0 {
                100.0 * buf.episodes.iter().filter(|e| e.arrived).count() as f64 / finished as f64
            } else {
                f64::NAN
            },
            policy_loss: sums.policy / u,
            value_loss: sums.value / u,
            entropy_loss: sums.entropy / u,
            grad_norm: norm_sum / u,
        };
        on_wave(&log);
        curve.push(log);
    }
    Ok(PpoOutcome { policy, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rule_examples() {
        let cfg = PPOConfig::default();
        let l = ppo_loss_values(&[1.0, 1.0], &[0.5, -1.5], &[0.0; 2], &[0.0; 2], &[0.0; 2], &cfg);
        assert_eq!(l.policy, 0.5);
        let l = ppo_loss_values(&[1.5], &[1.0], &[0.0], &[0.0], &[0.0], &cfg);
        assert!((l.policy + 1.2).abs() < 1e-15);
        let l = ppo_loss_values(&[0.3, 2.0], &[0.0, 0.0], &[0.0; 2], &[0.0; 2], &[0.0; 2], &cfg);
        assert_eq!(l.policy, 0.0);
    }

    fn step(reward: f64, value: f64, done: bool) -> RolloutStep {
        RolloutStep {
            tokens: Vec::new(),
            mask: Vec::new(),
            action: [0.5, 0.5],
            log_prob: 0.0,
            value,
            reward,
            done,
            alpha: [2.0; 2],
            beta: [2.0; 2],
        }
    }

    #[test]
    fn advantages_restart_at_each_segment() {
        let rewards = [-1.0, -2.5, 0.0, -0.5, -3.0];
        let values = [-4.0, -3.0, -1.0, -2.0, -6.0];
        let dones = [false, true, false, false, false];
        let buf = RolloutBuffer {
            steps: (0..5).map(|i| step(rewards[i], values[i], dones[i])).collect(),
            segments: vec![(0, 3, -2.0), (3, 2, -1.0)],
            episodes: Vec::new(),
        };
        let (adv, ret) = buf.advantages(0.99, 0.9);
        let (a0, r0) = gae(&rewards[..3], &values[..3], &dones[..3], -2.0, 0.99, 0.9);
        let (a1, r1) = gae(&rewards[3..], &values[3..], &dones[3..], -1.0, 0.99, 0.9);
        assert_eq!(adv, [a0, a1].concat());
        assert_eq!(ret, [r0, r1].concat());
    }

    #[test]
    fn value_and_entropy_terms() {
        let cfg = PPOConfig::default();
        let l = ppo_loss_values(&[1.0], &[0.0], &[1.0], &[3.0], &[-0.5], &cfg);
        assert_eq!(l.value, 4.0);
        assert_eq!(l.entropy, 0.5);
        assert!((l.total - (0.5 + 0.04)).abs() < 1e-15);
    }
}
