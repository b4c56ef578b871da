use chauffeur::observation::TokenizerConfig;
use chauffeur::scenario::{generate_scenario, Family, Scenario, ScenarioFamilySpec};
use chauffeur::simulator::{Mode, SimConfig};
use chauffeur::training::{
    build_il_dataset, collect_rollouts, gae, il_loss, normalize_advantages, ppo_loss_values, train_il, train_ppo,
    ActionSpace, Env, ILConfig, PPOConfig, Policy, PolicyKind,
};
use chauffeur_neuro::{BetaParams, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario(family: Family, density: usize, seed: u64) -> Scenario {
    generate_scenario(&ScenarioFamilySpec {
        family,
        traffic_density: density,
        curvature: 0.03,
        seed,
    })
    .unwrap()
}

fn policy(kind: PolicyKind) -> Policy {
    Policy::fresh(ModelConfig::default(), TokenizerConfig::default(), kind).unwrap()
}

/// Discounted return from `t` to the end of its episode, plus the
/// discounted bootstrap when the data runs out mid-episode.
fn brute_return(r: &[f64], d: &[bool], boot: f64, gamma: f64, t: usize) -> f64 {
    let mut g = 0.0;
    let mut disc = 1.0;
    for k in t..r.len() {
        g += disc * r[k];
        if d[k] {
            return g;
        }
        disc *= gamma;
    }
    g + disc * boot
}

#[test]
fn gae_with_unit_lambda_is_the_discounted_return() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let boot = rng.random_range(-5.0..5.0);
        let gamma = rng.random_range(0.5..1.0);
        let (adv, ret) = gae(&r, &v, &d, boot, gamma, 1.0);
        for t in 0..n {
            let g = brute_return(&r, &d, boot, gamma, t);
            assert!((adv[t] - (g - v[t])).abs() < 1e-10);
            assert!((ret[t] - g).abs() < 1e-10);
        }
    }
}

#[test]
fn policy_term_ignores_value_offsets_and_advantage_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = PPOConfig::default();
    for _ in 0..100 {
        let n = 40;
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d = vec![false; n];
        let boot = rng.random_range(-5.0..5.0);
        let ratio: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let c = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        // without discounting a value offset cancels inside every TD error
        let (a0, _) = gae(&r, &v, &d, boot, 1.0, 0.9);
        let (a1, _) = gae(&r, &shifted, &d, boot + c, 1.0, 0.9);
        let zeros = vec![0.0; n];
        let p0 = ppo_loss_values(&ratio, &normalize_advantages(&a0), &zeros, &zeros, &zeros, &cfg).policy;
        let p1 = ppo_loss_values(&ratio, &normalize_advantages(&a1), &zeros, &zeros, &zeros, &cfg).policy;
        assert!((p0 - p1).abs() < 1e-9);
        let affine: Vec<f64> = a0.iter().map(|a| 3.0 * a + c).collect();
        let p2 = ppo_loss_values(&ratio, &normalize_advantages(&affine), &zeros, &zeros, &zeros, &cfg).policy;
        assert!((p0 - p2).abs() < 1e-9);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let s = [scenario(Family::Straight, 2, 3)];
    let init = policy(PolicyKind::IlBicycle);
    let ds = build_il_dataset(&s, &init.tokenizer, ActionSpace::Bicycle);
    let cfg = ILConfig {
        lr: 0.0,
        epochs: 1,
        ..ILConfig::default()
    };
    let out = train_il(&ds, init.clone(), &cfg).unwrap();
    assert_eq!(out.policy.params, init.params);
}

#[test]
fn il_curve_length_and_reproducibility() {
    let s = [scenario(Family::Curve, 2, 4), scenario(Family::Parking, 3, 5)];
    for kind in [PolicyKind::IlBicycle, PolicyKind::IlWaypoint] {
        let init = policy(kind);
        let ds = build_il_dataset(&s, &init.tokenizer, kind.action_space());
        assert_eq!(ds.len(), s.iter().map(|x| x.horizon_steps - 1).sum::<usize>());
        let cfg = ILConfig {
            epochs: 2,
            batch_size: 16,
            ..ILConfig::default()
        };
        let a = train_il(&ds, init.clone(), &cfg).unwrap();
        assert_eq!(a.curve.len(), 2 * ds.len().div_ceil(16));
        let b = train_il(&ds, init, &cfg).unwrap();
        assert_eq!(a.policy.params, b.policy.params);
        assert_eq!(a.curve, b.curve);
    }
}

#[test]
fn empty_dataset_is_rejected() {
    assert!(train_il(&[], policy(PolicyKind::IlBicycle), &ILConfig::default()).is_err());
}

#[test]
fn rollouts_are_reproducible_and_self_consistent() {
    let scenarios = [scenario(Family::Straight, 0, 6), scenario(Family::Curve, 2, 7)];
    let p = policy(PolicyKind::Rl);
    let run = || {
        let mut envs: Vec<Env> = scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| Env::new(i, s, &p, Mode::NonReactive, SimConfig::default(), 42))
            .collect();
        collect_rollouts(&p, &mut envs, 120).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(a.len(), 240);
    assert!(a.steps.iter().any(|s| s.done), "episodes restart inside a wave");
    for s in &a.steps {
        assert!(s.action.iter().all(|&u| u > 0.0 && u < 1.0));
        let d = BetaParams {
            alpha: s.alpha.to_vec(),
            beta: s.beta.to_vec(),
        };
        assert!((d.log_prob(&s.action).unwrap() - s.log_prob).abs() < 1e-12);
    }
}

fn small_ppo(total: usize) -> PPOConfig {
    PPOConfig {
        total_timesteps: total,
        steps_per_wave: 16,
        batch_size: 12,
        ..PPOConfig::default()
    }
}

#[test]
fn ppo_without_steps_returns_the_initial_weights() {
    let scenarios = [scenario(Family::Straight, 1, 8)];
    let init = policy(PolicyKind::Rl);
    let out = train_ppo(&scenarios, init.clone(), SimConfig::default(), &small_ppo(0), |_| {}).unwrap();
    assert_eq!(out.policy.params, init.params);
    assert!(out.curve.is_empty());
}

#[test]
fn ppo_curve_length_and_reproducibility() {
    let scenarios = [scenario(Family::Straight, 1, 8), scenario(Family::Curve, 1, 9)];
    let init = policy(PolicyKind::Rl);
    let cfg = small_ppo(100);
    let mut seen = 0;
    let a = train_ppo(&scenarios, init.clone(), SimConfig::default(), &cfg, |_| seen += 1).unwrap();
    assert_eq!(a.curve.len(), 100 / (2 * 16));
    assert_eq!(seen, a.curve.len());
    assert_ne!(a.policy.params, init.params);
    assert!(a
        .curve
        .iter()
        .all(|w| w.grad_norm.is_finite() && w.policy_loss.is_finite()));
    let b = train_ppo(&scenarios, init, SimConfig::default(), &cfg, |_| {}).unwrap();
    assert_eq!(a.policy.params, b.policy.params);
}

#[test]
fn ppo_config_is_validated() {
    let scenarios = [scenario(Family::Straight, 1, 8)];
    for bad in [
        PPOConfig {
            gamma: 0.0,
            ..small_ppo(32)
        },
        PPOConfig {
            lambda: 1.5,
            ..small_ppo(32)
        },
        PPOConfig {
            clip: 0.0,
            ..small_ppo(32)
        },
    ] {
        assert!(train_ppo(&scenarios, policy(PolicyKind::Rl), SimConfig::default(), &bad, |_| {}).is_err());
    }
}

proptest! {
    #[test]
    fn il_loss_is_zero_only_on_exact_match(
        pred in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..8),
        noise in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 8),
    ) {
        let cfg = ILConfig::default();
        prop_assert_eq!(il_loss(&pred, &pred, &cfg, ActionSpace::Bicycle).total, 0.0);
        let gt: Vec<Vec<f64>> = pred.iter().zip(&noise).map(|(p, e)| vec![p[0] + e[0], p[1] + e[1]]).collect();
        let l = il_loss(&pred, &gt, &cfg, ActionSpace::Bicycle).total;
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, pred == gt);
    }
}
