use chauffeur_neuro::beta::{tape_entropy, tape_log_prob};
use chauffeur_neuro::model::{encode, heads_forward, init_params};
use chauffeur_neuro::{
    EncoderConfig, HeadConfig, HeadMode, ModelConfig, ParamId, ParamStore, Tape, Tensor, TokenInput,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ff_dim: 12,
            token_dim: 7,
            input_scale: vec![0.1, 0.1, 0.25, 0.25, 1.0, 0.1, 1.0],
            ln_eps: 1e-5,
        },
        heads: HeadConfig {
            il_hidden: 6,
            rl_hidden: 5,
            ..HeadConfig::default()
        },
        init_seed: 3,
        // larger than the training init so every path carries signal
        init_std: 0.4,
    }
}

struct Batch {
    rows: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
    actions: Tensor,
    targets_bi: Tensor,
    targets_wp: Tensor,
}

fn batch(rng: &mut ChaCha8Rng) -> Batch {
    let mut rows = Vec::new();
    let mut masks = Vec::new();
    for n in [4usize, 6] {
        rows.push((0..n * 7).map(|_| rng.random_range(-10.0..10.0)).collect());
        let mut m = vec![true; n];
        m[n - 1] = false;
        masks.push(m);
    }
    let actions = Tensor::from_vec(2, 2, (0..4).map(|_| rng.random_range(0.1..0.9)).collect());
    let targets_bi = Tensor::from_vec(2, 2, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
    let targets_wp = Tensor::from_vec(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
    Batch {
        rows,
        masks,
        actions,
        targets_bi,
        targets_wp,
    }
}

/// Scalar loss touching every head, plus the tape it was built on.
fn loss_value(params: &ParamStore, cfg: &ModelConfig, b: &Batch) -> (f64, Vec<Tensor>) {
    let inputs: Vec<TokenInput> = b
        .rows
        .iter()
        .zip(&b.masks)
        .map(|(r, m)| TokenInput { rows: r, mask: m })
        .collect();
    let mut tape = Tape::with_params(params);
    let latent = encode(&mut tape, &cfg.encoder, &inputs).unwrap();
    let bi = heads_forward(&mut tape, &cfg.heads, latent, HeadMode::IlBicycle).unwrap();
    let wp = heads_forward(&mut tape, &cfg.heads, latent, HeadMode::IlWaypoint).unwrap();
    let rl = heads_forward(&mut tape, &cfg.heads, latent, HeadMode::Rl).unwrap();

    let tb = tape.input(b.targets_bi.clone());
    let d = tape.sub(bi.action.unwrap(), tb);
    let d = tape.square(d);
    let l_bi = tape.mean(d);
    let tw = tape.input(b.targets_wp.clone());
    let d = tape.sub(wp.action.unwrap(), tw);
    let d = tape.square(d);
    let l_wp = tape.mean(d);
    let (alpha, beta) = (rl.alpha.unwrap(), rl.beta.unwrap());
    let lp = tape_log_prob(&mut tape, alpha, beta, &b.actions);
    let l_lp = tape.mean(lp);
    let ent = tape_entropy(&mut tape, alpha, beta);
    let l_ent = tape.mean(ent);
    let v = tape.square(rl.value.unwrap());
    let l_v = tape.mean(v);

    let s = tape.add(l_bi, l_wp);
    let s = tape.sub(s, l_lp);
    let e = tape.scale(l_ent, 0.3);
    let s = tape.sub(s, e);
    let loss = tape.add(s, l_v);
    let grads = tape.backward(loss).unwrap();
    (tape.value(loss).item(), grads.tensors)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let cfg = small_config();
    let mut params = init_params(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = batch(&mut rng);
    let (_, analytic) = loss_value(&params, &cfg, &b);
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for i in 0..params.len() {
        let name = params.name(ParamId(i)).to_string();
        for j in 0..params.get(ParamId(i)).len() {
            let orig = params.get(ParamId(i)).data()[j];
            params.get_mut(ParamId(i)).data_mut()[j] = orig + h;
            let (up, _) = loss_value(&params, &cfg, &b);
            params.get_mut(ParamId(i)).data_mut()[j] = orig - h;
            let (down, _) = loss_value(&params, &cfg, &b);
            params.get_mut(ParamId(i)).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{j}] analytic {a} numeric {numeric}"));
            }
            checked += 1;
        }
    }
    assert!(checked > 500);
    assert!(worst.0 < 1e-4, "worst relative error {} at {}", worst.0, worst.1);
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = small_config();
    let params = init_params(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = batch(&mut rng);
    let (_, g) = loss_value(&params, &cfg, &b);
    for (i, t) in g.iter().enumerate() {
        assert!(t.sum_sq() > 0.0, "{} has zero gradient", params.name(ParamId(i)));
    }
}
