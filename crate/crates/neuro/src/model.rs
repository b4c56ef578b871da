//! Scene encoder and policy heads.
//!
//! Each token row is embedded by a single affine map, a learnable fusion
//! token is prepended, and a pre-norm transformer encoder mixes the set. The
//! fusion token's final state is the scene latent. There are no positional
//! encodings, so the latent is invariant to the order of the valid rows.
//!
//! Padding rows are never read: only rows whose mask bit is set enter the
//! attention, which is exactly equivalent to giving padding keys a logit of
//! −∞.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beta::BetaParams;
use crate::error::NeuroError;
use crate::params::{truncated_normal, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub token_dim: usize,
    /// Fixed per-attribute multipliers applied to raw token rows before the
    /// embedding, so metre-scale inputs start near unit scale.
    pub input_scale: Vec<f64>,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 128,
            token_dim: 7,
            input_scale: vec![0.1, 0.1, 0.25, 0.25, 1.0, 0.1, 1.0],
            ln_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden width of the one-hidden-layer imitation heads.
    pub il_hidden: usize,
    /// Hidden width of both layers of the policy and value MLPs.
    pub rl_hidden: usize,
    pub action_dims_bicycle: usize,
    pub action_dims_waypoint: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            il_hidden: 256,
            rl_hidden: 64,
            action_dims_bicycle: 2,
            action_dims_waypoint: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub init_seed: u64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            heads: HeadConfig::default(),
            init_seed: 0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NeuroError> {
        let e = &self.encoder;
        if e.heads == 0 || !e.model_dim.is_multiple_of(e.heads) {
            return Err(NeuroError::ShapeMismatch(format!(
                "model_dim {} not divisible by heads {}",
                e.model_dim, e.heads
            )));
        }
        if e.input_scale.len() != e.token_dim {
            return Err(NeuroError::ShapeMismatch(format!(
                "input_scale has {} entries for token_dim {}",
                e.input_scale.len(),
                e.token_dim
            )));
        }
        if e.model_dim == 0 || e.ff_dim == 0 || self.heads.il_hidden == 0 || self.heads.rl_hidden == 0 {
            return Err(NeuroError::ShapeMismatch("zero-width layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    IlBicycle,
    IlWaypoint,
    Rl,
}

/// One observation: `mask.len()` rows of `token_dim` values, row-major.
#[derive(Debug, Clone, Copy)]
pub struct TokenInput<'a> {
    pub rows: &'a [f64],
    pub mask: &'a [bool],
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub action: Option<Var>,
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
    pub value: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub action: Option<Vec<f64>>,
    pub beta: Option<BetaParams>,
    pub value: Option<f64>,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn param_layout(cfg: &ModelConfig) -> BTreeMap<String, (usize, usize, Init)> {
    let e = &cfg.encoder;
    let h = &cfg.heads;
    let d = e.model_dim;
    let mut m = BTreeMap::new();
    let linear = |m: &mut BTreeMap<_, _>, prefix: String, fan_in: usize, fan_out: usize| {
        m.insert(format!("{prefix}.weight"), (fan_in, fan_out, Init::Normal));
        m.insert(format!("{prefix}.bias"), (1, fan_out, Init::Zeros));
    };
    let norm = |m: &mut BTreeMap<_, _>, prefix: String| {
        m.insert(format!("{prefix}.gamma"), (1, d, Init::Ones));
        m.insert(format!("{prefix}.beta"), (1, d, Init::Zeros));
    };
    linear(&mut m, "encoder.embed".into(), e.token_dim, d);
    m.insert("encoder.fusion".into(), (1, d, Init::Normal));
    for l in 0..e.layers {
        let p = format!("encoder.layer{l}");
        norm(&mut m, format!("{p}.ln1"));
        for proj in ["q", "k", "v", "o"] {
            linear(&mut m, format!("{p}.attn.{proj}"), d, d);
        }
        norm(&mut m, format!("{p}.ln2"));
        linear(&mut m, format!("{p}.ff1"), d, e.ff_dim);
        linear(&mut m, format!("{p}.ff2"), e.ff_dim, d);
    }
    norm(&mut m, "encoder.ln_final".into());
    linear(&mut m, "head.il_bicycle.fc1".into(), d, h.il_hidden);
    linear(&mut m, "head.il_bicycle.fc2".into(), h.il_hidden, h.action_dims_bicycle);
    linear(&mut m, "head.il_waypoint.fc1".into(), d, h.il_hidden);
    linear(
        &mut m,
        "head.il_waypoint.fc2".into(),
        h.il_hidden,
        h.action_dims_waypoint,
    );
    linear(&mut m, "head.policy.fc1".into(), d, h.rl_hidden);
    linear(&mut m, "head.policy.fc2".into(), h.rl_hidden, h.rl_hidden);
    linear(&mut m, "head.policy.fc3".into(), h.rl_hidden, 2 * h.action_dims_bicycle);
    linear(&mut m, "head.value.fc1".into(), d, h.rl_hidden);
    linear(&mut m, "head.value.fc2".into(), h.rl_hidden, h.rl_hidden);
    linear(&mut m, "head.value.fc3".into(), h.rl_hidden, 1);
    m
}

/// Fresh parameters: truncated-normal weights, zero biases, unit norm gains.
/// Values are drawn in sorted-name order from a seeded stream.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore, NeuroError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut out = BTreeMap::new();
    for (name, (rows, cols, init)) in param_layout(cfg) {
        let t = match init {
            Init::Normal => truncated_normal(&mut rng, rows, cols, cfg.init_std),
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::filled(rows, cols, 1.0),
        };
        out.insert(name, t);
    }
    Ok(ParamStore::from_map(out))
}

fn linear(tape: &mut Tape, x: Var, prefix: &str) -> Result<Var, NeuroError> {
    let w = tape.param_by_name(&format!("{prefix}.weight"))?;
    let b = tape.param_by_name(&format!("{prefix}.bias"))?;
    Ok(tape.affine(x, w, b))
}

fn norm(tape: &mut Tape, x: Var, prefix: &str, eps: f64) -> Result<Var, NeuroError> {
    let g = tape.param_by_name(&format!("{prefix}.gamma"))?;
    let b = tape.param_by_name(&format!("{prefix}.beta"))?;
    let n = tape.layer_norm_rows(x, eps);
    let s = tape.mul_row(n, g);
    Ok(tape.add_row(s, b))
}

/// Latent of a single observation, `1 × model_dim`.
pub fn encode_one(tape: &mut Tape, cfg: &EncoderConfig, input: TokenInput) -> Result<Var, NeuroError> {
    let td = cfg.token_dim;
    if input.rows.len() != input.mask.len() * td {
        return Err(NeuroError::ShapeMismatch(format!(
            "{} token values for {} rows of width {td}",
            input.rows.len(),
            input.mask.len()
        )));
    }
    let mut valid = Vec::new();
    for (r, &keep) in input.mask.iter().enumerate() {
        if keep {
            let row = &input.rows[r * td..(r + 1) * td];
            valid.extend(row.iter().zip(&cfg.input_scale).map(|(v, s)| v * s));
        }
    }
    let n_valid = valid.len() / td;
    let fusion = tape.param_by_name("encoder.fusion")?;
    let mut h = if n_valid > 0 {
        let x = tape.input(Tensor::from_vec(n_valid, td, valid));
        let emb = linear(tape, x, "encoder.embed")?;
        tape.concat_rows(&[fusion, emb])
    } else {
        fusion
    };
    let d = cfg.model_dim;
    let dh = d / cfg.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let p = format!("encoder.layer{l}");
        // Only the fusion row is read after the last layer.
        let last = l + 1 == cfg.layers;
        let a = norm(tape, h, &format!("{p}.ln1"), cfg.ln_eps)?;
        let a_query = if last { tape.slice_rows(a, 0, 1) } else { a };
        let q = linear(tape, a_query, &format!("{p}.attn.q"))?;
        let k = linear(tape, a, &format!("{p}.attn.k"))?;
        let v = linear(tape, a, &format!("{p}.attn.v"))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let attn_out = linear(tape, cat, &format!("{p}.attn.o"))?;
        let h_res = if last { tape.slice_rows(h, 0, 1) } else { h };
        let h1 = tape.add(h_res, attn_out);
        let f = norm(tape, h1, &format!("{p}.ln2"), cfg.ln_eps)?;
        let f = linear(tape, f, &format!("{p}.ff1"))?;
        let f = tape.gelu(f);
        let f = linear(tape, f, &format!("{p}.ff2"))?;
        h = tape.add(h1, f);
    }
    let fused = if tape.shape(h).0 > 1 {
        tape.slice_rows(h, 0, 1)
    } else {
        h
    };
    norm(tape, fused, "encoder.ln_final", cfg.ln_eps)
}

/// Latents for a batch, `B × model_dim`.
pub fn encode(tape: &mut Tape, cfg: &EncoderConfig, batch: &[TokenInput]) -> Result<Var, NeuroError> {
    if batch.is_empty() {
        return Err(NeuroError::ShapeMismatch("empty observation batch".into()));
    }
    let rows = batch
        .iter()
        .map(|b| encode_one(tape, cfg, *b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat_rows(&rows)
    })
}

fn mlp2(tape: &mut Tape, x: Var, prefix: &str) -> Result<Var, NeuroError> {
    let h = linear(tape, x, &format!("{prefix}.fc1"))?;
    let h = tape.tanh(h);
    let h = linear(tape, h, &format!("{prefix}.fc2"))?;
    let h = tape.tanh(h);
    linear(tape, h, &format!("{prefix}.fc3"))
}

pub fn heads_forward(tape: &mut Tape, cfg: &HeadConfig, latent: Var, mode: HeadMode) -> Result<HeadVars, NeuroError> {
    let il = |tape: &mut Tape, prefix: &str| -> Result<Var, NeuroError> {
        let h = linear(tape, latent, &format!("{prefix}.fc1"))?;
        let h = tape.gelu(h);
        linear(tape, h, &format!("{prefix}.fc2"))
    };
    Ok(match mode {
        HeadMode::IlBicycle => HeadVars {
            action: Some(il(tape, "head.il_bicycle")?),
            alpha: None,
            beta: None,
            value: None,
        },
        HeadMode::IlWaypoint => HeadVars {
            action: Some(il(tape, "head.il_waypoint")?),
            alpha: None,
            beta: None,
            value: None,
        },
        HeadMode::Rl => {
            let dims = cfg.action_dims_bicycle;
            let raw = mlp2(tape, latent, "head.policy")?;
            let ra = tape.slice_cols(raw, 0, dims);
            let rb = tape.slice_cols(raw, dims, dims);
            let sa = tape.softplus(ra);
            let sb = tape.softplus(rb);
            let alpha = tape.add_scalar(sa, 1.0);
            let beta = tape.add_scalar(sb, 1.0);
            let value = mlp2(tape, latent, "head.value")?;
            HeadVars {
                action: None,
                alpha: Some(alpha),
                beta: Some(beta),
                value: Some(value),
            }
        }
    })
}

/// Gradient-free forward pass returning plain values per sample.
pub fn forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[TokenInput],
    mode: HeadMode,
) -> Result<Vec<PolicyOutput>, NeuroError> {
    let mut tape = Tape::with_params(params);
    let latent = encode(&mut tape, &cfg.encoder, batch)?;
    let hv = heads_forward(&mut tape, &cfg.heads, latent, mode)?;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        out.push(PolicyOutput {
            action: hv.action.map(|v| tape.value(v).row(i).to_vec()),
            beta: match (hv.alpha, hv.beta) {
                (Some(a), Some(b)) => Some(BetaParams {
                    alpha: tape.value(a).row(i).to_vec(),
                    beta: tape.value(b).row(i).to_vec(),
                }),
                _ => None,
            },
            value: hv.value.map(|v| tape.value(v).get(i, 0)),
        });
    }
    Ok(out)
}

/// Latent rows without running any head.
pub fn latents(params: &ParamStore, cfg: &EncoderConfig, batch: &[TokenInput]) -> Result<Tensor, NeuroError> {
    let mut tape = Tape::with_params(params);
    let latent = encode(&mut tape, cfg, batch)?;
    Ok(tape.value(latent).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::softplus;

    fn obs(rows: &[[f64; 7]], pad: usize) -> (Vec<f64>, Vec<bool>) {
        let mut data: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut mask = vec![true; rows.len()];
        data.resize(data.len() + 7 * pad, 0.0);
        mask.resize(rows.len() + pad, false);
        (data, mask)
    }

    fn sample_rows() -> Vec<[f64; 7]> {
        vec![
            [0.0, 0.0, 2.0, 4.5, 0.0, 5.0, 3.0],
            [10.0, 0.5, 20.0, 2.0, 0.02, 0.0, 0.0],
            [5.0, 3.5, 8.0, 0.5, 0.0, 1.0, 1.0],
            [-4.0, -3.5, 8.0, 0.5, 0.0, 2.0, 1.0],
            [18.0, 3.0, 2.0, 4.8, 3.1, 7.5, 2.0],
        ]
    }

    #[test]
    fn padding_rows_do_not_change_the_latent() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        let (d1, m1) = obs(&sample_rows(), 3);
        let (mut d2, m2) = obs(&sample_rows(), 3);
        // garbage in the padded rows
        for v in d2[5 * 7..].iter_mut() {
            *v = 123.0;
        }
        let a = latents(&params, &cfg.encoder, &[TokenInput { rows: &d1, mask: &m1 }]).unwrap();
        let b = latents(&params, &cfg.encoder, &[TokenInput { rows: &d2, mask: &m2 }]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuting_valid_rows_keeps_the_latent() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        let rows = sample_rows();
        let mut perm = rows.clone();
        perm.reverse();
        perm.swap(0, 2);
        let (d1, m1) = obs(&rows, 2);
        let (d2, m2) = obs(&perm, 2);
        let a = latents(&params, &cfg.encoder, &[TokenInput { rows: &d1, mask: &m1 }]).unwrap();
        let b = latents(&params, &cfg.encoder, &[TokenInput { rows: &d2, mask: &m2 }]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_latent_shape() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        let (d, m) = obs(&sample_rows(), 1);
        let batch = vec![TokenInput { rows: &d, mask: &m }; 3];
        let l = latents(&params, &cfg.encoder, &batch).unwrap();
        assert_eq!(l.shape(), (3, 64));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        let data = vec![0.0; 13];
        let mask = vec![true, true];
        let err = latents(
            &params,
            &cfg.encoder,
            &[TokenInput {
                rows: &data,
                mask: &mask,
            }],
        );
        assert!(matches!(err, Err(NeuroError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_latent_gives_softplus_zero_plus_one() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        let mut tape = Tape::with_params(&params);
        let z = tape.input(Tensor::zeros(2, 64));
        let hv = heads_forward(&mut tape, &cfg.heads, z, HeadMode::Rl).unwrap();
        let want = softplus(0.0) + 1.0;
        for v in tape.value(hv.alpha.unwrap()).data() {
            assert_eq!(*v, want);
        }
        for v in tape.value(hv.beta.unwrap()).data() {
            assert_eq!(*v, want);
        }
        assert_eq!(tape.shape(hv.value.unwrap()), (2, 1));
    }

    #[test]
    fn head_output_dims() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        let (d, m) = obs(&sample_rows(), 0);
        let input = [TokenInput { rows: &d, mask: &m }];
        let wp = forward(&params, &cfg, &input, HeadMode::IlWaypoint).unwrap();
        assert_eq!(wp[0].action.as_ref().unwrap().len(), 3);
        let bi = forward(&params, &cfg, &input, HeadMode::IlBicycle).unwrap();
        assert_eq!(bi[0].action.as_ref().unwrap().len(), 2);
        let rl = forward(&params, &cfg, &input, HeadMode::Rl).unwrap();
        assert!(rl[0].value.unwrap().is_finite());
        let b = rl[0].beta.as_ref().unwrap();
        assert!(b.alpha.iter().chain(&b.beta).all(|&v| v > 1.0));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let other = ModelConfig {
            init_seed: 1,
            ..ModelConfig::default()
        };
        assert_ne!(init_params(&cfg).unwrap(), init_params(&other).unwrap());
    }

    #[test]
    fn bad_head_split_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.heads = 5;
        assert!(init_params(&cfg).is_err());
    }
}
