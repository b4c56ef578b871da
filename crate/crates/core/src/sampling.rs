//! Representative subset selection: encoder latents, exact t-SNE, k-means
//! and nearest-to-centre picking.

use chauffeur_neuro::model::latents;
use chauffeur_neuro::{NeuroError, TokenInput};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observation::{logged_views, preprocess_static, tokenize};
use crate::scenario::Scenario;
use crate::training::Policy;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("t-SNE needs more than 3 x perplexity points ({n} points, perplexity {perplexity})")]
    PerplexityTooHigh { n: usize, perplexity: f64 },
    #[error("need at least {need} scenarios, got {got}")]
    InsufficientScenarios { need: usize, got: usize },
    #[error("invalid sampling configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Neuro(#[from] NeuroError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureAgg {
    /// Latent of the first logged observation.
    #[default]
    First,
    /// Mean latent over every logged step.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    pub scenario_ids: Vec<String>,
}

pub fn extract_features(scenarios: &[Scenario], policy: &Policy, agg: FeatureAgg) -> Result<FeatureSet, SamplingError> {
    let features = scenarios
        .par_iter()
        .map(|s| {
            let cache = preprocess_static(s, &policy.tokenizer);
            let steps = match agg {
                FeatureAgg::First => 1,
                FeatureAgg::Mean => s.horizon_steps,
            };
            let obs: Vec<_> = (0..steps)
                .map(|t| tokenize(&s.ego().states[t], &logged_views(s, t), &cache, &policy.tokenizer))
                .collect();
            let batch: Vec<TokenInput> = obs
                .iter()
                .map(|o| TokenInput {
                    rows: &o.tokens,
                    mask: &o.mask,
                })
                .collect();
            let z = latents(&policy.params, &policy.model.encoder, &batch)?;
            let mut mean = vec![0.0; z.cols()];
            for r in 0..z.rows() {
                for (m, v) in mean.iter_mut().zip(z.row(r)) {
                    *m += v / z.rows() as f64;
                }
            }
            Ok(mean)
        })
        .collect::<Result<Vec<_>, NeuroError>>()?;
    Ok(FeatureSet {
        features,
        scenario_ids: scenarios.iter().map(|s| s.id.clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Size of the random pre-subset; `None` uses min(N, max(20 K, 500)).
    pub pre_subset_size: Option<usize>,
    pub k: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for SneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            pre_subset_size: None,
            k: 4,
            kmeans_restarts: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    pub final_kl: f64,
    /// Perplexity reached by each row's solved bandwidth.
    pub row_perplexity: Vec<f64>,
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional affinities of row `i` at precision `beta`, plus the row's
/// Shannon entropy in nats.
fn row_affinities(d: &[f64], i: usize, n: usize, beta: f64, out: &mut [f64]) -> f64 {
    let row = &d[i * n..(i + 1) * n];
    let min = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        out[j] = if j == i { 0.0 } else { (-(row[j] - min) * beta).exp() };
        sum += out[j];
    }
    let mut h = 0.0;
    for j in 0..n {
        out[j] /= sum;
        if out[j] > 0.0 {
            h -= out[j] * out[j].ln();
        }
    }
    h
}

const ENTROPY_TOL: f64 = 1e-5;
const BANDWIDTH_ITERS: usize = 50;

/// Symmetrised joint affinities with per-row bandwidths matched to the
/// target perplexity by bisection on the precision.
fn joint_affinities(x: &[Vec<f64>], perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let d = sq_dists(x);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut perp = vec![0.0; n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        // start at the inverse mean distance so the search is scale free
        let mean = d[i * n..(i + 1) * n].iter().sum::<f64>() / (n - 1) as f64;
        let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        let mut h = row_affinities(&d, i, n, beta, &mut row);
        for _ in 0..BANDWIDTH_ITERS {
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = row_affinities(&d, i, n, beta, &mut row);
        }
        perp[i] = h.exp();
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    (joint, perp)
}

/// Exact t-SNE to two dimensions.
pub fn tsne(x: &[Vec<f64>], cfg: &SneConfig) -> Result<Embedding2D, SamplingError> {
    let n = x.len();
    if n as f64 <= 3.0 * cfg.perplexity {
        return Err(SamplingError::PerplexityTooHigh {
            n,
            perplexity: cfg.perplexity,
        });
    }
    let (p, row_perplexity) = joint_affinities(x, cfg.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-2).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exag * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                g[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                // delta-bar-delta gains
                gains[i][k] = if (g[k] > 0.0) != (vel[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                vel[i][k] = momentum * vel[i][k] - cfg.learning_rate * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let mean = y
            .iter()
            .fold([0.0; 2], |a, p| [a[0] + p[0] / n as f64, a[1] + p[1] / n as f64]);
        for p in y.iter_mut() {
            p[0] -= mean[0];
            p[1] -= mean[1];
        }
    }
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                z += 1.0 / (1.0 + d2(y[i], y[j]));
            }
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (1.0 / (1.0 + d2(y[i], y[j])) / z).max(1e-12);
                let pij = p[i * n + j];
                kl += pij * (pij / q).ln();
            }
        }
    }
    Ok(Embedding2D {
        points: y,
        final_kl: kl,
        row_perplexity,
    })
}

fn d2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<[f64; 2]>,
    pub assignment: Vec<usize>,
    pub sse: f64,
    /// SSE after each assignment step of the winning restart.
    pub sse_history: Vec<f64>,
}

const LLOYD_ITERS: usize = 300;

fn nearest_center(p: [f64; 2], centers: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, &m) in centers.iter().enumerate() {
        let d = d2(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(points: &[[f64; 2]], k: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let w: Vec<f64> = points.iter().map(|&p| nearest_center(p, &centers).1).collect();
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            // every point already sits on a centre
            centers.push(points[rng.random_range(0..points.len())]);
            continue;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if target < *wi {
                pick = i;
                break;
            }
            target -= wi;
        }
        centers.push(points[pick]);
    }
    centers
}

fn lloyd(points: &[[f64; 2]], mut centers: Vec<[f64; 2]>) -> KMeans {
    let k = centers.len();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..LLOYD_ITERS {
        let mut changed = false;
        let mut sse = 0.0;
        for (i, &p) in points.iter().enumerate() {
            let (c, d) = nearest_center(p, &centers);
            sse += d;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        // an empty cluster takes over the point farthest from its centre
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&a| counts[a] += 1);
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[assignment[i]] > 1)
                    .max_by(|&a, &b| {
                        d2(points[a], centers[assignment[a]])
                            .total_cmp(&d2(points[b], centers[assignment[b]]))
                            .then(b.cmp(&a))
                    });
                if let Some(i) = far {
                    sse -= d2(points[i], centers[assignment[i]]);
                    counts[assignment[i]] -= 1;
                    assignment[i] = c;
                    counts[c] = 1;
                    centers[c] = points[i];
                    changed = true;
                }
            }
        }
        if let Some(&prev) = history.last() {
            assert!(
                sse <= prev + 1e-9 * (1.0 + prev),
                "k-means SSE rose from {prev} to {sse}"
            );
        }
        history.push(sse);
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; 2]; k];
        for (i, &p) in points.iter().enumerate() {
            sums[assignment[i]][0] += p[0];
            sums[assignment[i]][1] += p[1];
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
    }
    let sse = points.iter().zip(&assignment).map(|(&p, &a)| d2(p, centers[a])).sum();
    KMeans {
        centers,
        assignment,
        sse,
        sse_history: history,
    }
}

/// k-means++ seeding and Lloyd iterations; the lowest-SSE restart wins.
pub fn kmeans(points: &[[f64; 2]], k: usize, restarts: usize, seed: u64) -> Result<KMeans, SamplingError> {
    if k == 0 || k > points.len() {
        return Err(SamplingError::Config(format!("k = {k} for {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, kmeans_pp(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// One distinct point per centre: each centre takes its nearest unclaimed
/// point, and a point wanted by several centres goes to the nearest one.
pub fn pick_nearest(points: &[[f64; 2]], centers: &[[f64; 2]]) -> Vec<usize> {
    let ranked: Vec<Vec<usize>> = centers
        .iter()
        .map(|&c| {
            let mut idx: Vec<usize> = (0..points.len()).collect();
            idx.sort_by(|&a, &b| d2(points[a], c).total_cmp(&d2(points[b], c)).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; points.len()];
    let mut pick = vec![usize::MAX; centers.len()];
    let mut cursor = vec![0usize; centers.len()];
    let mut pending: Vec<usize> = (0..centers.len()).collect();
    while let Some(c) = pending.pop() {
        loop {
            let p = ranked[c][cursor[c]];
            cursor[c] += 1;
            match owner[p] {
                None => {
                    owner[p] = Some(c);
                    pick[c] = p;
                    break;
                }
                Some(o) => {
                    let (dc, dother) = (d2(points[p], centers[c]), d2(points[p], centers[o]));
                    if dc < dother || (dc == dother && c < o) {
                        owner[p] = Some(c);
                        pick[c] = p;
                        pending.push(o);
                        break;
                    }
                }
            }
        }
    }
    pick
}

#[derive(Debug, Clone, PartialEq)]
pub struct SneSelection {
    /// Selected scenario ids, in centre order.
    pub ids: Vec<String>,
    /// Indices into the input scenarios of the random pre-subset.
    pub pre_subset: Vec<usize>,
    pub embedding: Embedding2D,
    pub clusters: KMeans,
    /// Index into `pre_subset` picked for each centre.
    pub picked: Vec<usize>,
}

pub fn default_pre_subset(n: usize, k: usize) -> usize {
    n.min((20 * k).max(500))
}

/// Full pipeline on precomputed features.
pub fn sne_select(features: &FeatureSet, cfg: &SneConfig) -> Result<SneSelection, SamplingError> {
    let n = features.features.len();
    let m = cfg.pre_subset_size.unwrap_or_else(|| default_pre_subset(n, cfg.k));
    if n < m || m < cfg.k || cfg.k == 0 {
        return Err(SamplingError::InsufficientScenarios {
            need: m.max(cfg.k).max(1),
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pre_subset = sample(&mut rng, n, m).into_vec();
    pre_subset.sort_unstable();
    let x: Vec<Vec<f64>> = pre_subset.iter().map(|&i| features.features[i].clone()).collect();
    let embedding = tsne(&x, cfg)?;
    let clusters = kmeans(&embedding.points, cfg.k, cfg.kmeans_restarts, cfg.seed)?;
    let picked = pick_nearest(&embedding.points, &clusters.centers);
    Ok(SneSelection {
        ids: picked
            .iter()
            .map(|&p| features.scenario_ids[pre_subset[p]].clone())
            .collect(),
        pre_subset,
        embedding,
        clusters,
        picked,
    })
}

pub fn sne_sample(
    scenarios: &[Scenario],
    policy: &Policy,
    cfg: &SneConfig,
    agg: FeatureAgg,
) -> Result<SneSelection, SamplingError> {
    let features = extract_features(scenarios, policy, agg)?;
    sne_select(&features, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64, per: usize, centres: &[[f64; 2]]) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (l, c) in centres.iter().enumerate() {
            for _ in 0..per {
                pts.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                labels.push(l);
            }
        }
        (pts, labels)
    }

    #[test]
    fn k_equals_n_gives_zero_sse() {
        let (pts, _) = blobs(1, 5, &[[0.0, 0.0]]);
        let r = kmeans(&pts, 5, 3, 0).unwrap();
        assert_eq!(r.sse, 0.0);
        let mut a = r.assignment.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn one_cluster_is_the_mean() {
        let (pts, _) = blobs(2, 20, &[[3.0, -1.0]]);
        let r = kmeans(&pts, 1, 2, 0).unwrap();
        let n = pts.len() as f64;
        let mean = pts.iter().fold([0.0; 2], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
        assert!(d2(r.centers[0], mean) < 1e-20);
    }

    #[test]
    fn two_blobs_recover_their_means() {
        let (pts, labels) = blobs(3, 50, &[[0.0, 0.0], [10.0, 5.0]]);
        let r = kmeans(&pts, 2, 8, 1).unwrap();
        for l in 0..2 {
            let members: Vec<_> = pts
                .iter()
                .zip(&labels)
                .filter(|(_, &x)| x == l)
                .map(|(p, _)| *p)
                .collect();
            let n = members.len() as f64;
            let mean = members.iter().fold([0.0; 2], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
            let best = r
                .centers
                .iter()
                .map(|&c| d2(c, mean).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "{best}");
        }
    }

    #[test]
    fn claimed_points_go_to_the_nearer_centre() {
        let pts = [[0.0, 0.0], [5.0, 0.0], [10.0, 0.0]];
        let centres = [[0.4, 0.0], [0.1, 0.0]];
        let p = pick_nearest(&pts, &centres);
        assert_eq!(p, vec![1, 0]);
    }

    #[test]
    fn perplexity_guard() {
        let x = vec![vec![0.0]; 90];
        assert!(matches!(
            tsne(&x, &SneConfig::default()),
            Err(SamplingError::PerplexityTooHigh { .. })
        ));
    }
}
