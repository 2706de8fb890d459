//! Shared test fixtures and independent oracles.
#![allow(dead_code)]

use ces_core::objective::{objective_value, ClipConfig};
use ces_core::policy::{Architecture, FeatureMap, PolicyParams};
use ces_core::rollout::{group_statistics, GroupBatch, ResponseTrace, TokenRecord};
use ces_core::shaping::{shape_advantages, ShapingConfig, ShapingMode};
use ces_core::tasks::TaskInstance;
use ces_core::{Batch, Params, Plan};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One group as the reference shaping routine consumes it.
#[derive(Debug, Clone)]
pub struct RawGroup {
    pub entropies: Vec<Vec<f64>>,
    pub r_acc: Vec<u8>,
    pub r_fmt: Vec<u8>,
}

/// Direct transcription of the CES pseudocode: returns `A'_{i,j}`.
pub fn reference_shaping(g: &RawGroup, tau: f64, beta1: f64, beta2: f64) -> Vec<Vec<f64>> {
    let n = g.r_acc.len();
    let rewards: Vec<f64> = (0..n).map(|i| (g.r_acc[i] + g.r_fmt[i]) as f64).collect();
    let a = g.r_acc.iter().map(|&r| r as f64).sum::<f64>() / n as f64;
    let mut out = Vec::new();
    for i in 0..n {
        let a_i = group_normalize(&rewards, rewards[i]);
        let b_i = if g.r_acc[i] == 1 { a } else { 1.0 - a };
        let len = g.entropies[i].len();
        let k_i = ((len as f64) * tau * b_i).floor() as usize;
        let s_h = top_k_high_entropy(&g.entropies[i], k_i.min(len));
        let mut shaped = Vec::new();
        for j in 0..len {
            let mut a_ij = a_i;
            if s_h.contains(&j) {
                let h_j = g.entropies[i][j];
                if g.r_acc[i] == 1 {
                    a_ij = a_i - beta1 * h_j;
                } else {
                    a_ij = a_i + beta2 * h_j;
                }
            }
            shaped.push(a_ij);
        }
        out.push(shaped);
    }
    out
}

fn group_normalize(rewards: &[f64], r: f64) -> f64 {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    (r - mean) / (std + 1e-8)
}

/// Repeatedly takes the largest remaining entropy; the earliest position
/// wins a tie.
fn top_k_high_entropy(h: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; h.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..h.len() {
            if taken[j] {
                continue;
            }
            if best.is_none_or(|b| h[j] > h[b]) {
                best = Some(j);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Random group: sizes 2..=8, lengths 1..=60, entropies sometimes drawn from
/// a tiny set so ties are common.
pub fn random_group<R: Rng>(rng: &mut R) -> RawGroup {
    let n = rng.random_range(2..=8);
    let tied = rng.random_bool(0.4);
    let entropies = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=60);
            (0..len)
                .map(|_| {
                    if tied {
                        [0.0, 0.5, 1.0, 2.0][rng.random_range(0..4)]
                    } else {
                        rng.random_range(0.0..3.5)
                    }
                })
                .collect()
        })
        .collect();
    let pattern = rng.random_range(0..4);
    let r_acc = (0..n)
        .map(|_| match pattern {
            0 => 1,
            1 => 0,
            _ => rng.random_bool(0.5) as u8,
        })
        .collect();
    let r_fmt = (0..n).map(|_| rng.random_bool(0.8) as u8).collect();
    RawGroup {
        entropies,
        r_acc,
        r_fmt,
    }
}

/// Wraps a raw group as a scored batch (features unused by shaping).
pub fn batch_of(g: &RawGroup) -> Batch {
    let responses = g
        .entropies
        .iter()
        .enumerate()
        .map(|(i, hs)| ResponseTrace {
            index: i,
            records: hs
                .iter()
                .enumerate()
                .map(|(j, &h)| TokenRecord {
                    token: 0,
                    position: j,
                    old_log_prob: -1.0,
                    entropy_bits: h,
                    features: ces_core::policy::ContextFeatures { active: vec![], dim: 0 },
                })
                .collect(),
            r_acc: g.r_acc[i],
            r_fmt: g.r_fmt[i],
            truncated: false,
        })
        .collect();
    let rewards: Vec<u8> = (0..g.r_acc.len()).map(|i| g.r_acc[i] + g.r_fmt[i]).collect();
    let (accuracy, advantages) = group_statistics(&g.r_acc, &rewards);
    GroupBatch {
        instance: TaskInstance::from_operands(0, vec![1, 2]),
        responses,
        accuracy,
        advantages,
    }
}

/// Small differentiable problem: a policy, its rollout snapshot and scored
/// groups sampled from the snapshot.
pub struct Rig {
    pub fmap: FeatureMap,
    pub params: Params,
    pub batches: Vec<Batch>,
}

pub const RIG_VOCAB: usize = 8;

pub fn random_weights<R: Rng>(p: &mut Params, scale: f64, rng: &mut R) {
    for w in p.weights.iter_mut() {
        *w = rng.random_range(-scale..scale);
    }
}

/// `arch` is Linear or Hidden{6}; both stay under 1,000 parameters.
pub fn random_rig<R: Rng>(arch: Architecture, rng: &mut R, force_mixed: Option<Vec<u8>>) -> Rig {
    let fmap = FeatureMap::new(RIG_VOCAB, 2, 3, 12);
    let mut snapshot = PolicyParams::zeros(arch, RIG_VOCAB, fmap.dim(), 1.0);
    random_weights(&mut snapshot, 0.8, rng);
    let mut params = snapshot.clone();
    for w in params.weights.iter_mut() {
        *w += rng.random_range(-0.25..0.25);
    }
    let groups = rng.random_range(1..=2);
    let batches = (0..groups)
        .map(|_| {
            let n = rng.random_range(2..=4);
            let responses: Vec<ResponseTrace<f64>> = (0..n)
                .map(|i| {
                    let mut context: Vec<usize> = (0..2).map(|_| rng.random_range(0..RIG_VOCAB)).collect();
                    let len = rng.random_range(2..=7);
                    let records = (0..len)
                        .map(|j| {
                            let features = fmap.features(&context, j);
                            let dist = snapshot.distribution(&features).unwrap();
                            let token = dist.sample(rng);
                            context.push(token);
                            TokenRecord {
                                token,
                                position: j,
                                old_log_prob: dist.log_probs[token],
                                entropy_bits: dist.entropy_bits(),
                                features,
                            }
                        })
                        .collect();
                    ResponseTrace {
                        index: i,
                        records,
                        r_acc: 0,
                        r_fmt: 0,
                        truncated: false,
                    }
                })
                .collect();
            let mut responses = responses;
            let r_acc: Vec<u8> = match &force_mixed {
                Some(p) => (0..n).map(|i| p[i % p.len()]).collect(),
                None => (0..n).map(|_| rng.random_bool(0.5) as u8).collect(),
            };
            for (r, &acc) in responses.iter_mut().zip(&r_acc) {
                r.r_acc = acc;
                r.r_fmt = rng.random_bool(0.7) as u8;
            }
            let rewards: Vec<u8> = responses.iter().map(|r| r.reward()).collect();
            let (accuracy, advantages) = group_statistics(&r_acc, &rewards);
            GroupBatch {
                instance: TaskInstance::from_operands(0, vec![1, 2]),
                responses,
                accuracy,
                advantages,
            }
        })
        .collect();
    Rig { fmap, params, batches }
}

/// Plans from entropies evaluated at the rig's current parameters.
pub fn plans_at(rig: &Rig, config: &ShapingConfig) -> Vec<Plan> {
    rig.batches
        .iter()
        .map(|b| {
            let live: Vec<Vec<f64>> = b
                .responses
                .iter()
                .map(|r| {
                    r.records
                        .iter()
                        .map(|rec| rig.params.distribution(&rec.features).unwrap().entropy_bits())
                        .collect()
                })
                .collect();
            shape_advantages(b, config, &live).unwrap()
        })
        .collect()
}

/// True when some token sits so close to a clip boundary, or has such a
/// small shaped advantage outside the trust region, that a step of `h`
/// could switch the branch of the `min`.
pub fn near_kink(rig: &Rig, plans: &[Plan], clip: &ClipConfig) -> bool {
    let lo = 1.0 - clip.eps_low;
    let hi = 1.0 + clip.eps_high;
    for (b, p) in rig.batches.iter().zip(plans) {
        for (r, rp) in b.responses.iter().zip(&p.responses) {
            for (j, rec) in r.records.iter().enumerate() {
                let lp = rig.params.log_prob(&rec.features, rec.token).unwrap();
                let ratio = (lp - rec.old_log_prob).exp();
                if (ratio - lo).abs() < 1e-3 || (ratio - hi).abs() < 1e-3 {
                    return true;
                }
                if !(lo..=hi).contains(&ratio) && rp.shaped[j].abs() < 1e-3 {
                    return true;
                }
            }
        }
    }
    false
}

pub fn shaping(mode: ShapingMode) -> ShapingConfig {
    ShapingConfig {
        tau: 0.5,
        beta1: 0.7,
        beta2: 0.9,
        mode,
    }
}

/// Central differences of `objective_value` in every coordinate.
pub fn finite_difference(rig: &Rig, plans: &[Plan], clip: &ClipConfig, h: f64) -> Vec<f64> {
    let mut p = rig.params.clone();
    (0..p.len())
        .map(|k| {
            let w = p.weights[k];
            p.weights[k] = w + h;
            let up = objective_value(&rig.batches, plans, &p, clip).unwrap();
            p.weights[k] = w - h;
            let down = objective_value(&rig.batches, plans, &p, clip).unwrap();
            p.weights[k] = w;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Gradient with every `A'` treated as a constant: the score-function
/// estimator on unclipped tokens, assembled from per-token log-prob
/// gradients.
pub fn frozen_gradient(rig: &Rig, plans: &[Plan], clip: &ClipConfig) -> Vec<f64> {
    let lo = 1.0 - clip.eps_low;
    let hi = 1.0 + clip.eps_high;
    let tokens: usize = rig.batches.iter().map(|b| b.token_count()).sum();
    let mut g = vec![0.0; rig.params.len()];
    for (b, p) in rig.batches.iter().zip(plans) {
        for (r, rp) in b.responses.iter().zip(&p.responses) {
            for (j, rec) in r.records.iter().enumerate() {
                let lp = rig.params.log_prob(&rec.features, rec.token).unwrap();
                let ratio = (lp - rec.old_log_prob).exp();
                let adv = rp.shaped[j];
                let clipped = ratio.clamp(lo, hi);
                if ratio * adv <= clipped * adv {
                    let d = rig.params.grad_log_prob(&rec.features, rec.token).unwrap();
                    for (gk, dk) in g.iter_mut().zip(d) {
                        *gk += adv * ratio * dk / tokens as f64;
                    }
                }
            }
        }
    }
    g
}
