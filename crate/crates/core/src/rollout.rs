//! Group sampling under a frozen policy snapshot and group-relative scoring.

use rayon::prelude::*;

use crate::error::{CesError, Result};
use crate::policy::vocab::{TokenId, EOS};
use crate::policy::{ContextFeatures, FeatureMap, PolicyParams};
use crate::scalar::Scalar;
use crate::streams::{stream, StreamRng};
use crate::tasks::{check_accuracy, check_format, TaskInstance};

/// Guard added to the group standard deviation.
pub const ADVANTAGE_EPS: f64 = 1e-8;

/// One sampled token and what the snapshot policy said about it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord<T> {
    pub token: TokenId,
    pub position: usize,
    /// Natural log of the token's probability under `θ_old`.
    pub old_log_prob: T,
    /// Entropy (bits) of the distribution the token was drawn from.
    pub entropy_bits: T,
    pub features: ContextFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTrace<T> {
    pub index: usize,
    pub records: Vec<TokenRecord<T>>,
    pub r_acc: u8,
    pub r_fmt: u8,
    pub truncated: bool,
}

impl<T: Scalar> ResponseTrace<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.records.iter().map(|r| r.token).collect()
    }

    pub fn reward(&self) -> u8 {
        self.r_acc + self.r_fmt
    }

    pub fn entropies(&self) -> Vec<T> {
        self.records.iter().map(|r| r.entropy_bits).collect()
    }
}

/// `N` responses to one prompt with group accuracy and base advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch<T> {
    pub instance: TaskInstance,
    pub responses: Vec<ResponseTrace<T>>,
    pub accuracy: T,
    pub advantages: Vec<T>,
}

impl<T: Scalar> GroupBatch<T> {
    pub fn size(&self) -> usize {
        self.responses.len()
    }

    pub fn token_count(&self) -> usize {
        self.responses.iter().map(ResponseTrace::len).sum()
    }
}

/// Draws one response autoregressively until `<eos>` or `budget` tokens.
pub fn sample_response<T: Scalar>(
    params: &PolicyParams<T>,
    fmap: &FeatureMap,
    instance: &TaskInstance,
    index: usize,
    budget: usize,
    rng: &mut StreamRng,
) -> Result<ResponseTrace<T>> {
    let mut context = instance.context_prefix();
    let prefix = context.len();
    let mut records = Vec::new();
    while records.len() < budget {
        let position = context.len() - prefix;
        let features = fmap.features(&context, position);
        let dist = params.distribution(&features)?;
        let token = dist.sample(rng);
        records.push(TokenRecord {
            token,
            position,
            old_log_prob: dist.log_probs[token],
            entropy_bits: dist.entropy_bits(),
            features,
        });
        context.push(token);
        if token == EOS {
            break;
        }
    }
    let truncated = records.last().is_none_or(|r| r.token != EOS);
    Ok(ResponseTrace {
        index,
        records,
        r_acc: 0,
        r_fmt: 0,
        truncated,
    })
}

/// Decoding rule for evaluation-time generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

/// Generates one response without recording per-token statistics.
pub fn decode<T: Scalar>(
    params: &PolicyParams<T>,
    fmap: &FeatureMap,
    instance: &TaskInstance,
    budget: usize,
    decoding: Decoding,
    rng: &mut StreamRng,
) -> Result<Vec<TokenId>> {
    let mut context = instance.context_prefix();
    let prefix = context.len();
    while context.len() - prefix < budget {
        let features = fmap.features(&context, context.len() - prefix);
        let token = match decoding {
            Decoding::Greedy => params.distribution(&features)?.argmax(),
            Decoding::Sample { temperature } => params
                .distribution_at(&features, T::of(temperature))?
                .sample(rng),
        };
        context.push(token);
        if token == EOS {
            break;
        }
    }
    Ok(context.split_off(prefix))
}

/// Samples `n` responses. Response `i` uses the stream `(seed, path ++ [i])`,
/// so the batch is identical for any thread count.
pub fn sample_group<T: Scalar>(
    params_old: &PolicyParams<T>,
    fmap: &FeatureMap,
    instance: &TaskInstance,
    n: usize,
    budget: usize,
    seed: u64,
    path: &[u64],
) -> Result<GroupBatch<T>> {
    if n < 2 {
        return Err(CesError::Config(format!("group size must be at least 2, got {n}")));
    }
    if budget == 0 {
        return Err(CesError::Config("token budget must be at least 1".into()));
    }
    let responses = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut full = path.to_vec();
            full.push(i as u64);
            let mut rng = stream(seed, "rollout", &full);
            sample_response(params_old, fmap, instance, i, budget, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupBatch {
        instance: instance.clone(),
        responses,
        accuracy: T::zero(),
        advantages: vec![T::zero(); n],
    })
}

/// `a = mean(r_acc)` and the population-std normalised advantage of `R`.
pub fn group_statistics<T: Scalar>(r_acc: &[u8], rewards: &[u8]) -> (T, Vec<T>) {
    let n = T::of_usize(rewards.len());
    let accuracy = T::of_usize(r_acc.iter().map(|&r| r as usize).sum()) / n;
    let rs: Vec<T> = rewards.iter().map(|&r| T::of(r as f64)).collect();
    let mean = rs.iter().copied().sum::<T>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return (accuracy, vec![T::zero(); rewards.len()]);
    }
    let var = rs.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let denom = var.sqrt() + T::of(ADVANTAGE_EPS);
    (accuracy, rs.iter().map(|&r| (r - mean) / denom).collect())
}

/// Fills rewards, group accuracy and base advantages.
pub fn score_group<T: Scalar>(batch: &mut GroupBatch<T>) {
    for resp in &mut batch.responses {
        let tokens = resp.tokens();
        resp.r_acc = check_accuracy(&batch.instance, &tokens);
        resp.r_fmt = check_format(&tokens);
    }
    let r_acc: Vec<u8> = batch.responses.iter().map(|r| r.r_acc).collect();
    let rewards: Vec<u8> = batch.responses.iter().map(|r| r.reward()).collect();
    let (a, adv) = group_statistics(&r_acc, &rewards);
    batch.accuracy = a;
    batch.advantages = adv;
}
