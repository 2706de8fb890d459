//! Token-level clipped surrogate evaluated with shaped advantages.
//!
//! `J(θ) = (1/Σ|oᵢ|) Σᵢ Σₜ min(r·A′, clip(r, 1−ε_low, 1+ε_high)·A′)` with
//! `r = exp(log π_θ − log π_θold)`. When a plan keeps gradient flow, `A′`
//! contains `±β·H_θ` and is re-evaluated at `θ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CesError, Result};
use crate::policy::vocab::TokenId;
use crate::policy::{ContextFeatures, PolicyParams};
use crate::rollout::GroupBatch;
use crate::scalar::Scalar;
use crate::shaping::ShapingPlan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub inner_epochs: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.28,
            inner_epochs: 1,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |e: f64| e > 0.0 && e < 1.0;
        if !ok(self.eps_low) || !ok(self.eps_high) {
            return Err(CesError::Config(format!(
                "clip epsilons must lie in (0, 1), got {} and {}",
                self.eps_low, self.eps_high
            )));
        }
        if self.inner_epochs == 0 {
            return Err(CesError::Config("inner_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Frozen `θ_old` for one rollout batch.
#[derive(Debug, Clone)]
pub struct Snapshot<T>(PolicyParams<T>);

impl<T: Scalar> Snapshot<T> {
    pub fn freeze(params: &PolicyParams<T>) -> Self {
        Snapshot(params.clone())
    }

    pub fn params(&self) -> &PolicyParams<T> {
        &self.0
    }
}

/// Importance ratio of `token` between `params` and the snapshot.
pub fn ratio<T: Scalar>(
    params: &PolicyParams<T>,
    snapshot: &Snapshot<T>,
    phi: &ContextFeatures,
    token: TokenId,
) -> Result<T> {
    let lp = params.log_prob(phi, token)?;
    let lp_old = snapshot.params().log_prob(phi, token)?;
    Ok((lp - lp_old).exp())
}

fn check_alignment<T: Scalar>(batches: &[GroupBatch<T>], plans: &[ShapingPlan<T>]) -> Result<usize> {
    if batches.len() != plans.len() {
        return Err(CesError::Dimension(format!(
            "{} batches but {} plans",
            batches.len(),
            plans.len()
        )));
    }
    let mut tokens = 0;
    for (b, p) in batches.iter().zip(plans) {
        if b.responses.len() != p.responses.len() {
            return Err(CesError::Dimension("plan and batch disagree on group size".into()));
        }
        for (r, rp) in b.responses.iter().zip(&p.responses) {
            if r.len() != rp.shaped.len() {
                return Err(CesError::Dimension("plan and response disagree on length".into()));
            }
        }
        tokens += b.token_count();
    }
    if tokens == 0 {
        return Err(CesError::Input("objective over an empty batch".into()));
    }
    Ok(tokens)
}

/// Sum of per-token surrogate terms for one group, optionally accumulating
/// the gradient of that sum (scaled by `grad_scale`).
fn group_terms<T: Scalar>(
    batch: &GroupBatch<T>,
    plan: &ShapingPlan<T>,
    params: &PolicyParams<T>,
    clip: &ClipConfig,
    mut grad: Option<(&mut [T], T)>,
) -> Result<T> {
    let lo = T::one() - T::of(clip.eps_low);
    let hi = T::one() + T::of(clip.eps_high);
    let mut total = T::zero();
    for (resp, rplan) in batch.responses.iter().zip(&plan.responses) {
        for (j, rec) in resp.records.iter().enumerate() {
            let dist = params.distribution(&rec.features)?;
            let r = (dist.log_probs[rec.token] - rec.old_log_prob).exp();
            let coef = rplan.coef[j];
            let live = plan.gradient_flow && coef != T::zero();
            let adv = if live {
                rplan.base + coef * dist.entropy_bits()
            } else {
                rplan.shaped[j]
            };
            let clipped_r = r.max(lo).min(hi);
            let unclipped = r * adv;
            let clipped = clipped_r * adv;
            // ties take the unclipped branch
            let take_unclipped = unclipped <= clipped;
            total += if take_unclipped { unclipped } else { clipped };

            if let Some((g, scale)) = grad.as_mut() {
                let mut cot = vec![T::zero(); dist.size()];
                if take_unclipped {
                    for (c, d) in cot.iter_mut().zip(dist.dlogits_log_prob(rec.token)) {
                        *c = adv * r * d;
                    }
                }
                if live {
                    let weight = if take_unclipped { r } else { clipped_r } * coef;
                    for (c, d) in cot.iter_mut().zip(dist.dlogits_entropy_bits()) {
                        *c += weight * d;
                    }
                }
                params.accumulate(&rec.features, &dist, &cot, *scale, g);
            }
        }
    }
    Ok(total)
}

pub fn objective_value<T: Scalar>(
    batches: &[GroupBatch<T>],
    plans: &[ShapingPlan<T>],
    params: &PolicyParams<T>,
    clip: &ClipConfig,
) -> Result<T> {
    let tokens = check_alignment(batches, plans)?;
    let sums = batches
        .par_iter()
        .zip(plans)
        .map(|(b, p)| group_terms(b, p, params, clip, None))
        .collect::<Result<Vec<T>>>()?;
    Ok(sums.into_iter().fold(T::zero(), |a, s| a + s) * (T::one() / T::of_usize(tokens)))
}

/// Value and exact gradient of [`objective_value`].
///
/// Selection sets, base advantages and the branch of each `min` are held
/// fixed. Groups are reduced in order, so results do not depend on the
/// number of threads.
pub fn objective_gradient<T: Scalar>(
    batches: &[GroupBatch<T>],
    plans: &[ShapingPlan<T>],
    params: &PolicyParams<T>,
    clip: &ClipConfig,
) -> Result<(T, Vec<T>)> {
    let tokens = check_alignment(batches, plans)?;
    let inv = T::one() / T::of_usize(tokens);
    let parts = batches
        .par_iter()
        .zip(plans)
        .map(|(b, p)| {
            let mut g = vec![T::zero(); params.len()];
            let v = group_terms(b, p, params, clip, Some((&mut g, inv)))?;
            Ok((v, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![T::zero(); params.len()];
    let mut value = T::zero();
    for (v, g) in parts {
        value += v;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((value * inv, grad))
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}
