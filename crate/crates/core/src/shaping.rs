//! Conditional entropy shaping of token-level advantages.
//!
//! For every response `yᵢ` of a scored group:
//!
//! 1. `bᵢ = a` if the response is correct, `1 − a` otherwise, where `a` is
//!    the group accuracy.
//! 2. `kᵢ = ⌊|yᵢ| · τ · bᵢ⌋` highest-entropy positions form `S_H(yᵢ)`
//!    (ranked by rollout-time entropy, earliest position wins ties).
//! 3. Selected tokens of correct responses get `Aᵢ − β₁·H`, selected tokens
//!    of incorrect responses get `Aᵢ + β₂·H`; everything else keeps `Aᵢ`.
//!
//! `H` in step 3 is the entropy under the parameters being optimised, so
//! the objective can differentiate through it unless the mode detaches it.

use serde::{Deserialize, Serialize};

use crate::error::{CesError, Result};
use crate::rollout::{GroupBatch, ResponseTrace};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapingMode {
    /// Dynamic multiplier, live entropy gradient.
    FullCes,
    /// `b = 1` for every response.
    RemoveAcc,
    /// Same advantages as `FullCes`, entropy treated as a constant.
    Detach,
    /// Plain group-relative advantages.
    Off,
    /// `Aᵢ + β₂·H` on every token of every response, entropy detached.
    EntropyAdv,
}

impl ShapingMode {
    pub const ALL: [ShapingMode; 5] = [
        ShapingMode::FullCes,
        ShapingMode::RemoveAcc,
        ShapingMode::Detach,
        ShapingMode::Off,
        ShapingMode::EntropyAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapingMode::FullCes => "full-ces",
            ShapingMode::RemoveAcc => "remove-acc",
            ShapingMode::Detach => "detach",
            ShapingMode::Off => "off",
            ShapingMode::EntropyAdv => "entropy-adv",
        }
    }

    pub fn parse(s: &str) -> Option<ShapingMode> {
        ShapingMode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn gradient_flow(self) -> bool {
        matches!(self, ShapingMode::FullCes | ShapingMode::RemoveAcc)
    }
}

impl std::fmt::Display for ShapingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingConfig {
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mode: ShapingMode,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        ShapingConfig {
            tau: 0.01,
            beta1: 0.4,
            beta2: 0.4,
            mode: ShapingMode::FullCes,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(CesError::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) || !self.beta1.is_finite() || !self.beta2.is_finite() {
            return Err(CesError::Config(format!(
                "betas must be finite and non-negative, got {} and {}",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// Shaping outcome for one response.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePlan<T> {
    pub multiplier: T,
    pub count: usize,
    /// Selected positions in ascending order.
    pub selected: Vec<usize>,
    pub base: T,
    /// `A′` per token, evaluated with the entropies passed to the planner.
    pub shaped: Vec<T>,
    /// `−1` penalised, `+1` rewarded, `0` untouched.
    pub signs: Vec<i8>,
    /// Signed entropy coefficient per token, so `A′ = base + coef·H`.
    pub coef: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapingPlan<T> {
    pub mode: ShapingMode,
    pub gradient_flow: bool,
    pub responses: Vec<ResponsePlan<T>>,
}

impl<T: Scalar> ShapingPlan<T> {
    pub fn selected_total(&self) -> usize {
        self.responses.iter().map(|r| r.selected.len()).sum()
    }
}

pub fn dynamic_multiplier<T: Scalar>(r_acc: u8, accuracy: T) -> T {
    if r_acc == 1 {
        accuracy
    } else {
        T::one() - accuracy
    }
}

/// `k = ⌊len · τ · b⌋` and the indices of the `k` largest entropies.
pub fn select_topk<T: Scalar>(entropies: &[T], tau: T, multiplier: T) -> (usize, Vec<usize>) {
    let raw = (T::of_usize(entropies.len()) * tau * multiplier).floor();
    let k = raw.to_usize().unwrap_or(0).min(entropies.len());
    if k == 0 {
        return (0, Vec::new());
    }
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    // stable sort keeps the earlier position first among equal entropies
    order.sort_by(|&i, &j| {
        entropies[j]
            .partial_cmp(&entropies[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    (k, chosen)
}

pub fn select_response<T: Scalar>(response: &ResponseTrace<T>, tau: T, multiplier: T) -> (usize, Vec<usize>) {
    select_topk(&response.entropies(), tau, multiplier)
}

/// Builds the token-level advantages for one scored group.
///
/// Selection ranks the rollout-time entropies stored in the batch;
/// `live_entropy[i][j]` supplies the value of `H` used in `A′`.
pub fn shape_advantages<T: Scalar>(
    batch: &GroupBatch<T>,
    config: &ShapingConfig,
    live_entropy: &[Vec<T>],
) -> Result<ShapingPlan<T>> {
    shape_group(&batch.responses, batch.accuracy, &batch.advantages, config, live_entropy)
}

/// [`shape_advantages`] on the bare parts of a group.
pub fn shape_group<T: Scalar>(
    responses: &[ResponseTrace<T>],
    accuracy: T,
    advantages: &[T],
    config: &ShapingConfig,
    live_entropy: &[Vec<T>],
) -> Result<ShapingPlan<T>> {
    if live_entropy.len() != responses.len() || advantages.len() != responses.len() {
        return Err(CesError::Dimension(format!(
            "group of {} responses with {} advantages and {} live entropy rows",
            responses.len(),
            advantages.len(),
            live_entropy.len()
        )));
    }
    let tau = T::of(config.tau);
    let beta1 = T::of(config.beta1);
    let beta2 = T::of(config.beta2);
    let mode = config.mode;
    let mut plans = Vec::with_capacity(responses.len());
    for ((resp, &base), live) in responses.iter().zip(advantages).zip(live_entropy) {
        let len = resp.len();
        if live.len() != len {
            return Err(CesError::Dimension(format!(
                "response {}: {} live entropies for {} tokens",
                resp.index,
                live.len(),
                len
            )));
        }
        let correct = resp.r_acc == 1;
        let dynamic = dynamic_multiplier(resp.r_acc, accuracy);
        let mut coef = vec![T::zero(); len];
        let mut signs = vec![0i8; len];
        let (multiplier, count, selected) = match mode {
            ShapingMode::Off => (dynamic, 0, Vec::new()),
            ShapingMode::EntropyAdv => {
                coef.iter_mut().for_each(|c| *c = beta2);
                signs.iter_mut().for_each(|s| *s = 1);
                (dynamic, len, (0..len).collect())
            }
            ShapingMode::FullCes | ShapingMode::Detach | ShapingMode::RemoveAcc => {
                let b = if mode == ShapingMode::RemoveAcc { T::one() } else { dynamic };
                let (k, sel) = select_response(resp, tau, b);
                let (c, s) = if correct { (-beta1, -1) } else { (beta2, 1) };
                for &j in &sel {
                    coef[j] = c;
                    signs[j] = s;
                }
                (b, k, sel)
            }
        };
        let shaped = coef
            .iter()
            .zip(live)
            .map(|(&c, &h)| if c == T::zero() { base } else { base + c * h })
            .collect();
        plans.push(ResponsePlan {
            multiplier,
            count,
            selected,
            base,
            shaped,
            signs,
            coef,
        });
    }
    Ok(ShapingPlan {
        mode,
        gradient_flow: mode.gradient_flow(),
        responses: plans,
    })
}

/// Shaping with `H` taken from the rollout records (the on-policy case).
pub fn shape_with_rollout_entropy<T: Scalar>(
    batch: &GroupBatch<T>,
    config: &ShapingConfig,
) -> Result<ShapingPlan<T>> {
    let live: Vec<Vec<T>> = batch.responses.iter().map(ResponseTrace::entropies).collect();
    shape_advantages(batch, config, &live)
}
