//! Supervised fitting of the verbose-but-correct starting policy.
//!
//! The scripted response for `d₁ + … + d_k ?` is
//!
//! ```text
//! <think> e₁ … e₁₁ [<rum> . … . s]* </think> s <eos>
//! ```
//!
//! where `eₜ` echoes the `t`-th slot of the padded prompt (padding becomes
//! `~`, `+` stays `+`, the `i`-th operand becomes the running sum `sᵢ`), and
//! each optional rumination re-states the final sum `s` after a run of
//! fillers. Whether to ruminate is a coin flip with probability `q` at every
//! decision point; every other step is deterministic given the last 13
//! tokens.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CesError, Result};
use crate::objective::norm;
use crate::optim::{adam_step, AdamState};
use crate::policy::vocab::{
    digit_token, token_digit, TokenId, ECHO_PAD, EOS, FILLER, PLUS, PROMPT_SEP, QUERY, RUMINATE,
    THINK_CLOSE, THINK_OPEN,
};
use crate::policy::{FeatureMap, PolicyParams};
use crate::streams::stream;
use crate::tasks::{generate_instance, TaskInstance, TierMix, PROMPT_WIDTH};
use crate::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_prompts: usize,
    pub lr: f64,
    /// Probability of opening another rumination at each decision point.
    pub rumination_prob: f64,
    /// Fillers inside one rumination.
    pub filler_run: usize,
    /// Cap on ruminations in a scripted target.
    pub max_ruminations: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch_prompts: 32,
            lr: 0.01,
            rumination_prob: 0.4,
            filler_run: 10,
            max_ruminations: 8,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rumination_prob > 0.0 && self.rumination_prob < 1.0) {
            return Err(CesError::Config("rumination_prob must lie in (0, 1)".into()));
        }
        if self.batch_prompts == 0 || self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(CesError::Config("pretrain batch and lr must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised position: the target distribution over the next token.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Token(TokenId),
    /// Rumination decision: `<rum>` with probability `q`, else `</think>`.
    Fork(f64),
}

/// The scripted response with `ruminations` re-statements, paired with the
/// per-position targets.
pub fn verbose_script(
    instance: &TaskInstance,
    ruminations: usize,
    config: &PretrainConfig,
) -> (Vec<TokenId>, Vec<Target>) {
    let padded = instance.context_prefix();
    debug_assert_eq!(padded.len(), PROMPT_WIDTH);
    let mut tokens = vec![THINK_OPEN];
    let mut sum: Option<u8> = None;
    for &x in &padded[..PROMPT_WIDTH - 1] {
        let y = match x {
            PROMPT_SEP => ECHO_PAD,
            PLUS => PLUS,
            d => {
                let d = token_digit(d).expect("prompt slot is a digit");
                let s = (sum.unwrap_or(0) + d) % 10;
                sum = Some(s);
                digit_token(s)
            }
        };
        tokens.push(y);
    }
    debug_assert_eq!(padded[PROMPT_WIDTH - 1], QUERY);
    let s = digit_token(sum.expect("at least one operand"));
    let mut targets: Vec<Target> = tokens.iter().map(|&t| Target::Token(t)).collect();
    let fork = Target::Fork(config.rumination_prob);
    for _ in 0..ruminations {
        tokens.push(RUMINATE);
        targets.push(fork.clone());
        for _ in 0..config.filler_run {
            tokens.push(FILLER);
            targets.push(Target::Token(FILLER));
        }
        tokens.push(s);
        targets.push(Target::Token(s));
    }
    tokens.push(THINK_CLOSE);
    targets.push(fork);
    tokens.extend([s, EOS]);
    targets.extend([Target::Token(s), Target::Token(EOS)]);
    (tokens, targets)
}

/// Mean per-token cross-entropy (nats) and its gradient of the negative,
/// i.e. the log-likelihood ascent direction.
fn likelihood_gradient(
    params: &Params,
    fmap: &FeatureMap,
    scripts: &[(TaskInstance, Vec<TokenId>, Vec<Target>)],
) -> Result<(f64, Vec<f64>)> {
    let total: usize = scripts.iter().map(|s| s.1.len()).sum();
    let inv = 1.0 / total as f64;
    let parts = scripts
        .par_iter()
        .map(|(inst, tokens, targets)| {
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            let mut ctx = inst.context_prefix();
            for (j, (tok, target)) in tokens.iter().zip(targets).enumerate() {
                let phi = fmap.features(&ctx, j);
                let dist = params.distribution(&phi)?;
                let mut want = vec![0.0; dist.size()];
                match *target {
                    Target::Token(t) => want[t] = 1.0,
                    Target::Fork(q) => {
                        want[RUMINATE] = q;
                        want[THINK_CLOSE] = 1.0 - q;
                    }
                }
                let cot: Vec<f64> = want.iter().zip(&dist.probs).map(|(w, p)| w - p).collect();
                loss -= want
                    .iter()
                    .zip(&dist.log_probs)
                    .filter(|(w, _)| **w > 0.0)
                    .map(|(w, l)| w * l)
                    .sum::<f64>();
                params.accumulate(&phi, &dist, &cot, inv, &mut grad);
                ctx.push(*tok);
            }
            Ok((loss, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((loss * inv, grad))
}

/// Fits `initial` to the verbose script on mixed-tier prompts.
pub fn pretrain_verbose(
    initial: Params,
    fmap: &FeatureMap,
    config: &PretrainConfig,
    seed: u64,
) -> Result<Params> {
    config.validate()?;
    let mut params = initial;
    let mut adam = AdamState::new(params.len());
    for step in 0..config.steps {
        let scripts: Vec<_> = (0..config.batch_prompts)
            .map(|i| {
                let mut rng = stream(seed, "pretrain", &[step as u64, i as u64]);
                let inst = generate_instance(&mut rng, TierMix::Mixed, i as u64);
                // cover every rumination count up to the cap uniformly
                let r = i % (config.max_ruminations + 1);
                let (tokens, targets) = verbose_script(&inst, r, config);
                (inst, tokens, targets)
            })
            .collect();
        let (_, grad) = likelihood_gradient(&params, fmap, &scripts)?;
        if !norm(&grad).is_finite() {
            return Err(CesError::NonFinite(format!("pretraining gradient at step {step}")));
        }
        adam_step(&mut params, &grad, &mut adam, config.lr)?;
    }
    Ok(params)
}

/// Freshly initialised policy of the configured shape.
pub fn initial_params(
    arch: crate::policy::Architecture,
    fmap: &FeatureMap,
    temperature: f64,
    init_scale: f64,
    seed: u64,
) -> Params {
    let mut rng = stream(seed, "init", &[]);
    PolicyParams::random(arch, fmap.vocab_size, fmap.dim(), temperature, init_scale, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::vocab::Vocabulary;
    use crate::tasks::{check_accuracy, check_format};

    #[test]
    fn script_layout() {
        let cfg = PretrainConfig { filler_run: 2, ..Default::default() };
        let inst = TaskInstance::from_operands(0, vec![3, 5, 2]);
        let (tokens, targets) = verbose_script(&inst, 1, &cfg);
        let v = Vocabulary::arithmetic();
        assert_eq!(
            v.render(&tokens),
            "<think> ~ ~ ~ ~ ~ ~ 3 + 8 + 0 <rum> . . 0 </think> 0 <eos>"
        );
        assert_eq!(tokens.len(), targets.len());
        assert_eq!(check_format(&tokens), 1);
        assert_eq!(check_accuracy(&inst, &tokens), 1);
        assert_eq!(targets.iter().filter(|t| matches!(t, Target::Fork(_))).count(), 2);
    }

    #[test]
    fn six_operands_fill_the_echo() {
        let cfg = PretrainConfig::default();
        let inst = TaskInstance::from_operands(0, vec![9, 9, 9, 9, 9, 9]);
        let (tokens, _) = verbose_script(&inst, 0, &cfg);
        let v = Vocabulary::arithmetic();
        assert_eq!(v.render(&tokens), "<think> 9 + 8 + 7 + 6 + 5 + 4 </think> 4 <eos>");
    }
}
