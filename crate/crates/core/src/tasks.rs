//! Modular-sum prompts with exactly checkable answers.
//!
//! A prompt reads `d₁ + d₂ + … + d_k ?` and the answer is `(Σ dᵢ) mod 10`.
//! Responses are rewarded separately for the final digit and for the
//! `<think> … </think> digit <eos>` shape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::vocab::{
    digit_token, token_digit, TokenId, EOS, PLUS, PROMPT_SEP, QUERY, THINK_CLOSE, THINK_OPEN,
};

pub const MODULUS: u8 = 10;
pub const MIN_OPERANDS: usize = 2;
pub const MAX_OPERANDS: usize = 6;
/// Width every prompt is left-padded to, so the response always starts at
/// the same distance from the first operand slot.
pub const PROMPT_WIDTH: usize = 2 * MAX_OPERANDS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Hard,
}

impl Tier {
    pub fn operand_range(self) -> (usize, usize) {
        match self {
            Tier::Easy => (2, 3),
            Tier::Hard => (4, 6),
        }
    }

    pub fn of_count(k: usize) -> Tier {
        if k <= 3 {
            Tier::Easy
        } else {
            Tier::Hard
        }
    }
}

/// Which tiers a prompt stream draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierMix {
    Easy,
    Hard,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub operands: Vec<u8>,
    pub truth: u8,
    pub tier: Tier,
    pub prompt: Vec<TokenId>,
}

impl TaskInstance {
    pub fn from_operands(id: u64, operands: Vec<u8>) -> Self {
        assert!(
            (MIN_OPERANDS..=MAX_OPERANDS).contains(&operands.len()),
            "operand count {} outside [{MIN_OPERANDS}, {MAX_OPERANDS}]",
            operands.len()
        );
        assert!(operands.iter().all(|&d| d < MODULUS));
        let truth = ground_truth(&operands);
        let mut prompt = Vec::with_capacity(2 * operands.len());
        for (i, &d) in operands.iter().enumerate() {
            if i > 0 {
                prompt.push(PLUS);
            }
            prompt.push(digit_token(d));
        }
        prompt.push(QUERY);
        TaskInstance {
            id,
            tier: Tier::of_count(operands.len()),
            operands,
            truth,
            prompt,
        }
    }

    /// Prompt left-padded with `PROMPT_SEP` to [`PROMPT_WIDTH`]; the policy
    /// conditions on this followed by the response prefix.
    pub fn context_prefix(&self) -> Vec<TokenId> {
        let mut ctx = vec![PROMPT_SEP; PROMPT_WIDTH - self.prompt.len()];
        ctx.extend_from_slice(&self.prompt);
        ctx
    }

    /// Structural validation for instances read from disk.
    pub fn is_consistent(&self) -> bool {
        (MIN_OPERANDS..=MAX_OPERANDS).contains(&self.operands.len())
            && self.operands.iter().all(|&d| d < MODULUS)
            && *self == TaskInstance::from_operands(self.id, self.operands.clone())
    }
}

pub fn ground_truth(operands: &[u8]) -> u8 {
    (operands.iter().map(|&d| d as u32).sum::<u32>() % MODULUS as u32) as u8
}

pub fn generate_instance<R: Rng>(rng: &mut R, mix: TierMix, id: u64) -> TaskInstance {
    let tier = match mix {
        TierMix::Easy => Tier::Easy,
        TierMix::Hard => Tier::Hard,
        TierMix::Mixed => {
            if rng.random_bool(0.5) {
                Tier::Easy
            } else {
                Tier::Hard
            }
        }
    };
    let (lo, hi) = tier.operand_range();
    let k = rng.random_range(lo..=hi);
    let operands = (0..k).map(|_| rng.random_range(0..MODULUS)).collect();
    TaskInstance::from_operands(id, operands)
}

/// `1` iff `tokens` is `<think> … </think> digit <eos>`; anything without a
/// final `<eos>` (truncated) scores `0`.
pub fn check_format(tokens: &[TokenId]) -> u8 {
    let [first, rest @ ..] = tokens else {
        return 0;
    };
    if *first != THINK_OPEN {
        return 0;
    }
    let Some(close) = rest.iter().position(|&t| t == THINK_CLOSE) else {
        return 0;
    };
    match &rest[close + 1..] {
        [d, eos] if token_digit(*d).is_some() && *eos == EOS => 1,
        _ => 0,
    }
}

/// First digit after the first `</think>`; without a `</think>`, the last
/// digit anywhere in the response.
pub fn extract_answer(tokens: &[TokenId]) -> Option<u8> {
    match tokens.iter().position(|&t| t == THINK_CLOSE) {
        Some(close) => tokens[close + 1..].iter().find_map(|&t| token_digit(t)),
        None => tokens.iter().rev().find_map(|&t| token_digit(t)),
    }
}

pub fn check_accuracy(instance: &TaskInstance, tokens: &[TokenId]) -> u8 {
    u8::from(extract_answer(tokens) == Some(instance.truth))
}

/// Shortest well-formed response: `<think> </think> digit <eos>`.
pub const MINIMAL_FORMAT_LEN: usize = 4;
