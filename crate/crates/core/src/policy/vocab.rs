use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CesError, Result};

pub type TokenId = usize;

/// Separator and left padding for prompts and short contexts.
pub const PROMPT_SEP: TokenId = 0;
pub const THINK_OPEN: TokenId = 1;
pub const THINK_CLOSE: TokenId = 2;
pub const EOS: TokenId = 3;

// Layout of the arithmetic vocabulary beyond the reserved ids.
pub const DIGIT_BASE: TokenId = 4;
pub const PLUS: TokenId = 14;
pub const QUERY: TokenId = 15;
/// Placeholder echoed for prompt padding inside the think block.
pub const ECHO_PAD: TokenId = 16;
/// Opens an optional re-statement of the running sum.
pub const RUMINATE: TokenId = 17;
pub const FILLER: TokenId = 18;

pub const ARITHMETIC_SIZE: usize = 19;

/// Ordered token names; ids are dense `0..V`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 8 {
            return Err(CesError::Config(format!(
                "vocabulary needs at least 8 symbols, got {}",
                symbols.len()
            )));
        }
        let mut sorted = symbols.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != symbols.len() {
            return Err(CesError::Config("duplicate vocabulary symbols".into()));
        }
        Ok(Vocabulary { symbols })
    }

    /// The vocabulary used by the modular-sum tasks.
    pub fn arithmetic() -> Self {
        let mut symbols: Vec<String> = ["<sep>", "<think>", "</think>", "<eos>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        symbols.extend((0..10).map(|d| d.to_string()));
        symbols.extend(["+", "?", "~", "<rum>", "."].iter().map(|s| s.to_string()));
        debug_assert_eq!(symbols.len(), ARITHMETIC_SIZE);
        Vocabulary { symbols }
    }

    /// Reserved ids followed by anonymous symbols; handy for small test policies.
    pub fn synthetic(size: usize) -> Result<Self> {
        let mut symbols: Vec<String> = ["<sep>", "<think>", "</think>", "<eos>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        symbols.extend((4..size).map(|i| format!("t{i}")));
        Vocabulary::new(symbols)
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.symbols.len()
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable 64-bit fingerprint of the symbol list, stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        for s in &self.symbols {
            hasher.update(s.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}

pub fn digit_token(d: u8) -> TokenId {
    debug_assert!(d < 10);
    DIGIT_BASE + d as usize
}

pub fn token_digit(id: TokenId) -> Option<u8> {
    if (DIGIT_BASE..DIGIT_BASE + 10).contains(&id) {
        Some((id - DIGIT_BASE) as u8)
    } else {
        None
    }
}
