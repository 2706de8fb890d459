use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, PROMPT_SEP};

/// Fixed encoding of a generation context: one-hot slots for the last
/// `window` tokens (oldest first) followed by a position bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub vocab_size: usize,
    pub window: usize,
    pub buckets: usize,
    pub max_len: usize,
}

/// Sparse binary feature vector; `active` lists the `window + 1` hot indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub active: Vec<usize>,
    pub dim: usize,
}

impl FeatureMap {
    pub fn new(vocab_size: usize, window: usize, buckets: usize, max_len: usize) -> Self {
        assert!(window >= 1 && buckets >= 1 && max_len >= 1);
        FeatureMap {
            vocab_size,
            window,
            buckets,
            max_len,
        }
    }

    /// Window of 3 and 4 position buckets.
    pub fn default_for(vocab_size: usize, max_len: usize) -> Self {
        FeatureMap::new(vocab_size, 3, 4, max_len)
    }

    pub fn dim(&self) -> usize {
        self.window * self.vocab_size + self.buckets
    }

    pub fn bucket(&self, position: usize) -> usize {
        (position * self.buckets / self.max_len).min(self.buckets - 1)
    }

    /// `context` is every token before the one being predicted; `position`
    /// is that token's index within the response.
    pub fn features(&self, context: &[TokenId], position: usize) -> ContextFeatures {
        let mut active = Vec::with_capacity(self.window + 1);
        let pad = self.window.saturating_sub(context.len());
        for slot in 0..self.window {
            let token = if slot < pad {
                PROMPT_SEP
            } else {
                context[context.len() + slot - self.window]
            };
            debug_assert!(token < self.vocab_size);
            active.push(slot * self.vocab_size + token);
        }
        active.push(self.window * self.vocab_size + self.bucket(position));
        ContextFeatures {
            active,
            dim: self.dim(),
        }
    }
}

impl ContextFeatures {
    pub fn to_dense<T: num_traits::Float>(&self) -> Vec<T> {
        let mut dense = vec![T::zero(); self.dim];
        for &i in &self.active {
            dense[i] = T::one();
        }
        dense
    }
}
