//! Tiny autoregressive policy with exact gradients of log-probabilities and
//! token entropy.
//!
//! Two architectures share one flat parameter vector:
//!
//! * `Linear`: `logits = W·φ / T` with `W` of shape `V × F`.
//! * `Hidden { units }`: `logits = (W₂·tanh(W₁·φ + b₁) + b₂) / T`.
//!
//! `φ` is always the sparse context encoding from [`FeatureMap`]. Gradients
//! are obtained by pulling a logit-space cotangent back through the network
//! (`accumulate`), which keeps log-prob and entropy gradients on one path.

pub mod features;
pub mod vocab;

pub use features::{ContextFeatures, FeatureMap};
pub use vocab::{TokenId, Vocabulary};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CesError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Linear,
    Hidden { units: usize },
}

impl Architecture {
    pub fn param_count(&self, vocab_size: usize, feature_dim: usize) -> usize {
        match *self {
            Architecture::Linear => vocab_size * feature_dim,
            Architecture::Hidden { units } => {
                units * feature_dim + units + vocab_size * units + vocab_size
            }
        }
    }
}

/// Parameters `θ` of the policy plus its sampling temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    arch: Architecture,
    vocab_size: usize,
    feature_dim: usize,
    pub weights: Vec<T>,
    temperature: T,
}

/// Next-token distribution at one context, with the activations needed to
/// backpropagate through it.
#[derive(Debug, Clone)]
pub struct TokenDistribution<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub log_probs: Vec<T>,
    hidden: Vec<T>,
    temperature: T,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(arch: Architecture, vocab_size: usize, feature_dim: usize, temperature: T) -> Self {
        let n = arch.param_count(vocab_size, feature_dim);
        PolicyParams {
            arch,
            vocab_size,
            feature_dim,
            weights: vec![T::zero(); n],
            temperature,
        }
    }

    /// Uniform `[-scale, scale]` input-layer weights; output layer starts at zero
    /// so the initial policy is uniform.
    pub fn random<R: Rng>(
        arch: Architecture,
        vocab_size: usize,
        feature_dim: usize,
        temperature: T,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(arch, vocab_size, feature_dim, temperature);
        let n_in = match arch {
            Architecture::Linear => 0,
            Architecture::Hidden { units } => units * feature_dim + units,
        };
        for w in p.weights.iter_mut().take(n_in) {
            *w = T::of(rng.random_range(-scale..=scale));
        }
        p
    }

    pub fn from_weights(
        arch: Architecture,
        vocab_size: usize,
        feature_dim: usize,
        weights: Vec<T>,
        temperature: T,
    ) -> Result<Self> {
        let p = PolicyParams {
            arch,
            vocab_size,
            feature_dim,
            weights,
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.arch.param_count(self.vocab_size, self.feature_dim);
        if self.weights.len() != expected {
            return Err(CesError::Dimension(format!(
                "expected {expected} parameters, got {}",
                self.weights.len()
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > T::zero()) {
            return Err(CesError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(i) = self.weights.iter().position(|w| !w.is_finite()) {
            return Err(CesError::NonFinite(format!("parameter {i} is {}", self.weights[i])));
        }
        Ok(())
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn with_temperature(&self, temperature: T) -> Self {
        PolicyParams {
            temperature,
            ..self.clone()
        }
    }

    fn check_phi(&self, phi: &ContextFeatures) -> Result<()> {
        if phi.dim != self.feature_dim {
            return Err(CesError::Dimension(format!(
                "feature dim {} does not match policy dim {}",
                phi.dim, self.feature_dim
            )));
        }
        Ok(())
    }

    /// Raw network outputs before temperature scaling.
    fn outputs(&self, phi: &ContextFeatures) -> (Vec<T>, Vec<T>) {
        let (v, f) = (self.vocab_size, self.feature_dim);
        match self.arch {
            Architecture::Linear => {
                let out = (0..v)
                    .map(|row| phi.active.iter().map(|&i| self.weights[row * f + i]).sum())
                    .collect();
                (out, Vec::new())
            }
            Architecture::Hidden { units } => {
                let (w1, rest) = self.weights.split_at(units * f);
                let (b1, rest) = rest.split_at(units);
                let (w2, b2) = rest.split_at(v * units);
                let hidden: Vec<T> = (0..units)
                    .map(|h| {
                        let pre = phi.active.iter().map(|&i| w1[h * f + i]).sum::<T>() + b1[h];
                        pre.tanh()
                    })
                    .collect();
                let out = (0..v)
                    .map(|row| {
                        let dot: T = w2[row * units..(row + 1) * units]
                            .iter()
                            .zip(&hidden)
                            .map(|(&w, &h)| w * h)
                            .sum();
                        dot + b2[row]
                    })
                    .collect();
                (out, hidden)
            }
        }
    }

    pub fn distribution(&self, phi: &ContextFeatures) -> Result<TokenDistribution<T>> {
        self.distribution_at(phi, self.temperature)
    }

    /// Same network, different sampling temperature (used for evaluation).
    pub fn distribution_at(&self, phi: &ContextFeatures, temperature: T) -> Result<TokenDistribution<T>> {
        self.check_phi(phi)?;
        let (out, hidden) = self.outputs(phi);
        let logits: Vec<T> = out.into_iter().map(|o| o / temperature).collect();
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(CesError::NonFinite(format!(
                "logit for token {i} is {} (temperature {temperature})",
                logits[i]
            )));
        }
        Ok(TokenDistribution::from_logits(logits, hidden, temperature))
    }

    /// Adds `scale · ∂(cotangent · logits)/∂θ` into `grad`.
    pub fn accumulate(
        &self,
        phi: &ContextFeatures,
        dist: &TokenDistribution<T>,
        cotangent: &[T],
        scale: T,
        grad: &mut [T],
    ) {
        debug_assert_eq!(grad.len(), self.weights.len());
        let (v, f) = (self.vocab_size, self.feature_dim);
        let inv_t = scale / dist.temperature;
        match self.arch {
            Architecture::Linear => {
                for (row, &c) in cotangent.iter().enumerate() {
                    if c == T::zero() {
                        continue;
                    }
                    let g = c * inv_t;
                    for &i in &phi.active {
                        grad[row * f + i] += g;
                    }
                }
            }
            Architecture::Hidden { units } => {
                let w2 = &self.weights[units * f + units..units * f + units + v * units];
                let mut d_hidden = vec![T::zero(); units];
                {
                    let (_, rest) = grad.split_at_mut(units * f + units);
                    let (g_w2, g_b2) = rest.split_at_mut(v * units);
                    for (row, &c) in cotangent.iter().enumerate() {
                        if c == T::zero() {
                            continue;
                        }
                        let g = c * inv_t;
                        g_b2[row] += g;
                        let w_row = &w2[row * units..(row + 1) * units];
                        let g_row = &mut g_w2[row * units..(row + 1) * units];
                        for h in 0..units {
                            g_row[h] += g * dist.hidden[h];
                            d_hidden[h] += g * w_row[h];
                        }
                    }
                }
                let (g_w1, rest) = grad.split_at_mut(units * f);
                let g_b1 = &mut rest[..units];
                for h in 0..units {
                    let hv = dist.hidden[h];
                    let d_pre = d_hidden[h] * (T::one() - hv * hv);
                    if d_pre == T::zero() {
                        continue;
                    }
                    g_b1[h] += d_pre;
                    for &i in &phi.active {
                        g_w1[h * f + i] += d_pre;
                    }
                }
            }
        }
    }

    pub fn log_prob(&self, phi: &ContextFeatures, token: TokenId) -> Result<T> {
        self.check_token(token)?;
        Ok(self.distribution(phi)?.log_probs[token])
    }

    pub fn grad_log_prob(&self, phi: &ContextFeatures, token: TokenId) -> Result<Vec<T>> {
        self.check_token(token)?;
        let dist = self.distribution(phi)?;
        let mut grad = vec![T::zero(); self.weights.len()];
        self.accumulate(phi, &dist, &dist.dlogits_log_prob(token), T::one(), &mut grad);
        Ok(grad)
    }

    pub fn entropy_bits(&self, phi: &ContextFeatures) -> Result<T> {
        Ok(self.distribution(phi)?.entropy_bits())
    }

    pub fn grad_entropy_bits(&self, phi: &ContextFeatures) -> Result<Vec<T>> {
        let dist = self.distribution(phi)?;
        let mut grad = vec![T::zero(); self.weights.len()];
        self.accumulate(phi, &dist, &dist.dlogits_entropy_bits(), T::one(), &mut grad);
        Ok(grad)
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token >= self.vocab_size {
            return Err(CesError::Input(format!(
                "token {token} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> TokenDistribution<T> {
    fn from_logits(logits: Vec<T>, hidden: Vec<T>, temperature: T) -> Self {
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let log_probs: Vec<T> = logits.iter().map(|&z| z - lse).collect();
        let probs = log_probs.iter().map(|&l| l.exp()).collect();
        TokenDistribution {
            logits,
            probs,
            log_probs,
            hidden,
            temperature,
        }
    }

    pub fn size(&self) -> usize {
        self.probs.len()
    }

    /// Shannon entropy in bits, with `0·log 0 = 0`.
    pub fn entropy_bits(&self) -> T {
        let nats: T = self
            .probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(&p, _)| p > T::zero())
            .map(|(&p, &l)| -p * l)
            .sum();
        (nats / T::LN_2()).max(T::zero())
    }

    /// `∂ log p(token) / ∂ logits = onehot(token) − p`.
    pub fn dlogits_log_prob(&self, token: TokenId) -> Vec<T> {
        let mut d: Vec<T> = self.probs.iter().map(|&p| -p).collect();
        d[token] += T::one();
        d
    }

    /// `∂H_bits/∂z_k = −p_k (ln p_k + H_nats) / ln 2`.
    pub fn dlogits_entropy_bits(&self) -> Vec<T> {
        let h_nats = self.entropy_bits() * T::LN_2();
        self.probs
            .iter()
            .zip(&self.log_probs)
            .map(|(&p, &l)| {
                if p > T::zero() {
                    -p * (l + h_nats) / T::LN_2()
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw; consumes exactly one uniform from `rng`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> TokenId {
        let u = T::of(rng.random::<f64>());
        let mut acc = T::zero();
        let mut last_nonzero = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > T::zero() {
                last_nonzero = i;
            }
            acc += p;
            if u < acc {
                return i;
            }
        }
        last_nonzero
    }
}

/// Entropy in bits of an explicit probability vector.
pub fn entropy_bits<T: Scalar>(probs: &[T]) -> T {
    let nats: T = probs
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| -p * p.ln())
        .sum();
    (nats / T::LN_2()).max(T::zero())
}

/// Convenience wrapper: features, then next-token distribution.
pub fn distribution_for<T: Scalar>(
    params: &PolicyParams<T>,
    fmap: &FeatureMap,
    context: &[TokenId],
    position: usize,
) -> Result<TokenDistribution<T>> {
    params.distribution(&fmap.features(context, position))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(v: usize, fm: &FeatureMap) -> PolicyParams<f64> {
        PolicyParams::zeros(Architecture::Linear, v, fm.dim(), 1.0)
    }

    fn random_params(arch: Architecture, fm: &FeatureMap, seed: u64) -> PolicyParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParams::random(arch, fm.vocab_size, fm.dim(), 1.0, 0.8, &mut rng);
        for w in p.weights.iter_mut() {
            *w += rng.random_range(-0.8..0.8);
        }
        p
    }

    #[test]
    fn zero_weights_give_uniform() {
        let fm = FeatureMap::default_for(16, 32);
        let p = linear(16, &fm);
        let d = p.distribution(&fm.features(&[4, 5], 1)).unwrap();
        for &q in &d.probs {
            assert!((q - 1.0 / 16.0).abs() < 1e-15);
        }
        assert!((d.entropy_bits() - 4.0).abs() < 1e-12);
        assert!((p.log_prob(&fm.features(&[], 0), 7).unwrap() - (1.0f64 / 16.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit() {
        let fm = FeatureMap::default_for(10, 32);
        let mut p = linear(10, &fm);
        let phi = fm.features(&[], 0);
        // bucket feature is shared by every context at position 0
        let bucket = *phi.active.last().unwrap();
        p.weights[6 * fm.dim() + bucket] = 30.0;
        let d = p.distribution(&phi).unwrap();
        assert!(d.probs[6] > 1.0 - 1e-9);
        assert_eq!(d.argmax(), 6);
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(entropy_bits(&[1.0f64, 0.0, 0.0]), 0.0);
        assert!((entropy_bits(&[0.5f64, 0.5, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((entropy_bits(&[1.0f64 / 16.0; 16]) - 4.0).abs() < 1e-12);
        assert!((entropy_bits(&[0.25f32; 4]) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_logit_is_an_error() {
        let fm = FeatureMap::default_for(8, 16);
        let mut p = linear(8, &fm);
        p.weights[0] = f64::NAN;
        assert!(matches!(
            p.distribution(&fm.features(&[], 0)),
            Err(CesError::NonFinite(_))
        ));
    }

    #[test]
    fn score_identity_both_architectures() {
        let fm = FeatureMap::new(10, 2, 3, 12);
        for arch in [Architecture::Linear, Architecture::Hidden { units: 5 }] {
            let p = random_params(arch, &fm, 3);
            let phi = fm.features(&[4, 9, 6], 5);
            let d = p.distribution(&phi).unwrap();
            let mut acc = vec![0.0; p.len()];
            for tok in 0..10 {
                let g = p.grad_log_prob(&phi, tok).unwrap();
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += d.probs[tok] * gi;
                }
            }
            assert!(acc.iter().all(|x| x.abs() < 1e-10), "{arch:?}");
        }
    }

    #[test]
    fn uniform_entropy_is_stationary() {
        let fm = FeatureMap::default_for(12, 16);
        let p = linear(12, &fm);
        let g = p.grad_entropy_bits(&fm.features(&[5], 1)).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn uniform_log_prob_gradient_closed_form() {
        let v = 8;
        let fm = FeatureMap::default_for(v, 16);
        let p = linear(v, &fm);
        let phi = fm.features(&[5, 6], 2);
        let g = p.grad_log_prob(&phi, 4).unwrap();
        let dense: Vec<f64> = phi.to_dense();
        for row in 0..v {
            let coeff = if row == 4 { 1.0 - 1.0 / v as f64 } else { -1.0 / v as f64 };
            for col in 0..fm.dim() {
                assert!((g[row * fm.dim() + col] - coeff * dense[col]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn peaked_distribution_entropy_gradient_flattens() {
        let fm = FeatureMap::default_for(8, 16);
        let mut p = linear(8, &fm);
        let phi = fm.features(&[], 0);
        let bucket = *phi.active.last().unwrap();
        p.weights[3 * fm.dim() + bucket] = 8.0;
        let d = p.distribution(&phi).unwrap();
        let dz = d.dlogits_entropy_bits();
        // direction that lowers the dominant logit and raises the rest
        let mut flatten = vec![1.0 / 7.0; 8];
        flatten[3] = -1.0;
        let dot: f64 = dz.iter().zip(&flatten).map(|(a, b)| a * b).sum();
        assert!(dot > 0.0);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_one_hot() {
        let fm = FeatureMap::default_for(8, 16);
        let mut p = linear(8, &fm);
        let phi = fm.features(&[], 0);
        let bucket = *phi.active.last().unwrap();
        p.weights[5 * fm.dim() + bucket] = 60.0;
        let d = p.distribution(&phi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..200).all(|_| d.sample(&mut rng) == 5));

        let u = linear(8, &fm).distribution(&phi).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<_> = (0..50).map(|_| u.sample(&mut a)).collect();
        let ys: Vec<_> = (0..50).map(|_| u.sample(&mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let v = 16;
        let fm = FeatureMap::default_for(v, 16);
        let d = linear(v, &fm).distribution(&fm.features(&[], 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut counts = vec![0usize; v];
        for _ in 0..n {
            counts[d.sample(&mut rng)] += 1;
        }
        let p = 1.0 / v as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn hidden_layer_param_layout() {
        let arch = Architecture::Hidden { units: 4 };
        assert_eq!(arch.param_count(10, 20), 4 * 20 + 4 + 10 * 4 + 10);
        let p = PolicyParams::<f64>::zeros(arch, 10, 20, 1.0);
        assert!(p.validate().is_ok());
        let bad = PolicyParams::from_weights(arch, 10, 20, vec![0.0; 3], 1.0);
        assert!(matches!(bad, Err(CesError::Dimension(_))));
    }
}
