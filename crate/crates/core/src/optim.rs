use crate::error::{CesError, Result};
use crate::policy::PolicyParams;
use crate::scalar::Scalar;

/// Adam moments for gradient *ascent*.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }
}

/// `θ += lr · m̂ / (√v̂ + eps)`.
pub fn adam_step<T: Scalar>(
    params: &mut PolicyParams<T>,
    gradient: &[T],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if gradient.len() != params.len() || state.m.len() != params.len() {
        return Err(CesError::Dimension(format!(
            "gradient has {} entries, optimizer {}, params {}",
            gradient.len(),
            state.m.len(),
            params.len()
        )));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(CesError::NonFinite(format!("gradient entry {i} is {}", gradient[i])));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = T::one() - state.beta1.powi(t);
    let c2 = T::one() - state.beta2.powi(t);
    for (((w, &g), m), v) in params
        .weights
        .iter_mut()
        .zip(gradient)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (T::one() - state.beta1) * g;
        *v = state.beta2 * *v + (T::one() - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w += lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
