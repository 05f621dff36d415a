//! Absorbing-state forward process: the mask schedule, random masking, and
//! error-token corruption.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index;
use rand::Rng;

use crate::data::{TokenGrid, TokenId};
use crate::error::{Error, Result};

/// Fraction of tokens masked at normalized time `u`: `sin(πu/2)`.
pub fn mask_ratio(u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!("mask ratio argument {u} outside [0, 1]")));
    }
    Ok((FRAC_PI_2 * u).sin())
}

/// Masked-token counts `n_0..=n_T` for a `steps`-step schedule over `n` tokens.
///
/// `n_t = ⌈γ(t/T)·N⌉`, clamped from the top down so the sequence strictly
/// decreases from `N` at `t = T` to 0 at `t = 0`.
pub fn mask_schedule(steps: usize, n: usize) -> Result<Vec<usize>> {
    if steps == 0 || n == 0 {
        return Err(Error::Domain("schedule needs at least one step and one token".into()));
    }
    if steps > n {
        return Err(Error::Domain(format!("{steps} steps cannot each unmask one of {n} tokens")));
    }
    let mut counts = vec![0usize; steps + 1];
    counts[steps] = n;
    for t in (1..steps).rev() {
        let raw = (mask_ratio(t as f64 / steps as f64)? * n as f64).ceil() as usize;
        // sin(πu/2) ≥ u keeps raw ≥ t whenever N ≥ T, so the clamp never underflows
        counts[t] = raw.min(counts[t + 1] - 1);
    }
    counts[0] = 0;
    Ok(counts)
}

/// Number of masked tokens at step `t` of a `steps`-step schedule.
pub fn mask_count(t: usize, steps: usize, n: usize) -> Result<usize> {
    if t > steps {
        return Err(Error::Domain(format!("step {t} outside [0, {steps}]")));
    }
    Ok(mask_schedule(steps, n)?[t])
}

/// Binary mask with the convention unmasked = `true`, masked = `false`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskState {
    pub unmasked: Vec<bool>,
}

impl MaskState {
    pub fn all_masked(n: usize) -> Self {
        Self { unmasked: vec![false; n] }
    }

    pub fn all_unmasked(n: usize) -> Self {
        Self { unmasked: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.unmasked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unmasked.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.unmasked.iter().filter(|&&u| !u).count()
    }

    pub fn unmasked_count(&self) -> usize {
        self.len() - self.masked_count()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        !self.unmasked[i]
    }
}

/// Draws a training-time normalized step `u ∈ (0, 1]`.
pub fn sample_training_u(rng: &mut impl Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Masked count for a training-time `u`, at least one token.
pub fn training_mask_count(u: f64, n: usize) -> Result<usize> {
    Ok(((mask_ratio(u)? * n as f64).ceil() as usize).clamp(1, n))
}

/// Masks exactly `n` uniformly chosen positions of `x0`.
pub fn apply_random_mask(x0: &TokenGrid, n: usize, rng: &mut impl Rng) -> Result<(TokenGrid, MaskState)> {
    if n > x0.len() {
        return Err(Error::Domain(format!("cannot mask {n} of {} tokens", x0.len())));
    }
    if x0.masked_count() > 0 {
        return Err(Error::Contract("clean input already contains mask tokens".into()));
    }
    let mut xt = x0.clone();
    let mut mask = MaskState::all_unmasked(x0.len());
    for i in index::sample(rng, x0.len(), n) {
        xt.tokens[i] = x0.mask_id();
        mask.unmasked[i] = false;
    }
    Ok((xt, mask))
}

/// Error-token corruption parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub error_rate: f64,
}

impl CorruptionSpec {
    pub fn new(error_rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&error_rate) {
            return Err(Error::Config(format!("error rate {error_rate} outside [0, 1)")));
        }
        Ok(Self { error_rate })
    }
}

/// Replaces each unmasked token independently with probability `p` by a
/// uniformly drawn *different* real token. Masked positions are untouched.
pub fn corrupt_with_errors(
    xt: &TokenGrid,
    mask: &MaskState,
    spec: CorruptionSpec,
    rng: &mut impl Rng,
) -> Result<TokenGrid> {
    let k = xt.codebook_size;
    if k < 2 {
        return Err(Error::Config("error tokens need a codebook of at least two entries".into()));
    }
    if mask.len() != xt.len() {
        return Err(Error::Contract("mask and grid lengths differ".into()));
    }
    let mut zt = xt.clone();
    for i in 0..xt.len() {
        if mask.unmasked[i] != !xt.is_masked(i) {
            return Err(Error::Contract(format!("position {i} disagrees with its mask")));
        }
        if mask.is_masked(i) {
            continue;
        }
        if rng.random::<f64>() < spec.error_rate {
            let r = rng.random_range(0..(k - 1) as TokenId);
            zt.tokens[i] = if r < xt.tokens[i] { r } else { r + 1 };
        }
    }
    Ok(zt)
}
