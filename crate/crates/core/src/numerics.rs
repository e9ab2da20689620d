//! Stable dense-vector kernels: log-sum-exp, temperature-scaled softmax,
//! Shannon entropy and KL divergence. Everything is in nats.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent f64 math when std is linked
use num_traits::Float;

use crate::error::{bail, Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`SoftDistribution::from_probs`].
pub const SUM_TOLERANCE: f64 = 1e-12;

pub(crate) fn check_logits(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        bail!(InvalidInput, "logit vector needs at least 2 entries, got {}", v.len());
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        bail!(InvalidInput, "non-finite logit {} at index {i}", v[i]);
    }
    Ok(())
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

/// `log Σ exp(v_c)` via max-shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    check_logits(v)?;
    Ok(lse_unchecked(v, 1.0))
}

/// `log Σ exp(v_c / tau)` for already validated inputs.
#[inline]
pub(crate) fn lse_unchecked(v: &[f64], tau: f64) -> f64 {
    let (max, tail) = lse_parts(v, tau);
    max + tail
}

/// `(max_c v_c/τ, ln(1 + Σ_{c≠top} exp(v_c/τ − max)))`. Keeping the top term
/// out of the sum lets `ln_1p` and the split subtraction below preserve
/// tiny tail masses.
#[inline]
fn lse_parts(v: &[f64], tau: f64) -> (f64, f64) {
    let top = (0..v.len()).fold(0, |best, k| if v[k] > v[best] { k } else { best });
    let max = v[top] / tau;
    let tail: f64 = v
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, &x)| (x / tau - max).exp())
        .sum();
    (max, tail.ln_1p())
}

/// Writes `softmax(v / tau)` and its logarithm into the output buffers.
/// Log-probabilities are formed as `(v/tau − max) − ln_1p(tail)` rather
/// than `ln(p)`.
#[inline]
pub(crate) fn softmax_into(v: &[f64], tau: f64, probs: &mut [f64], log_probs: &mut [f64]) {
    let (max, tail) = lse_parts(v, tau);
    for ((&x, p), lp) in v.iter().zip(probs.iter_mut()).zip(log_probs.iter_mut()) {
        *lp = (x / tau - max) - tail;
        *p = lp.exp();
    }
}

/// A probability vector over `C` classes, kept alongside its log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl SoftDistribution {
    /// Validates an explicit probability vector: entries in `(0, 1]`,
    /// summing to one within [`SUM_TOLERANCE`].
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            bail!(InvalidInput, "distribution needs at least 2 classes");
        }
        if let Some(i) = probs.iter().position(|&p| !(p > 0.0 && p <= 1.0)) {
            bail!(InvalidInput, "probability {} at index {i} outside (0, 1]", probs[i]);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            bail!(InvalidInput, "probabilities sum to {sum}, expected 1");
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self { probs, log_probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

/// `softmax(v / tau)`.
pub fn softmax(v: &[f64], tau: f64) -> Result<SoftDistribution> {
    check_tau(tau)?;
    check_logits(v)?;
    let mut probs = vec![0.0; v.len()];
    let mut log_probs = vec![0.0; v.len()];
    softmax_into(v, tau, &mut probs, &mut log_probs);
    Ok(SoftDistribution { probs, log_probs })
}

/// `log softmax(v / tau)`.
pub fn log_softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    softmax(v, tau).map(|d| d.log_probs)
}

/// Shannon entropy `-Σ p ln p`.
pub fn entropy(p: &SoftDistribution) -> f64 {
    entropy_of(&p.probs, &p.log_probs)
}

#[inline]
pub(crate) fn entropy_of(probs: &[f64], log_probs: &[f64]) -> f64 {
    let h: f64 = -probs.iter().zip(log_probs).map(|(p, lp)| p * lp).sum::<f64>();
    // rounding can leave a -0.0 or a few ulps below zero for one-hot rows
    h.max(0.0)
}

/// Entropy of `softmax(v / tau)` without materializing the distribution.
pub fn softmax_entropy(v: &[f64], tau: f64) -> Result<f64> {
    softmax(v, tau).map(|d| entropy(&d))
}

/// `KL(p ‖ q) = Σ p (ln p − ln q)`.
pub fn kl_divergence(p: &SoftDistribution, q: &SoftDistribution) -> Result<f64> {
    if p.len() != q.len() {
        bail!(Shape, "KL between {} and {} classes", p.len(), q.len());
    }
    Ok(kl_of(&p.probs, &p.log_probs, &q.log_probs))
}

#[inline]
pub(crate) fn kl_of(p: &[f64], log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(log_p.iter().zip(log_q))
        .map(|(p, (lp, lq))| p * (lp - lq))
        .sum();
    kl.max(0.0)
}
