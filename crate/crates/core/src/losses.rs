//! Training objectives over candidate logits: full softmax, sampled softmax
//! with the log-proposal correction, the uncorrected contrastive loss, and
//! the clipped inverse-propensity-weighted loss.
//!
//! Every softmax-family loss returns `-log softmax(z)[pos]` computed with the
//! maximum subtracted, and its gradient `softmax(z) - onehot(pos)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Logits of one candidate set. `logq` holds natural-log proposal
/// probabilities, one per candidate, for the corrected loss.
#[derive(Debug, Clone, Copy)]
pub struct CandidateLogits<'a> {
    pub logits: &'a [f64],
    pub pos_index: usize,
    pub logq: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub dlogits: Vec<f64>,
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn softmax_cross_entropy(z: &[f64], pos: usize) -> Result<LossOutput> {
    if pos >= z.len() {
        return Err(Error::PositiveOutOfRange {
            index: pos,
            len: z.len(),
        });
    }
    let mut dlogits = vec![0.0; z.len()];
    let lse = math::softmax_into(z, &mut dlogits);
    dlogits[pos] -= 1.0;
    // lse >= z[pos] mathematically; clamp rounding below zero.
    let value = (lse - z[pos]).max(0.0);
    Ok(LossOutput { value, dlogits })
}

/// Maximum-likelihood loss over the whole catalog.
pub fn full_softmax_loss(all_logits: &[f64], target: usize) -> Result<LossOutput> {
    check_finite(all_logits, "logits")?;
    softmax_cross_entropy(all_logits, target)
}

/// Sampled softmax: the softmax of `logits - logq`.
pub fn sampled_softmax_loss(c: CandidateLogits<'_>) -> Result<LossOutput> {
    let logq = c.logq.ok_or(Error::MissingLogq)?;
    if logq.len() != c.logits.len() {
        return Err(Error::DimensionMismatch {
            expected: c.logits.len(),
            actual: logq.len(),
        });
    }
    check_finite(c.logits, "logits")?;
    check_finite(logq, "logq")?;
    let corrected: Vec<f64> = c.logits.iter().zip(logq).map(|(z, q)| z - q).collect();
    softmax_cross_entropy(&corrected, c.pos_index)
}

/// Contrastive loss: the softmax over the candidates with no correction.
/// Any `logq` in `c` is ignored.
pub fn contrastive_loss(c: CandidateLogits<'_>) -> Result<LossOutput> {
    check_finite(c.logits, "logits")?;
    softmax_cross_entropy(c.logits, c.pos_index)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpwTerm {
    pub value: f64,
    pub weight: f64,
}

/// `weight = 1 / max(q, clip_floor)`, `value = weight * neg_log_prob`.
/// A floor of zero disables clipping.
pub fn ipw_loss(neg_log_prob: f64, propensity: f64, clip_floor: f64) -> Result<IpwTerm> {
    if !(propensity > 0.0 && propensity <= 1.0) {
        return Err(Error::InvalidPropensity(propensity));
    }
    if !(0.0..=1.0).contains(&clip_floor) {
        return Err(Error::InvalidConfig(alloc::format!(
            "clip floor {clip_floor} outside [0, 1]"
        )));
    }
    if !neg_log_prob.is_finite() || neg_log_prob < 0.0 {
        return Err(Error::NonFinite("negative log probability"));
    }
    let weight = 1.0 / propensity.max(clip_floor);
    Ok(IpwTerm {
        value: weight * neg_log_prob,
        weight,
    })
}
