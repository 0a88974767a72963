//! Vector helpers shared by the loss, clustering and ASI code.

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ‖a‖`, rejecting zero-norm and non-finite input.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if !n.is_finite() {
        return Err(Error::NonFinite("vector"));
    }
    if n == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine_similarity", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let c = dot(a, b) / (na * nb);
    if !c.is_finite() {
        return Err(Error::NonFinite("cosine_similarity"));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_similarity(a, b).map(|c| 1.0 - c)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    if logits.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
