use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::softmax;

/// Argmax with ties broken by the lowest token id.
pub fn greedy_select(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Token ids of the nucleus, most probable first, with their probabilities.
///
/// Tokens are sorted by descending probability (ascending id on ties) and
/// the smallest prefix whose mass reaches `top_p` is kept.
pub fn nucleus_set(logits: &[f32], top_p: f64) -> Result<Vec<(u32, f64)>> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::Argument(format!("top_p must lie in (0, 1], got {top_p}")));
    }
    let probs = softmax(logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = Vec::new();
    let mut mass = 0.0;
    for i in order {
        if probs[i] == 0.0 && !out.is_empty() {
            break;
        }
        out.push((i as u32, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    Ok(out)
}

/// Samples from the renormalized nucleus.
pub fn nucleus_sample<R: Rng + ?Sized>(logits: &[f32], top_p: f64, rng: &mut R) -> Result<u32> {
    let nucleus = nucleus_set(logits, top_p)?;
    let mass: f64 = nucleus.iter().map(|p| p.1).sum();
    let mut u = rng.random::<f64>() * mass;
    for &(tok, p) in &nucleus {
        if u < p {
            return Ok(tok);
        }
        u -= p;
    }
    Ok(nucleus.last().expect("nucleus is never empty").0)
}
