//! CHAIR hallucination metrics and object-level F1 over captions.
//!
//! A caption is reduced to the set of object tokens it mentions; repeated
//! mentions collapse.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mentioned objects and ground-truth objects for one caption.
pub type CaptionObjects = (BTreeSet<u32>, BTreeSet<u32>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chair_s: f64,
    pub chair_i: f64,
    /// Mean per-caption object F1.
    pub f1: f64,
    pub captions: usize,
    pub captions_with_hallucination: usize,
    pub mentioned_objects: usize,
    pub hallucinated_objects: usize,
    /// Set when the batch mentions no objects at all, so `chair_i` is 0 by
    /// convention rather than a ratio.
    pub degenerate: bool,
}

impl ChairReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "chair_s",
        "chair_i",
        "f1",
        "captions",
        "captions_with_hallucination",
        "mentioned_objects",
        "hallucinated_objects",
        "degenerate",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.chair_s.to_string(),
            self.chair_i.to_string(),
            self.f1.to_string(),
            self.captions.to_string(),
            self.captions_with_hallucination.to_string(),
            self.mentioned_objects.to_string(),
            self.hallucinated_objects.to_string(),
            self.degenerate.to_string(),
        ]
    }
}

pub fn chair(batch: &[CaptionObjects]) -> Result<ChairReport> {
    if batch.is_empty() {
        return Err(Error::Argument("chair needs at least one caption".into()));
    }
    let mut mentioned = 0;
    let mut hallucinated = 0;
    let mut with_h = 0;
    let mut f1_sum = 0.0;
    for (m, truth) in batch {
        let h = m.difference(truth).count();
        mentioned += m.len();
        hallucinated += h;
        with_h += usize::from(h > 0);
        f1_sum += object_f1(m, truth);
    }
    let degenerate = mentioned == 0;
    Ok(ChairReport {
        chair_s: with_h as f64 / batch.len() as f64,
        chair_i: if degenerate { 0.0 } else { hallucinated as f64 / mentioned as f64 },
        f1: f1_sum / batch.len() as f64,
        captions: batch.len(),
        captions_with_hallucination: with_h,
        mentioned_objects: mentioned,
        hallucinated_objects: hallucinated,
        degenerate,
    })
}

/// Harmonic mean of precision and recall; 0 when either is undefined.
pub fn object_f1(mentioned: &BTreeSet<u32>, truth: &BTreeSet<u32>) -> f64 {
    if mentioned.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let hit = mentioned.intersection(truth).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / mentioned.len() as f64;
    let r = hit / truth.len() as f64;
    2.0 * p * r / (p + r)
}
