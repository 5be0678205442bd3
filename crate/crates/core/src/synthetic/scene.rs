//! Seeded scenes: object sets, their visual rows and confusable partners.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::Vocab;
use crate::decoding::rng_for;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::PromptLayout;

/// Standard deviation of the noise added to the nonzero entries of a visual
/// row. Zero entries (position and type coordinates) stay exact.
pub const VISUAL_NOISE: f32 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    /// Ascending object token ids.
    pub objects: Vec<u32>,
    /// One row per object, aligned with `objects`; serialized as base64 of
    /// little-endian `f32`.
    #[serde(serialize_with = "rows_to_b64", deserialize_with = "rows_from_b64")]
    pub visual_embeddings: Vec<Vec<f32>>,
    /// `(present object, its absent partner)`.
    pub confusable_pairs: Vec<(u32, u32)>,
}

impl Scene {
    pub fn layout(&self, vocab: &Vocab) -> PromptLayout {
        vocab.layout(self.visual_embeddings.clone())
    }

    pub fn confusable(&self) -> Vec<u32> {
        self.confusable_pairs.iter().map(|p| p.1).collect()
    }
}

fn rows_to_b64<S: Serializer>(rows: &[Vec<f32>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let enc: Vec<String> = rows
        .iter()
        .map(|r| STANDARD.encode(r.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()))
        .collect();
    enc.serialize(s)
}

fn rows_from_b64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<f32>>, D::Error> {
    let enc = Vec::<String>::deserialize(d)?;
    enc.iter()
        .map(|e| {
            let bytes = STANDARD.decode(e).map_err(serde::de::Error::custom)?;
            if bytes.len() % 4 != 0 {
                return Err(serde::de::Error::custom("row byte length is not a multiple of 4"));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        })
        .collect()
}

/// Samples `num_objects` objects from distinct partner pairs, so no scene
/// holds both members of a pair, and builds their noisy visual rows from
/// `embedding` (the model's token embedding).
pub fn generate_scene<R: Rng + ?Sized>(
    rng: &mut R,
    scene_id: u64,
    num_objects: usize,
    vocab: &Vocab,
    embedding: &Matrix,
) -> Result<Scene> {
    let pairs = (vocab.n_objects() / 2) as usize;
    if num_objects == 0 || num_objects > pairs {
        return Err(Error::Argument(format!(
            "num_objects must lie in 1..={pairs} (one object per partner pair), got {num_objects}"
        )));
    }
    if embedding.rows != vocab.vocab_size as usize {
        return Err(Error::Argument(format!(
            "embedding has {} rows, vocabulary has {}",
            embedding.rows, vocab.vocab_size
        )));
    }
    let mut objects: Vec<u32> = sample(rng, pairs, num_objects)
        .into_iter()
        .map(|p| vocab.object_start + 2 * p as u32 + u32::from(rng.random::<bool>()))
        .collect();
    objects.sort_unstable();
    let noise = Normal::new(0.0f32, VISUAL_NOISE).expect("positive std");
    let visual_embeddings = objects
        .iter()
        .map(|&o| {
            embedding
                .row(o as usize)
                .iter()
                .map(|&v| {
                    let e = noise.sample(rng);
                    if v == 0.0 { 0.0 } else { v + e }
                })
                .collect()
        })
        .collect();
    let confusable_pairs = objects.iter().map(|&o| (o, vocab.partner(o))).collect();
    Ok(Scene {
        scene_id,
        objects,
        visual_embeddings,
        confusable_pairs,
    })
}

/// Scenes `0..count`, scene `i` drawn from stream `i` of `seed`.
pub fn generate_scenes(
    seed: u64,
    count: usize,
    num_objects: usize,
    vocab: &Vocab,
    embedding: &Matrix,
) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| generate_scene(&mut rng_for(seed, i), i, num_objects, vocab, embedding))
        .collect()
}
