//! Synthetic captioning task: a vocabulary with an object-token range,
//! seeded scenes whose visual tokens are noisy object embeddings, and a
//! hand-constructed frozen model that describes scenes while a controllable
//! prior (`prior_strength`) drifts it toward confusable absent objects as
//! the caption grows.

mod scene;
mod toy;

pub use scene::{generate_scene, generate_scenes, Scene};
pub use toy::{build_toy_model, ToyCircuit, ToyModelSpec};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PromptLayout, VisualSegment};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// The instruction token that closes every prompt ("describe the image").
pub const QUERY: u32 = 3;
/// Filler words emitted after each object mention.
pub const FILL1: u32 = 4;
pub const FILL2: u32 = 5;
/// First generic text token; generic tokens run up to the object range.
pub const FIRST_TEXT: u32 = 6;

/// Token-id layout of the synthetic vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub vocab_size: u32,
    /// Object tokens are `object_start..vocab_size`.
    pub object_start: u32,
    /// Generic tokens placed between BOS and the visual tokens.
    pub system_prompt: Vec<u32>,
}

impl Vocab {
    pub fn new(vocab_size: u32, object_start: u32) -> Result<Self> {
        let v = Self {
            vocab_size,
            object_start,
            system_prompt: vec![FIRST_TEXT, FIRST_TEXT + 1],
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_start < FIRST_TEXT + self.system_prompt.len() as u32 {
            return Err(Error::Config(format!(
                "object range must start after the special and prompt tokens, got {}",
                self.object_start
            )));
        }
        if self.object_start >= self.vocab_size {
            return Err(Error::Config("object range is empty".into()));
        }
        if !self.n_objects().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "object range size must be even (objects are paired), got {}",
                self.n_objects()
            )));
        }
        if self
            .system_prompt
            .iter()
            .any(|&t| !(FIRST_TEXT..self.object_start).contains(&t))
        {
            return Err(Error::Config("system prompt must use generic text tokens".into()));
        }
        Ok(())
    }

    pub fn n_objects(&self) -> u32 {
        self.vocab_size - self.object_start
    }

    pub fn is_object(&self, t: u32) -> bool {
        (self.object_start..self.vocab_size).contains(&t)
    }

    /// The fixed co-occurrence partner of an object (objects come in pairs).
    pub fn partner(&self, o: u32) -> u32 {
        debug_assert!(self.is_object(o));
        self.object_start + ((o - self.object_start) ^ 1)
    }

    /// Object tokens appearing in a caption, as a set.
    pub fn mentioned_objects(&self, tokens: &[u32]) -> BTreeSet<u32> {
        tokens.iter().copied().filter(|&t| self.is_object(t)).collect()
    }

    pub fn stop_tokens(&self) -> Vec<u32> {
        vec![EOS]
    }

    /// `[BOS, system prompt] [visual rows] [QUERY]`.
    pub fn layout(&self, visual: Vec<Vec<f32>>) -> PromptLayout {
        let mut system = vec![BOS];
        system.extend(&self.system_prompt);
        PromptLayout::new(system, VisualSegment::Embeddings(visual), vec![QUERY])
    }
}
