use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One prompt position: a vocabulary id or a precomputed embedding row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InputItem {
    Token(u32),
    Embedding(Vec<f32>),
}

impl From<u32> for InputItem {
    fn from(t: u32) -> Self {
        InputItem::Token(t)
    }
}

/// Visual segment of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualSegment {
    Tokens(Vec<u32>),
    /// Rows produced by a vision encoder (here a stub), `d_model` each.
    Embeddings(Vec<Vec<f32>>),
}

impl VisualSegment {
    pub fn len(&self) -> usize {
        match self {
            VisualSegment::Tokens(t) => t.len(),
            VisualSegment::Embeddings(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `system ++ visual ++ query`, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub system: Vec<u32>,
    pub visual: VisualSegment,
    pub query: Vec<u32>,
}

impl PromptLayout {
    pub fn new(system: Vec<u32>, visual: VisualSegment, query: Vec<u32>) -> Self {
        Self {
            system,
            visual,
            query,
        }
    }

    /// Plain text prompt with no visual segment.
    pub fn text(tokens: Vec<u32>) -> Self {
        Self::new(Vec::new(), VisualSegment::Tokens(Vec::new()), tokens)
    }

    pub fn len(&self) -> usize {
        self.system.len() + self.visual.len() + self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same system and query segments with the visual segment dropped.
    pub fn without_visual(&self) -> Self {
        let empty = match self.visual {
            VisualSegment::Tokens(_) => VisualSegment::Tokens(Vec::new()),
            VisualSegment::Embeddings(_) => VisualSegment::Embeddings(Vec::new()),
        };
        Self::new(self.system.clone(), empty, self.query.clone())
    }

    pub fn items(&self) -> Vec<InputItem> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.system.iter().map(|&t| InputItem::Token(t)));
        match &self.visual {
            VisualSegment::Tokens(t) => out.extend(t.iter().map(|&t| InputItem::Token(t))),
            VisualSegment::Embeddings(rows) => {
                out.extend(rows.iter().map(|r| InputItem::Embedding(r.clone())))
            }
        }
        out.extend(self.query.iter().map(|&t| InputItem::Token(t)));
        out
    }

    pub fn check_capacity(&self, max_seq: usize) -> Result<()> {
        if self.len() > max_seq {
            return Err(Error::Capacity {
                needed: self.len(),
                max_seq,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concatenation_order() {
        let l = PromptLayout::new(vec![1], VisualSegment::Tokens(vec![7, 8]), vec![3, 4]);
        let toks: Vec<_> = l
            .items()
            .into_iter()
            .map(|i| match i {
                InputItem::Token(t) => t,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(toks, vec![1, 7, 8, 3, 4]);
        assert_eq!(l.without_visual().len(), 3);
        assert!(l.check_capacity(4).is_err());
    }
}
