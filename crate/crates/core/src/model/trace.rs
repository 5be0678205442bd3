use serde::{Deserialize, Serialize};

use crate::linalg::max_abs;

/// Residual-stream snapshot of one position.
///
/// `hidden[0]` is the embedding stream and `hidden[l]` the output of block
/// `l`. Components are indexed `l - 1`. When steering is active, `steer[l-1]`
/// holds the injected delta so that
/// `hidden[l] = hidden[l-1] + attn[l-1] + mlp[l-1] + steer[l-1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub hidden: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steer: Option<Vec<Vec<f32>>>,
}

impl TraceStep {
    pub fn has_components(&self) -> bool {
        self.attn.is_some() && self.mlp.is_some()
    }

    /// Stream after block `l` but before any steering injection.
    pub fn pre_injection(&self, l: usize) -> Option<Vec<f32>> {
        let a = self.attn.as_ref()?;
        let m = self.mlp.as_ref()?;
        Some(
            self.hidden[l - 1]
                .iter()
                .zip(&a[l - 1])
                .zip(&m[l - 1])
                .map(|((h, a), m)| h + a + m)
                .collect(),
        )
    }
}

/// Per-step, per-layer hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrace {
    pub n_layers: usize,
    pub d_model: usize,
    pub steps: Vec<TraceStep>,
}

impl ResidualTrace {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self {
            n_layers,
            d_model,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Hidden state at step `t` (0-based) and layer `l` (0 = embedding stream).
    pub fn hidden(&self, t: usize, l: usize) -> &[f32] {
        &self.steps[t].hidden[l]
    }

    pub fn has_all_layers(&self) -> bool {
        !self.steps.is_empty()
            && self
                .steps
                .iter()
                .all(|s| s.hidden.len() == self.n_layers + 1)
    }

    /// Largest relative additivity violation
    /// `max|h^l - h^{l-1} - a^l - m^l - s^l| / max|h^l|` over captured entries,
    /// or `None` when components were not captured.
    pub fn additivity_error(&self) -> Option<f32> {
        let mut worst = 0.0f32;
        for step in &self.steps {
            let a = step.attn.as_ref()?;
            let m = step.mlp.as_ref()?;
            for l in 1..=self.n_layers {
                let resid: Vec<f32> = (0..self.d_model)
                    .map(|i| {
                        let s = step.steer.as_ref().map_or(0.0, |s| s[l - 1][i]);
                        step.hidden[l][i] - step.hidden[l - 1][i] - a[l - 1][i] - m[l - 1][i] - s
                    })
                    .collect();
                let scale = max_abs(&step.hidden[l]).max(f32::MIN_POSITIVE);
                worst = worst.max(max_abs(&resid) / scale);
            }
        }
        Some(worst)
    }
}
