//! Minimal decoder-only transformer with exposed residual streams.
//!
//! Layer `0` is the embedding stream; blocks are numbered `1..=L`. Every
//! block adds an attention output `a` and an FFN output `m` to the stream,
//! so `h^l = h^{l-1} + a^l + m^l`. The logit lens applies the final
//! normalization and the head to any layer's hidden state.

mod config;
mod forward;
mod layout;
mod trace;

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{Activation, ModelConfig, NormKind};
pub use forward::{KvState, Prefill, SteerOps, StepOutput};
pub use layout::{InputItem, PromptLayout, VisualSegment};
pub use trace::{ResidualTrace, TraceStep};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Weights of one transformer block. Projection matrices are stored
/// `out × in` so that a forward projection is a row-wise dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl Block {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            attn_norm: vec![1.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![1.0; d],
            w_up: Matrix::zeros(cfg.d_ff, d),
            w_down: Matrix::zeros(d, cfg.d_ff),
        }
    }
}

/// Frozen model. Immutable after construction and `Sync`, so it can be shared
/// across threads behind an `Arc` or a plain reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `V × d`.
    pub token_embedding: Matrix,
    /// `max_seq × d`, added to every input row.
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f32>,
    /// Untied head stored `V × d`; `None` means the head is the embedding transpose.
    pub head: Option<Matrix>,
    pub head_bias: Vec<f32>,
}

impl Model {
    /// All-zero weights with unit norm gains and a tied head.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        Ok(Self {
            token_embedding: Matrix::zeros(v, d),
            position_embedding: Matrix::zeros(config.max_seq, d),
            blocks: (0..config.n_layers).map(|_| Block::zeros(&config)).collect(),
            final_norm: vec![1.0; d],
            head: None,
            head_bias: vec![0.0; v],
            config,
        })
    }

    /// Gaussian-initialized model seeded from `config.seed`.
    pub fn random(config: ModelConfig, tied_head: bool) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let cfg = model.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model as f32;
        let mut fill = |m: &mut Matrix, std: f32| {
            let n = Normal::new(0.0f32, std).expect("positive std");
            for v in m.data.iter_mut() {
                *v = n.sample(&mut rng);
            }
        };
        fill(&mut model.token_embedding, 1.0);
        fill(&mut model.position_embedding, 0.1);
        for b in model.blocks.iter_mut() {
            let s = 1.0 / d.sqrt();
            fill(&mut b.wq, s);
            fill(&mut b.wk, s);
            fill(&mut b.wv, s);
            fill(&mut b.wo, s / 2.0);
            fill(&mut b.w_up, s);
            fill(&mut b.w_down, 1.0 / (cfg.d_ff as f32).sqrt() / 2.0);
        }
        if !tied_head {
            let mut head = Matrix::zeros(cfg.vocab_size, cfg.d_model);
            fill(&mut head, 1.0 / d.sqrt());
            model.head = Some(head);
        }
        Ok(model)
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn tied_head(&self) -> bool {
        self.head.is_none()
    }

    /// Head rows, `V × d` (the embedding itself when tied).
    pub fn head_rows(&self) -> &Matrix {
        self.head.as_ref().unwrap_or(&self.token_embedding)
    }

    /// Checks shapes against the config and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
        let check_m = |name: String, m: &Matrix, shape: [usize; 2]| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::Shape {
                    name,
                    expected: shape.to_vec(),
                    found: m.shape().to_vec(),
                });
            }
            if !m.all_finite() {
                return Err(Error::NonFinite(name));
            }
            Ok(())
        };
        let check_v = |name: String, x: &[f32], len: usize| -> Result<()> {
            if x.len() != len {
                return Err(Error::Shape {
                    name,
                    expected: vec![len],
                    found: vec![x.len()],
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
            Ok(())
        };
        check_m("token_embedding".into(), &self.token_embedding, [v, d])?;
        check_m("position_embedding".into(), &self.position_embedding, [c.max_seq, d])?;
        if self.blocks.len() != c.n_layers {
            return Err(Error::Config(format!(
                "expected {} blocks, found {}",
                c.n_layers,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            check_v(p("attn_norm"), &b.attn_norm, d)?;
            check_m(p("attn.wq"), &b.wq, [d, d])?;
            check_m(p("attn.wk"), &b.wk, [d, d])?;
            check_m(p("attn.wv"), &b.wv, [d, d])?;
            check_m(p("attn.wo"), &b.wo, [d, d])?;
            check_v(p("ffn_norm"), &b.ffn_norm, d)?;
            check_m(p("ffn.up"), &b.w_up, [f, d])?;
            check_m(p("ffn.down"), &b.w_down, [d, f])?;
        }
        check_v("final_norm".into(), &self.final_norm, d)?;
        if let Some(h) = &self.head {
            check_m("head".into(), h, [v, d])?;
        }
        check_v("head_bias".into(), &self.head_bias, v)?;
        Ok(())
    }

    /// Converts the model to archive form. The head is written `d × V`.
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::default();
        let c = &self.config;
        let put = |a: &mut TensorArchive, name: String, m: &Matrix| {
            a.insert(name, vec![m.rows, m.cols], m.data.clone());
        };
        put(&mut a, "token_embedding".into(), &self.token_embedding);
        put(&mut a, "position_embedding".into(), &self.position_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            a.insert(format!("blocks.{i}.attn_norm"), vec![c.d_model], b.attn_norm.clone());
            put(&mut a, format!("blocks.{i}.attn.wq"), &b.wq);
            put(&mut a, format!("blocks.{i}.attn.wk"), &b.wk);
            put(&mut a, format!("blocks.{i}.attn.wv"), &b.wv);
            put(&mut a, format!("blocks.{i}.attn.wo"), &b.wo);
            a.insert(format!("blocks.{i}.ffn_norm"), vec![c.d_model], b.ffn_norm.clone());
            put(&mut a, format!("blocks.{i}.ffn.up"), &b.w_up);
            put(&mut a, format!("blocks.{i}.ffn.down"), &b.w_down);
        }
        a.insert("final_norm", vec![c.d_model], self.final_norm.clone());
        if let Some(h) = &self.head {
            put(&mut a, "head".into(), &h.transpose());
        }
        a.insert("head_bias", vec![c.vocab_size], self.head_bias.clone());
        a.metadata = serde_json::json!({
            "kind": "model",
            "config": c,
            "tied_head": self.tied_head(),
        });
        a
    }

    pub fn from_archive(mut a: TensorArchive) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            a.metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Config("manifest metadata has no `config`".into()))?,
        )?;
        config.validate()?;
        let tied = a
            .metadata
            .get("tied_head")
            .and_then(|v| v.as_bool())
            .unwrap_or(true);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let mat = |a: &mut TensorArchive, name: &str, r: usize, c: usize| -> Result<Matrix> {
            Ok(Matrix::from_vec(r, c, a.take(name, &[r, c])?))
        };
        let token_embedding = mat(&mut a, "token_embedding", v, d)?;
        let position_embedding = mat(&mut a, "position_embedding", config.max_seq, d)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            blocks.push(Block {
                attn_norm: a.take(&format!("blocks.{i}.attn_norm"), &[d])?,
                wq: mat(&mut a, &format!("blocks.{i}.attn.wq"), d, d)?,
                wk: mat(&mut a, &format!("blocks.{i}.attn.wk"), d, d)?,
                wv: mat(&mut a, &format!("blocks.{i}.attn.wv"), d, d)?,
                wo: mat(&mut a, &format!("blocks.{i}.attn.wo"), d, d)?,
                ffn_norm: a.take(&format!("blocks.{i}.ffn_norm"), &[d])?,
                w_up: mat(&mut a, &format!("blocks.{i}.ffn.up"), f, d)?,
                w_down: mat(&mut a, &format!("blocks.{i}.ffn.down"), d, f)?,
            });
        }
        let final_norm = a.take("final_norm", &[d])?;
        let head = if tied {
            None
        } else {
            Some(mat(&mut a, "head", d, v)?.transpose())
        };
        let head_bias = a.take("head_bias", &[v])?;
        let model = Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            head,
            head_bias,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        self.to_archive().write(manifest_path)?;
        Ok(())
    }

    /// Loads and validates a model from a tensor-archive manifest.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        Self::from_archive(TensorArchive::read(manifest_path)?)
    }

    /// 64-bit FNV-1a over every parameter in archive order.
    pub fn checksum(&self) -> u64 {
        let a = self.to_archive();
        let mut h = FnvHasher::default();
        for (name, t) in &a.tensors {
            h.write(name.as_bytes());
            for v in &t.data {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}
