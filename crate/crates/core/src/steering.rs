//! Visual steering vectors.
//!
//! A steering vector is the per-layer difference between the last-token
//! residual streams of a prompt with its visual segment and the same prompt
//! without it. During generation it is added to every block's output with
//! strength `lambda` and the result is rescaled back to the original norm.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::archive::{fnv1a64, TensorArchive};
use crate::error::{Error, Result};
use crate::model::{Model, PromptLayout, VisualSegment};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringConfig {
    pub lambda: f32,
    #[serde(default = "default_true")]
    pub renormalize: bool,
}

impl SteeringConfig {
    pub fn new(lambda: f32) -> Result<Self> {
        let c = Self {
            lambda,
            renormalize: true,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "steering lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Identifies the contrast pair a steering vector was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub positive: String,
    pub negative: String,
}

/// Hex FNV-1a digest of a layout's JSON form.
pub fn layout_key(layout: &PromptLayout) -> String {
    let json = serde_json::to_vec(layout).expect("layout serializes");
    format!("{:016x}", fnv1a64(&json))
}

/// One direction per block, `per_layer[l - 1]` for layer `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    per_layer: Vec<Vec<f32>>,
    pub provenance: Provenance,
}

impl SteeringVector {
    pub fn new(per_layer: Vec<Vec<f32>>, provenance: Provenance) -> Result<Self> {
        if per_layer.is_empty() {
            return Err(Error::Argument("steering vector needs at least one layer".into()));
        }
        let d = per_layer[0].len();
        if per_layer.iter().any(|v| v.len() != d) {
            return Err(Error::Argument("steering layers differ in width".into()));
        }
        if per_layer.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("steering vector".into()));
        }
        Ok(Self {
            per_layer,
            provenance,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn d_model(&self) -> usize {
        self.per_layer[0].len()
    }

    /// Vector for layer `l` in `1..=L`.
    pub fn layer(&self, l: usize) -> &[f32] {
        &self.per_layer[l - 1]
    }

    pub fn layers(&self) -> &[Vec<f32>] {
        &self.per_layer
    }

    pub fn is_zero(&self) -> bool {
        self.per_layer.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::default();
        for (i, v) in self.per_layer.iter().enumerate() {
            a.insert(format!("vsv.layer.{}", i + 1), vec![v.len()], v.clone());
        }
        a.metadata = serde_json::json!({
            "kind": "steering",
            "n_layers": self.per_layer.len(),
            "d_model": self.d_model(),
            "provenance": self.provenance,
        });
        a
    }

    pub fn from_archive(mut a: TensorArchive) -> Result<Self> {
        let meta_usize = |k: &str| {
            a.metadata
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("steering manifest lacks `{k}`")))
        };
        let n = meta_usize("n_layers")?;
        let d = meta_usize("d_model")?;
        let provenance = a
            .metadata
            .get("provenance")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or_default();
        let per_layer = (1..=n)
            .map(|l| a.take(&format!("vsv.layer.{l}"), &[d]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(per_layer, provenance)
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        self.to_archive().write(manifest_path)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        Self::from_archive(TensorArchive::read(manifest_path)?)
    }
}

fn check_pair(positive: &PromptLayout, negative: &PromptLayout) -> Result<()> {
    if positive.system != negative.system {
        return Err(Error::Contrast("system segments differ".into()));
    }
    if positive.query != negative.query {
        return Err(Error::Contrast("query segments differ".into()));
    }
    if !negative.visual.is_empty() {
        return Err(Error::Contrast(
            "negative layout must not carry visual tokens".into(),
        ));
    }
    Ok(())
}

fn difference(p: &[Vec<f32>], n: &[Vec<f32>]) -> Vec<Vec<f32>> {
    p.iter()
        .zip(n)
        .map(|(p, n)| p.iter().zip(n).map(|(a, b)| a - b).collect())
        .collect()
}

/// `vectorize(positive) - vectorize(negative)` at every layer.
pub fn build_vsv(
    model: &Model,
    positive: &PromptLayout,
    negative: &PromptLayout,
) -> Result<SteeringVector> {
    check_pair(positive, negative)?;
    let vp = model.vectorize(positive)?;
    let vn = model.vectorize(negative)?;
    SteeringVector::new(
        difference(&vp, &vn),
        Provenance {
            positive: layout_key(positive),
            negative: layout_key(negative),
        },
    )
}

/// Adds `lambda * v` to `hidden` and, when `renormalize` is set, rescales the
/// result to `hidden`'s L2 norm. Norms and the rescale are computed in f64.
pub fn inject_vsv(hidden: &[f32], v: &[f32], cfg: &SteeringConfig) -> Result<Vec<f32>> {
    if hidden.len() != v.len() {
        return Err(Error::Argument(format!(
            "hidden has {} values, steering vector {}",
            hidden.len(),
            v.len()
        )));
    }
    if hidden.iter().chain(v).any(|x| !x.is_finite()) || !cfg.lambda.is_finite() {
        return Err(Error::NonFinite("steering input".into()));
    }
    let shifted: Vec<f32> = hidden
        .iter()
        .zip(v)
        .map(|(h, v)| h + cfg.lambda * v)
        .collect();
    if !cfg.renormalize {
        return Ok(shifted);
    }
    let norm = |x: &[f32]| x.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt();
    let before = norm(hidden);
    if before == 0.0 {
        return Err(Error::Degenerate("zero-norm hidden state".into()));
    }
    let after = norm(&shifted);
    if after == 0.0 {
        return Err(Error::Degenerate("zero-norm stream after injection".into()));
    }
    let scale = before / after;
    Ok(shifted.iter().map(|&x| (x as f64 * scale) as f32).collect())
}

type CacheKey = (Vec<u32>, Vec<u32>);

/// Cache of negative-context vectors keyed by `(system, query)`.
///
/// A cache belongs to a single model. Lookups take a read lock; a miss
/// computes outside the lock and inserts (last writer wins, values are
/// deterministic).
#[derive(Debug, Default)]
pub struct NegativeCache {
    entries: RwLock<HashMap<CacheKey, Arc<Vec<Vec<f32>>>>>,
    forward_passes: AtomicUsize,
}

impl NegativeCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of `vectorize` calls issued through this cache.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cache_negative(
        &self,
        model: &Model,
        system: &[u32],
        query: &[u32],
    ) -> Result<Arc<Vec<Vec<f32>>>> {
        let key = (system.to_vec(), query.to_vec());
        if let Some(v) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(v));
        }
        let layout = PromptLayout::new(
            system.to_vec(),
            VisualSegment::Tokens(Vec::new()),
            query.to_vec(),
        );
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let v = Arc::new(model.vectorize(&layout)?);
        self.entries
            .write()
            .expect("cache lock")
            .insert(key, Arc::clone(&v));
        Ok(v)
    }

    /// Same result as [`build_vsv`] with the negative context served from the cache.
    pub fn build_vsv(&self, model: &Model, positive: &PromptLayout) -> Result<SteeringVector> {
        let negative = positive.without_visual();
        let vn = self.cache_negative(model, &positive.system, &positive.query)?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let vp = model.vectorize(positive)?;
        SteeringVector::new(
            difference(&vp, &vn),
            Provenance {
                positive: layout_key(positive),
                negative: layout_key(&negative),
            },
        )
    }
}
