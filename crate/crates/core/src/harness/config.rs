//! Experiment configuration: one JSON document, optionally patched with
//! `key=value` overrides, validated and hashed before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthetic::{build_toy_model, ToyModelSpec, Vocab, EOS};

/// Environment variable holding the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "STEERLENS_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Toy {
        #[serde(default)]
        spec: ToyModelSpec,
        #[serde(default)]
        seed: u64,
    },
    /// A saved model plus the vocabulary layout it was built with.
    Archive { path: PathBuf, vocab: Vocab },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Toy {
            spec: ToyModelSpec::default(),
            seed: 0,
        }
    }
}

impl ModelSource {
    pub fn vocab(&self) -> &Vocab {
        match self {
            ModelSource::Toy { spec, .. } => &spec.vocab,
            ModelSource::Archive { vocab, .. } => vocab,
        }
    }

    pub fn load(&self) -> Result<Model> {
        match self {
            ModelSource::Toy { spec, seed } => build_toy_model(spec, *seed),
            ModelSource::Archive { path, .. } => Model::load(path),
        }
    }

    /// Same source with the prior strength replaced; only toy models have one.
    pub fn with_prior(&self, rho: f32) -> Result<Self> {
        match self {
            ModelSource::Toy { spec, seed } => Ok(ModelSource::Toy {
                spec: spec.clone().with_prior(rho),
                seed: *seed,
            }),
            ModelSource::Archive { .. } => Err(Error::Config(
                "a prior-strength sweep needs a toy model source".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSource {
    pub count: usize,
    pub seed: u64,
    pub objects_per_scene: usize,
    /// Load scenes from a JSON file written by `gen-scenes` instead.
    pub file: Option<PathBuf>,
}

impl Default for SceneSource {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 7,
            objects_per_scene: 3,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub decode: DecodeConfig,
}

/// Values swept by `ablate`. Axes left empty are not swept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda: Vec<f32>,
    pub gamma: Vec<f32>,
    pub window: Vec<usize>,
    pub rho: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Capture traces and write ranking summaries.
    pub ranks: bool,
    /// Final layers averaged in the stage summary.
    pub layer_window: usize,
    /// Also render heatmaps as SVG.
    pub svg: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            ranks: true,
            layer_window: 5,
            svg: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    pub scenes: SceneSource,
    pub variants: Vec<Variant>,
    /// Variant whose captions define the token categories for every
    /// variant's ranking summary. Defaults to the first variant.
    pub reference_variant: Option<String>,
    pub sweep: SweepGrid,
    pub output_dir: PathBuf,
    pub reports: ReportOptions,
    /// Worker threads for scene-level parallelism; 0 uses all cores.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    /// Vanilla greedy against greedy with steering (0.17) and augmentation
    /// (0.3, 5) on 100 toy scenes.
    fn default() -> Self {
        let base = DecodeConfig::greedy(64).with_stop(vec![EOS]);
        Self {
            model: ModelSource::default(),
            scenes: SceneSource::default(),
            variants: vec![
                Variant {
                    name: "vanilla".into(),
                    decode: base.clone(),
                },
                Variant {
                    name: "vista".into(),
                    decode: base.with_steering(0.17).with_sla(0.3, 5),
                },
            ],
            reference_variant: None,
            sweep: SweepGrid::default(),
            output_dir: PathBuf::from("run"),
            reports: ReportOptions::default(),
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file and applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<Value>(&text)?
            }
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for v in &self.variants {
            if v.name.is_empty() || v.name.contains(['/', '\\']) || v.name.starts_with('.') {
                return Err(Error::Config(format!("variant name `{}` is not a plain name", v.name)));
            }
            if !names.insert(v.name.as_str()) {
                return Err(Error::Config(format!("duplicate variant `{}`", v.name)));
            }
        }
        if let Some(r) = &self.reference_variant {
            if !names.contains(r.as_str()) {
                return Err(Error::Config(format!("reference variant `{r}` is not defined")));
            }
        }
        if self.scenes.file.is_none() && (self.scenes.count == 0 || self.scenes.objects_per_scene == 0) {
            return Err(Error::Config("scene count and objects per scene must be >= 1".into()));
        }
        if self.reports.layer_window == 0 {
            return Err(Error::Config("layer_window must be >= 1".into()));
        }
        self.model.vocab().validate()?;
        if let ModelSource::Toy { spec, .. } = &self.model {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn reference(&self) -> &Variant {
        self.reference_variant
            .as_ref()
            .and_then(|r| self.variants.iter().find(|v| &v.name == r))
            .unwrap_or(&self.variants[0])
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    /// `output_dir`, placed under `$STEERLENS_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets a dotted path (`scenes.count`, `variants.1.decode.temperature`) to a
/// value parsed as JSON, or as a string when it does not parse.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("`{part}` in `{key}` is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    Error::Config(format!("index {idx} in `{key}` is out of range ({len} items)"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                match node {
                    Value::Object(map) => {
                        if last {
                            map.insert(part.to_string(), value);
                            return Ok(());
                        }
                        map.entry(part.to_string())
                            .or_insert_with(|| Value::Object(Default::default()))
                    }
                    _ => unreachable!(),
                }
            }
            _ => return Err(Error::Config(format!("`{key}` descends into a scalar"))),
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_walk_objects_and_arrays() {
        let mut doc = json!({"scenes": {"count": 100}, "variants": [{"name": "a"}, {"name": "b"}]});
        apply_override(&mut doc, "scenes.count=10").unwrap();
        apply_override(&mut doc, "variants.1.name=vista").unwrap();
        apply_override(&mut doc, "sweep.gamma=[0.1,0.2]").unwrap();
        assert_eq!(doc["scenes"]["count"], json!(10));
        assert_eq!(doc["variants"][1]["name"], json!("vista"));
        assert_eq!(doc["sweep"]["gamma"], json!([0.1, 0.2]));
        assert!(apply_override(&mut doc, "variants.5.name=x").is_err());
        assert!(apply_override(&mut doc, "scenes.count.x=1").is_err());
        assert!(apply_override(&mut doc, "novalue").is_err());
    }

    #[test]
    fn default_round_trips_and_hash_tracks_content() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        let other = ExperimentConfig::load(None, &["scenes.count=5".into()]).unwrap();
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn validation_rejects_bad_variants() {
        let mut cfg = ExperimentConfig::default();
        cfg.variants[1].name = "vanilla".into();
        assert!(cfg.validate().is_err());
        cfg.variants.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.reference_variant = Some("missing".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = ExperimentConfig::load(None, &["scenes.cuont=3".into()]).unwrap_err();
        assert!(e.is_config_error());
        assert!(ExperimentConfig::load(None, &["bogus=1".into()]).is_err());
        for nested in ["model.prior_strength=0.5", "variants.1.decode.lamda=0.2", "variants.1.decode.sla.gama=0.1"] {
            assert!(ExperimentConfig::load(None, &[nested.into()]).unwrap_err().is_config_error(), "{nested}");
        }
        ExperimentConfig::load(None, &["model.spec.prior_strength=0.5".into()]).unwrap();
    }
}
