//! Experiment runner: variant comparisons over a scene set, ablation grids,
//! ranking reports, latency accounting and the on-disk run layout.
//!
//! A run directory holds `manifest.json` and `config.json` at the root and
//! one subdirectory per variant. Every file except the timing outputs is a
//! pure function of the config; the manifest lists each file with its
//! SHA-256 and flags the timing fields as non-deterministic.

mod config;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    build_ranking_matrices, classify_tokens, layerwise_summary, temporal_summary, Category,
    TokenCategories,
};
use crate::decoding::{generate_on_stream, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::{chair, CaptionObjects, ChairReport};
use crate::model::{Model, SteerOps};
use crate::sla::SlaConfig;
use crate::steering::{NegativeCache, SteeringConfig};
use crate::synthetic::{generate_scenes, Scene, Vocab};

pub use config::{
    apply_override, ExperimentConfig, ModelSource, ReportOptions, SceneSource, SweepGrid, Variant,
    OUTPUT_ROOT_ENV,
};
pub use report::{
    export_heatmap, generation_timing, latency_report, ramp_color, read_labeled_csv, read_matrix_csv, render_svg,
    write_matrix_csv, HeatmapLabels, LatencyRow, TimingSummary, RAMP_HIGH, RAMP_LOW,
};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Files whose content depends on wall-clock measurements.
pub const NONDETERMINISTIC: [&str; 2] = ["timing.json", "variants[].timing"];

/// Default augmentation settings used when only one of γ and w is swept.
const DEFAULT_GAMMA: f32 = 0.3;
const DEFAULT_WINDOW: usize = 5;

/// Outcome of one scene under one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub tokens: Vec<u32>,
    pub mentioned: Vec<u32>,
    pub stopped: bool,
    /// Token categories used for ranking (taken from the reference caption).
    pub categories: Option<TokenCategories>,
    /// Per-category mean rank over (early, mid, late) stages.
    pub stage_means: BTreeMap<Category, [f64; 3]>,
    /// Per-category mean rank per layer `1..=L`.
    pub layer_means: BTreeMap<Category, Vec<f64>>,
    #[serde(skip)]
    pub step_ms: Vec<f64>,
    pub steer_ops: SteerOps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFailure {
    pub scene_id: u64,
    pub error: String,
}

/// Mean over scenes of per-scene category stage means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageAggregate {
    pub layer_window: usize,
    pub means: BTreeMap<Category, [f64; 3]>,
    /// Scenes contributing to each category.
    pub scenes: BTreeMap<Category, usize>,
}

/// Everything produced for one variant.
#[derive(Debug, Clone, Default)]
pub struct VariantRun {
    pub name: String,
    pub records: Vec<SceneRecord>,
    pub failures: Vec<SceneFailure>,
    pub error: Option<String>,
}

impl VariantRun {
    pub fn record(&self, scene_id: u64) -> Option<&SceneRecord> {
        self.records.iter().find(|r| r.scene_id == scene_id)
    }

    /// CHAIR over the scenes that completed.
    pub fn chair(&self, scenes: &[Scene]) -> Option<ChairReport> {
        let by_id: BTreeMap<u64, &Scene> = scenes.iter().map(|s| (s.scene_id, s)).collect();
        let batch: Vec<CaptionObjects> = self
            .records
            .iter()
            .map(|r| {
                let truth = by_id[&r.scene_id].objects.iter().copied().collect();
                (r.mentioned.iter().copied().collect(), truth)
            })
            .collect();
        chair(&batch).ok()
    }

    pub fn stages(&self, layer_window: usize) -> StageAggregate {
        let mut sums: BTreeMap<Category, ([f64; 3], usize)> = BTreeMap::new();
        for r in &self.records {
            for (&c, m) in &r.stage_means {
                let e = sums.entry(c).or_insert(([0.0; 3], 0));
                e.0.iter_mut().zip(m).for_each(|(a, b)| *a += b);
                e.1 += 1;
            }
        }
        StageAggregate {
            layer_window,
            means: sums
                .iter()
                .map(|(&c, (s, n))| (c, s.map(|v| v / *n as f64)))
                .collect(),
            scenes: sums.iter().map(|(&c, (_, n))| (c, *n)).collect(),
        }
    }

    pub fn layers(&self) -> BTreeMap<Category, Vec<f64>> {
        let mut sums: BTreeMap<Category, (Vec<f64>, usize)> = BTreeMap::new();
        for r in &self.records {
            for (&c, m) in &r.layer_means {
                let e = sums.entry(c).or_insert((vec![0.0; m.len()], 0));
                e.0.iter_mut().zip(m).for_each(|(a, b)| *a += b);
                e.1 += 1;
            }
        }
        sums.into_iter()
            .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
            .collect()
    }

    pub fn timing(&self) -> TimingSummary {
        TimingSummary::from_steps(self.records.iter().map(|r| r.step_ms.as_slice()))
    }

    pub fn steer_ops(&self) -> SteerOps {
        let mut ops = SteerOps::default();
        for r in &self.records {
            ops += r.steer_ops;
        }
        ops
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub error: Option<String>,
    pub scenes_ok: usize,
    pub failed_scenes: Vec<u64>,
    pub chair: Option<ChairReport>,
    pub stages: Option<StageAggregate>,
    /// Wall-clock derived; not reproducible.
    pub timing: TimingSummary,
    pub steer_ops: SteerOps,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub reference_variant: String,
    pub scenes: usize,
    pub variants: Vec<VariantSummary>,
    pub nondeterministic: Vec<String>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Checks that every listed file exists with the recorded checksum.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for f in &self.files {
            let p = root.join(&f.path);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let h = config::hex(&Sha256::digest(&bytes));
            if h != f.sha256 {
                return Err(Error::Argument(format!("{}: checksum differs from manifest", f.path)));
            }
        }
        Ok(())
    }
}

/// In-memory result of a run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub manifest: RunManifest,
    pub scenes: Vec<Scene>,
    pub runs: Vec<VariantRun>,
}

impl Experiment {
    pub fn run(&self, name: &str) -> Option<&VariantRun> {
        self.runs.iter().find(|r| r.name == name)
    }
}

/// Scenes named by the config, generated from the model's token embedding
/// or read from a `gen-scenes` file.
pub fn load_scenes(cfg: &ExperimentConfig, model: &Model) -> Result<Vec<Scene>> {
    match &cfg.scenes.file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let scenes: Vec<Scene> = serde_json::from_str(&text)?;
            if scenes.is_empty() {
                return Err(Error::Config(format!("{}: no scenes", p.display())));
            }
            Ok(scenes)
        }
        None => generate_scenes(
            cfg.scenes.seed,
            cfg.scenes.count,
            cfg.scenes.objects_per_scene,
            cfg.model.vocab(),
            &model.token_embedding,
        ),
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Shared inputs for running variants against one model.
pub struct Runner<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub scenes: &'a [Scene],
    pub reports: &'a ReportOptions,
    pub cache: NegativeCache,
}

impl<'a> Runner<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocab, scenes: &'a [Scene], reports: &'a ReportOptions) -> Self {
        Self {
            model,
            vocab,
            scenes,
            reports,
            cache: NegativeCache::new(),
        }
    }

    /// One scene. `stream` selects the sampling stream; categories come from
    /// `reference` when given, otherwise from this caption.
    pub fn scene(
        &self,
        scene: &Scene,
        stream: u64,
        decode: &DecodeConfig,
        reference: Option<&[u32]>,
    ) -> Result<SceneRecord> {
        let layout = scene.layout(self.vocab);
        let vsv = match decode.steering {
            Some(_) => Some(self.cache.build_vsv(self.model, &layout)?),
            None => None,
        };
        let decode = decode.clone().with_capture(self.reports.ranks);
        let gen = generate_on_stream(self.model, &layout, &decode, vsv.as_ref(), stream)?;
        let mentioned = self.vocab.mentioned_objects(&gen.tokens);
        let mut rec = SceneRecord {
            scene_id: scene.scene_id,
            mentioned: mentioned.into_iter().collect(),
            tokens: gen.tokens.clone(),
            stopped: gen.stopped,
            categories: None,
            stage_means: BTreeMap::new(),
            layer_means: BTreeMap::new(),
            step_ms: gen.step_ms.clone(),
            steer_ops: gen.steer_ops,
        };
        if let Some(trace) = &gen.trace {
            let cats = classify_tokens(reference.unwrap_or(&gen.tokens), scene, self.vocab);
            let tokens = cats.all_tokens();
            if !tokens.is_empty() {
                let ms = build_ranking_matrices(self.model, trace, &tokens)?;
                rec.layer_means = layerwise_summary(&ms, &cats)?;
                if trace.len() >= 3 {
                    let window = self.reports.layer_window.min(self.model.n_layers());
                    rec.stage_means = temporal_summary(&ms, &cats, window)?.means;
                }
            }
            rec.categories = Some(cats);
        }
        Ok(rec)
    }

    /// Every scene under one variant, in parallel on the current pool.
    pub fn variant(&self, name: &str, decode: &DecodeConfig, reference: Option<&VariantRun>) -> VariantRun {
        let mut run = VariantRun {
            name: name.to_string(),
            ..Default::default()
        };
        if let Err(e) = decode.validate(self.model) {
            log::error!("variant `{name}` aborted: {e}");
            run.error = Some(e.to_string());
            return run;
        }
        let results: Vec<std::result::Result<SceneRecord, SceneFailure>> = self
            .scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let reference = match reference {
                    Some(r) => match r.record(s.scene_id) {
                        Some(rec) => Some(rec.tokens.as_slice()),
                        None => {
                            return Err(SceneFailure {
                                scene_id: s.scene_id,
                                error: "reference caption unavailable".into(),
                            })
                        }
                    },
                    None => None,
                };
                self.scene(s, i as u64, decode, reference).map_err(|e| SceneFailure {
                    scene_id: s.scene_id,
                    error: e.to_string(),
                })
            })
            .collect();
        for r in results {
            match r {
                Ok(rec) => run.records.push(rec),
                Err(f) => {
                    log::warn!("variant `{name}`, scene {}: {}", f.scene_id, f.error);
                    run.failures.push(f);
                }
            }
        }
        run
    }
}

/// Runs every variant in memory. The reference variant runs first so its
/// captions can define the token categories of the others.
pub fn execute(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let model = cfg.model.load()?;
    let scenes = load_scenes(cfg, &model)?;
    let reference = cfg.reference().clone();
    let runs = with_pool(cfg.threads, || {
        let runner = Runner::new(&model, cfg.model.vocab(), &scenes, &cfg.reports);
        let ref_run = runner.variant(&reference.name, &reference.decode, None);
        let mut runs = Vec::with_capacity(cfg.variants.len());
        for v in &cfg.variants {
            if v.name == reference.name {
                runs.push(ref_run.clone());
            } else {
                runs.push(runner.variant(&v.name, &v.decode, Some(&ref_run)));
            }
        }
        runs
    })?;
    let variants = runs
        .iter()
        .map(|r| VariantSummary {
            name: r.name.clone(),
            error: r.error.clone(),
            scenes_ok: r.records.len(),
            failed_scenes: r.failures.iter().map(|f| f.scene_id).collect(),
            chair: r.chair(&scenes),
            stages: (cfg.reports.ranks && r.error.is_none()).then(|| r.stages(cfg.reports.layer_window)),
            timing: r.timing(),
            steer_ops: r.steer_ops(),
        })
        .collect();
    Ok(Experiment {
        manifest: RunManifest {
            config_hash: hash,
            reference_variant: reference.name,
            scenes: scenes.len(),
            variants,
            nondeterministic: NONDETERMINISTIC.iter().map(|s| s.to_string()).collect(),
            files: Vec::new(),
        },
        scenes,
        runs,
    })
}

/// Fails when `dir` already holds a manifest for a different config.
pub fn check_existing(dir: &Path, hash: &str) -> Result<()> {
    let p = dir.join(MANIFEST_FILE);
    if !p.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let found = serde_json::from_str::<serde_json::Value>(&text)?
        .get("config_hash")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    if found != hash {
        return Err(Error::HashMismatch {
            dir: dir.to_path_buf(),
            expected: hash.to_string(),
            found,
        });
    }
    Ok(())
}

/// Collects written files for the manifest inventory.
struct Inventory {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Inventory {
    fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8], deterministic: bool) -> Result<()> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: config::hex(&Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
            deterministic,
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, v: &T, deterministic: bool) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        self.write(rel, &bytes, deterministic)
    }

    fn csv(&mut self, rel: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Argument(format!("csv buffer: {e}")))?;
        self.write(rel, &bytes, true)
    }
}

fn strings<I: IntoIterator<Item = S>, S: ToString>(it: I) -> Vec<String> {
    it.into_iter().map(|s| s.to_string()).collect()
}

fn write_variant(inv: &mut Inventory, run: &VariantRun, summary: &VariantSummary, n_layers: usize) -> Result<()> {
    let dir = &run.name;
    let mut captions = Vec::new();
    for r in &run.records {
        serde_json::to_writer(
            &mut captions,
            &serde_json::json!({
                "scene_id": r.scene_id,
                "tokens": r.tokens,
                "mentioned": r.mentioned,
                "stopped": r.stopped,
            }),
        )?;
        captions.push(b'\n');
    }
    inv.write(&format!("{dir}/captions.jsonl"), &captions, true)?;
    inv.json(&format!("{dir}/failures.json"), &run.failures, true)?;
    if let Some(c) = &summary.chair {
        inv.json(&format!("{dir}/chair.json"), c, true)?;
        inv.csv(
            &format!("{dir}/chair.csv"),
            &strings(ChairReport::CSV_HEADER),
            &[c.csv_row()],
        )?;
    }
    if let Some(st) = &summary.stages {
        inv.json(&format!("{dir}/stages.json"), st, true)?;
        let mut rows = Vec::new();
        for r in &run.records {
            for (c, m) in &r.stage_means {
                rows.push(vec![
                    r.scene_id.to_string(),
                    c.name().to_string(),
                    m[0].to_string(),
                    m[1].to_string(),
                    m[2].to_string(),
                ]);
            }
        }
        inv.csv(
            &format!("{dir}/stage_scenes.csv"),
            &strings(["scene_id", "category", "early", "mid", "late"]),
            &rows,
        )?;
        let layers = run.layers();
        let mut header = vec!["category".to_string()];
        header.extend((1..=n_layers).map(|l| format!("layer_{l}")));
        let rows: Vec<Vec<String>> = layers
            .iter()
            .map(|(c, v)| {
                let mut row = vec![c.name().to_string()];
                row.extend(v.iter().map(|x| x.to_string()));
                row
            })
            .collect();
        inv.csv(&format!("{dir}/layers.csv"), &header, &rows)?;
    }
    inv.json(&format!("{dir}/timing.json"), &summary.timing, false)?;
    Ok(())
}

/// Runs the experiment and writes the run directory. Re-running the same
/// config into the same directory overwrites it; a different config is a
/// [`Error::HashMismatch`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let root = cfg.resolved_output_dir();
    check_existing(&root, &cfg.hash()?)?;
    let mut exp = execute(cfg)?;
    let n_layers = cfg.model.load()?.n_layers();
    let mut inv = Inventory::new(&root)?;
    inv.json("config.json", cfg, true)?;
    for (run, summary) in exp.runs.iter().zip(&exp.manifest.variants) {
        write_variant(&mut inv, run, summary, n_layers)?;
    }
    exp.manifest.files = inv.files;
    let mut bytes = serde_json::to_vec_pretty(&exp.manifest)?;
    bytes.push(b'\n');
    let p = root.join(MANIFEST_FILE);
    std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    log::info!("wrote {} files under {}", exp.manifest.files.len(), root.display());
    Ok(exp)
}

/// A swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Lambda,
    Gamma,
    Window,
    Rho,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::Gamma => "gamma",
            Axis::Window => "window",
            Axis::Rho => "rho",
        }
    }

    /// Grid values widened to `f64` through their shortest decimal form, so
    /// `0.2f32` becomes `0.2` rather than `0.20000000298023224`.
    fn values(self, g: &SweepGrid) -> Vec<f64> {
        let widen = |v: &f32| v.to_string().parse::<f64>().expect("f32 display parses");
        match self {
            Axis::Lambda => g.lambda.iter().map(widen).collect(),
            Axis::Gamma => g.gamma.iter().map(widen).collect(),
            Axis::Window => g.window.iter().map(|&v| v as f64).collect(),
            Axis::Rho => g.rho.iter().map(widen).collect(),
        }
    }
}

/// Swept axes in row-major priority: ρ, λ, w, γ. One or two are allowed.
pub fn sweep_axes(g: &SweepGrid) -> Result<Vec<Axis>> {
    let axes: Vec<Axis> = [Axis::Rho, Axis::Lambda, Axis::Window, Axis::Gamma]
        .into_iter()
        .filter(|a| !a.values(g).is_empty())
        .collect();
    match axes.len() {
        0 => Err(Error::Config("ablation needs at least one nonempty sweep axis".into())),
        1 | 2 => Ok(axes),
        n => Err(Error::Config(format!("ablation sweeps at most two axes, got {n}"))),
    }
}

/// Decode settings of the grid cell `point` on top of `base`.
pub fn cell_decode(base: &DecodeConfig, point: &[(Axis, f64)]) -> Result<DecodeConfig> {
    let mut d = base.clone();
    let has = |a: Axis| point.iter().find(|p| p.0 == a).map(|p| p.1);
    if let Some(l) = has(Axis::Lambda) {
        d.steering = Some(SteeringConfig::new(l as f32)?);
    }
    let (g, w) = (has(Axis::Gamma), has(Axis::Window));
    if g.is_some() || w.is_some() {
        let cur = d.sla;
        let gamma = g.map(|v| v as f32).or(cur.map(|s| s.gamma)).unwrap_or(DEFAULT_GAMMA);
        let window = w.map(|v| v as usize).or(cur.map(|s| s.window)).unwrap_or(DEFAULT_WINDOW);
        d.sla = Some(SlaConfig::new(gamma, window)?);
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub base_variant: String,
    pub row_axis: Option<Axis>,
    pub col_axis: Axis,
    pub row_values: Vec<f64>,
    pub col_values: Vec<f64>,
    /// `cells[r][c]`; `None` where the cell failed.
    pub cells: Vec<Vec<Option<ChairReport>>>,
    /// Base variant per row (the row's ρ when rows sweep ρ).
    pub vanilla: Vec<Option<ChairReport>>,
}

impl AblationReport {
    /// `metric` is one of `chair_s`, `chair_i`, `f1`.
    pub fn matrix(&self, metric: &str) -> Vec<Vec<f64>> {
        let pick = |c: &Option<ChairReport>| match c {
            Some(r) => match metric {
                "chair_s" => r.chair_s,
                "chair_i" => r.chair_i,
                _ => r.f1,
            },
            None => f64::NAN,
        };
        self.cells
            .iter()
            .zip(&self.vanilla)
            .map(|(row, v)| row.iter().chain(std::iter::once(v)).map(pick).collect())
            .collect()
    }

    pub fn header(&self) -> Vec<String> {
        let corner = match self.row_axis {
            Some(r) => format!("{}\\{}", r.name(), self.col_axis.name()),
            None => format!("\\{}", self.col_axis.name()),
        };
        let mut h = vec![corner];
        h.extend(self.col_values.iter().map(|v| v.to_string()));
        h.push("vanilla".into());
        h
    }

    pub fn row_labels(&self) -> Vec<String> {
        if self.row_values.is_empty() {
            vec!["-".into()]
        } else {
            strings(&self.row_values)
        }
    }
}

/// The base variant of an ablation: the reference variant.
fn ablation_base(cfg: &ExperimentConfig) -> &Variant {
    cfg.reference()
}

/// Computes one grid cell (and nothing else) from the config.
pub fn ablation_cell(cfg: &ExperimentConfig, point: &[(Axis, f64)]) -> Result<ChairReport> {
    cfg.validate()?;
    let source = match point.iter().find(|p| p.0 == Axis::Rho) {
        Some(&(_, rho)) => cfg.model.with_prior(rho as f32)?,
        None => cfg.model.clone(),
    };
    let model = source.load()?;
    let scenes = load_scenes(cfg, &model)?;
    let decode = cell_decode(&ablation_base(cfg).decode, point)?;
    let reports = ReportOptions {
        ranks: false,
        ..cfg.reports.clone()
    };
    let run = with_pool(cfg.threads, || {
        Runner::new(&model, source.vocab(), &scenes, &reports).variant("cell", &decode, None)
    })?;
    if let Some(e) = run.error {
        return Err(Error::Config(e));
    }
    run.chair(&scenes)
        .ok_or_else(|| Error::Degenerate("every scene of the cell failed".into()))
}

/// Sweeps the configured grid over the base variant. Ranking capture is off.
pub fn ablation_grid(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let axes = sweep_axes(&cfg.sweep)?;
    let (row_axis, col_axis) = match axes.as_slice() {
        [c] => (None, *c),
        [r, c] => (Some(*r), *c),
        _ => unreachable!(),
    };
    let row_values = row_axis.map(|a| a.values(&cfg.sweep)).unwrap_or_default();
    let col_values = col_axis.values(&cfg.sweep);
    let base = ablation_base(cfg).decode.clone();
    let reports = ReportOptions {
        ranks: false,
        ..cfg.reports.clone()
    };
    let row_points: Vec<Option<f64>> = if row_values.is_empty() {
        vec![None]
    } else {
        row_values.iter().copied().map(Some).collect()
    };

    let mut cells = Vec::new();
    let mut vanilla = Vec::new();
    // Models and scenes are shared across a row; only ρ rows rebuild them.
    let mut loaded: Option<(ModelSource, Model, Vec<Scene>)> = None;
    for rp in &row_points {
        let source = match (row_axis, rp) {
            (Some(Axis::Rho), Some(v)) => cfg.model.with_prior(*v as f32)?,
            _ => cfg.model.clone(),
        };
        if loaded.as_ref().map(|l| &l.0) != Some(&source) {
            let model = source.load()?;
            let scenes = load_scenes(cfg, &model)?;
            loaded = Some((source.clone(), model, scenes));
        }
        let (_, model, scenes) = loaded.as_ref().expect("loaded");
        let runner = Runner::new(model, source.vocab(), scenes, &reports);
        let report = |d: &DecodeConfig, label: &str| -> Option<ChairReport> {
            let run = runner.variant(label, d, None);
            run.chair(scenes)
        };
        let row = with_pool(cfg.threads, || -> Result<Vec<Option<ChairReport>>> {
            let mut row = Vec::new();
            for &cv in &col_values {
                let mut point = vec![(col_axis, cv)];
                if let (Some(ra), Some(rv)) = (row_axis, rp) {
                    point.push((ra, *rv));
                }
                if col_axis == Axis::Rho {
                    // Column-wise ρ needs its own model.
                    row.push(ablation_cell(cfg, &point).ok());
                    continue;
                }
                let decode = cell_decode(&base, &point)?;
                row.push(report(&decode, "cell"));
            }
            Ok(row)
        })??;
        let v = with_pool(cfg.threads, || report(&base, "vanilla"))?;
        cells.push(row);
        vanilla.push(v);
    }
    Ok(AblationReport {
        config_hash: cfg.hash()?,
        base_variant: ablation_base(cfg).name.clone(),
        row_axis,
        col_axis,
        row_values,
        col_values,
        cells,
        vanilla,
    })
}

/// Writes `ablation.json` and one CSV per metric (with axis headers and a
/// trailing vanilla column) under `dir`; SVG heatmaps when requested.
pub fn write_ablation(report: &AblationReport, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
    let mut inv = Inventory::new(dir)?;
    inv.json("ablation.json", report, true)?;
    let labels = report.row_labels();
    for metric in ["chair_s", "chair_i", "f1"] {
        let m = report.matrix(metric);
        let rows: Vec<Vec<String>> = m
            .iter()
            .zip(&labels)
            .map(|(r, l)| std::iter::once(l.clone()).chain(r.iter().map(|v| v.to_string())).collect())
            .collect();
        inv.csv(&format!("ablation_{metric}.csv"), &report.header(), &rows)?;
        if svg {
            let hl = HeatmapLabels {
                title: metric.to_string(),
                row_axis: report.row_axis.map(|a| a.name().to_string()).unwrap_or_default(),
                col_axis: report.col_axis.name().to_string(),
                rows: labels.clone(),
                cols: report.header()[1..].to_vec(),
            };
            inv.write(&format!("ablation_{metric}.svg"), render_svg(&m, &hl)?.as_bytes(), true)?;
        }
    }
    Ok(inv.files.iter().map(|f| dir.join(&f.path)).collect())
}

/// Per-token ranking matrices for one scene under one variant, written as
/// `token_<id>.csv` (rows are layers `1..=L`, columns are steps) plus SVG when
/// requested. Categories come from the reference variant's caption.
pub fn analyze_scene(
    cfg: &ExperimentConfig,
    variant: &str,
    scene_index: usize,
    out: &Path,
    svg: bool,
) -> Result<TokenCategories> {
    cfg.validate()?;
    let v = cfg
        .variants
        .iter()
        .find(|v| v.name == variant)
        .ok_or_else(|| Error::Config(format!("unknown variant `{variant}`")))?;
    let model = cfg.model.load()?;
    let scenes = load_scenes(cfg, &model)?;
    let scene = scenes
        .get(scene_index)
        .ok_or_else(|| Error::Argument(format!("scene index {scene_index} out of range ({})", scenes.len())))?;
    let vocab = cfg.model.vocab();
    let reports = ReportOptions {
        ranks: false,
        ..cfg.reports.clone()
    };
    let runner = Runner::new(&model, vocab, &scenes, &reports);
    let reference = runner.scene(scene, scene_index as u64, &cfg.reference().decode, None)?;
    let cats = classify_tokens(&reference.tokens, scene, vocab);

    let layout = scene.layout(vocab);
    let vsv = match v.decode.steering {
        Some(_) => Some(runner.cache.build_vsv(&model, &layout)?),
        None => None,
    };
    let decode = v.decode.clone().with_capture(true);
    let start = Instant::now();
    let gen = generate_on_stream(&model, &layout, &decode, vsv.as_ref(), scene_index as u64)?;
    log::debug!("analyzed scene {} in {:?}", scene.scene_id, start.elapsed());
    let trace = gen.trace.as_ref().expect("capture requested");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let tokens = cats.all_tokens();
    let ms = build_ranking_matrices(&model, trace, &tokens)?;
    let mut membership: BTreeMap<u32, BTreeSet<&'static str>> = BTreeMap::new();
    for c in Category::ALL {
        for t in cats.tokens(c) {
            membership.entry(t).or_default().insert(c.name());
        }
    }
    for m in &ms {
        let base = out.join(format!("token_{}", m.token));
        m.write_csv(&base.with_extension("csv"))?;
        if svg {
            let kinds: Vec<&str> = membership.get(&m.token).map(|s| s.iter().copied().collect()).unwrap_or_default();
            let labels = HeatmapLabels {
                title: format!("token {} ({})", m.token, kinds.join(", ")),
                row_axis: "layer".into(),
                col_axis: "step".into(),
                rows: (1..=m.n_layers()).map(|l| l.to_string()).collect(),
                cols: (0..m.n_steps()).map(|t| t.to_string()).collect(),
            };
            let text = render_svg(&m.as_f64(), &labels)?;
            let p = base.with_extension("svg");
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
    }
    let summary = serde_json::json!({
        "scene_id": scene.scene_id,
        "variant": variant,
        "tokens": gen.tokens,
        "categories": cats,
    });
    let p = out.join("scene.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    Ok(cats)
}

/// Latency rows for every variant of an in-memory run, relative to the
/// reference variant.
pub fn experiment_latency(exp: &Experiment) -> Result<Vec<LatencyRow>> {
    let timings: Vec<(String, TimingSummary)> = exp
        .runs
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| (r.name.clone(), r.timing()))
        .collect();
    latency_report(&timings, &exp.manifest.reference_variant)
}
