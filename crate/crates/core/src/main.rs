//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for runtime
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use steerlens::harness::{
    ablation_grid, analyze_scene, execute, experiment_latency, load_scenes, render_svg,
    read_labeled_csv, run_experiment, write_ablation, ExperimentConfig, ModelSource,
};
use steerlens::{Error, Result};

#[derive(Parser)]
#[command(name = "steerlens", version, about = "Steering, logit-lens ranking and hallucination metrics on a toy captioner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set scenes.count=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::load(self.config.as_deref(), &self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured toy model and save it as a tensor archive.
    GenModel {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Manifest path of the archive to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the configured scene set as JSON.
    GenScenes {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every variant and write the run directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep the configured grid over the reference variant.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to `<output_dir>/ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token ranking matrices of one scene under one variant.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        variant: String,
        /// Index into the scene set.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a CSV matrix (plain, or with a header row and label column) as an SVG heatmap.
    Heatmap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
        /// Defaults to the corner cell of a labeled CSV.
        #[arg(long)]
        row_axis: Option<String>,
        #[arg(long, default_value = "column")]
        col_axis: String,
    },
    /// Per-token latency of every variant relative to the reference.
    Latency {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn write_json<T: serde::Serialize>(path: &std::path::Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenModel { cfg, out } => {
            let cfg = cfg.load()?;
            if !matches!(cfg.model, ModelSource::Toy { .. }) {
                return Err(Error::Config("gen-model needs a toy model source".into()));
            }
            let model = cfg.model.load()?;
            model.save(&out)?;
            println!("model checksum {:016x} -> {}", model.checksum(), out.display());
        }
        Command::GenScenes { cfg, out } => {
            let cfg = cfg.load()?;
            let model = cfg.model.load()?;
            let scenes = load_scenes(&cfg, &model)?;
            write_json(&out, &scenes)?;
            println!("{} scenes -> {}", scenes.len(), out.display());
        }
        Command::Run { cfg } => {
            let cfg = cfg.load()?;
            let exp = run_experiment(&cfg)?;
            println!("{:<16} {:>8} {:>8} {:>8} {:>10} {:>6}", "variant", "chair_s", "chair_i", "f1", "ms/token", "failed");
            for v in &exp.manifest.variants {
                match (&v.error, &v.chair) {
                    (Some(e), _) => println!("{:<16} aborted: {e}", v.name),
                    (None, Some(c)) => println!(
                        "{:<16} {:>8.3} {:>8.3} {:>8.3} {:>10.3} {:>6}",
                        v.name,
                        c.chair_s,
                        c.chair_i,
                        c.f1,
                        v.timing.mean_ms,
                        v.failed_scenes.len()
                    ),
                    (None, None) => println!("{:<16} no completed scenes", v.name),
                }
            }
            println!("manifest: {}", cfg.resolved_output_dir().join("manifest.json").display());
        }
        Command::Ablate { cfg, out } => {
            let cfg = cfg.load()?;
            let report = ablation_grid(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.resolved_output_dir().join("ablation"));
            for p in write_ablation(&report, &dir, cfg.reports.svg)? {
                println!("{}", p.display());
            }
        }
        Command::Analyze {
            cfg,
            variant,
            scene,
            out,
        } => {
            let cfg = cfg.load()?;
            let svg = cfg.reports.svg;
            let cats = analyze_scene(&cfg, &variant, scene, &out, svg)?;
            println!("{}", serde_json::to_string(&cats)?);
        }
        Command::Heatmap {
            input,
            svg,
            title,
            row_axis,
            col_axis,
        } => {
            let (m, mut labels) = read_labeled_csv(&input)?;
            if labels.rows.is_empty() {
                labels.rows = (0..m.len()).map(|i| i.to_string()).collect();
                labels.cols = (0..m[0].len()).map(|i| i.to_string()).collect();
            }
            labels.title = title;
            labels.row_axis = row_axis.unwrap_or(labels.row_axis);
            labels.col_axis = col_axis;
            std::fs::write(&svg, render_svg(&m, &labels)?).map_err(|e| io_err(&svg, e))?;
            println!("{}", svg.display());
        }
        Command::Latency { cfg } => {
            let mut cfg = cfg.load()?;
            cfg.reports.ranks = false;
            let exp = execute(&cfg)?;
            let rows = experiment_latency(&exp)?;
            println!("{:<16} {:>10} {:>10} {:>10} {:>7}", "variant", "mean ms", "median ms", "tok/s", "factor");
            for r in &rows {
                println!(
                    "{:<16} {:>10.4} {:>10.4} {:>10.1} {:>6.2}x",
                    r.variant, r.timing.mean_ms, r.timing.median_ms, r.timing.tokens_per_second, r.factor
                );
            }
            write_json(&cfg.resolved_output_dir().join("latency.json"), &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
