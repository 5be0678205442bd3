//! Static report outputs: matrix heatmaps and per-token latency tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::Generation;
use crate::error::{Error, Result};

/// Cell edge length of a rendered heatmap, in SVG user units.
pub const CELL: usize = 24;
const MARGIN_LEFT: usize = 96;
const MARGIN_TOP: usize = 40;

/// Low end of the color ramp (smallest value).
pub const RAMP_LOW: [u8; 3] = [0xf7, 0xfb, 0xff];
/// High end of the color ramp (largest value).
pub const RAMP_HIGH: [u8; 3] = [0x08, 0x30, 0x6b];

/// Axis labels and title for an SVG heatmap.
#[derive(Debug, Clone, Default)]
pub struct HeatmapLabels {
    pub title: String,
    pub row_axis: String,
    pub col_axis: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
}

fn check_matrix(m: &[Vec<f64>]) -> Result<usize> {
    let cols = m.first().map(Vec::len).unwrap_or(0);
    if cols == 0 {
        return Err(Error::Argument("heatmap needs a nonempty matrix".into()));
    }
    if m.iter().any(|r| r.len() != cols) {
        return Err(Error::Argument("heatmap rows differ in length".into()));
    }
    Ok(cols)
}

/// Writes the matrix as headerless CSV, one row per line, values in
/// shortest round-trip form.
pub fn write_matrix_csv(m: &[Vec<f64>], path: &Path) -> Result<()> {
    check_matrix(m)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(e, path))?;
    for row in m {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(e, path))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Argument(format!("{}: `{s}` is not a number", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    check_matrix(&out)?;
    Ok(out)
}

/// Reads a CSV matrix that may carry labels. When any cell of the first row
/// is not a number, that row is a header and the first column holds row
/// labels (the layout written by the ranking and ablation reports).
pub fn read_labeled_csv(path: &Path) -> Result<(Vec<Vec<f64>>, HeatmapLabels)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(e, path))?;
    let records: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    let labeled = records
        .first()
        .is_some_and(|h| h.iter().any(|c| c.trim().parse::<f64>().is_err()));
    if !labeled {
        return Ok((read_matrix_csv(path)?, HeatmapLabels::default()));
    }
    let header = &records[0];
    let mut labels = HeatmapLabels {
        row_axis: header.get(0).unwrap_or_default().to_string(),
        cols: header.iter().skip(1).map(str::to_string).collect(),
        ..Default::default()
    };
    let mut m = Vec::new();
    for rec in &records[1..] {
        labels.rows.push(rec.get(0).unwrap_or_default().to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Argument(format!("{}: `{s}` is not a number", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        m.push(row);
    }
    check_matrix(&m)?;
    Ok((m, labels))
}

fn csv_io(e: csv::Error, path: &Path) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Argument(format!("{}: {other:?}", path.display())),
    }
}

/// Linear RGB interpolation between [`RAMP_LOW`] and [`RAMP_HIGH`];
/// `t` is clamped to `[0, 1]`.
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let mut c = [0u8; 3];
    for i in 0..3 {
        let (a, b) = (RAMP_LOW[i] as f64, RAMP_HIGH[i] as f64);
        c[i] = (a + (b - a) * t).round() as u8;
    }
    c
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the matrix as an SVG grid. Values are normalized by the matrix
/// minimum and maximum; a constant matrix uses the middle of the ramp. Each
/// cell carries its value in a `<title>` tooltip.
pub fn render_svg(m: &[Vec<f64>], labels: &HeatmapLabels) -> Result<String> {
    let cols = check_matrix(m)?;
    let rows = m.len();
    let (lo, hi) = m
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = MARGIN_LEFT + cols * CELL + 8;
    let height = MARGIN_TOP + rows * CELL + 40;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="{MARGIN_LEFT}" y="16" font-size="12">{}</text>"#, escape(&labels.title));
    for (r, row) in m.iter().enumerate() {
        let y = MARGIN_TOP + r * CELL;
        if let Some(l) = labels.rows.get(r) {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 4,
                y + CELL / 2 + 3,
                escape(l)
            );
        }
        for (c, &v) in row.iter().enumerate() {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let [red, green, blue] = ramp_color(t);
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="#{red:02x}{green:02x}{blue:02x}"><title>{r},{c}: {v}</title></rect>"##,
                MARGIN_LEFT + c * CELL
            );
        }
    }
    let below = MARGIN_TOP + rows * CELL;
    for (c, l) in labels.cols.iter().enumerate().take(cols) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + c * CELL + CELL / 2,
            below + 12,
            escape(l)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + cols * CELL / 2,
        below + 30,
        escape(&labels.col_axis)
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + rows * CELL / 2,
        MARGIN_TOP + rows * CELL / 2,
        escape(&labels.row_axis)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// CSV at `csv_path`, plus an SVG rendering when `svg` is given.
pub fn export_heatmap(
    m: &[Vec<f64>],
    csv_path: &Path,
    svg: Option<(&Path, &HeatmapLabels)>,
) -> Result<()> {
    write_matrix_csv(m, csv_path)?;
    if let Some((path, labels)) = svg {
        let text = render_svg(m, labels)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Per-token timing of one variant. The first token of every generation
/// (which absorbs the prompt prefill) is excluded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub tokens_timed: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub tokens_per_second: f64,
}

impl TimingSummary {
    pub fn from_steps<'a>(runs: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut all: Vec<f64> = runs
            .into_iter()
            .flat_map(|r| r.iter().skip(1).copied())
            .collect();
        if all.is_empty() {
            return Self::default();
        }
        all.sort_by(f64::total_cmp);
        let n = all.len();
        let mean = all.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            all[n / 2]
        } else {
            (all[n / 2 - 1] + all[n / 2]) / 2.0
        };
        Self {
            tokens_timed: n,
            mean_ms: mean,
            median_ms: median,
            tokens_per_second: if mean > 0.0 { 1000.0 / mean } else { f64::INFINITY },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub variant: String,
    #[serde(flatten)]
    pub timing: TimingSummary,
    /// Mean ms/token relative to the baseline variant.
    pub factor: f64,
}

/// Timing rows for named variants; factors are relative to `baseline`.
pub fn latency_report(timings: &[(String, TimingSummary)], baseline: &str) -> Result<Vec<LatencyRow>> {
    let base = timings
        .iter()
        .find(|(n, _)| n == baseline)
        .ok_or_else(|| Error::Argument(format!("baseline variant `{baseline}` has no timings")))?
        .1
        .mean_ms;
    Ok(timings
        .iter()
        .map(|(n, t)| LatencyRow {
            variant: n.clone(),
            timing: t.clone(),
            factor: if base > 0.0 { t.mean_ms / base } else { f64::NAN },
        })
        .collect())
}

/// Timing summary over a set of generations.
pub fn generation_timing(gens: &[Generation]) -> TimingSummary {
    TimingSummary::from_steps(gens.iter().map(|g| g.step_ms.as_slice()))
}
