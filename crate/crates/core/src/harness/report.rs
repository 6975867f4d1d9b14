// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report files: CSV tables, JSON summaries and SVG plots.
//!
//! Every CSV starts with a header row whose last column is `schema_version`.
//! Floats are written in Rust's shortest round-trip form, so identical
//! results give byte-identical files. Timing data goes only to
//! `throughput.json` and `throughput.svg`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ablation::AblationTable;
use crate::harness::bench::ThroughputReport;
use crate::harness::experiment::{Experiment, Label, Summary};
use crate::harness::stats::{BarrierSource, BinReport};
use crate::steering::SteeringMode;

/// Version of every CSV layout written here.
pub const SCHEMA_VERSION: u32 = 1;

/// Header of `traces.csv`.
pub const TRACES_HEADER: &str =
    "step,layer,h,fired,theta_norm,violation,token,label,prompt,mode,schema_version";

/// Header of `bins.csv`.
pub const BINS_HEADER: &str =
    "bin,count,rate,lo,hi,hallucinated,barrier_min,barrier_max,schema_version";

/// Header of every `ablation_*.csv`.
pub const ABLATION_HEADER: &str = "parameter,value,mode,tau,alpha,hallucination_rate,object_recall,mean_fired_fraction,mean_length,object_tokens,schema_version";

/// Everything a run can report. Empty parts are skipped.
#[derive(Debug, Clone, Default)]
pub struct Results {
    pub experiments: Vec<Experiment>,
    pub bins: Option<BinReport>,
    pub ablation: Vec<AblationTable>,
    pub throughput: Option<ThroughputReport>,
}

impl Results {
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.experiments.is_empty()
            && self.bins.is_none()
            && self.ablation.is_empty()
            && self.throughput.is_none()
    }
}

/// Outcome of [`emit_reports`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportStatus {
    /// Files written, in order.
    Written(Vec<PathBuf>),
    /// Nothing to report; no file or directory was created.
    Empty,
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    schema_version: u32,
    experiments: Vec<&'a Summary>,
    bins: Option<&'a BinReport>,
}

#[derive(Serialize)]
struct ThroughputDoc<'a> {
    schema_version: u32,
    #[serde(flatten)]
    report: &'a ThroughputReport,
}

/// Write the report files for `results` into `out_dir`, creating it.
///
/// # Errors
///
/// [`Error::Io`] with the failing path; [`Error::Json`] if serialization fails.
pub fn emit_reports(results: &Results, out_dir: &Path) -> Result<ReportStatus> {
    if results.is_empty() {
        return Ok(ReportStatus::Empty);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    if !results.experiments.is_empty() || results.bins.is_some() {
        let doc = SummaryDoc {
            schema_version: SCHEMA_VERSION,
            experiments: results.experiments.iter().map(|e| &e.summary).collect(),
            bins: results.bins.as_ref(),
        };
        put("summary.json", serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    if !results.experiments.is_empty() {
        put("traces.csv", traces_csv(&results.experiments))?;
    }
    if let Some(bins) = &results.bins {
        put("bins.csv", bins_csv(bins))?;
        put("bins.svg", bins_svg(bins))?;
    }
    for table in &results.ablation {
        put(&format!("ablation_{}.csv", table.name), ablation_csv(table))?;
    }
    if let Some(t) = &results.throughput {
        let doc = ThroughputDoc {
            schema_version: SCHEMA_VERSION,
            report: t,
        };
        put("throughput.json", serde_json::to_string_pretty(&doc)? + "\n")?;
        put("throughput.svg", throughput_svg(t))?;
    }
    Ok(ReportStatus::Written(written))
}

/// `traces.csv` body: one row per (prompt, step, steered layer). Steps
/// without a steered layer get one row with empty layer fields.
#[must_use]
pub fn traces_csv(experiments: &[Experiment]) -> String {
    let mut out = String::from(TRACES_HEADER);
    out.push('\n');
    for e in experiments {
        let mode = e.summary.mode;
        for run in &e.runs {
            for (step, label) in run.trace.steps.iter().zip(&run.labels) {
                let tail = format!(
                    "{},{},{},{mode},{SCHEMA_VERSION}",
                    step.token,
                    label.as_str(),
                    run.index
                );
                if step.layers.is_empty() {
                    let _ = writeln!(out, "{},,,,,,{tail}", step.step);
                }
                for r in &step.layers {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{tail}",
                        step.step,
                        r.layer,
                        r.h,
                        u8::from(r.fired),
                        r.theta_norm,
                        r.violation
                    );
                }
            }
        }
    }
    out
}

/// `bins.csv` body: header plus one row per bin.
#[must_use]
pub fn bins_csv(report: &BinReport) -> String {
    let mut out = String::from(BINS_HEADER);
    out.push('\n');
    for b in &report.bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{SCHEMA_VERSION}",
            b.index, b.count, b.rate, b.lo, b.hi, b.hallucinated, b.barrier_min, b.barrier_max
        );
    }
    out
}

/// One `ablation_*.csv` body.
#[must_use]
pub fn ablation_csv(table: &AblationTable) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for row in &table.rows {
        let s = &row.summary;
        let rate = s.hallucination_rate.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{rate},{},{},{},{},{SCHEMA_VERSION}",
            row.parameter,
            row.value,
            s.mode,
            s.tau,
            s.alpha,
            s.object_recall,
            s.mean_fired_fraction,
            s.mean_length,
            s.object_tokens
        );
    }
    out
}

/// One parsed `traces.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub layer: Option<usize>,
    pub h: Option<f64>,
    pub fired: Option<bool>,
    pub theta_norm: Option<f64>,
    pub violation: Option<f64>,
    pub token: u32,
    pub label: Label,
    pub prompt: usize,
    pub mode: SteeringMode,
}

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("traces.csv line {line}: bad {name} {field:?}")))
}

fn parse_opt<T: std::str::FromStr>(field: &str, name: &str, line: usize) -> Result<Option<T>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_field(field, name, line).map(Some)
    }
}

/// Parse a `traces.csv` body written by [`traces_csv`].
///
/// # Errors
///
/// [`Error::Config`] for a wrong header, schema version or malformed row.
pub fn parse_traces(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACES_HEADER) {
        return Err(Error::Config(format!(
            "traces.csv header must be {TRACES_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Config(format!("traces.csv line {n}: expected 11 fields")));
        }
        let version: u32 = parse_field(f[10], "schema_version", n)?;
        if version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "traces.csv line {n}: schema_version {version}, expected {SCHEMA_VERSION}"
            )));
        }
        let fired = match f[3] {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => return Err(Error::Config(format!("traces.csv line {n}: bad fired {other:?}"))),
        };
        let label = match f[7] {
            "other" => Label::Other,
            "grounded" => Label::Grounded,
            "hallucinated" => Label::Hallucinated,
            other => return Err(Error::Config(format!("traces.csv line {n}: bad label {other:?}"))),
        };
        let h: Option<f64> = parse_opt(f[2], "h", n)?;
        if h.is_some_and(f64::is_nan) {
            return Err(Error::NonFinite(format!("traces.csv line {n}: h")));
        }
        rows.push(TraceRow {
            step: parse_field(f[0], "step", n)?,
            layer: parse_opt(f[1], "layer", n)?,
            h,
            fired,
            theta_norm: parse_opt(f[4], "theta_norm", n)?,
            violation: parse_opt(f[5], "violation", n)?,
            token: parse_field(f[6], "token", n)?,
            label,
            prompt: parse_field(f[8], "prompt", n)?,
            mode: parse_field(f[9], "mode", n)?,
        });
    }
    Ok(rows)
}

/// Read and parse a `traces.csv` file.
///
/// # Errors
///
/// [`Error::Io`] when unreadable, otherwise as [`parse_traces`].
pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_traces(&text)
}

/// `(barrier, hallucinated)` per object token of one mode, as
/// [`crate::harness::stats::object_samples`] computes it from runs.
///
/// Rows are grouped by consecutive `(prompt, step)`, which is how
/// [`traces_csv`] writes them.
#[must_use]
pub fn samples_from_rows(rows: &[TraceRow], mode: SteeringMode, source: BarrierSource) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    let selected: Vec<&TraceRow> = rows.iter().filter(|r| r.mode == mode).collect();
    for group in selected.chunk_by(|a, b| a.prompt == b.prompt && a.step == b.step) {
        let first = group[0];
        if first.label == Label::Other {
            continue;
        }
        let h = match source {
            BarrierSource::MeanSteered => {
                let hs: Vec<f64> = group.iter().filter_map(|r| r.h).collect();
                (!hs.is_empty()).then(|| hs.iter().sum::<f64>() / hs.len() as f64)
            }
            BarrierSource::Layer(l) => group.iter().find(|r| r.layer == Some(l)).and_then(|r| r.h),
        };
        if let Some(h) = h {
            out.push((h, first.label == Label::Hallucinated));
        }
    }
    out
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64, title: &str) -> Self {
        let mut s = Self {
            body: String::new(),
            width,
            height,
        };
        s.text(width / 2.0, 24.0, title, "middle", 16);
        s
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"  <rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64) {
        let _ = writeln!(
            self.body,
            r#"  <line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="black" stroke-width="1"/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, text: &str, anchor: &str, size: u32) {
        let _ = writeln!(
            self.body,
            r#"  <text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="{size}">{}</text>"#,
            escape(text)
        );
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

const PLOT_LEFT: f64 = 70.0;
const PLOT_TOP: f64 = 50.0;
const PLOT_W: f64 = 520.0;
const PLOT_H: f64 = 300.0;

fn y_axis(svg: &mut Svg, max: f64, label: &str) {
    let bottom = PLOT_TOP + PLOT_H;
    svg.line(PLOT_LEFT, PLOT_TOP, PLOT_LEFT, bottom);
    svg.line(PLOT_LEFT, bottom, PLOT_LEFT + PLOT_W, bottom);
    for i in 0..=4 {
        let v = max * f64::from(i) / 4.0;
        let y = bottom - PLOT_H * f64::from(i) / 4.0;
        svg.line(PLOT_LEFT - 4.0, y, PLOT_LEFT, y);
        svg.text(PLOT_LEFT - 8.0, y + 4.0, &format_tick(v), "end", 11);
    }
    let _ = writeln!(
        svg.body,
        r#"  <text x="18" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 18 {:.2})">{}</text>"#,
        PLOT_TOP + PLOT_H / 2.0,
        PLOT_TOP + PLOT_H / 2.0,
        escape(label)
    );
}

fn format_tick(v: f64) -> String {
    if v >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Hallucination rate per barrier bin, with 95% Wilson intervals as whiskers.
#[must_use]
pub fn bins_svg(report: &BinReport) -> String {
    let mut svg = Svg::new(640.0, 420.0, "Hallucination rate by barrier bin");
    let max = report
        .bins
        .iter()
        .map(|b| b.hi)
        .fold(0.0_f64, f64::max)
        .max(0.05)
        .min(1.0);
    y_axis(&mut svg, max, "hallucination rate");
    let n = report.bins.len().max(1) as f64;
    let slot = PLOT_W / n;
    let bottom = PLOT_TOP + PLOT_H;
    let scale = |v: f64| bottom - PLOT_H * (v / max).min(1.0);
    for (i, b) in report.bins.iter().enumerate() {
        let x = PLOT_LEFT + slot * i as f64;
        let cx = x + slot / 2.0;
        svg.rect(x + slot * 0.15, scale(b.rate), slot * 0.7, bottom - scale(b.rate), "#4c72b0");
        svg.line(cx, scale(b.lo), cx, scale(b.hi));
        svg.line(cx - 5.0, scale(b.lo), cx + 5.0, scale(b.lo));
        svg.line(cx - 5.0, scale(b.hi), cx + 5.0, scale(b.hi));
        svg.text(cx, bottom + 16.0, &(i + 1).to_string(), "middle", 11);
    }
    svg.text(
        PLOT_LEFT + PLOT_W / 2.0,
        bottom + 36.0,
        "barrier bin (lowest to highest)",
        "middle",
        12,
    );
    svg.finish()
}

/// Tokens per second, unsteered against steered.
#[must_use]
pub fn throughput_svg(report: &ThroughputReport) -> String {
    let c = &report.steered_vs_unsteered;
    let mut svg = Svg::new(640.0, 420.0, "Decoding throughput");
    let max = c.tokens_per_sec_a.max(c.tokens_per_sec_b).max(1.0) * 1.1;
    y_axis(&mut svg, max, "tokens per second");
    let bottom = PLOT_TOP + PLOT_H;
    let bars = [
        (c.label_a.as_str(), c.tokens_per_sec_a, "#8c8c8c"),
        (c.label_b.as_str(), c.tokens_per_sec_b, "#4c72b0"),
    ];
    let slot = PLOT_W / bars.len() as f64;
    for (i, (label, v, fill)) in bars.into_iter().enumerate() {
        let x = PLOT_LEFT + slot * i as f64;
        let top = bottom - PLOT_H * (v / max);
        svg.rect(x + slot * 0.25, top, slot * 0.5, bottom - top, fill);
        svg.text(x + slot / 2.0, top - 6.0, &format!("{v:.0}"), "middle", 11);
        svg.text(x + slot / 2.0, bottom + 16.0, label, "middle", 12);
    }
    svg.text(
        PLOT_LEFT + PLOT_W / 2.0,
        bottom + 36.0,
        &format!("ratio {:.3}", c.ratio),
        "middle",
        12,
    );
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stats::bin_analysis;

    #[test]
    fn empty_results_write_nothing() {
        let dir = std::env::temp_dir().join("barrier-steer-report-empty-unit");
        let _ = std::fs::remove_dir_all(&dir);
        assert_eq!(emit_reports(&Results::default(), &dir).unwrap(), ReportStatus::Empty);
        assert!(!dir.exists());
    }

    #[test]
    fn bins_csv_has_nine_rows() {
        let samples: Vec<(f64, bool)> = (0..40).map(|i| (f64::from(i), i % 3 == 0)).collect();
        let csv = bins_csv(&bin_analysis(&samples).unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 10);
        assert!(lines[0].starts_with("bin,count,rate,lo,hi,"));
    }

    #[test]
    fn svg_escapes_text() {
        assert_eq!(escape("a<b&c"), "a&lt;b&amp;c");
    }
}
