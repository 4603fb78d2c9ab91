//! Plain SVG figures: prediction-vs-gold traces and contribution bars.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::fusion_run::FusionReport;
use super::predictions::{read_predictions, SubjectPrediction};
use super::{write_bytes, ExperimentRecord, System};
use crate::data::Dimension;
use crate::error::{DdatError, Result, StageContext};

const WIDTH: f64 = 720.0;
const PANEL_HEIGHT: f64 = 200.0;
const MARGIN: f64 = 40.0;

/// An experiment record and the directory holding its outputs.
#[derive(Debug, Clone)]
pub struct PlotRun {
    pub record: ExperimentRecord,
    pub dir: PathBuf,
}

impl PlotRun {
    pub fn load(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let record = ExperimentRecord::read(dir.join(super::RECORD_FILE))?;
        Ok(PlotRun { record, dir })
    }

    /// Test predictions, post-processed when available.
    fn test_predictions(&self) -> Result<Option<Vec<SubjectPrediction>>> {
        let files = &self.record.files;
        match files.get("predictions_test_pp").or_else(|| files.get("predictions_test")) {
            Some(rel) => read_predictions(self.dir.join(rel)).map(Some),
            None => Ok(None),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, ys: &[f64], x0: f64, y0: f64, range: (f64, f64), color: &str) {
    let n = ys.len().max(2) - 1;
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let w = WIDTH - 2.0 * MARGIN;
    let h = PANEL_HEIGHT - 2.0 * MARGIN;
    let _ = write!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1" points=""#);
    for (i, y) in ys.iter().enumerate() {
        let px = x0 + w * i as f64 / n as f64;
        let py = y0 + h - h * (y - lo) / span;
        let _ = write!(out, "{px:.2},{py:.2} ");
    }
    let _ = writeln!(out, r#""/>"#);
}

/// Stacked panels of prediction (blue) against gold (black).
/// A panel without data is drawn empty with an "n/a" note.
pub fn trace_svg(title: &str, header: &str, panels: &[(String, Option<(&[f64], &[f64])>)]) -> String {
    let height = PANEL_HEIGHT * panels.len() as f64 + 30.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(s, "<!-- {} -->", escape(header));
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="20" font-size="14">{}</text>"#, escape(title));
    for (i, (label, data)) in panels.iter().enumerate() {
        let y0 = 30.0 + PANEL_HEIGHT * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="gray"/>"#,
            y0 + MARGIN / 2.0,
            WIDTH - 2.0 * MARGIN,
            PANEL_HEIGHT - MARGIN
        );
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="{:.2}" font-size="12">{}</text>"#,
            y0 + MARGIN / 2.0 - 4.0,
            escape(label)
        );
        match data {
            Some((pred, gold)) => {
                let (lo, hi) = pred
                    .iter()
                    .chain(gold.iter())
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
                let x0 = MARGIN;
                let py0 = y0 + MARGIN / 2.0;
                polyline(&mut s, gold, x0, py0, (lo, hi), "black");
                polyline(&mut s, pred, x0, py0, (lo, hi), "steelblue");
            }
            None => {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="gray">n/a</text>"#,
                    WIDTH / 2.0,
                    y0 + PANEL_HEIGHT / 2.0
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Horizontal bars of percentage shares.
pub fn contribution_svg(title: &str, header: &str, shares: &[(String, f64)]) -> String {
    let bar = 24.0;
    let height = 40.0 + bar * 1.5 * shares.len() as f64 + 20.0;
    let label_w = 160.0;
    let scale = (WIDTH - label_w - 80.0) / 100.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height:.2}" viewBox="0 0 {WIDTH} {height:.2}">"#
    );
    let _ = writeln!(s, "<!-- {} -->", escape(header));
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(title));
    for (i, (name, pct)) in shares.iter().enumerate() {
        let y = 40.0 + bar * 1.5 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="10" y="{:.2}" font-size="12">{}</text>"#,
            y + bar * 0.7,
            escape(name)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{label_w}" y="{y:.2}" width="{:.2}" height="{bar}" fill="steelblue"/>"#,
            pct * scale
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12">{pct:.1}%</text>"#,
            label_w + pct * scale + 6.0,
            y + bar * 0.7
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one two-panel (arousal, valence) test-set figure per system and
/// subject, and one bar chart per fusion entry with contribution shares.
/// Nothing is written when there is nothing to plot.
pub fn emit_plots(runs: &[PlotRun], fusion: &[FusionReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let has_shares = fusion
        .iter()
        .any(|f| f.entries.iter().any(|e| e.contributions.is_some()));
    if runs.is_empty() && !has_shares {
        return Err(DdatError::invalid("no records to plot").in_stage("plot"));
    }

    // gather everything before writing
    let mut figures: Vec<(PathBuf, String)> = Vec::new();
    let mut systems: Vec<System> = runs.iter().map(|r| r.record.system).collect();
    systems.sort();
    systems.dedup();
    for system in systems {
        let mut by_dim = Vec::new();
        let mut header = Vec::new();
        for dim in Dimension::ALL {
            let run = runs.iter().find(|r| r.record.system == system && r.record.dimension == dim);
            let preds = match run {
                Some(r) => {
                    header.push(format!(
                        "{dim}: config_hash={} seed={}",
                        r.record.config_hash, r.record.seed
                    ));
                    r.test_predictions().stage("plot")?
                }
                None => None,
            };
            by_dim.push((dim, preds));
        }
        let mut subjects: Vec<String> = Vec::new();
        for (_, preds) in &by_dim {
            for s in preds.iter().flatten() {
                if !subjects.contains(&s.subject_id) {
                    subjects.push(s.subject_id.clone());
                }
            }
        }
        for id in subjects {
            let panels: Vec<(String, Option<(&[f64], &[f64])>)> = by_dim
                .iter()
                .map(|(dim, preds)| {
                    let data = preds
                        .iter()
                        .flatten()
                        .find(|s| s.subject_id == id)
                        .map(|s| (s.prediction.as_slice(), s.gold.as_slice()));
                    (dim.to_string(), data)
                })
                .collect();
            let svg = trace_svg(&format!("{system}: {id} (test)"), &header.join("; "), &panels);
            figures.push((out_dir.join(format!("traces_{system}_{id}.svg")), svg));
        }
    }
    for report in fusion {
        for (i, e) in report.entries.iter().enumerate() {
            if let Some(shares) = &e.contributions {
                let header = format!("config_hash={} seed={}", report.config_hash, report.seed);
                let svg = contribution_svg(&format!("{}: {}", report.name, e.label), &header, shares);
                figures.push((out_dir.join(format!("contributions_{}_{i}.svg", report.name)), svg));
            }
        }
    }
    if figures.is_empty() {
        return Err(DdatError::invalid("records contain no test predictions to plot").in_stage("plot"));
    }
    for (path, svg) in &figures {
        write_bytes(path, svg.as_bytes()).stage("plot")?;
    }
    Ok(figures.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_figure_has_two_panels() {
        let p = [0.1, 0.2, 0.3];
        let g = [0.0, 0.2, 0.4];
        let svg = trace_svg(
            "s1",
            "config_hash=ab seed=1",
            &[("arousal".into(), Some((&p[..], &g[..]))), ("valence".into(), None)],
        );
        assert_eq!(svg.matches("<rect").count(), 2);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("n/a"));
        assert!(svg.contains("config_hash=ab seed=1"));
    }

    #[test]
    fn contribution_bars() {
        let svg = contribution_svg("av", "h", &[("audio".into(), 66.7), ("video".into(), 33.3)]);
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("66.7%"));
        let escaped = contribution_svg("a<b", "h", &[("x".into(), 100.0)]);
        assert!(escaped.contains("a&lt;b"));
    }

    #[test]
    fn empty_input_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plots");
        assert!(emit_plots(&[], &[], &out).is_err());
        assert!(!out.exists());
    }
}
