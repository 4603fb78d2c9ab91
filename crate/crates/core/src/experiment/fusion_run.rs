//! Fusion scenarios: combine prediction streams (or tune one stream by its
//! difficulty trace) on the development set and apply the fit to test.
//!
//! ```toml
//! name = "audio+video"
//! mode = "slr"            # or "dynamic"
//! out_dir = "fusion/av"
//!
//! [[streams]]
//! name = "audio"
//! dev = "runs/audio/predictions/dev.csv"
//! test = "runs/audio/predictions/test.csv"
//! difficulty_dev = "runs/audio/indicators/dev"    # dynamic mode only
//! difficulty_test = "runs/audio/indicators/test"
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::predictions::{read_predictions, SubjectPrediction};
use super::{content_hash, to_json_bytes, write_bytes};
use crate::data::Partition;
use crate::difficulty::read_indicator_csv;
use crate::error::{check_len, DdatError, Result, StageContext};
use crate::fusion::{
    apply_dynamic_tuning, apply_slr, contribution_analysis, fit_dynamic_tuning, fit_slr, FitOptions,
};
use crate::matrix::Matrix;
use crate::metrics::ccc;
use crate::training::SequenceExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One linear combination of all streams.
    Slr,
    /// Each stream tuned separately by its own difficulty trace.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub name: String,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Directory of per-subject indicator CSVs for the development set.
    #[serde(default)]
    pub difficulty_dev: Option<PathBuf>,
    #[serde(default)]
    pub difficulty_test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionScenario {
    pub name: String,
    pub mode: FusionMode,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub options: FitOptions,
    pub streams: Vec<StreamSpec>,
}

impl FusionScenario {
    /// Reads a TOML scenario; relative paths resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DdatError::io(path, e))?;
        let mut s: FusionScenario = toml::from_str(&text).map_err(|e| DdatError::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut s.out_dir);
        for st in &mut s.streams {
            resolve(&mut st.dev);
            for p in [&mut st.test, &mut st.difficulty_dev, &mut st.difficulty_test].into_iter().flatten() {
                resolve(p);
            }
        }
        Ok(s)
    }

    /// Hash of the scenario settings and the contents of every input file.
    pub fn hash(&self) -> Result<String> {
        let mut bytes = serde_json::to_vec(&(&self.name, self.mode, self.seed, self.options)).expect("serializes");
        for st in &self.streams {
            bytes.extend_from_slice(st.name.as_bytes());
            for p in [Some(&st.dev), st.test.as_ref()].into_iter().flatten() {
                bytes.extend(std::fs::read(p).map_err(|e| DdatError::io(p, e))?);
            }
        }
        Ok(content_hash(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEntry {
    pub label: String,
    pub intercept: f64,
    /// `(stream, γ)` pairs.
    pub coefficients: Vec<(String, f64)>,
    pub difficulty_coef: Option<f64>,
    /// `(stream, percent)` pairs (linear fusion only).
    pub contributions: Option<Vec<(String, f64)>>,
    pub ridge: bool,
    pub dev_ccc: f64,
    pub test_ccc: Option<f64>,
    /// Development CCC of each input stream on its own.
    pub stream_dev_ccc: Vec<(String, f64)>,
    pub stream_test_ccc: Vec<(String, f64)>,
    /// Output CSVs relative to the scenario directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub mode: FusionMode,
    pub entries: Vec<FusionEntry>,
}

impl FusionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# config_hash={} seed={}", self.config_hash, self.seed);
        let _ = writeln!(s, "fusion scenario {} ({:?})", self.name, self.mode);
        for e in &self.entries {
            let test = e.test_ccc.map_or("-".to_owned(), |c| format!("{c:.4}"));
            let _ = writeln!(s, "{}: dev CCC {:.4}, test CCC {test}", e.label, e.dev_ccc);
            let _ = writeln!(s, "  intercept {:.6}", e.intercept);
            for (name, g) in &e.coefficients {
                let _ = write!(s, "  gamma[{name}] {g:.6}");
                if let Some(c) = e.contributions.as_ref().and_then(|c| c.iter().find(|(n, _)| n == name)) {
                    let _ = write!(s, "  share {:.1}%", c.1);
                }
                let _ = writeln!(s);
            }
            if let Some(gd) = e.difficulty_coef {
                let _ = writeln!(s, "  gamma_d {gd:.6}");
            }
            for (name, c) in &e.stream_dev_ccc {
                let _ = writeln!(s, "  input {name}: dev CCC {c:.4}");
            }
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| DdatError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| DdatError::format(path, e.to_string()))
    }
}

struct Loaded {
    name: String,
    subjects: Vec<SubjectPrediction>,
}

fn flat(subjects: &[SubjectPrediction], f: impl Fn(&SubjectPrediction) -> &Vec<f64>) -> Vec<f64> {
    subjects.iter().flat_map(|s| f(s).iter().copied()).collect()
}

/// Every stream must cover the same subjects, frames and gold standard.
fn check_aligned(streams: &[Loaded]) -> Result<()> {
    let first = &streams[0];
    for st in &streams[1..] {
        check_len("stream subject count", first.subjects.len(), st.subjects.len())?;
        for (a, b) in first.subjects.iter().zip(&st.subjects) {
            if a.subject_id != b.subject_id {
                return Err(DdatError::invalid(format!(
                    "stream {} lists subject {} where {} lists {}",
                    st.name, b.subject_id, first.name, a.subject_id
                )));
            }
            check_len("stream frame count", a.gold.len(), b.gold.len())?;
            if a.gold.iter().zip(&b.gold).any(|(x, y)| (x - y).abs() > 1e-9) {
                return Err(DdatError::invalid(format!(
                    "streams {} and {} disagree on the gold standard for {}",
                    first.name, st.name, a.subject_id
                )));
            }
        }
    }
    Ok(())
}

fn load_difficulty(dir: &Path, subjects: &[SubjectPrediction]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in subjects {
        let path = dir.join(format!("{}.csv", s.subject_id));
        let (_, trace) = read_indicator_csv(&path)?;
        check_len("difficulty trace length", s.gold.len(), trace.rows())?;
        out.extend(trace.row_iter().map(|r| r.iter().sum::<f64>()));
    }
    Ok(out)
}

/// Writes a fused series in the prediction CSV layout.
fn write_fused(path: &Path, comments: &[String], template: &[SubjectPrediction], fused: &[f64]) -> Result<()> {
    let mut examples = Vec::with_capacity(template.len());
    let mut preds = Vec::with_capacity(template.len());
    let mut offset = 0;
    for s in template {
        let n = s.gold.len();
        examples.push(SequenceExample {
            id: s.subject_id.clone(),
            partition: Partition::Test,
            times: s.times.clone(),
            inputs: Matrix::zeros(n, 0),
            gold: s.gold.clone(),
            uncertainty: None,
        });
        preds.push(fused[offset..offset + n].to_vec());
        offset += n;
    }
    super::predictions::write_predictions(path, comments, &examples, &preds)
}

fn load_streams(scenario: &FusionScenario, test: bool) -> Result<Option<Vec<Loaded>>> {
    if test && scenario.streams.iter().any(|s| s.test.is_none()) {
        return Ok(None);
    }
    let streams = scenario
        .streams
        .iter()
        .map(|st| {
            let path = if test { st.test.as_ref().expect("checked") } else { &st.dev };
            Ok(Loaded {
                name: st.name.clone(),
                subjects: read_predictions(path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_aligned(&streams)?;
    Ok(Some(streams))
}

/// Fits the scenario on development predictions, applies it to test, and
/// writes fused CSVs plus `fusion_report.{json,txt}` to the scenario directory.
pub fn run_fusion(scenario: &FusionScenario) -> Result<FusionReport> {
    if scenario.streams.is_empty() {
        return Err(DdatError::invalid("fusion scenario lists no streams").in_stage("fusion"));
    }
    let hash = scenario.hash().stage("fusion input")?;
    let header = format!("config_hash={hash} seed={}", scenario.seed);
    let dev = load_streams(scenario, false).stage("fusion input")?.expect("dev always loads");
    let test = load_streams(scenario, true).stage("fusion input")?;
    let out = &scenario.out_dir;
    let dev_gold = flat(&dev[0].subjects, |s| &s.gold);
    let test_gold = test.as_ref().map(|t| flat(&t[0].subjects, |s| &s.gold));
    let stream_scores = |loaded: &[Loaded], gold: &[f64]| -> Result<Vec<(String, f64)>> {
        loaded
            .iter()
            .map(|l| Ok((l.name.clone(), ccc(&flat(&l.subjects, |s| &s.prediction), gold)?.ccc)))
            .collect()
    };
    let stream_dev_ccc = stream_scores(&dev, &dev_gold).stage("fusion")?;
    let stream_test_ccc = match (&test, &test_gold) {
        (Some(t), Some(g)) => stream_scores(t, g).stage("fusion")?,
        _ => Vec::new(),
    };

    let mut entries = Vec::new();
    match scenario.mode {
        FusionMode::Slr => {
            let dev_streams: Vec<Vec<f64>> = dev.iter().map(|l| flat(&l.subjects, |s| &s.prediction)).collect();
            let model = fit_slr(&dev_streams, &dev_gold, &scenario.options).stage("fusion")?;
            let fused_dev = apply_slr(&model, &dev_streams).stage("fusion")?;
            let shares = contribution_analysis(&model, &dev_streams).ok();
            let mut files = vec!["fused_dev.csv".to_owned()];
            write_fused(&out.join("fused_dev.csv"), &[header.clone(), "partition=dev".into()], &dev[0].subjects, &fused_dev)
                .stage("fusion output")?;
            let test_ccc = match (&test, &test_gold) {
                (Some(t), Some(g)) => {
                    let streams: Vec<Vec<f64>> = t.iter().map(|l| flat(&l.subjects, |s| &s.prediction)).collect();
                    let fused = apply_slr(&model, &streams).stage("fusion")?;
                    write_fused(&out.join("fused_test.csv"), &[header.clone(), "partition=test".into()], &t[0].subjects, &fused)
                        .stage("fusion output")?;
                    files.push("fused_test.csv".to_owned());
                    Some(ccc(&fused, g).stage("fusion")?.ccc)
                }
                _ => None,
            };
            let names: Vec<String> = dev.iter().map(|l| l.name.clone()).collect();
            entries.push(FusionEntry {
                label: "fused".into(),
                intercept: model.intercept,
                coefficients: names.iter().cloned().zip(model.coefficients.iter().copied()).collect(),
                difficulty_coef: None,
                contributions: shares.map(|s| names.iter().cloned().zip(s).collect()),
                ridge: model.ridge,
                dev_ccc: ccc(&fused_dev, &dev_gold).stage("fusion")?.ccc,
                test_ccc,
                stream_dev_ccc: stream_dev_ccc.clone(),
                stream_test_ccc: stream_test_ccc.clone(),
                files,
            });
        }
        FusionMode::Dynamic => {
            for (i, spec) in scenario.streams.iter().enumerate() {
                let dir = spec.difficulty_dev.as_ref().ok_or_else(|| {
                    DdatError::invalid(format!("stream {} has no difficulty_dev directory", spec.name)).in_stage("fusion input")
                })?;
                let subjects = &dev[i].subjects;
                let d_dev = load_difficulty(dir, subjects).stage("fusion input")?;
                let pred_dev = flat(subjects, |s| &s.prediction);
                let model = fit_dynamic_tuning(&pred_dev, &d_dev, &dev_gold, &scenario.options).stage("fusion")?;
                let tuned_dev = apply_dynamic_tuning(&model, &pred_dev, &d_dev).stage("fusion")?;
                let dev_file = format!("tuned_{}_dev.csv", spec.name);
                write_fused(&out.join(&dev_file), &[header.clone(), format!("stream={} partition=dev", spec.name)], subjects, &tuned_dev)
                    .stage("fusion output")?;
                let mut files = vec![dev_file];
                let test_ccc = match (&test, &test_gold, &spec.difficulty_test) {
                    (Some(t), Some(g), Some(dir)) => {
                        let subjects = &t[i].subjects;
                        let d = load_difficulty(dir, subjects).stage("fusion input")?;
                        let tuned = apply_dynamic_tuning(&model, &flat(subjects, |s| &s.prediction), &d).stage("fusion")?;
                        let test_file = format!("tuned_{}_test.csv", spec.name);
                        write_fused(&out.join(&test_file), &[header.clone(), format!("stream={} partition=test", spec.name)], subjects, &tuned)
                            .stage("fusion output")?;
                        files.push(test_file);
                        Some(ccc(&tuned, g).stage("fusion")?.ccc)
                    }
                    _ => None,
                };
                entries.push(FusionEntry {
                    label: format!("{} + difficulty", spec.name),
                    intercept: model.intercept,
                    coefficients: vec![(spec.name.clone(), model.coefficients[0])],
                    difficulty_coef: model.difficulty_coef,
                    contributions: None,
                    ridge: model.ridge,
                    dev_ccc: ccc(&tuned_dev, &dev_gold).stage("fusion")?.ccc,
                    test_ccc,
                    stream_dev_ccc: vec![stream_dev_ccc[i].clone()],
                    stream_test_ccc: stream_test_ccc.get(i).cloned().into_iter().collect(),
                    files,
                });
            }
        }
    }

    let report = FusionReport {
        name: scenario.name.clone(),
        config_hash: hash,
        seed: scenario.seed,
        mode: scenario.mode,
        entries,
    };
    write_bytes(&out.join("fusion_report.json"), &to_json_bytes(&report)).stage("fusion output")?;
    write_bytes(&out.join("fusion_report.txt"), report.to_text().as_bytes()).stage("fusion output")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Partition;
    use crate::difficulty::{write_indicator_csv, DifficultyIndicator, DifficultyMode};
    use crate::experiment::write_predictions;

    fn write_stream(dir: &Path, name: &str, gold: &[Vec<f64>], gain: f64, phase: f64) -> StreamSpec {
        let mut specs = Vec::new();
        for part in ["dev", "test"] {
            let examples: Vec<SequenceExample> = gold
                .iter()
                .enumerate()
                .map(|(i, g)| SequenceExample {
                    id: format!("s{i}"),
                    partition: Partition::Dev,
                    times: (0..g.len()).map(|t| t as f64 * 0.04).collect(),
                    inputs: Matrix::zeros(g.len(), 0),
                    gold: g.clone(),
                    uncertainty: None,
                })
                .collect();
            let preds: Vec<Vec<f64>> = gold
                .iter()
                .map(|g| g.iter().enumerate().map(|(t, v)| gain * v + 0.1 * (t as f64 * phase).sin()).collect())
                .collect();
            let path = dir.join(format!("{name}_{part}.csv"));
            write_predictions(&path, &[], &examples, &preds).unwrap();
            let ind_dir = dir.join(format!("{name}_ind_{part}"));
            for e in &examples {
                let trace = Matrix::column(&e.times.iter().map(|t| (t * 7.0 + phase).cos()).collect::<Vec<_>>());
                let ind = DifficultyIndicator { mode: DifficultyMode::ReSum, trace, source_model: "t".into() };
                write_indicator_csv(ind_dir.join(format!("{}.csv", e.id)), &ind, &e.times, &[]).unwrap();
            }
            specs.push((path, ind_dir));
        }
        StreamSpec {
            name: name.into(),
            dev: specs[0].0.clone(),
            test: Some(specs[1].0.clone()),
            difficulty_dev: Some(specs[0].1.clone()),
            difficulty_test: Some(specs[1].1.clone()),
        }
    }

    fn gold() -> Vec<Vec<f64>> {
        (0..3)
            .map(|s| (0..120).map(|t| ((t + 13 * s) as f64 * 0.05).sin() * 0.5).collect())
            .collect()
    }

    #[test]
    fn slr_scenario_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let g = gold();
        let a = write_stream(dir.path(), "audio", &g, 0.7, 0.9);
        let v = write_stream(dir.path(), "video", &g, 1.2, 0.3);
        let scenario = FusionScenario {
            name: "av".into(),
            mode: FusionMode::Slr,
            out_dir: dir.path().join("out"),
            seed: 0,
            options: FitOptions::default(),
            streams: vec![a, v],
        };
        let report = run_fusion(&scenario).unwrap();
        assert_eq!(report.entries.len(), 1);
        let e = &report.entries[0];
        for (_, c) in &e.stream_dev_ccc {
            assert!(e.dev_ccc >= c - 1e-9);
        }
        let shares: f64 = e.contributions.as_ref().unwrap().iter().map(|(_, s)| s).sum();
        assert!((shares - 100.0).abs() < 1e-9);
        assert!(e.test_ccc.is_some());
        let fused = read_predictions(dir.path().join("out/fused_test.csv")).unwrap();
        assert_eq!(fused.len(), 3);
        assert_eq!(FusionReport::read(dir.path().join("out/fusion_report.json")).unwrap(), report);
        let again = run_fusion(&scenario).unwrap();
        assert_eq!(again, report);
    }

    #[test]
    fn dynamic_scenario_reports_difficulty_weights() {
        let dir = tempfile::tempdir().unwrap();
        let g = gold();
        let a = write_stream(dir.path(), "audio", &g, 0.7, 0.9);
        let v = write_stream(dir.path(), "video", &g, 1.2, 0.3);
        let scenario = FusionScenario {
            name: "dyn".into(),
            mode: FusionMode::Dynamic,
            out_dir: dir.path().join("dyn"),
            seed: 0,
            options: FitOptions::default(),
            streams: vec![a, v],
        };
        let report = run_fusion(&scenario).unwrap();
        assert_eq!(report.entries.len(), 2);
        assert!(report.entries.iter().all(|e| e.difficulty_coef.is_some()));
        assert!(report.to_text().contains("gamma_d"));
        assert!(dir.path().join("dyn/tuned_video_test.csv").exists());
    }

    #[test]
    fn misaligned_or_missing_streams_fail() {
        let dir = tempfile::tempdir().unwrap();
        let g = gold();
        let a = write_stream(dir.path(), "audio", &g, 0.7, 0.9);
        let short: Vec<Vec<f64>> = g.iter().map(|s| s[..100].to_vec()).collect();
        let b = write_stream(dir.path(), "short", &short, 1.0, 0.2);
        let mut scenario = FusionScenario {
            name: "bad".into(),
            mode: FusionMode::Slr,
            out_dir: dir.path().join("bad"),
            seed: 0,
            options: FitOptions::default(),
            streams: vec![a.clone(), b],
        };
        let err = run_fusion(&scenario).unwrap_err();
        assert!(err.to_string().starts_with("fusion input"), "{err}");
        scenario.streams = vec![StreamSpec { dev: dir.path().join("nope.csv"), ..a.clone() }];
        assert!(run_fusion(&scenario).is_err());
        scenario.streams = vec![];
        assert!(run_fusion(&scenario).is_err());
        scenario.streams = vec![StreamSpec { difficulty_dev: None, ..a }];
        scenario.mode = FusionMode::Dynamic;
        assert!(run_fusion(&scenario).is_err());
    }
}
