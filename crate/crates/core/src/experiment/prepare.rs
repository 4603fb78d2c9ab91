//! Dataset preparation: delay-compensated gold standards, perception
//! uncertainty and training-set feature statistics written to disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{content_hash, to_json_bytes, write_bytes};
use crate::data::{
    compensate_delay, compute_gold_standard, fit_standardization, load_dataset, Dimension, Manifest, Partition,
};
use crate::data::io::write_time_table;
use crate::error::{DdatError, Result, StageContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedSummary {
    pub manifest_hash: String,
    pub delay: f64,
    pub frame_period: f64,
    pub feature_dim: usize,
    /// Subject counts for train, dev, test.
    pub subjects: [usize; 3],
    pub frames: usize,
}

/// Writes `gold/<dimension>/<subject>.csv` (`time_s, gold, uncertainty`),
/// `standardization.json` and `summary.json` under `out_dir`.
pub fn prepare_data(manifest_path: &Path, out_dir: &Path, delay: Option<f64>) -> Result<PreparedSummary> {
    let bytes = std::fs::read(manifest_path)
        .map_err(|e| DdatError::io(manifest_path, e))
        .stage("data")?;
    let hash = content_hash(&bytes);
    let manifest = Manifest::read(manifest_path).stage("data")?;
    let dataset = load_dataset(&manifest).stage("data")?;
    let delay = delay.unwrap_or(manifest.delay);
    let header = format!("manifest_hash={hash} seed=none delay={delay}");

    for s in &dataset.subjects {
        for dim in Dimension::ALL {
            let gold = compute_gold_standard(s.annotations(dim)).stage("gold standard")?;
            let gold = compensate_delay(&gold, delay).stage("gold standard")?;
            let path = out_dir.join(format!("gold/{dim}/{}.csv", s.id()));
            write_time_table(
                &path,
                &[header.clone(), format!("partition={}", s.partition())],
                &["gold".to_owned(), "uncertainty".to_owned()],
                &s.features.times,
                |t| vec![gold.mean_trace[t], gold.uncertainty_trace[t]],
            )
            .stage("gold standard")?;
        }
    }
    let train: Vec<_> = dataset
        .partition(Partition::Train)
        .map(|s| s.features.clone())
        .collect();
    let stats = fit_standardization(&train).stage("standardization")?;
    write_bytes(&out_dir.join("standardization.json"), &to_json_bytes(&stats)).stage("standardization")?;

    let count = |p| dataset.partition(p).count();
    let summary = PreparedSummary {
        manifest_hash: hash,
        delay,
        frame_period: dataset.frame_period,
        feature_dim: dataset.feature_dim(),
        subjects: [count(Partition::Train), count(Partition::Dev), count(Partition::Test)],
        frames: dataset.subjects.iter().map(|s| s.features.len()).sum(),
    };
    write_bytes(&out_dir.join("summary.json"), &to_json_bytes(&summary)).stage("data")?;
    Ok(summary)
}
