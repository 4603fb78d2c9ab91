//! Dataset manifest: a TOML file listing subjects, partitions and file paths.
//!
//! ```toml
//! frame_period = 0.04
//! delay = 2.4
//!
//! [[subjects]]
//! id = "train_01"
//! partition = "train"
//! features = "features/train_01.csv"
//! arousal = "annotations/arousal/train_01.csv"
//! valence = "annotations/valence/train_01.csv"
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{load_annotations, load_features, write_annotations, write_features};
use super::{Dataset, Dimension, Partition, SubjectRecord, DEFAULT_DELAY, DEFAULT_FRAME_PERIOD};
use crate::error::{DdatError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    pub partition: Partition,
    pub features: PathBuf,
    pub arousal: PathBuf,
    pub valence: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_frame_period")]
    pub frame_period: f64,
    /// Annotation delay to compensate, seconds.
    #[serde(default = "default_delay")]
    pub delay: f64,
    pub subjects: Vec<ManifestSubject>,
}

fn default_frame_period() -> f64 {
    DEFAULT_FRAME_PERIOD
}

fn default_delay() -> f64 {
    DEFAULT_DELAY
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DdatError::io(path, e))?;
        let mut manifest: Manifest =
            toml::from_str(&text).map_err(|e| DdatError::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut manifest.subjects {
            for p in [&mut s.features, &mut s.arousal, &mut s.valence] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if manifest.subjects.is_empty() {
            return Err(DdatError::format(path, "manifest lists no subjects"));
        }
        if !(manifest.frame_period > 0.0) {
            return Err(DdatError::format(path, "frame_period must be positive"));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self).map_err(|e| DdatError::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| DdatError::io(path, e))
    }
}

/// Loads every subject listed in the manifest, resampling annotations onto the
/// feature timestamps by nearest frame.
pub fn load_dataset(manifest: &Manifest) -> Result<Dataset> {
    let fp = manifest.frame_period;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let mut features = load_features(&entry.features, fp)?;
        features.subject_id = entry.id.clone();
        features.partition = entry.partition;
        let load = |dim, path: &Path| -> Result<_> {
            let mut ann = load_annotations(path, dim, fp)?;
            ann.subject_id = entry.id.clone();
            if ann.raters() < 2 {
                return Err(DdatError::format(path, "at least two raters are required"));
            }
            Ok(ann.resample_to(&features.times, fp))
        };
        let arousal = load(Dimension::Arousal, &entry.arousal)?;
        let valence = load(Dimension::Valence, &entry.valence)?;
        subjects.push(SubjectRecord {
            features,
            arousal,
            valence,
        });
    }
    Ok(Dataset {
        frame_period: fp,
        subjects,
    })
}

/// Writes a dataset as CSV files plus `manifest.toml` under `dir`; returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset, delay: f64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut subjects = Vec::new();
    for s in &dataset.subjects {
        let id = s.id();
        let features = PathBuf::from(format!("features/{id}.csv"));
        let arousal = PathBuf::from(format!("annotations/arousal/{id}.csv"));
        let valence = PathBuf::from(format!("annotations/valence/{id}.csv"));
        write_features(dir.join(&features), &s.features)?;
        write_annotations(dir.join(&arousal), &s.arousal)?;
        write_annotations(dir.join(&valence), &s.valence)?;
        subjects.push(ManifestSubject {
            id: id.to_owned(),
            partition: s.partition(),
            features,
            arousal,
            valence,
        });
    }
    let manifest = Manifest {
        frame_period: dataset.frame_period,
        delay,
        subjects,
    };
    let path = dir.join("manifest.toml");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn dataset_round_trips_through_manifest() {
        let cfg = SyntheticConfig {
            subjects_per_partition: [2, 1, 1],
            frames: 50,
            feature_dim: 3,
            raters: 3,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), &ds, 0.4).unwrap();
        let manifest = Manifest::read(&path).unwrap();
        assert_eq!(manifest.delay, 0.4);
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.subjects.len(), 4);
        for (a, b) in ds.subjects.iter().zip(&back.subjects) {
            assert_eq!(a.features.values, b.features.values);
            assert_eq!(a.arousal.traces, b.arousal.traces);
            assert_eq!(a.partition(), b.partition());
        }
    }

    #[test]
    fn coarser_annotations_are_resampled_to_feature_grid() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f.csv"), "time_s,a\n0,1\n0.04,2\n0.08,3\n0.12,4\n").unwrap();
        let ann = "time_s,rater_1,rater_2\n0,0.1,0.1\n0.1,0.5,0.5\n";
        std::fs::write(dir.path().join("a.csv"), ann).unwrap();
        std::fs::write(dir.path().join("v.csv"), ann).unwrap();
        std::fs::write(
            dir.path().join("m.toml"),
            "[[subjects]]\nid = \"x\"\npartition = \"dev\"\nfeatures = \"f.csv\"\narousal = \"a.csv\"\nvalence = \"v.csv\"\n",
        )
        .unwrap();
        let m = Manifest::read(dir.path().join("m.toml")).unwrap();
        assert_eq!(m.frame_period, 0.04);
        assert_eq!(m.delay, 2.4);
        let ds = load_dataset(&m).unwrap();
        let s = &ds.subjects[0];
        assert_eq!(s.partition(), Partition::Dev);
        assert_eq!(s.arousal.traces.row(0), &[0.1, 0.1, 0.5, 0.5]);
    }
}
