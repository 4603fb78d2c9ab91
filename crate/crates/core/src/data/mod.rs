//! Frame-aligned features, rater annotations and the derived gold standard.

pub(crate) mod io;
mod manifest;
mod synthetic;

pub use io::{load_annotations, load_features, write_annotations, write_features};
pub use manifest::{load_dataset, write_dataset, Manifest, ManifestSubject};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, DdatError, Result};
use crate::matrix::Matrix;

/// Default frame period of the label and feature streams, 40 ms.
pub const DEFAULT_FRAME_PERIOD: f64 = 0.04;

/// Default annotation delay compensation in seconds.
pub const DEFAULT_DELAY: f64 = 2.4;

/// Floor applied to standard deviations during standardization.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Dev, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Dev => "dev",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = DdatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "dev" | "devel" | "development" => Ok(Partition::Dev),
            "test" => Ok(Partition::Test),
            other => Err(DdatError::invalid(format!("unknown partition {other:?}"))),
        }
    }
}

/// Affective dimension being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Arousal,
    Valence,
}

impl Dimension {
    pub const ALL: [Dimension; 2] = [Dimension::Arousal, Dimension::Valence];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Arousal => "arousal",
            Dimension::Valence => "valence",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = DdatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arousal" => Ok(Dimension::Arousal),
            "valence" => Ok(Dimension::Valence),
            other => Err(DdatError::invalid(format!("unknown dimension {other:?}"))),
        }
    }
}

/// T frames × r features for one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub subject_id: String,
    pub partition: Partition,
    pub frame_period: f64,
    /// Frame timestamps in seconds, one per row of `values`.
    pub times: Vec<f64>,
    pub values: Matrix,
}

impl FeatureSequence {
    /// Builds a sequence on a regular time grid starting at zero.
    pub fn new(
        subject_id: impl Into<String>,
        partition: Partition,
        frame_period: f64,
        values: Matrix,
    ) -> Result<Self> {
        let times = (0..values.rows())
            .map(|t| t as f64 * frame_period)
            .collect();
        let seq = FeatureSequence {
            subject_id: subject_id.into(),
            partition,
            frame_period,
            times,
            values,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.rows() == 0 || self.values.cols() == 0 {
            return Err(DdatError::invalid("feature sequence needs T >= 1 and r >= 1"));
        }
        if !(self.frame_period > 0.0) {
            return Err(DdatError::invalid("frame period must be positive"));
        }
        check_len("feature timestamps", self.values.rows(), self.times.len())?;
        if !self.values.is_finite() {
            return Err(DdatError::NonFinite("feature values"));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn with_values(&self, values: Matrix) -> FeatureSequence {
        FeatureSequence {
            subject_id: self.subject_id.clone(),
            partition: self.partition,
            frame_period: self.frame_period,
            times: self.times.clone(),
            values,
        }
    }
}

/// K rater traces over T frames for one subject and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RaterAnnotations {
    pub subject_id: String,
    pub dimension: Dimension,
    pub frame_period: f64,
    pub times: Vec<f64>,
    /// K rows (raters) × T columns (frames).
    pub traces: Matrix,
}

impl RaterAnnotations {
    pub fn new(
        subject_id: impl Into<String>,
        dimension: Dimension,
        frame_period: f64,
        traces: Matrix,
    ) -> Result<Self> {
        let times = (0..traces.cols()).map(|t| t as f64 * frame_period).collect();
        let ann = RaterAnnotations {
            subject_id: subject_id.into(),
            dimension,
            frame_period,
            times,
            traces,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.traces.cols() == 0 {
            return Err(DdatError::invalid("annotations have no frames"));
        }
        check_len("annotation timestamps", self.traces.cols(), self.times.len())?;
        if !self.traces.is_finite() {
            return Err(DdatError::NonFinite("rater traces"));
        }
        if self.traces.as_slice().iter().any(|v| v.abs() > 1.0) {
            return Err(DdatError::invalid("rater values must lie in [-1, 1]"));
        }
        Ok(())
    }

    #[inline]
    pub fn raters(&self) -> usize {
        self.traces.rows()
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.traces.cols()
    }

    /// Nearest-frame resampling onto `target_times`.
    pub fn resample_to(&self, target_times: &[f64], frame_period: f64) -> RaterAnnotations {
        let idx = nearest_indices(&self.times, target_times);
        let k = self.raters();
        let mut traces = Matrix::zeros(k, target_times.len());
        for rater in 0..k {
            for (t, &src) in idx.iter().enumerate() {
                traces.set(rater, t, self.traces.get(rater, src));
            }
        }
        RaterAnnotations {
            subject_id: self.subject_id.clone(),
            dimension: self.dimension,
            frame_period,
            times: target_times.to_vec(),
            traces,
        }
    }
}

/// For each target time, the index of the closest source time (earlier wins ties).
/// `source` must be sorted ascending and non-empty.
pub(crate) fn nearest_indices(source: &[f64], target: &[f64]) -> Vec<usize> {
    let mut j = 0;
    target
        .iter()
        .map(|&t| {
            while j + 1 < source.len() && (source[j + 1] - t).abs() < (source[j] - t).abs() {
                j += 1;
            }
            j
        })
        .collect()
}

/// Per-frame gold standard: rater mean and inter-rater standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldStandard {
    pub dimension: Dimension,
    pub frame_period: f64,
    pub mean_trace: Vec<f64>,
    pub uncertainty_trace: Vec<f64>,
    /// Seconds by which the traces have been shifted back in time.
    pub delay_applied: f64,
}

impl GoldStandard {
    #[inline]
    pub fn len(&self) -> usize {
        self.mean_trace.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.mean_trace.is_empty()
    }
}

/// Mean rating and perception uncertainty (sample std-dev over raters) per frame.
pub fn compute_gold_standard(annotations: &RaterAnnotations) -> Result<GoldStandard> {
    let k = annotations.raters();
    if k < 2 {
        return Err(DdatError::invalid(format!(
            "perception uncertainty needs at least 2 raters, got {k}"
        )));
    }
    let frames = annotations.frames();
    let mut mean_trace = Vec::with_capacity(frames);
    let mut uncertainty_trace = Vec::with_capacity(frames);
    for t in 0..frames {
        let first = annotations.traces.get(0, t);
        if (1..k).all(|r| annotations.traces.get(r, t) == first) {
            mean_trace.push(first);
            uncertainty_trace.push(0.0);
            continue;
        }
        let mean = (0..k).map(|r| annotations.traces.get(r, t)).sum::<f64>() / k as f64;
        let ss: f64 = (0..k)
            .map(|r| {
                let d = annotations.traces.get(r, t) - mean;
                d * d
            })
            .sum();
        mean_trace.push(mean);
        uncertainty_trace.push((ss / (k - 1) as f64).sqrt());
    }
    Ok(GoldStandard {
        dimension: annotations.dimension,
        frame_period: annotations.frame_period,
        mean_trace,
        uncertainty_trace,
        delay_applied: 0.0,
    })
}

fn shift_earlier(trace: &[f64], n: usize) -> Vec<f64> {
    let last = *trace.last().expect("non-empty trace");
    trace[n..]
        .iter()
        .copied()
        .chain(std::iter::repeat_n(last, n))
        .collect()
}

/// Converts a duration to a whole number of frames.
pub fn frames_for(seconds: f64, frame_period: f64) -> usize {
    (seconds / frame_period).round().max(0.0) as usize
}

/// Shifts the gold standard back in time by `delay` seconds; the vacated tail
/// repeats the last frame. Requires the shift to be shorter than the sequence.
pub fn compensate_delay(gold: &GoldStandard, delay: f64) -> Result<GoldStandard> {
    if !(delay >= 0.0) || !delay.is_finite() {
        return Err(DdatError::invalid(format!("delay must be >= 0, got {delay}")));
    }
    let n = frames_for(delay, gold.frame_period);
    if n >= gold.len() {
        return Err(DdatError::invalid(format!(
            "delay of {delay} s ({n} frames) exceeds the {} frame sequence",
            gold.len()
        )));
    }
    Ok(GoldStandard {
        dimension: gold.dimension,
        frame_period: gold.frame_period,
        mean_trace: shift_earlier(&gold.mean_trace, n),
        uncertainty_trace: shift_earlier(&gold.uncertainty_trace, n),
        delay_applied: gold.delay_applied + n as f64 * gold.frame_period,
    })
}

/// Column-wise feature statistics estimated on the training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    pub epsilon_floor: f64,
}

impl StandardizationStats {
    /// Column statistics of a single matrix, (n−1) denominator.
    pub fn of_matrix(values: &Matrix) -> StandardizationStats {
        Self::accumulate(std::iter::once(values), values.cols())
    }

    fn accumulate<'a>(parts: impl Iterator<Item = &'a Matrix> + Clone, cols: usize) -> Self {
        let mut n = 0usize;
        let mut sums = vec![0.0; cols];
        for m in parts.clone() {
            n += m.rows();
            for row in m.row_iter() {
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        let mut ss = vec![0.0; cols];
        for m in parts {
            for row in m.row_iter() {
                for ((acc, v), mu) in ss.iter_mut().zip(row).zip(&means) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        let std_devs = ss
            .iter()
            .map(|s| {
                if n < 2 {
                    STD_FLOOR
                } else {
                    (s / (n - 1) as f64).sqrt().max(STD_FLOOR)
                }
            })
            .collect();
        StandardizationStats {
            means,
            std_devs,
            epsilon_floor: STD_FLOOR,
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// `(value − mean) / std` per column.
    pub fn apply(&self, values: &Matrix) -> Result<Matrix> {
        check_len("standardization width", self.dim(), values.cols())?;
        let mut out = values.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.means).zip(&self.std_devs) {
                *v = (*v - mu) / sd;
            }
        }
        Ok(out)
    }
}

/// Fits column means and std-devs over every frame of the training sequences.
pub fn fit_standardization(train_features: &[FeatureSequence]) -> Result<StandardizationStats> {
    let first = train_features
        .first()
        .ok_or_else(|| DdatError::invalid("standardization needs at least one training sequence"))?;
    let cols = first.dim();
    for seq in train_features {
        check_len("training feature width", cols, seq.dim())?;
    }
    Ok(StandardizationStats::accumulate(
        train_features.iter().map(|s| &s.values),
        cols,
    ))
}

pub fn apply_standardization(
    seq: &FeatureSequence,
    stats: &StandardizationStats,
) -> Result<FeatureSequence> {
    Ok(seq.with_values(stats.apply(&seq.values)?))
}

/// One subject: features plus rater traces for both dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub features: FeatureSequence,
    pub arousal: RaterAnnotations,
    pub valence: RaterAnnotations,
}

impl SubjectRecord {
    pub fn id(&self) -> &str {
        &self.features.subject_id
    }

    pub fn partition(&self) -> Partition {
        self.features.partition
    }

    pub fn annotations(&self, dimension: Dimension) -> &RaterAnnotations {
        match dimension {
            Dimension::Arousal => &self.arousal,
            Dimension::Valence => &self.valence,
        }
    }
}

/// A full corpus: every subject across the three partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frame_period: f64,
    pub subjects: Vec<SubjectRecord>,
}

impl Dataset {
    pub fn partition(&self, partition: Partition) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects.iter().filter(move |s| s.partition() == partition)
    }

    pub fn feature_dim(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.features.dim())
    }
}
