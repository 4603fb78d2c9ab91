//! Difficulty indicators derived from a trained multi-task network, and the
//! input augmentation `x' = [x, d]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::{read_numeric_table, write_time_table};
use crate::data::FeatureSequence;
use crate::error::{check_len, DdatError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyMode {
    /// Per-feature reconstruction error `e = x − x̂` (width r).
    ReVector,
    /// Reconstruction error summed over features (width 1).
    ReSum,
    /// Predicted perception uncertainty `û` (width 1).
    Pu,
}

impl DifficultyMode {
    pub fn width(self, feature_dim: usize) -> usize {
        match self {
            DifficultyMode::ReVector => feature_dim,
            DifficultyMode::ReSum | DifficultyMode::Pu => 1,
        }
    }
}

/// How the per-feature errors are collapsed for [`DifficultyMode::ReSum`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SumConvention {
    /// `Σ (x_i − x̂_i)`; positive and negative errors may cancel.
    #[default]
    Signed,
    /// `Σ |x_i − x̂_i|`.
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyIndicator {
    pub mode: DifficultyMode,
    /// T × w_d.
    pub trace: Matrix,
    /// Reference to the model that produced the indicator.
    pub source_model: String,
}

impl DifficultyIndicator {
    pub fn len(&self) -> usize {
        self.trace.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.trace.cols()
    }

    /// Collapses the indicator to one value per frame (row sums for vectors).
    pub fn scalar_trace(&self) -> Vec<f64> {
        self.trace.row_iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn re_vector(x: &[f64], x_hat: &[f64]) -> Result<Vec<f64>> {
    check_len("reconstruction width", x.len(), x_hat.len())?;
    Ok(x.iter().zip(x_hat).map(|(a, b)| a - b).collect())
}

pub fn re_sum(x: &[f64], x_hat: &[f64], convention: SumConvention) -> Result<f64> {
    check_len("reconstruction width", x.len(), x_hat.len())?;
    let diffs = x.iter().zip(x_hat).map(|(a, b)| a - b);
    Ok(match convention {
        SumConvention::Signed => diffs.sum(),
        SumConvention::Absolute => diffs.map(f64::abs).sum(),
    })
}

/// Builds an indicator from network inputs and auxiliary-head outputs.
///
/// For the RE modes `aux` is the reconstruction x̂ (same shape as `inputs`);
/// for PU it is the T × 1 uncertainty prediction, passed through unchanged.
pub fn indicator_from_outputs(
    mode: DifficultyMode,
    inputs: &Matrix,
    aux: &Matrix,
    convention: SumConvention,
    source_model: impl Into<String>,
) -> Result<DifficultyIndicator> {
    check_len("auxiliary output length", inputs.rows(), aux.rows())?;
    let trace = match mode {
        DifficultyMode::ReVector => {
            check_len("reconstruction width", inputs.cols(), aux.cols())?;
            let mut out = Matrix::zeros(inputs.rows(), inputs.cols());
            for t in 0..inputs.rows() {
                out.row_mut(t)
                    .copy_from_slice(&re_vector(inputs.row(t), aux.row(t))?);
            }
            out
        }
        DifficultyMode::ReSum => {
            check_len("reconstruction width", inputs.cols(), aux.cols())?;
            let sums = (0..inputs.rows())
                .map(|t| re_sum(inputs.row(t), aux.row(t), convention))
                .collect::<Result<Vec<_>>>()?;
            Matrix::column(&sums)
        }
        DifficultyMode::Pu => {
            check_len("uncertainty head width", 1, aux.cols())?;
            aux.clone()
        }
    };
    if !trace.is_finite() {
        return Err(DdatError::NonFinite("difficulty indicator"));
    }
    Ok(DifficultyIndicator {
        mode,
        trace,
        source_model: source_model.into(),
    })
}

/// Appends the indicator columns to the features: width r + w_d.
pub fn augment(seq: &FeatureSequence, d: &DifficultyIndicator) -> Result<FeatureSequence> {
    check_len("indicator length", seq.len(), d.len())?;
    Ok(seq.with_values(seq.values.hconcat(&d.trace)))
}

/// Writes `time_s, d_1..d_w` rows aligned to `times`.
pub fn write_indicator_csv(
    path: impl AsRef<Path>,
    indicator: &DifficultyIndicator,
    times: &[f64],
    comments: &[String],
) -> Result<()> {
    check_len("indicator timestamps", indicator.len(), times.len())?;
    let headers: Vec<String> = (1..=indicator.width()).map(|i| format!("d_{i}")).collect();
    write_time_table(path.as_ref(), comments, &headers, times, |t| {
        indicator.trace.row(t).to_vec()
    })
}

/// Reads an indicator CSV back as (timestamps, T × w trace).
pub fn read_indicator_csv(path: impl AsRef<Path>) -> Result<(Vec<f64>, Matrix)> {
    let path = path.as_ref();
    let table = read_numeric_table(path)?;
    if table.headers.first().map(String::as_str) != Some("time_s") || table.headers.len() < 2 {
        return Err(DdatError::format(path, "expected `time_s, d_1, ...` columns"));
    }
    let times = table.values.column_values(0);
    let w = table.headers.len() - 1;
    let data = table
        .values
        .row_iter()
        .flat_map(|r| r[1..].iter().copied())
        .collect();
    Ok((times, Matrix::from_vec(table.values.rows(), w, data)))
}
