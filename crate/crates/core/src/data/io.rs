use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{Dimension, FeatureSequence, Partition, RaterAnnotations};
use crate::error::{DdatError, Result};
use crate::matrix::Matrix;

/// A numeric CSV table: header names and row-major values.
pub(crate) struct NumericTable {
    pub headers: Vec<String>,
    pub values: Matrix,
}

/// Reads a CSV with a header row where every data cell is numeric.
/// Lines starting with `#` are skipped. Errors carry 1-based line and column numbers.
pub(crate) fn read_numeric_table(path: &Path) -> Result<NumericTable> {
    let file = File::open(path).map_err(|e| DdatError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DdatError::format(path, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(DdatError::EmptyFile { path: path.into() });
    }
    let width = headers.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| DdatError::format(path, e.to_string()))?;
        let line = record.position().map_or(rows + 2, |p| p.line() as usize);
        if record.len() != width {
            return Err(DdatError::RaggedRow {
                path: path.into(),
                row: line,
                expected: width,
                found: record.len(),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DdatError::BadCell {
                path: path.into(),
                row: line,
                column: col + 1,
                value: cell.to_owned(),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DdatError::EmptyFile { path: path.into() });
    }
    Ok(NumericTable {
        headers,
        values: Matrix::from_vec(rows, width, data),
    })
}

fn split_time_column(path: &Path, table: NumericTable) -> Result<(Vec<f64>, Vec<String>, Matrix)> {
    if table.headers[0] != "time_s" {
        return Err(DdatError::format(
            path,
            format!("first column must be `time_s`, found {:?}", table.headers[0]),
        ));
    }
    if table.headers.len() < 2 {
        return Err(DdatError::format(path, "no value columns after `time_s`"));
    }
    let times = table.values.column_values(0);
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DdatError::format(path, "`time_s` must be strictly increasing"));
    }
    let rest: Vec<f64> = table
        .values
        .row_iter()
        .flat_map(|row| row[1..].iter().copied())
        .collect();
    let cols = table.headers.len() - 1;
    let values = Matrix::from_vec(table.values.rows(), cols, rest);
    Ok((times, table.headers[1..].to_vec(), values))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a feature CSV (`time_s` followed by r feature columns).
/// The subject id defaults to the file stem and the partition to `train`.
pub fn load_features(path: impl AsRef<Path>, frame_period: f64) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let table = read_numeric_table(path)?;
    let (times, _, values) = split_time_column(path, table)?;
    let seq = FeatureSequence {
        subject_id: stem(path),
        partition: Partition::Train,
        frame_period,
        times,
        values,
    };
    seq.validate()
        .map_err(|e| DdatError::format(path, e.to_string()))?;
    Ok(seq)
}

/// Loads an annotation CSV (`time_s`, `rater_1` … `rater_K`).
pub fn load_annotations(
    path: impl AsRef<Path>,
    dimension: Dimension,
    frame_period: f64,
) -> Result<RaterAnnotations> {
    let path = path.as_ref();
    let table = read_numeric_table(path)?;
    let (times, names, values) = split_time_column(path, table)?;
    for (i, name) in names.iter().enumerate() {
        if *name != format!("rater_{}", i + 1) {
            return Err(DdatError::format(
                path,
                format!("expected column `rater_{}`, found {name:?}", i + 1),
            ));
        }
    }
    // file is frames × raters; stored as raters × frames
    let (t, k) = values.shape();
    let mut traces = Matrix::zeros(k, t);
    for frame in 0..t {
        for rater in 0..k {
            traces.set(rater, frame, values.get(frame, rater));
        }
    }
    let ann = RaterAnnotations {
        subject_id: stem(path),
        dimension,
        frame_period,
        times,
        traces,
    };
    ann.validate()
        .map_err(|e| DdatError::format(path, e.to_string()))?;
    Ok(ann)
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DdatError::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| DdatError::io(path, e))
}

/// Writes a header plus `time_s`-prefixed numeric rows. `comments` become `#` lines.
pub(crate) fn write_time_table(
    path: &Path,
    comments: &[String],
    headers: &[String],
    times: &[f64],
    row: impl Fn(usize) -> Vec<f64>,
) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| DdatError::io(path, e);
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    write!(out, "time_s").map_err(io)?;
    for h in headers {
        write!(out, ",{h}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for (t, time) in times.iter().enumerate() {
        write!(out, "{time}").map_err(io)?;
        for v in row(t) {
            write!(out, ",{v}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_features(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    let headers: Vec<String> = (1..=seq.dim()).map(|i| format!("f_{i}")).collect();
    write_time_table(path.as_ref(), &[], &headers, &seq.times, |t| {
        seq.values.row(t).to_vec()
    })
}

pub fn write_annotations(path: impl AsRef<Path>, ann: &RaterAnnotations) -> Result<()> {
    let headers: Vec<String> = (1..=ann.raters()).map(|i| format!("rater_{i}")).collect();
    write_time_table(path.as_ref(), &[], &headers, &ann.times, |t| {
        (0..ann.raters()).map(|k| ann.traces.get(k, t)).collect()
    })
}
