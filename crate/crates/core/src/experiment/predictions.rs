//! Prediction CSVs: `subject_id,time_s,prediction,gold`, preceded by `#` comment lines.

use std::io::Write;
use std::path::Path;

use crate::error::{check_len, DdatError, Result};
use crate::training::SequenceExample;

const HEADER: [&str; 4] = ["subject_id", "time_s", "prediction", "gold"];

/// One subject's predictions as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub times: Vec<f64>,
    pub prediction: Vec<f64>,
    pub gold: Vec<f64>,
}

pub fn write_predictions(
    path: &Path,
    comments: &[String],
    examples: &[SequenceExample],
    preds: &[Vec<f64>],
) -> Result<()> {
    check_len("prediction sequence count", examples.len(), preds.len())?;
    let mut buf = Vec::new();
    for c in comments {
        writeln!(buf, "# {c}").expect("write to memory");
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |e: csv::Error| DdatError::format(path, e.to_string());
        w.write_record(HEADER).map_err(csv_err)?;
        for (s, p) in examples.iter().zip(preds) {
            check_len("prediction length", s.len(), p.len())?;
            for t in 0..s.len() {
                w.write_record([
                    s.id.clone(),
                    s.times[t].to_string(),
                    p[t].to_string(),
                    s.gold[t].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| DdatError::io(path, e))?;
    }
    super::write_bytes(path, &buf)
}

/// Reads a prediction CSV, grouping consecutive rows by subject.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<SubjectPrediction>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DdatError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| DdatError::format(path, e.to_string()))?
        .clone();
    if headers.iter().ne(HEADER) {
        return Err(DdatError::format(
            path,
            format!("expected columns {}", HEADER.join(",")),
        ));
    }
    let mut out: Vec<SubjectPrediction> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DdatError::format(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let num = |col: usize| -> Result<f64> {
            record[col].parse().map_err(|_| DdatError::BadCell {
                path: path.into(),
                row: line,
                column: col + 1,
                value: record[col].to_owned(),
            })
        };
        let (time, pred, gold) = (num(1)?, num(2)?, num(3)?);
        let id = &record[0];
        if out.last().is_none_or(|s| s.subject_id != id) {
            if out.iter().any(|s| s.subject_id == id) {
                return Err(DdatError::format(
                    path,
                    format!("rows for subject {id} are not contiguous (line {line})"),
                ));
            }
            out.push(SubjectPrediction {
                subject_id: id.to_owned(),
                times: Vec::new(),
                prediction: Vec::new(),
                gold: Vec::new(),
            });
        }
        let s = out.last_mut().expect("pushed above");
        s.times.push(time);
        s.prediction.push(pred);
        s.gold.push(gold);
    }
    if out.is_empty() {
        return Err(DdatError::EmptyFile { path: path.into() });
    }
    Ok(out)
}
