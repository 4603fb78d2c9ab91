//! Agreement metrics and significance testing.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{Dimension, Partition};
use crate::error::{check_len, DdatError, Result};

/// Moments and agreement between a prediction and a gold trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Concordance correlation coefficient.
    pub ccc: f64,
    /// Pearson correlation; `None` when either series is constant.
    pub pcc: Option<f64>,
    pub mean_pred: f64,
    pub mean_gold: f64,
    pub std_pred: f64,
    pub std_gold: f64,
    pub n: usize,
}

struct Moments {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
    const_x: bool,
    const_y: bool,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let const_x = x.iter().all(|&v| v == x[0]);
    let const_y = y.iter().all(|&v| v == y[0]);
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    // exact zeros for constant inputs so degenerate rules are not at the mercy of rounding
    if const_x {
        var_x = 0.0;
        cov = 0.0;
    }
    if const_y {
        var_y = 0.0;
        cov = 0.0;
    }
    Moments {
        mean_x,
        mean_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
        const_x,
        const_y,
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    check_len("paired series", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(DdatError::invalid(format!(
            "need at least 2 samples, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(DdatError::NonFinite("metric input"));
    }
    Ok(())
}

/// Concordance correlation coefficient with population moments.
///
/// Two constant, equal series score 1; any other constant input scores 0.
pub fn ccc(pred: &[f64], gold: &[f64]) -> Result<MetricReport> {
    check_pair(pred, gold)?;
    let m = moments(pred, gold);
    let value = if m.const_x && m.const_y && pred[0] == gold[0] {
        1.0
    } else {
        let denom = m.var_x + m.var_y + (m.mean_x - m.mean_y).powi(2);
        if denom == 0.0 {
            0.0
        } else {
            2.0 * m.cov / denom
        }
    };
    let pcc = (!m.const_x && !m.const_y).then(|| m.cov / (m.var_x * m.var_y).sqrt());
    Ok(MetricReport {
        ccc: value,
        pcc,
        mean_pred: m.mean_x,
        mean_gold: m.mean_y,
        std_pred: m.var_x.sqrt(),
        std_gold: m.var_y.sqrt(),
        n: pred.len(),
    })
}

/// CCC of concatenated per-subject traces.
pub fn ccc_concat(preds: &[Vec<f64>], golds: &[Vec<f64>]) -> Result<f64> {
    check_len("subject count", preds.len(), golds.len())?;
    let p: Vec<f64> = preds.concat();
    let g: Vec<f64> = golds.concat();
    Ok(ccc(&p, &g)?.ccc)
}

/// Pearson correlation coefficient.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let m = moments(a, b);
    if m.const_x || m.const_y {
        return Err(DdatError::Degenerate(
            "Pearson correlation of a constant series".into(),
        ));
    }
    Ok(m.cov / (m.var_x * m.var_y).sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// One-tailed comparison of two correlation coefficients after the
/// arctanh transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherTest {
    pub m1: f64,
    pub m2: f64,
    pub se1: f64,
    pub se2: f64,
    pub z: f64,
    /// `P(Z ≥ z)`: small when the first coefficient is larger.
    pub p: f64,
    pub n1: usize,
    pub n2: usize,
}

impl FisherTest {
    pub const ALPHA: f64 = 0.05;

    pub fn significant(&self) -> bool {
        self.p < Self::ALPHA
    }
}

/// Tests whether `r1` (from `n1` samples) exceeds `r2` (from `n2` samples).
pub fn fisher_compare(r1: f64, n1: usize, r2: f64, n2: usize) -> Result<FisherTest> {
    for r in [r1, r2] {
        if !(r.abs() < 1.0) {
            return Err(DdatError::invalid(format!(
                "correlation must satisfy |r| < 1, got {r}"
            )));
        }
    }
    for n in [n1, n2] {
        if n <= 3 {
            return Err(DdatError::invalid(format!(
                "sample size must exceed 3, got {n}"
            )));
        }
    }
    let (m1, m2) = (r1.atanh(), r2.atanh());
    let se1 = 1.0 / ((n1 - 3) as f64).sqrt();
    let se2 = 1.0 / ((n2 - 3) as f64).sqrt();
    let z = (m1 - m2) / (se1 * se1 + se2 * se2).sqrt();
    Ok(FisherTest {
        m1,
        m2,
        se1,
        se2,
        z,
        p: 0.5 * erfc(z / std::f64::consts::SQRT_2),
        n1,
        n2,
    })
}

/// Per-frame absolute-error improvement of a DDAT system over a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTrace {
    pub values: Vec<f64>,
}

/// `Δc_t = |ŷ_bs − y| − |ŷ_ddat − y|`; positive where DDAT is closer.
pub fn improvement_delta(baseline: &[f64], ddat: &[f64], gold: &[f64]) -> Result<DeltaTrace> {
    check_len("baseline predictions", gold.len(), baseline.len())?;
    check_len("DDAT predictions", gold.len(), ddat.len())?;
    Ok(DeltaTrace {
        values: baseline
            .iter()
            .zip(ddat)
            .zip(gold)
            .map(|((b, d), y)| (b - y).abs() - (d - y).abs())
            .collect(),
    })
}

/// Correlated quantity pairs reported in the indicator analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorPair {
    /// Reconstruction error vs. improvement of the RE system.
    ErrorDelta,
    /// Perception uncertainty vs. improvement of the PU system.
    UncertaintyDelta,
    /// Reconstruction error vs. perception uncertainty.
    ErrorUncertainty,
}

impl IndicatorPair {
    pub const ALL: [IndicatorPair; 3] = [
        IndicatorPair::ErrorDelta,
        IndicatorPair::UncertaintyDelta,
        IndicatorPair::ErrorUncertainty,
    ];

    pub fn label(self) -> &'static str {
        match self {
            IndicatorPair::ErrorDelta => "PCC(eps, dc)",
            IndicatorPair::UncertaintyDelta => "PCC(mu, dc)",
            IndicatorPair::ErrorUncertainty => "PCC(eps, mu)",
        }
    }
}

/// Aligned traces for one stream, partition and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSample {
    pub stream: String,
    pub partition: Partition,
    pub dimension: Dimension,
    /// Reconstruction-error indicator ε.
    pub epsilon: Vec<f64>,
    /// Perception-uncertainty indicator μ.
    pub mu: Vec<f64>,
    /// Δc of the RE-based system against the baseline.
    pub delta_re: Vec<f64>,
    /// Δc of the PU-based system against the baseline.
    pub delta_pu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub pair: IndicatorPair,
    pub stream: String,
    pub partition: Partition,
    pub dimension: Dimension,
    pub pcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub cells: Vec<CorrelationCell>,
}

/// One PCC per (pair, stream, partition, dimension).
pub fn indicator_correlation_table(samples: &[IndicatorSample]) -> Result<CorrelationTable> {
    let mut cells = Vec::with_capacity(samples.len() * 3);
    for pair in IndicatorPair::ALL {
        for s in samples {
            let (a, b) = match pair {
                IndicatorPair::ErrorDelta => (&s.epsilon, &s.delta_re),
                IndicatorPair::UncertaintyDelta => (&s.mu, &s.delta_pu),
                IndicatorPair::ErrorUncertainty => (&s.epsilon, &s.mu),
            };
            cells.push(CorrelationCell {
                pair,
                stream: s.stream.clone(),
                partition: s.partition,
                dimension: s.dimension,
                pcc: pcc(a, b)?,
            });
        }
    }
    Ok(CorrelationTable { cells })
}

impl CorrelationTable {
    pub fn get(
        &self,
        pair: IndicatorPair,
        stream: &str,
        partition: Partition,
        dimension: Dimension,
    ) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| {
                c.pair == pair && c.stream == stream && c.partition == partition && c.dimension == dimension
            })
            .map(|c| c.pcc)
    }
}

impl fmt::Display for CorrelationTable {
    /// Pair blocks of stream rows; dimension × partition columns.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let streams: Vec<&str> = {
            let mut seen = Vec::new();
            for c in &self.cells {
                if !seen.contains(&c.stream.as_str()) {
                    seen.push(c.stream.as_str());
                }
            }
            seen
        };
        let cols: BTreeSet<(Dimension, Partition)> =
            self.cells.iter().map(|c| (c.dimension, c.partition)).collect();
        write!(f, "{:<24}", "")?;
        for (d, p) in &cols {
            write!(f, " {:>12}", format!("{}/{}", &d.as_str()[..3], p))?;
        }
        writeln!(f)?;
        for pair in IndicatorPair::ALL {
            writeln!(f, "{}", pair.label())?;
            for s in &streams {
                write!(f, "  {s:<22}")?;
                for (d, p) in &cols {
                    match self.get(pair, s, *p, *d) {
                        Some(v) => write!(f, " {v:>12.3}")?,
                        None => write!(f, " {:>12}", "-")?,
                    }
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ccc_reference_cases() {
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().ccc, 1.0);
        assert!((ccc(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap().ccc + 1.0).abs() < 1e-15);
        assert_eq!(ccc(&[0.5, 0.5, 0.5], &[1.0, 2.0, 3.0]).unwrap().ccc, 0.0);
    }

    #[test]
    fn ccc_degenerate_rules() {
        assert_eq!(ccc(&[0.1, 0.1, 0.1], &[0.1, 0.1, 0.1]).unwrap().ccc, 1.0);
        assert_eq!(ccc(&[0.1, 0.1], &[0.3, 0.3]).unwrap().ccc, 0.0);
        assert!(ccc(&[0.1, 0.1], &[0.3, 0.3]).unwrap().pcc.is_none());
    }

    #[test]
    fn ccc_errors() {
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pcc_reference_cases() {
        let a = [1.0, 4.0, 2.0, 8.0];
        assert!((pcc(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v + 7.0).collect();
        assert!((pcc(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        let pos: Vec<f64> = a.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pcc(&a, &pos).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(pcc(&a, &[2.0; 4]), Err(DdatError::Degenerate(_))));
    }

    #[test]
    fn fisher_reference_values() {
        let t = fisher_compare(0.6, 103, 0.4, 103).unwrap();
        // arctanh and upper-tail probability evaluated at 40 digits
        assert!((t.m1 - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!((t.m2 - 0.423_648_930_193_601_8).abs() < 1e-12);
        assert!((t.z - 1.905_640_403_519_514_6).abs() < 1e-9);
        assert!((t.p - 0.028_348_438_160_689_52).abs() < 1e-10);
        assert!(t.significant());
        assert_eq!(0f64.atanh(), 0.0);
    }

    #[test]
    fn fisher_equal_coefficients() {
        let t = fisher_compare(0.37, 500, 0.37, 500).unwrap();
        assert_eq!(t.z, 0.0);
        assert_eq!(t.p, 0.5);
        assert!(!t.significant());
    }

    #[test]
    fn fisher_rejects_bad_inputs() {
        assert!(fisher_compare(1.0, 100, 0.5, 100).is_err());
        assert!(fisher_compare(0.5, 3, 0.5, 100).is_err());
    }

    #[test]
    fn normal_cdf_known_points() {
        assert_eq!(normal_cdf(0.0), 0.5);
        let v = normal_cdf(1.959_963_984_540_054);
        assert!((v - 0.975).abs() < 1e-10, "{v}");
    }

    #[test]
    fn delta_semantics() {
        let d = improvement_delta(&[0.5], &[0.3], &[0.2]).unwrap();
        assert!((d.values[0] - 0.2).abs() < 1e-15);
        let same = improvement_delta(&[0.1, 0.4], &[0.1, 0.4], &[0.0, 0.0]).unwrap();
        assert_eq!(same.values, vec![0.0, 0.0]);
        let worse = improvement_delta(&[0.2], &[0.6], &[0.1]).unwrap();
        assert!(worse.values[0] < 0.0);
        assert!(improvement_delta(&[0.2], &[0.6, 0.1], &[0.1]).is_err());
    }

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn correlation_table_shape_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Vec::new();
        for stream in ["audio", "video"] {
            for p in [Partition::Dev, Partition::Test] {
                for d in Dimension::ALL {
                    let eps = noise(&mut rng, 50);
                    samples.push(IndicatorSample {
                        stream: stream.into(),
                        partition: p,
                        dimension: d,
                        delta_re: eps.clone(),
                        epsilon: eps,
                        mu: noise(&mut rng, 50),
                        delta_pu: noise(&mut rng, 50),
                    });
                }
            }
        }
        let table = indicator_correlation_table(&samples).unwrap();
        assert_eq!(table.cells.len(), 3 * 2 * 2 * 2);
        let v = table
            .get(IndicatorPair::ErrorDelta, "audio", Partition::Dev, Dimension::Arousal)
            .unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let text = table.to_string();
        assert!(text.contains("PCC(eps, mu)"));
        assert_eq!(text.lines().count(), 1 + 3 * 3);
    }

    #[test]
    fn independent_traces_are_nearly_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let a = noise(&mut rng, 10_000);
        let b = noise(&mut rng, 10_000);
        assert!(pcc(&a, &b).unwrap().abs() < 0.05);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ccc_symmetric_and_attenuated(
                pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..60)) {
                let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let ab = ccc(&a, &b).unwrap();
                let ba = ccc(&b, &a).unwrap();
                prop_assert!((ab.ccc - ba.ccc).abs() < 1e-12);
                prop_assert!(ab.ccc.abs() <= 1.0 + 1e-12);
                if let Some(r) = ab.pcc {
                    prop_assert!(ab.ccc.abs() <= r.abs() + 1e-12);
                }
            }
        }
    }
}
