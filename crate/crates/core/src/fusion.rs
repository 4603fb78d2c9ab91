//! Late fusion of prediction streams by linear regression, dynamic tuning of a
//! single stream by a difficulty trace, and per-stream contribution shares.

use serde::{Deserialize, Serialize};

use crate::data::Partition;
use crate::error::{check_len, DdatError, Result};

/// Ridge penalty `λ‖γ‖²` (added to the Gram matrix) used when the system is singular.
pub const RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Retry a singular system with `RIDGE_LAMBDA` on the diagonal.
    pub ridge_fallback: bool,
    /// Rescale the fitted combination so its mean and variance match the
    /// gold standard. Plain least squares shrinks the output variance by R²,
    /// which costs concordance; matching the variance keeps CCC equal to the
    /// multiple correlation.
    pub match_variance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            ridge_fallback: true,
            match_variance: true,
        }
    }
}

impl FitOptions {
    pub fn least_squares() -> Self {
        FitOptions {
            ridge_fallback: true,
            match_variance: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub intercept: f64,
    /// One coefficient per prediction stream.
    pub coefficients: Vec<f64>,
    /// Weight of the difficulty trace (dynamic tuning only).
    pub difficulty_coef: Option<f64>,
    pub fitted_on: Partition,
    /// Whether the singular-system fallback was used.
    pub ridge: bool,
    pub options: FitOptions,
}

struct LinearFit {
    intercept: f64,
    coefficients: Vec<f64>,
    ridge: bool,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// In-place Cholesky factorization of a symmetric k × k matrix (row-major).
/// Returns false if a pivot is not clearly positive.
fn cholesky(a: &mut [f64], k: usize, tol: f64) -> bool {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > tol) {
            return false;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..k {
        for p in 0..i {
            y[i] -= l[i * k + p] * y[p];
        }
        y[i] /= l[i * k + i];
    }
    for i in (0..k).rev() {
        for p in i + 1..k {
            y[i] -= l[p * k + i] * y[p];
        }
        y[i] /= l[i * k + i];
    }
    y
}

/// Least squares `gold ≈ ε + Σ γ_i·col_i` via the centered normal equations.
/// Constant columns get a zero coefficient.
fn fit_linear(columns: &[&[f64]], gold: &[f64], opts: &FitOptions) -> Result<LinearFit> {
    if columns.is_empty() {
        return Err(DdatError::invalid("fusion needs at least one stream"));
    }
    let n = gold.len();
    if n < 2 {
        return Err(DdatError::invalid("fusion needs at least two frames"));
    }
    for c in columns {
        check_len("fusion stream length", n, c.len())?;
    }
    if gold.iter().chain(columns.iter().flat_map(|c| c.iter())).any(|v| !v.is_finite()) {
        return Err(DdatError::NonFinite("fusion input"));
    }
    let nf = n as f64;
    let my = mean(gold);
    let means: Vec<f64> = columns.iter().map(|c| mean(c)).collect();
    let active: Vec<usize> = (0..columns.len())
        .filter(|&i| columns[i].iter().any(|&v| v != columns[i][0]))
        .collect();
    let k = active.len();

    let mut cov = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate().skip(a) {
            let s: f64 = columns[i]
                .iter()
                .zip(columns[j])
                .map(|(x, y)| (x - means[i]) * (y - means[j]))
                .sum::<f64>()
                / nf;
            cov[a * k + b] = s;
            cov[b * k + a] = s;
        }
        rhs[a] = columns[i]
            .iter()
            .zip(gold)
            .map(|(x, y)| (x - means[i]) * (y - my))
            .sum::<f64>()
            / nf;
    }

    let scale = (0..k).map(|a| cov[a * k + a]).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut factor = cov.clone();
    let mut ridge = false;
    if !cholesky(&mut factor, k, tol) {
        if !opts.ridge_fallback {
            return Err(DdatError::RankDeficient);
        }
        ridge = true;
        factor = cov.clone();
        for a in 0..k {
            factor[a * k + a] += RIDGE_LAMBDA / nf;
        }
        if !cholesky(&mut factor, k, 0.0) {
            return Err(DdatError::RankDeficient);
        }
    }
    let solved = if k == 0 { Vec::new() } else { cholesky_solve(&factor, k, &rhs) };

    let mut coefficients = vec![0.0; columns.len()];
    for (a, &i) in active.iter().enumerate() {
        coefficients[i] = solved[a];
    }
    if opts.match_variance && k > 0 {
        let mut var_fit = 0.0;
        for a in 0..k {
            for b in 0..k {
                var_fit += solved[a] * cov[a * k + b] * solved[b];
            }
        }
        let var_gold = gold.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / nf;
        if var_fit > 0.0 {
            let factor = (var_gold / var_fit).sqrt();
            coefficients.iter_mut().for_each(|g| *g *= factor);
        }
    }
    let intercept = my - coefficients.iter().zip(&means).map(|(g, m)| g * m).sum::<f64>();
    Ok(LinearFit {
        intercept,
        coefficients,
        ridge,
    })
}

/// Fits `y = ε + Σ γ_i·y_i` on the development partition.
pub fn fit_slr(dev_streams: &[Vec<f64>], dev_gold: &[f64], opts: &FitOptions) -> Result<FusionModel> {
    let cols: Vec<&[f64]> = dev_streams.iter().map(Vec::as_slice).collect();
    let fit = fit_linear(&cols, dev_gold, opts)?;
    Ok(FusionModel {
        intercept: fit.intercept,
        coefficients: fit.coefficients,
        difficulty_coef: None,
        fitted_on: Partition::Dev,
        ridge: fit.ridge,
        options: *opts,
    })
}

/// `ε + Σ γ_i·y_i` frame by frame.
pub fn apply_slr(model: &FusionModel, streams: &[Vec<f64>]) -> Result<Vec<f64>> {
    if model.difficulty_coef.is_some() {
        return Err(DdatError::invalid("dynamic tuning model needs a difficulty trace"));
    }
    check_len("fusion stream count", model.coefficients.len(), streams.len())?;
    let n = streams.first().map_or(0, Vec::len);
    for s in streams {
        check_len("fusion stream length", n, s.len())?;
    }
    Ok((0..n)
        .map(|t| {
            model.intercept
                + model
                    .coefficients
                    .iter()
                    .zip(streams)
                    .map(|(g, s)| g * s[t])
                    .sum::<f64>()
        })
        .collect())
}

/// Fits `y' = ε + γ·y + γ_d·d` on the development partition.
pub fn fit_dynamic_tuning(stream: &[f64], difficulty: &[f64], dev_gold: &[f64], opts: &FitOptions) -> Result<FusionModel> {
    check_len("difficulty trace length", stream.len(), difficulty.len())?;
    let fit = fit_linear(&[stream, difficulty], dev_gold, opts)?;
    Ok(FusionModel {
        intercept: fit.intercept,
        coefficients: vec![fit.coefficients[0]],
        difficulty_coef: Some(fit.coefficients[1]),
        fitted_on: Partition::Dev,
        ridge: fit.ridge,
        options: *opts,
    })
}

pub fn apply_dynamic_tuning(model: &FusionModel, stream: &[f64], difficulty: &[f64]) -> Result<Vec<f64>> {
    let gd = model
        .difficulty_coef
        .ok_or_else(|| DdatError::invalid("model has no difficulty coefficient"))?;
    check_len("fusion stream count", 1, model.coefficients.len())?;
    check_len("difficulty trace length", stream.len(), difficulty.len())?;
    let g = model.coefficients[0];
    Ok(stream
        .iter()
        .zip(difficulty)
        .map(|(y, d)| model.intercept + g * y + gd * d)
        .collect())
}

/// Percentage share of each stream, `|γ_i|·σ_i / Σ_j |γ_j|·σ_j × 100`.
pub fn contribution_analysis(model: &FusionModel, streams: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_len("fusion stream count", model.coefficients.len(), streams.len())?;
    let weights: Vec<f64> = model
        .coefficients
        .iter()
        .zip(streams)
        .map(|(g, s)| {
            let m = mean(s);
            let sd = (s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / s.len() as f64).sqrt();
            g.abs() * sd
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(DdatError::Degenerate("all stream contributions are zero".into()));
    }
    Ok(weights.iter().map(|w| 100.0 * w / total).collect())
}
