//! Prediction refinement: median filter, dev-matched centering and scaling,
//! and a time shift, tuned by grid search on the development set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DdatError, Result};
use crate::metrics::ccc_concat;

/// Filter windows in seconds, without the "none" option.
pub const WINDOW_GRID: [f64; 5] = [0.12, 0.20, 0.28, 0.36, 0.44];

/// Shift values in seconds (0.04 to 0.60 in steps of 0.04).
pub fn shift_grid() -> Vec<f64> {
    (1..=15).map(|i| (i as f64 * 0.04 * 100.0).round() / 100.0).collect()
}

const GRID_TOLERANCE: f64 = 1e-9;
const IMPROVEMENT_EPS: f64 = 1e-12;

/// Moment-matching affine map `(p − pred_mean)·scale + gold_mean`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterScale {
    pub pred_mean: f64,
    pub gold_mean: f64,
    /// σ_gold / σ_pred on the development set.
    pub scale: f64,
}

impl CenterScale {
    /// Fits the map from development predictions and gold (population moments).
    pub fn fit(dev_pred: &[f64], dev_gold: &[f64]) -> Result<CenterScale> {
        check_len("center/scale series", dev_pred.len(), dev_gold.len())?;
        if dev_pred.is_empty() {
            return Err(DdatError::invalid("center/scale needs development data"));
        }
        let (mp, sp) = mean_std(dev_pred);
        let (mg, sg) = mean_std(dev_gold);
        if sp == 0.0 {
            return Err(DdatError::Degenerate(
                "development predictions have zero variance".into(),
            ));
        }
        Ok(CenterScale {
            pred_mean: mp,
            gold_mean: mg,
            scale: sg / sp,
        })
    }

    /// The map from moments directly.
    pub fn from_moments(pred_mean: f64, pred_std: f64, gold_mean: f64, gold_std: f64) -> Result<CenterScale> {
        if !(pred_std > 0.0) {
            return Err(DdatError::Degenerate(
                "development predictions have zero variance".into(),
            ));
        }
        Ok(CenterScale {
            pred_mean,
            gold_mean,
            scale: gold_std / pred_std,
        })
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Selected chain settings. `None` disables a step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PostProcessParams {
    /// Median window in seconds.
    pub window: Option<f64>,
    pub center_scale: Option<CenterScale>,
    /// Shift in seconds.
    pub shift: Option<f64>,
}

impl PostProcessParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn active_steps(&self) -> usize {
        self.window.is_some() as usize + self.center_scale.is_some() as usize + self.shift.is_some() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.window {
            if !WINDOW_GRID.iter().any(|g| (g - w).abs() < GRID_TOLERANCE) {
                return Err(DdatError::invalid(format!("window {w} s is not on the grid")));
            }
        }
        if let Some(d) = self.shift {
            if !shift_grid().iter().any(|g| (g - d).abs() < GRID_TOLERANCE) {
                return Err(DdatError::invalid(format!("shift {d} s is not on the grid")));
            }
        }
        if let Some(cs) = self.center_scale {
            if !(cs.scale > 0.0) || !cs.pred_mean.is_finite() || !cs.gold_mean.is_finite() {
                return Err(DdatError::invalid("center/scale ratio must be positive"));
            }
        }
        Ok(())
    }
}

/// Window length in frames for `window` seconds, rounded up to odd.
pub fn window_frames(window: f64, frame_period: f64) -> Result<usize> {
    if !(window >= 0.0) || !(frame_period > 0.0) {
        return Err(DdatError::invalid("window and frame period must be positive"));
    }
    let n = (window / frame_period).round().max(1.0) as usize;
    Ok(if n % 2 == 0 { n + 1 } else { n })
}

/// Sliding median over an odd window of `n` frames with edge replication.
pub fn median_filter_frames(pred: &[f64], n: usize) -> Result<Vec<f64>> {
    if pred.is_empty() {
        return Err(DdatError::invalid("median filter of an empty series"));
    }
    if n % 2 == 0 {
        return Err(DdatError::invalid(format!("median window must be odd, got {n}")));
    }
    let half = n / 2;
    let last = pred.len() - 1;
    let mut window = vec![0.0; n];
    Ok((0..pred.len())
        .map(|t| {
            for (k, slot) in window.iter_mut().enumerate() {
                let idx = (t + k).saturating_sub(half).min(last);
                *slot = pred[idx];
            }
            window.sort_unstable_by(f64::total_cmp);
            window[half]
        })
        .collect())
}

pub fn median_filter(pred: &[f64], window: f64, frame_period: f64) -> Result<Vec<f64>> {
    median_filter_frames(pred, window_frames(window, frame_period)?)
}

pub fn center_scale(pred: &[f64], cs: &CenterScale) -> Vec<f64> {
    pred.iter()
        .map(|p| (p - cs.pred_mean) * cs.scale + cs.gold_mean)
        .collect()
}

/// Delays the series by `n` frames; the first `n` frames repeat `pred[0]`.
pub fn time_shift_frames(pred: &[f64], n: usize) -> Result<Vec<f64>> {
    if n >= pred.len().max(1) {
        return Err(DdatError::invalid(format!(
            "shift of {n} frames exceeds a series of {} frames",
            pred.len()
        )));
    }
    let mut out = Vec::with_capacity(pred.len());
    out.extend(std::iter::repeat_n(pred[0], n));
    out.extend_from_slice(&pred[..pred.len() - n]);
    Ok(out)
}

pub fn time_shift(pred: &[f64], shift: f64, frame_period: f64) -> Result<Vec<f64>> {
    if !(shift >= 0.0) || !(frame_period > 0.0) {
        return Err(DdatError::invalid("shift and frame period must be non-negative"));
    }
    let exact = shift / frame_period;
    let n = exact.round();
    if (exact - n).abs() > 1e-6 {
        return Err(DdatError::invalid(format!(
            "shift {shift} s is not a whole number of {frame_period} s frames"
        )));
    }
    time_shift_frames(pred, n as usize)
}

/// Applies median filter, center/scale and shift, in that order, to each trace.
pub fn apply_chain(preds: &[Vec<f64>], params: &PostProcessParams, frame_period: f64) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    preds
        .iter()
        .map(|p| {
            let mut out = match params.window {
                Some(w) => median_filter(p, w, frame_period)?,
                None => p.clone(),
            };
            if let Some(cs) = &params.center_scale {
                out = center_scale(&out, cs);
            }
            if let Some(d) = params.shift {
                out = time_shift(&out, d, frame_period)?;
            }
            Ok(out)
        })
        .collect()
}

/// Outcome of the development-set grid search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSearch {
    pub params: PostProcessParams,
    pub raw_ccc: f64,
    pub dev_ccc: f64,
    pub candidates: usize,
}

/// Exhaustive search over window × shift × center/scale on development
/// traces; CCC is computed over the concatenated traces. Ties (within 1e-12)
/// go to the candidate with fewer active steps.
pub fn optimize_chain(dev_preds: &[Vec<f64>], dev_gold: &[Vec<f64>], frame_period: f64) -> Result<ChainSearch> {
    check_len("development subject count", dev_gold.len(), dev_preds.len())?;
    for (p, g) in dev_preds.iter().zip(dev_gold) {
        check_len("development trace length", g.len(), p.len())?;
    }
    let gold_flat: Vec<f64> = dev_gold.concat();
    if gold_flat.is_empty() {
        return Err(DdatError::invalid("no development frames"));
    }
    if gold_flat.iter().all(|&g| g == gold_flat[0]) {
        return Err(DdatError::Degenerate("development gold standard is constant".into()));
    }
    let raw_ccc = ccc_concat(dev_preds, dev_gold)?;

    let windows: Vec<Option<f64>> = std::iter::once(None).chain(WINDOW_GRID.iter().copied().map(Some)).collect();
    let shifts: Vec<Option<f64>> = std::iter::once(None).chain(shift_grid().into_iter().map(Some)).collect();

    // filtered traces and their center/scale fit, once per window
    let filtered: Vec<(Vec<Vec<f64>>, Option<CenterScale>)> = windows
        .par_iter()
        .map(|w| {
            let traces = match w {
                Some(w) => dev_preds
                    .iter()
                    .map(|p| median_filter(p, *w, frame_period))
                    .collect::<Result<Vec<_>>>()?,
                None => dev_preds.to_vec(),
            };
            let cs = CenterScale::fit(&traces.concat(), &gold_flat).ok();
            Ok((traces, cs))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut candidates = Vec::with_capacity(windows.len() * shifts.len() * 2);
    for (wi, w) in windows.iter().enumerate() {
        for cs_on in [false, true] {
            for d in &shifts {
                candidates.push((wi, *w, cs_on, *d));
            }
        }
    }
    let total = candidates.len();
    let mut scored: Vec<(PostProcessParams, Option<f64>)> = candidates
        .par_iter()
        .map(|&(wi, window, cs_on, shift)| {
            let (traces, cs) = &filtered[wi];
            let center_scale = if cs_on {
                match cs {
                    Some(cs) => Some(*cs),
                    None => {
                        return (PostProcessParams { window, center_scale: None, shift }, None);
                    }
                }
            } else {
                None
            };
            let params = PostProcessParams {
                window,
                center_scale,
                shift,
            };
            let score = (|| -> Result<f64> {
                let out = traces
                    .iter()
                    .map(|p| {
                        let mut o = match &center_scale {
                            Some(cs) => crate::postprocess::center_scale(p, cs),
                            None => p.clone(),
                        };
                        if let Some(d) = shift {
                            o = time_shift(&o, d, frame_period)?;
                        }
                        Ok(o)
                    })
                    .collect::<Result<Vec<_>>>()?;
                ccc_concat(&out, dev_gold)
            })()
            .ok();
            (params, score)
        })
        .collect();
    // stable: grid order within equal step counts
    scored.sort_by_key(|(p, _)| p.active_steps());

    let mut best = (PostProcessParams::identity(), raw_ccc);
    for (params, score) in scored {
        if let Some(s) = score {
            if s > best.1 + IMPROVEMENT_EPS {
                best = (params, s);
            }
        }
    }
    Ok(ChainSearch {
        params: best.0,
        raw_ccc,
        dev_ccc: best.1,
        candidates: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn median_examples() {
        assert_eq!(median_filter_frames(&[1.0, 9.0, 1.0], 3).unwrap(), vec![1.0, 1.0, 1.0]);
        let x = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(median_filter_frames(&x, 1).unwrap(), x.to_vec());
        assert_eq!(median_filter_frames(&[0.4; 6], 5).unwrap(), vec![0.4; 6]);
        assert!(median_filter_frames(&[], 3).is_err());
        assert!(median_filter_frames(&x, 4).is_err());
    }

    #[test]
    fn window_rounding() {
        assert_eq!(window_frames(0.12, 0.04).unwrap(), 3);
        assert_eq!(window_frames(0.44, 0.04).unwrap(), 11);
        assert_eq!(window_frames(0.16, 0.04).unwrap(), 5);
        let frames: Vec<usize> = WINDOW_GRID.iter().map(|&w| window_frames(w, 0.04).unwrap()).collect();
        assert_eq!(frames, vec![3, 5, 7, 9, 11]);
    }

    #[test]
    fn shift_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(time_shift_frames(&x, 0).unwrap(), x.to_vec());
        assert_eq!(time_shift_frames(&x, 1).unwrap(), vec![1.0, 1.0, 2.0]);
        assert!(time_shift_frames(&x, 3).is_err());
        let long: Vec<f64> = (0..20).map(f64::from).collect();
        let shifted = time_shift(&long, 0.60, 0.04).unwrap();
        assert_eq!(shifted[..16], [0.0; 16]);
        assert_eq!(shifted[16], 1.0);
        assert!(time_shift(&long, 0.05, 0.04).is_err());
        let grid = shift_grid();
        assert_eq!(grid.len(), 15);
        assert_eq!(grid[14], 0.6);
    }

    #[test]
    fn center_scale_examples() {
        let gold = [0.1, 0.5, -0.3, 0.2];
        let cs = CenterScale::fit(&gold, &gold).unwrap();
        assert_eq!(cs.scale, 1.0);
        let same = center_scale(&gold, &cs);
        for (a, b) in same.iter().zip(&gold) {
            assert!((a - b).abs() < 1e-15);
        }

        let pred: Vec<f64> = gold.iter().map(|g| g + 0.2).collect();
        let out = center_scale(&pred, &CenterScale::fit(&pred, &gold).unwrap());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&out) - mean(&gold)).abs() < 1e-15);

        let distorted: Vec<f64> = gold.iter().map(|g| 3.0 * g - 0.7).collect();
        let restored = center_scale(&distorted, &CenterScale::fit(&distorted, &gold).unwrap());
        let c = crate::metrics::ccc(&restored, &gold).unwrap().ccc;
        assert!((c - 1.0).abs() < 1e-9);

        assert!(CenterScale::fit(&[0.2; 4], &gold).is_err());
    }

    fn wave(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|t| (t as f64 * 0.05 + phase).sin() * 0.4).collect()
    }

    #[test]
    fn identity_chosen_for_perfect_predictions() {
        let gold = vec![wave(200, 0.0), wave(150, 1.0)];
        let s = optimize_chain(&gold, &gold, 0.04).unwrap();
        assert_eq!(s.params, PostProcessParams::identity());
        assert_eq!(s.candidates, 192);
        assert_eq!(s.dev_ccc, 1.0);
    }

    #[test]
    fn search_recovers_delay_and_scale() {
        let gold = vec![wave(300, 0.0), wave(300, 2.0)];
        // predictions lead the gold by 5 frames and are squashed and offset
        let preds: Vec<Vec<f64>> = gold
            .iter()
            .map(|g| {
                let mut lead = g[5..].to_vec();
                lead.extend(std::iter::repeat_n(g[g.len() - 1], 5));
                lead.iter().map(|v| 0.3 * v + 0.2).collect()
            })
            .collect();
        let s = optimize_chain(&preds, &gold, 0.04).unwrap();
        assert!(s.dev_ccc > s.raw_ccc);
        assert!((s.params.shift.unwrap() - 0.20).abs() < 1e-12);
        assert!(s.params.center_scale.is_some());
        let replay = apply_chain(&preds, &s.params, 0.04).unwrap();
        assert_eq!(ccc_concat(&replay, &gold).unwrap(), s.dev_ccc);
    }

    #[test]
    fn degenerate_inputs() {
        let gold = vec![vec![0.1; 50]];
        assert!(optimize_chain(&[wave(50, 0.0)], &gold, 0.04).is_err());
        assert!(optimize_chain(&[wave(50, 0.0)], &[wave(40, 0.0)], 0.04).is_err());
        // constant predictions: center/scale candidates are skipped, not fatal
        let s = optimize_chain(&[vec![0.3; 50]], &[wave(50, 0.0)], 0.04).unwrap();
        assert_eq!(s.params, PostProcessParams::identity());
    }

    #[test]
    fn chain_identity_and_determinism() {
        let x = vec![wave(40, 0.3)];
        assert_eq!(apply_chain(&x, &PostProcessParams::identity(), 0.04).unwrap(), x);
        let p = PostProcessParams {
            window: Some(0.2),
            center_scale: Some(CenterScale { pred_mean: 0.1, gold_mean: 0.0, scale: 2.0 }),
            shift: Some(0.08),
        };
        assert_eq!(apply_chain(&x, &p, 0.04).unwrap(), apply_chain(&x, &p, 0.04).unwrap());
        assert!(apply_chain(&x, &PostProcessParams { window: Some(0.16), ..p }, 0.04).is_err());
        assert!(apply_chain(&x, &PostProcessParams { shift: Some(0.1), ..p }, 0.04).is_err());
        let bad = CenterScale { scale: -1.0, ..p.center_scale.unwrap() };
        assert!(apply_chain(&x, &PostProcessParams { center_scale: Some(bad), ..p }, 0.04).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn median_outputs_are_inputs(x in prop::collection::vec(-1.0f64..1.0, 1..60), k in 0usize..6) {
            let out = median_filter_frames(&x, 2 * k + 1).unwrap();
            prop_assert!(out.iter().all(|v| x.contains(v)));
        }

        #[test]
        fn search_never_hurts(
            noise in prop::collection::vec(-0.5f64..0.5, 80),
            gain in -1.0f64..2.0,
        ) {
            let gold = wave(80, 0.7);
            let pred: Vec<f64> = gold.iter().zip(&noise).map(|(g, n)| gain * g + n).collect();
            let s = optimize_chain(&[pred.clone()], &[gold.clone()], 0.04).unwrap();
            prop_assert!(s.dev_ccc >= s.raw_ccc);
            let replay = apply_chain(&[pred], &s.params, 0.04).unwrap();
            prop_assert_eq!(ccc_concat(&replay, &[gold]).unwrap(), s.dev_ccc);
        }
    }
}
