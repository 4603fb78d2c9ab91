//! Desk-scale synthetic corpus with a known latent affect process.
//!
//! Each subject gets two smooth latent traces (arousal, valence) and a smooth
//! difficulty schedule in [0, 1]. Features are a fixed nonlinear mixing of the
//! latents plus noise that grows with difficulty. Raters follow the latent
//! with a constant reaction lag, a personal bias and noise that also grows
//! with difficulty, so inter-rater spread carries real information.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    frames_for, Dataset, Dimension, FeatureSequence, Partition, RaterAnnotations, SubjectRecord,
    DEFAULT_DELAY, DEFAULT_FRAME_PERIOD,
};
use crate::error::{DdatError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Subjects in train, dev and test.
    pub subjects_per_partition: [usize; 3],
    pub frames: usize,
    pub feature_dim: usize,
    pub raters: usize,
    pub frame_period: f64,
    /// Moving-average window (frames) that smooths the latent process.
    pub smoothing_frames: usize,
    /// Standard deviation of each latent trace.
    pub latent_scale: f64,
    pub feature_noise: f64,
    /// Rater noise standard deviation at zero difficulty.
    pub rater_noise_base: f64,
    /// Added rater noise standard deviation at full difficulty.
    pub rater_noise_gain: f64,
    /// Seconds by which raters lag the latent process.
    pub rater_lag: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            subjects_per_partition: [9, 9, 9],
            frames: 1500,
            feature_dim: 20,
            raters: 6,
            frame_period: DEFAULT_FRAME_PERIOD,
            smoothing_frames: 50,
            latent_scale: 0.3,
            feature_noise: 0.3,
            rater_noise_base: 0.03,
            rater_noise_gain: 0.25,
            rater_lag: DEFAULT_DELAY,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.subjects_per_partition.iter().any(|&n| n == 0) {
            return Err(DdatError::invalid("every partition needs at least one subject"));
        }
        if self.frames == 0 || self.feature_dim == 0 || self.raters == 0 || self.smoothing_frames == 0 {
            return Err(DdatError::invalid("synthetic dimensions must be positive"));
        }
        if !(self.frame_period > 0.0) || !(self.latent_scale > 0.0) {
            return Err(DdatError::invalid("frame period and latent scale must be positive"));
        }
        if self.feature_noise < 0.0
            || self.rater_noise_base < 0.0
            || self.rater_noise_gain < 0.0
            || self.rater_lag < 0.0
        {
            return Err(DdatError::invalid("noise levels and lag must be non-negative"));
        }
        Ok(())
    }
}

/// Smooth zero-mean process with unit variance: moving average of Gaussian steps.
fn smooth_process(rng: &mut ChaCha8Rng, len: usize, window: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len + window)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let mut out: Vec<f64> = raw
        .windows(window)
        .take(len)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let mean = out.iter().sum::<f64>() / len as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
    let sd = var.sqrt().max(1e-12);
    for v in &mut out {
        *v = (*v - mean) / sd;
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates a corpus deterministically from `(config, seed)`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = config.feature_dim;
    let t_len = config.frames;

    // mixing shared across subjects: feature j = tanh(a·arousal + b·valence + c)
    let mixing: Vec<[f64; 3]> = (0..r)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let c: f64 = rng.random_range(-0.5..0.5);
            [2.0 * a, 2.0 * b, c]
        })
        .collect();

    let lag = frames_for(config.rater_lag, config.frame_period);
    let mut subjects = Vec::new();
    for (p, &count) in Partition::ALL.iter().zip(&config.subjects_per_partition) {
        for i in 0..count {
            let id = format!("{}_{:02}", p.as_str(), i + 1);
            let latent: Vec<Vec<f64>> = (0..2)
                .map(|_| {
                    smooth_process(&mut rng, t_len, config.smoothing_frames)
                        .into_iter()
                        .map(|v| v * config.latent_scale)
                        .collect()
                })
                .collect();
            let difficulty: Vec<f64> = smooth_process(&mut rng, t_len, config.smoothing_frames)
                .into_iter()
                .map(|v| sigmoid(2.0 * v))
                .collect();

            let mut features = Matrix::zeros(t_len, r);
            for t in 0..t_len {
                let noise_sd = config.feature_noise * (0.5 + difficulty[t]);
                for (j, [a, b, c]) in mixing.iter().enumerate() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    let v = (a * latent[0][t] + b * latent[1][t] + c).tanh() + noise_sd * n;
                    features.set(t, j, v);
                }
            }
            let features = FeatureSequence::new(id.clone(), *p, config.frame_period, features)?;

            let mut rater_sets = Vec::with_capacity(2);
            for (d, dim) in Dimension::ALL.iter().enumerate() {
                let mut traces = Matrix::zeros(config.raters, t_len);
                for k in 0..config.raters {
                    let bias = rng.random_range(-0.05..0.05);
                    let noise = smooth_process(&mut rng, t_len, 10);
                    for t in 0..t_len {
                        let cue = latent[d][t.saturating_sub(lag)];
                        let sd = config.rater_noise_base + config.rater_noise_gain * difficulty[t];
                        traces.set(k, t, (cue + bias + sd * noise[t]).clamp(-1.0, 1.0));
                    }
                }
                rater_sets.push(RaterAnnotations::new(
                    id.clone(),
                    *dim,
                    config.frame_period,
                    traces,
                )?);
            }
            let valence = rater_sets.pop().expect("valence");
            let arousal = rater_sets.pop().expect("arousal");
            subjects.push(SubjectRecord {
                features,
                arousal,
                valence,
            });
        }
    }
    Ok(Dataset {
        frame_period: config.frame_period,
        subjects,
    })
}
