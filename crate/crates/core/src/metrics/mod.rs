//! Objective evaluation stack: a pair of small frozen encoders (speaker
//! identity and emotion) trained on a corpus disjoint from everything the
//! main models ever see, plus the scores computed on top of them: cosine
//! character similarity, equal-error-rate similarity, cluster compactness,
//! emotion accuracy, and pitch error.

pub mod encoders;
pub mod report;
pub mod scores;

use crate::corpus::{GroundTruthContour, FPS};
use crate::error::{Error, Result};

pub use encoders::{
    encoder_corpus, train_eval_encoders, train_eval_encoders_on, EmotionClassifier,
    EncoderTrainConfig, FrozenEncoders, SpeakerEncoder, TimbreReadout,
};
pub use report::{evaluate, EmotionRow, EvalPair, MetricReport};
pub use scores::{
    ccs_cosine, cluster_radius_ratio, compute_eer, eea, eer_trials, f0_rmse, EerResult,
};

/// Length of the fixed summary vector both encoders consume.
pub const STATS_DIM: usize = 15;

/// The scalar prefix of the stats vector (everything before the histogram):
/// f0 mean/std/range, energy mean/std, speaking rate, pause ratio. This is
/// the contour profile the timbre readout reconstructs.
pub const PROFILE_DIM: usize = 7;

/// F0 histogram support: 8 bins of 40 Hz covering [80, 400); out-of-range
/// frames clamp into the edge bins.
const HIST_LO: f64 = 80.0;
const HIST_BIN_HZ: f64 = 40.0;
const HIST_BINS: usize = 8;

/// Summarize a contour to the encoders' input vector. Layout:
/// f0 mean/std/range, energy mean/std, speaking rate, pause ratio, then the
/// 8-bin f0 histogram. Each slot is scaled so typical corpus values land
/// near [0, 1].
pub fn contour_stats(c: &GroundTruthContour) -> Result<[f64; STATS_DIM]> {
    let n = c.f0.len();
    if n == 0 || c.durations.is_empty() {
        return Err(Error::domain("contour_stats", "empty contour"));
    }
    if c.energy.len() != n {
        return Err(Error::shape(
            "contour_stats",
            format!("f0 has {n} frames, energy has {}", c.energy.len()),
        ));
    }
    let speech: u64 = c.durations.iter().map(|&d| u64::from(d)).sum();
    if speech == 0 {
        return Err(Error::domain("contour_stats", "all token durations are zero"));
    }
    let pause: u64 = c.pauses.iter().map(|&p| u64::from(p)).sum();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64], m: f64| {
        (v.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let f0_mean = mean(&c.f0);
    let e_mean = mean(&c.energy);
    let (mut f0_lo, mut f0_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in &c.f0 {
        f0_lo = f0_lo.min(x);
        f0_hi = f0_hi.max(x);
    }
    let tokens_per_sec = c.durations.len() as f64 * FPS / speech as f64;

    let mut out = [0.0; STATS_DIM];
    out[0] = f0_mean / 300.0;
    out[1] = std(&c.f0, f0_mean) / 30.0;
    out[2] = (f0_hi - f0_lo) / 60.0;
    out[3] = e_mean;
    out[4] = std(&c.energy, e_mean) * 5.0;
    out[5] = tokens_per_sec / 7.0;
    out[6] = pause as f64 / (pause + speech) as f64;
    for &x in &c.f0 {
        let b = (((x - HIST_LO) / HIST_BIN_HZ).floor()).clamp(0.0, (HIST_BINS - 1) as f64);
        out[7 + b as usize] += 1.0;
    }
    for b in 0..HIST_BINS {
        out[7 + b] /= n as f64;
    }
    Ok(out)
}
