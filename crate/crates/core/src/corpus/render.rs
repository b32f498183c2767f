//! Ground-truth contour renderer. Deterministically turns a persona profile
//! plus a teacher target into frame-level pitch/energy curves with per-token
//! durations and pauses. This is the acoustic substrate every encoder and
//! metric consumes; its job is to make persona and emotion recoverable from
//! contour statistics, not to sound like speech.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Emotion, GroundTruthContour, PersonaConfig, ProsodyTarget, Utterance, FPS};
use crate::rng::{self, Seed};

/// Smoothness of the frame jitter (AR(1) coefficient).
const JITTER_RHO: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// Multiplier on all frame-level jitter. Zero gives the pure template.
    pub jitter_scale: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { jitter_scale: 1.0 }
    }
}

pub fn render_ground_truth(
    persona: &PersonaConfig,
    target: &ProsodyTarget,
    utterance: &Utterance,
    seed: u64,
) -> GroundTruthContour {
    render_with(persona, target, utterance, seed, &RenderOptions::default())
}

pub fn render_with(
    persona: &PersonaConfig,
    target: &ProsodyTarget,
    utterance: &Utterance,
    seed: u64,
    opts: &RenderOptions,
) -> GroundTruthContour {
    let s = Seed(seed);
    let uid = &utterance.utterance_id;
    let profile = &persona.base_profile;
    let arousal = target.vad.arousal;

    // Durations: base token length from the speaking rate, sped up by
    // arousal, with a per-token intrinsic factor and bounded jitter.
    let mut dur_rng: ChaCha8Rng = s.stream(&format!("render-dur/{uid}"));
    let rate_factor = 0.75 + 0.5 * arousal;
    let durations: Vec<u32> = utterance
        .token_ids
        .iter()
        .map(|&tok| {
            let intrinsic = 0.85 + 0.30 * f64::from(tok % 7) / 6.0;
            let jitter = 1.0 + 0.15 * opts.jitter_scale * (2.0 * dur_rng.gen::<f64>() - 1.0);
            let raw = FPS / (profile.base_rate * rate_factor) * intrinsic * jitter;
            ((raw + 0.5).floor() as u32).max(1)
        })
        .collect();

    // Pauses: speech pattern sets the odds and length; dominance suppresses
    // hesitation, which makes it observable in the pause ratio.
    let mut pause_rng: ChaCha8Rng = s.stream(&format!("render-pause/{uid}"));
    let (p_base, len_base) = persona.speech_pattern.pause_profile();
    let p_eff = (p_base * (1.5 - target.vad.dominance)).clamp(0.0, 1.0);
    let pauses: Vec<u32> = utterance
        .token_ids
        .iter()
        .map(|_| {
            if pause_rng.gen::<f64>() < p_eff {
                let u: f64 = pause_rng.gen();
                ((len_base * (0.6 + 0.8 * u)) + 0.5).floor() as u32
            } else {
                0
            }
        })
        .collect();

    let frames: usize = durations.iter().map(|&d| d as usize).sum();

    // Pitch: base + range * f0_rel * (1 + template), plus smooth jitter whose
    // amplitude grows with arousal. With f0_rel = 0 and zero jitter this is
    // exactly the flat base_f0 line.
    let mut f0_rng: ChaCha8Rng = s.stream(&format!("render-f0/{uid}"));
    let sigma_f0 = (1.0 + 5.0 * arousal) * opts.jitter_scale;
    let f0_jitter = ar1(&mut f0_rng, frames, sigma_f0);
    let mut f0 = Vec::with_capacity(frames);
    for (k, j) in f0_jitter.iter().enumerate() {
        let t = grid(k, frames);
        let shaped = profile.base_f0
            + profile.f0_range * target.f0_rel * (1.0 + template(utterance.emotion_label, t));
        f0.push((shaped + j).max(1.0));
    }

    let mut e_rng: ChaCha8Rng = s.stream(&format!("render-energy/{uid}"));
    let sigma_e = (0.005 + 0.02 * arousal) * opts.jitter_scale;
    let e_jitter = ar1(&mut e_rng, frames, sigma_e);
    let mut energy = Vec::with_capacity(frames);
    for (k, j) in e_jitter.iter().enumerate() {
        let t = grid(k, frames);
        let shaped = profile.base_energy
            + 0.25 * target.e_rel * (1.0 + template(utterance.emotion_label, t));
        energy.push((shaped + j).clamp(0.0, 1.0));
    }

    GroundTruthContour { f0, energy, durations, pauses }
}

fn grid(k: usize, frames: usize) -> f64 {
    if frames > 1 {
        k as f64 / (frames - 1) as f64
    } else {
        0.5
    }
}

/// Per-emotion modulation template on [0,1]. Distinct frequency and
/// amplitude per emotion so contour dynamics carry the label.
pub fn template(e: Emotion, t: f64) -> f64 {
    use std::f64::consts::PI;
    match e {
        Emotion::Neutral => 0.20 * (2.0 * PI * t).sin(),
        Emotion::Excited => 0.55 * (6.0 * PI * t).sin(),
        Emotion::Happy => 0.40 * (4.0 * PI * t).sin(),
        Emotion::Tsundere => 0.50 * (5.0 * PI * t).sin() * (PI * t).cos(),
        Emotion::Confused => 0.35 * (3.0 * PI * t + 0.7).sin(),
        Emotion::Sad => 0.10 * (2.0 * PI * t).sin() - 0.30 * t,
        Emotion::Angry => 0.60 * (7.0 * PI * t).sin(),
        Emotion::Calm => 0.12 * (PI * t).sin(),
    }
}

/// Smooth zero-mean jitter track: stationary AR(1) with coefficient
/// [`JITTER_RHO`] and marginal standard deviation `sigma`.
pub(crate) fn ar1(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let innovation = sigma * (1.0 - JITTER_RHO * JITTER_RHO).sqrt();
    let mut prev = sigma * rng::next_normal(rng);
    for _ in 0..n {
        out.push(prev);
        prev = JITTER_RHO * prev + innovation * rng::next_normal(rng);
    }
    out
}
