//! End-to-end synthesis: pick the best reference clip by emotional
//! proximity, fuse the timbre code with the control and prosody tracks, and
//! render a frame-level contour in place of a neural backbone.

pub mod trace;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterModel, ControlParams};
use crate::corpus::render::ar1;
use crate::corpus::{Emotion, GroundTruthContour, PersonaConfig, Record, Utterance, Vad, FPS};
use crate::error::{Error, Result};
use crate::metrics::{contour_stats, SpeakerEncoder, TimbreReadout, PROFILE_DIM};
use crate::num::nn::Params;
use crate::num::signal::resample_linear;
use crate::prosodyflow::{hierarchical_predict, FlowConfig, FlowStage};
use crate::rng::Seed;
use crate::timbre::{quantize, ContourEmbedder, SQCodebook, TimbreCode};

pub use trace::{StageTimings, SynthesisTrace};

/// Rendered output; identical layout to the corpus ground truth so every
/// metric consumes it unchanged.
pub type ProsodyContour = GroundTruthContour;

/// Weighting of the decoded timbre profile against the selected reference
/// clip's measured statistics when forming the base contour.
const TIMBRE_BLEND: f64 = 0.7;
const REFERENCE_BLEND: f64 = 0.3;

/// Jitter amplitudes of the synthetic base contour. Small and fixed: the
/// fine flow curve carries the expressive dynamics.
const BASE_F0_SIGMA: f64 = 1.5;
const BASE_ENERGY_SIGMA: f64 = 0.008;

/// One selectable reference clip with its precomputed emotion coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub clip_id: String,
    pub character_id: String,
    pub emotion_label: Emotion,
    pub vad: Vad,
    pub contour: GroundTruthContour,
}

/// All reference clips available at inference, sorted by clip id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLibrary {
    pub entries: Vec<ReferenceEntry>,
}

impl ReferenceLibrary {
    /// One entry per record; the VAD point is copied from the record's
    /// teacher target so selection never recomputes it.
    pub fn from_records<'a, I>(records: I) -> Result<ReferenceLibrary>
    where
        I: IntoIterator<Item = &'a Record>,
    {
        let mut entries: Vec<ReferenceEntry> = records
            .into_iter()
            .map(|r| ReferenceEntry {
                clip_id: r.utterance.utterance_id.clone(),
                character_id: r.utterance.character_id.clone(),
                emotion_label: r.utterance.emotion_label,
                vad: r.target.vad,
                contour: r.contour.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        let lib = ReferenceLibrary { entries };
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("reference library is empty".into()));
        }
        for w in self.entries.windows(2) {
            if w[0].clip_id >= w[1].clip_id {
                return Err(Error::Data(format!(
                    "reference clips out of order or duplicated at {}",
                    w[1].clip_id
                )));
            }
        }
        for e in &self.entries {
            e.contour.validate()?;
            if e.vad.as_array().iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("{}: non-finite VAD", e.clip_id)));
            }
        }
        Ok(())
    }

    /// Clips belonging to one character, in clip order.
    pub fn for_character(&self, character_id: &str) -> Vec<&ReferenceEntry> {
        self.entries.iter().filter(|e| e.character_id == character_id).collect()
    }

    pub fn get(&self, clip_id: &str) -> Option<&ReferenceEntry> {
        self.entries.binary_search_by(|e| e.clip_id.as_str().cmp(clip_id)).ok().map(|i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Argmin of Euclidean VAD distance; ties take the lexicographically
/// smallest clip id regardless of iteration order.
fn argmin_entry<'a, I>(entries: I, target: &Vad) -> Option<&'a ReferenceEntry>
where
    I: IntoIterator<Item = &'a ReferenceEntry>,
{
    let mut best: Option<(f64, &ReferenceEntry)> = None;
    for e in entries {
        let d = e.vad.distance(target);
        let better = match best {
            None => true,
            Some((bd, be)) => d < bd || (d == bd && e.clip_id < be.clip_id),
        };
        if better {
            best = Some((d, e));
        }
    }
    best.map(|(_, e)| e)
}

/// The reference clip whose stored VAD lies nearest the target.
pub fn select_reference<'a>(
    library: &'a ReferenceLibrary,
    vad_target: &Vad,
) -> Result<&'a ReferenceEntry> {
    argmin_entry(&library.entries, vad_target)
        .ok_or_else(|| Error::Config("reference library is empty".into()))
}

fn round_half_up_min1(x: f64) -> u32 {
    ((x + 0.5).floor() as u32).max(1)
}

/// Flat starting contour from a character profile (the scalar prefix of
/// contour statistics): per-token durations from the speaking rate, evenly
/// spread pauses matching the pause ratio, and pitch/energy tracks at the
/// profile means with a little smooth jitter.
fn base_contour(utterance: &Utterance, profile: &[f64; PROFILE_DIM], seed: Seed) -> ProsodyContour {
    let uid = &utterance.utterance_id;
    let rate = (profile[5] * 7.0).max(0.5);
    let durations: Vec<u32> = utterance
        .token_ids
        .iter()
        .map(|&tok| {
            let intrinsic = 0.85 + 0.30 * f64::from(tok % 7) / 6.0;
            round_half_up_min1(FPS / rate * intrinsic)
        })
        .collect();
    let speech: u64 = durations.iter().map(|&d| u64::from(d)).sum();

    // pause / (pause + speech) = ratio, solved for the total pause budget.
    let ratio = profile[6].clamp(0.0, 0.45);
    let budget = (speech as f64 * ratio / (1.0 - ratio) + 0.5).floor() as u64;
    let n = durations.len() as u64;
    let pauses: Vec<u32> = (0..n)
        .map(|i| {
            let extra = u64::from(i < budget % n);
            (budget / n + extra) as u32
        })
        .collect();

    let frames = speech as usize;
    let f0_level = (profile[0] * 300.0).max(1.0);
    let mut rng = seed.stream(&format!("fuse-f0/{uid}"));
    let f0 = ar1(&mut rng, frames, BASE_F0_SIGMA)
        .into_iter()
        .map(|j| (f0_level + j).max(1.0))
        .collect();
    let e_level = profile[3].clamp(0.0, 1.0);
    let mut rng = seed.stream(&format!("fuse-energy/{uid}"));
    let energy = ar1(&mut rng, frames, BASE_ENERGY_SIGMA)
        .into_iter()
        .map(|j| (e_level + j).clamp(0.0, 1.0))
        .collect();

    ProsodyContour { f0, energy, durations, pauses }
}

/// Fuse both tracks into a rendered contour. The base comes from the
/// character profile decoded out of the quantized timbre code, blended with
/// the reference clip's measured statistics. Controls then apply in a fixed
/// order: durations scale first (rounded half-up, at least one frame),
/// pauses scale next, then pitch shifts by `1 + delta_f0` with the fine
/// curve added on top, and energy analogously with `delta_e`, clamped to
/// [0, 1]. With identity controls and a zero fine curve the output is the
/// base contour unchanged.
pub fn fuse_and_render(
    utterance: &Utterance,
    timbre: &TimbreCode,
    control: &ControlParams,
    fine_mod: &[f64],
    reference: &ReferenceEntry,
    readout: &TimbreReadout,
    seed: Seed,
) -> Result<ProsodyContour> {
    let decoded = readout.decode(&timbre.quantized)?;
    let ref_stats = contour_stats(&reference.contour)?;
    let mut profile = [0.0; PROFILE_DIM];
    for (i, slot) in profile.iter_mut().enumerate() {
        *slot = TIMBRE_BLEND * decoded[i] + REFERENCE_BLEND * ref_stats[i];
    }
    let base = base_contour(utterance, &profile, seed);

    let durations: Vec<u32> = base
        .durations
        .iter()
        .map(|&d| round_half_up_min1(f64::from(d) * control.duration_scale))
        .collect();
    let pauses: Vec<u32> = base
        .pauses
        .iter()
        .map(|&p| (f64::from(p) * control.pause_scale + 0.5).floor() as u32)
        .collect();
    let frames: usize = durations.iter().map(|&d| d as usize).sum();

    let f0_base = resample_linear(&base.f0, frames)?;
    let e_base = resample_linear(&base.energy, frames)?;
    let fine = resample_linear(fine_mod, frames)?;

    // Modulation depth in physical units, read off the blended profile:
    // half the pitch spread and one energy standard deviation.
    let f0_scale = (profile[2] * 60.0 / 2.0).max(0.0);
    let e_scale = (profile[4] / 5.0).max(0.0);

    let f0 = f0_base
        .iter()
        .zip(&fine)
        .map(|(&f, &m)| (f * (1.0 + control.delta_f0) + f0_scale * m).max(1.0))
        .collect();
    let energy = e_base
        .iter()
        .zip(&fine)
        .map(|(&e, &m)| (e * (1.0 + control.delta_e) + e_scale * m).clamp(0.0, 1.0))
        .collect();

    let out = ProsodyContour { f0, energy, durations, pauses };
    out.validate()?;
    Ok(out)
}

/// Which track supplies the VAD target for reference selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VadSource {
    /// The deterministic low-latency path: the adapter's predicted p̂.
    Adapter,
    /// The expressive path: the sampled coarse flow vector (default).
    Flow,
}

impl Default for VadSource {
    fn default() -> Self {
        VadSource::Flow
    }
}

/// Loaded model state for inference. Immutable once built, so batch callers
/// may share one instance across threads.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    pub adapter: AdapterModel,
    pub adapter_params: Params,
    pub coarse: FlowStage,
    pub fine: FlowStage,
    pub flow_cfg: FlowConfig,
    pub speaker: SpeakerEncoder,
    pub codebook: SQCodebook,
    pub readout: TimbreReadout,
    pub vad_source: VadSource,
}

impl Synthesizer {
    /// Run one full inference pass. The utterance's emotion label is never
    /// consulted: expressed emotion comes entirely from the conditioned
    /// tracks. The persona conditions those tracks and may deliberately
    /// belong to a different character (persona ablations rely on this);
    /// timbre and reference clips always follow the utterance's character.
    pub fn infer(
        &self,
        persona: &PersonaConfig,
        utterance: &Utterance,
        library: &ReferenceLibrary,
        seed: Seed,
    ) -> Result<SynthesisTrace> {
        let t0 = Instant::now();
        let adapter_out = self.adapter.forward(
            &self.adapter_params,
            persona,
            &utterance.token_ids,
            utterance.token_ids.len(),
        )?;
        let control = adapter_out.control;
        let adapter_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        let sample = hierarchical_predict(
            &self.coarse,
            &self.fine,
            &self.flow_cfg,
            persona,
            &utterance.token_ids,
            &utterance.utterance_id,
            seed,
        )?;
        let flow_ms = t1.elapsed().as_secs_f64() * 1e3;

        let t2 = Instant::now();
        let vad_target = match self.vad_source {
            VadSource::Adapter => {
                Vad::new(adapter_out.p_hat[0], adapter_out.p_hat[1], adapter_out.p_hat[2])
            }
            VadSource::Flow => Vad::new(sample.coarse[0], sample.coarse[1], sample.coarse[2]),
        };
        let candidates = library.for_character(&utterance.character_id);
        let reference = argmin_entry(candidates.iter().copied(), &vad_target).ok_or_else(|| {
            Error::Config(format!("no reference clips for {}", utterance.character_id))
        })?;
        let selection_ms = t2.elapsed().as_secs_f64() * 1e3;

        let t3 = Instant::now();
        // Speaker timbre: plain average of per-clip features over the
        // character's clips, then quantized. The average stays unnormalized
        // so the linear readout decodes the mean profile.
        let mut raw = vec![0.0; self.speaker.embed_dim()];
        for e in &candidates {
            let feat = self.speaker.embed_contour(&e.contour)?;
            for (m, v) in raw.iter_mut().zip(&feat) {
                *m += v / candidates.len() as f64;
            }
        }
        let timbre = quantize(&raw, &self.codebook);
        let contour = fuse_and_render(
            utterance,
            &timbre,
            &control,
            &sample.fine,
            reference,
            &self.readout,
            seed,
        )?;
        let render_ms = t3.elapsed().as_secs_f64() * 1e3;

        Ok(SynthesisTrace {
            utterance_id: utterance.utterance_id.clone(),
            character_id: utterance.character_id.clone(),
            control,
            selected_ref: reference.clip_id.clone(),
            vad_target,
            timbre,
            contour,
            timing: StageTimings { adapter_ms, flow_ms, selection_ms, render_ms },
        })
    }
}
