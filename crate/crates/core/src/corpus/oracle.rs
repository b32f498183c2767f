//! Rule-based annotation teacher. Stands in for a persona-conditioned LLM:
//! given a character and an utterance it emits the regression target
//! (VAD, relative pitch/energy) plus a rationale embedding.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    archetype_offset, emotion_base_vad, Archetype, Emotion, PersonaConfig, ProsodyTarget,
    Utterance, Vad, RATIONALE_DIM,
};
use crate::rng::{self, Seed};

/// Noise added to rationale embeddings before normalization. Small relative
/// to the projection magnitude so same (archetype, emotion) pairs keep
/// cosine similarity >= 0.95.
const RATIONALE_NOISE_STD: f64 = 0.15;

/// The teacher is frozen: one fixed internal seed, independent of any
/// corpus seed, so targets for a given (persona, utterance) never change.
const TEACHER_SEED: u64 = 0x7eac4e11;

#[derive(Debug, Clone)]
pub struct TeacherOracle {
    seed: Seed,
}

impl Default for TeacherOracle {
    fn default() -> Self {
        TeacherOracle { seed: Seed(TEACHER_SEED) }
    }
}

impl TeacherOracle {
    pub fn frozen() -> Self {
        Self::default()
    }

    /// Annotate one utterance. Pure: identical inputs give identical targets.
    pub fn annotate(&self, persona: &PersonaConfig, utterance: &Utterance) -> ProsodyTarget {
        let vad = self.vad_for(persona.archetype, persona.volatility, utterance.emotion_label);
        let (f0_rel, e_rel) = relative_prosody(&vad);
        let rationale_emb =
            self.rationale(persona.archetype, utterance.emotion_label, &utterance.utterance_id);
        ProsodyTarget { vad, f0_rel, e_rel, rationale_emb }
    }

    /// Emotion base row pushed toward its extremes and tinted by the
    /// archetype, both proportional to volatility:
    /// `v' = clamp01(v + vol*(v - 0.5) + vol*offset)`.
    /// Volatility 0 therefore reproduces the base table exactly.
    fn vad_for(&self, archetype: Archetype, volatility: f64, emotion: Emotion) -> Vad {
        let base = emotion_base_vad(emotion).as_array();
        let offset = archetype_offset(archetype);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (base[c] + volatility * (base[c] - 0.5) + volatility * offset[c]).clamp(0.0, 1.0);
        }
        Vad::new(out[0], out[1], out[2])
    }

    /// Projection of the one-hot (archetype, emotion) pair through a frozen
    /// random matrix, plus per-utterance noise, unit-normalized.
    fn rationale(&self, archetype: Archetype, emotion: Emotion, utterance_id: &str) -> Vec<f64> {
        let mut v = vec![0.0; RATIONALE_DIM];
        add_projection_column(&mut v, self.seed, &format!("rationale-arch{}", archetype.index()));
        add_projection_column(&mut v, self.seed, &format!("rationale-emo{}", emotion.index()));

        let mut noise_rng: ChaCha8Rng = self.seed.stream(&format!("rationale-noise/{utterance_id}"));
        for x in v.iter_mut() {
            *x += rng::next_normal(&mut noise_rng) * RATIONALE_NOISE_STD;
        }
        let norm = crate::num::tensor::norm(&v);
        for x in v.iter_mut() {
            *x /= norm;
        }
        v
    }
}

fn add_projection_column(v: &mut [f64], seed: Seed, name: &str) {
    let mut rng: ChaCha8Rng = seed.stream(name);
    for x in v.iter_mut() {
        *x += rng::next_normal(&mut rng);
    }
}

/// Relative pitch and energy as affine maps of arousal and valence,
/// clamped to [-1, 1]. The 2x2 map is invertible (det 0.10), so (A, V)
/// stays linearly decodable from the pair.
pub fn relative_prosody(vad: &Vad) -> (f64, f64) {
    let a = vad.arousal - 0.5;
    let v = vad.valence - 0.5;
    let f0_rel = (0.8 * a + 0.2 * v).clamp(-1.0, 1.0);
    let e_rel = (0.7 * a + 0.3 * v).clamp(-1.0, 1.0);
    (f0_rel, e_rel)
}
