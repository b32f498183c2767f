//! Synthetic dialogue corpus: characters with prosody profiles, tokenized
//! utterances labeled with one of 8 emotions, a rule-based teacher oracle
//! that emits regression targets, and a contour renderer that serves as
//! acoustic ground truth.

pub mod generate;
pub mod io;
pub mod oracle;
pub mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_corpus, CorpusSpec};
pub use oracle::TeacherOracle;
pub use render::{render_ground_truth, render_with, RenderOptions};

/// Synthetic token vocabulary. Tokens are grouped into one band of
/// `EMOTION_BAND_WIDTH` per emotion; an utterance's emotion skews its
/// token draws toward its band, which is the only textual emotion signal.
pub const VOCAB_SIZE: u32 = 48;
pub const EMOTION_BAND_WIDTH: u32 = 6;

pub const RATIONALE_DIM: usize = 768;

/// Frames per second of the contour grid.
pub const FPS: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Tsundere,
    Cheerful,
    Reserved,
    Stoic,
    Energetic,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::Tsundere,
        Archetype::Cheerful,
        Archetype::Reserved,
        Archetype::Stoic,
        Archetype::Energetic,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).expect("member of ALL")
    }

    pub fn adjective(self) -> &'static str {
        match self {
            Archetype::Tsundere => "sharp-tongued but secretly warm",
            Archetype::Cheerful => "sunny",
            Archetype::Reserved => "quiet",
            Archetype::Stoic => "composed",
            Archetype::Energetic => "lively",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeechPattern {
    Formal,
    Casual,
    Mixed,
}

impl SpeechPattern {
    pub const ALL: [SpeechPattern; 3] =
        [SpeechPattern::Formal, SpeechPattern::Casual, SpeechPattern::Mixed];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).expect("member of ALL")
    }

    /// (pause probability per token, mean pause length in frames)
    pub fn pause_profile(self) -> (f64, f64) {
        match self {
            SpeechPattern::Formal => (0.30, 10.0),
            SpeechPattern::Casual => (0.12, 5.0),
            SpeechPattern::Mixed => (0.20, 7.0),
        }
    }

    pub fn adjective(self) -> &'static str {
        match self {
            SpeechPattern::Formal => "formal",
            SpeechPattern::Casual => "easygoing",
            SpeechPattern::Mixed => "versatile",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Emotion {
    Neutral,
    Excited,
    Happy,
    Tsundere,
    Confused,
    Sad,
    Angry,
    Calm,
}

impl Emotion {
    pub const COUNT: usize = 8;
    pub const ALL: [Emotion; 8] = [
        Emotion::Neutral,
        Emotion::Excited,
        Emotion::Happy,
        Emotion::Tsundere,
        Emotion::Confused,
        Emotion::Sad,
        Emotion::Angry,
        Emotion::Calm,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&e| e == self).expect("member of ALL")
    }

    pub fn from_index(i: usize) -> Result<Emotion> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::domain("emotion", format!("index {i}")))
    }

    /// Token band for this emotion: `[start, start + width)`.
    pub fn token_band(self) -> std::ops::Range<u32> {
        let start = self.index() as u32 * EMOTION_BAND_WIDTH;
        start..start + EMOTION_BAND_WIDTH
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vad {
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
}

impl Vad {
    pub fn new(valence: f64, arousal: f64, dominance: f64) -> Self {
        Vad { valence, arousal, dominance }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.valence, self.arousal, self.dominance]
    }

    pub fn distance(&self, other: &Vad) -> f64 {
        crate::num::tensor::euclidean(&self.as_array(), &other.as_array())
    }
}

/// Per-emotion base VAD rows. Synthetic constants; their only obligations
/// are pairwise separation (>= 0.15) so emotion classification is learnable,
/// and coverage of the [0,1] range.
pub fn emotion_base_vad(e: Emotion) -> Vad {
    match e {
        Emotion::Neutral => Vad::new(0.50, 0.30, 0.50),
        Emotion::Excited => Vad::new(0.85, 0.90, 0.60),
        Emotion::Happy => Vad::new(0.90, 0.65, 0.55),
        Emotion::Tsundere => Vad::new(0.45, 0.70, 0.65),
        Emotion::Confused => Vad::new(0.40, 0.55, 0.25),
        Emotion::Sad => Vad::new(0.15, 0.25, 0.30),
        Emotion::Angry => Vad::new(0.15, 0.85, 0.80),
        Emotion::Calm => Vad::new(0.65, 0.15, 0.55),
    }
}

/// Archetype VAD offsets. Applied scaled by volatility, so a character with
/// volatility 0 expresses the plain emotion table.
pub fn archetype_offset(a: Archetype) -> [f64; 3] {
    match a {
        Archetype::Tsundere => [-0.05, 0.10, 0.10],
        Archetype::Cheerful => [0.10, 0.05, 0.00],
        Archetype::Reserved => [-0.05, -0.10, -0.05],
        Archetype::Stoic => [0.00, -0.15, 0.10],
        Archetype::Energetic => [0.05, 0.15, 0.00],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseProfile {
    /// Resting pitch in Hz.
    pub base_f0: f64,
    /// Pitch excursion range in Hz.
    pub f0_range: f64,
    /// Resting loudness in [0,1].
    pub base_energy: f64,
    /// Speaking rate in tokens per second.
    pub base_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaConfig {
    pub character_id: String,
    pub archetype: Archetype,
    pub volatility: f64,
    pub speech_pattern: SpeechPattern,
    pub description: String,
    pub base_profile: BaseProfile,
}

impl PersonaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.volatility) {
            return Err(Error::Data(format!(
                "{}: volatility {} outside [0,1]",
                self.character_id, self.volatility
            )));
        }
        if self.base_profile.base_f0 <= 0.0 {
            return Err(Error::Data(format!("{}: base_f0 must be positive", self.character_id)));
        }
        if self.base_profile.f0_range < 0.0 {
            return Err(Error::Data(format!("{}: f0_range must be >= 0", self.character_id)));
        }
        if self.description.is_empty() {
            return Err(Error::Data(format!("{}: empty description", self.character_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub character_id: String,
    pub token_ids: Vec<u32>,
    pub emotion_label: Emotion,
    pub split: Split,
    pub seen_flag: bool,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if !(4..=64).contains(&self.token_ids.len()) {
            return Err(Error::Data(format!(
                "{}: token count {} outside [4,64]",
                self.utterance_id,
                self.token_ids.len()
            )));
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::Data(format!("{}: token {bad} out of vocabulary", self.utterance_id)));
        }
        // Zero-shot contract: unseen characters exist only for evaluation.
        if !self.seen_flag && self.split != Split::Test {
            return Err(Error::Leakage(format!(
                "{}: unseen character in {:?} split",
                self.utterance_id, self.split
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsodyTarget {
    pub vad: Vad,
    pub f0_rel: f64,
    pub e_rel: f64,
    pub rationale_emb: Vec<f64>,
}

impl ProsodyTarget {
    /// The 5-vector the adapter regresses: (V, A, D, f0_rel, e_rel).
    pub fn as_p5(&self) -> [f64; 5] {
        [self.vad.valence, self.vad.arousal, self.vad.dominance, self.f0_rel, self.e_rel]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthContour {
    pub f0: Vec<f64>,
    pub energy: Vec<f64>,
    pub durations: Vec<u32>,
    pub pauses: Vec<u32>,
}

impl GroundTruthContour {
    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let frames = self.total_frames();
        if frames == 0 {
            return Err(Error::Data("contour has zero frames".into()));
        }
        if self.f0.len() != frames || self.energy.len() != frames {
            return Err(Error::Data(format!(
                "contour length mismatch: f0 {} energy {} vs durations sum {frames}",
                self.f0.len(),
                self.energy.len()
            )));
        }
        if self.durations.iter().any(|&d| d == 0) {
            return Err(Error::Data("zero-length token duration".into()));
        }
        if self.f0.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Data("non-positive f0 frame".into()));
        }
        if self.pauses.len() != self.durations.len() {
            return Err(Error::Data("pauses/durations length mismatch".into()));
        }
        Ok(())
    }
}

/// One corpus row: an utterance with its teacher target and rendered
/// ground-truth contour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub utterance: Utterance,
    pub target: ProsodyTarget,
    pub contour: GroundTruthContour,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub personas: Vec<PersonaConfig>,
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn persona(&self, character_id: &str) -> Result<&PersonaConfig> {
        self.personas
            .iter()
            .find(|p| p.character_id == character_id)
            .ok_or_else(|| Error::Data(format!("unknown character {character_id}")))
    }

    pub fn seen_characters(&self) -> Vec<&PersonaConfig> {
        let seen: std::collections::BTreeSet<&str> = self
            .records
            .iter()
            .filter(|r| r.utterance.seen_flag)
            .map(|r| r.utterance.character_id.as_str())
            .collect();
        self.personas.iter().filter(|p| seen.contains(p.character_id.as_str())).collect()
    }

    pub fn unseen_characters(&self) -> Vec<&PersonaConfig> {
        let seen: std::collections::BTreeSet<&str> = self
            .records
            .iter()
            .filter(|r| r.utterance.seen_flag)
            .map(|r| r.utterance.character_id.as_str())
            .collect();
        self.personas.iter().filter(|p| !seen.contains(p.character_id.as_str())).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.utterance.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.personas {
            p.validate()?;
        }
        for r in &self.records {
            r.utterance.validate()?;
            r.contour.validate()?;
            self.persona(&r.utterance.character_id)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emotion_base_rows_are_pairwise_separated() {
        for (i, &a) in Emotion::ALL.iter().enumerate() {
            for &b in &Emotion::ALL[i + 1..] {
                let d = emotion_base_vad(a).distance(&emotion_base_vad(b));
                assert!(d >= 0.15, "{a:?} vs {b:?}: distance {d}");
            }
        }
    }

    #[test]
    fn emotion_bands_partition_the_vocabulary() {
        let mut covered = vec![false; VOCAB_SIZE as usize];
        for &e in &Emotion::ALL {
            for t in e.token_band() {
                assert!(!covered[t as usize], "token {t} in two bands");
                covered[t as usize] = true;
            }
        }
        assert!(covered.into_iter().all(|c| c), "bands must cover the vocabulary");
    }

    #[test]
    fn enum_indices_round_trip() {
        for &e in &Emotion::ALL {
            assert_eq!(Emotion::from_index(e.index()).unwrap(), e);
        }
        assert!(Emotion::from_index(8).is_err());
    }

    #[test]
    fn unseen_character_outside_test_split_is_invalid() {
        let u = Utterance {
            utterance_id: "x".into(),
            character_id: "c".into(),
            token_ids: vec![1, 2, 3, 4],
            emotion_label: Emotion::Neutral,
            split: Split::Train,
            seen_flag: false,
        };
        match u.validate() {
            Err(Error::Leakage(_)) => {}
            other => panic!("expected leakage error, got {other:?}"),
        }
    }

    #[test]
    fn base_vad_values_live_in_unit_cube() {
        for &e in &Emotion::ALL {
            let v = emotion_base_vad(e);
            for c in v.as_array() {
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }
}
