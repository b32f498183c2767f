//! Corpus generator: samples characters and utterances, annotates them with
//! the frozen teacher, renders ground truth, and assigns character-stratified
//! splits with a held-out unseen partition.

use rand::Rng;

use crate::corpus::{
    render_ground_truth, Archetype, BaseProfile, Corpus, Emotion, PersonaConfig, Record,
    SpeechPattern, Split, TeacherOracle, Utterance, VOCAB_SIZE,
};
use crate::error::{Error, Result};
use crate::rng::{shuffled_indices, Seed};

/// Descriptor words; the bucket triple (pitch, rate, energy) is forced
/// pairwise distinct across characters so descriptions identify speakers.
const PITCH_WORDS: [&str; 5] = ["deep", "low", "medium", "bright", "high"];
const RATE_WORDS: [&str; 4] = ["measured", "steady", "brisk", "rapid"];
const ENERGY_WORDS: [&str; 4] = ["soft", "gentle", "firm", "forceful"];
const VOLATILITY_WORDS: [&str; 4] = ["even-keeled", "steady-tempered", "spirited", "mercurial"];

/// Fraction of tokens drawn from the utterance's emotion band.
const BAND_TOKEN_PROB: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSpec {
    /// Total characters, seen + unseen.
    pub num_characters: usize,
    /// Characters held out of every training path (the zero-shot partition).
    pub unseen_characters: usize,
    pub utterances_per_character: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { num_characters: 14, unseen_characters: 4, utterances_per_character: 50, seed: 7 }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_characters < 3 {
            return Err(Error::Config(format!(
                "num_characters {} < 3: too few to form splits and negatives",
                self.num_characters
            )));
        }
        if self.num_characters > 64 {
            return Err(Error::Config(format!(
                "num_characters {} > 64: descriptor space supports at most 64 distinct profiles",
                self.num_characters
            )));
        }
        if self.unseen_characters >= self.num_characters {
            return Err(Error::Config("unseen_characters must be < num_characters".into()));
        }
        if self.num_characters - self.unseen_characters < 2 {
            return Err(Error::Config(
                "need >= 2 seen characters so contrastive negatives exist".into(),
            ));
        }
        if self.utterances_per_character < 10 {
            return Err(Error::Config(format!(
                "utterances_per_character {} < 10: cannot form an 80/10/10 split",
                self.utterances_per_character
            )));
        }
        Ok(())
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let seed = Seed(spec.seed);
    let oracle = TeacherOracle::frozen();

    let personas = sample_personas(spec, seed)?;
    let n_seen = spec.num_characters - spec.unseen_characters;

    let mut records = Vec::with_capacity(spec.num_characters * spec.utterances_per_character);
    for (ci, persona) in personas.iter().enumerate() {
        let seen = ci < n_seen;
        let m = spec.utterances_per_character;
        let cid = &persona.character_id;

        // Emotions cycle then shuffle: balanced per character.
        let mut emotions: Vec<Emotion> = (0..m).map(|j| Emotion::ALL[j % Emotion::COUNT]).collect();
        let mut emo_rng = seed.stream(&format!("corpus-emotions/{cid}"));
        let order = shuffled_indices(&mut emo_rng, m);
        emotions = order.iter().map(|&j| emotions[j]).collect();

        let split_of = assign_splits(seed, cid, m, seen);

        let mut tok_rng = seed.stream(&format!("corpus-tokens/{cid}"));
        for j in 0..m {
            let emotion = emotions[j];
            let band = emotion.token_band();
            let len = tok_rng.gen_range(4..=64usize);
            let token_ids: Vec<u32> = (0..len)
                .map(|_| {
                    if tok_rng.gen::<f64>() < BAND_TOKEN_PROB {
                        tok_rng.gen_range(band.clone())
                    } else {
                        tok_rng.gen_range(0..VOCAB_SIZE)
                    }
                })
                .collect();

            let utterance = Utterance {
                utterance_id: format!("{cid}-u{j:03}"),
                character_id: cid.clone(),
                token_ids,
                emotion_label: emotion,
                split: split_of[j],
                seen_flag: seen,
            };
            let target = oracle.annotate(persona, &utterance);
            let contour = render_ground_truth(persona, &target, &utterance, spec.seed);
            records.push(Record { utterance, target, contour });
        }
    }

    let corpus = Corpus { seed: spec.seed, personas, records };
    corpus.validate()?;
    Ok(corpus)
}

/// Seen characters get a shuffled 80/10/10 split; unseen characters are
/// test-only by definition.
fn assign_splits(seed: Seed, cid: &str, m: usize, seen: bool) -> Vec<Split> {
    if !seen {
        return vec![Split::Test; m];
    }
    let n_val = (m / 10).max(1);
    let n_test = (m / 10).max(1);
    let mut rng = seed.stream(&format!("corpus-splits/{cid}"));
    let order = shuffled_indices(&mut rng, m);
    let mut out = vec![Split::Train; m];
    for &j in order.iter().take(n_val) {
        out[j] = Split::Val;
    }
    for &j in order.iter().skip(n_val).take(n_test) {
        out[j] = Split::Test;
    }
    out
}

fn sample_personas(spec: &CorpusSpec, seed: Seed) -> Result<Vec<PersonaConfig>> {
    let mut rng = seed.stream("corpus-profiles");
    let mut used_buckets: std::collections::BTreeSet<(usize, usize, usize)> =
        std::collections::BTreeSet::new();
    let mut personas = Vec::with_capacity(spec.num_characters);
    for i in 0..spec.num_characters {
        let archetype = Archetype::ALL[rng.gen_range(0..Archetype::ALL.len())];
        let speech_pattern = SpeechPattern::ALL[rng.gen_range(0..SpeechPattern::ALL.len())];
        let volatility: f64 = rng.gen();

        let mut profile = None;
        for _attempt in 0..1000 {
            let candidate = BaseProfile {
                base_f0: rng.gen_range(150.0..320.0),
                f0_range: rng.gen_range(25.0..65.0),
                base_energy: rng.gen_range(0.35..0.75),
                base_rate: rng.gen_range(3.0..7.0),
            };
            if used_buckets.insert(buckets(&candidate)) {
                profile = Some(candidate);
                break;
            }
        }
        let base_profile = profile.ok_or_else(|| {
            Error::Config("could not find a distinct profile bucket in 1000 attempts".into())
        })?;

        let description = describe(archetype, speech_pattern, volatility, &base_profile);
        personas.push(PersonaConfig {
            character_id: format!("char{i:02}"),
            archetype,
            volatility,
            speech_pattern,
            description,
            base_profile,
        });
    }
    Ok(personas)
}

pub fn buckets(p: &BaseProfile) -> (usize, usize, usize) {
    let pitch = (((p.base_f0 - 150.0) / 34.0).floor() as usize).min(PITCH_WORDS.len() - 1);
    let rate = ((p.base_rate - 3.0).floor() as usize).min(RATE_WORDS.len() - 1);
    let energy = (((p.base_energy - 0.35) / 0.10).floor() as usize).min(ENERGY_WORDS.len() - 1);
    (pitch, rate, energy)
}

fn describe(
    archetype: Archetype,
    pattern: SpeechPattern,
    volatility: f64,
    profile: &BaseProfile,
) -> String {
    let (pitch, rate, energy) = buckets(profile);
    let vol = ((volatility * 4.0).floor() as usize).min(VOLATILITY_WORDS.len() - 1);
    format!(
        "A {} {} speaker with a {} voice, {} pacing and {} delivery in a {} register.",
        VOLATILITY_WORDS[vol],
        archetype.adjective(),
        PITCH_WORDS[pitch],
        RATE_WORDS[rate],
        ENERGY_WORDS[energy],
        pattern.adjective(),
    )
}
