//! Adapter network. Utterance token embeddings attend to a short sequence
//! of semantic tokens built from the persona config (archetype, volatility
//! bucket, speech pattern, hashed description words) plus a token-band
//! histogram hint; three heads read the pooled representation.

use rand_chacha::ChaCha8Rng;

use crate::adapter::{control_from_phat, AdapterConfig, AdapterOutput};
use crate::corpus::{PersonaConfig, Emotion, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::num::nn::{attention, init_attention, layernorm, linear, Binding, Params};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::Tensor;

/// Hashed description vocabulary size.
pub const HASH_VOCAB: usize = 64;
/// Volatility is embedded through this many buckets.
pub const VOLATILITY_BUCKETS: usize = 4;
/// At most this many description words enter the semantic sequence.
pub const MAX_DESC_WORDS: usize = 12;

/// Template words that appear in every generated description and carry no
/// identity; dropped before hashing.
const FILLER_WORDS: [&str; 6] = ["speaker", "with", "voice", "pacing", "delivery", "register"];

#[derive(Debug, Clone)]
pub struct AdapterModel {
    pub cfg: AdapterConfig,
}

impl AdapterModel {
    pub fn new(cfg: AdapterConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdapterModel { cfg })
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Params {
        let h = self.cfg.hidden_dim;
        let mut p = Params::new();
        p.init_table(rng, "emb.tok", VOCAB_SIZE as usize, h);
        p.init_table(rng, "emb.arch", crate::corpus::Archetype::ALL.len(), h);
        p.init_table(rng, "emb.vol", VOLATILITY_BUCKETS, h);
        p.init_table(rng, "emb.pat", crate::corpus::SpeechPattern::ALL.len(), h);
        p.init_table(rng, "emb.hash", HASH_VOCAB, h);
        p.init_linear(rng, "hint", Emotion::COUNT, h);
        p.init_layernorm("semln", h);
        for l in 0..self.cfg.num_layers {
            init_attention(&mut p, rng, &format!("blk{l}.attn"), h);
            p.init_layernorm(&format!("blk{l}.ln1"), h);
            p.init_layernorm(&format!("blk{l}.ln2"), h);
            p.init_linear(rng, &format!("blk{l}.ff1"), h, 2 * h);
            p.init_linear(rng, &format!("blk{l}.ff2"), 2 * h, h);
        }
        p.init_layernorm("final_ln", h);
        p.init_linear(rng, "head_p5", h, self.cfg.prosody_dim);
        p.init_linear(rng, "head_sem", h, self.cfg.rationale_dim);
        p.init_linear(rng, "head_z", h, crate::adapter::Z_DIM);
        p
    }

    /// Forward pass on an open tape. Tokens beyond `valid_len` never enter
    /// the graph, so padding content cannot influence the output.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        persona: &PersonaConfig,
        token_ids: &[u32],
        valid_len: usize,
    ) -> Result<(Var, Var, Var)> {
        if valid_len == 0 || valid_len > token_ids.len() {
            return Err(Error::domain(
                "adapter_forward",
                format!("valid_len {valid_len} for {} tokens", token_ids.len()),
            ));
        }
        let tokens = &token_ids[..valid_len];
        if let Some(&bad) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::domain("adapter_forward", format!("token {bad} out of vocabulary")));
        }

        let semantic = self.semantic_rows(tape, bind, persona, Some(tokens))?;
        let token_idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok_table = bind.var(tape, "emb.tok")?;
        let embedded = tape.gather(tok_table, &token_idx)?;
        let pos = tape.leaf(sinusoidal(valid_len, self.cfg.hidden_dim));
        let u = tape.add(embedded, pos)?;

        let pooled = self.encode(tape, bind, u, semantic)?;
        self.heads(tape, bind, pooled)
    }

    /// Description-only encoding for text queries: the hashed description
    /// words serve as both queries and keys, reusing the block weights.
    pub fn describe_on_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        description: &str,
    ) -> Result<Var> {
        let words = description_words(description);
        if words.is_empty() {
            return Err(Error::domain("embed_text_query", "description has no usable words"));
        }
        let idx: Vec<usize> = words.iter().map(|w| fnv1a(w.as_bytes()) as usize % HASH_VOCAB).collect();
        let hash_table = bind.var(tape, "emb.hash")?;
        let rows = tape.gather(hash_table, &idx)?;
        let s = layernorm(tape, bind, "semln", rows)?;
        let pooled = self.encode(tape, bind, s, s)?;
        let (_, sem, _) = self.heads(tape, bind, pooled)?;
        Ok(sem)
    }

    fn semantic_rows(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        persona: &PersonaConfig,
        tokens: Option<&[u32]>,
    ) -> Result<Var> {
        let arch_table = bind.var(tape, "emb.arch")?;
        let arch = tape.gather(arch_table, &[persona.archetype.index()])?;
        let vol_bucket =
            ((persona.volatility * VOLATILITY_BUCKETS as f64).floor() as usize).min(VOLATILITY_BUCKETS - 1);
        let vol_table = bind.var(tape, "emb.vol")?;
        let vol = tape.gather(vol_table, &[vol_bucket])?;
        let pat_table = bind.var(tape, "emb.pat")?;
        let pat = tape.gather(pat_table, &[persona.speech_pattern.index()])?;

        let mut rows = vec![arch, vol, pat];
        if let Some(tokens) = tokens {
            let hist = tape.leaf(Tensor::row_vec(band_histogram(tokens).to_vec()));
            rows.push(linear(tape, bind, "hint", hist)?);
        }
        let words = description_words(&persona.description);
        if !words.is_empty() {
            let idx: Vec<usize> =
                words.iter().map(|w| fnv1a(w.as_bytes()) as usize % HASH_VOCAB).collect();
            let hash_table = bind.var(tape, "emb.hash")?;
            rows.push(tape.gather(hash_table, &idx)?);
        }
        let stacked = tape.concat_rows(&rows)?;
        layernorm(tape, bind, "semln", stacked)
    }

    fn encode(&self, tape: &mut Tape, bind: &mut Binding, mut u: Var, kv: Var) -> Result<Var> {
        for l in 0..self.cfg.num_layers {
            let q = layernorm(tape, bind, &format!("blk{l}.ln1"), u)?;
            let a = attention(tape, bind, &format!("blk{l}.attn"), q, kv, self.cfg.num_heads)?;
            u = tape.add(u, a)?;
            let f = layernorm(tape, bind, &format!("blk{l}.ln2"), u)?;
            let f = linear(tape, bind, &format!("blk{l}.ff1"), f)?;
            let f = tape.gelu(f);
            let f = linear(tape, bind, &format!("blk{l}.ff2"), f)?;
            u = tape.add(u, f)?;
        }
        let normed = layernorm(tape, bind, "final_ln", u)?;
        Ok(tape.mean_over_rows(normed))
    }

    fn heads(&self, tape: &mut Tape, bind: &mut Binding, pooled: Var) -> Result<(Var, Var, Var)> {
        let raw5 = linear(tape, bind, "head_p5", pooled)?;
        // VAD components sit at 0.5 + u clamped to [0,1]; the relative
        // scalars clamp to [-1,1]. Zero weights therefore land on the
        // midpoints of every range.
        let vad_raw = tape.slice_cols(raw5, 0, 3)?;
        let vad = tape.affine(vad_raw, 1.0, 0.5);
        let vad = tape.clamp(vad, 0.0, 1.0)?;
        let rel_raw = tape.slice_cols(raw5, 3, 2)?;
        let rel = tape.clamp(rel_raw, -1.0, 1.0)?;
        let p5 = tape.concat_cols(vad, rel)?;
        let sem = linear(tape, bind, "head_sem", pooled)?;
        let z = linear(tape, bind, "head_z", pooled)?;
        Ok((p5, sem, z))
    }

    /// Evaluation-mode forward: runs on a private tape, returns plain values.
    pub fn forward(
        &self,
        params: &Params,
        persona: &PersonaConfig,
        token_ids: &[u32],
        valid_len: usize,
    ) -> Result<AdapterOutput> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(params);
        let (p5, sem, z) = self.forward_on_tape(&mut tape, &mut bind, persona, token_ids, valid_len)?;
        let p_row = tape.value(p5).row(0);
        let p_hat = [p_row[0], p_row[1], p_row[2], p_row[3], p_row[4]];
        Ok(AdapterOutput {
            p_hat,
            h_adapter: tape.value(sem).row(0).to_vec(),
            z: tape.value(z).row(0).to_vec(),
            control: control_from_phat(&p_hat),
        })
    }

    /// Evaluation-mode description encoding (for retrieval text queries).
    pub fn encode_description(&self, params: &Params, description: &str) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(params);
        let sem = self.describe_on_tape(&mut tape, &mut bind, description)?;
        Ok(tape.value(sem).row(0).to_vec())
    }
}

/// Normalized count of tokens falling in each emotion band.
pub fn band_histogram(tokens: &[u32]) -> [f64; Emotion::COUNT] {
    let mut hist = [0.0; Emotion::COUNT];
    for &t in tokens {
        let band = (t / crate::corpus::EMOTION_BAND_WIDTH) as usize;
        if band < Emotion::COUNT {
            hist[band] += 1.0;
        }
    }
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        for v in hist.iter_mut() {
            *v /= total;
        }
    }
    hist
}

/// Lowercased words of length >= 4 minus template fillers, capped.
pub fn description_words(description: &str) -> Vec<String> {
    description
        .to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| w.len() >= 4 && !FILLER_WORDS.contains(w))
        .take(MAX_DESC_WORDS)
        .map(str::to_string)
        .collect()
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn sinusoidal(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for p in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            *t.at_mut(p, 2 * i) = (p as f64 * freq).sin();
            *t.at_mut(p, 2 * i + 1) = (p as f64 * freq).cos();
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Archetype, BaseProfile, SpeechPattern};
    use crate::rng::Seed;

    fn persona() -> PersonaConfig {
        PersonaConfig {
            character_id: "c0".into(),
            archetype: Archetype::Cheerful,
            volatility: 0.6,
            speech_pattern: SpeechPattern::Mixed,
            description: "A spirited sunny speaker with a bright voice, rapid pacing and firm delivery.".into(),
            base_profile: BaseProfile { base_f0: 240.0, f0_range: 50.0, base_energy: 0.6, base_rate: 6.0 },
        }
    }

    fn model() -> AdapterModel {
        AdapterModel::new(AdapterConfig::desk()).unwrap()
    }

    #[test]
    fn zero_weights_give_midpoint_predictions_for_any_input() {
        let m = model();
        let mut rng = Seed(1).stream("init");
        let mut params = m.init_params(&mut rng);
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            let t = params.get_mut(&n).unwrap();
            for v in t.data.iter_mut() {
                *v = 0.0;
            }
        }
        let a = m.forward(&params, &persona(), &[1, 2, 3, 4, 5], 5).unwrap();
        let b = m.forward(&params, &persona(), &[40, 41, 42, 43], 4).unwrap();
        assert_eq!(a.p_hat, [0.5, 0.5, 0.5, 0.0, 0.0]);
        assert_eq!(a.p_hat, b.p_hat);
        assert!(a.h_adapter.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_beyond_valid_len_is_inert() {
        let m = model();
        let mut rng = Seed(2).stream("init");
        let params = m.init_params(&mut rng);
        let a = m.forward(&params, &persona(), &[5, 9, 17, 33, 0, 0, 0], 4).unwrap();
        let b = m.forward(&params, &persona(), &[5, 9, 17, 33, 47, 12, 3], 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model();
        let mut rng = Seed(3).stream("init");
        let params = m.init_params(&mut rng);
        let a = m.forward(&params, &persona(), &[1, 2, 3, 4], 4).unwrap();
        let b = m.forward(&params, &persona(), &[1, 2, 3, 4], 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_vocabulary_token_is_rejected() {
        let m = model();
        let mut rng = Seed(4).stream("init");
        let params = m.init_params(&mut rng);
        assert!(m.forward(&params, &persona(), &[1, 99, 3, 4], 4).is_err());
        assert!(m.forward(&params, &persona(), &[1, 2], 0).is_err());
    }

    #[test]
    fn description_encoding_works_and_rejects_empty() {
        let m = model();
        let mut rng = Seed(5).stream("init");
        let params = m.init_params(&mut rng);
        let e1 = m.encode_description(&params, &persona().description).unwrap();
        let e2 = m.encode_description(&params, &persona().description).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), crate::corpus::RATIONALE_DIM);
        assert!(m.encode_description(&params, "a an it").is_err());
    }

    #[test]
    fn band_histogram_counts_bands() {
        // Tokens 0..5 are band 0, 6..11 band 1.
        let h = band_histogram(&[0, 1, 6, 7, 8, 47]);
        assert!((h[0] - 2.0 / 6.0).abs() < 1e-12);
        assert!((h[1] - 3.0 / 6.0).abs() < 1e-12);
        assert!((h[7] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn description_words_filter_fillers_and_short_words() {
        let words = description_words("A mercurial composed speaker with a deep voice.");
        assert_eq!(words, vec!["mercurial", "composed", "deep"]);
    }
}
