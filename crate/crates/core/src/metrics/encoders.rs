//! Evaluation encoders. Both are tiny MLPs over contour statistics, trained
//! on an encoder corpus whose characters are disjoint from the evaluation
//! corpus by construction, then frozen. The speaker encoder learns identity
//! through a classification head that is stripped after training; its
//! penultimate layer doubles as the timbre feature extractor.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, Corpus, CorpusSpec, Emotion, GroundTruthContour, Record, Split};
use crate::error::{Error, Result};
use crate::metrics::{contour_stats, PROFILE_DIM, STATS_DIM};
use crate::num::checkpoint;
use crate::num::nn::{linear, Binding, Params};
use crate::num::optim::{cosine_lr, AdamConfig, AdamW};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::{cosine, Tensor};
use crate::rng::{shuffled_indices, Seed};
use crate::timbre::{ContourEmbedder, TIMBRE_DIM};

/// Width of the speaker verification embedding.
pub const SPEAKER_EMBED_DIM: usize = 192;
const SPEAKER_H1: usize = 64;
const EMOTION_H1: usize = 128;
const EMOTION_H2: usize = 64;

/// Shape of the internally generated encoder corpus. More characters than
/// the evaluation corpus so the encoders see a wider slice of profile space.
const ENC_CHARACTERS: usize = 16;
const ENC_UTTERANCES: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    /// Speaker identity converges quickly; emotion needs the longer budget
    /// because its cues are residuals on top of per-character baselines.
    pub speaker_epochs: usize,
    pub emotion_epochs: usize,
    /// Linear regression from the frozen timbre feature back to the contour
    /// profile; cheap, so the budget is generous.
    pub readout_epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            speaker_epochs: 60,
            emotion_epochs: 300,
            readout_epochs: 80,
            lr: 3e-3,
            lr_floor: 1e-4,
            batch_size: 32,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speaker_epochs == 0
            || self.emotion_epochs == 0
            || self.readout_epochs == 0
            || self.batch_size == 0
        {
            return Err(Error::Config("encoder epochs and batch_size must be positive".into()));
        }
        if self.lr <= 0.0 || self.lr_floor < 0.0 {
            return Err(Error::Config("encoder lr must be positive".into()));
        }
        Ok(())
    }
}

/// Speaker identity encoder: stats -> 64 -> 256 -> 192. The 256-wide
/// penultimate activation is the timbre feature; the final linear output,
/// unit-normalized, is the verification embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEncoder {
    pub params: Params,
}

/// Speaker trunk; returns (penultimate 256-wide activation, raw 192-wide
/// output).
fn speaker_forward(tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<(Var, Var)> {
    let h1 = linear(tape, bind, "l1", x)?;
    let h1 = tape.gelu(h1);
    let h2 = linear(tape, bind, "l2", h1)?;
    let h2 = tape.gelu(h2);
    let out = linear(tape, bind, "l3", h2)?;
    Ok((h2, out))
}

/// Emotion trunk is deeper than the speaker trunk: the label lives in
/// residuals relative to each character's baseline, which takes an extra
/// composition step to express.
fn emotion_forward(tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
    let h = linear(tape, bind, "l1", x)?;
    let h = tape.gelu(h);
    let h = linear(tape, bind, "l2", h)?;
    let h = tape.gelu(h);
    linear(tape, bind, "l3", h)
}

impl SpeakerEncoder {
    fn init_params(rng: &mut rand_chacha::ChaCha8Rng) -> Params {
        let mut p = Params::new();
        p.init_linear(rng, "l1", STATS_DIM, SPEAKER_H1);
        p.init_linear(rng, "l2", SPEAKER_H1, TIMBRE_DIM);
        p.init_linear(rng, "l3", TIMBRE_DIM, SPEAKER_EMBED_DIM);
        p
    }

    fn forward_stats(&self, stats: &[f64; STATS_DIM]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.params);
        let x = tape.leaf(Tensor::row_vec(stats.to_vec()));
        let (penult, out) = speaker_forward(&mut tape, &mut bind, x)?;
        Ok((tape.value(penult).row(0).to_vec(), tape.value(out).row(0).to_vec()))
    }

    /// Unit-normalized 192-wide verification embedding.
    pub fn embed(&self, contour: &GroundTruthContour) -> Result<Vec<f64>> {
        let (_, mut out) = self.forward_stats(&contour_stats(contour)?)?;
        let norm = crate::num::tensor::norm(&out);
        if norm == 0.0 {
            return Err(Error::domain("speaker_encoder", "zero-norm embedding"));
        }
        for v in out.iter_mut() {
            *v /= norm;
        }
        Ok(out)
    }

    pub fn digest(&self) -> String {
        checkpoint::digest(&params_map(&self.params))
    }
}

impl ContourEmbedder for SpeakerEncoder {
    fn embed_dim(&self) -> usize {
        TIMBRE_DIM
    }

    fn embed_contour(&self, contour: &GroundTruthContour) -> Result<Vec<f64>> {
        Ok(self.forward_stats(&contour_stats(contour)?)?.0)
    }
}

/// Emotion recognizer: stats -> 64 -> 8 logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionClassifier {
    pub params: Params,
}

impl EmotionClassifier {
    fn init_params(rng: &mut rand_chacha::ChaCha8Rng) -> Params {
        let mut p = Params::new();
        p.init_linear(rng, "l1", STATS_DIM, EMOTION_H1);
        p.init_linear(rng, "l2", EMOTION_H1, EMOTION_H2);
        p.init_linear(rng, "l3", EMOTION_H2, Emotion::COUNT);
        p
    }

    pub fn logits(&self, contour: &GroundTruthContour) -> Result<Vec<f64>> {
        let stats = contour_stats(contour)?;
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.params);
        let x = tape.leaf(Tensor::row_vec(stats.to_vec()));
        let out = emotion_forward(&mut tape, &mut bind, x)?;
        Ok(tape.value(out).row(0).to_vec())
    }

    /// Softmax over the logits; sums to 1.
    pub fn probabilities(&self, contour: &GroundTruthContour) -> Result<Vec<f64>> {
        let logits = self.logits(contour)?;
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.iter().map(|&e| e / z).collect())
    }

    /// Argmax prediction, ties toward the lower class index.
    pub fn predict(&self, contour: &GroundTruthContour) -> Result<Emotion> {
        let logits = self.logits(contour)?;
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        Emotion::from_index(best)
    }

    pub fn digest(&self) -> String {
        checkpoint::digest(&params_map(&self.params))
    }
}

/// Linear map from the timbre feature (the speaker trunk's penultimate
/// activation) back to the contour profile, so a quantized timbre code can
/// seed a base contour at synthesis time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimbreReadout {
    pub params: Params,
}

impl TimbreReadout {
    pub fn decode(&self, embedding: &[f64]) -> Result<[f64; PROFILE_DIM]> {
        let w = self.params.get("map.w")?;
        let b = self.params.get("map.b")?;
        let (d_in, d_out) = w.shape();
        if embedding.len() != d_in || d_out != PROFILE_DIM {
            return Err(Error::shape(
                "timbre_readout",
                format!("embedding of {} for a {d_in}->{d_out} map", embedding.len()),
            ));
        }
        let mut out = [0.0; PROFILE_DIM];
        for (j, slot) in out.iter_mut().enumerate() {
            let mut acc = b.row(0)[j];
            for (i, &e) in embedding.iter().enumerate() {
                acc += e * w.row(i)[j];
            }
            *slot = acc;
        }
        Ok(out)
    }

    pub fn digest(&self) -> String {
        checkpoint::digest(&params_map(&self.params))
    }
}

fn params_map(p: &Params) -> BTreeMap<String, Tensor> {
    p.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Both encoders plus the timbre readout after training, frozen, with their
/// held-out diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoders {
    pub speaker: SpeakerEncoder,
    pub emotion: EmotionClassifier,
    pub readout: TimbreReadout,
    /// Mean same-character cosine minus mean cross-character cosine on the
    /// encoder corpus val split.
    pub speaker_margin: f64,
    /// Emotion accuracy on the encoder corpus val split.
    pub emotion_accuracy: f64,
    /// Mean squared profile reconstruction error on the val split.
    pub readout_mse: f64,
}

#[derive(Serialize, Deserialize)]
struct FrozenMeta {
    kind: String,
    speaker_margin: f64,
    emotion_accuracy: f64,
    readout_mse: f64,
}

impl FrozenEncoders {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(FrozenMeta {
            kind: "frozen-encoders".into(),
            speaker_margin: self.speaker_margin,
            emotion_accuracy: self.emotion_accuracy,
            readout_mse: self.readout_mse,
        })?;
        let mut tensors = BTreeMap::new();
        for (k, v) in self.speaker.params.iter() {
            tensors.insert(format!("speaker.{k}"), v.clone());
        }
        for (k, v) in self.emotion.params.iter() {
            tensors.insert(format!("emotion.{k}"), v.clone());
        }
        for (k, v) in self.readout.params.iter() {
            tensors.insert(format!("readout.{k}"), v.clone());
        }
        checkpoint::save(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<FrozenEncoders> {
        let (meta, tensors) = checkpoint::load(path)?;
        let meta: FrozenMeta = serde_json::from_value(meta)?;
        if meta.kind != "frozen-encoders" {
            return Err(Error::Data(format!("{} holds a {:?} checkpoint", path.display(), meta.kind)));
        }
        let mut speaker = BTreeMap::new();
        let mut emotion = BTreeMap::new();
        let mut readout = BTreeMap::new();
        for (k, v) in tensors {
            if let Some(rest) = k.strip_prefix("speaker.") {
                speaker.insert(rest.to_string(), v);
            } else if let Some(rest) = k.strip_prefix("emotion.") {
                emotion.insert(rest.to_string(), v);
            } else if let Some(rest) = k.strip_prefix("readout.") {
                readout.insert(rest.to_string(), v);
            } else {
                return Err(Error::Data(format!("unexpected tensor {k} in encoder checkpoint")));
            }
        }
        Ok(FrozenEncoders {
            speaker: SpeakerEncoder { params: Params::from_map(speaker) },
            emotion: EmotionClassifier { params: Params::from_map(emotion) },
            readout: TimbreReadout { params: Params::from_map(readout) },
            speaker_margin: meta.speaker_margin,
            emotion_accuracy: meta.emotion_accuracy,
            readout_mse: meta.readout_mse,
        })
    }
}

/// Deterministic encoder corpus for a given evaluation corpus seed: a fresh
/// seed drawn from a dedicated substream and a renamed character space so the
/// two corpora cannot collide.
pub fn encoder_corpus(eval_seed: u64) -> Result<Corpus> {
    let mut rng = Seed(eval_seed).stream("encoder-corpus-seed");
    let mut enc_seed: u64 = rng.gen();
    if enc_seed == eval_seed {
        enc_seed = enc_seed.wrapping_add(1);
    }
    let mut corpus = generate_corpus(&CorpusSpec {
        num_characters: ENC_CHARACTERS,
        unseen_characters: 0,
        utterances_per_character: ENC_UTTERANCES,
        seed: enc_seed,
    })?;

    let renames: BTreeMap<String, String> = corpus
        .personas
        .iter()
        .enumerate()
        .map(|(i, p)| (p.character_id.clone(), format!("enc{i:02}")))
        .collect();
    for p in corpus.personas.iter_mut() {
        p.character_id = renames[&p.character_id].clone();
    }
    for r in corpus.records.iter_mut() {
        let old = r.utterance.character_id.clone();
        let new = &renames[&old];
        let suffix = r.utterance.utterance_id.strip_prefix(old.as_str()).ok_or_else(|| {
            Error::Data(format!("utterance id {} not prefixed by {old}", r.utterance.utterance_id))
        })?;
        r.utterance.utterance_id = format!("{new}{suffix}");
        r.utterance.character_id = new.clone();
    }
    corpus.validate()?;
    Ok(corpus)
}

/// Train both encoders on the standard encoder corpus derived from the
/// evaluation corpus seed.
pub fn train_eval_encoders(
    eval_corpus: &Corpus,
    cfg: &EncoderTrainConfig,
    seed: Seed,
) -> Result<FrozenEncoders> {
    let enc = encoder_corpus(eval_corpus.seed)?;
    train_eval_encoders_on(&enc, eval_corpus, cfg, seed)
}

/// Train both encoders on an explicit encoder corpus. Aborts if the encoder
/// corpus shares any character with the evaluation corpus: evaluation must
/// never score with encoders that saw its speakers.
pub fn train_eval_encoders_on(
    enc_corpus: &Corpus,
    eval_corpus: &Corpus,
    cfg: &EncoderTrainConfig,
    seed: Seed,
) -> Result<FrozenEncoders> {
    cfg.validate()?;
    let eval_ids: BTreeSet<&str> =
        eval_corpus.personas.iter().map(|p| p.character_id.as_str()).collect();
    for p in &enc_corpus.personas {
        if eval_ids.contains(p.character_id.as_str()) {
            return Err(Error::Leakage(format!(
                "encoder corpus shares character {} with the evaluation corpus",
                p.character_id
            )));
        }
    }

    let train: Vec<&Record> = enc_corpus.split(Split::Train).collect();
    let val: Vec<&Record> = enc_corpus.split(Split::Val).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("encoder corpus lacks train or val records".into()));
    }

    let char_ids: Vec<&str> = enc_corpus.personas.iter().map(|p| p.character_id.as_str()).collect();
    let char_index: BTreeMap<&str, usize> =
        char_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let train_stats: Vec<[f64; STATS_DIM]> =
        train.iter().map(|r| contour_stats(&r.contour)).collect::<Result<_>>()?;

    let speaker_labels: Vec<usize> =
        train.iter().map(|r| char_index[r.utterance.character_id.as_str()]).collect();
    let emotion_labels: Vec<usize> = train.iter().map(|r| r.utterance.emotion_label.index()).collect();

    // Speaker: classify characters through a temporary head, then strip it so
    // the frozen artifact is the embedding trunk alone.
    let mut sp_params = {
        let mut rng = seed.stream("speaker-init");
        let mut p = SpeakerEncoder::init_params(&mut rng);
        p.init_linear(&mut rng, "head", SPEAKER_EMBED_DIM, char_ids.len());
        p
    };
    train_classifier(
        &mut sp_params,
        &train_stats,
        &speaker_labels,
        char_ids.len(),
        cfg,
        cfg.speaker_epochs,
        seed,
        "speaker",
        |tape, bind, x| {
            let (_, out) = speaker_forward(tape, bind, x)?;
            linear(tape, bind, "head", out)
        },
    )?;
    let mut sp_map = sp_params.into_map();
    sp_map.remove("head.w");
    sp_map.remove("head.b");
    let speaker = SpeakerEncoder { params: Params::from_map(sp_map) };

    // The readout regresses the contour profile back out of the frozen
    // timbre feature, so synthesis can decode a quantized code into stats.
    let readout = {
        let features: Vec<Vec<f64>> = train
            .iter()
            .map(|r| speaker.embed_contour(&r.contour))
            .collect::<Result<_>>()?;
        let targets: Vec<[f64; PROFILE_DIM]> = train_stats
            .iter()
            .map(|s| {
                let mut t = [0.0; PROFILE_DIM];
                t.copy_from_slice(&s[..PROFILE_DIM]);
                t
            })
            .collect();
        TimbreReadout { params: train_readout(&features, &targets, cfg, seed)? }
    };

    let mut em_params = {
        let mut rng = seed.stream("emotion-init");
        EmotionClassifier::init_params(&mut rng)
    };
    train_classifier(
        &mut em_params,
        &train_stats,
        &emotion_labels,
        Emotion::COUNT,
        cfg,
        cfg.emotion_epochs,
        seed,
        "emotion",
        emotion_forward,
    )?;
    let emotion = EmotionClassifier { params: em_params };

    let speaker_margin = speaker_margin(&speaker, &val)?;
    let mut correct = 0usize;
    for r in &val {
        if emotion.predict(&r.contour)? == r.utterance.emotion_label {
            correct += 1;
        }
    }
    let emotion_accuracy = correct as f64 / val.len() as f64;

    let mut readout_mse = 0.0;
    for r in &val {
        let stats = contour_stats(&r.contour)?;
        let decoded = readout.decode(&speaker.embed_contour(&r.contour)?)?;
        for j in 0..PROFILE_DIM {
            let d = decoded[j] - stats[j];
            readout_mse += d * d;
        }
    }
    readout_mse /= (val.len() * PROFILE_DIM) as f64;

    Ok(FrozenEncoders { speaker, emotion, readout, speaker_margin, emotion_accuracy, readout_mse })
}

/// Least-squares fit of the profile readout by minibatch gradient descent.
fn train_readout(
    features: &[Vec<f64>],
    targets: &[[f64; PROFILE_DIM]],
    cfg: &EncoderTrainConfig,
    seed: Seed,
) -> Result<Params> {
    let mut params = {
        let mut rng = seed.stream("readout-init");
        let mut p = Params::new();
        p.init_linear(&mut rng, "map", TIMBRE_DIM, PROFILE_DIM);
        p
    };
    let mut adam = AdamW::new(AdamConfig::default());
    for epoch in 0..cfg.readout_epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_floor, epoch, cfg.readout_epochs);
        let mut order_rng = seed.epoch_stream("readout-shuffle", epoch);
        let order = shuffled_indices(&mut order_rng, features.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut x = Tensor::zeros(batch.len(), TIMBRE_DIM);
            let mut y = Tensor::zeros(batch.len(), PROFILE_DIM);
            for (b, &i) in batch.iter().enumerate() {
                x.row_mut(b).copy_from_slice(&features[i]);
                y.row_mut(b).copy_from_slice(&targets[i]);
            }
            let mut tape = Tape::new();
            let mut bind = Binding::new(&params);
            let xv = tape.leaf(x);
            let yv = tape.leaf(y);
            let pred = linear(&mut tape, &mut bind, "map", xv)?;
            let diff = tape.sub(pred, yv)?;
            let sq = tape.mul(diff, diff)?;
            let per_row = tape.sum_rows(sq);
            let loss = tape.mean(per_row);
            tape.backward(loss)?;
            let grads = bind.grads(&tape);
            adam.step(&mut params, &grads, lr);
        }
    }
    Ok(params)
}

/// Minibatch cross-entropy training shared by both encoders.
#[allow(clippy::too_many_arguments)]
fn train_classifier(
    params: &mut Params,
    stats: &[[f64; STATS_DIM]],
    labels: &[usize],
    classes: usize,
    cfg: &EncoderTrainConfig,
    epochs: usize,
    seed: Seed,
    name: &str,
    forward: impl Fn(&mut Tape, &mut Binding, Var) -> Result<Var>,
) -> Result<()> {
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::domain("train_classifier", "label out of range"));
    }
    let mut adam = AdamW::new(AdamConfig::default());
    for epoch in 0..epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_floor, epoch, epochs);
        let mut order_rng = seed.epoch_stream(&format!("{name}-shuffle"), epoch);
        let order = shuffled_indices(&mut order_rng, stats.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut x = Tensor::zeros(batch.len(), STATS_DIM);
            let mut onehot = Tensor::zeros(batch.len(), classes);
            for (b, &i) in batch.iter().enumerate() {
                x.row_mut(b).copy_from_slice(&stats[i]);
                onehot.row_mut(b)[labels[i]] = 1.0;
            }
            let mut tape = Tape::new();
            let mut bind = Binding::new(params);
            let xv = tape.leaf(x);
            let logits = forward(&mut tape, &mut bind, xv)?;
            let oh = tape.leaf(onehot);
            let lse = tape.logsumexp_rows(logits);
            let picked = tape.mul(logits, oh)?;
            let picked = tape.sum_rows(picked);
            let diff = tape.sub(lse, picked)?;
            let loss = tape.mean(diff);
            tape.backward(loss)?;
            let grads = bind.grads(&tape);
            adam.step(params, &grads, lr);
        }
    }
    Ok(())
}

/// Mean same-character cosine minus mean cross-character cosine over all
/// embedding pairs of the given records.
fn speaker_margin(speaker: &SpeakerEncoder, records: &[&Record]) -> Result<f64> {
    let embeds: Vec<(&str, Vec<f64>)> = records
        .iter()
        .map(|r| Ok((r.utterance.character_id.as_str(), speaker.embed(&r.contour)?)))
        .collect::<Result<_>>()?;
    let (mut same, mut same_n) = (0.0, 0usize);
    let (mut diff, mut diff_n) = (0.0, 0usize);
    for i in 0..embeds.len() {
        for j in (i + 1)..embeds.len() {
            let c = cosine(&embeds[i].1, &embeds[j].1);
            if embeds[i].0 == embeds[j].0 {
                same += c;
                same_n += 1;
            } else {
                diff += c;
                diff_n += 1;
            }
        }
    }
    if same_n == 0 || diff_n == 0 {
        return Err(Error::Data("val split lacks same- or cross-character pairs".into()));
    }
    Ok(same / same_n as f64 - diff / diff_n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_corpus() -> Corpus {
        generate_corpus(&CorpusSpec {
            num_characters: 4,
            unseen_characters: 1,
            utterances_per_character: 10,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn encoder_corpus_is_disjoint_and_deterministic() {
        let a = encoder_corpus(5).unwrap();
        let b = encoder_corpus(5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.seed, 5);
        assert!(a.personas.iter().all(|p| p.character_id.starts_with("enc")));
        assert_eq!(a.personas.len(), ENC_CHARACTERS);
        for r in &a.records {
            assert!(r.utterance.utterance_id.starts_with(&r.utterance.character_id));
        }
        let c = encoder_corpus(6).unwrap();
        assert_ne!(a.seed, c.seed);
    }

    #[test]
    fn character_overlap_aborts_with_leakage() {
        let eval = eval_corpus();
        match train_eval_encoders_on(&eval, &eval, &EncoderTrainConfig::default(), Seed(1)) {
            Err(Error::Leakage(_)) => {}
            other => panic!("expected leakage error, got {other:?}"),
        }
    }

    #[test]
    fn trained_encoders_meet_separability_floors() {
        let eval = eval_corpus();
        let enc = train_eval_encoders(&eval, &EncoderTrainConfig::default(), Seed(3)).unwrap();
        println!(
            "speaker margin {:.3}, emotion accuracy {:.3}, readout mse {:.5}",
            enc.speaker_margin, enc.emotion_accuracy, enc.readout_mse
        );
        assert!(
            enc.speaker_margin >= 0.2,
            "speaker margin {} below floor",
            enc.speaker_margin
        );
        assert!(
            enc.emotion_accuracy >= 0.8,
            "emotion accuracy {} below floor",
            enc.emotion_accuracy
        );

        // The readout must clearly beat always predicting the global mean
        // profile, otherwise decoded timbre carries no speaker information.
        let corpus = encoder_corpus(eval.seed).unwrap();
        let val: Vec<&Record> = corpus.split(Split::Val).collect();
        let mut mean = [0.0; PROFILE_DIM];
        let stats: Vec<[f64; STATS_DIM]> =
            val.iter().map(|r| contour_stats(&r.contour).unwrap()).collect();
        for s in &stats {
            for j in 0..PROFILE_DIM {
                mean[j] += s[j] / stats.len() as f64;
            }
        }
        let baseline = stats
            .iter()
            .map(|s| {
                (0..PROFILE_DIM).map(|j| (s[j] - mean[j]) * (s[j] - mean[j])).sum::<f64>()
            })
            .sum::<f64>()
            / (stats.len() * PROFILE_DIM) as f64;
        assert!(
            enc.readout_mse < 0.5 * baseline,
            "readout mse {} vs mean-predictor {baseline}",
            enc.readout_mse
        );
    }

    #[test]
    fn training_is_deterministic() {
        let eval = eval_corpus();
        let cfg = EncoderTrainConfig { speaker_epochs: 2, emotion_epochs: 2, ..Default::default() };
        let a = train_eval_encoders(&eval, &cfg, Seed(4)).unwrap();
        let b = train_eval_encoders(&eval, &cfg, Seed(4)).unwrap();
        assert_eq!(a.speaker.digest(), b.speaker.digest());
        assert_eq!(a.emotion.digest(), b.emotion.digest());
        assert_eq!(a.readout.digest(), b.readout.digest());
        assert_eq!(a.speaker_margin, b.speaker_margin);
        assert_eq!(a.readout_mse, b.readout_mse);
    }

    #[test]
    fn embeddings_have_contracted_shapes() {
        let eval = eval_corpus();
        let cfg = EncoderTrainConfig { speaker_epochs: 1, emotion_epochs: 1, ..Default::default() };
        let enc = train_eval_encoders(&eval, &cfg, Seed(7)).unwrap();
        let contour = &eval.records[0].contour;

        let e = enc.speaker.embed(contour).unwrap();
        assert_eq!(e.len(), SPEAKER_EMBED_DIM);
        let norm = crate::num::tensor::norm(&e);
        assert!((norm - 1.0).abs() < 1e-12, "norm {norm}");

        let timbre_feat = enc.speaker.embed_contour(contour).unwrap();
        assert_eq!(timbre_feat.len(), enc.speaker.embed_dim());
        assert_eq!(enc.speaker.embed_dim(), TIMBRE_DIM);

        let probs = enc.emotion.probabilities(contour).unwrap();
        assert_eq!(probs.len(), Emotion::COUNT);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(enc.emotion.logits(contour).unwrap().len() == Emotion::COUNT);
    }

    #[test]
    fn frozen_round_trip_preserves_params_and_digests() {
        let eval = eval_corpus();
        let cfg = EncoderTrainConfig { speaker_epochs: 1, emotion_epochs: 1, ..Default::default() };
        let enc = train_eval_encoders(&eval, &cfg, Seed(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoders.ckpt");
        enc.save(&path).unwrap();
        let loaded = FrozenEncoders::load(&path).unwrap();
        assert_eq!(enc, loaded);
        assert_eq!(enc.speaker.digest(), loaded.speaker.digest());
        assert_eq!(enc.emotion.digest(), loaded.emotion.digest());

        std::fs::write(&path, b"DTCKPT01junk").unwrap();
        assert!(FrozenEncoders::load(&path).is_err());
    }
}
