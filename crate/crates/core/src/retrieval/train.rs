//! Projection-head training: a symmetric in-batch contrastive objective
//! pulls each character's text embedding toward its own audio clips and
//! away from the other characters in the batch, in both directions. Only
//! seen characters may appear; the guard sits at batch construction.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterModel;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::SpeakerEncoder;
use crate::num::nn::{linear, Binding, Params};
use crate::num::optim::{cosine_lr, AdamConfig, AdamW};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::{dot, Tensor};
use crate::retrieval::{clip_features, Modality, ProjectionHead, RetrievalIndex, SharedEmbedding, AUDIO_INPUT_DIM};
use crate::rng::{shuffled_indices, Seed};
use crate::timbre::SQCodebook;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for ProjectionTrainConfig {
    fn default() -> Self {
        ProjectionTrainConfig { epochs: 40, lr: 3e-3, lr_floor: 1e-4, batch_size: 16, tau: 0.07 }
    }
}

impl ProjectionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("projection epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "projection batch_size must be at least 2 to form negatives".into(),
            ));
        }
        if self.lr <= 0.0 || self.lr_floor < 0.0 {
            return Err(Error::Config("projection lr must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// One matched training example: a character's description encoding and the
/// audio features of one of its clips.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub character_id: String,
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProjectionStage {
    pub head: ProjectionHead,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Extract matched text/audio features for every train-split record. The
/// description encoding is shared by all clips of a character.
pub fn build_pairs(
    corpus: &Corpus,
    adapter: &AdapterModel,
    adapter_params: &Params,
    speaker: &SpeakerEncoder,
    codebook: &SQCodebook,
) -> Result<Vec<PairExample>> {
    let mut text_cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut pairs = Vec::new();
    for r in corpus.split(Split::Train) {
        let cid = r.utterance.character_id.as_str();
        if !text_cache.contains_key(cid) {
            let description = &corpus.persona(cid)?.description;
            text_cache.insert(cid, adapter.encode_description(adapter_params, description)?);
        }
        pairs.push(PairExample {
            character_id: cid.to_string(),
            text: text_cache[cid].clone(),
            audio: clip_features(speaker, codebook, &r.contour)?,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data("corpus has no train-split records".into()));
    }
    Ok(pairs)
}

/// Train the projection head on a corpus; unseen characters are excluded by
/// the split discipline and re-checked at every batch.
pub fn train_projection(
    corpus: &Corpus,
    adapter: &AdapterModel,
    adapter_params: &Params,
    speaker: &SpeakerEncoder,
    codebook: &SQCodebook,
    cfg: &ProjectionTrainConfig,
    seed: Seed,
) -> Result<ProjectionStage> {
    let pairs = build_pairs(corpus, adapter, adapter_params, speaker, codebook)?;
    let unseen: BTreeSet<String> =
        corpus.unseen_characters().iter().map(|p| p.character_id.clone()).collect();
    train_projection_on(&pairs, &unseen, cfg, seed)
}

/// Core loop over prebuilt pairs. Every batch holds at most one clip per
/// character, so all in-batch non-matches are true negatives.
pub fn train_projection_on(
    pairs: &[PairExample],
    unseen: &BTreeSet<String>,
    cfg: &ProjectionTrainConfig,
    seed: Seed,
) -> Result<ProjectionStage> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no projection training pairs".into()));
    }
    let text_dim = pairs[0].text.len();
    for p in pairs {
        if p.text.len() != text_dim || p.audio.len() != AUDIO_INPUT_DIM {
            return Err(Error::shape(
                "train_projection",
                format!(
                    "pair for {} has text {} / audio {}, expected {text_dim} / {AUDIO_INPUT_DIM}",
                    p.character_id,
                    p.text.len(),
                    p.audio.len()
                ),
            ));
        }
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.character_id.as_str()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Config(
            "projection training needs at least 2 characters to form negatives".into(),
        ));
    }
    let chars: Vec<&str> = groups.keys().copied().collect();
    let rounds = groups.values().map(Vec::len).max().expect("nonempty groups");

    let mut head = ProjectionHead::init(&mut seed.stream("projection-init"), text_dim);
    let mut adam = AdamW::new(AdamConfig::default());
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_floor, epoch, cfg.epochs);
        let mut rng = seed.epoch_stream("projection-shuffle", epoch);
        let perms: Vec<Vec<usize>> =
            chars.iter().map(|c| shuffled_indices(&mut rng, groups[c].len())).collect();
        let mut sum = 0.0;
        let mut batches = 0usize;
        for round in 0..rounds {
            let order = shuffled_indices(&mut rng, chars.len());
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue; // a lone row has no negative
                }
                let mut text = Tensor::zeros(chunk.len(), text_dim);
                let mut audio = Tensor::zeros(chunk.len(), AUDIO_INPUT_DIM);
                for (b, &ci) in chunk.iter().enumerate() {
                    let c = chars[ci];
                    if unseen.contains(c) {
                        return Err(Error::Leakage(format!(
                            "unseen character {c} reached a projection training batch"
                        )));
                    }
                    let clip_rows = &groups[c];
                    let pair = &pairs[clip_rows[perms[ci][round % clip_rows.len()]]];
                    text.row_mut(b).copy_from_slice(&pair.text);
                    audio.row_mut(b).copy_from_slice(&pair.audio);
                }
                let mut tape = Tape::new();
                let mut bind = Binding::new(&head.params);
                let t = tape.leaf(text);
                let a = tape.leaf(audio);
                let loss = projection_batch_loss(&mut tape, &mut bind, t, a, cfg.tau)?;
                sum += tape.value(loss).scalar()?;
                batches += 1;
                tape.backward(loss)?;
                let grads = bind.grads(&tape);
                adam.step(&mut head.params, &grads, lr);
            }
        }
        epoch_loss.push(sum / batches as f64);
    }
    Ok(ProjectionStage { head, epoch_loss })
}

/// Symmetric contrastive batch loss on the tape. Row i of `text` matches
/// row i of `audio`; every other row is a negative, scored by cosine at
/// temperature `tau`, averaged over both retrieval directions.
pub fn projection_batch_loss(
    tape: &mut Tape,
    bind: &mut Binding,
    text: Var,
    audio: Var,
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::domain("projection_batch_loss", format!("tau {tau} must be positive")));
    }
    let (bt, _) = tape.value(text).shape();
    let (ba, _) = tape.value(audio).shape();
    if bt != ba || bt < 2 {
        return Err(Error::shape(
            "projection_batch_loss",
            format!("text batch {bt} vs audio batch {ba}, need matching >= 2"),
        ));
    }
    let t = linear(tape, bind, "text", text)?;
    let tn = tape.l2norm_rows(t);
    let t = tape.div_cols(t, tn)?;
    let a = linear(tape, bind, "audio", audio)?;
    let an = tape.l2norm_rows(a);
    let a = tape.div_cols(a, an)?;

    let at = tape.transpose(a);
    let sims = tape.matmul(t, at)?;
    let sims = tape.scale(sims, 1.0 / tau);
    let eye = tape.leaf(Tensor::from_fn(bt, bt, |i, j| if i == j { 1.0 } else { 0.0 }));

    let direction = |tape: &mut Tape, s: Var| -> Result<Var> {
        let lse = tape.logsumexp_rows(s);
        let picked = tape.mul(s, eye)?;
        let picked = tape.sum_rows(picked);
        let diff = tape.sub(lse, picked)?;
        Ok(tape.mean(diff))
    };
    let text_to_audio = direction(tape, sims)?;
    let sims_t = tape.transpose(sims);
    let audio_to_text = direction(tape, sims_t)?;
    let total = tape.add(text_to_audio, audio_to_text)?;
    Ok(tape.scale(total, 0.5))
}

/// Mean text-to-clip cosine for every (query character, gallery character)
/// pair, rows and columns in sorted character order.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub character_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl AlignmentMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.character_ids.len();
        (0..n).map(|i| self.values[i][i]).sum::<f64>() / n as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.character_ids.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.values[i][j];
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }

    pub fn contrast(&self) -> f64 {
        self.diagonal_mean() - self.off_diagonal_mean()
    }

    /// Fraction of (query, other character) pairs where the query's own
    /// column scores strictly higher.
    pub fn diagonal_win_rate(&self) -> f64 {
        let n = self.character_ids.len();
        let mut wins = 0usize;
        for i in 0..n {
            for j in 0..n {
                if i != j && self.values[i][i] > self.values[i][j] {
                    wins += 1;
                }
            }
        }
        wins as f64 / (n * (n - 1)) as f64
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("query_character");
        for id in &self.character_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.character_ids.iter().enumerate() {
            out.push_str(id);
            for v in &self.values[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Cross-modal affinity between text queries (one per character) and the
/// gallery, restricted to the query characters.
pub fn alignment_matrix(
    queries: &[SharedEmbedding],
    index: &RetrievalIndex,
) -> Result<AlignmentMatrix> {
    if queries.len() < 2 {
        return Err(Error::domain(
            "alignment_matrix",
            "need at least 2 query characters to contrast diagonal and off-diagonal",
        ));
    }
    let mut by_char: BTreeMap<&str, &SharedEmbedding> = BTreeMap::new();
    for q in queries {
        q.validate()?;
        if q.modality != Modality::Text {
            return Err(Error::domain(
                "alignment_matrix",
                format!("query for {} is not text-modality", q.character_id),
            ));
        }
        if by_char.insert(q.character_id.as_str(), q).is_some() {
            return Err(Error::domain(
                "alignment_matrix",
                format!("duplicate query character {}", q.character_id),
            ));
        }
    }
    let mut clips: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for e in &index.entries {
        let cid = e.embedding.character_id.as_str();
        if by_char.contains_key(cid) {
            clips.entry(cid).or_default().push(&e.embedding.vector);
        }
    }
    for &id in by_char.keys() {
        if !clips.contains_key(id) {
            return Err(Error::domain(
                "alignment_matrix",
                format!("query character {id} has no gallery clips"),
            ));
        }
    }
    let character_ids: Vec<String> = by_char.keys().map(|s| s.to_string()).collect();
    let mut values = Vec::with_capacity(character_ids.len());
    for q in by_char.values() {
        let mut row = Vec::with_capacity(character_ids.len());
        for gid in by_char.keys() {
            let cs = &clips[gid];
            row.push(cs.iter().map(|c| dot(&q.vector, c)).sum::<f64>() / cs.len() as f64);
        }
        values.push(row);
    }
    Ok(AlignmentMatrix { character_ids, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusSpec, Record};
    use crate::retrieval::test_support::world;
    use crate::retrieval::{retrieval_metrics, CrossModalIndexer, IndexEntry, SHARED_DIM};
    use crate::rng::next_normal;

    fn quick_cfg() -> ProjectionTrainConfig {
        ProjectionTrainConfig::default()
    }

    /// Gallery of unseen-character test clips plus one text query per
    /// unseen character; returns the alignment matrix and mAP.
    fn unseen_eval(corpus: &Corpus, indexer: &CrossModalIndexer) -> (AlignmentMatrix, f64) {
        let unseen: BTreeSet<&str> =
            corpus.unseen_characters().iter().map(|p| p.character_id.as_str()).collect();
        let records: Vec<&Record> = corpus
            .split(Split::Test)
            .filter(|r| unseen.contains(r.utterance.character_id.as_str()))
            .collect();
        let index = indexer.index_records(records.iter().copied()).unwrap();
        let queries: Vec<SharedEmbedding> = corpus
            .unseen_characters()
            .iter()
            .map(|p| indexer.embed_text_query(&p.description, &p.character_id).unwrap())
            .collect();
        let matrix = alignment_matrix(&queries, &index).unwrap();
        let scores = retrieval_metrics(&index, &queries).unwrap();
        (matrix, scores.map)
    }

    #[test]
    fn trained_projection_aligns_unseen_characters() {
        let spec = CorpusSpec {
            num_characters: 12,
            unseen_characters: 3,
            utterances_per_character: 20,
            seed: 17,
        };
        let (corpus, mut indexer) = world(&spec, Seed(51));
        let (untrained_matrix, untrained_map) = unseen_eval(&corpus, &indexer);

        let stage = train_projection(
            &corpus,
            &indexer.adapter,
            &indexer.adapter_params,
            &indexer.speaker,
            &indexer.codebook,
            &quick_cfg(),
            Seed(52),
        )
        .unwrap();
        assert!(
            stage.epoch_loss.last().unwrap() < stage.epoch_loss.first().unwrap(),
            "loss did not decrease: {:?}",
            stage.epoch_loss
        );
        indexer.projection = stage.head;
        let (matrix, map) = unseen_eval(&corpus, &indexer);
        println!(
            "untrained contrast {:.3} map {:.3}; trained contrast {:.3} map {:.3} win rate {:.2}",
            untrained_matrix.contrast(),
            untrained_map,
            matrix.contrast(),
            map,
            matrix.diagonal_win_rate()
        );
        assert!(
            matrix.contrast() > untrained_matrix.contrast(),
            "training did not raise the diagonal contrast"
        );
        assert!(matrix.contrast() >= 0.1, "contrast {} below target", matrix.contrast());
        assert!(matrix.diagonal_win_rate() >= 0.8, "win rate {}", matrix.diagonal_win_rate());
        assert!(map > untrained_map, "mAP {map} did not improve on untrained {untrained_map}");
    }

    #[test]
    fn pairs_come_from_the_train_split_only() {
        let spec = CorpusSpec {
            num_characters: 5,
            unseen_characters: 1,
            utterances_per_character: 12,
            seed: 11,
        };
        let (corpus, indexer) = world(&spec, Seed(53));
        let pairs = build_pairs(
            &corpus,
            &indexer.adapter,
            &indexer.adapter_params,
            &indexer.speaker,
            &indexer.codebook,
        )
        .unwrap();
        assert_eq!(pairs.len(), corpus.split(Split::Train).count());
        let unseen: BTreeSet<String> =
            corpus.unseen_characters().iter().map(|p| p.character_id.clone()).collect();
        assert!(pairs.iter().all(|p| !unseen.contains(&p.character_id)));
        assert!(pairs.iter().all(|p| p.audio.len() == AUDIO_INPUT_DIM));
        // All clips of one character share the text encoding.
        let first = pairs.iter().find(|p| p.character_id == pairs[0].character_id).unwrap();
        assert!(pairs
            .iter()
            .filter(|p| p.character_id == pairs[0].character_id)
            .all(|p| p.text == first.text));
    }

    fn synthetic_pairs(chars: usize, clips: usize, seed: Seed) -> Vec<PairExample> {
        let mut rng = seed.stream("synthetic-pairs");
        let mut pairs = Vec::new();
        for c in 0..chars {
            let text: Vec<f64> = (0..24).map(|_| next_normal(&mut rng)).collect();
            for _ in 0..clips {
                let audio: Vec<f64> =
                    (0..AUDIO_INPUT_DIM).map(|_| next_normal(&mut rng) + c as f64).collect();
                pairs.push(PairExample {
                    character_id: format!("syn{c}"),
                    text: text.clone(),
                    audio,
                });
            }
        }
        pairs
    }

    #[test]
    fn unseen_character_in_a_batch_aborts_with_leakage() {
        let pairs = synthetic_pairs(3, 2, Seed(54));
        let unseen: BTreeSet<String> = ["syn1".to_string()].into();
        let cfg = ProjectionTrainConfig { epochs: 1, ..Default::default() };
        match train_projection_on(&pairs, &unseen, &cfg, Seed(55)) {
            Err(Error::Leakage(msg)) => assert!(msg.contains("syn1"), "{msg}"),
            other => panic!("expected leakage abort, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let pairs = synthetic_pairs(3, 3, Seed(56));
        let cfg = ProjectionTrainConfig { epochs: 3, ..Default::default() };
        let none = BTreeSet::new();
        let a = train_projection_on(&pairs, &none, &cfg, Seed(57)).unwrap();
        let b = train_projection_on(&pairs, &none, &cfg, Seed(57)).unwrap();
        assert_eq!(a.head.digest(), b.head.digest());
        assert_eq!(a.epoch_loss, b.epoch_loss);
        let c = train_projection_on(&pairs, &none, &cfg, Seed(58)).unwrap();
        assert_ne!(a.head.digest(), c.head.digest());
    }

    #[test]
    fn degenerate_training_inputs_are_rejected() {
        let cfg = ProjectionTrainConfig::default();
        let none = BTreeSet::new();
        assert!(train_projection_on(&[], &none, &cfg, Seed(1)).is_err());

        let one_char = synthetic_pairs(1, 3, Seed(2));
        assert!(train_projection_on(&one_char, &none, &cfg, Seed(1)).is_err());

        let mut ragged = synthetic_pairs(2, 2, Seed(3));
        ragged[1].audio.pop();
        assert!(train_projection_on(&ragged, &none, &cfg, Seed(1)).is_err());

        let bad = ProjectionTrainConfig { batch_size: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ProjectionTrainConfig { tau: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_loss_gradients_match_central_differences() {
        let seed = Seed(59);
        let head = ProjectionHead::init(&mut seed.stream("head"), 24);
        let mut data_rng = seed.stream("data");
        let mut text = Tensor::zeros(5, 24);
        let mut audio = Tensor::zeros(5, AUDIO_INPUT_DIM);
        crate::rng::fill_normal(&mut data_rng, &mut text.data, 1.0);
        crate::rng::fill_normal(&mut data_rng, &mut audio.data, 1.0);

        let run = |params: &Params, want_grads: bool| {
            let mut tape = Tape::new();
            let mut bind = Binding::new(params);
            let t = tape.leaf(text.clone());
            let a = tape.leaf(audio.clone());
            let loss = projection_batch_loss(&mut tape, &mut bind, t, a, 0.07).unwrap();
            let value = tape.value(loss).scalar().unwrap();
            if want_grads {
                tape.backward(loss).unwrap();
                (value, bind.grads(&tape))
            } else {
                (value, BTreeMap::new())
            }
        };
        let (_, grads) = run(&head.params, true);
        let mut check_rng = seed.stream("check");
        let report = crate::num::gradcheck::check(
            &head.params,
            &grads,
            |p| Ok(run(p, false).0),
            &mut check_rng,
            40,
            &Default::default(),
        )
        .unwrap();
        assert!(report.tight_fraction() >= 0.95, "{report:?}");
    }

    #[test]
    fn alignment_matrix_hand_values_and_errors() {
        let unit = |axis: usize, modality: Modality, cid: &str| {
            let mut v = vec![0.0; SHARED_DIM];
            v[axis] = 1.0;
            SharedEmbedding { vector: v, modality, character_id: cid.into() }
        };
        let index = RetrievalIndex::build(vec![
            IndexEntry { clip_id: "a0".into(), embedding: unit(0, Modality::Audio, "charA") },
            IndexEntry { clip_id: "a1".into(), embedding: unit(2, Modality::Audio, "charA") },
            IndexEntry { clip_id: "b0".into(), embedding: unit(1, Modality::Audio, "charB") },
        ])
        .unwrap();
        let q_a = unit(0, Modality::Text, "charA");
        let q_b = unit(1, Modality::Text, "charB");
        let m = alignment_matrix(&[q_a.clone(), q_b.clone()], &index).unwrap();
        assert_eq!(m.character_ids, ["charA", "charB"]);
        assert_eq!(m.values, vec![vec![0.5, 0.0], vec![0.0, 1.0]]);
        assert!((m.diagonal_mean() - 0.75).abs() < 1e-15);
        assert_eq!(m.off_diagonal_mean(), 0.0);
        assert!((m.contrast() - 0.75).abs() < 1e-15);
        assert_eq!(m.diagonal_win_rate(), 1.0);
        assert_eq!(m.csv(), "query_character,charA,charB\ncharA,0.5,0\ncharB,0,1\n");

        assert!(alignment_matrix(&[q_a.clone()], &index).is_err());
        assert!(alignment_matrix(&[q_a.clone(), q_a.clone()], &index).is_err());
        let not_text = unit(3, Modality::Audio, "charB");
        assert!(alignment_matrix(&[q_a.clone(), not_text], &index).is_err());
        let stranger = unit(3, Modality::Text, "charC");
        assert!(alignment_matrix(&[q_a, stranger], &index).is_err());
    }
}
