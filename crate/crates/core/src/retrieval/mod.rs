//! Cross-modal persona retrieval. Text persona descriptions and rendered
//! contours are projected into one 256-d space: the text side reuses the
//! adapter's description encoding, the audio side concatenates the quantized
//! timbre embedding with the contour statistics vector. Retrieval is exact
//! cosine search over a small immutable gallery.

pub mod rank;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterModel;
use crate::corpus::{GroundTruthContour, Record};
use crate::error::{Error, Result};
use crate::metrics::{contour_stats, SpeakerEncoder, STATS_DIM};
use crate::num::checkpoint;
use crate::num::nn::{linear, Binding, Params};
use crate::num::tape::Tape;
use crate::num::tensor::{dot, norm, Tensor};
use crate::timbre::{quantize, SQCodebook, TIMBRE_DIM};

pub use rank::{average_precision, rank_metrics, retrieval_metrics, RetrievalScores};
pub use train::{
    alignment_matrix, build_pairs, projection_batch_loss, train_projection, train_projection_on,
    AlignmentMatrix, PairExample, ProjectionStage, ProjectionTrainConfig,
};

/// Width of the shared retrieval space.
pub const SHARED_DIM: usize = 256;
/// Width of the audio-side projection input: quantized timbre embedding
/// plus the contour statistics vector.
pub const AUDIO_INPUT_DIM: usize = TIMBRE_DIM + STATS_DIM;

const UNIT_NORM_TOL: f64 = 1e-9;

/// Audio-side projection input for one clip: its timbre embedding snapped to
/// the codebook, then the contour statistics. Training pairs and gallery
/// items must agree on this layout, so both go through here.
pub fn clip_features(
    speaker: &SpeakerEncoder,
    codebook: &SQCodebook,
    contour: &GroundTruthContour,
) -> Result<Vec<f64>> {
    use crate::timbre::ContourEmbedder;
    let raw = speaker.embed_contour(contour)?;
    let mut features = quantize(&raw, codebook).quantized;
    features.extend_from_slice(&contour_stats(contour)?);
    Ok(features)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
}

/// One point in the shared space. Vectors are unit norm by construction;
/// `character_id` carries the relevance label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedEmbedding {
    pub vector: Vec<f64>,
    pub modality: Modality,
    pub character_id: String,
}

impl SharedEmbedding {
    /// Normalize `vector` onto the unit sphere and tag it.
    pub fn unit_normalized(
        mut vector: Vec<f64>,
        modality: Modality,
        character_id: &str,
    ) -> Result<SharedEmbedding> {
        let n = norm(&vector);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::domain("shared_embedding", format!("vector norm {n}")));
        }
        for v in vector.iter_mut() {
            *v /= n;
        }
        let e = SharedEmbedding { vector, modality, character_id: character_id.to_string() };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vector.len() != SHARED_DIM {
            return Err(Error::shape(
                "shared_embedding",
                format!("{} dims, expected {SHARED_DIM}", self.vector.len()),
            ));
        }
        let n = norm(&self.vector);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::domain("shared_embedding", format!("norm {n} is not 1")));
        }
        if self.character_id.is_empty() {
            return Err(Error::Data("shared embedding lacks a character_id".into()));
        }
        Ok(())
    }
}

/// The two linear maps into the shared space, one per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub params: Params,
}

impl ProjectionHead {
    /// Fresh head. The audio input width is fixed by the feature layout;
    /// the text width follows the adapter's description encoding.
    pub fn init(rng: &mut ChaCha8Rng, text_input_dim: usize) -> ProjectionHead {
        let mut p = Params::new();
        p.init_linear(rng, "text", text_input_dim, SHARED_DIM);
        p.init_linear(rng, "audio", AUDIO_INPUT_DIM, SHARED_DIM);
        ProjectionHead { params: p }
    }

    pub fn text_input_dim(&self) -> Result<usize> {
        Ok(self.params.get("text.w")?.shape().0)
    }

    /// Apply one of the two maps; the result is not yet normalized.
    fn project(&self, side: &str, input: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.params);
        let x = tape.leaf(Tensor::row_vec(input.to_vec()));
        let y = linear(&mut tape, &mut bind, side, x)?;
        Ok(tape.value(y).row(0).to_vec())
    }

    pub fn digest(&self) -> String {
        let map: BTreeMap<String, Tensor> =
            self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        checkpoint::digest(&map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "projection-head" });
        let map: BTreeMap<String, Tensor> =
            self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        checkpoint::save(path, &meta, &map)
    }

    pub fn load(path: &Path) -> Result<ProjectionHead> {
        let (meta, tensors) = checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("projection-head") {
            return Err(Error::Data(format!("{} is not a projection head", path.display())));
        }
        let head = ProjectionHead { params: Params::from_map(tensors) };
        head.params.get("text.w")?;
        head.params.get("audio.w")?;
        Ok(head)
    }
}

/// Everything needed to embed either modality: the frozen adapter for text,
/// the frozen timbre path plus codebook for audio, and the trained
/// projection head.
#[derive(Debug, Clone)]
pub struct CrossModalIndexer {
    pub adapter: AdapterModel,
    pub adapter_params: Params,
    pub speaker: SpeakerEncoder,
    pub codebook: SQCodebook,
    pub projection: ProjectionHead,
}

impl CrossModalIndexer {
    /// Embed a persona description as a text-modality query.
    pub fn embed_text_query(&self, description: &str, character_id: &str) -> Result<SharedEmbedding> {
        let sem = self.adapter.encode_description(&self.adapter_params, description)?;
        let projected = self.projection.project("text", &sem)?;
        SharedEmbedding::unit_normalized(projected, Modality::Text, character_id)
    }

    /// Audio-side projection input for one clip; see [`clip_features`].
    pub fn audio_features(&self, contour: &GroundTruthContour) -> Result<Vec<f64>> {
        clip_features(&self.speaker, &self.codebook, contour)
    }

    /// Embed a rendered contour as an audio-modality gallery item.
    pub fn embed_audio_item(
        &self,
        contour: &GroundTruthContour,
        character_id: &str,
    ) -> Result<SharedEmbedding> {
        let features = self.audio_features(contour)?;
        let projected = self.projection.project("audio", &features)?;
        SharedEmbedding::unit_normalized(projected, Modality::Audio, character_id)
    }

    /// Build a gallery over corpus records; clip ids are utterance ids.
    pub fn index_records<'a>(
        &self,
        records: impl IntoIterator<Item = &'a Record>,
    ) -> Result<RetrievalIndex> {
        let mut entries = Vec::new();
        for r in records {
            entries.push(IndexEntry {
                clip_id: r.utterance.utterance_id.clone(),
                embedding: self.embed_audio_item(&r.contour, &r.utterance.character_id)?,
            });
        }
        RetrievalIndex::build(entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub clip_id: String,
    pub embedding: SharedEmbedding,
}

/// Immutable gallery of audio embeddings, sorted by clip id. Construct
/// through [`RetrievalIndex::build`] or [`RetrievalIndex::load`]; queries
/// never mutate it.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub clip_id: String,
    pub character_id: String,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    kind: String,
    clips: Vec<ClipMeta>,
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    clip_id: String,
    character_id: String,
}

impl RetrievalIndex {
    pub fn build(mut entries: Vec<IndexEntry>) -> Result<RetrievalIndex> {
        entries.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        let index = RetrievalIndex { entries };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Data("retrieval index has no gallery entries".into()));
        }
        for e in &self.entries {
            e.embedding.validate()?;
            if e.embedding.modality != Modality::Audio {
                return Err(Error::Data(format!("gallery clip {} is not audio-modality", e.clip_id)));
            }
        }
        if self.entries.windows(2).any(|w| w[0].clip_id >= w[1].clip_id) {
            return Err(Error::Data("gallery clip ids must be unique and sorted".into()));
        }
        Ok(())
    }

    /// Exact top-k by cosine (dot product on unit vectors), ties broken by
    /// clip id. Asking for more than the gallery returns the full ranking.
    pub fn search(&self, query: &SharedEmbedding, k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::domain("search", "k must be at least 1"));
        }
        if self.entries.is_empty() {
            return Err(Error::Data("retrieval index has no gallery entries".into()));
        }
        query.validate()?;
        let mut hits: Vec<SearchHit> = self
            .entries
            .iter()
            .map(|e| SearchHit {
                clip_id: e.clip_id.clone(),
                character_id: e.embedding.character_id.clone(),
                score: dot(&query.vector, &e.embedding.vector),
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.clip_id.cmp(&b.clip_id)));
        hits.truncate(k);
        Ok(hits)
    }

    /// One binary artifact: clip metadata as JSON, unit vectors as a single
    /// tensor in gallery order.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let meta = serde_json::to_value(IndexMeta {
            kind: "retrieval-index".into(),
            clips: self
                .entries
                .iter()
                .map(|e| ClipMeta {
                    clip_id: e.clip_id.clone(),
                    character_id: e.embedding.character_id.clone(),
                })
                .collect(),
        })?;
        let mut gallery = Tensor::zeros(self.entries.len(), SHARED_DIM);
        for (i, e) in self.entries.iter().enumerate() {
            gallery.row_mut(i).copy_from_slice(&e.embedding.vector);
        }
        let mut tensors = BTreeMap::new();
        tensors.insert("gallery".to_string(), gallery);
        checkpoint::save(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<RetrievalIndex> {
        let (meta, mut tensors) = checkpoint::load(path)?;
        let meta: IndexMeta = serde_json::from_value(meta)?;
        if meta.kind != "retrieval-index" {
            return Err(Error::Data(format!("{} is not a retrieval index", path.display())));
        }
        let gallery = tensors
            .remove("gallery")
            .ok_or_else(|| Error::Data("index file lacks the gallery tensor".into()))?;
        if gallery.shape() != (meta.clips.len(), SHARED_DIM) {
            return Err(Error::shape(
                "retrieval_index",
                format!("gallery {:?} for {} clips", gallery.shape(), meta.clips.len()),
            ));
        }
        let entries = meta
            .clips
            .into_iter()
            .enumerate()
            .map(|(i, c)| IndexEntry {
                clip_id: c.clip_id,
                embedding: SharedEmbedding {
                    vector: gallery.row(i).to_vec(),
                    modality: Modality::Audio,
                    character_id: c.character_id,
                },
            })
            .collect();
        RetrievalIndex::build(entries)
    }
}

/// Rows of (id, embedding) as CSV for external projection tools.
pub fn embeddings_csv(rows: &[(&str, &SharedEmbedding)]) -> String {
    let mut out = String::from("id,modality,character_id");
    for d in 0..SHARED_DIM {
        out.push_str(&format!(",d{d:03}"));
    }
    out.push('\n');
    for (id, e) in rows {
        let modality = match e.modality {
            Modality::Text => "text",
            Modality::Audio => "audio",
        };
        out.push_str(&format!("{id},{modality},{}", e.character_id));
        for v in &e.vector {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::corpus::{generate_corpus, Corpus, CorpusSpec, Split};
    use crate::rng::Seed;
    use crate::timbre::fit_codebook;

    /// A corpus plus an indexer whose feature extractors are random but
    /// frozen; only the projection head is ever trained in these tests.
    pub fn world(spec: &CorpusSpec, seed: Seed) -> (Corpus, CrossModalIndexer) {
        let corpus = generate_corpus(spec).unwrap();
        let adapter = AdapterModel::new(AdapterConfig::desk()).unwrap();
        let adapter_params = adapter.init_params(&mut seed.stream("test-adapter-init"));

        let speaker = {
            let mut p = Params::new();
            let rng = &mut seed.stream("test-speaker-init");
            p.init_linear(rng, "l1", STATS_DIM, 32);
            p.init_linear(rng, "l2", 32, TIMBRE_DIM);
            p.init_linear(rng, "l3", TIMBRE_DIM, 8);
            SpeakerEncoder { params: p }
        };

        use crate::timbre::ContourEmbedder;
        let train_embeds: Vec<Vec<f64>> = corpus
            .split(Split::Train)
            .map(|r| speaker.embed_contour(&r.contour).unwrap())
            .collect();
        let codebook = fit_codebook(&train_embeds, 64).unwrap();

        let projection =
            ProjectionHead::init(&mut seed.stream("test-projection-init"), adapter.cfg.rationale_dim);
        let indexer =
            CrossModalIndexer { adapter, adapter_params, speaker, codebook, projection };
        (corpus, indexer)
    }

    pub fn small_spec() -> CorpusSpec {
        CorpusSpec { num_characters: 5, unseen_characters: 1, utterances_per_character: 12, seed: 11 }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::{small_spec, world};
    use super::*;
    use crate::corpus::Split;
    use crate::rng::Seed;
    use rand::Rng;

    fn basis_embedding(axis: usize, character_id: &str) -> SharedEmbedding {
        let mut v = vec![0.0; SHARED_DIM];
        v[axis] = 1.0;
        SharedEmbedding { vector: v, modality: Modality::Audio, character_id: character_id.into() }
    }

    #[test]
    fn text_embedding_is_deterministic_unit_norm_and_rejects_empty() {
        let (corpus, indexer) = world(&small_spec(), Seed(31));
        let desc = &corpus.personas[0].description;
        let a = indexer.embed_text_query(desc, "char00").unwrap();
        let b = indexer.embed_text_query(desc, "char00").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.modality, Modality::Text);
        assert!((norm(&a.vector) - 1.0).abs() <= UNIT_NORM_TOL);

        match indexer.embed_text_query("", "char00") {
            Err(Error::Domain { .. }) => {}
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn audio_embedding_is_deterministic_and_rejects_malformed_contours() {
        let (corpus, indexer) = world(&small_spec(), Seed(32));
        let contour = &corpus.records[0].contour;
        let a = indexer.embed_audio_item(contour, "char00").unwrap();
        let b = indexer.embed_audio_item(contour, "char00").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.modality, Modality::Audio);
        assert!((norm(&a.vector) - 1.0).abs() <= UNIT_NORM_TOL);
        assert_eq!(indexer.audio_features(contour).unwrap().len(), AUDIO_INPUT_DIM);

        let empty = GroundTruthContour {
            f0: vec![],
            energy: vec![],
            durations: vec![],
            pauses: vec![],
        };
        assert!(indexer.embed_audio_item(&empty, "char00").is_err());
    }

    #[test]
    fn same_character_clips_sit_above_the_cross_character_median() {
        let (corpus, indexer) = world(&small_spec(), Seed(33));
        let embeds: Vec<SharedEmbedding> = corpus
            .records
            .iter()
            .map(|r| indexer.embed_audio_item(&r.contour, &r.utterance.character_id).unwrap())
            .collect();
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for i in 0..embeds.len() {
            for j in (i + 1)..embeds.len() {
                let c = dot(&embeds[i].vector, &embeds[j].vector);
                if embeds[i].character_id == embeds[j].character_id {
                    same.push(c);
                } else {
                    cross.push(c);
                }
            }
        }
        cross.sort_by(f64::total_cmp);
        let median = cross[cross.len() / 2];
        let above = same.iter().filter(|&&c| c > median).count();
        // The audio features carry character-identifying statistics, so even
        // under a random untrained projection same-character pairs should
        // beat the cross-character median well above the 50% chance rate.
        assert!(
            above as f64 / same.len() as f64 > 0.6,
            "only {above} of {} same-character pairs above the cross median {median}",
            same.len()
        );
    }

    #[test]
    fn search_ranks_an_exact_match_first() {
        let (corpus, indexer) = world(&small_spec(), Seed(34));
        let index = indexer.index_records(corpus.split(Split::Test)).unwrap();
        let probe = &index.entries[3];
        let query = SharedEmbedding {
            vector: probe.embedding.vector.clone(),
            modality: Modality::Text,
            character_id: probe.embedding.character_id.clone(),
        };
        let hits = index.search(&query, 5).unwrap();
        assert_eq!(hits[0].clip_id, probe.clip_id);
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert_eq!(hits.len(), 5);
    }

    #[test]
    fn orthogonal_query_falls_back_to_clip_id_order() {
        let entries: Vec<IndexEntry> = (0..4)
            .map(|i| IndexEntry {
                clip_id: format!("clip{i}"),
                embedding: basis_embedding(i, "x"),
            })
            .collect();
        let index = RetrievalIndex::build(entries).unwrap();
        let query = basis_embedding(200, "x");
        let hits = index.search(&query, 10).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.clip_id.as_str()).collect();
        assert_eq!(ids, ["clip0", "clip1", "clip2", "clip3"]);
        assert!(hits.iter().all(|h| h.score == 0.0));

        assert!(index.search(&query, 0).is_err());
    }

    #[test]
    fn top_k_is_a_prefix_of_the_full_brute_force_sort() {
        let mut rng = Seed(35).stream("search-oracle");
        for case in 0..200 {
            let n = rng.gen_range(1..=12);
            // A small direction alphabet makes exact score ties common, so
            // the clip-id rule is exercised, not just the score order.
            let entries: Vec<IndexEntry> = (0..n)
                .map(|i| {
                    let axis = rng.gen_range(0..4);
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    let mut v = vec![0.0; SHARED_DIM];
                    v[axis] = sign;
                    IndexEntry {
                        clip_id: format!("c{i:02}"),
                        embedding: SharedEmbedding {
                            vector: v,
                            modality: Modality::Audio,
                            character_id: "x".into(),
                        },
                    }
                })
                .collect();
            let index = RetrievalIndex::build(entries.clone()).unwrap();
            let mut q = vec![0.0; SHARED_DIM];
            for slot in q.iter_mut().take(4) {
                *slot = crate::rng::next_normal(&mut rng);
            }
            let query = SharedEmbedding::unit_normalized(q, Modality::Text, "q").unwrap();

            // Oracle: score everything, full selection sort by the same rule.
            let mut full: Vec<(f64, String)> = entries
                .iter()
                .map(|e| (dot(&query.vector, &e.embedding.vector), e.clip_id.clone()))
                .collect();
            for i in 0..full.len() {
                for j in (i + 1)..full.len() {
                    let better = full[j].0 > full[i].0
                        || (full[j].0 == full[i].0 && full[j].1 < full[i].1);
                    if better {
                        full.swap(i, j);
                    }
                }
            }
            for k in [1usize, 3, n, n + 5] {
                let hits = index.search(&query, k).unwrap();
                assert_eq!(hits.len(), k.min(n), "case {case}");
                for (h, (score, id)) in hits.iter().zip(&full) {
                    assert_eq!(&h.clip_id, id, "case {case} k {k}");
                    assert_eq!(h.score, *score, "case {case} k {k}");
                }
            }
        }
    }

    #[test]
    fn index_round_trips_and_rejects_bad_inputs() {
        let (corpus, indexer) = world(&small_spec(), Seed(36));
        let index = indexer.index_records(corpus.split(Split::Test)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gallery.idx");
        index.save(&path).unwrap();
        let back = RetrievalIndex::load(&path).unwrap();
        assert_eq!(index, back);

        assert!(RetrievalIndex::build(vec![]).is_err());

        let dup = vec![
            IndexEntry { clip_id: "a".into(), embedding: basis_embedding(0, "x") },
            IndexEntry { clip_id: "a".into(), embedding: basis_embedding(1, "x") },
        ];
        assert!(RetrievalIndex::build(dup).is_err());

        let text_entry = IndexEntry {
            clip_id: "a".into(),
            embedding: SharedEmbedding {
                vector: basis_embedding(0, "x").vector,
                modality: Modality::Text,
                character_id: "x".into(),
            },
        };
        assert!(RetrievalIndex::build(vec![text_entry]).is_err());

        std::fs::write(&path, b"not an index").unwrap();
        assert!(RetrievalIndex::load(&path).is_err());
    }

    #[test]
    fn projection_head_round_trips_with_stable_digest() {
        let mut rng = Seed(37).stream("head");
        let head = ProjectionHead::init(&mut rng, 48);
        assert_eq!(head.text_input_dim().unwrap(), 48);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("projection.ckpt");
        head.save(&path).unwrap();
        let back = ProjectionHead::load(&path).unwrap();
        assert_eq!(head, back);
        assert_eq!(head.digest(), back.digest());

        let other = ProjectionHead::init(&mut rng, 48);
        assert_ne!(head.digest(), other.digest());
    }

    #[test]
    fn embedding_validate_catches_violations() {
        let good = basis_embedding(0, "c");
        good.validate().unwrap();

        let mut short = good.clone();
        short.vector.pop();
        assert!(short.validate().is_err());

        let mut askew = good.clone();
        askew.vector[0] = 1.0 + 1e-6;
        assert!(askew.validate().is_err());

        let mut anonymous = good.clone();
        anonymous.character_id.clear();
        assert!(anonymous.validate().is_err());

        assert!(SharedEmbedding::unit_normalized(vec![0.0; SHARED_DIM], Modality::Text, "c").is_err());
    }

    #[test]
    fn embeddings_csv_has_one_row_per_embedding() {
        let a = basis_embedding(0, "charA");
        let b = basis_embedding(1, "charB");
        let csv = embeddings_csv(&[("q1", &a), ("g1", &b)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("id,modality,character_id,d000,"));
        assert!(lines[1].starts_with("q1,audio,charA,1,0,"));
        assert_eq!(lines[0].split(',').count(), 3 + SHARED_DIM);
        assert_eq!(lines[2].split(',').count(), 3 + SHARED_DIM);
    }
}
