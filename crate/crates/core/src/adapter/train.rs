//! Adapter training loop: minibatch AdamW with cosine annealing over the
//! train split, per-character anchor embeddings refreshed every epoch, and
//! a per-epoch log whose terms re-assemble the total loss exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::losses::{contrastive_term, norm_term};
use crate::adapter::model::AdapterModel;
use crate::adapter::AdapterConfig;
use crate::corpus::{Corpus, Record, Split};
use crate::error::{Error, Result};
use crate::num::checkpoint;
use crate::num::nn::{Binding, Params};
use crate::num::optim::{cosine_lr, AdamConfig, AdamW};
use crate::num::tape::Tape;
use crate::num::tensor::Tensor;
use crate::rng::{shuffled_indices, Seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Full regression term: prosody distance plus lambda_sem times the
    /// semantic distance, averaged over the epoch's examples.
    pub distill: f64,
    /// Semantic distance alone (already folded into `distill`).
    pub semantic: f64,
    pub contrast: f64,
    /// distill + lambda_con * contrast.
    pub total: f64,
    pub val_mse: f64,
}

/// Trained adapter plus its training history.
#[derive(Debug, Clone)]
pub struct AdapterStage {
    pub cfg: AdapterConfig,
    pub params: Params,
    pub log: Vec<EpochLog>,
    pub initial_val_mse: f64,
}

impl AdapterStage {
    pub fn final_val_mse(&self) -> f64 {
        self.log.last().map_or(self.initial_val_mse, |l| l.val_mse)
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,distill,semantic,contrast,total,val_mse\n");
        for l in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.epoch, l.distill, l.semantic, l.contrast, l.total, l.val_mse
            ));
        }
        out
    }
}

/// Everything needed to continue training after an interruption. Saving at
/// an epoch boundary and resuming replays the identical trajectory because
/// shuffle order comes from per-epoch substreams.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub next_epoch: usize,
    pub params: Params,
    pub adam_step: u64,
    pub adam_state: BTreeMap<String, Tensor>,
    pub anchors: BTreeMap<String, Vec<f64>>,
    pub log: Vec<EpochLog>,
    pub initial_val_mse: f64,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    next_epoch: usize,
    adam_step: u64,
    initial_val_mse: f64,
    log: Vec<EpochLog>,
    config: AdapterConfig,
}

impl TrainState {
    pub fn save(&self, path: &Path, cfg: &AdapterConfig) -> Result<()> {
        let meta = serde_json::to_value(StateMeta {
            kind: "adapter-train-state".into(),
            next_epoch: self.next_epoch,
            adam_step: self.adam_step,
            initial_val_mse: self.initial_val_mse,
            log: self.log.clone(),
            config: cfg.clone(),
        })?;
        let mut tensors = self.params.clone().into_map();
        for (k, v) in &self.adam_state {
            tensors.insert(k.clone(), v.clone());
        }
        for (c, a) in &self.anchors {
            tensors.insert(format!("anchor.{c}"), Tensor::row_vec(a.clone()));
        }
        checkpoint::save(path, &meta, &tensors)
    }

    pub fn load(path: &Path, cfg: &AdapterConfig) -> Result<TrainState> {
        let (meta, tensors) = checkpoint::load(path)?;
        let meta: StateMeta = serde_json::from_value(meta)?;
        if meta.kind != "adapter-train-state" {
            return Err(Error::Data(format!("{} holds a {:?} checkpoint", path.display(), meta.kind)));
        }
        if &meta.config != cfg {
            return Err(Error::Config(
                "resume checkpoint was written with a different adapter config".into(),
            ));
        }
        let mut params = BTreeMap::new();
        let mut adam_state = BTreeMap::new();
        let mut anchors = BTreeMap::new();
        for (k, v) in tensors {
            if let Some(c) = k.strip_prefix("anchor.") {
                anchors.insert(c.to_string(), v.row(0).to_vec());
            } else if k.starts_with("adam.") {
                adam_state.insert(k, v);
            } else {
                params.insert(k, v);
            }
        }
        Ok(TrainState {
            next_epoch: meta.next_epoch,
            params: Params::from_map(params),
            adam_step: meta.adam_step,
            adam_state,
            anchors,
            log: meta.log,
            initial_val_mse: meta.initial_val_mse,
        })
    }
}

pub fn train_adapter(corpus: &Corpus, cfg: &AdapterConfig, seed: Seed) -> Result<AdapterStage> {
    resume_train(corpus, cfg, seed, None, |_| Ok(()))
}

/// Core training loop. With `state` the run continues from a saved epoch
/// boundary; `on_epoch` sees the state after every epoch (for rolling
/// checkpoints) and can abort by returning an error.
pub fn resume_train(
    corpus: &Corpus,
    cfg: &AdapterConfig,
    seed: Seed,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<AdapterStage> {
    cfg.validate()?;
    if corpus.seen_characters().len() < 2 {
        return Err(Error::Config(
            "adapter training needs at least 2 seen characters to form negatives".into(),
        ));
    }
    let model = AdapterModel::new(cfg.clone())?;
    let train: Vec<&Record> = corpus.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Data("corpus has no training records".into()));
    }
    let mut char_labels = BTreeMap::new();
    for r in &train {
        let n = char_labels.len();
        char_labels.entry(r.utterance.character_id.as_str()).or_insert(n);
    }

    let mut adam = AdamW::new(AdamConfig::default());
    let (start_epoch, mut params, mut anchors, mut log, initial_val_mse) = match state {
        Some(s) => {
            if s.next_epoch > cfg.epochs {
                return Err(Error::Config(format!(
                    "resume epoch {} exceeds configured epochs {}",
                    s.next_epoch, cfg.epochs
                )));
            }
            adam.import_state(s.adam_step, &s.adam_state);
            (s.next_epoch, s.params, s.anchors, s.log, s.initial_val_mse)
        }
        None => {
            let mut rng = seed.stream("adapter-init");
            let params = model.init_params(&mut rng);
            let anchors = compute_anchors(&model, &params, corpus, &train)?;
            let initial = prosody_val_mse(&model, &params, corpus, Split::Val)?;
            (0, params, anchors, Vec::new(), initial)
        }
    };

    for epoch in start_epoch..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_floor, epoch, cfg.epochs);
        let mut order_rng = seed.epoch_stream("adapter-shuffle", epoch);
        let order = shuffled_indices(&mut order_rng, train.len());

        let mut sums = [0.0f64; 4];
        let mut z_accum: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();

        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut bind = Binding::new(&params);
            let mut p5_rows = Vec::with_capacity(batch.len());
            let mut sem_rows = Vec::with_capacity(batch.len());
            let mut z_rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            let mut batch_anchors = Vec::with_capacity(batch.len());
            let mut p_tgt = Tensor::zeros(batch.len(), cfg.prosody_dim);
            let mut h_tgt = Tensor::zeros(batch.len(), cfg.rationale_dim);
            for (b, &i) in batch.iter().enumerate() {
                let rec = train[i];
                let persona = corpus.persona(&rec.utterance.character_id)?;
                let (p5, sem, z) = model.forward_on_tape(
                    &mut tape,
                    &mut bind,
                    persona,
                    &rec.utterance.token_ids,
                    rec.utterance.token_ids.len(),
                )?;
                p5_rows.push(p5);
                sem_rows.push(sem);
                z_rows.push(z);
                labels.push(char_labels[rec.utterance.character_id.as_str()]);
                let anchor = anchors.get(&rec.utterance.character_id).ok_or_else(|| {
                    Error::Data(format!("no anchor for character {}", rec.utterance.character_id))
                })?;
                batch_anchors.push(Tensor::row_vec(anchor.clone()));
                p_tgt.row_mut(b).copy_from_slice(&rec.target.as_p5());
                h_tgt.row_mut(b).copy_from_slice(&rec.target.rationale_emb);
                let zv = tape.value(z).row(0);
                let slot = z_accum
                    .entry(rec.utterance.character_id.clone())
                    .or_insert_with(|| (vec![0.0; zv.len()], 0));
                for (acc, v) in slot.0.iter_mut().zip(zv) {
                    *acc += v;
                }
                slot.1 += 1;
            }

            let p_hat = tape.concat_rows(&p5_rows)?;
            let h_hat = tape.concat_rows(&sem_rows)?;
            let p_leaf = tape.leaf(p_tgt);
            let h_leaf = tape.leaf(h_tgt);
            let p_term = norm_term(&mut tape, p_hat, p_leaf, cfg.squared_norms)?;
            let s_term = norm_term(&mut tape, h_hat, h_leaf, cfg.squared_norms)?;
            let s_scaled = tape.scale(s_term, cfg.lambda_sem);
            let distill = tape.add(p_term, s_scaled)?;
            let (total, contrast_val) = if cfg.lambda_con > 0.0 {
                let c = contrastive_term(&mut tape, &z_rows, &batch_anchors, &labels, cfg.tau)?;
                let c_scaled = tape.scale(c, cfg.lambda_con);
                let t = tape.add(distill, c_scaled)?;
                (t, tape.value(c).scalar()?)
            } else {
                (distill, 0.0)
            };

            let w = batch.len() as f64;
            sums[0] += tape.value(distill).scalar()? * w;
            sums[1] += tape.value(s_term).scalar()? * w;
            sums[2] += contrast_val * w;
            sums[3] += tape.value(total).scalar()? * w;

            tape.backward(total)?;
            let grads = bind.grads(&tape);
            adam.step(&mut params, &grads, lr);
        }

        for (c, (sum, n)) in z_accum {
            anchors.insert(c, sum.iter().map(|v| v / n as f64).collect());
        }

        let n = train.len() as f64;
        let val_mse = prosody_val_mse(&model, &params, corpus, Split::Val)?;
        log.push(EpochLog {
            epoch,
            lr,
            distill: sums[0] / n,
            semantic: sums[1] / n,
            contrast: sums[2] / n,
            total: sums[3] / n,
            val_mse,
        });

        let snapshot = TrainState {
            next_epoch: epoch + 1,
            params: params.clone(),
            adam_step: adam.step_count(),
            adam_state: adam.export_state(&params),
            anchors: anchors.clone(),
            log: log.clone(),
            initial_val_mse,
        };
        on_epoch(&snapshot)?;
    }

    Ok(AdapterStage { cfg: cfg.clone(), params, log, initial_val_mse })
}

/// Mean squared error of the 5 prosody components over a split.
pub fn prosody_val_mse(
    model: &AdapterModel,
    params: &Params,
    corpus: &Corpus,
    split: Split,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for rec in corpus.split(split) {
        let persona = corpus.persona(&rec.utterance.character_id)?;
        let out = model.forward(params, persona, &rec.utterance.token_ids, rec.utterance.token_ids.len())?;
        let tgt = rec.target.as_p5();
        let mse: f64 = out
            .p_hat
            .iter()
            .zip(tgt.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / tgt.len() as f64;
        sum += mse;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("no records in split {split:?}")));
    }
    Ok(sum / n as f64)
}

/// Per-character mean of z over the train split (unnormalized; cosine in
/// the contrastive loss ignores scale).
pub fn compute_anchors(
    model: &AdapterModel,
    params: &Params,
    corpus: &Corpus,
    train: &[&Record],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut accum: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for rec in train {
        let persona = corpus.persona(&rec.utterance.character_id)?;
        let out = model.forward(params, persona, &rec.utterance.token_ids, rec.utterance.token_ids.len())?;
        let slot = accum
            .entry(rec.utterance.character_id.clone())
            .or_insert_with(|| (vec![0.0; out.z.len()], 0));
        for (acc, v) in slot.0.iter_mut().zip(&out.z) {
            *acc += v;
        }
        slot.1 += 1;
    }
    Ok(accum
        .into_iter()
        .map(|(c, (sum, n))| (c, sum.iter().map(|v| v / n as f64).collect()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn tiny_corpus() -> Corpus {
        generate_corpus(&CorpusSpec {
            num_characters: 4,
            unseen_characters: 1,
            utterances_per_character: 10,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_cfg() -> AdapterConfig {
        AdapterConfig {
            num_layers: 1,
            hidden_dim: 16,
            num_heads: 2,
            epochs: 3,
            batch_size: 8,
            ..AdapterConfig::desk()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus();
        let cfg = tiny_cfg();
        let a = train_adapter(&corpus, &cfg, Seed(9)).unwrap();
        let b = train_adapter(&corpus, &cfg, Seed(9)).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(t, b.params.get(name).unwrap(), "{name} diverged");
        }
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn logged_terms_reassemble_total() {
        let corpus = tiny_corpus();
        let cfg = tiny_cfg();
        let stage = train_adapter(&corpus, &cfg, Seed(10)).unwrap();
        assert_eq!(stage.log.len(), cfg.epochs);
        for l in &stage.log {
            let rebuilt = l.distill + cfg.lambda_con * l.contrast;
            assert!(
                (l.total - rebuilt).abs() < 1e-12,
                "epoch {}: total {} vs rebuilt {}",
                l.epoch,
                l.total,
                rebuilt
            );
            assert!(l.semantic <= l.distill / cfg.lambda_sem + 1e-12);
            assert!(l.val_mse.is_finite());
        }
    }

    #[test]
    fn lambda_con_zero_skips_contrastive_term() {
        let corpus = tiny_corpus();
        let cfg = AdapterConfig { lambda_con: 0.0, ..tiny_cfg() };
        let stage = train_adapter(&corpus, &cfg, Seed(11)).unwrap();
        for l in &stage.log {
            assert_eq!(l.contrast, 0.0);
            assert!((l.total - l.distill).abs() < 1e-15);
        }
    }

    #[test]
    fn single_character_corpus_is_a_config_error() {
        let full = tiny_corpus();
        let keep = full.personas[0].character_id.clone();
        let corpus = Corpus {
            seed: full.seed,
            personas: full.personas.iter().filter(|p| p.character_id == keep).cloned().collect(),
            records: full
                .records
                .iter()
                .filter(|r| r.utterance.character_id == keep)
                .cloned()
                .collect(),
        };
        match train_adapter(&corpus, &tiny_cfg(), Seed(12)) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let corpus = tiny_corpus();
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("state.ckpt");

        let full = train_adapter(&corpus, &cfg, Seed(13)).unwrap();

        // First leg: stop after epoch 1 by erroring out of the callback.
        let res = resume_train(&corpus, &cfg, Seed(13), None, |s| {
            s.save(&ck, &cfg)?;
            if s.next_epoch == 2 {
                return Err(Error::Data("interrupt".into()));
            }
            Ok(())
        });
        assert!(res.is_err());

        let state = TrainState::load(&ck, &cfg).unwrap();
        assert_eq!(state.next_epoch, 2);
        let resumed = resume_train(&corpus, &cfg, Seed(13), Some(state), |_| Ok(())).unwrap();

        for (name, t) in full.params.iter() {
            assert_eq!(t, resumed.params.get(name).unwrap(), "{name} diverged after resume");
        }
        assert_eq!(full.log, resumed.log);

        let wrong_cfg = AdapterConfig { hidden_dim: 32, ..cfg.clone() };
        assert!(TrainState::load(&ck, &wrong_cfg).is_err());
    }

    #[test]
    fn csv_log_has_expected_header_and_rows() {
        let corpus = tiny_corpus();
        let cfg = AdapterConfig { epochs: 1, ..tiny_cfg() };
        let stage = train_adapter(&corpus, &cfg, Seed(14)).unwrap();
        let csv = stage.log_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,distill,semantic,contrast,total,val_mse"));
        assert_eq!(lines.count(), 1);
    }
}
