//! Evaluation report: one struct holding every objective score for a batch
//! of generated/reference contour pairs, plus the per-emotion breakdown and
//! the digests of the frozen encoders that produced the numbers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, GroundTruthContour};
use crate::error::{Error, Result};
use crate::metrics::encoders::FrozenEncoders;
use crate::metrics::scores::{ccs_cosine, cluster_radius_ratio, compute_eer, eea, eer_trials, f0_rmse};
use crate::rng::Seed;

/// One evaluated utterance: the synthesized contour next to the ground-truth
/// reference it should match.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub character_id: String,
    pub emotion: Emotion,
    pub generated: GroundTruthContour,
    pub reference: GroundTruthContour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionRow {
    pub count: usize,
    pub ccs_cosine: f64,
    pub eea: f64,
    pub f0_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ccs_cosine: f64,
    /// 1 - eer; the verification-protocol form of character consistency.
    pub ccs_eer: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub cluster_radius: f64,
    pub eea: f64,
    pub f0_rmse: f64,
    pub per_emotion: BTreeMap<String, EmotionRow>,
    pub speaker_encoder_digest: String,
    pub emotion_classifier_digest: String,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eer", self.eer), ("ccs_eer", self.ccs_eer), ("eea", self.eea)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("{name} {v} outside [0,1]")));
            }
        }
        if (self.ccs_eer - (1.0 - self.eer)).abs() > 1e-12 {
            return Err(Error::Data("ccs_eer does not equal 1 - eer".into()));
        }
        if !(-1.0..=1.0).contains(&self.ccs_cosine) {
            return Err(Error::Data(format!("ccs_cosine {} outside [-1,1]", self.ccs_cosine)));
        }
        if self.f0_rmse < 0.0 || self.f0_rmse.is_nan() {
            return Err(Error::Data(format!("f0_rmse {} negative or NaN", self.f0_rmse)));
        }
        if self.cluster_radius < 0.0 || self.cluster_radius.is_nan() {
            return Err(Error::Data(format!("cluster_radius {} invalid", self.cluster_radius)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<MetricReport> {
        Ok(serde_json::from_str(s)?)
    }

    /// Single-row summary, columns in the headline-table order.
    pub fn summary_csv(&self) -> String {
        format!(
            "ccs_cosine,ccs_eer,eer,cluster_radius,eea,f0_rmse\n{},{},{},{},{},{}\n",
            self.ccs_cosine, self.ccs_eer, self.eer, self.cluster_radius, self.eea, self.f0_rmse
        )
    }

    /// Per-emotion breakdown, one row per emotion in canonical enum order.
    pub fn per_emotion_csv(&self) -> String {
        let mut out = String::from("emotion,count,ccs_cosine,eea,f0_rmse\n");
        for e in Emotion::ALL {
            if let Some(row) = self.per_emotion.get(&emotion_key(e)) {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    emotion_key(e),
                    row.count,
                    row.ccs_cosine,
                    row.eea,
                    row.f0_rmse
                ));
            }
        }
        out
    }
}

pub(crate) fn emotion_key(e: Emotion) -> String {
    format!("{e:?}").to_lowercase()
}

/// Score a batch of pairs with frozen encoders. The seed only drives the
/// impostor-trial sample for the EER protocol.
pub fn evaluate(pairs: &[EvalPair], enc: &FrozenEncoders, seed: Seed) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no evaluation pairs".into()));
    }
    let gen: Vec<&GroundTruthContour> = pairs.iter().map(|p| &p.generated).collect();
    let reference: Vec<&GroundTruthContour> = pairs.iter().map(|p| &p.reference).collect();
    let labels: Vec<Emotion> = pairs.iter().map(|p| p.emotion).collect();

    let ccs = ccs_cosine(&gen, &reference, &enc.speaker)?;
    let accuracy = eea(&gen, &labels, &enc.emotion)?;
    let rmse_mean = {
        let mut sum = 0.0;
        for p in pairs {
            sum += f0_rmse(&p.generated, &p.reference)?;
        }
        sum / pairs.len() as f64
    };

    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.character_id.clone()).or_default().push(enc.speaker.embed(&p.generated)?);
    }
    let (genuine, impostor) = eer_trials(&groups, seed)?;
    let eer_result = compute_eer(&genuine, &impostor)?;
    let cluster = cluster_radius_ratio(&groups)?;

    let mut per_emotion = BTreeMap::new();
    for e in Emotion::ALL {
        let idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].emotion == e).collect();
        if idx.is_empty() {
            continue;
        }
        let g: Vec<&GroundTruthContour> = idx.iter().map(|&i| gen[i]).collect();
        let r: Vec<&GroundTruthContour> = idx.iter().map(|&i| reference[i]).collect();
        let l: Vec<Emotion> = vec![e; idx.len()];
        let mut rmse = 0.0;
        for &i in &idx {
            rmse += f0_rmse(&pairs[i].generated, &pairs[i].reference)?;
        }
        per_emotion.insert(
            emotion_key(e),
            EmotionRow {
                count: idx.len(),
                ccs_cosine: ccs_cosine(&g, &r, &enc.speaker)?,
                eea: eea(&g, &l, &enc.emotion)?,
                f0_rmse: rmse / idx.len() as f64,
            },
        );
    }

    let report = MetricReport {
        ccs_cosine: ccs,
        ccs_eer: 1.0 - eer_result.eer,
        eer: eer_result.eer,
        eer_threshold: eer_result.threshold,
        cluster_radius: cluster,
        eea: accuracy,
        f0_rmse: rmse_mean,
        per_emotion,
        speaker_encoder_digest: enc.speaker.digest(),
        emotion_classifier_digest: enc.emotion.digest(),
    };
    report.validate()?;
    Ok(report)
}
