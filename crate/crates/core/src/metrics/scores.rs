//! Scores over encoder embeddings and contours: paired cosine similarity,
//! equal error rate with its trial protocol, cluster compactness, emotion
//! accuracy, and pitch RMSE.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, GroundTruthContour};
use crate::error::{Error, Result};
use crate::metrics::encoders::{EmotionClassifier, SpeakerEncoder};
use crate::num::signal::resample_linear;
use crate::num::tensor::{cosine, euclidean};
use crate::rng::Seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate of a verification score distribution.
///
/// Candidate thresholds are the midpoints between adjacent distinct scores
/// plus one sentinel on each side, so every achievable (FAR, FRR) pair is
/// visited; FAR(t) counts impostor scores >= t, FRR(t) genuine scores < t.
/// At the first candidate where FAR <= FRR the rates either meet exactly or
/// the crossing is linearly interpolated from the bracketing candidates.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<EerResult> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::domain("compute_eer", "empty score list"));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::domain("compute_eer", "non-finite score"));
    }
    let mut gen_sorted = genuine.to_vec();
    gen_sorted.sort_by(f64::total_cmp);
    let mut imp_sorted = impostor.to_vec();
    imp_sorted.sort_by(f64::total_cmp);

    let mut all: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates = Vec::with_capacity(all.len() + 1);
    candidates.push(all[0] - 1.0);
    for w in all.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(all[all.len() - 1] + 1.0);

    let n_g = gen_sorted.len() as f64;
    let n_i = imp_sorted.len() as f64;
    let far_of = |t: f64| (imp_sorted.len() - imp_sorted.partition_point(|&s| s < t)) as f64 / n_i;
    let frr_of = |t: f64| gen_sorted.partition_point(|&s| s < t) as f64 / n_g;

    // FAR starts at 1 > FRR 0 and ends at 0 <= FRR 1, so a crossing exists
    // and the first accepting candidate always has a predecessor.
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &candidates {
        let (far, frr) = (far_of(t), frr_of(t));
        if far <= frr {
            if far == frr {
                return Ok(EerResult { eer: far, threshold: t });
            }
            let (t1, far1, frr1) = prev.ok_or_else(|| {
                Error::domain("compute_eer", "FAR below FRR at the lower sentinel")
            })?;
            let d1 = far1 - frr1;
            let d2 = far - frr;
            let s = d1 / (d1 - d2);
            return Ok(EerResult {
                eer: far1 + s * (far - far1),
                threshold: t1 + s * (t - t1),
            });
        }
        prev = Some((t, far, frr));
    }
    Err(Error::domain("compute_eer", "no FAR/FRR crossing found"))
}

/// Verification trials from per-character embedding groups: genuine scores
/// are all same-character pair cosines, impostor scores an equal-count
/// seeded sample of cross-character pair cosines.
pub fn eer_trials(
    groups: &BTreeMap<String, Vec<Vec<f64>>>,
    seed: Seed,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if groups.len() < 2 {
        return Err(Error::domain("eer_trials", "need at least 2 characters"));
    }
    if groups.values().any(|v| v.is_empty()) {
        return Err(Error::domain("eer_trials", "character with no embeddings"));
    }
    let mut genuine = Vec::new();
    for vecs in groups.values() {
        for i in 0..vecs.len() {
            for j in (i + 1)..vecs.len() {
                genuine.push(cosine(&vecs[i], &vecs[j]));
            }
        }
    }
    if genuine.is_empty() {
        return Err(Error::domain("eer_trials", "no character has 2 or more embeddings"));
    }
    let chars: Vec<&String> = groups.keys().collect();
    let mut rng = seed.stream("eer-impostor");
    let mut impostor = Vec::with_capacity(genuine.len());
    while impostor.len() < genuine.len() {
        let a = rng.gen_range(0..chars.len());
        let b = rng.gen_range(0..chars.len());
        if a == b {
            continue;
        }
        let va = &groups[chars[a]];
        let vb = &groups[chars[b]];
        let ea = &va[rng.gen_range(0..va.len())];
        let eb = &vb[rng.gen_range(0..vb.len())];
        impostor.push(cosine(ea, eb));
    }
    Ok((genuine, impostor))
}

/// Mean cosine between paired embedding lists.
pub fn mean_pair_cosine(gen: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if gen.len() != reference.len() {
        return Err(Error::shape(
            "mean_pair_cosine",
            format!("{} generated vs {} reference", gen.len(), reference.len()),
        ));
    }
    if gen.is_empty() {
        return Err(Error::domain("mean_pair_cosine", "empty pair list"));
    }
    let sum: f64 = gen.iter().zip(reference).map(|(a, b)| cosine(a, b)).sum();
    Ok(sum / gen.len() as f64)
}

/// Character consistency as mean speaker-embedding cosine over paired
/// generated/reference contours.
pub fn ccs_cosine(
    gen: &[&GroundTruthContour],
    reference: &[&GroundTruthContour],
    enc: &SpeakerEncoder,
) -> Result<f64> {
    if gen.len() != reference.len() {
        return Err(Error::shape(
            "ccs_cosine",
            format!("{} generated vs {} reference", gen.len(), reference.len()),
        ));
    }
    let ge: Vec<Vec<f64>> = gen.iter().map(|c| enc.embed(c)).collect::<Result<_>>()?;
    let re: Vec<Vec<f64>> = reference.iter().map(|c| enc.embed(c)).collect::<Result<_>>()?;
    mean_pair_cosine(&ge, &re)
}

/// Identity compactness: mean per-character RMS distance to the character
/// centroid, divided by the mean pairwise centroid distance. Coincident
/// centroids make the ratio undefined; that degenerate case returns +inf.
pub fn cluster_radius_ratio(groups: &BTreeMap<String, Vec<Vec<f64>>>) -> Result<f64> {
    if groups.len() < 2 {
        return Err(Error::domain("cluster_radius_ratio", "need at least 2 characters"));
    }
    let mut centroids = Vec::with_capacity(groups.len());
    let mut sigma_sum = 0.0;
    for (c, vecs) in groups {
        if vecs.len() < 2 {
            return Err(Error::domain(
                "cluster_radius_ratio",
                format!("character {c} has {} embedding(s), need at least 2", vecs.len()),
            ));
        }
        let dim = vecs[0].len();
        if vecs.iter().any(|v| v.len() != dim) {
            return Err(Error::shape("cluster_radius_ratio", "mixed embedding dims"));
        }
        let mut mu = vec![0.0; dim];
        for v in vecs {
            for (m, x) in mu.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in mu.iter_mut() {
            *m /= vecs.len() as f64;
        }
        let msd: f64 =
            vecs.iter().map(|v| euclidean(v, &mu).powi(2)).sum::<f64>() / vecs.len() as f64;
        sigma_sum += msd.sqrt();
        centroids.push(mu);
    }
    let sigma_intra = sigma_sum / groups.len() as f64;

    let mut d_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in (i + 1)..centroids.len() {
            if centroids[i].len() != centroids[j].len() {
                return Err(Error::shape("cluster_radius_ratio", "mixed embedding dims"));
            }
            d_sum += euclidean(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    let d_inter = d_sum / pairs as f64;
    if d_inter == 0.0 {
        log::warn!("all character centroids coincide; cluster radius ratio is undefined");
        return Ok(f64::INFINITY);
    }
    Ok(sigma_intra / d_inter)
}

/// Emotion expression accuracy: fraction of contours whose predicted emotion
/// matches the intended label.
pub fn eea(
    gen: &[&GroundTruthContour],
    labels: &[Emotion],
    clf: &EmotionClassifier,
) -> Result<f64> {
    if gen.len() != labels.len() {
        return Err(Error::shape(
            "eea",
            format!("{} contours vs {} labels", gen.len(), labels.len()),
        ));
    }
    if gen.is_empty() {
        return Err(Error::domain("eea", "empty pair list"));
    }
    let mut correct = 0usize;
    for (c, &label) in gen.iter().zip(labels) {
        if clf.predict(c)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / gen.len() as f64)
}

/// Per-frame pitch RMSE in Hz after aligning the shorter contour to the
/// longer one by linear resampling. Symmetric in its arguments.
pub fn f0_rmse(gen: &GroundTruthContour, reference: &GroundTruthContour) -> Result<f64> {
    if gen.f0.is_empty() || reference.f0.is_empty() {
        return Err(Error::domain("f0_rmse", "empty contour"));
    }
    let n = gen.f0.len().max(reference.f0.len());
    let a = resample_linear(&gen.f0, n)?;
    let b = resample_linear(&reference.f0, n)?;
    let mse: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    Ok(mse.sqrt())
}
