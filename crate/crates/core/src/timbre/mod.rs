//! Timbre track: one global embedding per character, scalar-quantized
//! against a codebook of shared levels so the value passed downstream is a
//! small set of discrete anchors rather than a free vector.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::corpus::GroundTruthContour;
use crate::error::{Error, Result};

/// Dimensionality of the raw timbre embedding.
pub const TIMBRE_DIM: usize = 256;
/// Default number of shared scalar levels.
pub const DEFAULT_LEVELS: usize = 512;

const CODEBOOK_SCHEMA_VERSION: u32 = 1;

/// Anything that can turn a contour into a fixed-size feature vector. The
/// evaluation stack's speaker encoder implements this; tests plug stubs.
pub trait ContourEmbedder {
    fn embed_dim(&self) -> usize;
    fn embed_contour(&self, contour: &GroundTruthContour) -> Result<Vec<f64>>;
}

/// Shared scalar levels, strictly increasing, applied independently to
/// every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SQCodebook {
    pub levels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    schema_version: u32,
    kind: String,
    fitted_on: usize,
    levels: Vec<f64>,
}

impl SQCodebook {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::domain("sq_codebook", "no levels"));
        }
        if !self.levels.iter().all(|l| l.is_finite()) {
            return Err(Error::domain("sq_codebook", "non-finite level"));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("sq_codebook", "levels not strictly increasing"));
        }
        Ok(())
    }

    /// Half the widest gap between adjacent levels. Values that lie inside
    /// the level span quantize with error at most this bound.
    pub fn max_half_gap(&self) -> f64 {
        self.levels
            .windows(2)
            .map(|w| (w[1] - w[0]) / 2.0)
            .fold(0.0, f64::max)
    }

    /// Index of the nearest level, ties toward the lower index. Binary
    /// search over the sorted levels.
    pub fn nearest(&self, x: f64) -> usize {
        let idx = self.levels.partition_point(|&l| l < x);
        if idx == 0 {
            return 0;
        }
        if idx == self.levels.len() {
            return idx - 1;
        }
        let d_low = x - self.levels[idx - 1];
        let d_high = self.levels[idx] - x;
        if d_low <= d_high {
            idx - 1
        } else {
            idx
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CodebookFile {
            schema_version: CODEBOOK_SCHEMA_VERSION,
            kind: "sq-codebook".into(),
            fitted_on: self.levels.len(),
            levels: self.levels.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CodebookFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.schema_version != CODEBOOK_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "codebook schema {} unsupported (expected {CODEBOOK_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        if file.kind != "sq-codebook" {
            return Err(Error::Data(format!("{} is not a codebook file", path.display())));
        }
        let cb = SQCodebook { levels: file.levels };
        cb.validate()?;
        Ok(cb)
    }
}

/// A timbre embedding before and after quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimbreCode {
    pub raw: Vec<f64>,
    pub quantized: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Mean of the per-contour embeddings, scaled to unit norm.
pub fn timbre_embed<E: ContourEmbedder + ?Sized>(
    embedder: &E,
    contours: &[&GroundTruthContour],
) -> Result<Vec<f64>> {
    if contours.is_empty() {
        return Err(Error::domain("timbre_embed", "no contours supplied"));
    }
    let dim = embedder.embed_dim();
    let mut mean = vec![0.0; dim];
    for c in contours {
        let e = embedder.embed_contour(c)?;
        if e.len() != dim {
            return Err(Error::shape("timbre_embed", format!("embedder returned {} dims, expected {dim}", e.len())));
        }
        for (m, v) in mean.iter_mut().zip(&e) {
            *m += v / contours.len() as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::domain("timbre_embed", "embeddings cancel to the zero vector"));
    }
    for v in mean.iter_mut() {
        *v /= norm;
    }
    Ok(mean)
}

/// Fits shared levels as midpoint quantiles of the pooled coordinate
/// distribution: level i sits at quantile (i + 0.5) / levels. Landed
/// duplicates are nudged apart by single ULPs so the levels stay strictly
/// increasing without moving in value terms.
pub fn fit_codebook(vectors: &[Vec<f64>], levels: usize) -> Result<SQCodebook> {
    if levels == 0 {
        return Err(Error::domain("fit_codebook", "levels must be positive"));
    }
    if vectors.is_empty() {
        return Err(Error::domain("fit_codebook", "no vectors"));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("fit_codebook", "vectors must share a nonzero dimension"));
    }
    let mut pooled = Vec::with_capacity(vectors.len() * dim);
    for v in vectors {
        for &x in v {
            if !x.is_finite() {
                return Err(Error::domain("fit_codebook", "non-finite coordinate"));
            }
            pooled.push(x);
        }
    }
    pooled.sort_unstable_by(f64::total_cmp);
    let mut distinct = 1;
    for w in pooled.windows(2) {
        if w[0] != w[1] {
            distinct += 1;
        }
    }
    if distinct < levels {
        return Err(Error::domain(
            "fit_codebook",
            format!("{distinct} distinct values cannot support {levels} levels"),
        ));
    }

    let n = pooled.len() as f64;
    let mut out = Vec::with_capacity(levels);
    for i in 0..levels {
        let q = (i as f64 + 0.5) / levels as f64;
        // Midpoint-rank convention: the value of rank r represents
        // quantile (r + 0.5) / n.
        let pos = (q * n - 0.5).clamp(0.0, n - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        out.push(pooled[lo] * (1.0 - frac) + pooled[hi] * frac);
    }
    for i in 1..levels {
        if out[i] <= out[i - 1] {
            out[i] = nudge_up(out[i - 1]);
        }
    }
    let cb = SQCodebook { levels: out };
    cb.validate()?;
    Ok(cb)
}

fn nudge_up(x: f64) -> f64 {
    if x == 0.0 {
        f64::MIN_POSITIVE
    } else {
        x.next_up()
    }
}

/// Per-dimension nearest-level quantization.
pub fn quantize(raw: &[f64], codebook: &SQCodebook) -> TimbreCode {
    let indices: Vec<usize> = raw.iter().map(|&x| codebook.nearest(x)).collect();
    let quantized: Vec<f64> = indices.iter().map(|&i| codebook.levels[i]).collect();
    TimbreCode { raw: raw.to_vec(), quantized, indices }
}

/// Mean squared quantization error over a set of vectors.
pub fn quantization_mse(vectors: &[Vec<f64>], codebook: &SQCodebook) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in vectors {
        for &x in v {
            let q = codebook.levels[codebook.nearest(x)];
            sum += (x - q) * (x - q);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Alternate mode: a vector codebook in the full embedding space, fitted by
/// plain k-means (farthest-point init, fixed iteration budget). Not used by
/// the default pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorCodebook {
    pub centroids: Vec<Vec<f64>>,
}

impl VectorCodebook {
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

pub fn fit_vector_codebook(vectors: &[Vec<f64>], k: usize, seed: crate::rng::Seed) -> Result<VectorCodebook> {
    use rand::Rng;
    if k == 0 || vectors.len() < k {
        return Err(Error::domain(
            "fit_vector_codebook",
            format!("need at least k={k} vectors, have {}", vectors.len()),
        ));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("fit_vector_codebook", "inconsistent dimensions"));
    }
    let mut rng = seed.stream("vector-codebook");
    let first = rng.gen_range(0..vectors.len());
    let mut centroids = vec![vectors[first].clone()];
    while centroids.len() < k {
        // Farthest point from the current set; deterministic argmax.
        let (mut best, mut best_d) = (0usize, -1.0);
        for (i, v) in vectors.iter().enumerate() {
            let d = centroids
                .iter()
                .map(|c| c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        centroids.push(vectors[best].clone());
    }
    let book = |centroids: Vec<Vec<f64>>| VectorCodebook { centroids };
    let mut cb = book(centroids);
    for _ in 0..20 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for v in vectors {
            let a = cb.nearest(v);
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for i in 0..k {
            if counts[i] > 0 {
                for s in sums[i].iter_mut() {
                    *s /= counts[i] as f64;
                }
                cb.centroids[i] = sums[i].clone();
            }
        }
    }
    Ok(cb)
}
