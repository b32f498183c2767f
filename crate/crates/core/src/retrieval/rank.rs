//! Ranked-retrieval quality scores: mean average precision, recall at a
//! cutoff, and mean reciprocal rank, all over per-query relevance patterns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{RetrievalIndex, SharedEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mrr: f64,
}

impl RetrievalScores {
    pub fn csv(&self) -> String {
        format!(
            "map,r_at_1,r_at_5,r_at_10,mrr\n{},{},{},{},{}\n",
            self.map, self.r_at_1, self.r_at_5, self.r_at_10, self.mrr
        )
    }
}

/// Precision at each relevant rank, averaged over the relevant count.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::domain("average_precision", "ranking has no relevant items"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// Aggregate scores over per-query relevance patterns, each ordered by
/// descending retrieval score. Every pattern needs at least one relevant
/// entry.
pub fn rank_metrics(rankings: &[Vec<bool>]) -> Result<RetrievalScores> {
    if rankings.is_empty() {
        return Err(Error::domain("rank_metrics", "no queries"));
    }
    let n = rankings.len() as f64;
    let mut map = 0.0;
    let mut mrr = 0.0;
    let mut recall = [0usize; 3];
    for ranking in rankings {
        map += average_precision(ranking)?;
        let first = ranking.iter().position(|&r| r).expect("checked by average_precision");
        mrr += 1.0 / (first + 1) as f64;
        for (slot, k) in recall.iter_mut().zip([1usize, 5, 10]) {
            if first < k {
                *slot += 1;
            }
        }
    }
    Ok(RetrievalScores {
        map: map / n,
        r_at_1: recall[0] as f64 / n,
        r_at_5: recall[1] as f64 / n,
        r_at_10: recall[2] as f64 / n,
        mrr: mrr / n,
    })
}

/// Score text queries against a gallery; a clip is relevant iff it shares
/// the query's character. Every query must have at least one relevant clip.
pub fn retrieval_metrics(
    index: &RetrievalIndex,
    queries: &[SharedEmbedding],
) -> Result<RetrievalScores> {
    if queries.is_empty() {
        return Err(Error::domain("retrieval_metrics", "no queries"));
    }
    let mut rankings = Vec::with_capacity(queries.len());
    for q in queries {
        let hits = index.search(q, index.entries.len())?;
        let relevance: Vec<bool> = hits.iter().map(|h| h.character_id == q.character_id).collect();
        if !relevance.iter().any(|&r| r) {
            return Err(Error::domain(
                "retrieval_metrics",
                format!("query character {} has no clip in the gallery", q.character_id),
            ));
        }
        rankings.push(relevance);
    }
    rank_metrics(&rankings)
}
