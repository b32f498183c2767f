//! Training objectives for the adapter: a prosody/semantic regression term
//! and an anchor-based contrastive term. Each loss exists twice, as a plain
//! value function (the reference the tape composites are tested against)
//! and as a tape construction used during training.

use crate::error::{Error, Result};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::{cosine, Tensor};

/// Regression part for one example: Euclidean distance between predicted and
/// target prosody vector plus `lambda_sem` times the distance between the
/// semantic head output and the teacher rationale. With `squared` both
/// distances are squared.
pub fn distill_loss(
    p_hat: &[f64],
    p_tgt: &[f64],
    h_adapter: &[f64],
    h_teacher: &[f64],
    lambda_sem: f64,
    squared: bool,
) -> Result<f64> {
    if p_hat.len() != p_tgt.len() || h_adapter.len() != h_teacher.len() {
        return Err(Error::shape("distill_loss", "prediction/target length mismatch"));
    }
    let dist = |a: &[f64], b: &[f64]| {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        if squared {
            sq
        } else {
            sq.sqrt()
        }
    };
    Ok(dist(p_hat, p_tgt) + lambda_sem * dist(h_adapter, h_teacher))
}

/// Anchor contrastive loss for one example: softmax cross entropy over
/// cosine similarities at temperature `tau`, positive first, negatives
/// after. Zero vectors have no direction and are rejected.
pub fn contrastive_loss(z: &[f64], z_pos: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::domain("contrastive_loss", format!("tau {tau} must be positive")));
    }
    let check = |v: &[f64], what: &str| -> Result<()> {
        if v.iter().map(|x| x * x).sum::<f64>() == 0.0 {
            return Err(Error::domain("contrastive_loss", format!("zero-norm {what} vector")));
        }
        Ok(())
    };
    check(z, "query")?;
    check(z_pos, "positive")?;
    let mut sims = Vec::with_capacity(1 + negatives.len());
    sims.push(cosine(z, z_pos) / tau);
    for n in negatives {
        check(n, "negative")?;
        sims.push(cosine(z, n) / tau);
    }
    let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + sims.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    Ok(lse - sims[0])
}

/// Mean over rows of the per-row distance between `pred` and `target`
/// (plain or squared Euclidean). Both inputs live on the tape; `target`
/// is normally a leaf.
pub fn norm_term(tape: &mut Tape, pred: Var, target: Var, squared: bool) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let per_row = if squared {
        let sq = tape.mul(diff, diff)?;
        tape.sum_rows(sq)
    } else {
        tape.l2norm_rows(diff)
    };
    Ok(tape.mean(per_row))
}

/// Batch contrastive term. `z_rows[i]` is the unnormalized 1 x d projection
/// of example i, `anchors[i]` its character anchor, `labels[i]` a character
/// index; in-batch rows with a different label act as negatives and receive
/// gradient. Examples whose batch holds no negatives contribute exactly 0.
pub fn contrastive_term(
    tape: &mut Tape,
    z_rows: &[Var],
    anchors: &[Tensor],
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    if z_rows.len() != anchors.len() || z_rows.len() != labels.len() {
        return Err(Error::shape("contrastive_term", "rows/anchors/labels length mismatch"));
    }
    if tau <= 0.0 {
        return Err(Error::domain("contrastive_term", format!("tau {tau} must be positive")));
    }
    let z_norm: Vec<Var> = z_rows
        .iter()
        .map(|&z| {
            let n = tape.l2norm_rows(z);
            tape.div_cols(z, n)
        })
        .collect::<Result<_>>()?;
    let mut per_example = Vec::with_capacity(z_rows.len());
    for i in 0..z_rows.len() {
        let anchor = tape.leaf(anchors[i].clone());
        let an = tape.l2norm_rows(anchor);
        let anchor = tape.div_cols(anchor, an)?;
        let mut cands = vec![anchor];
        for j in 0..z_rows.len() {
            if labels[j] != labels[i] {
                cands.push(z_norm[j]);
            }
        }
        let cand = tape.concat_rows(&cands)?;
        let cand_t = tape.transpose(cand);
        let sims = tape.matmul(z_norm[i], cand_t)?;
        let sims = tape.scale(sims, 1.0 / tau);
        let lse = tape.logsumexp_rows(sims);
        let pos = tape.slice_cols(sims, 0, 1)?;
        per_example.push(tape.sub(lse, pos)?);
    }
    let stacked = tape.concat_rows(&per_example)?;
    Ok(tape.mean(stacked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;
    use rand::Rng;

    #[test]
    fn distill_zero_on_exact_match() {
        let p = [0.5, 0.4, 0.3, -0.1, 0.2];
        let h = vec![1.0, -2.0, 0.5];
        assert_eq!(distill_loss(&p, &p, &h, &h, 0.5, false).unwrap(), 0.0);
        assert_eq!(distill_loss(&p, &p, &h, &h, 0.5, true).unwrap(), 0.0);
    }

    #[test]
    fn distill_hand_value_three_four_five() {
        // Prosody error (0.3, 0.4, 0, 0, 0) has norm 0.5; semantic term zero.
        let p_hat = [0.3, 0.4, 0.0, 0.0, 0.0];
        let p_tgt = [0.0; 5];
        let h = vec![7.0, -1.0];
        let v = distill_loss(&p_hat, &p_tgt, &h, &h, 0.5, false).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let v2 = distill_loss(&p_hat, &p_tgt, &h, &h, 0.5, true).unwrap();
        assert!((v2 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn distill_lambda_zero_ignores_semantic_branch() {
        let p_hat = [0.1, 0.2, 0.3, 0.0, 0.0];
        let p_tgt = [0.0; 5];
        let a = distill_loss(&p_hat, &p_tgt, &[1.0, 2.0], &[0.0, 0.0], 0.0, false).unwrap();
        let b = distill_loss(&p_hat, &p_tgt, &[9.0, -9.0], &[0.0, 0.0], 0.0, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn contrastive_hand_values() {
        let z = vec![1.0, 0.0, 0.0];
        let negs = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        // cos(pos) = 1, both negatives 0, tau = 1: -ln(e / (e + 2)).
        let v = contrastive_loss(&z, &z, &negs, 1.0).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 2.0)).ln();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");

        // All candidates identical: uniform softmax over k entries gives ln k.
        let same = vec![z.clone(), z.clone(), z.clone()];
        let v = contrastive_loss(&z, &z, &same, 1.0).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);

        // Sharp temperature with the positive strictly largest collapses to 0.
        let v = contrastive_loss(&z, &z, &[vec![1.0, 1.0, 0.0]], 0.01).unwrap();
        assert!(v.abs() < 1e-10);
    }

    #[test]
    fn contrastive_is_scale_invariant_and_rejects_zero_vectors() {
        let z = vec![0.3, -0.2, 0.9];
        let pos = vec![0.25, -0.1, 0.8];
        let negs = vec![vec![-0.5, 0.4, 0.1]];
        let a = contrastive_loss(&z, &pos, &negs, 0.07).unwrap();
        let scaled: Vec<f64> = z.iter().map(|v| v * 37.0).collect();
        let b = contrastive_loss(&scaled, &pos, &negs, 0.07).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(contrastive_loss(&[0.0, 0.0], &pos[..2], &[], 0.07).is_err());
        assert!(contrastive_loss(&z, &pos, &negs, 0.0).is_err());
    }

    #[test]
    fn tape_norm_term_matches_value_oracle() {
        let mut rng = Seed(11).stream("losses");
        for squared in [false, true] {
            let pred_t = Tensor::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
            let tgt_t = Tensor::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
            let mut tape = Tape::new();
            let pred = tape.leaf(pred_t.clone());
            let tgt = tape.leaf(tgt_t.clone());
            let term = norm_term(&mut tape, pred, tgt, squared).unwrap();
            let got = tape.value(term).scalar().unwrap();
            let mut want = 0.0;
            for r in 0..4 {
                let d = distill_loss(pred_t.row(r), tgt_t.row(r), &[], &[], 0.0, squared).unwrap();
                want += d / 4.0;
            }
            assert!((got - want).abs() < 1e-12, "squared={squared}: {got} vs {want}");
        }
    }

    #[test]
    fn tape_contrastive_matches_value_oracle_and_reaches_negatives() {
        let mut rng = Seed(12).stream("losses2");
        let n = 5;
        let d = 8;
        let rows: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_fn(1, d, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let anchors: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_fn(1, d, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let labels = vec![0, 1, 0, 2, 1];
        let tau = 0.07;

        let mut tape = Tape::new();
        let vars: Vec<Var> = rows.iter().map(|t| tape.leaf(t.clone())).collect();
        let term = contrastive_term(&mut tape, &vars, &anchors, &labels, tau).unwrap();
        let got = tape.value(term).scalar().unwrap();

        let mut want = 0.0;
        for i in 0..n {
            let negs: Vec<Vec<f64>> = (0..n)
                .filter(|&j| labels[j] != labels[i])
                .map(|j| rows[j].row(0).to_vec())
                .collect();
            want += contrastive_loss(rows[i].row(0), anchors[i].row(0), &negs, tau).unwrap()
                / n as f64;
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        tape.backward(term).unwrap();
        // Example 3 is the only label-2 row, so it appears as a negative for
        // every other example and must collect gradient through that path.
        let g = tape.grad(vars[3]);
        assert!(g.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_character_batch_contributes_zero() {
        let rows = vec![
            Tensor::row_vec(vec![1.0, 2.0, 0.5]),
            Tensor::row_vec(vec![-1.0, 0.5, 0.25]),
        ];
        let anchors = vec![
            Tensor::row_vec(vec![0.5, 0.5, 0.5]),
            Tensor::row_vec(vec![0.5, 0.5, 0.5]),
        ];
        let mut tape = Tape::new();
        let vars: Vec<Var> = rows.iter().map(|t| tape.leaf(t.clone())).collect();
        let term = contrastive_term(&mut tape, &vars, &anchors, &[4, 4], 0.07).unwrap();
        assert_eq!(tape.value(term).scalar().unwrap(), 0.0);
    }
}
