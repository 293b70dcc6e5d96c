//! Distance-threshold verification, test-pair construction and FRR/FAR/EER/AUC.
//!
//! A pair is accepted (predicted genuine) when its squared distance is `<= threshold`.
//! All rates are percentages.

use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::cotuplet::IdentityPool;
use crate::error::{Error, Result};
use crate::mgrnet::EmbeddingSet;
use crate::ndgrad::sq_euclidean;

/// Global embedding followed by r1..r6.
pub fn final_embedding(e: &EmbeddingSet) -> Result<Vec<f64>> {
    if e.regional.len() != 6 {
        return Err(Error::shape("final_embedding", format!("{} regional embeddings, expected 6", e.regional.len())));
    }
    let mut out = e.global.clone();
    for r in &e.regional {
        out.extend_from_slice(r);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Positive,
    Negative,
}

pub fn decide(reference: &[f64], questioned: &[f64], threshold: f64) -> Result<Decision> {
    let d = sq_euclidean(reference, questioned)?;
    Ok(if d <= threshold { Decision::Positive } else { Decision::Negative })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub reference: usize,
    pub questioned: usize,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

/// Per identity: every genuine-genuine pair as a positive, and as many
/// genuine-reference / forged-questioned negatives drawn uniformly without
/// replacement (all of them if fewer exist).
pub fn make_test_pairs<R: Rng>(pools: &[IdentityPool], rng: &mut R) -> Result<PairSet> {
    let mut pairs = Vec::new();
    for pool in pools {
        let n = pool.genuine.len();
        if n < 2 {
            return Err(Error::Sampling {
                identity: pool.identity.clone(),
                detail: format!("needs at least 2 genuine samples for positive pairs, has {n}"),
            });
        }
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(Pair { reference: pool.genuine[i], questioned: pool.genuine[j], positive: true });
            }
        }
        let negatives: Vec<(usize, usize)> = pool
            .genuine
            .iter()
            .flat_map(|&g| pool.forged.iter().map(move |&f| (g, f)))
            .collect();
        let mut chosen: Vec<(usize, usize)> = negatives.choose_multiple(rng, n * (n - 1) / 2).copied().collect();
        chosen.sort_unstable();
        pairs.extend(chosen.into_iter().map(|(g, f)| Pair { reference: g, questioned: f, positive: false }));
    }
    Ok(PairSet { pairs })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    /// Threshold of best accuracy.
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
    pub accuracy: f64,
    pub eer: f64,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Ordered by increasing threshold.
    pub roc: Vec<RocPoint>,
}

/// Candidate thresholds: one below every distance, midpoints between consecutive
/// distinct distances, one above every distance.
pub fn candidate_thresholds(distances: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = distances.to_vec();
    d.sort_by(f64::total_cmp);
    d.dedup();
    let mut out = Vec::with_capacity(d.len() + 1);
    out.push(d[0] - 1.0);
    out.extend(d.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(d[d.len() - 1] + 1.0);
    out
}

/// Metrics over `(distance, is_positive)` scores pooled across identities.
pub fn evaluate(scores: &[(f64, bool)]) -> Result<VerificationReport> {
    let positives = scores.iter().filter(|s| s.1).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    if let Some(bad) = scores.iter().find(|s| !s.0.is_finite()) {
        return Err(Error::Config(format!("non-finite distance {}", bad.0)));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let thresholds = candidate_thresholds(&scores.iter().map(|s| s.0).collect::<Vec<_>>());

    let (np, nn) = (positives as f64, negatives as f64);
    let mut roc = Vec::with_capacity(thresholds.len());
    let mut best: Option<(usize, usize)> = None;
    let (mut acc_pos, mut acc_neg, mut cursor) = (0usize, 0usize, 0usize);
    for (i, &t) in thresholds.iter().enumerate() {
        while cursor < sorted.len() && sorted[cursor].0 <= t {
            if sorted[cursor].1 {
                acc_pos += 1;
            } else {
                acc_neg += 1;
            }
            cursor += 1;
        }
        let correct = acc_pos + (negatives - acc_neg);
        if best.is_none_or(|(_, c)| correct > c) {
            best = Some((i, correct));
        }
        let tpr = 100.0 * acc_pos as f64 / np;
        roc.push(RocPoint { threshold: t, far: 100.0 * acc_neg as f64 / nn, frr: 100.0 - tpr, tpr });
    }
    let (bi, correct) = best.expect("at least two thresholds");
    Ok(VerificationReport {
        threshold: thresholds[bi],
        frr: roc[bi].frr,
        far: roc[bi].far,
        accuracy: 100.0 * correct as f64 / scores.len() as f64,
        eer: equal_error_rate(&roc),
        auc: trapezoid_auc(&roc),
        positives,
        negatives,
        roc,
    })
}

/// FRR falls from 100 to 0 and FAR rises from 0 to 100 along the curve; the EER is
/// interpolated linearly between the last point with FRR > FAR and the first with
/// FRR <= FAR.
fn equal_error_rate(roc: &[RocPoint]) -> f64 {
    let i = roc.iter().position(|p| p.frr <= p.far).expect("last point has FRR 0");
    if i == 0 || roc[i].frr == roc[i].far {
        return roc[i].frr;
    }
    let (a, b) = (&roc[i - 1], &roc[i]);
    let (da, db) = (a.frr - a.far, b.frr - b.far);
    let t = da / (da - db);
    a.frr + t * (b.frr - a.frr)
}

fn trapezoid_auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].far - w[0].far) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum::<f64>()
        / 100.0
}

impl VerificationReport {
    /// `metric,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("metric,value\n");
        for (k, v) in [
            ("threshold", self.threshold),
            ("frr", self.frr),
            ("far", self.far),
            ("accuracy", self.accuracy),
            ("eer", self.eer),
            ("auc", self.auc),
            ("positives", self.positives as f64),
            ("negatives", self.negatives as f64),
        ] {
            out.push_str(&format!("{k},{v}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// `threshold,far,frr,tpr` rows in threshold order.
    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut body = String::from("threshold,far,frr,tpr\n");
        for p in &self.roc {
            body.push_str(&format!("{},{},{},{}\n", p.threshold, p.far, p.frr, p.tpr));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
