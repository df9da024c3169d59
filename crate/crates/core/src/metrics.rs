//! Detection metrics over scored ID/OoD splits.
//!
//! Scores are oriented so that higher means "more in-distribution".

use std::cmp::Ordering;

use serde::Serialize;
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0} scores are empty")]
    Empty(&'static str),
    #[error("{side} score at index {index} is not finite")]
    NonFinite { side: &'static str, index: usize },
    #[error("tpr target must lie in (0, 1], got {0}")]
    BadTarget(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// ID and OoD scores of one evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSplit<T> {
    id: Vec<T>,
    ood: Vec<T>,
}

impl<T: Scalar> ScoredSplit<T> {
    pub fn new(id: Vec<T>, ood: Vec<T>) -> Result<Self, MetricError> {
        for (side, v) in [("id", &id), ("ood", &ood)] {
            if v.is_empty() {
                return Err(MetricError::Empty(side));
            }
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(MetricError::NonFinite { side, index });
            }
        }
        Ok(ScoredSplit { id, ood })
    }

    pub fn id_scores(&self) -> &[T] {
        &self.id
    }

    pub fn ood_scores(&self) -> &[T] {
        &self.ood
    }

    /// The same split with every score negated.
    pub fn negated(&self) -> Self {
        ScoredSplit {
            id: self.id.iter().map(|&x| -x).collect(),
            ood: self.ood.iter().map(|&x| -x).collect(),
        }
    }
}

fn total<T: Scalar>(a: &T, b: &T) -> Ordering {
    // Scores are finite, so partial_cmp always succeeds.
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// `P(S_id > S_ood) + ½·P(S_id = S_ood)` over all ID×OoD pairs.
///
/// Sort-based, O(n log n). Pair counts are accumulated as integers
/// (wins counted twice, ties once) so the result is exact up to the final
/// division.
pub fn auroc<T: Scalar>(s: &ScoredSplit<T>) -> f64 {
    let mut all: Vec<(T, bool)> = s
        .id
        .iter()
        .map(|&x| (x, true))
        .chain(s.ood.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| total(&a.0, &b.0));

    let mut twice_u: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut id_here, mut ood_here) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                id_here += 1;
            } else {
                ood_here += 1;
            }
            j += 1;
        }
        twice_u += 2 * id_here * ood_below + id_here * ood_here;
        ood_below += ood_here;
        i = j;
    }
    let pairs = 2.0 * s.id.len() as f64 * s.ood.len() as f64;
    twice_u as f64 / pairs
}

/// Smallest number of ID samples whose fraction of `n` reaches `target`.
fn required_count(n: usize, target: f64) -> usize {
    let nf = n as f64;
    let mut k = ((target * nf).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / nf >= target {
        k -= 1;
    }
    while k < n && (k as f64) / nf < target {
        k += 1;
    }
    k
}

/// Threshold used by [`fpr_at_tpr`]: the largest score value `T*` such that
/// the fraction of ID scores `≥ T*` is at least `tpr_target`.
pub fn tpr_threshold<T: Scalar>(s: &ScoredSplit<T>, tpr_target: f64) -> Result<T, MetricError> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(MetricError::BadTarget(tpr_target));
    }
    let mut desc = s.id.clone();
    desc.sort_by(|a, b| total(b, a));
    Ok(desc[required_count(desc.len(), tpr_target) - 1])
}

/// Fraction of OoD scores accepted (`≥ T*`) at the threshold that keeps a
/// `tpr_target` fraction of ID scores. Empirical step ROC, no interpolation.
pub fn fpr_at_tpr<T: Scalar>(s: &ScoredSplit<T>, tpr_target: f64) -> Result<f64, MetricError> {
    let thr = tpr_threshold(s, tpr_target)?;
    let accepted = s.ood.iter().filter(|&&x| x >= thr).count();
    Ok(accepted as f64 / s.ood.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in row.iter().enumerate() {
        if best.is_none_or(|b| *x > row[b]) {
            best = Some(i);
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Scalar>(logit_rows: &[Vec<T>], labels: &[usize]) -> Result<f64, MetricError> {
    if logit_rows.len() != labels.len() {
        return Err(MetricError::Shape(format!(
            "{} logit rows but {} labels",
            logit_rows.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(MetricError::Empty("label"));
    }
    let hits = logit_rows
        .iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == Some(y))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub detector: String,
    /// Tapped layer the detector reads, if it reads a single one.
    pub layer: Option<String>,
    pub split_name: String,
    pub auroc: f64,
    pub fpr_at_tpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl ReportRow {
    pub fn evaluate<T: Scalar>(
        detector: impl Into<String>,
        layer: Option<String>,
        split_name: impl Into<String>,
        split: &ScoredSplit<T>,
    ) -> Self {
        ReportRow {
            detector: detector.into(),
            layer,
            split_name: split_name.into(),
            auroc: auroc(split),
            fpr_at_tpr95: fpr_at_tpr(split, 0.95).expect("0.95 is a valid target"),
            n_id: split.id.len(),
            n_ood: split.ood.len(),
        }
    }
}

pub const REPORT_HEADER: &str = "detector,layer,split_name,auroc,fpr_at_tpr95,n_id,n_ood";

/// Render report rows as CSV with [`REPORT_HEADER`].
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.detector,
            r.layer.as_deref().unwrap_or(""),
            r.split_name,
            r.auroc,
            r.fpr_at_tpr95,
            r.n_id,
            r.n_ood
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn split(id: &[f64], ood: &[f64]) -> ScoredSplit<f64> {
        ScoredSplit::new(id.to_vec(), ood.to_vec()).unwrap()
    }

    fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let (mut wins, mut ties) = (0u64, 0u64);
        for a in id {
            for b in ood {
                if a > b {
                    wins += 1;
                } else if a == b {
                    ties += 1;
                }
            }
        }
        (wins as f64 + 0.5 * ties as f64) / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&split(&[2.0, 3.0], &[0.0, 1.0])), 1.0);
        assert_eq!(auroc(&split(&[1.0; 5], &[1.0; 3])), 0.5);
        assert_eq!(auroc(&split(&[1.0, 3.0], &[2.0, 4.0])), 0.25);
    }

    #[test]
    fn fpr_examples() {
        let id: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = split(&id, &[3.0, 7.0]);
        assert_eq!(tpr_threshold(&s, 0.95).unwrap(), 6.0);
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.5);

        let s = split(&[10.0, 11.0, 12.0], &[0.0, 1.0]);
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.0);
    }

    #[test]
    fn fpr_same_distribution() {
        let v: Vec<f64> = (0..37).map(|i| (i * 7 % 37) as f64).collect();
        let s = split(&v, &v);
        let fpr = fpr_at_tpr(&s, 0.95).unwrap();
        assert!(fpr >= 0.95 - 1.0 / 37.0);
    }

    #[test]
    fn metric_errors() {
        assert_eq!(
            ScoredSplit::<f64>::new(vec![], vec![1.0]),
            Err(MetricError::Empty("id"))
        );
        assert_eq!(
            ScoredSplit::new(vec![1.0], vec![f64::NAN]),
            Err(MetricError::NonFinite { side: "ood", index: 0 })
        );
        let s = split(&[1.0], &[0.0]);
        assert!(fpr_at_tpr(&s, 0.0).is_err());
        assert!(fpr_at_tpr(&s, 1.5).is_err());
        assert!(fpr_at_tpr(&s, 1.0).is_ok());
    }

    #[test]
    fn accuracy_examples() {
        let onehot = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(accuracy(&onehot, &[0, 1]).unwrap(), 1.0);
        let zeros = vec![vec![0.0f32; 3]; 4];
        assert_eq!(accuracy(&zeros, &[0, 0, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&onehot, &[0, 0]).unwrap(), 0.5);
        assert!(accuracy(&onehot, &[0]).is_err());
    }

    #[test]
    fn f32_split() {
        let s = ScoredSplit::new(vec![1.0f32, 3.0], vec![2.0f32, 4.0]).unwrap();
        assert_eq!(auroc(&s), 0.25);
    }

    #[test]
    fn report_csv_layout() {
        let rows = vec![ReportRow::evaluate("ebo", Some("logits".into()), "far", &split(&[1.0], &[0.0]))];
        assert_eq!(
            report_csv(&rows),
            "detector,layer,split_name,auroc,fpr_at_tpr95,n_id,n_ood\nebo,logits,far,1,0,1,1\n"
        );
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        // Small integer grid so ties are common.
        prop::collection::vec((-8i32..8).prop_map(f64::from), 1..60)
    }

    proptest! {
        #[test]
        fn rank_equals_brute(id in scores(), ood in scores()) {
            prop_assert_eq!(auroc(&split(&id, &ood)), brute_auroc(&id, &ood));
        }

        #[test]
        fn orientation_complement(id in scores(), ood in scores()) {
            let s = split(&id, &ood);
            prop_assert_eq!(auroc(&s) + auroc(&s.negated()), 1.0);
        }

        #[test]
        fn monotone_transform_invariance(id in scores(), ood in scores()) {
            let s = split(&id, &ood);
            let f = |x: &f64| (x / 3.0).exp() + 2.0 * x;
            let t = split(&id.iter().map(f).collect::<Vec<_>>(), &ood.iter().map(f).collect::<Vec<_>>());
            prop_assert_eq!(auroc(&s), auroc(&t));
        }

        #[test]
        fn fpr_monotone_in_target(id in scores(), ood in scores(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let s = split(&id, &ood);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(fpr_at_tpr(&s, lo).unwrap() <= fpr_at_tpr(&s, hi).unwrap());
        }
    }
}
