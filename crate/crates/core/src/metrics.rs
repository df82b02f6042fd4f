//! Confidence scores and failure-detection metrics.
//!
//! Every metric takes per-sample scores (higher means more confident) and
//! accept flags: a sample should be accepted iff it is a known-class sample
//! the model classifies correctly. AUROC values are fractions in `[0, 1]`
//! and AURC is a mean risk in `[0, 1]`; [`FailureReport`] converts to
//! percent and per-mille.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arithmetic::ComposedModel;
use crate::error::{Error, Result};
use crate::tensor::{softmax_logsumexp, Matrix};
use crate::wildbench::{Source, WildMixture};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    #[serde(rename = "msp")]
    Msp,
    #[serde(rename = "maxlogit")]
    MaxLogit,
    #[serde(rename = "energy")]
    Energy,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::MaxLogit => "maxlogit",
            ScoreKind::Energy => "energy",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(ScoreKind::Msp),
            "maxlogit" => Ok(ScoreKind::MaxLogit),
            "energy" => Ok(ScoreKind::Energy),
            _ => Err(Error::config(format!(
                "unknown score `{s}`; expected msp, maxlogit or energy"
            ))),
        }
    }
}

/// Per-row confidence. Energy is reported as `logsumexp(logits)`, the
/// negated free energy, so that higher is more confident for every kind.
pub fn scores(logits: &Matrix, kind: ScoreKind) -> Result<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            Ok(match kind {
                ScoreKind::Msp => softmax_logsumexp(row)?.0.into_iter().fold(f64::NEG_INFINITY, f64::max),
                ScoreKind::MaxLogit => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ScoreKind::Energy => softmax_logsumexp(row)?.1,
            })
        })
        .collect()
}

/// Sort rule shared by the risk-coverage curve and its reports.
pub const TIE_RULE: &str = "score descending, ties by input index";

fn check_finite(scores: &[f64]) -> Result<()> {
    match scores.iter().find(|s| !s.is_finite()) {
        Some(s) => Err(Error::Numeric(format!("non-finite confidence score {s}"))),
        None => Ok(()),
    }
}

fn check_sets(pos: &[f64], neg: &[f64], metric: &str) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract(format!(
            "{metric} needs accept and reject samples; got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    check_finite(pos)?;
    check_finite(neg)
}

/// Splits scores by accept flag into `(positives, negatives)`.
pub fn split_by_label(scores: &[f64], accept: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != accept.len() {
        return Err(Error::contract(format!(
            "{} scores but {} accept flags",
            scores.len(),
            accept.len()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &a) in scores.iter().zip(accept) {
        if a {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    Ok((pos, neg))
}

/// `P(pos > neg) + P(pos = neg) / 2` over all pairs, via midranks.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_sets(pos, neg, "AUROC")?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of negatives scoring `>= t`, where `t` is the largest positive
/// score at which at least 95% of positives score `>= t`.
pub fn fpr_at_95_tpr(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_sets(pos, neg, "FPR95")?;
    let mut sorted = pos.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Smallest k with 100 k >= 95 |pos|; ties at sorted[k-1] only add
    // positives, and any larger candidate keeps fewer than k.
    let k = (95 * pos.len()).div_ceil(100).max(1);
    let t = sorted[k - 1];
    Ok(neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64)
}

/// Selective risk at every coverage `k/n`, most confident first.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskCoverageCurve {
    /// `(coverage, risk)`, coverage strictly increasing up to 1.
    pub points: Vec<(f64, f64)>,
}

impl RiskCoverageCurve {
    /// Mean risk over all points, as a fraction.
    pub fn area(&self) -> f64 {
        self.points.iter().map(|&(_, r)| r).sum::<f64>() / self.points.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("coverage,risk\n");
        for (c, r) in &self.points {
            out.push_str(&format!("{c:.16e},{r:.16e}\n"));
        }
        out
    }
}

/// Sorted per [`TIE_RULE`].
pub fn risk_coverage(scores: &[f64], accept: &[bool]) -> Result<RiskCoverageCurve> {
    split_by_label(scores, accept)?;
    if scores.is_empty() {
        return Err(Error::contract("risk-coverage curve of an empty set"));
    }
    check_finite(scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n = scores.len() as f64;
    let mut errors = 0usize;
    let points = order
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            errors += usize::from(!accept[k]);
            ((i + 1) as f64 / n, errors as f64 / (i + 1) as f64)
        })
        .collect();
    Ok(RiskCoverageCurve { points })
}

/// Mean selective risk over all prefixes, as a fraction (x1000 for per-mille).
pub fn aurc(scores: &[f64], accept: &[bool]) -> Result<f64> {
    Ok(risk_coverage(scores, accept)?.area())
}

/// Harmonic mean of two AUCs, in whatever unit they share.
pub fn f_auc(auc_cov: f64, auc_sem: f64) -> Result<f64> {
    let denom = auc_cov + auc_sem;
    if denom == 0.0 {
        return Err(Error::contract("F-AUC of two zero AUCs"));
    }
    Ok(2.0 * auc_cov * auc_sem / denom)
}

/// One evaluation cell. AUC-type values in percent, AURC in per-mille.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub score: ScoreKind,
    pub aurc: f64,
    /// AURC over the shifted known-class samples alone.
    pub aurc_cov: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub auc_cov: f64,
    pub auc_sem: f64,
    pub f_auc: f64,
    /// Accuracy on the full shifted test set, in percent.
    pub accuracy: f64,
    pub n: usize,
    pub n_accept: usize,
}

/// Scores a mixture under `model` and computes every metric.
///
/// `auc_cov` separates correct from incorrect predictions among the
/// shifted samples; `auc_sem` separates shifted samples (positive) from
/// semantic outliers.
pub fn evaluate_mixture(model: &ComposedModel, mixture: &WildMixture, kind: ScoreKind) -> Result<FailureReport> {
    let k = model.base.num_classes();
    if let Some(bad) = mixture.labels.iter().flatten().find(|&&y| y >= k) {
        return Err(Error::contract(format!(
            "mixture label {bad} outside the model's {k} classes"
        )));
    }
    let s = scores(&model.forward(&mixture.inputs)?, kind)?;
    let pick = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> { (0..s.len()).filter(|&i| keep(i)).map(|i| s[i]).collect() };
    let is_cov = |i: usize| mixture.sources[i] == Source::Cov;
    let cov_right = pick(&|i| is_cov(i) && mixture.accept[i]);
    let cov_wrong = pick(&|i| is_cov(i) && !mixture.accept[i]);
    let cov_all = pick(&is_cov);
    let cov_accept: Vec<bool> = (0..s.len()).filter(|&i| is_cov(i)).map(|i| mixture.accept[i]).collect();
    let sem = pick(&|i| mixture.sources[i] == Source::Sem);
    let auc_cov = 100.0 * auroc(&cov_right, &cov_wrong)?;
    let auc_sem = 100.0 * auroc(&cov_all, &sem)?;
    let (pos, neg) = split_by_label(&s, &mixture.accept)?;
    let c = &mixture.counts;
    Ok(FailureReport {
        score: kind,
        aurc: 1000.0 * aurc(&s, &mixture.accept)?,
        aurc_cov: 1000.0 * aurc(&cov_all, &cov_accept)?,
        fpr95: 100.0 * fpr_at_95_tpr(&pos, &neg)?,
        auroc: 100.0 * auroc(&pos, &neg)?,
        auc_cov,
        auc_sem,
        f_auc: f_auc(auc_cov, auc_sem)?,
        accuracy: if c.cov_total == 0 {
            0.0
        } else {
            100.0 * c.cov_correct as f64 / c.cov_total as f64
        },
        n: mixture.len(),
        n_accept: mixture.accept.iter().filter(|&&a| a).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.7], &[0.8, 0.6]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.1], &[0.1, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn fpr95_example() {
        let pos: Vec<f64> = (1..=20).map(f64::from).collect();
        assert!((fpr_at_95_tpr(&pos, &[0.5, 1.5, 18.5]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(fpr_at_95_tpr(&[2.0, 3.0], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_sets_are_contract_errors() {
        assert!(matches!(auroc(&[1.0], &[]), Err(Error::Contract(_))));
        assert!(matches!(fpr_at_95_tpr(&[], &[1.0]), Err(Error::Contract(_))));
        assert!(matches!(aurc(&[], &[]), Err(Error::Contract(_))));
        assert!(matches!(f_auc(0.0, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn aurc_examples() {
        let v = aurc(&[0.9, 0.8, 0.7, 0.6], &[true, true, false, true]).unwrap();
        assert!((1000.0 * v - 145.833_333_333_333_3).abs() < 1e-9);
        assert_eq!(aurc(&[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(aurc(&[1.0, 2.0], &[false, false]).unwrap(), 1.0);
    }

    #[test]
    fn curve_ends_at_error_rate() {
        let c = risk_coverage(&[0.3, 0.1, 0.2], &[true, false, false]).unwrap();
        assert_eq!(c.points.last().copied(), Some((1.0, 2.0 / 3.0)));
    }

    #[test]
    fn score_kinds() {
        let logits = Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let msp = scores(&logits, ScoreKind::Msp).unwrap();
        assert!((msp[0] - 0.786_986_042_161_598_5).abs() < 1e-15);
        assert!((msp[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(scores(&logits, ScoreKind::MaxLogit).unwrap()[0], 2.0);
        let e = scores(&logits, ScoreKind::Energy).unwrap()[0];
        assert!((e - (2f64.exp() + 2.0).ln()).abs() < 1e-14);
    }
}
