//! Accuracy, confusion counts, ROC curves and AUC.
//!
//! Labels are `1` for the positive (damaged) class and `0` otherwise.
//! A score at or above the threshold is predicted positive.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confusion {
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::validation("no scores to evaluate"));
    }
    if scores.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::validation(format!("label {l} is not 0 or 1")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::validation(format!("score {s} is not finite")));
    }
    Ok(())
}

pub fn accuracy_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Confusion {
        threshold,
        n_pos: tp + fn_,
        n_neg: tn + fp,
        tp,
        fp,
        tn,
        fn_,
        accuracy: (tp + tn) as f64 / scores.len() as f64,
    })
}

/// Accuracy of always predicting the more frequent class.
pub fn majority_baseline(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("no labels"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok(pos.max(labels.len() - pos) as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Scores at or above this value are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// From `(0, 0)` at threshold `+∞` down through every distinct score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// ROC curve over every distinct score and its trapezoid-rule area.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_inputs(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (prev_tp, prev_fp) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid in count space, normalised once at the end.
        auc += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(RocCurve {
        points,
        auc: auc / (n_pos as f64 * n_neg as f64),
    })
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn auc_pairwise_oracle(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut wins = 0.0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: Confusion,
    /// `None` when the evaluated set holds a single class.
    pub roc: Option<RocCurve>,
}

impl EvalReport {
    pub fn auc(&self) -> Option<f64> {
        self.roc.as_ref().map(|r| r.auc)
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let c = &self.confusion;
        let mut out = String::new();
        let _ = writeln!(out, "n_pos={}", c.n_pos);
        let _ = writeln!(out, "n_neg={}", c.n_neg);
        let _ = writeln!(out, "threshold={}", c.threshold);
        let _ = writeln!(out, "accuracy={}", c.accuracy);
        let _ = writeln!(out, "tp={}", c.tp);
        let _ = writeln!(out, "fp={}", c.fp);
        let _ = writeln!(out, "tn={}", c.tn);
        let _ = writeln!(out, "fn={}", c.fn_);
        match self.auc() {
            Some(auc) => writeln!(out, "auc={auc}"),
            None => writeln!(out, "auc=undefined"),
        }
        .expect("writing to a String");
        out
    }

    /// `fpr,tpr` rows, empty apart from the header when AUC is undefined.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for p in self.roc.iter().flat_map(|r| &r.points) {
            let _ = writeln!(out, "{},{}", p.fpr, p.tpr);
        }
        out
    }

    pub fn write_files(&self, report_path: &Path, roc_path: &Path) -> Result<()> {
        std::fs::write(report_path, self.to_key_values()).map_err(|e| Error::io(report_path, e))?;
        std::fs::write(roc_path, self.roc_csv()).map_err(|e| Error::io(roc_path, e))
    }
}

pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    let confusion = accuracy_at(scores, labels, threshold)?;
    let roc = match roc_auc(scores, labels) {
        Ok(r) => Some(r),
        Err(Error::UndefinedAuc(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport { confusion, roc })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    FalsePositive,
    FalseNegative,
}

impl ErrorKind {
    pub fn code(self) -> &'static str {
        match self {
            ErrorKind::FalsePositive => "FP",
            ErrorKind::FalseNegative => "FN",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Misclassified {
    pub id: String,
    pub label: u8,
    pub score: f64,
    pub kind: ErrorKind,
}

/// Every wrong prediction, most confident (largest `|score − threshold|`)
/// first; equal confidence falls back to id order.
pub fn misclassification_export(
    ids: &[String],
    labels: &[u8],
    scores: &[f64],
    threshold: f64,
) -> Result<Vec<Misclassified>> {
    if ids.len() != scores.len() || labels.len() != scores.len() {
        return Err(Error::validation(format!(
            "misaligned inputs: {} ids, {} labels, {} scores",
            ids.len(),
            labels.len(),
            scores.len()
        )));
    }
    let mut out: Vec<Misclassified> = ids
        .iter()
        .zip(labels)
        .zip(scores)
        .filter_map(|((id, &label), &score)| {
            let kind = match (score >= threshold, label == 1) {
                (true, false) => ErrorKind::FalsePositive,
                (false, true) => ErrorKind::FalseNegative,
                _ => return None,
            };
            Some(Misclassified {
                id: id.clone(),
                label,
                score,
                kind,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        let ca = (a.score - threshold).abs();
        let cb = (b.score - threshold).abs();
        cb.partial_cmp(&ca).unwrap_or(Ordering::Equal).then_with(|| a.id.cmp(&b.id))
    });
    Ok(out)
}

pub fn misclassification_csv(rows: &[Misclassified]) -> String {
    let mut out = String::from("id,label,score,kind\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.id, r.label, r.score, r.kind.code());
    }
    out
}
