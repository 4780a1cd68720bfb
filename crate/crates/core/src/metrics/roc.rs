//! ROC curves, AUC, TPR/TNR and empirical CDFs. The positive class is the
//! out-of-distribution one (`u = true`) throughout.

use crate::error::{Error, Result};

/// A ROC curve over the unique score thresholds, descending. The first
/// point is (0,0) (threshold above every score), the last is (1,1).
/// Samples count as detected when `score >= threshold`, so `points[i+1]`
/// is the operating point of `thresholds[i]`.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    /// `(false positive rate, true positive rate)` per point.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct YoudenPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

impl RocCurve {
    /// The threshold maximizing TPR - FPR (first one on ties).
    pub fn youden(&self) -> YoudenPoint {
        let mut best = YoudenPoint {
            threshold: f64::INFINITY,
            tpr: 0.0,
            fpr: 0.0,
        };
        let mut best_j = f64::NEG_INFINITY;
        for (i, &(fpr, tpr)) in self.points.iter().enumerate().skip(1) {
            let j = tpr - fpr;
            if j > best_j {
                best_j = j;
                best = YoudenPoint {
                    threshold: self.thresholds[i - 1],
                    tpr,
                    fpr,
                };
            }
        }
        best
    }
}

/// Builds the ROC curve and its trapezoid AUC. Tied scores collapse into a
/// single threshold step, which makes the trapezoid area equal the
/// Mann-Whitney pair statistic with half credit for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&u| u).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(
            "AUC undefined: both in-distribution and OOD samples are required".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut thresholds = Vec::new();
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut area2 = 0.0f64; // twice the raw area in count units
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (prev_tp, prev_fp) = (tp, fp);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        area2 += (fp - prev_fp) as f64 * (tp + prev_tp) as f64;
    }
    let auc = area2 / (2.0 * pos as f64 * neg as f64);
    Ok(RocCurve {
        thresholds,
        points,
        auc,
    })
}

/// True positive rate (fraction of OOD flagged) and true negative rate
/// (fraction of in-distribution retained).
pub fn tpr_tnr(flags: &[bool], labels: &[bool]) -> Result<(f64, f64)> {
    if flags.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} flags vs {} labels",
            flags.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&u| u).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(
            "TPR/TNR undefined: both classes are required".into(),
        ));
    }
    let tp = flags
        .iter()
        .zip(labels)
        .filter(|(&f, &u)| f && u)
        .count();
    let tn = flags
        .iter()
        .zip(labels)
        .filter(|(&f, &u)| !f && !u)
        .count();
    Ok((tp as f64 / pos as f64, tn as f64 / neg as f64))
}

/// Empirical CDF: `(value, fraction <= value)` per unique value, ascending.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}
