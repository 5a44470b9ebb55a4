//! Support recovery and localization scores for signed source estimates.
//!
//! Conventions for empty parts: a precision-recall half whose true part is
//! empty is skipped and the other half gets full weight; a transport half
//! where exactly one of the two parts is empty scores `max(M)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::geometry::CostMatrix;
use crate::uot::{exact_kantorovich, split_signed};

fn same_length(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return param(format!("lengths differ ({} vs {})", a.len(), b.len()));
    }
    Ok(())
}

/// Area under the precision-recall curve of `scores` against the labels
/// `positive`, which must contain at least one `true`.
///
/// Every distinct score is a threshold (ties form one step); the curve
/// starts at recall 0 with the precision of the first threshold and is
/// integrated with the trapezoidal rule in recall.
pub fn pr_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return param("scores and labels differ in length");
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::Domain("no positive labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut area = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut last: Option<(f64, f64)> = None;
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        let (r0, p0) = last.unwrap_or((0.0, precision));
        area += (recall - r0) * (precision + p0) / 2.0;
        last = Some((recall, precision));
    }
    Ok(area)
}

/// Mean of the precision-recall areas of the positive and negative parts.
pub fn signed_pr_auc(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    same_length(estimate, truth)?;
    let (ep, en) = split_signed(estimate);
    let (tp, tn) = split_signed(truth);
    let mut halves = Vec::with_capacity(2);
    for (scores, t) in [(ep, tp), (en, tn)] {
        let positive: Vec<bool> = t.iter().map(|&v| v > 0.0).collect();
        if positive.iter().any(|&p| p) {
            halves.push(pr_auc(&scores, &positive)?);
        }
    }
    if halves.is_empty() {
        return Err(Error::Domain("true source is zero; AUC is undefined".into()));
    }
    Ok(halves.iter().sum::<f64>() / halves.len() as f64)
}

fn normalized(x: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = x.iter().sum();
    (total > 0.0).then(|| x.iter().map(|v| v / total).collect())
}

/// Mean over the positive and negative parts of the exact transport cost
/// between the normalized parts (cm).
pub fn signed_emd(estimate: &[f64], truth: &[f64], cost: &CostMatrix) -> Result<f64> {
    same_length(estimate, truth)?;
    let (ep, en) = split_signed(estimate);
    let (tp, tn) = split_signed(truth);
    let mut total = 0.0;
    for (a, b) in [(ep, tp), (en, tn)] {
        total += match (normalized(&a), normalized(&b)) {
            (None, None) => 0.0,
            (Some(a), Some(b)) => exact_kantorovich(&a, &b, cost)?,
            _ => cost.max(),
        };
    }
    Ok(total / 2.0)
}

pub fn mse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    same_length(estimate, truth)?;
    if estimate.is_empty() {
        return param("empty vectors");
    }
    let sum: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / estimate.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectScores {
    pub auc: f64,
    pub emd: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub auc: f64,
    pub emd: f64,
    pub mse: f64,
    pub per_subject: Vec<SubjectScores>,
}

/// All three scores per subject and their means across subjects.
pub fn evaluate(estimates: &[Vec<f64>], truths: &[Vec<f64>], cost: &CostMatrix) -> Result<MetricReport> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return param("need one estimate per true source, and at least one");
    }
    let per_subject = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| {
            Ok(SubjectScores {
                auc: signed_pr_auc(e, t)?,
                emd: signed_emd(e, t, cost)?,
                mse: mse(e, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = per_subject.len() as f64;
    Ok(MetricReport {
        auc: per_subject.iter().map(|s| s.auc).sum::<f64>() / k,
        emd: per_subject.iter().map(|s| s.emd).sum::<f64>() / k,
        mse: per_subject.iter().map(|s| s.mse).sum::<f64>() / k,
        per_subject,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub trial: usize,
    pub model: String,
    pub subject: usize,
    pub auc: f64,
    pub emd_cm: f64,
    pub mse: f64,
}

pub fn write_report_csv<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn line_cost(p: usize) -> CostMatrix {
        CostMatrix::new(Array2::from_shape_fn((p, p), |(i, j)| (i as f64 - j as f64).abs())).unwrap()
    }

    #[test]
    fn perfect_estimate() {
        let truth = [0.0, 25.0, 0.0, -22.0, 0.0, 21.0];
        assert_eq!(signed_pr_auc(&truth, &truth).unwrap(), 1.0);
        assert_eq!(signed_emd(&truth, &truth, &line_cost(6)).unwrap(), 0.0);
        assert_eq!(mse(&truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn zero_estimate_scores_base_rate() {
        let truth = [0.0, 25.0, 0.0, 0.0, 0.0, 21.0, 0.0, 0.0];
        assert_eq!(signed_pr_auc(&[0.0; 8], &truth).unwrap(), 0.25);
    }

    #[test]
    fn displaced_source() {
        let m = line_cost(5);
        let truth = [0.0, 20.0, 0.0, 0.0, 0.0];
        let est = [0.0, 0.0, 0.0, 0.0, 3.0];
        assert_eq!(signed_emd(&est, &truth, &m).unwrap(), 0.5 * 3.0);
    }

    #[test]
    fn sign_error_costs_max_distance() {
        let m = line_cost(5);
        let truth = [0.0, 20.0, 0.0, 0.0, 0.0];
        let est = [0.0, -20.0, 0.0, 0.0, 0.0];
        assert_eq!(signed_emd(&est, &truth, &m).unwrap(), 4.0);
    }

    #[test]
    fn mse_hand_values() {
        assert_eq!(mse(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5);
        assert!((mse(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ties_form_one_step() {
        // both items at score 1, one positive: single point (1, 0.5)
        assert_eq!(pr_auc(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
        // ranking positive first: (1, 1) then (1, 0.5)
        assert_eq!(pr_auc(&[2.0, 1.0], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn zero_truth_rejected() {
        assert!(signed_pr_auc(&[1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn report_csv_columns() {
        let rows = vec![ReportRow {
            trial: 0,
            model: "lasso".into(),
            subject: 1,
            auc: 0.5,
            emd_cm: 1.25,
            mse: 2.0,
        }];
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "trial,model,subject,auc,emd_cm,mse\n0,lasso,1,0.5,1.25,2.0\n"
        );
    }
}
