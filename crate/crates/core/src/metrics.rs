//! Calibration and discrimination metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Maximum predicted probability.
    pub confidence: f64,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub logits: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn new(confidence: f64, correct: bool) -> Self {
        PredictionRecord {
            confidence,
            correct,
            logits: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub index: usize,
    pub count: usize,
    /// Mean accuracy of the bin; 0 for an empty bin.
    pub accuracy: f64,
    /// Mean confidence of the bin; 0 for an empty bin.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub ece: f64,
    pub auroc: Option<f64>,
    pub n_records: usize,
    pub bins: Vec<BinStats>,
}

/// Bin `m` covers `(m/n, (m+1)/n]`; bin 0 also takes confidence 0.
pub fn bin_index(confidence: f64, n_bins: usize) -> usize {
    let n = n_bins as f64;
    let upper = |m: usize| (m + 1) as f64 / n;
    let mut m = ((confidence * n).ceil() as usize).saturating_sub(1).min(n_bins - 1);
    while m > 0 && confidence <= upper(m - 1) {
        m -= 1;
    }
    while m + 1 < n_bins && confidence > upper(m) {
        m += 1;
    }
    m
}

fn check_records(records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::invalid(format!("confidence {} outside [0, 1]", r.confidence)));
        }
    }
    Ok(())
}

pub fn reliability_bins(records: &[PredictionRecord], n_bins: usize) -> Result<Vec<BinStats>> {
    if n_bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    check_records(records)?;
    let mut count = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    for r in records {
        let m = bin_index(r.confidence, n_bins);
        count[m] += 1;
        hits[m] += usize::from(r.correct);
        conf[m] += r.confidence;
    }
    Ok((0..n_bins)
        .map(|m| {
            let (accuracy, confidence) = if count[m] == 0 {
                (0.0, 0.0)
            } else {
                (hits[m] as f64 / count[m] as f64, conf[m] / count[m] as f64)
            };
            BinStats {
                index: m,
                count: count[m],
                accuracy,
                confidence,
            }
        })
        .collect())
}

fn ece_from_bins(bins: &[BinStats], n: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(records: &[PredictionRecord], n_bins: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("ECE of an empty record set"));
    }
    let bins = reliability_bins(records, n_bins)?;
    Ok(ece_from_bins(&bins, records.len()))
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("accuracy of an empty record set"));
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half. Exact pairwise count.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("AUROC needs at least one positive and one negative"));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    // Twice the Mann-Whitney U statistic, kept integral so the result is exact.
    let twice_u: u64 = pos
        .iter()
        .map(|p| {
            neg.iter()
                .map(|n| match p.partial_cmp(n) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                })
                .sum::<u64>()
        })
        .sum();
    Ok(twice_u as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// Geometric mean of token probabilities, computed in log space.
pub fn seq_confidence(token_probs: &[f64]) -> Result<f64> {
    if token_probs.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if let Some(p) = token_probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::invalid(format!("token probability {p} not in (0, 1]")));
    }
    let mean_log = token_probs.iter().map(|p| p.ln()).sum::<f64>() / token_probs.len() as f64;
    Ok(mean_log.exp())
}

/// AUROC separating the confidences of correct from incorrect predictions,
/// or `None` if either side is empty.
pub fn confidence_auroc(records: &[PredictionRecord]) -> Option<f64> {
    let (pos, neg): (Vec<&PredictionRecord>, Vec<&PredictionRecord>) = records.iter().partition(|r| r.correct);
    let pos: Vec<f64> = pos.iter().map(|r| r.confidence).collect();
    let neg: Vec<f64> = neg.iter().map(|r| r.confidence).collect();
    auroc(&pos, &neg).ok()
}

pub fn report(records: &[PredictionRecord], n_bins: usize) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::invalid("metrics of an empty record set"));
    }
    let bins = reliability_bins(records, n_bins)?;
    Ok(MetricsReport {
        accuracy: accuracy(records)?,
        ece: ece_from_bins(&bins, records.len()),
        auroc: confidence_auroc(records),
        n_records: records.len(),
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(c: f64, ok: bool) -> PredictionRecord {
        PredictionRecord::new(c, ok)
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.30000000000000004, 10), 3);
        assert_eq!(bin_index(0.7, 10), 6);
        assert_eq!(bin_index(0.5, 1), 0);
    }

    #[test]
    fn bins_reject_out_of_range() {
        assert!(reliability_bins(&[rec(1.2, true)], 10).is_err());
        assert!(reliability_bins(&[rec(-0.1, true)], 10).is_err());
        assert!(reliability_bins(&[rec(0.5, true)], 0).is_err());
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[rec(1.0, true), rec(1.0, true)], 10).unwrap(), 0.0);
        let records = [rec(0.95, true), rec(0.95, false), rec(0.65, true), rec(0.55, false)];
        assert!((ece(&records, 10).unwrap() - 0.45).abs() < 1e-15);
        assert!(ece(&[], 10).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 3], &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.6, 0.2]).unwrap(), 0.75);
        assert!(auroc(&[], &[0.1]).is_err());
    }

    #[test]
    fn seq_confidence_examples() {
        assert!((seq_confidence(&[0.7; 5]).unwrap() - 0.7).abs() < 1e-15);
        assert!((seq_confidence(&[0.9, 0.4]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(seq_confidence(&[0.33]).unwrap(), 0.33);
        assert!(seq_confidence(&[0.5, 0.0]).is_err());
        assert!(seq_confidence(&[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[rec(0.9, true), rec(0.2, true)]).unwrap(), 1.0);
        assert_eq!(accuracy(&[rec(0.9, true), rec(0.2, false)]).unwrap(), 0.5);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn report_is_consistent() {
        let records = [rec(0.95, true), rec(0.95, false), rec(0.65, true), rec(0.55, false)];
        let r = report(&records, 10).unwrap();
        assert_eq!(r.n_records, 4);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(r.auroc, Some(0.625));
    }
}
