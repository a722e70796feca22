//! Calibration and discrimination metrics over a probability matrix.
//!
//! All metrics take `n × K` row-stochastic predictions and integer labels.
//! The predicted class is the argmax with ties to the lowest index, and the
//! confidence is the maximum probability.

use alloc::vec::Vec;

use crate::error::invalid_arg;
use crate::numeric::{argmax, pairwise_mean, pairwise_sum};
use crate::stack::{check_labels, loss_value, square_loss_row, LossKind};
use crate::{Error, Matrix, Result};

pub const DEFAULT_BINS: usize = 10;

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Fraction correct; 0 for an empty bin.
    pub accuracy: f64,
    /// Mean max-probability; 0 for an empty bin.
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub acc: f64,
    /// `None` when every prediction is correct or every one is wrong.
    pub auc: Option<f64>,
    pub bins: Vec<ReliabilityBin>,
}

/// The five reported metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ece,
    Nll,
    Brier,
    Acc,
    Auc,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Ece, Metric::Nll, Metric::Brier, Metric::Acc, Metric::Auc];

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Acc | Metric::Auc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ece => "ece",
            Metric::Nll => "nll",
            Metric::Brier => "brier",
            Metric::Acc => "acc",
            Metric::Auc => "auc",
        }
    }

    pub fn of(self, report: &MetricReport) -> Option<f64> {
        match self {
            Metric::Ece => Some(report.ece),
            Metric::Nll => Some(report.nll),
            Metric::Brier => Some(report.brier),
            Metric::Acc => Some(report.acc),
            Metric::Auc => report.auc,
        }
    }
}

impl core::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid_arg!("unknown metric {s:?}"))
    }
}

fn check_probs(probs: &Matrix<f64>, labels: &[u32]) -> Result<()> {
    check_labels(probs.rows(), probs.cols(), labels)?;
    for (i, row) in probs.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid_arg!("row {i} of the probability matrix is not on the simplex"));
        }
    }
    Ok(())
}

/// `(confidence, correct)` per example.
fn confidences(probs: &Matrix<f64>, labels: &[u32]) -> Vec<(f64, bool)> {
    probs
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| {
            let c = argmax(row);
            (row[c], c == y as usize)
        })
        .collect()
}

/// Confidence ECE with `m` equal-width bins `[j/m, (j+1)/m)`, the top bin
/// closed.
pub fn ece(probs: &Matrix<f64>, labels: &[u32], m: usize) -> Result<(f64, Vec<ReliabilityBin>)> {
    if m == 0 {
        return Err(invalid_arg!("ECE needs at least one bin"));
    }
    check_probs(probs, labels)?;
    let mut members: Vec<Vec<(f64, bool)>> = (0..m).map(|_| Vec::new()).collect();
    for (conf, ok) in confidences(probs, labels) {
        let j = ((conf * m as f64) as usize).min(m - 1);
        members[j].push((conf, ok));
    }
    let bins: Vec<ReliabilityBin> = members
        .iter()
        .enumerate()
        .map(|(j, items)| {
            let count = items.len();
            let (accuracy, mean_confidence) = if count == 0 {
                (0.0, 0.0)
            } else {
                let confs: Vec<f64> = items.iter().map(|&(c, _)| c).collect();
                let hits = items.iter().filter(|&&(_, ok)| ok).count();
                (hits as f64 / count as f64, pairwise_mean(&confs))
            };
            ReliabilityBin {
                lower: j as f64 / m as f64,
                upper: (j + 1) as f64 / m as f64,
                count,
                accuracy,
                mean_confidence,
            }
        })
        .collect();
    Ok((ece_from_bins(&bins), bins))
}

/// `Σ_j (|B_j| / n) |acc(B_j) − conf(B_j)|`.
pub fn ece_from_bins(bins: &[ReliabilityBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    let terms: Vec<f64> = bins
        .iter()
        .map(|b| (b.count as f64 / n as f64) * (b.accuracy - b.mean_confidence).abs())
        .collect();
    pairwise_sum(&terms)
}

/// Mean of `Σ_y p_y² − 2 p_label`, in `[−1, 1]`.
pub fn brier(probs: &Matrix<f64>, labels: &[u32]) -> Result<f64> {
    check_probs(probs, labels)?;
    let per: Vec<f64> = probs
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| row.iter().map(|p| p * p).sum::<f64>() - 2.0 * row[y as usize])
        .collect();
    Ok(pairwise_mean(&per))
}

/// Mean `Σ_y (p_y − 1[y = label])²`; equals [`brier`] + 1.
pub fn square_loss(probs: &Matrix<f64>, labels: &[u32]) -> Result<f64> {
    check_probs(probs, labels)?;
    let per: Vec<f64> = probs
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| square_loss_row(row, y as usize))
        .collect();
    Ok(pairwise_mean(&per))
}

pub fn nll(probs: &Matrix<f64>, labels: &[u32]) -> Result<f64> {
    check_probs(probs, labels)?;
    Ok(loss_value(probs, labels, LossKind::Nll)?.mean)
}

pub fn accuracy(probs: &Matrix<f64>, labels: &[u32]) -> Result<f64> {
    check_probs(probs, labels)?;
    let hits = confidences(probs, labels).iter().filter(|&&(_, ok)| ok).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via the Mann–Whitney rank sum with mid-ranks.
pub fn auroc_scores(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch {
            what: "score count vs flag count",
            expected: scores.len(),
            found: positive.len(),
        });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(alloc::format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| positive[k]).count();
        rank_sum_pos += mid * pos_in_tie as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Correctness-detection AUROC: confidence as the score, "prediction is
/// correct" as the positive class.
pub fn auroc(probs: &Matrix<f64>, labels: &[u32]) -> Result<f64> {
    check_probs(probs, labels)?;
    let (scores, correct): (Vec<f64>, Vec<bool>) = confidences(probs, labels).into_iter().unzip();
    auroc_scores(&scores, &correct)
}

/// Macro-averaged one-vs-rest AUROC over classes that occur both as label
/// and non-label.
pub fn auroc_one_vs_rest(probs: &Matrix<f64>, labels: &[u32]) -> Result<f64> {
    check_probs(probs, labels)?;
    let mut per_class = Vec::new();
    for c in 0..probs.cols() {
        let scores: Vec<f64> = probs.iter_rows().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y as usize == c).collect();
        if let Ok(a) = auroc_scores(&scores, &pos) {
            per_class.push(a);
        }
    }
    if per_class.is_empty() {
        return Err(Error::Undefined("no class has both positives and negatives".into()));
    }
    Ok(pairwise_mean(&per_class))
}

/// All five metrics plus the reliability table.
pub fn evaluate(probs: &Matrix<f64>, labels: &[u32], bins: usize) -> Result<MetricReport> {
    let (ece, table) = ece(probs, labels, bins)?;
    let auc = match auroc(probs, labels) {
        Ok(a) => Some(a),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        ece,
        nll: nll(probs, labels)?,
        brier: brier(probs, labels)?,
        acc: accuracy(probs, labels)?,
        auc,
        bins: table,
    })
}

/// Percentage improvement of `improved` over `baseline`; positive means
/// better, whichever direction the metric runs.
pub fn relative_gain(baseline: f64, improved: f64, higher_is_better: bool) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::Undefined("relative gain against a zero baseline".into()));
    }
    let gain = 100.0 * (baseline - improved) / baseline.abs();
    Ok(if higher_is_better { -gain } else { gain })
}
