//! JSON documents written and read by the CLI.

use lates_core::metrics::{MetricReport, ReliabilityBin};
use lates_core::stack::{AggregatorWeights, LossKind, TemperatureModel};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Nll,
    Square,
}

impl From<LossKind> for LossName {
    fn from(k: LossKind) -> Self {
        match k {
            LossKind::Nll => LossName::Nll,
            LossKind::Square => LossName::Square,
        }
    }
}

impl From<LossName> for LossKind {
    fn from(k: LossName) -> Self {
        match k {
            LossName::Nll => LossKind::Nll,
            LossName::Square => LossKind::Square,
        }
    }
}

/// A fitted calibrator as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CalibratorFile {
    Lates {
        beta: Vec<f64>,
        loss: LossName,
        d: usize,
        #[serde(rename = "K")]
        k: usize,
    },
    Temperature {
        tau: f64,
        loss: LossName,
        d: usize,
        #[serde(rename = "K")]
        k: usize,
    },
}

impl CalibratorFile {
    pub fn lates(weights: &AggregatorWeights, k: usize) -> Self {
        CalibratorFile::Lates {
            beta: weights.beta.clone(),
            loss: weights.loss_kind.into(),
            d: weights.beta.len(),
            k,
        }
    }

    pub fn temperature(model: &TemperatureModel, loss: LossKind, d: usize, k: usize) -> Self {
        CalibratorFile::Temperature {
            tau: model.tau(),
            loss: loss.into(),
            d,
            k,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            CalibratorFile::Lates { k, .. } | CalibratorFile::Temperature { k, .. } => *k,
        }
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        match self {
            CalibratorFile::Lates { beta, d, .. } => {
                if beta.len() != *d {
                    return Err(UsageError::new(format!("calibrator lists d = {d} but {} weights", beta.len())));
                }
                if beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
                    return Err(UsageError::new("calibrator weights must be finite and non-negative"));
                }
            }
            CalibratorFile::Temperature { tau, .. } => {
                if !(tau.is_finite() && *tau > 0.0) {
                    return Err(UsageError::new(format!("calibrator temperature must be positive, got {tau}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRecord {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

impl From<&ReliabilityBin> for BinRecord {
    fn from(b: &ReliabilityBin) -> Self {
        Self {
            lower: b.lower,
            upper: b.upper,
            count: b.count,
            accuracy: b.accuracy,
            mean_confidence: b.mean_confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub acc: f64,
    pub auc: Option<f64>,
    pub n: usize,
    pub bins: Vec<BinRecord>,
}

impl ReportRecord {
    pub fn new(r: &MetricReport, n: usize) -> Self {
        Self {
            ece: r.ece,
            nll: r.nll,
            brier: r.brier,
            acc: r.acc,
            auc: r.auc,
            n,
            bins: r.bins.iter().map(BinRecord::from).collect(),
        }
    }

    pub fn metric(&self, m: lates_core::metrics::Metric) -> Option<f64> {
        use lates_core::metrics::Metric;
        match m {
            Metric::Ece => Some(self.ece),
            Metric::Nll => Some(self.nll),
            Metric::Brier => Some(self.brier),
            Metric::Acc => Some(self.acc),
            Metric::Auc => self.auc,
        }
    }
}

/// One calibrator evaluated under several conditions (clean test data,
/// perturbed inputs, ...). Conditions pair up by name across files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub method: String,
    pub conditions: Vec<NamedReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub condition: String,
    pub report: ReportRecord,
}

impl ReportSet {
    /// Accepts a report set, a bare list of reports or a single report.
    pub fn from_json(text: &str, fallback_method: &str) -> serde_json::Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum AnyReports {
            Set(ReportSet),
            List(Vec<ReportRecord>),
            One(ReportRecord),
        }
        let named = |reports: Vec<ReportRecord>| ReportSet {
            method: fallback_method.to_owned(),
            conditions: reports
                .into_iter()
                .enumerate()
                .map(|(i, report)| NamedReport {
                    condition: format!("#{i}"),
                    report,
                })
                .collect(),
        };
        Ok(match serde_json::from_str(text)? {
            AnyReports::Set(s) => s,
            AnyReports::List(l) => named(l),
            AnyReports::One(r) => named(vec![r]),
        })
    }
}

/// Provenance sidecar for a dump; informational only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub model: String,
    pub split: String,
    pub n_examples: usize,
    pub n_classes: usize,
    pub layers: Vec<LayerEntry>,
    pub crc32: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: u32,
    pub dim: usize,
    pub is_final_logits: bool,
}

pub fn bins_csv(bins: &[BinRecord]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in bins {
        w.serialize(b)?;
    }
    Ok(w.into_inner()?)
}
