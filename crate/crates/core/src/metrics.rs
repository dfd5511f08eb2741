//! Evaluation metrics for phrase-level segmentation: flat phrase mIoU,
//! strict accuracy at IoU thresholds, the per-description (sentence-level)
//! mean, and the Long/Complex/Overall subset report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{is_complex, is_long, AnnotatedDescription};
use crate::mask::{point_iou, MaskError, PhraseMaskSet, PointMask};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    EmptyInput,
    #[error("missing prediction for description {description_id}")]
    MissingPrediction { description_id: String },
    #[error("description {description_id} has {expected} phrases but {got} predicted masks")]
    PhraseCountMismatch {
        description_id: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Per-phrase IoUs of one description with its subset flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub description_id: String,
    pub ious: Vec<f64>,
    pub long: bool,
    pub complex: bool,
}

/// Point-level IoU of every predicted phrase mask against its ground truth.
///
/// Predictions and ground truths are aligned by list order; each pair must
/// agree on phrase count. Phrase order within a record is preserved.
pub fn evaluate(
    descriptions: &[AnnotatedDescription],
    predictions: &[Option<PhraseMaskSet>],
    ground_truth: &[Vec<PointMask>],
) -> Result<Vec<EvalRecord>, MetricsError> {
    let mut records = Vec::with_capacity(descriptions.len());
    for (i, desc) in descriptions.iter().enumerate() {
        let prediction = predictions[i]
            .as_ref()
            .ok_or_else(|| MetricsError::MissingPrediction {
                description_id: desc.description_id.clone(),
            })?;
        let gt = &ground_truth[i];
        if prediction.masks.len() != desc.phrases.len() || gt.len() != desc.phrases.len() {
            return Err(MetricsError::PhraseCountMismatch {
                description_id: desc.description_id.clone(),
                expected: desc.phrases.len(),
                got: prediction.masks.len(),
            });
        }
        let ious = prediction
            .masks
            .iter()
            .zip(gt)
            .map(|(mask, truth)| point_iou(mask, truth))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(EvalRecord {
            description_id: desc.description_id.clone(),
            ious,
            long: is_long(desc),
            complex: is_complex(desc),
        });
    }
    Ok(records)
}

/// Flat mean IoU over all phrases: total IoU mass divided by total phrase
/// count.
pub fn miou(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let phrases: usize = records.iter().map(|r| r.ious.len()).sum();
    let sum: f64 = records.iter().flat_map(|r| &r.ious).sum();
    Ok(sum / phrases as f64)
}

/// Fraction of phrases with IoU strictly greater than the threshold.
pub fn acc_at(records: &[EvalRecord], threshold: f64) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let phrases: usize = records.iter().map(|r| r.ious.len()).sum();
    let hits = records
        .iter()
        .flat_map(|r| &r.ious)
        .filter(|&&iou| iou > threshold)
        .count();
    Ok(hits as f64 / phrases as f64)
}

/// Sentence-level mean IoU: the mean over descriptions of each
/// description's own mean phrase IoU.
pub fn miou_s(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let sum: f64 = records
        .iter()
        .map(|r| r.ious.iter().sum::<f64>() / r.ious.len() as f64)
        .sum();
    Ok(sum / records.len() as f64)
}

/// The four metrics of one subset, with its sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub descriptions: usize,
    pub phrases: usize,
    pub acc_at_25: f64,
    pub acc_at_50: f64,
    pub miou_s: f64,
    pub miou: f64,
}

fn subset_metrics(records: &[EvalRecord]) -> Result<SubsetMetrics, MetricsError> {
    Ok(SubsetMetrics {
        descriptions: records.len(),
        phrases: records.iter().map(|r| r.ious.len()).sum(),
        acc_at_25: acc_at(records, 0.25)?,
        acc_at_50: acc_at(records, 0.5)?,
        miou_s: miou_s(records)?,
        miou: miou(records)?,
    })
}

/// All four metrics for Overall plus the Long and Complex subsets; empty
/// subsets are absent rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: SubsetMetrics,
    pub long: Option<SubsetMetrics>,
    pub complex: Option<SubsetMetrics>,
}

/// Roll evaluation records into the subset report.
pub fn report(records: &[EvalRecord]) -> Result<MetricsReport, MetricsError> {
    let overall = subset_metrics(records)?;
    let long: Vec<EvalRecord> = records.iter().filter(|r| r.long).cloned().collect();
    let complex: Vec<EvalRecord> = records.iter().filter(|r| r.complex).cloned().collect();
    Ok(MetricsReport {
        overall,
        long: if long.is_empty() {
            None
        } else {
            Some(subset_metrics(&long)?)
        },
        complex: if complex.is_empty() {
            None
        } else {
            Some(subset_metrics(&complex)?)
        },
    })
}

/// Render the report as an aligned table, one row per non-empty subset,
/// values in percent.
pub fn render_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<9} {:>7} {:>7} {:>7} {:>7}   {:>6} {:>7}",
        "Subset", "0.25", "0.5", "mIoU-S", "mIoU", "descs", "phrases"
    );
    let mut row = |name: &str, m: &SubsetMetrics| {
        let _ = writeln!(
            out,
            "{:<9} {:>7.1} {:>7.1} {:>7.1} {:>7.1}   {:>6} {:>7}",
            name,
            m.acc_at_25 * 100.0,
            m.acc_at_50 * 100.0,
            m.miou_s * 100.0,
            m.miou * 100.0,
            m.descriptions,
            m.phrases
        );
    };
    if let Some(long) = &report.long {
        row("Long", long);
    }
    if let Some(complex) = &report.complex {
        row("Complex", complex);
    }
    row("Overall", &report.overall);
    out
}

/// CSV export of the report (fractions, not percents).
pub fn to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("subset,acc_at_25,acc_at_50,miou_s,miou,descriptions,phrases\n");
    let mut row = |name: &str, m: &SubsetMetrics| {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{}",
            m.acc_at_25, m.acc_at_50, m.miou_s, m.miou, m.descriptions, m.phrases
        );
    };
    if let Some(long) = &report.long {
        row("long", long);
    }
    if let Some(complex) = &report.complex {
        row("complex", complex);
    }
    row("overall", &report.overall);
    out
}

/// Published summary statistics of the full-scale reference dataset, for
/// comparison when a user supplies the real record files.
pub const REFERENCE_AVG_LENGTH: f64 = 24.9;
pub const REFERENCE_LONG_FRACTION: f64 = 0.074;
pub const REFERENCE_AVG_MASKS: f64 = 2.9;
pub const REFERENCE_NUM_DESCRIPTIONS: usize = 54_432;
/// Tokenizer differences shift length-derived statistics; counts must match
/// exactly.
pub const REFERENCE_RELATIVE_TOLERANCE: f64 = 0.10;

/// One compared statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub within_tolerance: bool,
}

/// Outcome of comparing a dataset summary against the reference statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub checks: Vec<ReferenceCheck>,
    pub matches: bool,
}

/// Compare a computed summary against the published reference values:
/// ±10% relative on the length-derived statistics, exact on the
/// description count.
pub fn compare_reference_stats(summary: &crate::annotation::DatasetSummary) -> ReferenceComparison {
    let relative = |name: &str, expected: f64, actual: f64| {
        let within = (actual - expected).abs() <= REFERENCE_RELATIVE_TOLERANCE * expected;
        ReferenceCheck {
            name: name.to_string(),
            expected,
            actual,
            within_tolerance: within,
        }
    };
    let checks = vec![
        relative("avg_token_length", REFERENCE_AVG_LENGTH, summary.avg_token_length),
        relative("long_fraction", REFERENCE_LONG_FRACTION, summary.long_fraction),
        relative("avg_masks_per_text", REFERENCE_AVG_MASKS, summary.avg_masks_per_text),
        ReferenceCheck {
            name: "num_descriptions".into(),
            expected: REFERENCE_NUM_DESCRIPTIONS as f64,
            actual: summary.num_descriptions as f64,
            within_tolerance: summary.num_descriptions == REFERENCE_NUM_DESCRIPTIONS,
        },
    ];
    let matches = checks.iter().all(|c| c.within_tolerance);
    ReferenceComparison { checks, matches }
}
