//! Accuracy and calibration metrics over equal-width confidence bins.
//!
//! Bin `i` of `M` covers `[i/M, (i+1)/M)`; the last bin is closed at 1.0.
//! Empty bins carry no statistics, contribute nothing to ECE and are skipped
//! by MCE.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_NORM_DEGREE: f64 = 1.0;

/// Tolerance on row sums when deriving predictions from a probability matrix.
const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Predicted class, confidence and true label for each of `N` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    predicted: Vec<usize>,
    confidence: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    probs: Option<Matrix>,
}

impl PredictionSet {
    pub fn new(
        predicted: Vec<usize>,
        confidence: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Data("prediction set is empty".into()));
        }
        if predicted.len() != n || confidence.len() != n {
            return Err(Error::dim(
                "PredictionSet",
                format!("{n} labels"),
                format!(
                    "{} predictions / {} confidences",
                    predicted.len(),
                    confidence.len()
                ),
            ));
        }
        for (i, &c) in confidence.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Domain(format!(
                    "confidence {c} at index {i} not in [0, 1]"
                )));
            }
        }
        for v in [&predicted, &labels] {
            if let Some((index, &label)) = v.iter().enumerate().find(|(_, &l)| l >= classes) {
                return Err(Error::Label {
                    index,
                    label,
                    classes,
                });
            }
        }
        Ok(PredictionSet {
            predicted,
            confidence,
            labels,
            classes,
            probs: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn probs(&self) -> Option<&Matrix> {
        self.probs.as_ref()
    }

    pub fn is_correct(&self, i: usize) -> bool {
        self.predicted[i] == self.labels[i]
    }
}

/// Index of the row maximum, ties going to the lowest index.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Builds a [`PredictionSet`] from per-sample probability rows: prediction is
/// the row argmax (lowest index on ties), confidence the row maximum.
pub fn predictions_from_probs(probs: &Matrix, labels: &[usize]) -> Result<PredictionSet> {
    if probs.rows() != labels.len() {
        return Err(Error::dim(
            "predictions_from_probs",
            format!("probs {}", probs.shape_string()),
            format!("{} labels", labels.len()),
        ));
    }
    if probs.cols() == 0 {
        return Err(Error::Data("probability matrix has no classes".into()));
    }
    let mut predicted = Vec::with_capacity(labels.len());
    let mut confidence = Vec::with_capacity(labels.len());
    for (r, row) in probs.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Domain(format!(
                "row {r} is not a probability vector"
            )));
        }
        let (c, p) = argmax(row);
        predicted.push(c);
        confidence.push(p);
    }
    let mut set = PredictionSet::new(predicted, confidence, labels.to_vec(), probs.cols())?;
    set.probs = Some(probs.clone());
    Ok(set)
}

/// Bin index of `confidence` among `bins` equal-width bins.
///
/// The floor of `confidence · bins` is taken on the exact product, not the
/// rounded one, so a value just below an edge never lands in the bin above.
pub fn assign_bin(confidence: f64, bins: usize) -> Result<usize> {
    if bins == 0 {
        return Err(Error::Config("number of bins must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::Domain(format!(
            "confidence {confidence} not in [0, 1]"
        )));
    }
    let m = bins as f64;
    let product = confidence * m;
    // product + residual == confidence * m exactly
    let residual = confidence.mul_add(m, -product);
    let mut index = product.floor();
    if index == product && residual < 0.0 {
        index -= 1.0;
    }
    Ok((index.max(0.0) as usize).min(bins - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinStats {
    pub bin_index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_confidence: Option<f64>,
    /// `None` for an empty bin.
    pub mean_accuracy: Option<f64>,
}

impl BinStats {
    pub fn gap(&self) -> Option<f64> {
        Some((self.mean_accuracy? - self.mean_confidence?).abs())
    }
}

pub fn reliability_bins(pred: &PredictionSet, bins: usize) -> Result<Vec<BinStats>> {
    let mut counts = vec![0usize; bins.max(1)];
    let mut conf_sum = vec![0.0; bins.max(1)];
    let mut correct = vec![0usize; bins.max(1)];
    for (i, &c) in pred.confidence().iter().enumerate() {
        let b = assign_bin(c, bins)?;
        counts[b] += 1;
        conf_sum[b] += c;
        correct[b] += usize::from(pred.is_correct(i));
    }
    let m = bins as f64;
    Ok((0..bins)
        .map(|b| {
            let n = counts[b];
            BinStats {
                bin_index: b,
                lower: b as f64 / m,
                upper: (b + 1) as f64 / m,
                count: n,
                mean_confidence: (n > 0).then(|| conf_sum[b] / n as f64),
                mean_accuracy: (n > 0).then(|| correct[b] as f64 / n as f64),
            }
        })
        .collect())
}

/// `(Σ_m |B_m|/N · |acc_m − conf_m|^d)^(1/d)`; for `d = 1` the bin-weighted
/// mean absolute gap.
pub fn ece(bins: &[BinStats], sample_count: usize, norm_degree: f64) -> Result<f64> {
    if !(norm_degree >= 1.0 && norm_degree.is_finite()) {
        return Err(Error::Config(format!(
            "norm degree {norm_degree} must be >= 1"
        )));
    }
    let total: usize = bins.iter().map(|b| b.count).sum();
    if total != sample_count || sample_count == 0 {
        return Err(Error::Data(format!(
            "bin counts sum to {total} but sample count is {sample_count}"
        )));
    }
    let n = sample_count as f64;
    let unit = norm_degree == 1.0;
    let sum: f64 = bins
        .iter()
        .filter_map(|b| {
            let gap = b.gap()?;
            let term = if unit { gap } else { gap.powf(norm_degree) };
            Some(b.count as f64 / n * term)
        })
        .sum();
    Ok(if unit {
        sum
    } else {
        sum.powf(1.0 / norm_degree)
    })
}

/// Largest `|acc − conf|` over non-empty bins.
pub fn mce(bins: &[BinStats]) -> Result<f64> {
    bins.iter()
        .filter_map(BinStats::gap)
        .reduce(f64::max)
        .ok_or_else(|| Error::Data("MCE over bins that are all empty".into()))
}

pub fn accuracy(pred: &PredictionSet) -> f64 {
    let correct = (0..pred.len()).filter(|&i| pred.is_correct(i)).count();
    correct as f64 / pred.len() as f64
}

pub fn mean_confidence(pred: &PredictionSet) -> f64 {
    pred.confidence().iter().sum::<f64>() / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub num_bins: usize,
    pub norm_degree: f64,
    pub bins: Vec<BinStats>,
    pub sample_count: usize,
}

impl CalibrationReport {
    pub fn compute(pred: &PredictionSet, num_bins: usize, norm_degree: f64) -> Result<Self> {
        let bins = reliability_bins(pred, num_bins)?;
        Ok(CalibrationReport {
            accuracy: accuracy(pred),
            ece: ece(&bins, pred.len(), norm_degree)?,
            mce: mce(&bins)?,
            num_bins,
            norm_degree,
            sample_count: pred.len(),
            bins,
        })
    }
}

/// Writes one CSV row per bin; empty bins leave the two mean columns blank.
pub fn write_reliability_csv<W: Write>(bins: &[BinStats], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| Error::io("reliability csv", e.into());
    w.write_record([
        "bin_index",
        "lower",
        "upper",
        "count",
        "mean_confidence",
        "mean_accuracy",
    ])
    .map_err(to_io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for b in bins {
        w.write_record([
            b.bin_index.to_string(),
            b.lower.to_string(),
            b.upper.to_string(),
            b.count.to_string(),
            opt(b.mean_confidence),
            opt(b.mean_accuracy),
        ])
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io("reliability csv", e))
}
