//! Feature datasets, their binary/CSV file formats, stratified splitting, and
//! synthetic generators.
//!
//! Binary layouts (all little-endian):
//!
//! * `FDS1`: magic, `u32 N`, `u32 D`, `u32 C`, then `N` records of `D` `f32`
//!   features followed by a `u32` label.
//! * `PRB1`: magic, `u32 N`, `u32 C`, then `N·C` `f32` values row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::PredictionSet;
use crate::numerics::{Matrix, RngStream};

pub const DATASET_MAGIC: &[u8; 4] = b"FDS1";
pub const PROBS_MAGIC: &[u8; 4] = b"PRB1";

/// Frozen feature vectors and their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
    name: String,
}

impl FeatureDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::dim(
                "FeatureDataset",
                format!("features {}", features.shape_string()),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label {
                index,
                label,
                classes,
            });
        }
        if !features.is_finite() {
            return Err(Error::Data("features contain non-finite values".into()));
        }
        Ok(FeatureDataset {
            features,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// New dataset made of the given sample indices, in order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<FeatureDataset> {
        FeatureDataset::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            name,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.features.shape();
        let mut out = Vec::with_capacity(16 + n * (4 * d + 4));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [n, d, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (row, &label) in self.features.row_iter().zip(&self.labels) {
            for &x in row {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
            out.extend_from_slice(&(label as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: impl Into<String>) -> Result<FeatureDataset> {
        let mut r = ByteReader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let record = d
            .checked_mul(4)
            .and_then(|x| x.checked_add(4))
            .and_then(|x| x.checked_mul(n));
        if record.is_none_or(|len| len != r.remaining()) {
            return Err(Error::Format {
                offset: r.offset,
                message: format!(
                    "header declares {n} records of dimension {d} but {} payload bytes follow",
                    r.remaining()
                ),
            });
        }
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            for _ in 0..d {
                let at = r.offset;
                let x = r.f32()? as f64;
                if !x.is_finite() {
                    return Err(Error::Format {
                        offset: at,
                        message: "non-finite feature value".into(),
                    });
                }
                features.push(x);
            }
            let at = r.offset;
            let label = r.u32()? as usize;
            if label >= classes {
                return Err(Error::Format {
                    offset: at,
                    message: format!("label {label} not below class count {classes}"),
                });
            }
            labels.push(label);
        }
        if n == 0 {
            return Err(Error::Format {
                offset: 4,
                message: "dataset has no samples".into(),
            });
        }
        FeatureDataset::new(Matrix::from_vec(n, d, features)?, labels, classes, name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FeatureDataset> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        FeatureDataset::from_bytes(&bytes, name)
    }

    /// Reads `f0,...,f{D-1},label` rows. The class count is `max(label) + 1`
    /// unless `classes` is given.
    pub fn from_csv(path: impl AsRef<Path>, classes: Option<usize>) -> Result<FeatureDataset> {
        let path = path.as_ref();
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let header = reader
            .headers()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .clone();
        let d = header.len().saturating_sub(1);
        let expected: Vec<String> = (0..d)
            .map(|i| format!("f{i}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Data(format!(
                "{}: header must be f0,...,f{{D-1}},label",
                path.display()
            )));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let bad = |what: &str| {
                Error::Data(format!("{}: row {}: bad {what}", path.display(), line + 1))
            };
            for field in record.iter().take(d) {
                features.push(field.trim().parse::<f64>().map_err(|_| bad("feature"))?);
            }
            labels.push(
                record[d]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| bad("label"))?,
            );
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        FeatureDataset::new(
            Matrix::from_vec(labels.len(), d, features)?,
            labels,
            classes,
            name,
        )
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) offset: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, offset: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }

    pub(crate) fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.offset + N;
        let slice = self
            .bytes
            .get(self.offset..end)
            .ok_or_else(|| Error::Format {
                offset: self.offset,
                message: format!("truncated: need {N} bytes, {} left", self.remaining()),
            })?;
        self.offset = end;
        Ok(slice.try_into().expect("slice length checked"))
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take::<4>()?;
        if &got != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32().map(f64::from)).collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format {
                offset: self.offset,
                message: format!("{} trailing bytes", self.remaining()),
            });
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn probs_to_bytes(probs: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * probs.as_slice().len());
    out.extend_from_slice(PROBS_MAGIC);
    put_u32(&mut out, probs.rows());
    put_u32(&mut out, probs.cols());
    put_f32s(&mut out, probs.as_slice());
    out
}

pub fn probs_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    let mut r = ByteReader::new(bytes);
    r.magic(PROBS_MAGIC)?;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    if n.checked_mul(c).and_then(|x| x.checked_mul(4)) != Some(r.remaining()) {
        return Err(Error::Format {
            offset: r.offset,
            message: format!(
                "header declares {n}x{c} but {} payload bytes follow",
                r.remaining()
            ),
        });
    }
    let values = r.f32s(n * c)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format {
            offset: 12,
            message: "non-finite probability".into(),
        });
    }
    Matrix::from_vec(n, c, values)
}

pub fn save_probs(probs: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, probs_to_bytes(probs)).map_err(|e| Error::io(path, e))
}

pub fn load_probs(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    probs_from_bytes(&bytes)
}

/// Seeded class-stratified split into `(train, val)`.
///
/// Each class contributes `round(count · val_fraction)` samples to `val`,
/// clamped to `[1, count − 1]`. Both parts keep the original sample order.
pub fn split(
    dataset: &FeatureDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} not in (0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = RngStream::new(seed);
    let mut in_val = vec![false; dataset.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} sample(s); stratified split needs at least 2",
                members.len()
            )));
        }
        rng.shuffle(members);
        let take =
            ((members.len() as f64 * val_fraction).round() as usize).clamp(1, members.len() - 1);
        for &i in &members[..take] {
            in_val[i] = true;
        }
    }
    let (val_idx, train_idx): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| in_val[i]);
    Ok((
        dataset.subset(&train_idx, format!("{}-train", dataset.name()))?,
        dataset.subset(&val_idx, format!("{}-val", dataset.name()))?,
    ))
}

/// Parameters of a Gaussian-cluster dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub cluster_separation: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 || self.samples == 0 {
            return Err(Error::Config(
                "classes, dim and samples must be positive".into(),
            ));
        }
        if !(self.cluster_separation >= 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::Config(format!(
                "cluster separation {} must be non-negative",
                self.cluster_separation
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label noise {} not in [0, 1)",
                self.label_noise
            )));
        }
        Ok(())
    }
}

/// Samples `N` points from `C` unit-variance Gaussian clusters whose centres
/// lie on a sphere of radius `cluster_separation`.
///
/// Classes are balanced (`n mod C` before shuffling). Then exactly
/// `floor(label_noise · N)` samples get a label drawn uniformly from the other
/// `C − 1` classes.
pub fn synth_clusters(spec: &SynthSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let (c, d, n) = (spec.classes, spec.dim, spec.samples);
    let mut rng = RngStream::new(spec.seed);

    let mut centers = Matrix::zeros(c, d);
    for k in 0..c {
        let row = centers.row_mut(k);
        loop {
            for v in row.iter_mut() {
                *v = rng.normal();
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for v in row.iter_mut() {
                    *v *= spec.cluster_separation / norm;
                }
                break;
            }
        }
    }

    let order = rng.permutation(n);
    let mut features = Matrix::zeros(n, d);
    let mut labels = vec![0; n];
    for (slot, &src) in order.iter().enumerate() {
        let y = src % c;
        labels[slot] = y;
        for (x, &mu) in features.row_mut(slot).iter_mut().zip(centers.row(y)) {
            *x = mu + rng.normal();
        }
    }

    if c > 1 {
        let flips = (spec.label_noise * n as f64).floor() as usize;
        for &i in &rng.permutation(n)[..flips] {
            let other = rng.below(c - 1);
            labels[i] = if other >= labels[i] { other + 1 } else { other };
        }
    }

    FeatureDataset::new(features, labels, c, "clusters")
}

/// Parameters of a constant-confidence prediction fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MiscalSpec {
    pub samples: usize,
    pub classes: usize,
    pub confidence_level: f64,
    pub true_accuracy: f64,
    pub seed: u64,
}

impl MiscalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.classes == 0 {
            return Err(Error::Config("samples and classes must be positive".into()));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level <= 1.0) {
            return Err(Error::Config(format!(
                "confidence level {} not in (0, 1]",
                self.confidence_level
            )));
        }
        if !(0.0..=1.0).contains(&self.true_accuracy) {
            return Err(Error::Config(format!(
                "true accuracy {} not in [0, 1]",
                self.true_accuracy
            )));
        }
        if self.classes < 2 && self.true_accuracy < 1.0 {
            return Err(Error::Config("wrong labels need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Predicted classes and labels; a label equals its prediction with
    /// probability `true_accuracy`, otherwise it is another class.
    fn draw(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rng = RngStream::new(self.seed);
        let mut predicted = Vec::with_capacity(self.samples);
        let mut labels = Vec::with_capacity(self.samples);
        for _ in 0..self.samples {
            let p = rng.below(self.classes);
            let y = if rng.bernoulli(self.true_accuracy) {
                p
            } else {
                let o = rng.below(self.classes - 1);
                if o >= p {
                    o + 1
                } else {
                    o
                }
            };
            predicted.push(p);
            labels.push(y);
        }
        (predicted, labels)
    }
}

/// Every sample has confidence `confidence_level`; its expected ECE is
/// `|confidence_level − true_accuracy|`.
pub fn synth_miscalibrated_predictions(spec: &MiscalSpec) -> Result<PredictionSet> {
    spec.validate()?;
    let (predicted, labels) = spec.draw();
    PredictionSet::new(
        predicted,
        vec![spec.confidence_level; spec.samples],
        labels,
        spec.classes,
    )
}

/// Probability rows realising the same fixture: `confidence_level` on the
/// predicted class, the remainder spread evenly over the others.
///
/// Fails when the remainder would tie or beat the predicted class.
pub fn synth_miscalibrated_probs(spec: &MiscalSpec) -> Result<(Matrix, Vec<usize>)> {
    spec.validate()?;
    let c = spec.classes;
    let rest = if c > 1 {
        (1.0 - spec.confidence_level) / (c - 1) as f64
    } else {
        0.0
    };
    if c > 1 && rest >= spec.confidence_level {
        return Err(Error::Config(format!(
            "confidence {} is not the row maximum with {c} classes",
            spec.confidence_level
        )));
    }
    let (predicted, labels) = spec.draw();
    let mut probs = Matrix::filled(spec.samples, c, rest);
    for (r, &p) in predicted.iter().enumerate() {
        probs[(r, p)] = spec.confidence_level;
    }
    Ok((probs, labels))
}
