//! Combining the outputs of `m` heads: averaging, majority voting, and four
//! trainable metamodels.
//!
//! | kind | architecture | parameters |
//! |------|--------------|------------|
//! | SL   | affine `m·C → C` | `m·C² + C` |
//! | DL   | affine `m·C → h` → ReLU → dropout → affine `h → C`, `h = ⌈m·C/2⌉` | `m·C·h + h + h·C + C` |
//! | DLL  | as DL with `h = m·C` | same formula |
//! | SLpC | per class `c`, affine over the `m` head outputs for `c` | `C·(m + 1)` |
//!
//! Metamodel inputs concatenate the per-sample head outputs head-major:
//! head 0's `C` values, then head 1's, and so on.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::heads::{head_predict, EpochRecord, LinearHead};
use crate::metrics::{argmax, predictions_from_probs, PredictionSet};
use crate::numerics::{
    backward_mlp, cross_entropy, dropout_mask, linear_backprop, linear_forward,
    order_invariant_sum, softmax, softmax_cross_entropy_grad, Matrix, MlpParams, PlateauScheduler,
    RngStream, SgdState, DEFAULT_MIN_LR,
};

pub const META_MAGIC: &[u8; 4] = b"MMD1";
pub const DEFAULT_DROPOUT: f64 = 0.5;

const PROB_ROW_TOLERANCE: f64 = 1e-4;

/// What the per-head matrices contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    #[default]
    Probabilities,
    Logits,
}

impl FromStr for OutputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "probs" | "probabilities" => Ok(OutputKind::Probabilities),
            "logits" => Ok(OutputKind::Logits),
            other => Err(Error::Config(format!("unknown metamodel input '{other}'"))),
        }
    }
}

/// Outputs of `m` heads on the same `N` samples, each `N×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    per_head: Vec<Matrix>,
    kind: OutputKind,
}

impl HeadOutputs {
    /// Probability outputs; every row must be a probability vector.
    pub fn new(per_head: Vec<Matrix>) -> Result<Self> {
        let out = HeadOutputs::with_kind(per_head, OutputKind::Probabilities)?;
        for (h, m) in out.per_head.iter().enumerate() {
            for (r, row) in m.row_iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| !(0.0..=1.0).contains(p))
                    || (sum - 1.0).abs() > PROB_ROW_TOLERANCE
                {
                    return Err(Error::Domain(format!(
                        "head {h} row {r} is not a probability vector"
                    )));
                }
            }
        }
        Ok(out)
    }

    pub fn from_logits(per_head: Vec<Matrix>) -> Result<Self> {
        HeadOutputs::with_kind(per_head, OutputKind::Logits)
    }

    fn with_kind(per_head: Vec<Matrix>, kind: OutputKind) -> Result<Self> {
        let first = per_head
            .first()
            .ok_or_else(|| Error::Config("need at least one head".into()))?;
        if first.cols() == 0 || first.rows() == 0 {
            return Err(Error::Data("head outputs are empty".into()));
        }
        for (i, m) in per_head.iter().enumerate().skip(1) {
            if m.shape() != first.shape() {
                return Err(Error::dim(
                    "HeadOutputs",
                    format!("head 0 {}", first.shape_string()),
                    format!("head {i} {}", m.shape_string()),
                ));
            }
        }
        if per_head.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data("head outputs contain non-finite values".into()));
        }
        Ok(HeadOutputs { per_head, kind })
    }

    /// Runs every head on `features`.
    pub fn from_heads(heads: &[LinearHead], features: &Matrix, kind: OutputKind) -> Result<Self> {
        let logits = heads
            .iter()
            .map(|h| head_predict(h, features))
            .collect::<Result<Vec<_>>>()?;
        match kind {
            OutputKind::Logits => HeadOutputs::from_logits(logits),
            OutputKind::Probabilities => HeadOutputs::new(logits.iter().map(softmax).collect()),
        }
    }

    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    pub fn classes(&self) -> usize {
        self.per_head[0].cols()
    }

    pub fn samples(&self) -> usize {
        self.per_head[0].rows()
    }

    pub fn kind(&self) -> OutputKind {
        self.kind
    }

    pub fn head(&self, i: usize) -> &Matrix {
        &self.per_head[i]
    }

    pub fn per_head(&self) -> &[Matrix] {
        &self.per_head
    }

    /// `N × (m·C)`, head-major per row.
    pub fn concatenated(&self) -> Matrix {
        let (n, c, m) = (self.samples(), self.classes(), self.heads());
        let mut out = Matrix::zeros(n, m * c);
        for r in 0..n {
            let row = out.row_mut(r);
            for (h, mat) in self.per_head.iter().enumerate() {
                row[h * c..(h + 1) * c].copy_from_slice(mat.row(r));
            }
        }
        out
    }

    fn require_probabilities(&self, op: &str) -> Result<()> {
        if self.kind != OutputKind::Probabilities {
            return Err(Error::Config(format!("{op} needs probability outputs")));
        }
        Ok(())
    }
}

/// Element-wise mean of the head probability matrices.
///
/// Each entry is summed in a fixed value order, so the result does not depend
/// on the order of the heads.
pub fn average_probs(outputs: &HeadOutputs) -> Result<Matrix> {
    outputs.require_probabilities("averaging")?;
    let m = outputs.heads();
    let mut out = Matrix::zeros(outputs.samples(), outputs.classes());
    let mut buf = vec![0.0; m];
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        for (b, mat) in buf.iter_mut().zip(outputs.per_head()) {
            *b = mat.as_slice()[i];
        }
        *v = order_invariant_sum(&mut buf) / m as f64;
    }
    Ok(out)
}

pub fn combine_average(outputs: &HeadOutputs, labels: &[usize]) -> Result<PredictionSet> {
    predictions_from_probs(&average_probs(outputs)?, labels)
}

/// Majority vote over head argmaxes.
///
/// Ties go to the class whose voters have the higher mean confidence, then to
/// the lowest class index. The reported confidence is the mean probability
/// all heads assign to the winning class.
pub fn combine_vote(outputs: &HeadOutputs, labels: &[usize]) -> Result<PredictionSet> {
    outputs.require_probabilities("voting")?;
    let (n, c, m) = (outputs.samples(), outputs.classes(), outputs.heads());
    if labels.len() != n {
        return Err(Error::dim(
            "combine_vote",
            format!("{n} samples"),
            format!("{} labels", labels.len()),
        ));
    }
    let mut predicted = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut voter_conf: Vec<Vec<f64>> = vec![Vec::with_capacity(m); c];
    let mut buf = vec![0.0; m];
    for r in 0..n {
        voter_conf.iter_mut().for_each(Vec::clear);
        for mat in outputs.per_head() {
            let (k, p) = argmax(mat.row(r));
            voter_conf[k].push(p);
        }
        let mut winner = 0;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (k, confs) in voter_conf.iter_mut().enumerate() {
            if confs.is_empty() {
                continue;
            }
            let votes = confs.len();
            let mean = order_invariant_sum(confs) / votes as f64;
            if votes > best.0 || (votes == best.0 && mean > best.1) {
                best = (votes, mean);
                winner = k;
            }
        }
        for (b, mat) in buf.iter_mut().zip(outputs.per_head()) {
            *b = mat[(r, winner)];
        }
        predicted.push(winner);
        confidence.push((order_invariant_sum(&mut buf) / m as f64).clamp(0.0, 1.0));
    }
    PredictionSet::new(predicted, confidence, labels.to_vec(), c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetaKind {
    #[serde(rename = "SL")]
    Sl,
    #[serde(rename = "DL")]
    Dl,
    #[serde(rename = "DLL")]
    Dll,
    #[serde(rename = "SLpC")]
    Slpc,
}

impl MetaKind {
    pub const ALL: [MetaKind; 4] = [MetaKind::Sl, MetaKind::Dl, MetaKind::Dll, MetaKind::Slpc];

    /// File tag: 0=SL, 1=DL, 2=DLL, 3=SLpC.
    pub fn tag(self) -> u8 {
        match self {
            MetaKind::Sl => 0,
            MetaKind::Dl => 1,
            MetaKind::Dll => 2,
            MetaKind::Slpc => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        MetaKind::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::Config(format!("unknown metamodel tag {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaKind::Sl => "SL",
            MetaKind::Dl => "DL",
            MetaKind::Dll => "DLL",
            MetaKind::Slpc => "SLpC",
        }
    }

    /// Hidden width of the two-layer kinds, 0 otherwise.
    pub fn hidden_width(self, heads: usize, classes: usize) -> usize {
        match self {
            MetaKind::Dl => (heads * classes).div_ceil(2),
            MetaKind::Dll => heads * classes,
            MetaKind::Sl | MetaKind::Slpc => 0,
        }
    }
}

impl fmt::Display for MetaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sl" => Ok(MetaKind::Sl),
            "dl" => Ok(MetaKind::Dl),
            "dll" => Ok(MetaKind::Dll),
            "slpc" => Ok(MetaKind::Slpc),
            other => Err(Error::Config(format!("unknown metamodel kind '{other}'"))),
        }
    }
}

/// Closed-form parameter count of a metamodel.
pub fn param_count(kind: MetaKind, heads: usize, classes: usize) -> usize {
    let input = heads * classes;
    match kind {
        MetaKind::Sl => input * classes + classes,
        MetaKind::Dl | MetaKind::Dll => {
            let h = kind.hidden_width(heads, classes);
            input * h + h + h * classes + classes
        }
        MetaKind::Slpc => classes * (heads + 1),
    }
}

/// Parameters of `heads` linear heads on `dim` features plus an optional
/// metamodel on top.
pub fn ensemble_param_count(
    meta: Option<MetaKind>,
    heads: usize,
    dim: usize,
    classes: usize,
) -> usize {
    heads * crate::heads::head_param_count(dim, classes)
        + meta.map_or(0, |k| param_count(k, heads, classes))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaParams {
    /// SL: `C × (m·C)` weights.
    Single { weights: Matrix, bias: Vec<f64> },
    /// DL and DLL.
    Double(MlpParams),
    /// SLpC: row `c` holds the `m` weights of class `c`'s layer.
    PerClass { weights: Matrix, bias: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metamodel {
    pub kind: MetaKind,
    pub heads: usize,
    pub classes: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub params: MetaParams,
    pub history: Vec<EpochRecord>,
}

fn uniform_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut RngStream) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = rng.uniform_in(-bound, bound);
    }
    m
}

fn uniform_vec(len: usize, fan_in: usize, rng: &mut RngStream) -> Vec<f64> {
    uniform_matrix(1, len, fan_in, rng).into_vec()
}

/// Initialises every layer uniformly in `[−1/√fan_in, 1/√fan_in]`.
pub fn build_metamodel(
    kind: MetaKind,
    heads: usize,
    classes: usize,
    seed: u64,
) -> Result<Metamodel> {
    if heads == 0 || classes == 0 {
        return Err(Error::Config("metamodel needs m >= 1 and C >= 1".into()));
    }
    let mut rng = RngStream::new(seed);
    let input = heads * classes;
    let params = match kind {
        MetaKind::Sl => MetaParams::Single {
            weights: uniform_matrix(classes, input, input, &mut rng),
            bias: uniform_vec(classes, input, &mut rng),
        },
        MetaKind::Dl | MetaKind::Dll => {
            let h = kind.hidden_width(heads, classes);
            MetaParams::Double(MlpParams {
                w1: uniform_matrix(h, input, input, &mut rng),
                b1: uniform_vec(h, input, &mut rng),
                w2: uniform_matrix(classes, h, h, &mut rng),
                b2: uniform_vec(classes, h, &mut rng),
            })
        }
        MetaKind::Slpc => {
            let mut weights = Matrix::zeros(classes, heads);
            let mut bias = vec![0.0; classes];
            let bound = 1.0 / (heads as f64).sqrt();
            for c in 0..classes {
                for w in weights.row_mut(c) {
                    *w = rng.uniform_in(-bound, bound);
                }
                bias[c] = rng.uniform_in(-bound, bound);
            }
            MetaParams::PerClass { weights, bias }
        }
    };
    Ok(Metamodel {
        kind,
        heads,
        classes,
        dropout_p: if matches!(kind, MetaKind::Dl | MetaKind::Dll) {
            DEFAULT_DROPOUT
        } else {
            0.0
        },
        seed,
        params,
        history: Vec::new(),
    })
}

impl Metamodel {
    /// SLpC with every weight `1/m` and zero bias: its logits equal the
    /// averaged head outputs.
    pub fn slpc_averaging(heads: usize, classes: usize) -> Result<Metamodel> {
        let mut meta = build_metamodel(MetaKind::Slpc, heads, classes, 0)?;
        meta.params = MetaParams::PerClass {
            weights: Matrix::filled(classes, heads, 1.0 / heads as f64),
            bias: vec![0.0; classes],
        };
        Ok(meta)
    }

    pub fn hidden_width(&self) -> usize {
        match &self.params {
            MetaParams::Double(p) => p.hidden_width(),
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_buffers().iter().map(|b| b.len()).sum()
    }

    /// Parameter buffers in declaration order.
    pub fn param_buffers(&self) -> Vec<&[f64]> {
        match &self.params {
            MetaParams::Single { weights, bias } | MetaParams::PerClass { weights, bias } => {
                vec![weights.as_slice(), bias]
            }
            MetaParams::Double(p) => vec![p.w1.as_slice(), &p.b1, p.w2.as_slice(), &p.b2],
        }
    }

    pub fn param_buffers_mut(&mut self) -> Vec<&mut [f64]> {
        match &mut self.params {
            MetaParams::Single { weights, bias } | MetaParams::PerClass { weights, bias } => {
                vec![weights.as_mut_slice(), bias]
            }
            MetaParams::Double(p) => vec![
                p.w1.as_mut_slice(),
                &mut p.b1,
                p.w2.as_mut_slice(),
                &mut p.b2,
            ],
        }
    }

    fn check_outputs(&self, outputs: &HeadOutputs) -> Result<()> {
        if outputs.heads() != self.heads || outputs.classes() != self.classes {
            return Err(Error::dim(
                "metamodel",
                format!(
                    "{} metamodel for m={} C={}",
                    self.kind, self.heads, self.classes
                ),
                format!("outputs m={} C={}", outputs.heads(), outputs.classes()),
            ));
        }
        Ok(())
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.heads * self.classes {
            return Err(Error::dim(
                "metamodel",
                format!("{} inputs", self.heads * self.classes),
                format!("input {}", input.shape_string()),
            ));
        }
        Ok(())
    }

    fn sample_mask(&self, rows: usize, rng: &mut RngStream) -> Result<Option<Matrix>> {
        match &self.params {
            MetaParams::Double(p) if self.dropout_p > 0.0 => {
                dropout_mask(rows, p.hidden_width(), self.dropout_p, rng).map(Some)
            }
            _ => Ok(None),
        }
    }

    /// Logits for a concatenated input `N × (m·C)`. `mask` is the dropout
    /// mask of the two-layer kinds, `None` in evaluation mode.
    pub fn forward_input(&self, input: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
        self.check_input(input)?;
        match &self.params {
            MetaParams::Single { weights, bias } => linear_forward(input, weights, bias),
            MetaParams::Double(p) => Ok(p.forward(input, mask)?.logits),
            MetaParams::PerClass { weights, bias } => {
                let (c, m) = (self.classes, self.heads);
                let mut out = Matrix::zeros(input.rows(), c);
                for n in 0..input.rows() {
                    let x = input.row(n);
                    for k in 0..c {
                        let w = weights.row(k);
                        let mut acc = bias[k];
                        for i in 0..m {
                            acc += w[i] * x[i * c + k];
                        }
                        out[(n, k)] = acc;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Mean cross-entropy and its gradient for every parameter buffer, in
    /// [`Metamodel::param_buffers`] order.
    pub fn loss_and_grads(
        &self,
        input: &Matrix,
        labels: &[usize],
        mask: Option<&Matrix>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_input(input)?;
        match &self.params {
            MetaParams::Single { weights, bias } => {
                let logits = linear_forward(input, weights, bias)?;
                let (loss, dz) = softmax_cross_entropy_grad(&logits, labels)?;
                let (g, _) = linear_backprop(input, weights, &dz, false);
                Ok((loss, vec![g.weights.into_vec(), g.bias]))
            }
            MetaParams::Double(p) => {
                let (loss, g) = backward_mlp(p, input, labels, mask)?;
                Ok((loss, vec![g.w1.into_vec(), g.b1, g.w2.into_vec(), g.b2]))
            }
            MetaParams::PerClass { .. } => {
                let logits = self.forward_input(input, None)?;
                let (loss, dz) = softmax_cross_entropy_grad(&logits, labels)?;
                let (c, m) = (self.classes, self.heads);
                let mut gw = Matrix::zeros(c, m);
                let mut gb = vec![0.0; c];
                for n in 0..input.rows() {
                    let x = input.row(n);
                    for k in 0..c {
                        let g = dz[(n, k)];
                        gb[k] += g;
                        let row = gw.row_mut(k);
                        for i in 0..m {
                            row[i] += g * x[i * c + k];
                        }
                    }
                }
                Ok((loss, vec![gw.into_vec(), gb]))
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + 4 * self.param_count());
        out.extend_from_slice(META_MAGIC);
        out.push(self.kind.tag());
        put_u32(&mut out, self.heads);
        put_u32(&mut out, self.classes);
        put_u32(&mut out, self.hidden_width());
        out.extend_from_slice(&(self.dropout_p as f32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        match &self.params {
            MetaParams::PerClass { weights, bias } => {
                for (k, b) in bias.iter().enumerate() {
                    put_f32s(&mut out, weights.row(k));
                    put_f32s(&mut out, std::slice::from_ref(b));
                }
            }
            _ => {
                for buf in self.param_buffers() {
                    put_f32s(&mut out, buf);
                }
            }
        }
        out
    }

    /// Parses an `MMD1` file. The history is not part of the format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Metamodel> {
        let mut r = ByteReader::new(bytes);
        r.magic(META_MAGIC)?;
        let tag_at = r.offset;
        let kind = MetaKind::from_tag(r.u8()?).map_err(|e| Error::Format {
            offset: tag_at,
            message: e.to_string(),
        })?;
        let heads = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let h_at = r.offset;
        let hidden = r.u32()? as usize;
        let dropout_p = f64::from(r.f32()?);
        let seed = r.u64()?;
        if hidden != kind.hidden_width(heads, classes) {
            return Err(Error::Format {
                offset: h_at,
                message: format!(
                    "hidden width {hidden} does not match {kind} with m={heads} C={classes}"
                ),
            });
        }
        let expected = param_count(kind, heads, classes) * 4;
        if expected != r.remaining() {
            return Err(Error::Format {
                offset: r.offset,
                message: format!(
                    "expected {expected} parameter bytes, found {}",
                    r.remaining()
                ),
            });
        }
        let input = heads * classes;
        let params = match kind {
            MetaKind::Sl => MetaParams::Single {
                weights: Matrix::from_vec(classes, input, r.f32s(classes * input)?)?,
                bias: r.f32s(classes)?,
            },
            MetaKind::Dl | MetaKind::Dll => MetaParams::Double(MlpParams {
                w1: Matrix::from_vec(hidden, input, r.f32s(hidden * input)?)?,
                b1: r.f32s(hidden)?,
                w2: Matrix::from_vec(classes, hidden, r.f32s(classes * hidden)?)?,
                b2: r.f32s(classes)?,
            }),
            MetaKind::Slpc => {
                let mut weights = Matrix::zeros(classes, heads);
                let mut bias = vec![0.0; classes];
                for k in 0..classes {
                    weights.row_mut(k).copy_from_slice(&r.f32s(heads)?);
                    bias[k] = f64::from(r.f32()?);
                }
                MetaParams::PerClass { weights, bias }
            }
        };
        r.finish()?;
        Ok(Metamodel {
            kind,
            heads,
            classes,
            dropout_p,
            seed,
            params,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Metamodel> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Metamodel::from_bytes(&bytes)
    }
}

/// Metamodel logits for `outputs`. Dropout is sampled from `rng` only in
/// training mode; evaluation mode never touches `rng`.
pub fn metamodel_forward(
    meta: &Metamodel,
    outputs: &HeadOutputs,
    training: bool,
    rng: &mut RngStream,
) -> Result<Matrix> {
    meta.check_outputs(outputs)?;
    let input = outputs.concatenated();
    let mask = if training {
        meta.sample_mask(input.rows(), rng)?
    } else {
        None
    };
    meta.forward_input(&input, mask.as_ref())
}

pub fn metamodel_predict(
    meta: &Metamodel,
    outputs: &HeadOutputs,
    labels: &[usize],
) -> Result<PredictionSet> {
    meta.check_outputs(outputs)?;
    let logits = meta.forward_input(&outputs.concatenated(), None)?;
    predictions_from_probs(&softmax(&logits), labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            epochs: 20,
            initial_lr: 2e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 128,
            plateau_factor: 0.5,
            plateau_patience: 3,
            dropout_p: DEFAULT_DROPOUT,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("metamodel epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

fn eval_loss(meta: &Metamodel, input: &Matrix, labels: &[usize]) -> Result<f64> {
    cross_entropy(&softmax(&meta.forward_input(input, None)?), labels)
}

/// Mini-batch SGD for exactly `cfg.epochs` epochs with a plateau scheduler on
/// the validation loss.
///
/// Returns the parameters with the lowest validation loss among the starting
/// point and every epoch end; `history` records all epochs.
pub fn train_metamodel(
    meta: &Metamodel,
    train_outputs: &HeadOutputs,
    train_labels: &[usize],
    val_outputs: &HeadOutputs,
    val_labels: &[usize],
    cfg: &MetaTrainConfig,
) -> Result<Metamodel> {
    cfg.validate()?;
    meta.check_outputs(train_outputs)?;
    meta.check_outputs(val_outputs)?;
    if train_outputs.kind() != val_outputs.kind() {
        return Err(Error::Config(
            "train and validation outputs differ in kind".into(),
        ));
    }
    let x_train = train_outputs.concatenated();
    let x_val = val_outputs.concatenated();
    if train_labels.len() != x_train.rows() || val_labels.len() != x_val.rows() {
        return Err(Error::dim(
            "train_metamodel",
            format!("{} / {} samples", x_train.rows(), x_val.rows()),
            format!("{} / {} labels", train_labels.len(), val_labels.len()),
        ));
    }

    let mut model = meta.clone();
    if matches!(model.kind, MetaKind::Dl | MetaKind::Dll) {
        model.dropout_p = cfg.dropout_p;
    }
    model.seed = cfg.seed;
    model.history.clear();

    let lens: Vec<usize> = model.param_buffers().iter().map(|b| b.len()).collect();
    let mut sgd = SgdState::new(cfg.initial_lr, cfg.momentum, cfg.weight_decay, &lens)?;
    let mut scheduler = PlateauScheduler::new(
        cfg.initial_lr,
        cfg.plateau_factor,
        cfg.plateau_patience,
        DEFAULT_MIN_LR,
    )?;
    let mut rng = RngStream::new(cfg.seed);

    let initial_loss = eval_loss(&model, &x_val, val_labels)?;
    let mut best = (initial_loss, model.params.clone());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = scheduler.learning_rate();
        sgd.learning_rate = lr;
        let order = rng.permutation(x_train.rows());
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = x_train.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let mask = model.sample_mask(batch.len(), &mut rng)?;
            let (loss, grads) = model.loss_and_grads(&x, &y, mask.as_ref())?;
            loss_sum += loss * batch.len() as f64;
            let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            sgd.step(&mut model.param_buffers_mut(), &grads)?;
        }
        let train_loss = loss_sum / x_train.rows() as f64;
        let val_loss = eval_loss(&model, &x_val, val_labels)?;
        let params_finite = model
            .param_buffers()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()));
        if !train_loss.is_finite() || !val_loss.is_finite() || !params_finite {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite metamodel loss (train {train_loss}, val {val_loss})"),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        if val_loss < best.0 {
            best = (val_loss, model.params.clone());
        }
        scheduler.step(val_loss);
    }

    model.params = best.1;
    model.history = history;
    Ok(model)
}
