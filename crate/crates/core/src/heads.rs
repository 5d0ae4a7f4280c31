//! Seeded linear classifier heads trained on frozen features.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{put_f32s, put_u32, ByteReader, FeatureDataset};
use crate::error::{Error, Result};
use crate::numerics::{
    backward_linear, cross_entropy, linear_forward, softmax, EarlyStopper, Matrix,
    PlateauScheduler, RngStream, SgdState, DEFAULT_MIN_LR,
};

pub const HEAD_MAGIC: &[u8; 4] = b"HDW1";

/// One epoch of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

/// A single fully connected layer mapping `D` features to `C` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            initial_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            max_epochs: 100,
            plateau_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 15,
            seed: 0,
        }
    }
}

impl HeadTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "head lr {} must be positive",
                self.initial_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} not in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau factor {} not in (0, 1)",
                self.plateau_factor
            )));
        }
        if self.batch_size == 0 || self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "batch size and patiences must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

impl LinearHead {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        head_param_count(self.input_dim(), self.classes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(20 + 4 * (self.weights.as_slice().len() + self.bias.len()));
        out.extend_from_slice(HEAD_MAGIC);
        put_u32(&mut out, self.input_dim());
        put_u32(&mut out, self.classes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_f32s(&mut out, self.weights.as_slice());
        put_f32s(&mut out, &self.bias);
        out
    }

    /// Parses an `HDW1` file. The history is not part of the format.
    pub fn from_bytes(bytes: &[u8]) -> Result<LinearHead> {
        let mut r = ByteReader::new(bytes);
        r.magic(HEAD_MAGIC)?;
        let d = r.u32()? as usize;
        let c = r.u32()? as usize;
        let seed = r.u64()?;
        let expected = c
            .checked_mul(d)
            .and_then(|x| x.checked_add(c))
            .map(|x| x * 4);
        if expected != Some(r.remaining()) {
            return Err(Error::Format {
                offset: r.offset,
                message: format!(
                    "header declares {c}x{d} head but {} bytes follow",
                    r.remaining()
                ),
            });
        }
        let weights = Matrix::from_vec(c, d, r.f32s(c * d)?)?;
        let bias = r.f32s(c)?;
        r.finish()?;
        Ok(LinearHead {
            weights,
            bias,
            seed,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LinearHead> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        LinearHead::from_bytes(&bytes)
    }
}

pub fn head_param_count(dim: usize, classes: usize) -> usize {
    classes * dim + classes
}

fn init_from_stream(dim: usize, classes: usize, rng: &mut RngStream) -> Result<LinearHead> {
    if dim == 0 || classes == 0 {
        return Err(Error::Config("head needs D >= 1 and C >= 1".into()));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut weights = Matrix::zeros(classes, dim);
    for w in weights.as_mut_slice() {
        *w = rng.uniform_in(-bound, bound);
    }
    Ok(LinearHead {
        weights,
        bias: vec![0.0; classes],
        seed: rng.seed(),
        history: Vec::new(),
    })
}

/// Weights uniform in `[−1/√D, 1/√D]` from the seeded stream, zero bias.
pub fn init_head(dim: usize, classes: usize, seed: u64) -> Result<LinearHead> {
    init_from_stream(dim, classes, &mut RngStream::new(seed))
}

/// Logits `features · Wᵀ + b`.
pub fn head_predict(head: &LinearHead, features: &Matrix) -> Result<Matrix> {
    linear_forward(features, &head.weights, &head.bias)
}

pub fn head_probs(head: &LinearHead, features: &Matrix) -> Result<Matrix> {
    Ok(softmax(&head_predict(head, features)?))
}

fn eval_loss(head: &LinearHead, data: &FeatureDataset) -> Result<f64> {
    cross_entropy(&head_probs(head, data.features())?, data.labels())
}

/// Mini-batch SGD on cross-entropy, seeded by `cfg.seed`.
///
/// The validation loss of each epoch drives the plateau scheduler and the
/// early stopper. The returned head is the snapshot with the lowest
/// validation loss; its `history` holds every epoch that ran.
pub fn train_head(
    train: &FeatureDataset,
    val: &FeatureDataset,
    cfg: &HeadTrainConfig,
) -> Result<LinearHead> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if train.dim() != val.dim() || train.classes() != val.classes() {
        return Err(Error::dim(
            "train_head",
            format!("train D={} C={}", train.dim(), train.classes()),
            format!("val D={} C={}", val.dim(), val.classes()),
        ));
    }

    let mut rng = RngStream::new(cfg.seed);
    let mut head = init_from_stream(train.dim(), train.classes(), &mut rng)?;
    if cfg.max_epochs == 0 {
        return Ok(head);
    }

    let mut sgd = SgdState::new(
        cfg.initial_lr,
        cfg.momentum,
        cfg.weight_decay,
        &[head.weights.as_slice().len(), head.bias.len()],
    )?;
    let mut scheduler = PlateauScheduler::new(
        cfg.initial_lr,
        cfg.plateau_factor,
        cfg.plateau_patience,
        DEFAULT_MIN_LR,
    )?;
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut history = Vec::new();
    let mut best: Option<(f64, Matrix, Vec<f64>)> = None;

    for epoch in 1..=cfg.max_epochs {
        let lr = scheduler.learning_rate();
        sgd.learning_rate = lr;
        let order = rng.permutation(train.len());
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let (loss, g) = backward_linear(&x, &head.weights, &head.bias, &y)?;
            loss_sum += loss * batch.len() as f64;
            sgd.step(
                &mut [head.weights.as_mut_slice(), &mut head.bias],
                &[g.weights.as_slice(), &g.bias],
            )?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = eval_loss(&head, val)?;
        if !train_loss.is_finite() || !val_loss.is_finite() || !head.weights.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite loss (train {train_loss}, val {val_loss})"),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, head.weights.clone(), head.bias.clone()));
        }
        scheduler.step(val_loss);
        if stopper.step(val_loss) {
            break;
        }
    }

    let (_, weights, bias) = best.expect("at least one epoch ran");
    Ok(LinearHead {
        weights,
        bias,
        seed: cfg.seed,
        history,
    })
}

/// Trains `m` heads on identical data with seeds `base_seed + i`, using up to
/// `jobs` threads. Output order is by index.
pub fn train_head_family(
    train: &FeatureDataset,
    val: &FeatureDataset,
    m: usize,
    base_seed: u64,
    cfg: &HeadTrainConfig,
    jobs: usize,
) -> Result<Vec<LinearHead>> {
    if m == 0 {
        return Err(Error::Config("head count must be at least 1".into()));
    }
    let train_one = |i: usize| {
        let cfg = HeadTrainConfig {
            seed: base_seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        train_head(train, val, &cfg).map_err(|e| Error::Head {
            index: i,
            source: Box::new(e),
        })
    };
    if jobs <= 1 {
        return (0..m).map(train_one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..m).into_par_iter().map(train_one).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clusters, SynthSpec};

    #[test]
    fn init_is_seeded_and_bounded() {
        assert_eq!(init_head(6, 3, 11).unwrap(), init_head(6, 3, 11).unwrap());
        assert_ne!(
            init_head(6, 3, 11).unwrap().weights,
            init_head(6, 3, 12).unwrap().weights
        );
        let h = init_head(4, 2500, 1).unwrap();
        assert_eq!(h.weights.as_slice().len(), 10_000);
        assert!(h
            .weights
            .as_slice()
            .iter()
            .all(|w| (-0.5..=0.5).contains(w)));
        assert!(h.bias.iter().all(|&b| b == 0.0));
        assert_eq!(h.param_count(), 4 * 2500 + 2500);
    }

    #[test]
    fn predict_examples() {
        let mut h = init_head(3, 2, 0).unwrap();
        h.weights = Matrix::zeros(2, 3);
        h.bias = vec![0.5, -2.0];
        let out = head_predict(&h, &Matrix::filled(4, 3, 7.0)).unwrap();
        assert!(out.row_iter().all(|r| r == [0.5, -2.0]));
        assert!(head_predict(&h, &Matrix::zeros(1, 2)).is_err());

        let h = init_head(3, 2, 5).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        let all = head_predict(&h, &x).unwrap();
        let one = head_predict(&h, &x.select_rows(&[1])).unwrap();
        assert_eq!(one.row(0), all.row(1));
    }

    fn separable() -> (FeatureDataset, FeatureDataset) {
        let ds = synth_clusters(&SynthSpec {
            classes: 2,
            dim: 2,
            samples: 600,
            cluster_separation: 20.0,
            label_noise: 0.0,
            seed: 3,
        })
        .unwrap();
        crate::data::split(&ds, 0.2, 4).unwrap()
    }

    #[test]
    fn separable_two_class_reaches_high_accuracy() {
        let (train, val) = separable();
        let head = train_head(&train, &val, &HeadTrainConfig::default()).unwrap();
        let probs = head_probs(&head, val.features()).unwrap();
        let pred = crate::metrics::predictions_from_probs(&probs, val.labels()).unwrap();
        assert!(crate::metrics::accuracy(&pred) >= 0.99);
    }

    #[test]
    fn zero_epochs_returns_initial_head() {
        let (train, val) = separable();
        let cfg = HeadTrainConfig {
            max_epochs: 0,
            seed: 8,
            ..Default::default()
        };
        let head = train_head(&train, &val, &cfg).unwrap();
        assert_eq!(head, init_head(2, 2, 8).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_best_snapshot() {
        let (train, val) = separable();
        let cfg = HeadTrainConfig {
            max_epochs: 12,
            seed: 21,
            ..Default::default()
        };
        let a = train_head(&train, &val, &cfg).unwrap();
        let b = train_head(&train, &val, &cfg).unwrap();
        assert_eq!(a, b);
        let best = a
            .history
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        let val_loss = eval_loss(&a, &val).unwrap();
        assert_eq!(val_loss.to_bits(), best.to_bits());
    }

    #[test]
    fn divergence_reports_epoch() {
        let (train, val) = separable();
        let cfg = HeadTrainConfig {
            initial_lr: 1e300,
            max_epochs: 5,
            ..Default::default()
        };
        match train_head(&train, &val, &cfg).unwrap_err() {
            Error::Training { epoch, .. } => assert_eq!(epoch, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn family_matches_single_and_parallel() {
        let (train, val) = separable();
        let cfg = HeadTrainConfig {
            max_epochs: 5,
            ..Default::default()
        };
        let one = train_head_family(&train, &val, 1, 40, &cfg, 1).unwrap();
        let direct = train_head(
            &train,
            &val,
            &HeadTrainConfig {
                seed: 40,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(one[0], direct);

        let seq = train_head_family(&train, &val, 4, 40, &cfg, 1).unwrap();
        let par = train_head_family(&train, &val, 4, 40, &cfg, 4).unwrap();
        assert_eq!(seq, par);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(seq[i].weights, seq[j].weights);
            }
        }
    }

    #[test]
    fn head_file_layout() {
        let h = init_head(3, 2, 0xDEAD_BEEF).unwrap();
        let bytes = h.to_bytes();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 4 * (6 + 2));
        assert_eq!(&bytes[..4], b"HDW1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(
            u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            0xDEAD_BEEF
        );
        let back = LinearHead::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(LinearHead::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
