//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use calib_ensemble::combiners::{build_metamodel, MetaKind};
use calib_ensemble::metrics::PredictionSet;
use calib_ensemble::numerics::{backward_linear, softmax, Matrix, RngStream};
use num_rational::BigRational;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero gradient entries.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Largest relative error between the analytic and the central-difference
/// gradient of a random `D=7, C=5, N=11` linear head.
pub fn linear_fd_max_rel_err(seed: u64) -> f64 {
    let (d, c, n) = (7, 5, 11);
    let mut rng = RngStream::new(seed);
    let x = random_matrix(n, d, &mut rng);
    let w = random_matrix(c, d, &mut rng);
    let b: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let (_, grads) = backward_linear(&x, &w, &b, &y).unwrap();
    let loss = |w: &Matrix, b: &[f64]| backward_linear(&x, w, b, &y).unwrap().0;

    let mut worst: f64 = 0.0;
    for j in 0..w.as_slice().len() {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp.as_mut_slice()[j] += FD_STEP;
        wm.as_mut_slice()[j] -= FD_STEP;
        let numeric = (loss(&wp, &b) - loss(&wm, &b)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads.weights.as_slice()[j], numeric));
    }
    for j in 0..b.len() {
        let (mut bp, mut bm) = (b.clone(), b.clone());
        bp[j] += FD_STEP;
        bm[j] -= FD_STEP;
        let numeric = (loss(&w, &bp) - loss(&w, &bm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads.bias[j], numeric));
    }
    worst
}

/// Same check for an evaluation-mode metamodel with `m=3, C=4, N=9` on
/// probability inputs.
pub fn meta_fd_max_rel_err(kind: MetaKind, seed: u64) -> f64 {
    let (m, c, n) = (3, 4, 9);
    let mut rng = RngStream::new(seed);
    let meta = build_metamodel(kind, m, c, seed).unwrap();
    let blocks: Vec<Matrix> = (0..m)
        .map(|_| softmax(&random_matrix(n, c, &mut rng)))
        .collect();
    let mut x = Matrix::zeros(n, m * c);
    for r in 0..n {
        for (h, blk) in blocks.iter().enumerate() {
            x.row_mut(r)[h * c..(h + 1) * c].copy_from_slice(blk.row(r));
        }
    }
    let y: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let (_, grads) = meta.loss_and_grads(&x, &y, None).unwrap();

    let mut worst: f64 = 0.0;
    for (bi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let shifted = |delta: f64| {
                let mut p = meta.clone();
                p.param_buffers_mut()[bi][j] += delta;
                p.loss_and_grads(&x, &y, None).unwrap().0
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g[j], numeric));
        }
    }
    worst
}

/// Bin of `conf` by exact rational comparison against every edge `i/M`;
/// `1.0` belongs to the top bin.
pub fn exact_bin(conf: f64, bins: usize) -> usize {
    let scaled = BigRational::from_float(conf).unwrap() * BigRational::from_integer(bins.into());
    (0..bins)
        .find(|&i| {
            let lo = BigRational::from_integer(i.into());
            let hi = BigRational::from_integer((i + 1).into());
            scaled >= lo && (scaled < hi || i + 1 == bins)
        })
        .unwrap()
}

/// ECE (d=1) and MCE from a per-sample scan of every bin.
pub fn brute_force_ece_mce(pred: &PredictionSet, bins: usize) -> (f64, f64) {
    let n = pred.len();
    let assigned: Vec<usize> = pred
        .confidence()
        .iter()
        .map(|&c| exact_bin(c, bins))
        .collect();
    let (mut ece, mut mce) = (0.0, 0.0f64);
    for b in 0..bins {
        let (mut count, mut correct, mut conf) = (0usize, 0usize, 0.0);
        for i in 0..n {
            if assigned[i] == b {
                count += 1;
                conf += pred.confidence()[i];
                if pred.predicted()[i] == pred.labels()[i] {
                    correct += 1;
                }
            }
        }
        if count > 0 {
            ece += (correct as f64 - conf).abs() / n as f64;
            mce = mce.max((correct as f64 / count as f64 - conf / count as f64).abs());
        }
    }
    (ece, mce)
}

/// A random prediction set with some confidences placed exactly on bin edges
/// and at 1.0.
pub fn random_prediction_set(
    rng: &mut RngStream,
    max_n: usize,
    max_c: usize,
    bins: usize,
) -> PredictionSet {
    let n = 1 + rng.below(max_n);
    let c = 2 + rng.below(max_c - 1);
    let mut predicted = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let skill = rng.uniform();
    for _ in 0..n {
        let p = rng.below(c);
        let conf = match rng.below(10) {
            0 => rng.below(bins + 1) as f64 / bins as f64,
            1 => 1.0,
            _ => rng.uniform_in(1.0 / c as f64, 1.0),
        };
        let y = if rng.bernoulli(skill) {
            p
        } else {
            rng.below(c)
        };
        predicted.push(p);
        confidence.push(conf.max(1.0 / c as f64).min(1.0));
        labels.push(y);
    }
    PredictionSet::new(predicted, confidence, labels, c).unwrap()
}
