mod common;

use calib_ensemble::metrics::{
    accuracy, mean_confidence, reliability_bins, CalibrationReport, PredictionSet,
};
use calib_ensemble::numerics::RngStream;
use common::{brute_force_ece_mce, exact_bin, random_prediction_set};

#[test]
fn hundred_samples_ten_bins_match_grouping_oracle() {
    let mut rng = RngStream::new(2024);
    let n = 100;
    let predicted: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
    let confidence: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.25, 1.0)).collect();
    let pred = PredictionSet::new(predicted, confidence, labels, 4).unwrap();

    let bins = reliability_bins(&pred, 10).unwrap();
    for b in &bins {
        let members: Vec<usize> = (0..n)
            .filter(|&i| exact_bin(pred.confidence()[i], 10) == b.bin_index)
            .collect();
        assert_eq!(b.count, members.len(), "bin {}", b.bin_index);
        if members.is_empty() {
            assert!(b.mean_confidence.is_none() && b.mean_accuracy.is_none());
            continue;
        }
        let k = members.len() as f64;
        let conf = members.iter().map(|&i| pred.confidence()[i]).sum::<f64>() / k;
        let acc = members.iter().filter(|&&i| pred.is_correct(i)).count() as f64 / k;
        assert!((b.mean_confidence.unwrap() - conf).abs() <= 1e-12);
        assert_eq!(b.mean_accuracy.unwrap(), acc);
    }

    let report = CalibrationReport::compute(&pred, 10, 1.0).unwrap();
    let (ece, mce) = brute_force_ece_mce(&pred, 10);
    assert!((report.ece - ece).abs() <= 1e-12);
    assert!((report.mce - mce).abs() <= 1e-12);
}

#[test]
fn random_sets_match_brute_force() {
    let mut rng = RngStream::new(5);
    for bins in [1, 3, 15, 40] {
        for _ in 0..25 {
            let pred = random_prediction_set(&mut rng, 200, 12, bins);
            let report = CalibrationReport::compute(&pred, bins, 1.0).unwrap();
            let (ece, mce) = brute_force_ece_mce(&pred, bins);
            assert!(
                (report.ece - ece).abs() <= 1e-12,
                "M={bins}: {} vs {ece}",
                report.ece
            );
            assert!(
                (report.mce - mce).abs() <= 1e-12,
                "M={bins}: {} vs {mce}",
                report.mce
            );
        }
    }
}

#[test]
fn single_bin_is_accuracy_confidence_gap() {
    let mut rng = RngStream::new(9);
    for _ in 0..50 {
        let pred = random_prediction_set(&mut rng, 300, 8, 1);
        let report = CalibrationReport::compute(&pred, 1, 1.0).unwrap();
        assert_eq!(report.ece, (accuracy(&pred) - mean_confidence(&pred)).abs());
        assert_eq!(report.ece, report.mce);
    }
}

#[test]
fn top_edge_and_bin_edges() {
    let pred = PredictionSet::new(vec![0, 0, 0], vec![1.0, 0.5, 0.2], vec![0, 1, 0], 2).unwrap();
    let bins = reliability_bins(&pred, 5).unwrap();
    let counts: Vec<usize> = bins.iter().map(|b| b.count).collect();
    assert_eq!(counts, vec![0, 1, 1, 0, 1]);
}
