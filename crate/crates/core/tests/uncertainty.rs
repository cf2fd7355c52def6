mod common;

use mcnet::uncertainty::{read_range, summarize_uncertainty, uncertainty_map, write_heatmap, Statistic};
use mcnet::Tensor;
use proptest::prelude::*;

fn outputs(seed: u64, n: usize, shape: &[usize]) -> Vec<Tensor<f64>> {
    let r = &mut common::rng(seed);
    (0..n).map(|_| common::uniform(r, shape, 0.0, 1.0)).collect()
}

fn pixel_outputs(values: &[f64]) -> Vec<Tensor<f64>> {
    values.iter().map(|&v| Tensor::full(&[1, 1, 2, 2], v)).collect()
}

#[test]
fn hand_computed_variances() {
    let m = uncertainty_map(&pixel_outputs(&[0.2, 0.5, 0.8]), Statistic::Variance).unwrap();
    assert!(m.values.iter().all(|v| (v - 0.06).abs() < 1e-15));
    let m = uncertainty_map(&pixel_outputs(&[0.0, 1.0]), Statistic::Variance).unwrap();
    assert!(m.values.iter().all(|&v| v == 0.25));
    for stat in [Statistic::Variance, Statistic::MeanPairwiseSq] {
        let m = uncertainty_map(&pixel_outputs(&[0.3, 0.3, 0.3]), stat).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }
    assert!(uncertainty_map(&pixel_outputs(&[0.3]), Statistic::Variance).is_err());
}

#[test]
fn summary_over_mask() {
    let map = uncertainty_map(&outputs(1, 3, &[1, 1, 4, 4]), Statistic::Variance).unwrap();
    let all = summarize_uncertainty(&map, None).unwrap();
    let mean = map.values.iter().sum::<f64>() / 16.0;
    assert!((all - mean).abs() < 1e-15);
    let mask: Vec<u8> = (0..16).map(|i| (i < 4) as u8).collect();
    let part = summarize_uncertainty(&map, Some(&mask)).unwrap();
    assert!((part - map.values[..4].iter().sum::<f64>() / 4.0).abs() < 1e-15);
    assert!(summarize_uncertainty(&map, Some(&[0; 16])).is_err());
}

#[test]
fn heatmap_sidecar_records_range() {
    let dir = tempfile::tempdir().unwrap();
    let map = uncertainty_map(&outputs(2, 3, &[1, 1, 5, 7]), Statistic::Variance).unwrap();
    let path = dir.path().join("u.pgm");
    let sidecar = write_heatmap(&map, 0, &path).unwrap();
    assert_eq!(sidecar, dir.path().join("u.range.txt"));
    let (lo, hi) = read_range(&sidecar).unwrap();
    let min = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.values.iter().cloned().fold(0.0, f64::max);
    assert_eq!((lo, hi), (min, max));
    let img = mcnet::pgm::Pgm::read(&path).unwrap();
    assert_eq!((img.width, img.height, img.maxval), (7, 5, 255));
    assert_eq!(*img.data.iter().max().unwrap(), 255);
    assert_eq!(*img.data.iter().min().unwrap(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_invariant(seed in any::<u64>(), n in 2usize..6, rot in 0usize..6) {
        let outs = outputs(seed, n, &[2, 1, 3, 3]);
        let mut perm = outs.clone();
        perm.rotate_left(rot % n);
        perm.swap(0, n - 1);
        for stat in [Statistic::Variance, Statistic::MeanPairwiseSq, Statistic::EntropyOfMean] {
            let (a, b) = (uncertainty_map(&outs, stat).unwrap(), uncertainty_map(&perm, stat).unwrap());
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pairwise_is_scaled_variance(seed in any::<u64>(), n in 2usize..7) {
        let outs = outputs(seed, n, &[1, 1, 4, 4]);
        let v = uncertainty_map(&outs, Statistic::Variance).unwrap();
        let p = uncertainty_map(&outs, Statistic::MeanPairwiseSq).unwrap();
        for (var, pair) in v.values.iter().zip(&p.values) {
            prop_assert!((pair - 2.0 * var * n as f64 / (n as f64 - 1.0)).abs() < 1e-10);
            prop_assert!(*var >= 0.0 && *var <= 0.25);
        }
    }

    #[test]
    fn entropy_of_mean_is_bounded(seed in any::<u64>(), n in 2usize..5) {
        let outs = outputs(seed, n, &[1, 1, 3, 3]);
        let m = uncertainty_map(&outs, Statistic::EntropyOfMean).unwrap();
        prop_assert!(m.values.iter().all(|&v| (0.0..=std::f64::consts::LN_2 + 1e-15).contains(&v)));
    }
}
