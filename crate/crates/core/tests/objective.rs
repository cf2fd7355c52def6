mod common;

use mcnet::autodiff::Graph;
use mcnet::objective::{rampup_weight, total_loss, LossWeights};
use mcnet::Tensor;
use proptest::prelude::*;

#[test]
fn sharpening_identities() {
    common::sharpen_suite().unwrap();
}

#[test]
fn mutual_consistency_suite() {
    common::loss_suite().unwrap();
}

#[test]
fn rampup_values() {
    let w = LossWeights {
        beta_max: 0.4,
        ramp_iters: 1000,
        ..LossWeights::default()
    };
    assert!((rampup_weight(0, &w) - 0.4 * (-5.0f64).exp()).abs() < 1e-15);
    assert!((rampup_weight(500, &w) - 0.4 * (-1.25f64).exp()).abs() < 1e-15);
    assert!((rampup_weight(0, &w) / 0.4 - 0.006738).abs() < 1e-6);
    assert!((rampup_weight(500, &w) / 0.4 - 0.286505).abs() < 1e-6);
    assert_eq!(rampup_weight(1000, &w), 0.4);
    assert_eq!(rampup_weight(5000, &w), 0.4);
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }
}

#[test]
fn sharpening_is_monotone_and_lowers_entropy() {
    for t in [0.1, 0.5, 1.0] {
        let grid: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        let x = Tensor::new(&[1, 1, 1, 101], grid.clone()).unwrap();
        let s = mcnet::objective::sharpen_tensor(&x, mcnet::objective::SharpenConfig::new(t).unwrap()).unwrap();
        let s = s.data();
        for k in 0..=100 {
            assert!((0.0..=1.0).contains(&s[k]));
            if k > 0 && (t == 1.0 || (s[k - 1] > 0.0 && s[k] < 1.0)) {
                assert!(s[k] > s[k - 1], "T={t} not increasing at {k}");
            }
            if t < 1.0 {
                let (hs, hp) = (binary_entropy(s[k]), binary_entropy(grid[k]));
                if [0, 50, 100].contains(&k) {
                    assert!((hs - hp).abs() < 1e-15);
                } else {
                    assert!(hs < hp, "T={t} p={}: {hs} >= {hp}", grid[k]);
                }
            }
        }
    }
}

#[test]
fn sharpen_rejects_nonpositive_temperature() {
    assert!(mcnet::objective::SharpenConfig::new(0.0).is_err());
    assert!(mcnet::objective::SharpenConfig::new(-1.0).is_err());
}

fn dice_oracle(p: &[f64], y: &[u8]) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(a, &b)| a * b as f64).sum();
    let ps: f64 = p.iter().sum();
    let ys = y.iter().filter(|&&v| v == 1).count() as f64;
    1.0 - (2.0 * inter + 1e-5) / (ps + ys + 1e-5)
}

#[test]
fn dice_loss_examples() {
    let mut g = Graph::<f64>::new();
    let y: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
    let p = g.constant(Tensor::full(&[1, 1, 10, 10], 0.5));
    let yv = g.constant(Tensor::new(&[1, 1, 10, 10], y.clone()).unwrap());
    let l = mcnet::objective::dice_loss(&mut g, p, yv).unwrap();
    assert!((g.value(l).item() - 0.5).abs() < 1e-6);
    let p = g.constant(Tensor::new(&[1, 1, 10, 10], y).unwrap());
    let l = mcnet::objective::dice_loss(&mut g, p, yv).unwrap();
    assert!(g.value(l).item().abs() < 1e-5);
    let z = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let l = mcnet::objective::dice_loss(&mut g, z, z).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sharpen_symmetry(p in 0.0f64..=1.0, t in 0.05f64..2.0) {
        let cfg = mcnet::objective::SharpenConfig::new(t).unwrap();
        let f = |v: f64| mcnet::objective::sharpen_tensor(&Tensor::new(&[1, 1, 1, 1], vec![v]).unwrap(), cfg).unwrap().item();
        prop_assert!((f(1.0 - p) - (1.0 - f(p))).abs() <= 1e-12);
    }

    // total == lambda * sum of per-decoder dice on labeled samples + beta * l_mc,
    // with both parts recomputed in plain loops.
    #[test]
    fn loss_recomposition(seed in 0u64..10_000, lambda in 0.0f64..2.0, beta in 0.0f64..1.0, labeled in 0usize..=3) {
        let r = &mut common::rng(seed);
        let probs: Vec<Tensor<f64>> = (0..3).map(|_| common::uniform(r, &[3, 1, 4, 4], 0.0, 1.0)).collect();
        let masks: Vec<Vec<u8>> = (0..3).map(|_| common::binary_mask(r, &[16]).data().iter().map(|&v| v as u8).collect()).collect();
        let labels: Vec<Option<&[u8]>> = (0..3).map(|b| (b < labeled).then(|| &masks[b][..])).collect();
        let mut obj = common::mc_objective(true, 0.1);
        obj.weights.lambda = lambda;
        let mut g = Graph::new();
        let vars: Vec<_> = probs.iter().map(|t| g.constant(t.clone())).collect();
        let (_, rep) = total_loss(&mut g, &vars, &labels, beta, &obj, 3).unwrap();

        let mut seg = 0.0;
        for (k, p) in probs.iter().enumerate() {
            let l = if labeled == 0 {
                0.0
            } else {
                let pl = &p.data()[..16 * labeled];
                let yl: Vec<u8> = masks[..labeled].concat();
                dice_oracle(pl, &yl)
            };
            prop_assert!((rep.l_seg_per_decoder[k] - l).abs() < 1e-12);
            seg += l;
        }
        let mc = common::l_mc_oracle(&probs, 0.1);
        prop_assert!((rep.l_mc - mc).abs() < 1e-12);
        prop_assert!((rep.total - (lambda * seg + beta * mc)).abs() < 1e-6);
        prop_assert!((rep.total - (lambda * rep.l_seg_per_decoder.iter().sum::<f64>() + rep.beta_t * rep.l_mc)).abs() < 1e-6);
    }

    #[test]
    fn zero_consistency_iff_targets_match(seed in 0u64..10_000, n in 2usize..5) {
        let r = &mut common::rng(seed);
        let obj = common::mc_objective(true, 0.5);
        let base = common::binary_mask(r, &[1, 1, 3, 3]);
        let mut outs = vec![base; n];
        if seed % 2 == 1 {
            let k = (seed as usize / 2) % n;
            let e = (seed as usize / 7) % 9;
            outs[k].data_mut()[e] = (seed % 97) as f64 / 100.0 + 0.01;
        }
        let matched = (0..n).all(|i| (0..n).all(|j| i == j || outs[i].data().iter().zip(outs[j].data()).all(|(&a, &b)| common::sharpen_oracle(a, 0.5) == b)));
        let l = common::l_mc(&outs, &obj);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, matched);
    }
}
