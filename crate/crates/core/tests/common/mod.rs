#![allow(dead_code)]

use std::path::Path;

use mcnet::autodiff::{grad_check_many, Graph, UpsampleMode, Var};
use mcnet::metrics::Mask;
use mcnet::objective::{
    consistency_loss, dice_loss, discrepancy, total_loss, Consistency, Discrepancy, LossWeights, Objective,
    PairReduction, SharpenConfig,
};
use mcnet::segnet::{DecoderMode, Mode, Model, ModelConfig};
use mcnet::synthdata::{generate_dataset, GenConfig, Manifest};
use mcnet::{Result, Tensor};
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg32;

pub fn rng(seed: u64) -> Pcg32 {
    Pcg32::seed_from_u64(seed)
}

pub fn normal(rng: &mut Pcg32, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform(rng: &mut Pcg32, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Normal values pushed at least `gap` away from zero, for kinked ops.
pub fn away_from_zero(rng: &mut Pcg32, shape: &[usize], gap: f64) -> Tensor<f64> {
    normal(rng, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// A random permutation of well-separated values, so max-pooling has no ties.
pub fn distinct(rng: &mut Pcg32, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

pub fn binary_mask(rng: &mut Pcg32, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data).unwrap()
}

type Case = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One differentiable primitive (or loss) with freshly drawn inputs.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Case,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

fn objective(consistency: Consistency, detach: bool, discrepancy: Discrepancy, temperature: f64) -> Objective {
    Objective {
        sharpen: SharpenConfig::new(temperature).unwrap(),
        weights: LossWeights {
            lambda: 0.5,
            beta_max: 0.1,
            ramp_iters: 10,
            discrepancy,
            pair_reduction: PairReduction::Sum,
        },
        consistency,
        detach,
    }
}

/// Every differentiable primitive and loss, with inputs drawn from `seed`.
pub fn grad_cases(seed: u64) -> Vec<GradCase> {
    let r = &mut rng(seed);
    let mut cases = vec![
        case("conv2d_pad1_bias", vec![normal(r, &[2, 2, 5, 5]), normal(r, &[3, 2, 3, 3]), normal(r, &[3])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case("conv2d_stride2", vec![normal(r, &[1, 2, 6, 6]), normal(r, &[2, 2, 2, 2])], |g, v| {
            g.conv2d(v[0], v[1], None, 2, 0)
        }),
        case("conv2d_pointwise", vec![normal(r, &[2, 3, 4, 4]), normal(r, &[2, 3, 1, 1]), normal(r, &[2])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 0)
        }),
        case("conv_transpose2d", vec![normal(r, &[2, 3, 3, 3]), normal(r, &[3, 2, 2, 2])], |g, v| {
            g.conv_transpose2d(v[0], v[1], 2)
        }),
        case("bias_add", vec![normal(r, &[2, 3, 2, 2]), normal(r, &[3])], |g, v| g.bias_add(v[0], v[1])),
        case("upsample_bilinear", vec![normal(r, &[1, 2, 3, 4])], |g, v| {
            g.upsample(v[0], 2, UpsampleMode::Bilinear)
        }),
        case("upsample_nearest", vec![normal(r, &[1, 2, 3, 4])], |g, v| g.upsample(v[0], 2, UpsampleMode::Nearest)),
        case("max_pool2", vec![distinct(r, &[2, 2, 4, 4])], |g, v| g.max_pool2(v[0])),
        case(
            "batch_norm",
            vec![normal(r, &[3, 2, 3, 3]), uniform(r, &[2], 0.5, 1.5), normal(r, &[2])],
            |g, v| g.batch_norm(v[0], v[1], v[2], 1e-5),
        ),
        case(
            "batch_norm_eval",
            vec![normal(r, &[2, 2, 3, 3]), uniform(r, &[2], 0.5, 1.5), normal(r, &[2])],
            |g, v| g.batch_norm_eval(v[0], v[1], v[2], vec![0.3, -0.2], vec![1.5, 0.7], 1e-5),
        ),
        case("relu", vec![away_from_zero(r, &[2, 3, 3, 3], 1e-3)], |g, v| g.relu(v[0])),
        case("sigmoid", vec![normal(r, &[2, 1, 3, 3])], |g, v| g.sigmoid(v[0])),
        case("softmax", vec![normal(r, &[2, 3, 2, 2])], |g, v| g.softmax(v[0])),
        case("add", vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |g, v| g.add(v[0], v[1])),
        case("sub", vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |g, v| g.sub(v[0], v[1])),
        case("mul", vec![normal(r, &[2, 3]), normal(r, &[2, 3])], |g, v| g.mul(v[0], v[1])),
        case("div", vec![normal(r, &[2, 3]), away_from_zero(r, &[2, 3], 0.5)], |g, v| g.div(v[0], v[1])),
        case("affine", vec![normal(r, &[4])], |g, v| g.affine(v[0], -1.5, 0.25)),
        case("square", vec![normal(r, &[4])], |g, v| g.square(v[0])),
        case("ln", vec![uniform(r, &[5], 0.1, 2.0)], |g, v| g.ln(v[0], 1e-8)),
        case("sum", vec![normal(r, &[2, 3])], |g, v| g.sum(v[0])),
        case("mean", vec![normal(r, &[2, 3])], |g, v| g.mean(v[0])),
        case("sum_per_channel", vec![normal(r, &[2, 3, 2, 2])], |g, v| g.sum_per_channel(v[0])),
        case("concat_channels", vec![normal(r, &[2, 1, 2, 2]), normal(r, &[2, 2, 2, 2])], |g, v| {
            g.concat_channels(v[0], v[1])
        }),
        case("select_batch", vec![normal(r, &[3, 2, 2, 2])], |g, v| g.select_batch(v[0], vec![2, 0])),
        case("sharpen_binary_t0.5", vec![uniform(r, &[2, 1, 2, 3], 0.05, 0.95)], |g, v| g.sharpen(v[0], 0.5)),
        case("sharpen_binary_t0.1", vec![uniform(r, &[2, 1, 2, 3], 0.2, 0.8)], |g, v| g.sharpen(v[0], 0.1)),
        case("sharpen_multiclass", vec![normal(r, &[2, 3, 2, 2])], |g, v| {
            let p = g.softmax(v[0])?;
            g.sharpen(p, 0.3)
        }),
    ];
    let y = binary_mask(r, &[2, 1, 3, 3]);
    cases.push(case("dice_loss", vec![normal(r, &[2, 1, 3, 3])], move |g, v| {
        let p = g.sigmoid(v[0])?;
        let y = g.constant(y.clone());
        dice_loss(g, p, y)
    }));
    let y3 = {
        let labels: Vec<f64> = (0..2 * 4).map(|_| r.random_range(0..3) as f64).collect();
        let mut onehot = vec![0.0; 2 * 3 * 4];
        for (i, &l) in labels.iter().enumerate() {
            let (b, p) = (i / 4, i % 4);
            onehot[(b * 3 + l as usize) * 4 + p] = 1.0;
        }
        Tensor::new(&[2, 3, 2, 2], onehot).unwrap()
    };
    cases.push(case("dice_loss_multiclass", vec![normal(r, &[2, 3, 2, 2])], move |g, v| {
        let p = g.softmax(v[0])?;
        let y = g.constant(y3.clone());
        dice_loss(g, p, y)
    }));
    for (name, kind) in [("discrepancy_mse", Discrepancy::Mse), ("discrepancy_kl", Discrepancy::Kl)] {
        cases.push(case(name, vec![normal(r, &[2, 1, 2, 3]), normal(r, &[2, 1, 2, 3])], move |g, v| {
            let t = g.sigmoid(v[0])?;
            let p = g.sigmoid(v[1])?;
            discrepancy(g, t, p, kind)
        }));
    }
    for (name, cons, detach, kind) in [
        ("consistency_raw", Consistency::Raw, false, Discrepancy::Mse),
        ("consistency_raw_kl", Consistency::Raw, false, Discrepancy::Kl),
        ("consistency_sharpened", Consistency::Sharpened, false, Discrepancy::Mse),
        ("consistency_mutual", Consistency::Mutual, false, Discrepancy::Mse),
        ("consistency_mutual_kl", Consistency::Mutual, false, Discrepancy::Kl),
    ] {
        let inputs = (0..3).map(|_| normal(r, &[2, 1, 2, 2])).collect();
        let obj = objective(cons, detach, kind, 0.5);
        cases.push(case(name, inputs, move |g, v| {
            let outs = v.iter().map(|&x| g.sigmoid(x)).collect::<Result<Vec<_>>>()?;
            consistency_loss(g, &outs, &obj)
        }));
    }
    let mask: Vec<u8> = (0..9).map(|_| r.random_range(0..2u8)).collect();
    let inputs = (0..3).map(|_| normal(r, &[2, 1, 3, 3])).collect();
    let obj = objective(Consistency::Mutual, false, Discrepancy::Mse, 0.1);
    cases.push(case("total_loss", inputs, move |g, v| {
        let outs = v.iter().map(|&x| g.sigmoid(x)).collect::<Result<Vec<_>>>()?;
        let labels = [Some(&mask[..]), None];
        Ok(total_loss(g, &outs, &labels, 0.3, &obj, 5)?.0)
    }));
    cases
}

/// Outcome of one gradient check.
pub struct GradResult {
    pub name: String,
    pub max_rel_error: f64,
    pub components: usize,
}

pub fn run_grad_cases(seed: u64, h: f64, tol: f64) -> Vec<GradResult> {
    grad_cases(seed)
        .into_iter()
        .map(|c| {
            let rep = grad_check_many(&c.f, &c.inputs, h, tol).unwrap_or_else(|e| panic!("{}: {e}", c.name));
            GradResult {
                name: c.name.to_string(),
                max_rel_error: rep.max_rel_error,
                components: rep.components,
            }
        })
        .collect()
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        n_decoders: 3,
        decoder_modes: vec![DecoderMode::Transposed, DecoderMode::Bilinear, DecoderMode::Nearest],
        base_width: 2,
        depth: 2,
        ..ModelConfig::default()
    }
}

fn composite_loss(model: &Model<f64>, x: &Tensor<f64>, mask: &[u8], obj: &Objective) -> (f64, Vec<Option<Tensor<f64>>>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pass = model.forward_graph(&mut g, xv, &[0, 1, 2], Mode::Train).unwrap();
    let labels = [Some(mask), None];
    let (loss, _) = total_loss(&mut g, &pass.outputs, &labels, 0.5, obj, 7).unwrap();
    let value = g.value(loss).item();
    g.backward(loss).unwrap();
    let grads = pass.bound.iter().map(|b| b.and_then(|v| g.grad(v).cloned())).collect();
    (value, grads)
}

/// Central differences of the full training loss of a tiny three-decoder
/// model against its reverse-mode parameter gradients, on `probes` randomly
/// chosen scalars. Returns the worst `|a - fd| / max(1, |a|)`.
pub fn composite_model_check(seed: u64, probes: usize, h: f64) -> f64 {
    let r = &mut rng(seed ^ 0xc0ffee);
    let model = Model::<f64>::build(tiny_model_config(), seed).unwrap();
    let x = normal(r, &[2, 1, 8, 8]);
    let mask: Vec<u8> = (0..64).map(|_| r.random_range(0..2u8)).collect();
    let cons = [Consistency::Mutual, Consistency::Raw, Consistency::Sharpened][seed as usize % 3];
    let obj = objective(cons, false, Discrepancy::Mse, 0.5);
    let (_, grads) = composite_loss(&model, &x, &mask, &obj);
    let trainable: Vec<usize> = (0..model.params().len())
        .filter(|&i| model.params().entries()[i].trainable)
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let pi = trainable[r.random_range(0..trainable.len())];
        let n = model.params().get(pi).len();
        let ei = r.random_range(0..n);
        let analytic = grads[pi].as_ref().map(|t| t.data()[ei]).unwrap_or(0.0);
        let mut plus = model.clone();
        plus.params_mut().get_mut(pi).data_mut()[ei] += h;
        let mut minus = model.clone();
        minus.params_mut().get_mut(pi).data_mut()[ei] -= h;
        let fd = (composite_loss(&plus, &x, &mask, &obj).0 - composite_loss(&minus, &x, &mask, &obj).0) / (2.0 * h);
        worst = worst.max((analytic - fd).abs() / analytic.abs().max(1.0));
    }
    worst
}

/// Random mask made of a few rectangles and discs plus scattered pixels.
pub fn random_mask(r: &mut Pcg32, h: usize, w: usize) -> Mask {
    let mut data = vec![0u8; h * w];
    for _ in 0..r.random_range(0..4) {
        let (cy, cx) = (r.random_range(0..h) as f64, r.random_range(0..w) as f64);
        let rad = r.random_range(0.5..(h.max(w) as f64 / 3.0).max(1.0));
        let disc = r.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= rad * rad
                } else {
                    dy.abs() <= rad && dx.abs() <= rad * 0.7
                };
                if inside {
                    data[y * w + x] = 1;
                }
            }
        }
    }
    let flips = r.random_range(0..=(h * w / 20).max(1));
    for _ in 0..flips {
        let i = r.random_range(0..h * w);
        data[i] ^= 1;
    }
    Mask::new(h, w, data).unwrap()
}

/// Surface pixels by direct enumeration.
pub fn oracle_surface(m: &Mask) -> Vec<(usize, usize)> {
    let fg = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < m.height && (c as usize) < m.width && m.data[r as usize * m.width + c as usize] != 0
    };
    let mut out = Vec::new();
    for r in 0..m.height as isize {
        for c in 0..m.width as isize {
            if fg(r, c) && !(fg(r - 1, c) && fg(r + 1, c) && fg(r, c - 1) && fg(r, c + 1)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

fn oracle_percentile(d: &[f64]) -> f64 {
    let mut s = d.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// `(hd95, asd)` from all pairwise distances, `None` if a surface is empty.
pub fn oracle_distances(pred: &Mask, gt: &Mask) -> Option<(f64, f64)> {
    let sp = oracle_surface(pred);
    let sg = oracle_surface(gt);
    if sp.is_empty() || sg.is_empty() {
        return None;
    }
    let nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| {
                        let (dr, dc) = (r as f64 - r2 as f64, c as f64 - c2 as f64);
                        (dr * dr + dc * dc).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let a = nearest(&sp, &sg);
    let b = nearest(&sg, &sp);
    let mut total = 0.0;
    for v in a.iter().chain(&b) {
        total += v;
    }
    Some((oracle_percentile(&a).max(oracle_percentile(&b)), total / (a.len() + b.len()) as f64))
}

/// Small generated dataset for harness tests.
pub fn tiny_dataset(root: &Path, seed: u64) -> Manifest {
    let cfg = GenConfig {
        seed,
        train_count: 20,
        val_count: 4,
        test_count: 4,
        size: 32,
        labeled_fraction: 0.2,
        root: root.to_path_buf(),
        ..GenConfig::default()
    };
    generate_dataset(&cfg).unwrap()
}

/// Closed-form `1 / (1 + ((1 - p) / p)^(1/T))`, algebraically equal to the
/// power-ratio form.
pub fn sharpen_oracle(p: f64, t: f64) -> f64 {
    if p == 0.0 {
        return 0.0;
    }
    1.0 / (1.0 + ((1.0 - p) / p).powf(1.0 / t))
}

fn sharpen_scalar(p: f64, t: f64) -> f64 {
    let x = Tensor::new(&[1, 1, 1, 1], vec![p]).unwrap();
    mcnet::objective::sharpen_tensor(&x, SharpenConfig::new(t).unwrap()).unwrap().item()
}

fn check(ok: bool, what: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

/// Fixed points, identity at T = 1, symmetry and the worked value.
pub fn sharpen_suite() -> std::result::Result<(), String> {
    for t in [0.05, 0.1, 0.3, 0.5, 1.0, 2.0] {
        for p in [0.0, 0.5, 1.0] {
            let s = sharpen_scalar(p, t);
            check(s == p, || format!("fixed point p={p} T={t} gave {s}"))?;
        }
    }
    for k in 0..=1000 {
        let p = k as f64 / 1000.0;
        let s = sharpen_scalar(p, 1.0);
        check((s - p).abs() <= 1e-12, || format!("T=1 not identity at {p}: {s}"))?;
        for t in [0.1, 0.5, 1.0] {
            let (a, b) = (sharpen_scalar(1.0 - p, t), 1.0 - sharpen_scalar(p, t));
            check((a - b).abs() <= 1e-12, || format!("symmetry p={p} T={t}: {a} vs {b}"))?;
        }
    }
    for (p, t) in [(0.7, 0.1), (0.8, 0.5), (0.3, 0.25)] {
        let (s, o) = (sharpen_scalar(p, t), sharpen_oracle(p, t));
        check((s - o).abs() <= 1e-12, || format!("sharpen({p}, {t}) = {s}, oracle {o}"))?;
    }
    let s = sharpen_scalar(0.7, 0.1);
    check((s - 0.999791).abs() <= 1e-6, || format!("sharpen(0.7, 0.1) = {s}"))
}

pub fn mc_objective(detach: bool, temperature: f64) -> Objective {
    objective(Consistency::Mutual, detach, Discrepancy::Mse, temperature)
}

fn pixels(values: &[f64]) -> Vec<Tensor<f64>> {
    values.iter().map(|&v| Tensor::new(&[1, 1, 1, 1], vec![v]).unwrap()).collect()
}

/// Mutual consistency loss of constant inputs (no gradient needed).
pub fn l_mc(outputs: &[Tensor<f64>], obj: &Objective) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = outputs.iter().map(|t| g.constant(t.clone())).collect();
    let l = consistency_loss(&mut g, &vars, obj).unwrap();
    g.value(l).item()
}

/// Plain-loop mutual consistency: sum over ordered pairs of the mean squared
/// difference between the sharpened i-th and raw j-th map.
pub fn l_mc_oracle(outputs: &[Tensor<f64>], t: f64) -> f64 {
    let mut total = 0.0;
    for (i, a) in outputs.iter().enumerate() {
        for (j, b) in outputs.iter().enumerate() {
            if i == j {
                continue;
            }
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&pa, &pb)| (sharpen_oracle(pa, t) - pb).powi(2))
                .sum();
            total += s / a.len() as f64;
        }
    }
    total
}

/// Gradients of the detached mutual loss with respect to the logits, against
/// the same loss built from precomputed constant targets.
pub fn stop_gradient_gap(seed: u64) -> (f64, f64) {
    let r = &mut rng(seed);
    let logits: Vec<Tensor<f64>> = (0..3).map(|_| normal(r, &[2, 1, 3, 3])).collect();
    let grads = |mode: u8| -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let xs: Vec<Var> = logits.iter().map(|t| g.param(t.clone())).collect();
        let ps = xs.iter().map(|&x| g.sigmoid(x).unwrap()).collect::<Vec<_>>();
        let loss = match mode {
            0 => consistency_loss(&mut g, &ps, &mc_objective(true, 0.1)).unwrap(),
            1 => consistency_loss(&mut g, &ps, &mc_objective(false, 0.1)).unwrap(),
            _ => {
                let frozen: Vec<Var> = ps
                    .iter()
                    .map(|&p| {
                        let v = g.value(p).map(|x| sharpen_oracle(x, 0.1));
                        g.constant(v)
                    })
                    .collect();
                let mut acc = None;
                for i in 0..3 {
                    for j in 0..3 {
                        if i != j {
                            let d = discrepancy(&mut g, frozen[i], ps[j], Discrepancy::Mse).unwrap();
                            acc = Some(match acc {
                                None => d,
                                Some(a) => g.add(a, d).unwrap(),
                            });
                        }
                    }
                }
                acc.unwrap()
            }
        };
        g.backward(loss).unwrap();
        xs.iter().map(|&x| g.grad(x).unwrap().clone()).collect()
    };
    let (detached, attached, frozen) = (grads(0), grads(1), grads(2));
    let gap = |a: &[Tensor<f64>], b: &[Tensor<f64>]| a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
    (gap(&detached, &frozen), gap(&attached, &frozen))
}

pub const WORKED_EXAMPLE_ORACLE: f64 = 0.127_999_017_2;

/// Worked value, pair count, zero-iff and the stop-gradient contract.
pub fn loss_suite() -> std::result::Result<(), String> {
    let obj = mc_objective(true, 0.5);
    let v = l_mc(&pixels(&[0.8, 0.6]), &obj);
    let oracle = (16.0f64 / 17.0 - 0.6).powi(2) + (9.0f64 / 13.0 - 0.8).powi(2);
    check((v - oracle).abs() <= 1e-12, || format!("worked example {v}, oracle {oracle}"))?;
    check((v - WORKED_EXAMPLE_ORACLE).abs() <= 1e-6, || format!("worked example {v}"))?;
    for n in 2..=6 {
        let pairs = mcnet::objective::ordered_pairs(n);
        check(pairs.len() == n * (n - 1), || format!("{} pairs for n={n}", pairs.len()))?;
        // Equal soft outputs make every ordered pair contribute the same term.
        let l = l_mc(&pixels(&vec![0.8; n]), &obj);
        let per_pair = (sharpen_oracle(0.8, 0.5) - 0.8).powi(2);
        check((l / per_pair - (n * (n - 1)) as f64).abs() < 1e-9, || format!("n={n}: {l}"))?;
    }
    let r = &mut rng(11);
    for trial in 0..50 {
        let n = 2 + trial % 3;
        let base = binary_mask(r, &[2, 1, 4, 4]);
        let same = vec![base.clone(); n];
        let l = l_mc(&same, &obj);
        check(l == 0.0, || format!("identical binary outputs gave {l}"))?;
        let mut diff = same.clone();
        let k = r.random_range(0..n);
        let e = r.random_range(0..diff[k].len());
        diff[k].data_mut()[e] = r.random_range(0.05..0.95);
        let l = l_mc(&diff, &obj);
        check(l > 0.0, || "perturbed outputs gave zero loss".into())?;
        let soft = (0..n).map(|_| uniform(r, &[1, 1, 3, 3], 0.0, 1.0)).collect::<Vec<_>>();
        let (a, b) = (l_mc(&soft, &obj), l_mc_oracle(&soft, 0.5));
        check(a > 0.0 && (a - b).abs() < 1e-12, || format!("random outputs {a} vs oracle {b}"))?;
    }
    for seed in 0..5 {
        let (detached, attached) = stop_gradient_gap(seed);
        check(detached <= 1e-15, || format!("seed {seed}: detached gradient differs from frozen targets by {detached:e}"))?;
        check(attached > 1e-6, || format!("seed {seed}: attached gradient indistinguishable ({attached:e})"))?;
    }
    Ok(())
}

/// Brute-force agreement on random mask pairs plus the fixed examples.
pub fn metrics_suite(pairs: usize, seed: u64) -> std::result::Result<(), String> {
    use mcnet::metrics::{overlap_metrics, surface_distances};
    let r = &mut rng(seed);
    let mut defined = 0;
    for k in 0..pairs {
        let (h, w) = (r.random_range(1..=64), r.random_range(1..=64));
        let a = random_mask(r, h, w);
        let b = random_mask(r, h, w);
        let fast = surface_distances(&a, &b).ok();
        let slow = oracle_distances(&a, &b);
        match (fast, slow) {
            (Some(f), Some((hd, asd))) => {
                defined += 1;
                check(f.hd95 == hd && f.asd == asd, || {
                    format!("pair {k} ({h}x{w}): ({}, {}) vs oracle ({hd}, {asd})", f.hd95, f.asd)
                })?;
            }
            (None, None) => {}
            (f, s) => return Err(format!("pair {k}: definedness differs ({f:?} vs {s:?})")),
        }
        let o = overlap_metrics(&a, &b).map_err(|e| e.to_string())?;
        let j = o.dice / (2.0 - o.dice);
        check((o.jaccard - j).abs() <= 1e-12, || format!("pair {k}: jaccard {} vs {j}", o.jaccard))?;
    }
    check(defined * 2 >= pairs, || format!("only {defined} of {pairs} pairs had surfaces"))?;
    let sq = |r0: usize, c0: usize| Mask::from_fn(20, 20, move |r, c| (r0..r0 + 8).contains(&r) && (c0..c0 + 8).contains(&c));
    let o = overlap_metrics(&sq(2, 2), &sq(2, 6)).map_err(|e| e.to_string())?;
    check(o.dice == 0.5 && o.jaccard == 1.0 / 3.0, || format!("shifted square {o:?}"))?;
    let pa = Mask::from_fn(10, 10, |r, c| (r, c) == (1, 1));
    let pb = Mask::from_fn(10, 10, |r, c| (r, c) == (4, 5));
    let d = surface_distances(&pa, &pb).map_err(|e| e.to_string())?;
    check(d.hd95 == 5.0 && d.asd == 5.0, || format!("offset pixels {d:?}"))
}
