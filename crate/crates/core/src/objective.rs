//! Training objective: soft pseudo labels by temperature sharpening, Dice
//! supervision, cross-decoder consistency and the Gaussian ramp-up weight.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Smoothing constant of the Dice loss.
pub const DICE_EPS: f64 = 1e-5;
/// Floor applied inside logarithms of the KL discrepancy.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharpenConfig {
    pub temperature: f64,
}

impl Default for SharpenConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

impl SharpenConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(Self { temperature })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discrepancy {
    Mse,
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairReduction {
    Sum,
    Mean,
}

/// Which pair of quantities the consistency term compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consistency {
    /// No consistency term (supervised baseline).
    None,
    /// Raw probabilities of decoder i against those of decoder j.
    Raw,
    /// Sharpened outputs of both decoders.
    Sharpened,
    /// Sharpened output of decoder i as a soft pseudo label for the raw
    /// probabilities of decoder j.
    Mutual,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta_max: f64,
    pub ramp_iters: u64,
    pub discrepancy: Discrepancy,
    pub pair_reduction: PairReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta_max: 0.1,
            ramp_iters: 3000,
            discrepancy: Discrepancy::Mse,
            pair_reduction: PairReduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.ramp_iters < 1 {
            return Err(Error::Config("ramp_iters must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.beta_max >= 0.0) {
            return Err(Error::Config("lambda and beta_max must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub l_seg_per_decoder: Vec<f64>,
    pub l_mc: f64,
    pub beta_t: f64,
    pub total: f64,
}

/// Full description of the objective for one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub sharpen: SharpenConfig,
    pub weights: LossWeights,
    pub consistency: Consistency,
    /// Treat soft pseudo labels as constants (mutual mode only).
    pub detach: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            sharpen: SharpenConfig::default(),
            weights: LossWeights::default(),
            consistency: Consistency::Mutual,
            detach: true,
        }
    }
}

/// Soft pseudo label of a probability map, detached from the graph.
pub fn sharpen<T: Element>(g: &mut Graph<T>, p: Var, cfg: SharpenConfig) -> Result<Var> {
    let s = g.sharpen(p, cfg.temperature)?;
    Ok(g.detach(s))
}

/// Sharpen plain probability values without a graph.
pub fn sharpen_tensor<T: Element>(p: &Tensor<T>, cfg: SharpenConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(p.clone());
    let s = g.sharpen(v, cfg.temperature)?;
    Ok(g.value(s).clone())
}

/// `beta_max * exp(-5 (1 - min(t / t_max, 1))^2)`
pub fn rampup_weight(iter: u64, w: &LossWeights) -> f64 {
    let t = (iter as f64 / w.ramp_iters.max(1) as f64).min(1.0);
    w.beta_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// Ordered index pairs `(i, j)` with `i != j`.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Target tensor for the Dice loss from integer masks: the mask itself for a
/// single-channel head, one-hot planes otherwise.
pub fn label_target<T: Element>(masks: &[&[u8]], channels: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let plane = h * w;
    let mut data = vec![T::zero(); masks.len() * channels * plane];
    for (b, m) in masks.iter().enumerate() {
        if m.len() != plane {
            return Err(Error::Input(format!("label has {} pixels, expected {plane}", m.len())));
        }
        for (p, &lab) in m.iter().enumerate() {
            let lab = lab as usize;
            if channels == 1 {
                if lab > 1 {
                    return Err(Error::Data(format!("label value {lab} invalid for a binary head")));
                }
                data[b * plane + p] = T::of(lab as f64);
            } else {
                if lab >= channels {
                    return Err(Error::Data(format!("label value {lab} >= {channels} classes")));
                }
                data[(b * channels + lab) * plane + p] = T::one();
            }
        }
    }
    Tensor::new(&[masks.len(), channels, h, w], data)
}

/// `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)`; for multi-channel
/// predictions the per-class losses of the foreground classes are averaged.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, p: Var, y: Var) -> Result<Var> {
    let (_, c, _, _) = g.value(p).dims4()?;
    if g.value(p).shape() != g.value(y).shape() {
        return Err(Error::Input(format!(
            "dice_loss: prediction {:?} vs target {:?}",
            g.value(p).shape(),
            g.value(y).shape()
        )));
    }
    let py = g.mul(p, y)?;
    let inter = g.sum_per_channel(py)?;
    let psum = g.sum_per_channel(p)?;
    let ysum = g.sum_per_channel(y)?;
    let num = g.affine(inter, 2.0, DICE_EPS)?;
    let den = g.add(psum, ysum)?;
    let den = g.affine(den, 1.0, DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let dice = if c == 1 {
        g.sum(ratio)?
    } else {
        let mut mask = vec![1.0; c];
        mask[0] = 0.0;
        let mask = g.constant(Tensor::from_f64(&[c], &mask)?);
        let fg = g.mul(ratio, mask)?;
        let s = g.sum(fg)?;
        g.scale(s, 1.0 / (c - 1) as f64)?
    };
    g.affine(dice, -1.0, 1.0)
}

/// Elementwise discrepancy `D[target, pred]` reduced to a scalar.
pub fn discrepancy<T: Element>(g: &mut Graph<T>, target: Var, pred: Var, kind: Discrepancy) -> Result<Var> {
    match kind {
        Discrepancy::Mse => {
            let d = g.sub(target, pred)?;
            let sq = g.square(d)?;
            g.mean(sq)
        }
        Discrepancy::Kl => {
            let (b, c, h, w) = g.value(pred).dims4()?;
            let lt = g.ln(target, LOG_FLOOR)?;
            let lp = g.ln(pred, LOG_FLOOR)?;
            let diff = g.sub(lt, lp)?;
            let mut terms = g.mul(target, diff)?;
            if c == 1 {
                let nt = g.affine(target, -1.0, 1.0)?;
                let np = g.affine(pred, -1.0, 1.0)?;
                let lnt = g.ln(nt, LOG_FLOOR)?;
                let lnp = g.ln(np, LOG_FLOOR)?;
                let d2 = g.sub(lnt, lnp)?;
                let t2 = g.mul(nt, d2)?;
                terms = g.add(terms, t2)?;
            }
            let s = g.sum(terms)?;
            g.scale(s, 1.0 / (b * h * w) as f64)
        }
    }
}

/// Consistency term over all ordered decoder pairs.
pub fn consistency_loss<T: Element>(g: &mut Graph<T>, outputs: &[Var], obj: &Objective) -> Result<Var> {
    let n = outputs.len();
    if n < 2 {
        return Err(Error::Config(format!("consistency needs at least 2 decoder outputs, got {n}")));
    }
    let shape = g.value(outputs[0]).shape().to_vec();
    if outputs.iter().any(|o| g.value(*o).shape() != shape) {
        return Err(Error::Input("decoder outputs differ in shape".into()));
    }
    let t = obj.sharpen.temperature;
    let (targets, preds): (Vec<Var>, Vec<Var>) = match obj.consistency {
        Consistency::None => {
            return Err(Error::Config("no consistency term configured".into()));
        }
        Consistency::Raw => (outputs.to_vec(), outputs.to_vec()),
        Consistency::Sharpened => {
            let s = outputs
                .iter()
                .map(|&o| g.sharpen(o, t))
                .collect::<Result<Vec<_>>>()?;
            (s.clone(), s)
        }
        Consistency::Mutual => {
            let s = outputs
                .iter()
                .map(|&o| {
                    if obj.detach {
                        sharpen(g, o, obj.sharpen)
                    } else {
                        g.sharpen(o, t)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            (s, outputs.to_vec())
        }
    };
    let pairs = ordered_pairs(n);
    let mut acc: Option<Var> = None;
    for &(i, j) in &pairs {
        let d = discrepancy(g, targets[i], preds[j], obj.weights.discrepancy)?;
        acc = Some(match acc {
            None => d,
            Some(a) => g.add(a, d)?,
        });
    }
    let total = acc.expect("at least one pair");
    match obj.weights.pair_reduction {
        PairReduction::Sum => Ok(total),
        PairReduction::Mean => g.scale(total, 1.0 / pairs.len() as f64),
    }
}

/// Mutual consistency with detached soft pseudo labels.
pub fn mutual_consistency_loss<T: Element>(
    g: &mut Graph<T>,
    outputs: &[Var],
    cfg: SharpenConfig,
    w: &LossWeights,
) -> Result<Var> {
    let obj = Objective {
        sharpen: cfg,
        weights: *w,
        consistency: Consistency::Mutual,
        detach: true,
    };
    consistency_loss(g, outputs, &obj)
}

/// `lambda * sum_i dice(out_i[labeled], y) + beta * L_mc`. Supervision uses
/// only samples with a label; the consistency term uses the whole batch.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    outputs: &[Var],
    labels: &[Option<&[u8]>],
    beta: f64,
    obj: &Objective,
    iteration: u64,
) -> Result<(Var, LossReport)> {
    let first = *outputs
        .first()
        .ok_or_else(|| Error::Config("total_loss needs at least one decoder output".into()))?;
    let (b, c, h, w) = g.value(first).dims4()?;
    if labels.len() != b {
        return Err(Error::Input(format!("{} labels for a batch of {b}", labels.len())));
    }
    let labeled: Vec<usize> = (0..b).filter(|&i| labels[i].is_some()).collect();
    let masks: Vec<&[u8]> = labeled.iter().map(|&i| labels[i].unwrap()).collect();

    let mut seg_terms = Vec::with_capacity(outputs.len());
    let mut seg_sum: Option<Var> = None;
    if !labeled.is_empty() {
        let y = g.constant(label_target(&masks, c, h, w)?);
        for &o in outputs {
            let p = if labeled.len() == b {
                o
            } else {
                g.select_batch(o, labeled.clone())?
            };
            let l = dice_loss(g, p, y)?;
            seg_terms.push(g.value(l).item().as_f64());
            seg_sum = Some(match seg_sum {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
    } else {
        seg_terms = vec![0.0; outputs.len()];
    }

    let mc = match obj.consistency {
        Consistency::None => None,
        _ => Some(consistency_loss(g, outputs, obj)?),
    };
    let l_mc = mc.map(|v| g.value(v).item().as_f64()).unwrap_or(0.0);

    let sup = match seg_sum {
        Some(s) => Some(g.scale(s, obj.weights.lambda)?),
        None => None,
    };
    let cons = match mc {
        Some(m) => Some(g.scale(m, beta)?),
        None => None,
    };
    let total = match (sup, cons) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => g.constant(Tensor::scalar(T::zero())),
    };
    let report = LossReport {
        iteration,
        l_seg_per_decoder: seg_terms,
        l_mc,
        beta_t: beta,
        total: g.value(total).item().as_f64(),
    };
    Ok((total, report))
}

impl fmt::Display for Discrepancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Discrepancy::Mse => "mse",
            Discrepancy::Kl => "kl",
        })
    }
}

impl FromStr for Discrepancy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Discrepancy::Mse),
            "kl" => Ok(Discrepancy::Kl),
            _ => Err(Error::Config(format!("unknown discrepancy '{s}' (mse|kl)"))),
        }
    }
}

impl fmt::Display for PairReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairReduction::Sum => "sum",
            PairReduction::Mean => "mean",
        })
    }
}

impl FromStr for PairReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(PairReduction::Sum),
            "mean" => Ok(PairReduction::Mean),
            _ => Err(Error::Config(format!("unknown pair reduction '{s}' (sum|mean)"))),
        }
    }
}
