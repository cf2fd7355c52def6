use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::harness::infer::{image_tensor, infer_sliding};
use crate::metrics::{evaluate_labels, MetricsReport};
use crate::segnet::{select_inference_head, Model};
use crate::synthdata::{Manifest, Sample, Split};
use crate::tensor::{Element, Tensor};

/// Per-sample metrics in sample order plus their column means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(String, MetricsReport)>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    /// Means over the samples where the metric is defined.
    pub mean_hd95: Option<f64>,
    pub mean_asd: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn from_rows(rows: Vec<(String, MetricsReport)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        let n = rows.len() as f64;
        Ok(Self {
            mean_dice: rows.iter().map(|(_, r)| r.dice).sum::<f64>() / n,
            mean_jaccard: rows.iter().map(|(_, r)| r.jaccard).sum::<f64>() / n,
            mean_hd95: mean_of(rows.iter().map(|(_, r)| r.hd95)),
            mean_asd: mean_of(rows.iter().map(|(_, r)| r.asd)),
            rows,
        })
    }

    /// `id,dice,jaccard,hd95,asd` rows (undefined values left empty), then a
    /// `mean` row. Multi-class reports append per-class Dice columns.
    pub fn to_csv(&self) -> String {
        let classes: Vec<usize> = match self.rows.first() {
            Some((_, r)) if r.per_class.len() > 1 => r.per_class.iter().map(|c| c.class).collect(),
            _ => Vec::new(),
        };
        let mut out = String::from("id,dice,jaccard,hd95,asd");
        for c in &classes {
            out.push_str(&format!(",dice_{c}"));
        }
        out.push('\n');
        for (id, r) in &self.rows {
            out.push_str(&format!("{id},{},{},{},{}", r.dice, r.jaccard, cell(r.hd95), cell(r.asd)));
            for c in &r.per_class[..classes.len()] {
                out.push_str(&format!(",{}", c.dice));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "mean,{},{},{},{}",
            self.mean_dice,
            self.mean_jaccard,
            cell(self.mean_hd95),
            cell(self.mean_asd)
        ));
        for k in 0..classes.len() {
            let m = self.rows.iter().map(|(_, r)| r.per_class[k].dice).sum::<f64>() / self.rows.len() as f64;
            out.push_str(&format!(",{m}"));
        }
        out.push('\n');
        out
    }
}

/// Hard labels from `[1, C, H, W]` probabilities: threshold 0.5 for a single
/// channel, channel argmax otherwise.
pub fn binarize<T: Element>(prob: &Tensor<T>) -> Result<Vec<u8>> {
    let (_, c, h, w) = prob.dims4()?;
    let hw = h * w;
    let d = prob.data();
    if c == 1 {
        return Ok(d[..hw].iter().map(|v| (v.as_f64() > 0.5) as u8).collect());
    }
    Ok((0..hw)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + i] > d[best * hw + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// Score the inference head on labeled samples. Images are processed with
/// sliding windows of side `patch` and stride `patch / 2`.
pub fn evaluate_model<T: Element>(model: &Model<T>, samples: &[Sample], num_classes: usize, patch: usize) -> Result<EvalReport> {
    let head = select_inference_head(model);
    let rows = samples
        .par_iter()
        .map(|s| {
            let gt = s
                .label
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample '{}' has no label", s.id)))?;
            let prob = infer_sliding(&head, &image_tensor::<T>(s), patch, (patch / 2).max(1))?;
            let pred = binarize(&prob)?;
            Ok((s.id.clone(), evaluate_labels(&pred, gt, s.height, s.width, num_classes)?))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

/// Load a checkpoint and score it on one split of a dataset.
pub fn evaluate(checkpoint_path: &Path, data: &Path, split: Split) -> Result<EvalReport> {
    let model = checkpoint::load(checkpoint_path)?;
    let manifest = Manifest::read(data)?;
    let samples = manifest.load_split(split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split '{split}' is empty")));
    }
    evaluate_model(&model, &samples, manifest.num_classes, manifest.size)
}
