//! Single-pass uncertainty maps from the disagreement between decoder outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pgm::Pgm;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Statistic {
    /// Population variance across decoders.
    #[default]
    Variance,
    /// Mean squared difference over ordered decoder pairs.
    MeanPairwiseSq,
    /// Entropy (nats) of the decoder-averaged probabilities.
    EntropyOfMean,
}

/// Per-pixel uncertainty for a batch, stored as `[batch, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub values: Vec<f64>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub statistic: Statistic,
}

impl UncertaintyMap {
    pub fn image(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[b * n..(b + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Pixelwise statistic across `outputs`, each `[B, C, H, W]` probabilities.
/// Multi-channel outputs are averaged over channels, except for the entropy
/// which is taken over the class distribution.
pub fn uncertainty_map<T: Element>(outputs: &[Tensor<T>], statistic: Statistic) -> Result<UncertaintyMap> {
    let n = outputs.len();
    if n < 2 {
        return Err(Error::Config(format!("uncertainty needs at least 2 decoder outputs, got {n}")));
    }
    let (b, c, h, w) = outputs[0].dims4()?;
    if let Some(o) = outputs.iter().find(|o| o.shape() != outputs[0].shape()) {
        return Err(Error::Input(format!(
            "decoder outputs disagree in shape: {:?} vs {:?}",
            o.shape(),
            outputs[0].shape()
        )));
    }
    let hw = h * w;
    let nf = n as f64;
    let mut values = vec![0.0; b * hw];
    let mut column = vec![0.0; n];
    for bi in 0..b {
        for pix in 0..hw {
            let mut acc = 0.0;
            let mut entropy = 0.0;
            for ci in 0..c {
                let at = (bi * c + ci) * hw + pix;
                for (k, o) in outputs.iter().enumerate() {
                    column[k] = o.data()[at].as_f64();
                }
                let mean = column.iter().sum::<f64>() / nf;
                match statistic {
                    Statistic::Variance => {
                        acc += column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                    }
                    Statistic::MeanPairwiseSq => {
                        let mut s = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                if i != j {
                                    s += (column[i] - column[j]).powi(2);
                                }
                            }
                        }
                        acc += s / (nf * (nf - 1.0));
                    }
                    Statistic::EntropyOfMean => {
                        entropy += xlogx(mean);
                        if c == 1 {
                            entropy += xlogx(1.0 - mean);
                        }
                    }
                }
            }
            values[bi * hw + pix] = match statistic {
                Statistic::EntropyOfMean => (-entropy).max(0.0),
                _ => acc / c as f64,
            };
        }
    }
    Ok(UncertaintyMap {
        values,
        batch: b,
        height: h,
        width: w,
        statistic,
    })
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Mean of the map over `mask` (nonzero entries, same layout as the map) or
/// over every pixel.
pub fn summarize_uncertainty(map: &UncertaintyMap, mask: Option<&[u8]>) -> Result<f64> {
    match mask {
        None => {
            if map.values.is_empty() {
                return Err(Error::Input("cannot summarize an empty uncertainty map".into()));
            }
            Ok(map.mean())
        }
        Some(m) => {
            if m.len() != map.values.len() {
                return Err(Error::Input(format!(
                    "mask has {} pixels, map has {}",
                    m.len(),
                    map.values.len()
                )));
            }
            let (sum, count) = map
                .values
                .iter()
                .zip(m)
                .filter(|(_, &k)| k != 0)
                .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
            if count == 0 {
                return Err(Error::Input("uncertainty mask selects no pixels".into()));
            }
            Ok(sum / count as f64)
        }
    }
}

/// Write image `b` of the map as an 8-bit heatmap normalized to its own
/// min/max, plus `<stem>.range.txt` holding the bounds. Returns the sidecar
/// path.
pub fn write_heatmap(map: &UncertaintyMap, b: usize, path: &Path) -> Result<PathBuf> {
    let img = map.image(b);
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = img
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u16 } else { 0 })
        .collect();
    Pgm::new(map.width, map.height, 255, data)?.write(path)?;
    let sidecar = path.with_extension("range.txt");
    fs::write(&sidecar, format!("min={lo} max={hi}\n")).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}

/// Parse a `min=<v> max=<v>` sidecar.
pub fn read_range(path: &Path) -> Result<(f64, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lo = None;
    let mut hi = None;
    for tok in text.split_whitespace() {
        if let Some(v) = tok.strip_prefix("min=") {
            lo = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("max=") {
            hi = v.parse().ok();
        }
    }
    match (lo, hi) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::format(path, 0, "expected 'min=<v> max=<v>'")),
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Statistic::Variance => "variance",
            Statistic::MeanPairwiseSq => "mean_pairwise_sq",
            Statistic::EntropyOfMean => "entropy_of_mean",
        })
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Statistic::Variance),
            "mean_pairwise_sq" => Ok(Statistic::MeanPairwiseSq),
            "entropy_of_mean" => Ok(Statistic::EntropyOfMean),
            _ => Err(Error::Config(format!(
                "unknown statistic '{s}' (variance|mean_pairwise_sq|entropy_of_mean)"
            ))),
        }
    }
}
