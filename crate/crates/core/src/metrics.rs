//! Overlap (Dice, Jaccard) and surface-distance (95% Hausdorff, average
//! surface distance) metrics on 2-d masks. Distances are Euclidean between
//! pixel centres.

use crate::error::{Error, Result};

/// Binary mask in row-major order; any nonzero byte is foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Input(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either surface is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Metrics for one prediction. For multi-class inputs the headline values
/// are means over foreground classes (surface values over the classes where
/// they are defined) and `per_class` lists each class.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

pub fn overlap_metrics(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    pred.check_same(gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0, g != 0);
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(Overlap {
            dice: 1.0,
            jaccard: 1.0,
        });
    }
    Ok(Overlap {
        dice: 2.0 * inter as f64 / (a + b) as f64,
        jaccard: inter as f64 / (a + b - inter) as f64,
    })
}

/// Foreground pixels with at least one background 4-neighbour, in raster
/// order. Pixels outside the frame count as background.
pub fn surface_points(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Squared Euclidean distance from every pixel to the nearest of `sites`
/// (exact, separable lower-envelope transform).
pub fn squared_distance_transform(height: usize, width: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    const INF: i64 = i64::MAX / 4;
    // Column pass: squared vertical distance to the nearest site in the column.
    let mut col = vec![INF; height * width];
    let mut is_site = vec![false; height * width];
    for &(r, c) in sites {
        is_site[r * width + c] = true;
    }
    for c in 0..width {
        let mut last: Option<usize> = None;
        for r in 0..height {
            if is_site[r * width + c] {
                last = Some(r);
            }
            if let Some(l) = last {
                col[r * width + c] = ((r - l) as i64).pow(2);
            }
        }
        last = None;
        for r in (0..height).rev() {
            if is_site[r * width + c] {
                last = Some(r);
            }
            if let Some(l) = last {
                let d = ((l - r) as i64).pow(2);
                if d < col[r * width + c] {
                    col[r * width + c] = d;
                }
            }
        }
    }
    // Row pass: lower envelope of parabolas rooted at the finite columns.
    let mut out = vec![f64::INFINITY; height * width];
    let mut v = vec![0usize; width];
    let mut z = vec![0f64; width + 1];
    for r in 0..height {
        let f = &col[r * width..(r + 1) * width];
        let mut k: isize = -1;
        for q in 0..width {
            if f[q] >= INF {
                continue;
            }
            let fq = f[q] as f64 + (q * q) as f64;
            let mut s = f64::NEG_INFINITY;
            while k >= 0 {
                let p = v[k as usize];
                let fp = f[p] as f64 + (p * p) as f64;
                s = (fq - fp) / (2.0 * (q as f64 - p as f64));
                if s <= z[k as usize] {
                    k -= 1;
                } else {
                    break;
                }
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = if k == 0 { f64::NEG_INFINITY } else { s };
            z[k as usize + 1] = f64::INFINITY;
        }
        if k < 0 {
            continue;
        }
        let mut j = 0usize;
        for q in 0..width {
            while z[j + 1] < q as f64 {
                j += 1;
            }
            let p = v[j];
            let dx = q as i64 - p as i64;
            out[r * width + q] = (dx * dx + f[p]) as f64;
        }
    }
    out
}

/// Linear-interpolation percentile of sorted values, `p` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Directed distances from each point of `from` to the nearest point of `to`.
fn directed(from: &[(usize, usize)], to: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let dt = squared_distance_transform(h, w, to);
    from.iter().map(|&(r, c)| dt[r * w + c].sqrt()).collect()
}

/// Combine the two directed distance lists into 95HD and ASD.
pub fn summarize_distances(pred_to_gt: &[f64], gt_to_pred: &[f64]) -> SurfaceDistances {
    let total: f64 = pred_to_gt.iter().chain(gt_to_pred).sum();
    let asd = total / (pred_to_gt.len() + gt_to_pred.len()) as f64;
    let p95 = |d: &[f64]| {
        let mut s = d.to_vec();
        s.sort_by(f64::total_cmp);
        percentile_sorted(&s, 0.95)
    };
    SurfaceDistances {
        hd95: p95(pred_to_gt).max(p95(gt_to_pred)),
        asd,
    }
}

pub fn surface_distances(pred: &Mask, gt: &Mask) -> Result<SurfaceDistances> {
    pred.check_same(gt)?;
    let sp = surface_points(pred);
    let sg = surface_points(gt);
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "surface distance needs two nonempty masks (prediction {} px, ground truth {} px)",
            sp.len(),
            sg.len()
        )));
    }
    let (h, w) = (pred.height, pred.width);
    Ok(summarize_distances(&directed(&sp, &sg, h, w), &directed(&sg, &sp, h, w)))
}

fn class_metrics(class: usize, pred: &Mask, gt: &Mask) -> Result<ClassMetrics> {
    let o = overlap_metrics(pred, gt)?;
    let s = match surface_distances(pred, gt) {
        Ok(s) => Some(s),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ClassMetrics {
        class,
        dice: o.dice,
        jaccard: o.jaccard,
        hd95: s.map(|s| s.hd95),
        asd: s.map(|s| s.asd),
    })
}

/// Metrics between two label maps with `num_classes` classes (class 0 is
/// background and is not scored).
pub fn evaluate_labels(pred: &[u8], gt: &[u8], height: usize, width: usize, num_classes: usize) -> Result<MetricsReport> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::Input("label maps do not match the stated size".into()));
    }
    let classes = num_classes.max(2);
    let mut per_class = Vec::with_capacity(classes - 1);
    for k in 1..classes {
        let p = Mask::new(height, width, pred.iter().map(|&v| (v as usize == k) as u8).collect())?;
        let g = Mask::new(height, width, gt.iter().map(|&v| (v as usize == k) as u8).collect())?;
        per_class.push(class_metrics(k, &p, &g)?);
    }
    let n = per_class.len() as f64;
    let mean_defined = |f: fn(&ClassMetrics) -> Option<f64>| {
        let vals: Vec<f64> = per_class.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(MetricsReport {
        dice: per_class.iter().map(|c| c.dice).sum::<f64>() / n,
        jaccard: per_class.iter().map(|c| c.jaccard).sum::<f64>() / n,
        hd95: mean_defined(|c| c.hd95),
        asd: mean_defined(|c| c.asd),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, r0: usize, c0: usize, side: usize) -> Mask {
        Mask::from_fn(h, h, |r, c| r >= r0 && r < r0 + side && c >= c0 && c < c0 + side)
    }

    #[test]
    fn overlap_examples() {
        let a = square(16, 2, 2, 8);
        assert_eq!(overlap_metrics(&a, &a).unwrap(), Overlap { dice: 1.0, jaccard: 1.0 });
        let far = square(16, 12, 12, 3);
        assert_eq!(overlap_metrics(&a, &far).unwrap(), Overlap { dice: 0.0, jaccard: 0.0 });
        let shifted = square(16, 2, 6, 8);
        let o = overlap_metrics(&a, &shifted).unwrap();
        assert_eq!(o.dice, 0.5);
        assert_eq!(o.jaccard, 1.0 / 3.0);
        let empty = Mask::from_fn(4, 4, |_, _| false);
        assert_eq!(overlap_metrics(&empty, &empty).unwrap().dice, 1.0);
    }

    #[test]
    fn surface_examples() {
        let single = Mask::from_fn(5, 5, |r, c| (r, c) == (2, 3));
        assert_eq!(surface_points(&single), vec![(2, 3)]);
        assert_eq!(surface_points(&square(8, 2, 2, 4)).len(), 12);
        let full = Mask::from_fn(6, 6, |_, _| true);
        assert_eq!(surface_points(&full).len(), 20);
        assert!(surface_points(&Mask::from_fn(3, 3, |_, _| false)).is_empty());
    }

    #[test]
    fn offset_pixels() {
        let a = Mask::from_fn(10, 10, |r, c| (r, c) == (1, 1));
        let b = Mask::from_fn(10, 10, |r, c| (r, c) == (4, 5));
        let d = surface_distances(&a, &b).unwrap();
        assert_eq!((d.hd95, d.asd), (5.0, 5.0));
        assert_eq!(surface_distances(&a, &a).unwrap(), SurfaceDistances { hd95: 0.0, asd: 0.0 });
    }

    #[test]
    fn empty_surface_is_undefined() {
        let a = square(8, 1, 1, 3);
        let e = Mask::from_fn(8, 8, |_, _| false);
        assert!(matches!(surface_distances(&a, &e), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn distance_transform_of_corner_site() {
        let dt = squared_distance_transform(3, 4, &[(0, 0)]);
        assert_eq!(dt, vec![0.0, 1.0, 4.0, 9.0, 1.0, 2.0, 5.0, 10.0, 4.0, 5.0, 8.0, 13.0]);
    }

    #[test]
    fn percentile_interpolates() {
        let s: Vec<f64> = (0..21).map(|i| i as f64).collect();
        assert_eq!(percentile_sorted(&s, 0.95), 19.0);
        assert!((percentile_sorted(&[0.0, 10.0], 0.95) - 9.5).abs() < 1e-12);
    }

    #[test]
    fn multi_class_report() {
        let gt = vec![0, 1, 1, 2, 0, 1, 1, 2, 0, 0, 2, 2];
        let r = evaluate_labels(&gt, &gt, 3, 4, 3).unwrap();
        assert_eq!(r.per_class.len(), 2);
        assert_eq!((r.dice, r.jaccard, r.hd95, r.asd), (1.0, 1.0, Some(0.0), Some(0.0)));
        let pred = vec![0u8; 12];
        let r = evaluate_labels(&pred, &gt, 3, 4, 3).unwrap();
        assert_eq!(r.dice, 0.0);
        assert_eq!(r.hd95, None);
    }
}
