//! Synthetic 2-d segmentation data: smooth blobs with thin curved branches,
//! a low-frequency intensity bias and Gaussian noise. Also augmentation,
//! semi-supervised batch sampling and the on-disk dataset format.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg32;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pgm::{dequantize16, quantize16, Pgm};

pub const MANIFEST: &str = "manifest.txt";
/// Every generated dataset is binary (background and one foreground class).
pub const NUM_CLASSES: usize = 2;
/// Accepted range of the foreground fraction of a generated label.
pub const FG_FRACTION: (f64, f64) = (0.02, 0.5);
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Extra validation images at `large_size` for sliding-window inference.
    pub large_count: usize,
    pub size: usize,
    pub large_size: usize,
    pub branch_count_min: usize,
    pub branch_count_max: usize,
    pub branch_width_min: usize,
    pub branch_width_max: usize,
    pub noise_sigma: f64,
    pub inhomogeneity: f64,
    pub labeled_fraction: f64,
    pub root: PathBuf,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 200,
            val_count: 20,
            test_count: 50,
            large_count: 0,
            size: 64,
            large_size: 128,
            branch_count_min: 1,
            branch_count_max: 4,
            branch_width_min: 1,
            branch_width_max: 3,
            noise_sigma: 0.25,
            inhomogeneity: 0.2,
            labeled_fraction: 0.1,
            root: PathBuf::from("data"),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.branch_count_min > self.branch_count_max {
            return bad("branch_count_min exceeds branch_count_max");
        }
        if self.branch_width_min < 1 || self.branch_width_min > self.branch_width_max {
            return bad("branch width range must be nonempty and start at >= 1");
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad("labeled_fraction must be in (0, 1]");
        }
        if self.size < 16 || self.large_size < 16 {
            return bad("image size must be at least 16");
        }
        if self.train_count == 0 {
            return bad("train_count must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.inhomogeneity >= 0.0) {
            return bad("noise_sigma and inhomogeneity must be non-negative");
        }
        Ok(())
    }

    /// Number of labeled training samples.
    pub fn labeled_count(&self) -> usize {
        ((self.labeled_fraction * self.train_count as f64).round() as usize).clamp(1, self.train_count)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    /// Row-major class indices; `None` for unlabeled samples.
    pub label: Option<Vec<u8>>,
}

impl Sample {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub entries: Vec<(String, Split)>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn write(&self) -> Result<()> {
        let mut text = format!("size={}\nclasses={}\nseed={}\n", self.size, self.num_classes, self.seed);
        for (id, split) in &self.entries {
            text.push_str(&format!("{id} {split}\n"));
        }
        let path = self.root.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n');
        let mut header = |key: &str| -> Result<u64> {
            let line = lines.next().unwrap_or("");
            let at = offset;
            offset += line.len();
            line.trim_end()
                .strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::format(&path, at, format!("expected '{key}=<integer>'")))
        };
        let size = header("size")? as usize;
        let num_classes = header("classes")? as usize;
        let seed = header("seed")?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for line in lines {
            let at = offset;
            offset += line.len();
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(&path, at, "expected '<id> <split>'"));
            };
            let split: Split = split.parse().map_err(|_| Error::format(&path, at, format!("unknown split '{split}'")))?;
            if !seen.insert(id.to_string()) {
                return Err(Error::format(&path, at, format!("duplicate id '{id}'")));
            }
            entries.push((id.to_string(), split));
        }
        if num_classes < 2 || num_classes > 256 {
            return Err(Error::format(&path, 0, format!("classes={num_classes} not in 2..=256")));
        }
        Ok(Self {
            root: root.to_path_buf(),
            size,
            num_classes,
            seed,
            entries,
        })
    }

    pub fn load(&self, id: &str) -> Result<Sample> {
        read_sample(&self.root, id, self.num_classes)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.ids(split).into_iter().map(|id| self.load(id)).collect()
    }
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join(format!("{id}.img.pgm"))
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join(format!("{id}.lbl.pgm"))
}

pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    let img = Pgm::new(
        sample.width,
        sample.height,
        65535,
        sample.image.iter().map(|&v| quantize16(v)).collect(),
    )?;
    img.write(&image_path(root, &sample.id))?;
    if let Some(label) = &sample.label {
        let lbl = Pgm::new(sample.width, sample.height, 255, label.iter().map(|&v| v as u16).collect())?;
        lbl.write(&label_path(root, &sample.id))?;
    }
    Ok(())
}

/// Read `<id>.img.pgm` and, when present, `<id>.lbl.pgm`.
pub fn read_sample(root: &Path, id: &str, num_classes: usize) -> Result<Sample> {
    let ip = image_path(root, id);
    let img = Pgm::read(&ip)?;
    let lp = label_path(root, id);
    let label = if lp.exists() {
        let bytes = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
        let lbl = Pgm::decode(&bytes, &lp)?;
        let body = bytes.len() - lbl.data.len() * if lbl.maxval < 256 { 1 } else { 2 };
        if (lbl.width, lbl.height) != (img.width, img.height) {
            return Err(Error::format(
                &lp,
                0,
                format!(
                    "label is {}x{} but image is {}x{}",
                    lbl.width, lbl.height, img.width, img.height
                ),
            ));
        }
        if lbl.maxval > 255 {
            return Err(Error::format(&lp, 0, "label maxval must be at most 255"));
        }
        if let Some(i) = lbl.data.iter().position(|&v| v as usize >= num_classes) {
            return Err(Error::format(
                &lp,
                body + i,
                format!("label value {} with only {num_classes} classes", lbl.data[i]),
            ));
        }
        Some(lbl.data.iter().map(|&v| v as u8).collect())
    } else {
        None
    };
    let scale = img.maxval as f64;
    let image = if img.maxval == 65535 {
        img.data.iter().map(|&v| dequantize16(v)).collect()
    } else {
        img.data.iter().map(|&v| v as f64 / scale).collect()
    };
    Ok(Sample {
        id: id.to_string(),
        height: img.height,
        width: img.width,
        image,
        label,
    })
}

/// Per-sample generator: state and stream both derived from the dataset seed
/// and the global sample index.
pub fn sample_rng(seed: u64, index: u64) -> Pcg32 {
    Pcg32::new(splitmix64(seed ^ splitmix64(index)), index)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One image/label pair of side `size`, drawn from `rng`.
pub fn generate_pair(cfg: &GenConfig, size: usize, rng: &mut Pcg32) -> Result<(Vec<f64>, Vec<u8>)> {
    let n = size * size;
    for _ in 0..MAX_ATTEMPTS {
        let label = draw_shape(cfg, size, rng);
        let fg = label.iter().filter(|&&v| v != 0).count() as f64 / n as f64;
        if fg < FG_FRACTION.0 || fg > FG_FRACTION.1 {
            continue;
        }
        let image = render(cfg, size, &label, rng);
        return Ok((image, label));
    }
    Err(Error::Data(format!(
        "no shape with foreground fraction in {FG_FRACTION:?} after {MAX_ATTEMPTS} attempts"
    )))
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    rot: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let wobble: f64 = self.harmonics.iter().map(|&(k, amp, ph)| amp * (k * phi + ph).cos()).sum();
        rho < 1.0 + wobble
    }
}

fn draw_shape(cfg: &GenConfig, size: usize, rng: &mut Pcg32) -> Vec<u8> {
    let s = size as f64;
    let cx = rng.random_range(0.35 * s..0.65 * s);
    let cy = rng.random_range(0.35 * s..0.65 * s);
    let parts = rng.random_range(1..=3usize);
    let mut ellipses = Vec::with_capacity(parts);
    for k in 0..parts {
        let scale = if k == 0 { 1.0 } else { 0.7 };
        let (ox, oy) = if k == 0 {
            (0.0, 0.0)
        } else {
            (rng.random_range(-0.12 * s..0.12 * s), rng.random_range(-0.12 * s..0.12 * s))
        };
        let harmonics = (2..=5)
            .map(|h| (h as f64, rng.random_range(0.0..0.06), rng.random_range(0.0..2.0 * PI)))
            .collect();
        ellipses.push(Ellipse {
            cx: cx + ox,
            cy: cy + oy,
            a: scale * rng.random_range(0.1 * s..0.2 * s),
            b: scale * rng.random_range(0.08 * s..0.16 * s),
            rot: rng.random_range(0.0..PI),
            harmonics,
        });
    }
    let inside = |x: f64, y: f64| ellipses.iter().any(|e| e.contains(x, y));
    let mut mask = vec![0u8; size * size];
    for r in 0..size {
        for c in 0..size {
            if inside(c as f64, r as f64) {
                mask[r * size + c] = 1;
            }
        }
    }

    let branches = rng.random_range(cfg.branch_count_min..=cfg.branch_count_max);
    for _ in 0..branches {
        let width = rng.random_range(cfg.branch_width_min..=cfg.branch_width_max) as f64;
        let mut heading = rng.random_range(0.0..2.0 * PI);
        // March from the blob centre to its boundary along the heading.
        let (mut x, mut y) = (cx, cy);
        while inside(x, y) && x >= 0.0 && y >= 0.0 && x < s && y < s {
            x += 0.5 * heading.cos();
            y += 0.5 * heading.sin();
        }
        x -= heading.cos();
        y -= heading.sin();
        let length = rng.random_range(0.2 * s..0.4 * s);
        let curvature = rng.random_range(-0.08..0.08);
        let step = 0.25;
        let mut travelled = 0.0;
        while travelled < length {
            stamp(&mut mask, size, x, y, width / 2.0);
            heading += curvature * step;
            x += step * heading.cos();
            y += step * heading.sin();
            travelled += step;
            if x < -2.0 || y < -2.0 || x > s + 1.0 || y > s + 1.0 {
                break;
            }
        }
    }
    mask
}

/// Mark pixels whose centre lies within `radius` of `(x, y)`; a small slack
/// keeps width-1 strokes connected.
fn stamp(mask: &mut [u8], size: usize, x: f64, y: f64, radius: f64) {
    let rr = radius + 0.05;
    let lo_r = (y - rr).floor().max(0.0) as usize;
    let hi_r = ((y + rr).ceil() as isize).min(size as isize - 1);
    let lo_c = (x - rr).floor().max(0.0) as usize;
    let hi_c = ((x + rr).ceil() as isize).min(size as isize - 1);
    if hi_r < 0 || hi_c < 0 {
        return;
    }
    for r in lo_r..=hi_r as usize {
        for c in lo_c..=hi_c as usize {
            let (dx, dy) = (c as f64 - x, r as f64 - y);
            if dx * dx + dy * dy <= rr * rr {
                mask[r * size + c] = 1;
            }
        }
    }
}

fn render(cfg: &GenConfig, size: usize, label: &[u8], rng: &mut Pcg32) -> Vec<f64> {
    let s = size as f64;
    let gx = rng.random_range(-1.0..1.0);
    let gy = rng.random_range(-1.0..1.0);
    let fx = rng.random_range(0.5..1.5) * 2.0 * PI / s;
    let fy = rng.random_range(0.5..1.5) * 2.0 * PI / s;
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = cfg.inhomogeneity;
    let mut image = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 / s - 0.5, r as f64 / s - 0.5);
            let bias = amp * (0.5 * (gx * x + gy * y) + 0.5 * (fx * c as f64 + fy * r as f64 + phase).sin());
            let base = if label[r * size + c] != 0 { 0.65 } else { 0.35 };
            let z: f64 = StandardNormal.sample(rng);
            image.push((base + bias + cfg.noise_sigma * z).clamp(0.0, 1.0));
        }
    }
    image
}

/// Generate every split, write the files and the manifest under `cfg.root`.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Manifest> {
    cfg.validate()?;
    let root = &cfg.root;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let n_labeled = cfg.labeled_count();
    let mut plan: Vec<(String, Split, usize)> = Vec::new();
    for i in 0..cfg.train_count {
        let split = if i < n_labeled { Split::Labeled } else { Split::Unlabeled };
        plan.push((format!("train_{i:04}"), split, cfg.size));
    }
    for i in 0..cfg.val_count {
        plan.push((format!("val_{i:04}"), Split::Val, cfg.size));
    }
    for i in 0..cfg.test_count {
        plan.push((format!("test_{i:04}"), Split::Test, cfg.size));
    }
    for i in 0..cfg.large_count {
        plan.push((format!("large_{i:04}"), Split::Val, cfg.large_size));
    }
    plan.par_iter().enumerate().try_for_each(|(index, (id, split, size))| {
        let mut rng = sample_rng(cfg.seed, index as u64);
        let (image, label) = generate_pair(cfg, *size, &mut rng)?;
        let sample = Sample {
            id: id.clone(),
            height: *size,
            width: *size,
            image,
            label: (*split != Split::Unlabeled).then_some(label),
        };
        write_sample(root, &sample)
    })?;
    let manifest = Manifest {
        root: root.clone(),
        size: cfg.size,
        num_classes: NUM_CLASSES,
        seed: cfg.seed,
        entries: plan.into_iter().map(|(id, split, _)| (id, split)).collect(),
    };
    manifest.write()?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugOp {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl AugOp {
    pub const ALL: [AugOp; 6] = [
        AugOp::Identity,
        AugOp::Rot90,
        AugOp::Rot180,
        AugOp::Rot270,
        AugOp::FlipH,
        AugOp::FlipV,
    ];

    /// Source pixel for output pixel `(r, c)` of an `n x n` image.
    fn source(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            AugOp::Identity => (r, c),
            AugOp::Rot90 => (c, m - r),
            AugOp::Rot180 => (m - r, m - c),
            AugOp::Rot270 => (m - c, r),
            AugOp::FlipH => (r, m - c),
            AugOp::FlipV => (m - r, c),
        }
    }

    pub fn apply<V: Copy>(self, data: &[V], n: usize) -> Vec<V> {
        (0..n * n)
            .map(|i| {
                let (r, c) = self.source(i / n, i % n, n);
                data[r * n + c]
            })
            .collect()
    }
}

/// Apply one transform, chosen uniformly, to image and label alike.
pub fn augment(sample: &Sample, rng: &mut Pcg32) -> Result<Sample> {
    let op = AugOp::ALL[rng.random_range(0..AugOp::ALL.len())];
    augment_with(sample, op)
}

pub fn augment_with(sample: &Sample, op: AugOp) -> Result<Sample> {
    if sample.height != sample.width {
        return Err(Error::Input(format!(
            "augmentation needs square images, got {}x{}",
            sample.height, sample.width
        )));
    }
    let n = sample.height;
    Ok(Sample {
        id: sample.id.clone(),
        height: n,
        width: n,
        image: op.apply(&sample.image, n),
        label: sample.label.as_ref().map(|l| op.apply(l, n)),
    })
}

/// Indices into the labeled and unlabeled pools for one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

struct Pool {
    order: Vec<usize>,
    next: usize,
}

impl Pool {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            next: n,
        }
    }

    fn draw(&mut self, rng: &mut Pcg32) -> usize {
        if self.next == self.order.len() {
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

/// Draws half-labeled, half-unlabeled batches without replacement within an
/// epoch of each pool. With no unlabeled pool every slot is labeled.
pub struct BatchSampler {
    labeled: Pool,
    unlabeled: Pool,
    rng: Pcg32,
    warned: bool,
}

impl BatchSampler {
    pub fn new(n_labeled: usize, n_unlabeled: usize, rng: Pcg32) -> Result<Self> {
        if n_labeled == 0 {
            return Err(Error::Data("labeled pool is empty".into()));
        }
        Ok(Self {
            labeled: Pool::new(n_labeled),
            unlabeled: Pool::new(n_unlabeled),
            rng,
            warned: false,
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.unlabeled.order.is_empty() {
            if !self.warned {
                log::warn!("unlabeled pool is empty; using all-labeled batches");
                self.warned = true;
            }
            let labeled = (0..batch_size).map(|_| self.labeled.draw(&mut self.rng)).collect();
            return Ok(Batch {
                labeled,
                unlabeled: Vec::new(),
            });
        }
        if batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch_size must be even, got {batch_size}")));
        }
        let half = batch_size / 2;
        let labeled = (0..half).map(|_| self.labeled.draw(&mut self.rng)).collect();
        let unlabeled = (0..half).map(|_| self.unlabeled.draw(&mut self.rng)).collect();
        Ok(Batch { labeled, unlabeled })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}' (labeled|unlabeled|val|test)"))),
        }
    }
}
