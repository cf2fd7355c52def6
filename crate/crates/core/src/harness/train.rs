use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand_pcg::Pcg32;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::harness::config::{TrainConfig, Variant};
use crate::harness::evaluate::{binarize, EvalReport};
use crate::metrics::evaluate_labels;
use crate::objective::{rampup_weight, total_loss, LossReport};
use crate::segnet::{Mode, Model, ParamStore};
use crate::synthdata::{augment, BatchSampler, Manifest, Sample, Split};
use crate::tensor::{Element, Tensor};
use crate::uncertainty::{uncertainty_map, Statistic};

const BATCH_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

/// `theta <- theta - lr * (g + weight_decay * theta)` for every trainable
/// parameter that received a gradient. Nothing is updated if any gradient is
/// non-finite.
pub fn sgd_step<T: Element>(params: &mut ParamStore<T>, grads: &[Option<&Tensor<T>>], lr: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Usage(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (e, g) in params.entries().iter().zip(grads) {
        if let (true, Some(g)) = (e.trainable, g) {
            if g.shape() != e.value.shape() {
                return Err(Error::Usage(format!("gradient shape mismatch for '{}'", e.name)));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter '{}'", e.name)));
            }
        }
    }
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !params.entries()[i].trainable {
            continue;
        }
        for (t, &d) in params.get_mut(i).data_mut().iter_mut().zip(g.data()) {
            let th = t.as_f64();
            *t = T::of(th - lr * (d.as_f64() + weight_decay * th));
        }
    }
    Ok(())
}

/// Validation scores of the inference head and the mean decoder
/// disagreement at one point of training.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub iteration: u64,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Mean per-pixel variance across decoders (`None` with one decoder).
    pub uncertainty: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunLog {
    pub n_decoders: usize,
    pub rows: Vec<LossReport>,
    pub evals: Vec<EvalRow>,
    pub wall_clock: Duration,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter");
        for i in 1..=self.n_decoders {
            out.push_str(&format!(",l_seg_{i}"));
        }
        out.push_str(",l_mc,beta,total\n");
        for r in &self.rows {
            out.push_str(&r.iteration.to_string());
            for l in &r.l_seg_per_decoder {
                out.push_str(&format!(",{l}"));
            }
            out.push_str(&format!(",{},{},{}\n", r.l_mc, r.beta_t, r.total));
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from("iter,dice,jaccard,hd95,asd,uncertainty\n");
        for e in &self.evals {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.iteration,
                e.dice,
                e.jaccard,
                cell(e.hd95),
                cell(e.asd),
                cell(e.uncertainty)
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: RunLog,
}

/// Samples needed for training, loaded once.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    /// Validation samples at the dataset's native size.
    pub val: Vec<Sample>,
    pub num_classes: usize,
    pub size: usize,
}

impl TrainData {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let labeled = manifest.load_split(Split::Labeled)?;
        if labeled.is_empty() {
            return Err(Error::Data("dataset has no labeled samples".into()));
        }
        let val = manifest
            .load_split(Split::Val)?
            .into_iter()
            .filter(|s| s.height == manifest.size && s.width == manifest.size)
            .collect();
        Ok(Self {
            labeled,
            unlabeled: manifest.load_split(Split::Unlabeled)?,
            val,
            num_classes: manifest.num_classes,
            size: manifest.size,
        })
    }
}

fn stack_images(samples: &[Sample]) -> Result<Tensor<f32>> {
    let (h, w) = (samples[0].height, samples[0].width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Data(format!("sample '{}' differs in size from the batch", s.id)));
        }
        data.extend(s.image.iter().map(|&v| v as f32));
    }
    Tensor::new(&[samples.len(), 1, h, w], data)
}

fn eval_point(model: &Model<f32>, val: &[Sample], num_classes: usize, iteration: u64) -> Result<Option<EvalRow>> {
    if val.is_empty() {
        return Ok(None);
    }
    let x = stack_images(val)?;
    let outs = model.predict(&x)?;
    let mut rows = Vec::with_capacity(val.len());
    for (b, s) in val.iter().enumerate() {
        let Some(gt) = &s.label else { continue };
        let pred = binarize(&outs[0].batch_item(b))?;
        rows.push((s.id.clone(), evaluate_labels(&pred, gt, s.height, s.width, num_classes)?));
    }
    let report = EvalReport::from_rows(rows)?;
    let uncertainty = if outs.len() >= 2 {
        Some(uncertainty_map(&outs, Statistic::Variance)?.mean())
    } else {
        None
    };
    Ok(Some(EvalRow {
        iteration,
        dice: report.mean_dice,
        jaccard: report.mean_jaccard,
        hd95: report.mean_hd95,
        asd: report.mean_asd,
        uncertainty,
    }))
}

/// Train on preloaded data. Deterministic for a given config and data.
pub fn train_with(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let objective = cfg.objective()?;
    let mut model = Model::<f32>::build(cfg.model_config(data.num_classes)?, cfg.seed)?;
    let unlabeled_pool = if cfg.variant == Variant::Supervised {
        0
    } else {
        data.unlabeled.len()
    };
    let mut sampler = BatchSampler::new(data.labeled.len(), unlabeled_pool, Pcg32::new(cfg.seed, BATCH_STREAM))?;
    let mut aug_rng = Pcg32::new(cfg.seed, AUGMENT_STREAM);
    let decoders: Vec<usize> = (0..cfg.n_decoders).collect();

    let mut log = RunLog {
        n_decoders: cfg.n_decoders,
        rows: Vec::with_capacity(cfg.iterations as usize),
        evals: Vec::new(),
        wall_clock: Duration::ZERO,
    };
    log.evals.extend(eval_point(&model, &data.val, data.num_classes, 0)?);

    for iter in 1..=cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size)?;
        let mut samples = Vec::with_capacity(cfg.batch_size);
        for (&i, pool) in batch
            .labeled
            .iter()
            .map(|i| (i, &data.labeled))
            .chain(batch.unlabeled.iter().map(|i| (i, &data.unlabeled)))
        {
            samples.push(if cfg.augment {
                augment(&pool[i], &mut aug_rng)?
            } else {
                pool[i].clone()
            });
        }
        let labels: Vec<Option<&[u8]>> = samples.iter().map(|s| s.label.as_deref()).collect();

        let mut g = Graph::new();
        let x = g.constant(stack_images(&samples)?);
        let pass = model.forward_graph(&mut g, x, &decoders, Mode::Train)?;
        let beta = rampup_weight(iter, &objective.weights);
        let (loss, report) = total_loss(&mut g, &pass.outputs, &labels, beta, &objective, iter)?;
        if !report.total.is_finite() {
            return Err(Error::Numerical(format!("loss became {} at iteration {iter}", report.total)));
        }
        g.backward(loss)?;
        let grads: Vec<Option<&Tensor<f32>>> = pass.bound.iter().map(|b| b.and_then(|v| g.grad(v))).collect();
        let lr = cfg.lr_schedule.rate(cfg.lr, iter, cfg.iterations);
        sgd_step(model.params_mut(), &grads, lr, cfg.weight_decay)?;
        model.commit_norm_stats(&pass);

        if iter % 100 == 0 {
            log::info!(
                "iter {iter}/{}: total {:.4} l_mc {:.4} beta {:.4}",
                cfg.iterations,
                report.total,
                report.l_mc,
                report.beta_t
            );
        }
        log.rows.push(report);
        if iter == cfg.iterations || (cfg.eval_every > 0 && iter % cfg.eval_every == 0) {
            if let Some(row) = eval_point(&model, &data.val, data.num_classes, iter)? {
                log::info!("eval at {iter}: dice {:.4} uncertainty {:?}", row.dice, row.uncertainty);
                log.evals.push(row);
            }
        }
    }
    log.wall_clock = start.elapsed();
    Ok(TrainOutcome { model, log })
}

/// Paths of the run log and evaluation log written next to a checkpoint.
pub fn log_paths(checkpoint: &Path) -> (PathBuf, PathBuf) {
    (checkpoint.with_extension("runlog.csv"), checkpoint.with_extension("eval.csv"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load the dataset named in `cfg`, train, and write the checkpoint plus its
/// run and evaluation logs.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::read(&cfg.dataset)?;
    let data = TrainData::load(&manifest)?;
    let outcome = train_with(cfg, &data)?;
    checkpoint::save(&outcome.model, &cfg.checkpoint)?;
    let (runlog, evallog) = log_paths(&cfg.checkpoint);
    write(&runlog, &outcome.log.to_csv())?;
    write(&evallog, &outcome.log.evals_csv())?;
    Ok(outcome)
}
