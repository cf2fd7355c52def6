use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::evaluate::evaluate_model;
use crate::harness::train::{log_paths, train_with, TrainData};
use crate::synthdata::{Manifest, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Variant,
    NDecoders,
    Temperature,
    Lambda,
    Discrepancy,
}

impl AblationAxis {
    /// Config key the axis overrides.
    pub fn key(self) -> &'static str {
        match self {
            AblationAxis::Variant => "variant",
            AblationAxis::NDecoders => "n_decoders",
            AblationAxis::Temperature => "T",
            AblationAxis::Lambda => "lambda",
            AblationAxis::Discrepancy => "discrepancy",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub variant: String,
    pub n_decoders: usize,
    pub param_count: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub final_uncertainty: Option<f64>,
}

/// Train and test-evaluate one model per value of `axis`, all from the same
/// base config and seed. Checkpoints and logs go to `out_dir`.
pub fn run_ablation(base: &TrainConfig, axis: AblationAxis, values: &[String], out_dir: &Path) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let manifest = Manifest::read(&base.dataset)?;
    let data = TrainData::load(&manifest)?;
    let test = manifest.load_split(Split::Test)?;
    if test.is_empty() {
        return Err(Error::Data("dataset has no test samples".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        cfg.set(axis.key(), value)?;
        cfg.checkpoint = out_dir.join(format!("{}_{}.mcnf", axis, value.replace(['/', ' '], "_")));
        log::info!("ablation {axis} = {value}");
        let outcome = train_with(&cfg, &data)?;
        checkpoint::save(&outcome.model, &cfg.checkpoint)?;
        let (runlog, evallog) = log_paths(&cfg.checkpoint);
        fs::write(&runlog, outcome.log.to_csv()).map_err(|e| Error::io(&runlog, e))?;
        fs::write(&evallog, outcome.log.evals_csv()).map_err(|e| Error::io(&evallog, e))?;
        let report = evaluate_model(&outcome.model, &test, manifest.num_classes, manifest.size)?;
        rows.push(AblationRow {
            value: value.clone(),
            variant: cfg.variant.to_string(),
            n_decoders: cfg.n_decoders,
            param_count: outcome.model.param_count(),
            dice: report.mean_dice,
            jaccard: report.mean_jaccard,
            hd95: report.mean_hd95,
            asd: report.mean_asd,
            final_uncertainty: outcome.log.evals.last().and_then(|e| e.uncertainty),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{axis},variant,n_decoders,params,dice,jaccard,hd95,asd,uncertainty\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.value,
            r.variant,
            r.n_decoders,
            r.param_count,
            r.dice,
            r.jaccard,
            cell(r.hd95),
            cell(r.asd),
            cell(r.final_uncertainty)
        ));
    }
    out
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variant" => Ok(AblationAxis::Variant),
            "n_decoders" => Ok(AblationAxis::NDecoders),
            "T" => Ok(AblationAxis::Temperature),
            "lambda" => Ok(AblationAxis::Lambda),
            "discrepancy" => Ok(AblationAxis::Discrepancy),
            _ => Err(Error::Config(format!(
                "unknown ablation axis '{s}' (variant|n_decoders|T|lambda|discrepancy)"
            ))),
        }
    }
}
