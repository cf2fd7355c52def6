use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mcnet::harness::{self, AblationAxis};
use mcnet::pgm::{quantize16, Pgm};
use mcnet::segnet::select_inference_head;
use mcnet::synthdata::{generate_dataset, Sample, Split};
use mcnet::uncertainty::{uncertainty_map, write_heatmap, Statistic};
use mcnet::{checkpoint, Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "mcnet", version, about = "Mutual consistency semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model; writes the checkpoint and its logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Let gradients flow through the soft pseudo labels.
        #[arg(long)]
        no_detach: bool,
    },
    /// Score a checkpoint on a dataset split and write a metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window prediction of the inference head for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        /// Defaults to half the patch.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Decoder-disagreement heatmap for one image.
    Uncertainty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "variance")]
        statistic: String,
    },
    /// Train and evaluate one model per value of a hyper-parameter.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = Pgm::read(path)?;
    let scale = img.maxval as f64;
    let sample = Sample {
        id: String::new(),
        height: img.height,
        width: img.width,
        image: img.data.iter().map(|&v| v as f64 / scale).collect(),
        label: None,
    };
    Ok(harness::image_tensor(&sample))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = harness::read_gen_config(&config)?;
            let m = generate_dataset(&cfg)?;
            log::info!("wrote {} samples to {}", m.entries.len(), cfg.root.display());
        }
        Command::Train { config, no_detach } => {
            let mut cfg = harness::read_train_config(&config)?;
            if no_detach {
                cfg.detach = false;
            }
            let out = harness::train(&cfg)?;
            log::info!(
                "trained {} iterations in {:.1}s; checkpoint {}",
                cfg.iterations,
                out.log.wall_clock.as_secs_f64(),
                cfg.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let split: Split = split.parse()?;
            let report = harness::evaluate(&checkpoint, &data, split)?;
            write_text(&out, &report.to_csv())?;
            log::info!("mean dice {:.4} over {} samples", report.mean_dice, report.rows.len());
        }
        Command::Infer {
            checkpoint: ckpt,
            image,
            out,
            patch,
            stride,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let x = read_image(&image)?;
            let head = select_inference_head(&model);
            let prob = harness::infer_sliding(&head, &x, patch, stride.unwrap_or((patch / 2).max(1)))?;
            let (_, c, h, w) = prob.dims4()?;
            let pgm = if c == 1 {
                Pgm::new(w, h, 65535, prob.data().iter().map(|&p| quantize16(p as f64)).collect())?
            } else {
                Pgm::new(w, h, 255, harness::binarize(&prob)?.into_iter().map(u16::from).collect())?
            };
            pgm.write(&out)?;
        }
        Command::Uncertainty {
            checkpoint: ckpt,
            image,
            out,
            statistic,
        } => {
            let statistic: Statistic = statistic.parse()?;
            let model = checkpoint::load(&ckpt)?;
            let outputs = model.predict(&read_image(&image)?)?;
            let map = uncertainty_map(&outputs, statistic)?;
            let sidecar = write_heatmap(&map, 0, &out)?;
            log::info!("mean {statistic} {:.6}; range in {}", map.mean(), sidecar.display());
        }
        Command::Ablate {
            config,
            axis,
            values,
            out,
        } => {
            let base = harness::read_train_config(&config)?;
            let axis: AblationAxis = axis.parse()?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ablation".into());
            let runs = out.with_file_name(format!("{stem}_runs"));
            let rows = harness::run_ablation(&base, axis, &values, &runs)?;
            write_text(&out, &harness::ablation_csv(axis, &rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
