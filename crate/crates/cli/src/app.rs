//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use spx_core::assoc::{colorize_labels, overlay_boundaries, Palette};
use spx_core::autodiff::Tensor;
use spx_core::model::{Model, ModelConfig};
use spx_core::pipeline::{self, generate_shapes_dataset, Checkpoint, Dataset, RunOutput, Trainer};
use spx_core::pnm::{GrayImage, RgbImage};
use spx_core::{ssn, Error};

use crate::bench::benchmark;
use crate::config::RunConfig;
use crate::cost::flops_count;

#[derive(Parser, Debug)]
#[command(name = "spx", version, about = "Superpixel-transformer segmentation at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Run configuration file (`key=value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation (default: `SPX_THREADS`, else 1).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a dataset directory or on freshly generated shapes.
    Train {
        /// Training set directory (default: generated from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation set directory.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (mIoU).
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (default: the generated validation split).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict label maps for one image or a dataset directory.
    Infer(InferArgs),
    /// Like `infer` on one image, plus the superpixel boundary overlay.
    Visualize(InferArgs),
    /// Run differentiable SLIC on an image and draw its superpixels.
    Ssn {
        /// Input image (binary PPM).
        #[arg(long)]
        image: PathBuf,
        /// Also write PNG copies.
        #[arg(long)]
        png: bool,
    },
    /// Analytic parameter and FLOP counts per component.
    Flops,
    /// Median per-component latency.
    Bench {
        /// Timed runs per component; the median is reported.
        #[arg(long, default_value_t = 9)]
        repeats: usize,
        /// Benchmark these weights instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic shapes dataset.
    GenData {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (binary PPM).
    #[arg(long, conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// Dataset directory; predictions are scored against its labels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Class palette file (`class_id R G B` lines).
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Also write PNG copies.
    #[arg(long)]
    pub png: bool,
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        _ => 1,
    }
}

pub fn eval_threads(global: &GlobalArgs) -> usize {
    global.threads.or_else(|| std::env::var("SPX_THREADS").ok().and_then(|v| v.parse().ok())).unwrap_or(1).max(1)
}

/// Defaults, then `--config`, then `--set` overrides, then `--seed`.
pub fn load_config(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for s in &global.set {
        cfg.apply_assignment(s)?;
    }
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs) -> anyhow::Result<PathBuf> {
    let dir = global.out.clone().unwrap_or_else(|| PathBuf::from("spx-out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Train/val split generated from the config: `train_count + val_count` samples, val last.
pub fn synthetic_split(cfg: &RunConfig) -> spx_core::Result<(Dataset, Dataset)> {
    let m = &cfg.model;
    let mut all =
        generate_shapes_dataset(cfg.train.seed, cfg.train_count + cfg.val_count, m.image_h, m.image_w, m.n_classes)?;
    let val = all.split_off(cfg.train_count);
    Ok((all, val))
}

fn check_dataset(ds: &Dataset, m: &ModelConfig, path: &Path) -> anyhow::Result<()> {
    if (ds.height, ds.width) != (m.image_h, m.image_w) {
        return Err(Error::config(
            "image_h",
            format!(
                "{} holds {}x{} images, model expects {}x{}",
                path.display(),
                ds.height,
                ds.width,
                m.image_h,
                m.image_w
            ),
        )
        .into());
    }
    if ds.n_classes != m.n_classes {
        return Err(Error::config(
            "n_classes",
            format!("{} has {} classes, model has {}", path.display(), ds.n_classes, m.n_classes),
        )
        .into());
    }
    Ok(())
}

fn emit<S: Serialize>(json: bool, value: &S, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    } else {
        print!("{}", text());
    }
}

/// Model and weights from a checkpoint; the stored architecture wins over the config.
fn load_model(path: &Path, cfg: &RunConfig) -> anyhow::Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let mcfg = match ckpt.model_config() {
        Some(m) => {
            if m != cfg.model {
                info!("using the architecture stored in {}", path.display());
            }
            m
        }
        None => cfg.model.clone(),
    };
    Ok((Model::new(mcfg)?, ckpt))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match cli.command {
        Command::Train { data, val, resume } => train(g, &cfg, data, val, resume),
        Command::Eval { checkpoint, data } => eval(g, &cfg, &checkpoint, data),
        Command::Infer(args) => infer(g, &cfg, &args, false),
        Command::Visualize(args) => infer(g, &cfg, &args, true),
        Command::Ssn { image, png } => run_ssn(g, &cfg, &image, png),
        Command::Flops => {
            let report = flops_count(&cfg.model);
            emit(g.json, &report, || report.to_table());
            Ok(())
        }
        Command::Bench { repeats, checkpoint } => {
            let (model, params) = match checkpoint {
                Some(p) => {
                    let (m, ck) = load_model(&p, &cfg)?;
                    (m, ck.params)
                }
                None => (Model::new(cfg.model.clone())?, cfg.model.init_params(cfg.train.seed)?),
            };
            let report = benchmark(&model, &params, repeats)?;
            emit(g.json, &report, || report.to_table());
            Ok(())
        }
        Command::GenData { count } => {
            let dir = out_dir(g)?;
            let m = &cfg.model;
            let ds = generate_shapes_dataset(cfg.train.seed, count, m.image_h, m.image_w, m.n_classes)?;
            ds.save(&dir)?;
            if !g.json {
                println!("wrote {count} samples to {}", dir.display());
            } else {
                println!("{}", serde_json::json!({ "count": count, "dir": dir }));
            }
            Ok(())
        }
    }
}

fn train(
    g: &GlobalArgs,
    cfg: &RunConfig,
    data: Option<PathBuf>,
    val: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> anyhow::Result<()> {
    let (train_set, val_set) = match (&data, &val) {
        (None, None) => {
            let (t, v) = synthetic_split(cfg)?;
            (t, Some(v))
        }
        (Some(d), v) => (Dataset::load(d)?, v.as_deref().map(Dataset::load).transpose()?),
        (None, Some(v)) => (synthetic_split(cfg)?.0, Some(Dataset::load(v)?)),
    };
    check_dataset(&train_set, &cfg.model, data.as_deref().unwrap_or(Path::new("<generated>")))?;
    if let Some(v) = &val_set {
        check_dataset(v, &cfg.model, val.as_deref().unwrap_or(Path::new("<generated>")))?;
    }
    let dir = out_dir(g)?;
    std::fs::write(dir.join("config.cfg"), cfg.to_text())
        .with_context(|| format!("writing config to {}", dir.display()))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.model.clone(), cfg.train.clone(), &Checkpoint::load(&p)?)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    let out = RunOutput { dir: Some(dir.clone()), eval_threads: eval_threads(g) };
    let summary = pipeline::run(&mut trainer, &train_set, val_set.as_ref(), &out)?;
    let last = summary.records.last();
    let miou = summary.evals.last().map(|e| e.miou);
    let result = serde_json::json!({
        "steps": trainer.step,
        "final_loss": last.map(|r| r.loss),
        "val_miou": miou,
        "checkpoint": dir.join("checkpoint.spx"),
    });
    emit(g.json, &result, || {
        format!(
            "trained {} steps; final loss {}; val mIoU {}\ncheckpoint {}\n",
            trainer.step,
            last.map_or("-".into(), |r| format!("{:.4}", r.loss)),
            miou.map_or("-".into(), |m| format!("{m:.4}")),
            dir.join("checkpoint.spx").display()
        )
    });
    Ok(())
}

fn eval(g: &GlobalArgs, cfg: &RunConfig, checkpoint: &Path, data: Option<PathBuf>) -> anyhow::Result<()> {
    let (model, ckpt) = load_model(checkpoint, cfg)?;
    let ds = match &data {
        Some(d) => Dataset::load(d)?,
        None => synthetic_split(&RunConfig { model: model.cfg.clone(), ..cfg.clone() })?.1,
    };
    check_dataset(&ds, &model.cfg, data.as_deref().unwrap_or(Path::new("<generated>")))?;
    let report = pipeline::evaluate(&model, &ckpt.params, &ds, eval_threads(g))?;
    emit(g.json, &report, || format!("mIoU {}\nper-class {:?}\n", report.mean, report.per_class));
    Ok(())
}

fn palette_for(args: &InferArgs, n_classes: usize) -> anyhow::Result<Palette> {
    Ok(match &args.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::default_for(n_classes),
    })
}

fn write_rgb(img: &RgbImage, dir: &Path, stem: &str, png: bool) -> anyhow::Result<()> {
    img.write_ppm(&dir.join(format!("{stem}.ppm")))?;
    if png {
        img.write_png(&dir.join(format!("{stem}.png")))?;
    }
    Ok(())
}

fn infer(g: &GlobalArgs, cfg: &RunConfig, args: &InferArgs, superpixels: bool) -> anyhow::Result<()> {
    let (model, ckpt) = load_model(&args.checkpoint, cfg)?;
    let m = &model.cfg;
    let palette = palette_for(args, m.n_classes)?;
    let dir = out_dir(g)?;
    let render = |image: &RgbImage, stem: &str| -> anyhow::Result<Vec<u32>> {
        let tensor = Tensor::new(vec![image.height, image.width, 3], image.to_unit_floats())?;
        let (dense, sp) = model.predict(&ckpt.params, &tensor)?;
        let labels = GrayImage {
            width: image.width,
            height: image.height,
            data: dense.labels.iter().map(|&l| l as u8).collect(),
        };
        labels.write_pgm(&dir.join(format!("{stem}labels.pgm")))?;
        write_rgb(
            &colorize_labels(&dense.labels, image.width, image.height, &palette),
            &dir,
            &format!("{stem}labels"),
            args.png,
        )?;
        write_rgb(&overlay_boundaries(image, &dense.labels)?, &dir, &format!("{stem}overlay"), args.png)?;
        if superpixels {
            write_rgb(&overlay_boundaries(image, &sp)?, &dir, &format!("{stem}superpixels"), args.png)?;
        }
        Ok(dense.labels)
    };
    match (&args.image, &args.data) {
        (Some(path), _) => {
            let image = RgbImage::read_ppm(path)?;
            if (image.height, image.width) != (m.image_h, m.image_w) {
                return Err(Error::config(
                    "image_h",
                    format!(
                        "{} is {}x{}, model expects {}x{}",
                        path.display(),
                        image.height,
                        image.width,
                        m.image_h,
                        m.image_w
                    ),
                )
                .into());
            }
            render(&image, "")?;
            emit(g.json, &serde_json::json!({ "out": dir }), || format!("wrote predictions to {}\n", dir.display()));
        }
        (None, Some(data)) => {
            let ds = Dataset::load(data)?;
            check_dataset(&ds, m, data)?;
            let mut cm = pipeline::ConfusionMatrix::new(m.n_classes);
            for (i, s) in ds.samples.iter().enumerate() {
                let pred = render(&s.image, &format!("pred_{i:05}_"))?;
                cm.add(&pred, &s.label_ids());
            }
            let report = cm.report();
            let stored = ckpt.meta.get("eval_miou").copied();
            emit(
                g.json,
                &serde_json::json!({ "miou": report.mean, "per_class": report.per_class, "stored_eval_miou": stored }),
                || {
                    format!(
                        "mIoU {} (checkpoint eval mIoU {})\n",
                        report.mean,
                        stored.map_or("-".into(), |v| v.to_string())
                    )
                },
            );
        }
        (None, None) => bail!("either --image or --data is required"),
    }
    Ok(())
}

fn run_ssn(g: &GlobalArgs, cfg: &RunConfig, path: &Path, png: bool) -> anyhow::Result<()> {
    let image = RgbImage::read_ppm(path)?;
    let feats =
        Tensor::new(vec![image.height, image.width, 3], image.data.iter().map(|&b| f64::from(b) / 255.0).collect())?;
    let labels = ssn::segment(&feats, cfg.model.grid_h, cfg.model.grid_w, cfg.compactness, cfg.ssn_iters)?;
    let dir = out_dir(g)?;
    write_rgb(&overlay_boundaries(&image, &labels)?, &dir, "ssn_overlay", png)?;
    let n_sp = cfg.model.grid_h * cfg.model.grid_w;
    write_rgb(
        &colorize_labels(&labels, image.width, image.height, &Palette::default_for(n_sp)),
        &dir,
        "ssn_labels",
        png,
    )?;
    emit(g.json, &serde_json::json!({ "out": dir, "superpixels": n_sp }), || {
        format!("wrote SSN overlay to {}\n", dir.display())
    });
    Ok(())
}
