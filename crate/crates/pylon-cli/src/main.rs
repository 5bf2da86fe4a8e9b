//! `pylon` command-line tool: synthesize datasets, train model variants,
//! evaluate localization metrics, and audit shift equivariance.

mod config;
mod overlay;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use pylon_core::data::{
    generate_synthetic, load_png_gray, resize_bicubic, BlobKind, DatasetManifest, DistractorConfig,
    Split, SyntheticConfig,
};
use pylon_core::equivariance::{audit_model, AuditConfig, ShiftMode};
use pylon_core::metrics::{aggregate, iou_ior, minmax_binarize, ClassScores, GtInstance};
use pylon_core::models::{cam_extract, EncoderConfig, Model, PylonConfig, VariantKind};
use pylon_core::tensor::ops::PadMode;
use pylon_core::training::{fit, stream_rng, InMemoryDataset, TrainConfig};
use pylon_core::{PylonError, Result, Tensor4};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "pylon", about = "Weakly-supervised localization toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic blob dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model variant on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Inclusive seed range `A..B`; one run subdirectory per seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        pad: Option<String>,
    },
    /// Evaluate a checkpoint: metrics + CAM overlays.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated IoU/IoR thresholds, e.g. `0.25,0.5`.
        #[arg(long)]
        taus: Option<String>,
    },
    /// Audit per-stage shift equivariance of a model.
    Audit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "variant")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        pad: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Cmd::Train {
            config,
            data,
            out,
            variant,
            seed,
            seeds,
            pad,
        } => cmd_train(config.as_deref(), &data, &out, variant, seed, seeds, pad),
        Cmd::Eval {
            config,
            data,
            out,
            ckpt,
            taus,
        } => cmd_eval(config.as_deref(), &data, &out, &ckpt, taus),
        Cmd::Audit {
            config,
            out,
            ckpt,
            variant,
            pad,
            seed,
        } => cmd_audit(config.as_deref(), &out, ckpt.as_deref(), variant, pad, seed),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn parse_pad(s: &str) -> Result<PadMode> {
    match s {
        "zeros" => Ok(PadMode::Zeros),
        "circular" => Ok(PadMode::Circular),
        other => Err(PylonError::Config(format!(
            "unknown pad mode `{other}`; expected zeros|circular"
        ))),
    }
}

fn parse_seed_range(s: &str) -> Result<Vec<u64>> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| PylonError::Config(format!("bad seed range `{s}`; expected A..B")))?;
    let a: u64 = a
        .parse()
        .map_err(|_| PylonError::Config(format!("bad seed range `{s}`")))?;
    let b: u64 = b
        .parse()
        .map_err(|_| PylonError::Config(format!("bad seed range `{s}`")))?;
    if b < a {
        return Err(PylonError::Config(format!("empty seed range `{s}`")));
    }
    Ok((a..=b).collect())
}

fn range_pair(cfg: &mut RunConfig, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
    let v = cfg.f64_list_or(key, &[default.0, default.1])?;
    if v.len() != 2 {
        return Err(PylonError::Config(format!("{key}: needs two numbers")));
    }
    Ok((v[0], v[1]))
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.set("synth.seed", Value::from(s));
    }
    let defaults = SyntheticConfig::default();
    let mut synth = SyntheticConfig {
        n_images: cfg.usize_or("synth.n_images", defaults.n_images)?,
        image_size: cfg.usize_or("synth.image_size", defaults.image_size)?,
        noise_std: cfg.f64_or("synth.noise_std", defaults.noise_std)?,
        seed: cfg.u64_or("synth.seed", defaults.seed)?,
        classes: defaults.classes,
        distractors: None,
    };
    for class in &mut synth.classes {
        let k = |f: &str| format!("synth.{}.{f}", class.name);
        class.prevalence = cfg.f64_or(&k("prevalence"), class.prevalence)?;
        class.area_range = range_pair(&mut cfg, &k("area_range"), class.area_range)?;
        class.intensity_range =
            range_pair(&mut cfg, &k("intensity_range"), class.intensity_range)?;
    }
    let d_prev = cfg.f64_or("synth.distractor.prevalence", 0.0)?;
    if d_prev > 0.0 {
        synth.distractors = Some(DistractorConfig {
            prevalence: d_prev,
            area_range: range_pair(&mut cfg, "synth.distractor.area_range", (0.002, 0.01))?,
            kind: BlobKind::Disk,
            intensity_range: range_pair(
                &mut cfg,
                "synth.distractor.intensity_range",
                (0.1, 0.2),
            )?,
            max_count: cfg.usize_or("synth.distractor.max_count", 2)?,
        });
    }

    std::fs::create_dir_all(out)?;
    let mut manifest = generate_synthetic(&synth, out)?;
    // Optional re-partition with exact ratios (e.g. [10, 1, 2] normalized).
    let ratios = cfg.f64_list_or("synth.split_ratios", &[])?;
    if !ratios.is_empty() {
        if ratios.len() != 3 {
            return Err(PylonError::Config("synth.split_ratios: needs three numbers".into()));
        }
        let total: f64 = ratios.iter().sum();
        let seed = cfg.u64_or("synth.split_seed", synth.seed)?;
        manifest = pylon_core::data::split(
            &manifest,
            [ratios[0] / total, ratios[1] / total, ratios[2] / total],
            seed,
        )?;
        manifest.write_csv(out)?;
    }
    cfg.write(out)?;
    let count = |s: Split| manifest.split_records(s).len();
    println!(
        "synth: {} images ({} train / {} val / {} test), {} box entries -> {}",
        manifest.records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        manifest.boxes.values().map(Vec::len).sum::<usize>(),
        out.display()
    );
    Ok(())
}

/// Shared model/dataset settings resolved from a config map.
struct ModelSettings {
    classes: Vec<String>,
    enc: EncoderConfig,
    decoder_channels: usize,
    pad: PadMode,
}

fn model_settings(cfg: &mut RunConfig, pad_flag: Option<String>) -> Result<ModelSettings> {
    if let Some(p) = pad_flag {
        cfg.set("model.pad", Value::from(p));
    }
    let classes = cfg.string_list_or("data.classes", &["big", "small"])?;
    let stage = cfg.usize_list_or("model.stage_channels", &[16, 32, 64, 128])?;
    if stage.len() != 4 {
        return Err(PylonError::Config(
            "model.stage_channels needs exactly 4 entries".into(),
        ));
    }
    Ok(ModelSettings {
        classes,
        enc: EncoderConfig {
            in_channels: 1,
            stage_channels: [stage[0], stage[1], stage[2], stage[3]],
            input_size: cfg.usize_or("model.input_size", 64)?,
        },
        decoder_channels: cfg.usize_or("model.decoder_channels", 128)?,
        pad: parse_pad(&cfg.string_or("model.pad", "zeros")?)?,
    })
}

fn build_model(settings: &ModelSettings, variant: VariantKind, seed: u64) -> Result<Model> {
    let pylon_cfg = PylonConfig {
        n_classes: settings.classes.len(),
        decoder_channels: settings.decoder_channels,
        ..Default::default()
    };
    Model::build_with_pad(variant, settings.enc.clone(), pylon_cfg, seed, settings.pad)
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    variant: Option<String>,
    seed: Option<u64>,
    seeds: Option<String>,
    pad: Option<String>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(v) = variant {
        cfg.set("train.variant", Value::from(v));
    }
    let variant: VariantKind = cfg.string_or("train.variant", "pylon")?.parse()?;
    let settings = model_settings(&mut cfg, pad)?;

    let defaults = TrainConfig::default();
    let mut tc = TrainConfig {
        lr0: cfg.f64_or("train.lr0", defaults.lr0)?,
        plateau_factor: cfg.f64_or("train.plateau_factor", defaults.plateau_factor)?,
        plateau_patience: cfg.usize_or("train.plateau_patience", defaults.plateau_patience)?,
        plateau_min_delta: cfg.f64_or("train.plateau_min_delta", defaults.plateau_min_delta)?,
        stop_lr: cfg.f64_or("train.stop_lr", defaults.stop_lr)?,
        batch_size: cfg.usize_or("train.batch_size", defaults.batch_size)?,
        max_epochs: cfg.usize_or("train.max_epochs", defaults.max_epochs)?,
        seed: 0,
        augment: cfg.bool_or("train.augment", defaults.augment)?,
    };
    tc.validate()?;

    let seed_list = match (&seeds, seed) {
        (Some(range), _) => parse_seed_range(range)?,
        (None, s) => vec![s.unwrap_or(cfg.u64_or("train.seed", 0)?)],
    };
    let multi = seeds.is_some();

    let manifest = DatasetManifest::read_csv(data, &settings.classes)?;
    let train_set =
        InMemoryDataset::from_manifest(&manifest, data, Split::Train, settings.enc.input_size)?;
    let val_set =
        InMemoryDataset::from_manifest(&manifest, data, Split::Val, settings.enc.input_size)?;

    for s in seed_list {
        let run_dir = if multi { out.join(format!("seed_{s}")) } else { out.to_path_buf() };
        std::fs::create_dir_all(&run_dir)?;
        tc.seed = s;
        let mut run_cfg = cfg.clone();
        run_cfg.set("train.seed", Value::from(s));
        run_cfg.write(&run_dir)?;

        let mut model = build_model(&settings, variant, s)?;
        let log = fit(
            &mut model,
            &train_set,
            &val_set,
            &tc,
            Some(&run_dir.join("best.ckpt")),
        )?;
        log.write_csv(&run_dir.join("train_log.csv"))?;
        println!(
            "train[{}, seed {s}]: {} epochs, best val loss {:.6} (epoch {}) -> {}",
            variant.as_str(),
            log.epochs.len(),
            log.best_val_loss().unwrap_or(f64::NAN),
            log.best_epoch,
            run_dir.display()
        );
    }
    Ok(())
}

/// Raw per-instance record for metrics.json.
#[derive(Serialize)]
struct InstanceRecord {
    image_id: String,
    class: String,
    iou: f64,
    ior: f64,
    point_hit: bool,
}

#[derive(Serialize)]
struct EvalJson<'a> {
    report: &'a pylon_core::metrics::MetricsReport,
    instances: &'a [InstanceRecord],
}

fn cmd_eval(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    ckpt: &Path,
    taus_flag: Option<String>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(t) = taus_flag {
        let parsed: Vec<f64> = t
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| PylonError::Config(format!("bad tau `{x}`")))
            })
            .collect::<Result<_>>()?;
        cfg.set("eval.taus", Value::from(parsed));
    }
    let taus = cfg.f64_list_or("eval.taus", &[0.25, 0.5])?;
    let classes = cfg.string_list_or("data.classes", &["big", "small"])?;
    let split: Split = cfg.string_or("eval.split", "test")?.parse()?;
    let k_overlays = cfg.usize_or("eval.k_overlays", 2)?;

    let model = Model::load(ckpt)?;
    if model.pylon_cfg.n_classes != classes.len() {
        return Err(PylonError::Config(format!(
            "checkpoint has {} classes, config lists {}",
            model.pylon_cfg.n_classes,
            classes.len()
        )));
    }
    let size = model.enc_cfg.input_size;
    let manifest = DatasetManifest::read_csv(data, &classes)?;
    let records = manifest.split_records(split);
    if records.is_empty() {
        return Err(PylonError::Config(format!(
            "no records in split {}",
            split.as_str()
        )));
    }

    let mut instances = Vec::new();
    let mut instance_meta = Vec::new();
    let mut cls: Vec<(String, ClassScores)> = classes
        .iter()
        .map(|c| (c.clone(), ClassScores::default()))
        .collect();
    // (score key, image tensor, cam tensor, instance index)
    let mut overlay_pool: Vec<(f64, Tensor4, Tensor4, usize)> = Vec::new();

    for rec in &records {
        let img = load_png_gray(&data.join(&rec.image_path))?;
        let sx = size as f64 / img.w as f64;
        let sy = size as f64 / img.h as f64;
        let img = resize_bicubic(&img, size, size)?;
        let output = model.infer(&img)?;
        let id = rec.image_id();
        let labels = manifest.label_vector(rec);
        for (ci, class) in classes.iter().enumerate() {
            cls[ci].1.scores.push(output.logits.at(0, ci, 0, 0));
            cls[ci].1.labels.push(labels[ci]);
            let boxes: Vec<_> = manifest
                .boxes_for(&id, class)
                .iter()
                .map(|b| pylon_core::data::rescale_box(b, sx, sy))
                .collect();
            if boxes.is_empty() {
                continue;
            }
            let cam = cam_extract(&output, ci, (size, size))?;
            let mask = minmax_binarize(&cam)?;
            let (iou, ior) = iou_ior(&mask, size, size, &boxes)?;
            let point = pylon_core::metrics::point_hit(&cam, &boxes)?;
            instances.push(GtInstance {
                class: class.clone(),
                cam: cam.clone(),
                boxes: boxes.clone(),
            });
            instance_meta.push(InstanceRecord {
                image_id: id.clone(),
                class: class.clone(),
                iou,
                ior,
                point_hit: point,
            });
            overlay_pool.push((iou.max(ior), img.clone(), cam, instances.len() - 1));
        }
    }

    if instances.is_empty() {
        return Err(PylonError::MissingAnnotations(format!(
            "no bounding-box annotations in split {} of {}",
            split.as_str(),
            data.display()
        )));
    }

    std::fs::create_dir_all(out)?;
    let report = aggregate(&instances, &cls, &taus)?;
    std::fs::write(out.join("metrics.csv"), report.to_csv())?;
    let json = serde_json::to_string_pretty(&EvalJson {
        report: &report,
        instances: &instance_meta,
    })
    .map_err(|e| PylonError::Config(format!("metrics serialization: {e}")))?;
    std::fs::write(out.join("metrics.json"), json + "\n")?;

    // Overlays: k best and k worst instances per class by overlap score.
    let overlays_dir = out.join("overlays");
    std::fs::create_dir_all(&overlays_dir)?;
    for class in &classes {
        let mut mine: Vec<&(f64, Tensor4, Tensor4, usize)> = overlay_pool
            .iter()
            .filter(|(_, _, _, i)| &instance_meta[*i].class == class)
            .collect();
        mine.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let k = k_overlays.min(mine.len());
        let picks: Vec<(&str, usize, &(f64, Tensor4, Tensor4, usize))> = mine[..k]
            .iter()
            .enumerate()
            .map(|(r, e)| ("worst", r, *e))
            .chain(
                mine[mine.len() - k..]
                    .iter()
                    .rev()
                    .enumerate()
                    .map(|(r, e)| ("best", r, *e)),
            )
            .collect();
        for (tag, rank, (_, img, cam, i)) in picks {
            let meta = &instance_meta[*i];
            let path = overlays_dir.join(format!("{class}_{tag}{rank}_{}.png", meta.image_id));
            overlay::save_overlay(img, cam, &instances[*i].boxes, &path)?;
        }
    }

    cfg.write(out)?;
    println!(
        "eval: {} instances, weighted point acc {:.3}, macro auroc {} -> {}",
        instances.len(),
        report.weighted_point_acc,
        report
            .macro_auroc
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

fn cmd_audit(
    config: Option<&Path>,
    out: &Path,
    ckpt: Option<&Path>,
    variant: Option<String>,
    pad: Option<String>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.set("audit.seed", Value::from(s));
    }
    let audit_seed = cfg.u64_or("audit.seed", 0)?;

    let model = match ckpt {
        Some(path) => Model::load(path)?,
        None => {
            if let Some(v) = variant {
                cfg.set("train.variant", Value::from(v));
            }
            let variant: VariantKind = cfg.string_or("train.variant", "pylon")?.parse()?;
            let settings = model_settings(&mut cfg, pad)?;
            build_model(&settings, variant, audit_seed)?
        }
    };

    let size = model.enc_cfg.input_size;
    let default_shift = (size / 2).min(32) as i64;
    let shifts = cfg.pair_list_or(
        "audit.shifts",
        &[(default_shift, 0), (0, default_shift), (default_shift, default_shift)],
    )?;
    let mode = match model.pad_mode {
        PadMode::Circular => ShiftMode::Circular,
        PadMode::Zeros => ShiftMode::Zeros,
    };
    let audit_cfg = AuditConfig {
        shifts: shifts.iter().map(|&(a, b)| (a as isize, b as isize)).collect(),
        mode,
        margin_px: cfg.usize_or("audit.margin_px", size / 2)?,
        invariance_tol: cfg.f64_or("audit.invariance_tol", 1e-6)?,
    };

    let mut rng = stream_rng(audit_seed, "audit");
    let input = Tensor4::random(1, 1, size, size, &mut rng).map(|v| (v + 1.0) / 2.0);
    let report = audit_model(&model, &input, &audit_cfg)?;

    std::fs::create_dir_all(out)?;
    report.write_files(out)?;
    cfg.write(out)?;

    let flagged: Vec<&str> = report
        .nodes
        .iter()
        .filter(|n| n.flagged_invariant)
        .map(|n| n.node.as_str())
        .collect();
    println!(
        "audit[{}]: {} nodes, max equivariance err {:.3e}, {} flagged",
        model.kind.as_str(),
        report.nodes.len(),
        report.max_equivariance_err(),
        flagged.len()
    );
    for name in flagged {
        println!("  flagged: {name} (shift-invariant spatial stage)");
    }
    Ok(())
}
