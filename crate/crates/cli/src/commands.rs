use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crrn::checkpoint::Checkpoint;
use crrn::data::{read_manifest, save_color_png, save_image, save_labels, write_manifest, Palette};
use crrn::{
    gen_synthetic, grad_check, load_image, load_labeled, ConfusionMatrix, LabeledImage, ModelConfig, SyntheticSpec,
    TrainConfig, Trainer, IGNORE_LABEL,
};
use serde::Serialize;

use crate::{EvalArgs, Failure, GradcheckArgs, ImageFormat, InferArgs, LabelFormat, SynthArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn load_manifest(path: &Path) -> Result<Vec<LabeledImage>, Failure> {
    let entries = read_manifest(path)?;
    if entries.is_empty() {
        return Err(Failure::Runtime(format!(
            "{}: manifest lists no images",
            path.display()
        )));
    }
    Ok(entries
        .iter()
        .map(|(img, lbl)| load_labeled(img, lbl))
        .collect::<crrn::Result<_>>()?)
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn apply_overrides(base: &mut TrainConfig, a: &TrainArgs) {
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { base.$field = v; })*
        };
    }
    set!(
        learning_rate,
        decay_rate,
        decay_every_epochs,
        epochs,
        batch_size,
        seed,
        grid_rows,
        grid_cols,
        hidden_dim,
        residual_mid_channels,
        num_classes,
        val_fraction,
        log_timing
    );
    if a.grad_clip_norm.is_some() {
        base.grad_clip_norm = a.grad_clip_norm;
    }
    if a.freeze_bn_after.is_some() {
        base.freeze_bn_after = a.freeze_bn_after;
    }
    if let Some(c) = a.connectivity {
        base.connectivity = c.into();
    }
    base.decay_once |= a.decay_once;
    base.flip |= a.flip;
    base.per_direction_params |= a.per_direction_params;
    base.fuse_post_residual |= a.fuse_post_residual;
    base.ablate_context |= a.ablate_context;
}

pub fn train(a: TrainArgs) -> CmdResult {
    let images = load_manifest(&a.manifest)?;
    let val = a.val_manifest.as_deref().map(load_manifest).transpose()?;
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("log.jsonl");

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            apply_overrides(&mut ckpt.train, &a);
            ckpt.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let cfg = &ckpt.params.config;
            if ckpt.train.model_config(cfg.image_height, cfg.image_width, cfg.channels) != *cfg {
                return Err(Failure::Usage("model shape flags cannot change when resuming".into()));
            }
            Trainer::from_checkpoint(&ckpt, images, val)?
        }
        None => {
            let mut config = TrainConfig::default();
            apply_overrides(&mut config, &a);
            config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            fs::write(&log_path, "")?;
            Trainer::new(config, images, val)?
        }
    };

    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    while trainer.epoch < trainer.config.epochs {
        let before = trainer.best_val_pa;
        let record = trainer.run_epoch()?;
        let line = serde_json::to_string(&record).map_err(|e| Failure::Runtime(e.to_string()))?;
        writeln!(log, "{line}")?;
        log.flush()?;
        let ckpt = trainer.checkpoint();
        ckpt.save(&a.out.join("last.ckpt"))?;
        if trainer.best_val_pa != before {
            ckpt.save(&a.out.join("best.ckpt"))?;
        }
        let val = match (record.val_pa, record.val_ca) {
            (Some(pa), Some(ca)) => format!("  val PA {pa:.4} CA {ca:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {:>4}  lr {:.4e}  loss {:.6}{val}",
            record.epoch, record.lr, record.train_loss
        );
    }
    if !a.out.join("last.ckpt").exists() {
        trainer.checkpoint().save(&a.out.join("last.ckpt"))?;
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn infer(a: InferArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let palette: Option<Palette> = match &a.colors {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let palette: Palette =
                serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            let classes = ckpt.params.config.num_classes;
            if palette.len() < classes {
                return Err(Failure::Runtime(format!(
                    "{}: {} colors for a model with {classes} classes",
                    p.display(),
                    palette.len()
                )));
            }
            Some(palette)
        }
        None => None,
    };
    let image = load_image(&a.image)?;
    let pred = crrn::infer(&image, &ckpt.params)?;
    fs::create_dir_all(&a.out)?;
    let stem = file_stem(&a.image);
    let ext = match a.format {
        LabelFormat::Png => "png",
        LabelFormat::Pgm => "pgm",
    };
    let labels_path = a.out.join(format!("{stem}_labels.{ext}"));
    save_labels(&labels_path, &pred.labels, pred.height, pred.width)?;
    println!("{}", labels_path.display());
    if let Some(palette) = palette {
        let color_path = a.out.join(format!("{stem}_color.png"));
        save_color_png(&color_path, &pred.labels, pred.height, pred.width, &palette)?;
        println!("{}", color_path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct ClassReport {
    class: usize,
    accuracy: Option<f64>,
    pixels: u64,
}

#[derive(Serialize)]
struct EvalReport {
    pa: f64,
    ca: f64,
    per_class: Vec<ClassReport>,
    confusion_matrix: Vec<Vec<u64>>,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let images = load_manifest(&a.manifest)?;
    let ckpt = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let classes = match (&ckpt, a.num_classes) {
        (Some(c), _) => c.params.config.num_classes,
        (None, Some(n)) => n,
        (None, None) => images
            .iter()
            .flat_map(|i| i.labels.iter())
            .filter(|&&l| l != IGNORE_LABEL)
            .map(|&l| usize::from(l) + 1)
            .max()
            .unwrap_or(1),
    };
    let mut cm = ConfusionMatrix::new(classes);
    for img in &images {
        let predicted = match (&ckpt, a.oracle) {
            (_, true) => img.labels.clone(),
            (Some(c), false) => crrn::infer(&img.image, &c.params)?.labels,
            (None, false) => unreachable!("clap requires --checkpoint without --oracle"),
        };
        cm.accumulate(&img.labels, &predicted)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", img.id)))?;
    }
    let (pa, ca) = cm.metrics()?;
    let report = EvalReport {
        pa,
        ca,
        per_class: cm
            .per_class_accuracy()
            .into_iter()
            .zip(cm.row_sums())
            .enumerate()
            .map(|(class, (accuracy, pixels))| ClassReport {
                class,
                accuracy,
                pixels,
            })
            .collect(),
        confusion_matrix: cm.rows(),
    };
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("eval.json"), &report)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| Failure::Runtime(e.to_string()))?
    );
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let config = ModelConfig {
        image_height: a.image_height,
        image_width: a.image_width,
        channels: a.channels,
        grid_rows: a.grid_rows,
        grid_cols: a.grid_cols,
        hidden_dim: a.hidden_dim,
        residual_mid_channels: a.residual_mid_channels,
        kernel_size: 3,
        num_classes: a.num_classes,
        connectivity: a.connectivity.into(),
        per_direction_params: a.per_direction_params,
        fuse_post_residual: a.fuse_post_residual,
    };
    let report = grad_check(&config, a.seed, a.tol).map_err(|e| match e {
        crrn::Error::Config(_) | crrn::Error::EvenKernel(_) => Failure::Usage(e.to_string()),
        other => Failure::from(other),
    })?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.jsonl"), report.to_jsonl())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check failed at tolerance {:e}",
            a.tol
        )))
    }
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<SyntheticSpec>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::new(a.size, a.num_classes),
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let images = gen_synthetic(a.n, a.seed, &spec)?;
    let (img_ext, lbl_ext) = match a.format {
        ImageFormat::Png => ("png", "png"),
        ImageFormat::Ppm => ("pgm", "pgm"),
    };
    fs::create_dir_all(a.out.join("images"))?;
    fs::create_dir_all(a.out.join("labels"))?;
    let mut entries = Vec::with_capacity(images.len());
    for img in &images {
        let rel_img = PathBuf::from("images").join(format!("{}.{img_ext}", img.id));
        let rel_lbl = PathBuf::from("labels").join(format!("{}.{lbl_ext}", img.id));
        let (_, h, w) = img.extents();
        save_image(&a.out.join(&rel_img), &img.image)?;
        save_labels(&a.out.join(&rel_lbl), &img.labels, h, w)?;
        entries.push((rel_img, rel_lbl));
    }
    write_manifest(&a.out.join("manifest.tsv"), &entries)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!("wrote {} images to {}", images.len(), a.out.display());
    Ok(())
}
