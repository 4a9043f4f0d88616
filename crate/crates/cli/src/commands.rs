use std::fs;
use std::path::{Path, PathBuf};

use platewaste::augment::expand_training_set;
use platewaste::checkpoint::{self, CheckpointMeta};
use platewaste::dataio::synth::{self, SyntheticSpec};
use platewaste::dataio::{
    load_manifest, load_masks, read_image, read_mask, save_manifest, split_dataset, write_image, write_mask,
    DatasetManifest, ManifestEntry, Sample, Split, Stage,
};
use platewaste::maskcore::{class_proportions, LabelMask};
use platewaste::metrics::{evaluate_pairs, AggregationMode, MetricsReport};
use platewaste::nets::{Model, ModelConfig};
use platewaste::optim::LrSchedule;
use platewaste::trainer::{self, benchmark_throughput, images_to_tensor, predict_samples};
use platewaste::wastecalc::{waste_report, WasteOptions, WasteReport};
use platewaste::{Error, Result};
use serde::Serialize;

use crate::config::{AugmentChoice, RunConfig};
use crate::{Cli, Command, EvalFlags, ModelFlags};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = Some(out);
    }
    match cli.command {
        Command::Synth {
            kind,
            spec,
            size,
            count,
            test_fraction,
            val_fraction,
        } => {
            if let Some(f) = test_fraction {
                cfg.split.test_fraction = f;
            }
            if let Some(f) = val_fraction {
                cfg.split.val_fraction = f;
            }
            cfg.validate()?;
            synth_cmd(&cfg, &kind, spec.as_deref(), size, count)
        }
        Command::Augment {
            manifest,
            multiplier,
            preset,
            all_augmented,
        } => {
            override_manifest(&mut cfg, manifest);
            if let Some(m) = multiplier {
                cfg.augment.multiplier = m;
            }
            if let Some(p) = preset {
                cfg.augment.pipeline = Some(AugmentChoice::Preset(p));
            }
            if all_augmented {
                cfg.augment.include_original = false;
            }
            cfg.validate()?;
            augment_cmd(&cfg)
        }
        Command::Train {
            manifest,
            model,
            epochs,
            batch,
            lr,
        } => {
            override_manifest(&mut cfg, manifest);
            override_model(&mut cfg, &model);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = lr {
                cfg.train.schedule = Some(LrSchedule::constant(lr)?);
            }
            cfg.validate()?;
            train_cmd(&cfg)
        }
        Command::Evaluate {
            manifest,
            checkpoint,
            pred_dir,
            split,
            eval,
        } => {
            override_manifest(&mut cfg, manifest);
            override_eval(&mut cfg, &eval);
            cfg.validate()?;
            evaluate_cmd(&cfg, checkpoint.as_deref(), pred_dir.as_deref(), &split)
        }
        Command::Predict { checkpoint, inputs } => predict_cmd(&cfg, &checkpoint, &inputs),
        Command::Estimate {
            manifest,
            clamp_eating_rate,
        } => {
            if let Some(c) = clamp_eating_rate {
                cfg.clamp_eating_rate = c;
            }
            let manifests = if manifest.is_empty() {
                vec![manifest_path(&cfg)?]
            } else {
                manifest
            };
            estimate_cmd(&cfg, &manifests)
        }
        Command::Hist { manifest, bins } => {
            override_manifest(&mut cfg, manifest);
            hist_cmd(&cfg, bins)
        }
        Command::Bench {
            model,
            size,
            classes,
            batch,
            warmup,
            iters,
        } => {
            override_model(&mut cfg, &model);
            bench_cmd(&cfg, size, classes, batch.unwrap_or(cfg.train.batch_size), warmup, iters)
        }
    }
}

fn override_manifest(cfg: &mut RunConfig, manifest: Option<PathBuf>) {
    if let Some(m) = manifest {
        cfg.manifest = Some(m);
    }
}

fn override_model(cfg: &mut RunConfig, flags: &ModelFlags) {
    if let Some(a) = flags.arch {
        cfg.model.arch = a;
    }
    if let Some(w) = flags.width {
        cfg.model.width = w;
    }
}

fn override_eval(cfg: &mut RunConfig, flags: &EvalFlags) {
    if let Some(a) = flags.aggregation {
        cfg.eval.aggregation = a;
    }
    if flags.include_background {
        cfg.eval.include_background = true;
    }
}

fn manifest_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.manifest
        .clone()
        .ok_or_else(|| Error::InvalidConfig("no manifest given (use --manifest or the config's `manifest`)".into()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn synth_cmd(cfg: &RunConfig, kind: &str, spec: Option<&Path>, size: usize, count: usize) -> Result<()> {
    let out = out_dir(cfg)?;
    if let Some(path) = spec {
        let text = fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let spec: SyntheticSpec = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            location: format!("field `{}`", e.path()),
            message: e.inner().to_string(),
        })?;
        let res = synth::synth_generate(&spec, &out)?;
        println!("wrote {} images to {}", res.manifest.entries.len(), out.display());
        return Ok(());
    }
    match kind {
        "table6" => {
            for res in synth::write_table6_fixture(&out, cfg.seed)? {
                println!("{}: {}", res.manifest.food_type, res.manifest_path.display());
            }
        }
        _ => {
            let spec = synth::training_spec(size, count, cfg.seed);
            let mut res = synth::synth_generate(&spec, &out)?;
            res.manifest.entries =
                split_dataset(&res.manifest.entries, cfg.split.test_fraction, cfg.split.val_fraction, cfg.seed)?;
            save_manifest(&res.manifest, &res.manifest_path)?;
            let n = |s: Split| res.manifest.entries.iter().filter(|e| e.split == s).count();
            println!(
                "wrote {} images to {} (train {}, val {}, test {})",
                res.manifest.entries.len(),
                out.display(),
                n(Split::Train),
                n(Split::Val),
                n(Split::Test)
            );
        }
    }
    Ok(())
}

fn load_entry(manifest: &DatasetManifest, e: &ManifestEntry) -> Result<Sample> {
    Ok(Sample {
        id: e.mask.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        image: read_image(manifest.resolve(&e.image))?,
        mask: read_mask(manifest.resolve(&e.mask), manifest.num_classes())?,
    })
}

fn augment_cmd(cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(manifest_path(cfg)?)?;
    let spec = cfg.augment.resolve(&manifest.food_type)?;
    let out = out_dir(cfg)?;
    let train_entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.split == Split::Train).collect();
    if train_entries.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let train = train_entries
        .iter()
        .map(|e| load_entry(&manifest, e))
        .collect::<Result<Vec<_>>>()?;
    let m = cfg.augment.multiplier;
    let expanded = expand_training_set(&train, &spec, m, cfg.seed, cfg.augment.include_original)?;

    let mut new = DatasetManifest::new(manifest.food_type.clone(), manifest.classes.clone());
    new.base_dir = out.clone();
    let mut push = |s: &Sample, stage: Stage, split: Split| -> Result<()> {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
        write_image(&s.image, out.join(&image))?;
        write_mask(&s.mask, out.join(&mask))?;
        new.entries.push(ManifestEntry {
            image,
            mask,
            stage,
            split,
        });
        Ok(())
    };
    for (k, s) in expanded.iter().enumerate() {
        push(s, train_entries[k / m].stage, Split::Train)?;
    }
    for e in manifest.entries.iter().filter(|e| e.split != Split::Train) {
        push(&load_entry(&manifest, e)?, e.stage, e.split)?;
    }
    save_manifest(&new, out.join("manifest.json"))?;
    println!(
        "expanded {} training images to {} ({}x); manifest at {}",
        train.len(),
        expanded.len(),
        m,
        out.join("manifest.json").display()
    );
    Ok(())
}

fn load_split(manifest: &DatasetManifest, split: Option<Split>) -> Result<Vec<Sample>> {
    platewaste::dataio::load_samples(manifest, None, split)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    best_val_weighted_iou: f64,
    model: ModelConfig,
    init_seed: u64,
    train: &'a platewaste::trainer::TrainConfig,
    n_train: usize,
    n_val: usize,
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(manifest_path(cfg)?)?;
    let train_set = load_split(&manifest, Some(Split::Train))?;
    let val_set = load_split(&manifest, Some(Split::Val))?;
    let first = train_set.first().ok_or_else(|| Error::EmptySplit("train".into()))?;
    if first.image.width() != first.image.height() {
        return Err(Error::InvalidConfig(format!(
            "training images must be square, got {}x{}",
            first.image.width(),
            first.image.height()
        )));
    }
    let mut model_cfg = ModelConfig::new(cfg.model.arch, cfg.model.width, manifest.num_classes(), first.image.width() as usize);
    model_cfg.depth = cfg.model.depth;
    model_cfg.validate()?;
    let model = Model::build(model_cfg, cfg.seed)?;
    eprintln!(
        "training {} (width {}, {} parameters) on {} images, validating on {}",
        model_cfg.family,
        model_cfg.base_width,
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    let mut last_epoch = usize::MAX;
    let mut hook = |b: &trainer::BatchLog| {
        if b.epoch != last_epoch {
            last_epoch = b.epoch;
            eprintln!("epoch {}", b.epoch + 1);
        }
    };
    let outcome = trainer::train(&cfg.train, model, &train_set, &val_set, Some(&mut hook))?;
    let out = out_dir(cfg)?;
    outcome.history.write_csv(out.join("history.csv"))?;
    write_json(&out.join("history.json"), &outcome.history)?;
    let best = outcome.history.best().expect("at least one epoch");
    let meta = CheckpointMeta {
        epoch: Some(outcome.best_epoch),
        val_weighted_iou: Some(best.val_weighted_iou),
        val_weighted_dice: Some(best.val_weighted_dice),
        notes: format!("food type {}", manifest.food_type),
    };
    checkpoint::save(out.join("checkpoint.pwck"), &outcome.best, None, &meta)?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            best_val_weighted_iou: outcome.best_val_iou,
            model: model_cfg,
            init_seed: cfg.seed,
            train: &cfg.train,
            n_train: train_set.len(),
            n_val: val_set.len(),
        },
    )?;
    for r in &outcome.history.epochs {
        println!(
            "epoch {:>3}  lr {:.0e}  loss {:.4}  train IoU {:.4}  val IoU {:.4}  val Dice {:.4}",
            r.epoch, r.lr, r.train_loss, r.train_weighted_iou, r.val_weighted_iou, r.val_weighted_dice
        );
    }
    println!(
        "best epoch {} (val weighted IoU {:.4}); checkpoint at {}",
        outcome.best_epoch,
        outcome.best_val_iou,
        out.join("checkpoint.pwck").display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    Ok(match s {
        "all" => None,
        other => Some(other.parse()?),
    })
}

fn evaluate_cmd(cfg: &RunConfig, ckpt: Option<&Path>, pred_dir: Option<&Path>, split: &str) -> Result<()> {
    let manifest = load_manifest(manifest_path(cfg)?)?;
    let split = parse_split(split)?;
    let entries: Vec<&ManifestEntry> = manifest.entries_where(None, split).collect();
    if entries.is_empty() {
        return Err(Error::EmptySplit(split.map_or("all".into(), |s| s.to_string())));
    }
    let gts = entries
        .iter()
        .map(|e| read_mask(manifest.resolve(&e.mask), manifest.num_classes()))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<LabelMask> = match (ckpt, pred_dir) {
        (Some(path), _) => {
            let model = checkpoint::load(path)?.model;
            let samples = entries
                .iter()
                .map(|e| load_entry(&manifest, e))
                .collect::<Result<Vec<_>>>()?;
            predict_samples(&model, &samples)?
        }
        (None, Some(dir)) => {
            let paths: Vec<PathBuf> = entries
                .iter()
                .map(|e| dir.join(e.mask.file_name().unwrap_or_default()))
                .collect();
            let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
            if !missing.is_empty() {
                return Err(Error::MissingFile(missing));
            }
            paths
                .iter()
                .map(|p| read_mask(p, manifest.num_classes()))
                .collect::<Result<Vec<_>>>()?
        }
        (None, None) => return Err(Error::InvalidConfig("give --checkpoint or --pred-dir".into())),
    };
    let mode = AggregationMode {
        mode: cfg.eval.aggregation,
        include_background: cfg.eval.include_background,
    };
    let report = evaluate_pairs(preds.iter().zip(&gts), mode)?;
    let out = out_dir(cfg)?;
    write_metrics_csv(&out.join("metrics.csv"), &manifest, &report)?;
    write_json(&out.join("metrics.json"), &report)?;
    print_metrics(&manifest, &report);
    Ok(())
}

/// One row per class plus a final aggregate row.
fn write_metrics_csv(path: &Path, manifest: &DatasetManifest, r: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "pixel_accuracy", "iou", "dice", "dpa"])?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for c in 0..manifest.num_classes() {
        w.write_record([
            format!("{} / {}", c, manifest.class_name(c)),
            String::new(),
            cell(r.per_class_iou.get(c)),
            cell(r.per_class_dice.get(c)),
            cell(r.per_class_dpa.get(c)),
        ])?;
    }
    let label = match r.aggregation.mode {
        platewaste::metrics::Averaging::Macro => "macro",
        platewaste::metrics::Averaging::Weighted => "weighted",
    };
    w.write_record([
        label.to_string(),
        format!("{:.6}", r.pixel_accuracy),
        format!("{:.6}", r.iou),
        format!("{:.6}", r.dice),
        format!("{:.6}", r.dpa),
    ])?;
    w.flush()?;
    Ok(())
}

fn print_metrics(manifest: &DatasetManifest, r: &MetricsReport) {
    println!("{:<28} {:>8} {:>8} {:>8}", "class", "IoU", "Dice", "DPA");
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for c in 0..manifest.num_classes() {
        println!(
            "{:<28} {:>8} {:>8} {:>8}",
            format!("{} / {}", c, manifest.class_name(c)),
            cell(r.per_class_iou.get(c)),
            cell(r.per_class_dice.get(c)),
            cell(r.per_class_dpa.get(c))
        );
    }
    println!(
        "{} images, pixel accuracy {:.4}, {:?} IoU {:.4}, Dice {:.4}, DPA {:.4}",
        r.n_images, r.pixel_accuracy, r.aggregation.mode, r.iou, r.dice, r.dpa
    );
}

fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(Error::MissingFile(vec![p.clone()]));
        }
    }
    Ok(files)
}

fn predict_cmd(cfg: &RunConfig, ckpt: &Path, inputs: &[PathBuf]) -> Result<()> {
    let model = checkpoint::load(ckpt)?.model;
    let out = out_dir(cfg)?;
    let files = collect_pngs(inputs)?;
    for f in &files {
        let img = read_image(f)?;
        let mask = model.predict(&images_to_tensor(&[&img])?)?.remove(0);
        write_mask(&mask, out.join(f.file_name().unwrap_or_default()))?;
    }
    println!("wrote {} masks to {}", files.len(), out.display());
    Ok(())
}

fn estimate_cmd(cfg: &RunConfig, manifests: &[PathBuf]) -> Result<()> {
    let opts = WasteOptions {
        clamp_eating_rate: cfg.clamp_eating_rate,
    };
    let mut reports: Vec<WasteReport> = Vec::new();
    for path in manifests {
        let m = load_manifest(path)?;
        let pre = load_masks(&m, Some(Stage::Pre), None)?;
        let post = load_masks(&m, Some(Stage::Post), None)?;
        reports.push(waste_report(&m, &pre, &post, opts)?);
    }
    let mut csv_text = String::new();
    for (k, r) in reports.iter().enumerate() {
        let text = r.to_csv_string()?;
        let body = if k == 0 { &text[..] } else { text.split_once('\n').map_or("", |(_, rest)| rest) };
        csv_text.push_str(body);
    }
    let out = out_dir(cfg)?;
    fs::write(out.join("waste.csv"), &csv_text)?;
    write_json(&out.join("waste.json"), &reports)?;
    print!("{csv_text}");
    Ok(())
}

#[derive(Serialize)]
struct HistRow {
    food_type: String,
    stage: Stage,
    class: String,
    bin_start: f64,
    bin_end: f64,
    count: usize,
}

fn hist_cmd(cfg: &RunConfig, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be at least 1".into()));
    }
    let m = load_manifest(manifest_path(cfg)?)?;
    let mut rows = Vec::new();
    for stage in [Stage::Pre, Stage::Post] {
        let props: Vec<Vec<f64>> = load_masks(&m, Some(stage), None)?
            .iter()
            .map(|mask| class_proportions(mask).values)
            .collect();
        for c in 0..m.num_classes() {
            let mut counts = vec![0usize; bins];
            for p in &props {
                let b = ((p[c] * bins as f64) as usize).min(bins - 1);
                counts[b] += 1;
            }
            for (b, &count) in counts.iter().enumerate() {
                rows.push(HistRow {
                    food_type: m.food_type.clone(),
                    stage,
                    class: format!("{} / {}", c, m.class_name(c)),
                    bin_start: b as f64 / bins as f64,
                    bin_end: (b + 1) as f64 / bins as f64,
                    count,
                });
            }
        }
    }
    let out = out_dir(cfg)?;
    let mut w = csv::Writer::from_path(out.join("hist.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&out.join("hist.json"), &rows)?;
    println!("wrote {} histogram rows to {}", rows.len(), out.join("hist.csv").display());
    Ok(())
}

fn bench_cmd(cfg: &RunConfig, size: usize, classes: usize, batch: usize, warmup: usize, iters: usize) -> Result<()> {
    let mut mc = ModelConfig::new(cfg.model.arch, cfg.model.width, classes, size);
    mc.depth = cfg.model.depth;
    let model = Model::build(mc, cfg.seed)?;
    let report = benchmark_throughput(&model, batch, warmup, iters, cfg.seed)?;
    let out = out_dir(cfg)?;
    write_json(&out.join("bench.json"), &report)?;
    let mut w = csv::Writer::from_path(out.join("bench.csv"))?;
    w.write_record(["arch", "width", "params", "mode", "mean_img_per_s", "min_img_per_s", "max_img_per_s"])?;
    for (mode, t) in [("train", report.train), ("inference", report.inference)] {
        w.write_record([
            mc.family.to_string(),
            mc.base_width.to_string(),
            model.param_count().to_string(),
            mode.to_string(),
            format!("{:.3}", t.mean),
            format!("{:.3}", t.min),
            format!("{:.3}", t.max),
        ])?;
    }
    w.flush()?;
    println!(
        "{} width {} ({} params), batch {}: train {:.2} img/s, inference {:.2} img/s",
        mc.family,
        mc.base_width,
        model.param_count(),
        batch,
        report.train.mean,
        report.inference.mean
    );
    Ok(())
}
