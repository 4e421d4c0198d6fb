use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cxr_sslx::augment::resize_bilinear;
use cxr_sslx::data::{load_image, scan_dataset, split, CxrClass, DatasetManifest, Split};
use cxr_sslx::explain::{gradcampp, overlay, overlay_file_name, save_png, Colormap};
use cxr_sslx::metrics::format_metric;
use cxr_sslx::pipeline::{
    aggregate_last_k, evaluate, run_finetune, run_ssl_pretraining, AggregateReport, CheckpointEnvelope, Classifier,
    EpochLog, FileStore, InitMode, Observer, Stage, TrainConfig,
};
use cxr_sslx::ssl::LossValue;
use cxr_sslx::{deterministic_mode, Error, Result, DETERMINISTIC_ENV};
use log::{info, warn};
use ndarray::Axis;

use crate::args::{EvaluateArgs, ExplainArgs, ExportArgs, FinetuneArgs, ReportArgs, RunTarget, SslPretrainArgs};
use crate::run_dir::{RunDir, EPOCH_LOG, MANIFEST, SSL_LOG};

const SSL_LAST: &str = "ssl_last.ckpt";
const SSL_FINAL: &str = "ssl_final.ckpt";
const FINETUNE_LAST: &str = "finetune_last.ckpt";
const FINAL: &str = "final.ckpt";

/// The `--seed` flag wins over the config file. Without either, deterministic
/// mode refuses to run and normal mode draws a fresh seed.
fn resolve_seed(config: &mut TrainConfig, flag: Option<u64>) -> Result<()> {
    if flag.is_some() {
        config.seed = flag;
    }
    if config.seed.is_none() {
        if deterministic_mode() {
            return Err(Error::InvalidArgument(format!("{DETERMINISTIC_ENV}=1 requires --seed or a seed in the config")));
        }
        let seed = rand::random::<u32>() as u64;
        warn!("no seed given; using {seed}");
        config.seed = Some(seed);
    }
    Ok(())
}

/// Scans a dataset root or reads a manifest file, then assigns splits when missing.
fn load_manifest(data: &Path, config: &TrainConfig) -> Result<DatasetManifest> {
    let seed = config.resolved_seed()?;
    let manifest = if data.is_file() {
        DatasetManifest::load(data)?
    } else if data.is_dir() {
        let report = scan_dataset(data)?;
        for s in &report.skipped {
            warn!("skipped {}: {}", s.path.display(), s.reason);
        }
        report.manifest
    } else {
        return Err(Error::Data(format!("data path {} does not exist", data.display())));
    };
    if manifest.is_empty() {
        return Err(Error::Data(format!("no images found under {}", data.display())));
    }
    if manifest.records.iter().any(|r| r.split == Split::Unassigned) {
        split(&manifest, config.train_ratio, seed)
    } else {
        Ok(manifest)
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = TrainConfig::load(path)?;
    resolve_seed(&mut config, seed)?;
    Ok(config)
}

struct RunObserver<'a> {
    dir: &'a RunDir,
}

impl Observer for RunObserver<'_> {
    fn ssl_epoch(&mut self, epoch: usize, loss: &LossValue, checkpoint: &CheckpointEnvelope) -> Result<()> {
        checkpoint.save(&self.dir.checkpoint(SSL_LAST))?;
        self.dir.append_line(SSL_LOG, &ssl_record(epoch, loss))
    }

    fn finetune_epoch(&mut self, log: &EpochLog, checkpoint: &CheckpointEnvelope) -> Result<()> {
        checkpoint.save(&self.dir.checkpoint(FINETUNE_LAST))?;
        self.dir.append_line(EPOCH_LOG, &log.to_record())
    }
}

fn ssl_record(epoch: usize, loss: &LossValue) -> String {
    serde_json::json!({"epoch": epoch, "loss": loss.total, "l1": loss.l1, "l2": loss.l2}).to_string()
}

fn open_run(target: &RunTarget, config: &TrainConfig) -> Result<RunDir> {
    let dir = RunDir::prepare(&target.out, target.force, target.resume)?;
    if target.resume {
        let stored = dir.load_snapshot()?;
        let strip = |c: &TrainConfig| TrainConfig { ssl_epochs: 0, finetune_epochs: 0, ..c.clone() };
        if strip(&stored) != strip(config) {
            return Err(Error::InvalidArgument("--resume with a configuration that differs from config.snapshot".into()));
        }
    }
    dir.save_snapshot(config)?;
    Ok(dir)
}

pub fn ssl_pretrain(args: SslPretrainArgs, seed: Option<u64>) -> Result<()> {
    let config = load_config(&args.run.config, seed)?;
    if !config.init_mode.runs_ssl() {
        return Err(Error::InvalidArgument(format!(
            "init_mode {} has no self-supervised stage; use transfer_ssl or ssl_only",
            config.init_mode
        )));
    }
    let external = args.backbone.as_deref().map(CheckpointEnvelope::load).transpose()?;
    let manifest = load_manifest(&args.run.data, &config)?;
    let dir = open_run(&args.run, &config)?;
    dir.write(MANIFEST, &manifest.to_tsv()?)?;
    let resume = if args.run.resume { Some(CheckpointEnvelope::load(&dir.checkpoint(SSL_LAST))?) } else { None };
    dir.truncate(SSL_LOG)?;
    if let Some(r) = &resume {
        for (i, l) in r.meta.ssl_losses.iter().enumerate() {
            dir.append_line(SSL_LOG, &ssl_record(i + 1, l))?;
        }
    }
    let mut images = manifest.unlabeled_train();
    if config.ssl_include_test {
        images.paths.extend(manifest.records_in(Split::Test).map(|r| r.path.clone()));
    }
    println!("self-supervised pre-training on {} images", images.len());
    let env = run_ssl_pretraining(&config, &images, &FileStore, external.as_ref(), resume.as_ref(), &mut RunObserver { dir: &dir })?;
    let path = dir.checkpoint(SSL_FINAL);
    env.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn finetune(args: FinetuneArgs, seed: Option<u64>) -> Result<()> {
    let mut config = load_config(&args.run.config, seed)?;
    if let Some(f) = args.label_fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!("--label-fraction {f} must lie in (0, 1]")));
        }
        config.label_fraction = f;
    }
    let init = args.init.as_deref().map(CheckpointEnvelope::load).transpose()?;
    config.init_mode = match &init {
        None => InitMode::Scratch,
        Some(env) => match env.stage {
            Stage::ExternalBackbone => InitMode::Transfer,
            Stage::SslPretrained if env.config.init_mode.runs_ssl() => env.config.init_mode,
            Stage::SslPretrained => InitMode::SslOnly,
            Stage::Finetuned => {
                return Err(Error::InvalidArgument(
                    "--init expects a self-supervised or backbone checkpoint; run export-backbone first".into(),
                ))
            }
        },
    };
    config.validate()?;
    let manifest = load_manifest(&args.run.data, &config)?;
    let dir = open_run(&args.run, &config)?;
    dir.write(MANIFEST, &manifest.to_tsv()?)?;
    let resume = if args.run.resume { Some(CheckpointEnvelope::load(&dir.checkpoint(FINETUNE_LAST))?) } else { None };
    dir.truncate(EPOCH_LOG)?;
    if let Some(r) = &resume {
        for log in &r.meta.epoch_logs {
            dir.append_line(EPOCH_LOG, &log.to_record())?;
        }
    }
    let out = run_finetune(&config, &manifest, &FileStore, init.as_ref(), resume.as_ref(), &mut RunObserver { dir: &dir })?;
    println!("fine-tuned on {} training images ({})", out.train_images, config.init_mode);
    out.checkpoint.save(&dir.checkpoint(FINAL))?;
    dir.write_report("epochs.csv", &epochs_csv(&out.logs))?;
    if let Some(last) = out.logs.last() {
        dir.write_report("confusion.csv", &last.eval.confusion.to_csv()?)?;
        dir.write_report("evaluation.json", &to_json(&last.eval)?)?;
    }
    if !out.logs.is_empty() {
        let k = config.eval_last_k.min(out.logs.len());
        if k < config.eval_last_k {
            warn!("only {} epochs logged; aggregating the last {k}", out.logs.len());
        }
        let agg = aggregate_last_k(&out.logs, k)?;
        dir.write_report("aggregate.json", &to_json(&agg)?)?;
        let table = aggregate_table(&agg);
        dir.write_report("aggregate.txt", &table)?;
        print!("{table}");
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))
}

fn epochs_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,sen,spe,hm,auc,acc\n");
    for l in logs {
        let _ = write!(s, "{},{}", l.epoch, l.train_loss);
        for (_, v) in l.eval.scalars() {
            let _ = write!(s, ",{}", csv_number(v));
        }
        s.push('\n');
    }
    s
}

fn csv_number(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn aggregate_table(agg: &AggregateReport) -> String {
    let mut s = format!("last {} epochs\nmetric  mean      variance\n", agg.k);
    for (name, m) in agg.scalars() {
        let _ = writeln!(s, "{name:<6}  {:<8}  {}", format_metric(m.mean), format_variance(m.variance));
    }
    s
}

fn format_variance(v: f64) -> String {
    if v.is_nan() {
        "undefined".into()
    } else {
        format!("{v:.3e}")
    }
}

fn load_classifier(env: &CheckpointEnvelope) -> Result<Classifier<f32>> {
    if env.stage != Stage::Finetuned {
        return Err(Error::InvalidArgument(format!("expected a fine-tuned checkpoint, got {}", env.stage.name())));
    }
    let spec = env.config.finetune_backbone_spec()?;
    Classifier::from_blobs(&spec, &env.blobs, CxrClass::COUNT)
}

pub fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let env = CheckpointEnvelope::load(&args.checkpoint)?;
    let mut model = load_classifier(&env)?;
    let manifest = load_manifest(&args.data, &env.config)?;
    let test: Vec<(&Path, CxrClass)> = manifest.records_in(Split::Test).map(|r| (r.path.as_path(), r.class_label)).collect();
    if test.is_empty() {
        return Err(Error::Data("no test images to evaluate".into()));
    }
    let report = evaluate(&mut model, &test, &FileStore, &env.config)?;
    info!("evaluated {} test images", test.len());
    print!("{}", report.to_table());
    let csv = report.confusion.to_csv()?;
    match args.out {
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_file(&dir.join("confusion.csv"), &csv)?;
            write_file(&dir.join("evaluation.json"), &to_json(&report)?)?;
        }
        None => print!("\n{csv}"),
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn explain_cmd(args: ExplainArgs) -> Result<()> {
    let env = CheckpointEnvelope::load(&args.checkpoint)?;
    let mut model = load_classifier(&env)?;
    let colormap: Colormap = args.colormap.parse()?;
    let class = args.class.as_deref().map(str::parse::<CxrClass>).transpose().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let cfg = &env.config;
    for path in &args.images {
        let gray = load_image(path, 1)?;
        let (_, h, w) = gray.dim();
        let small = resize_bilinear(&gray, cfg.finetune_size, cfg.finetune_size);
        let plane = small.index_axis(Axis(0), 0).mapv(|v| ((v as f64 - cfg.pixel_mean) / cfg.pixel_std) as f32);
        let input = ndarray::Array3::from_shape_fn((cfg.input_channels, cfg.finetune_size, cfg.finetune_size), |(_, i, j)| plane[[i, j]]);
        let mut heat = gradcampp(&mut model, &input, class)?;
        heat.values = resize_bilinear(&heat.values.clone().insert_axis(Axis(0)), h, w).index_axis_move(Axis(0), 0);
        let image = overlay(&gray.index_axis(Axis(0), 0).to_owned(), &heat, colormap, args.alpha)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let out = args.out.join(overlay_file_name(&stem, heat.target_class));
        save_png(&image, &out)?;
        println!("{} -> {} ({:?})", path.display(), out.display(), heat.status);
    }
    Ok(())
}

struct RunSummary {
    name: String,
    init_mode: InitMode,
    label_fraction: f64,
    aggregate: AggregateReport,
}

fn read_run(path: &Path) -> Result<RunSummary> {
    let dir = RunDir::open(path)?;
    let config = dir.load_snapshot()?;
    let text = dir.read("reports/aggregate.json")?;
    let aggregate: AggregateReport = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(RunSummary {
        name: path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
        init_mode: config.init_mode,
        label_fraction: config.label_fraction,
        aggregate,
    })
}

pub fn report_cmd(args: ReportArgs) -> Result<()> {
    let mut runs = args.runs.iter().map(|p| read_run(p)).collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| {
        a.init_mode
            .name()
            .cmp(b.init_mode.name())
            .then(a.label_fraction.total_cmp(&b.label_fraction))
            .then(a.name.cmp(&b.name))
    });
    let metrics = ["sen", "spe", "hm", "auc", "acc"];
    let mut table = format!("{:<20} {:<13} {:>8}", "run", "init_mode", "fraction");
    for m in metrics {
        let _ = write!(table, " {:>17}", m);
    }
    table.push('\n');
    let mut comparison = String::from("run,init_mode,label_fraction");
    for m in metrics {
        let _ = write!(comparison, ",{m}_mean,{m}_variance");
    }
    comparison.push('\n');
    let mut plot = String::from("init_mode,label_fraction,sen,spe,hm,auc,acc\n");
    for r in &runs {
        let _ = write!(table, "{:<20} {:<13} {:>8}", r.name, r.init_mode.name(), r.label_fraction);
        let _ = write!(comparison, "{},{},{}", r.name, r.init_mode.name(), r.label_fraction);
        let _ = write!(plot, "{},{}", r.init_mode.name(), r.label_fraction);
        for (name, s) in r.aggregate.scalars() {
            if name == "loss" {
                continue;
            }
            let _ = write!(table, " {:>8}±{:<8}", format_metric(s.mean), format_variance(s.variance));
            let _ = write!(comparison, ",{},{}", csv_number(s.mean), csv_number(s.variance));
            let _ = write!(plot, ",{}", csv_number(s.mean));
        }
        table.push('\n');
        comparison.push('\n');
        plot.push('\n');
    }
    print!("{table}");
    match args.out {
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_file(&dir.join("comparison.csv"), &comparison)?;
            write_file(&dir.join("fraction_vs_metric.csv"), &plot)?;
        }
        None => print!("\n{plot}"),
    }
    Ok(())
}

pub fn export_backbone(args: ExportArgs) -> Result<()> {
    let env = CheckpointEnvelope::load(&args.checkpoint)?;
    let out = env.export_backbone()?;
    out.save(&args.out)?;
    println!("wrote {} ({} backbone tensors)", args.out.display(), out.blobs.len());
    Ok(())
}

