//! Self-supervised pre-training and supervised fine-tuning loops.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{CheckpointEnvelope, Stage};
use super::classifier::{attach_classifier, cross_entropy, Classifier};
use super::config::{InitMode, TrainConfig};
use crate::augment::{make_view_pair, resize_bilinear};
use crate::data::{check_disjoint, load_image, stratified_subsample, CxrClass, DatasetManifest, Split, UnlabeledSet};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, MetricStats};
use crate::nn::optim::Sgd;
use crate::nn::{Mode, ParameterSet, Parameterized};
use crate::seed::{self, stream};
use crate::ssl::{init_branches, ssl_step, BackboneInit, LossValue, SslSettings, TargetBranch, ViewBatch};

/// Source of single-channel images in `[0, 1]`, addressed by manifest path.
pub trait ImageStore: Sync {
    fn load_gray(&self, path: &Path) -> Result<Array3<f32>>;
}

/// Decodes images from disk on every access.
#[derive(Debug, Clone, Copy, Default)]
pub struct FileStore;

impl ImageStore for FileStore {
    fn load_gray(&self, path: &Path) -> Result<Array3<f32>> {
        load_image(path, 1)
    }
}

/// Images held in memory, keyed by the path used in the manifest.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    images: HashMap<PathBuf, Array3<f32>>,
}

impl MemoryStore {
    pub fn insert(&mut self, path: impl Into<PathBuf>, image: Array3<f32>) {
        self.images.insert(path.into(), image);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ImageStore for MemoryStore {
    fn load_gray(&self, path: &Path) -> Result<Array3<f32>> {
        self.images
            .get(path)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no image stored for {}", path.display())))
    }
}

/// Per-epoch callbacks, e.g. for writing resumable checkpoints and logs.
pub trait Observer {
    fn ssl_epoch(&mut self, _epoch: usize, _loss: &LossValue, _checkpoint: &CheckpointEnvelope) -> Result<()> {
        Ok(())
    }

    fn finetune_epoch(&mut self, _log: &EpochLog, _checkpoint: &CheckpointEnvelope) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: EvalReport,
}

impl EpochLog {
    /// One flat JSON object: epoch, loss and the five scalar metrics.
    pub fn to_record(&self) -> String {
        let mut map = serde_json::Map::new();
        map.insert("epoch".into(), self.epoch.into());
        map.insert("loss".into(), json_number(self.train_loss));
        for (name, v) in self.eval.scalars() {
            map.insert(name.into(), json_number(v));
        }
        serde_json::Value::Object(map).to_string()
    }
}

fn json_number(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

/// Copies a one-channel image into `channels` identical planes.
pub fn replicate_channels(gray: &Array3<f32>, channels: usize) -> Array3<f32> {
    let (_, h, w) = gray.dim();
    let plane = gray.index_axis(Axis(0), 0);
    let mut out = Array3::zeros((channels, h, w));
    for mut c in out.outer_iter_mut() {
        c.assign(&plane);
    }
    out
}

/// Resizes, replicates and standardizes a batch of images into `(B, C, S, S)`.
pub fn prepare_batch(store: &dyn ImageStore, paths: &[&Path], config: &TrainConfig) -> Result<Array4<f32>> {
    let size = config.finetune_size;
    let images: Vec<Array3<f32>> = paths
        .par_iter()
        .map(|p| {
            let img = store.load_gray(p)?;
            Ok(if img.dim().1 == size && img.dim().2 == size { img } else { resize_bilinear(&img, size, size) })
        })
        .collect::<Result<_>>()?;
    let (mean, std) = (config.pixel_mean as f32, config.pixel_std as f32);
    let mut batch = Array4::zeros((paths.len(), config.input_channels, size, size));
    for (mut slot, img) in batch.outer_iter_mut().zip(&images) {
        let plane = img.index_axis(Axis(0), 0).mapv(|v| (v - mean) / std);
        for mut c in slot.outer_iter_mut() {
            c.assign(&plane);
        }
    }
    Ok(batch)
}

/// Epoch-local sample order, cut into batches; a trailing batch of one is dropped.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, tag: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[tag, epoch as u64]));
    order.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Everything except the epoch counts must agree for a checkpoint to be resumable.
fn check_resumable(resume: &CheckpointEnvelope, config: &TrainConfig, stage: Stage) -> Result<()> {
    if resume.stage != stage {
        return Err(Error::Checkpoint(format!("cannot resume {} training from a {} checkpoint", stage.name(), resume.stage.name())));
    }
    let strip = |c: &TrainConfig| TrainConfig { ssl_epochs: 0, finetune_epochs: 0, ..c.clone() };
    if strip(&resume.config) != strip(config) {
        return Err(Error::Checkpoint("checkpoint was written with a different configuration".into()));
    }
    Ok(())
}

fn ssl_checkpoint(
    config: &TrainConfig,
    epoch: usize,
    online: &impl Parameterized<f32>,
    target: &TargetBranch<f32>,
    optimizer: &Sgd<f32>,
    losses: &[LossValue],
) -> CheckpointEnvelope {
    let mut blobs = online.parameter_set("");
    blobs.extend_prefixed("target", &target.parameter_set(""));
    blobs.extend_prefixed("optim", optimizer.state());
    let mut env = CheckpointEnvelope::new(Stage::SslPretrained, epoch, config.clone(), blobs);
    env.meta.ssl_losses = losses.to_vec();
    env
}

/// Self-supervised pre-training over unlabeled images.
///
/// `init` supplies external backbone weights for [`InitMode::TransferSsl`];
/// `resume` continues an interrupted run from its last completed epoch.
/// The result holds online, target and optimizer state plus the per-epoch mean loss.
pub fn run_ssl_pretraining(
    config: &TrainConfig,
    images: &UnlabeledSet,
    store: &dyn ImageStore,
    init: Option<&CheckpointEnvelope>,
    resume: Option<&CheckpointEnvelope>,
    observer: &mut dyn Observer,
) -> Result<CheckpointEnvelope> {
    config.validate()?;
    let seed = config.resolved_seed()?;
    match (config.init_mode, init) {
        (InitMode::TransferSsl, None) => {
            return Err(Error::Config("init_mode transfer_ssl needs external backbone weights".into()))
        }
        (InitMode::SslOnly, Some(_)) => {
            return Err(Error::Config("init_mode ssl_only starts from random weights; drop the backbone file".into()))
        }
        (InitMode::Scratch | InitMode::Transfer, _) => {
            return Err(Error::Config(format!("init_mode {} skips self-supervised pre-training", config.init_mode)))
        }
        _ => {}
    }
    if images.len() < 2 {
        return Err(Error::Data(format!("self-supervised pre-training needs at least 2 images, got {}", images.len())));
    }
    let arch = config.ssl_architecture()?;
    let init_blobs = init.map(|e| &e.blobs);
    let backbone_init = init_blobs.map_or(BackboneInit::Random, BackboneInit::Pretrained);
    let (mut online, mut target) = init_branches::<f32>(&arch, backbone_init, seed)?;
    let mut optimizer = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
    let mut losses = Vec::new();
    let mut start = 0;
    if let Some(r) = resume {
        check_resumable(r, config, Stage::SslPretrained)?;
        online.load_parameter_set("", &r.blobs)?;
        target.load_parameter_set("target", &r.blobs)?;
        optimizer.set_state(r.component("optim"));
        losses = r.meta.ssl_losses.clone();
        start = r.epoch;
    }
    let settings = SslSettings { tau: config.tau, variant: config.loss_variant };
    let policy = config.augmentation();
    info!("self-supervised pre-training on {} images, epochs {}..{}", images.len(), start + 1, config.ssl_epochs);
    let mut checkpoint = ssl_checkpoint(config, start, &online, &target, &optimizer, &losses);
    for epoch in start..config.ssl_epochs {
        let mut sum = LossValue { total: 0.0, l1: 0.0, l2: 0.0 };
        let batches = epoch_batches(images.len(), config.batch_size, seed, stream::SSL_SHUFFLE, epoch);
        for (b, batch) in batches.iter().enumerate() {
            let pairs = batch
                .par_iter()
                .map(|&i| {
                    let img = store.load_gray(&images.paths[i])?;
                    let pair = make_view_pair(&img, &policy, seed::derive(seed, &[stream::SSL_AUGMENT, epoch as u64, i as u64]))?;
                    Ok((replicate_channels(&pair.v1, config.input_channels), replicate_channels(&pair.v2, config.input_channels)))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = pairs.iter().map(|(a, b)| (a, b)).collect();
            let views = ViewBatch::stack(&refs, config.pixel_mean, config.pixel_std)?;
            let loss = ssl_step(&mut online, &mut target, &views, &mut optimizer, &settings).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {} batch {b}: {msg}", epoch + 1)),
                other => other,
            })?;
            sum.total += loss.total;
            sum.l1 += loss.l1;
            sum.l2 += loss.l2;
        }
        let n = batches.len().max(1) as f64;
        let mean = LossValue { total: sum.total / n, l1: sum.l1 / n, l2: sum.l2 / n };
        info!("ssl epoch {}/{}: loss {:.5}", epoch + 1, config.ssl_epochs, mean.total);
        losses.push(mean);
        checkpoint = ssl_checkpoint(config, epoch + 1, &online, &target, &optimizer, &losses);
        observer.ssl_epoch(epoch + 1, &mean, &checkpoint)?;
    }
    Ok(checkpoint)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub logs: Vec<EpochLog>,
    pub checkpoint: CheckpointEnvelope,
    pub train_images: usize,
}

fn finetune_checkpoint(
    config: &TrainConfig,
    logs: &[EpochLog],
    model: &Classifier<f32>,
    optimizer: &Sgd<f32>,
    train_images: usize,
) -> CheckpointEnvelope {
    let mut blobs = model.parameter_set("");
    blobs.extend_prefixed("optim", optimizer.state());
    let mut env = CheckpointEnvelope::new(Stage::Finetuned, logs.len(), config.clone(), blobs);
    env.meta.epoch_logs = logs.to_vec();
    env.meta.train_images = Some(train_images);
    env
}

/// Forward pass in inference mode over `records`, batched, returning the report.
pub fn evaluate(
    model: &mut Classifier<f32>,
    records: &[(&Path, CxrClass)],
    store: &dyn ImageStore,
    config: &TrainConfig,
) -> Result<EvalReport> {
    let mut logits = ndarray::Array2::zeros((records.len(), model.num_classes()));
    for (chunk_idx, chunk) in records.chunks(config.batch_size).enumerate() {
        let paths: Vec<&Path> = chunk.iter().map(|r| r.0).collect();
        let x = prepare_batch(store, &paths, config)?;
        let (z, _) = model.forward(&x, Mode::Eval)?;
        let at = chunk_idx * config.batch_size;
        logits.slice_mut(ndarray::s![at..at + chunk.len(), ..]).assign(&z);
    }
    let truth: Vec<CxrClass> = records.iter().map(|r| r.1).collect();
    EvalReport::from_logits(&truth, &logits)
}

/// Supervised fine-tuning of the whole classifier on the (subsampled) training
/// split, evaluated on the full test split after every epoch.
pub fn run_finetune(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    init: Option<&CheckpointEnvelope>,
    resume: Option<&CheckpointEnvelope>,
    observer: &mut dyn Observer,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let seed = config.resolved_seed()?;
    match (config.init_mode, init) {
        (InitMode::Scratch, Some(_)) => return Err(Error::Config("init_mode scratch takes no initial weights".into())),
        (mode, None) if mode != InitMode::Scratch => {
            return Err(Error::Config(format!("init_mode {mode} needs an initial backbone checkpoint")))
        }
        _ => {}
    }
    let subset = if config.label_fraction < 1.0 {
        stratified_subsample(manifest, config.label_fraction, seed)?
    } else {
        manifest.clone()
    };
    let train: Vec<(&Path, CxrClass)> = subset.records_in(Split::Train).map(|r| (r.path.as_path(), r.class_label)).collect();
    let test: Vec<(&Path, CxrClass)> = subset.records_in(Split::Test).map(|r| (r.path.as_path(), r.class_label)).collect();
    if train.len() < 2 {
        return Err(Error::Data(format!("fine-tuning needs at least 2 training images, got {}", train.len())));
    }
    if test.is_empty() {
        return Err(Error::Data("manifest has no test split to evaluate on".into()));
    }
    check_disjoint(train.iter().map(|r| r.0), test.iter().map(|r| r.0))?;
    info!("fine-tuning on {} training images, evaluating on {} test images", train.len(), test.len());

    let spec = config.finetune_backbone_spec()?;
    let mut model = attach_classifier(&spec, init, CxrClass::COUNT, seed)?;
    let mut optimizer = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
    let mut logs = Vec::new();
    if let Some(r) = resume {
        check_resumable(r, config, Stage::Finetuned)?;
        model.load_parameter_set("", &r.blobs)?;
        optimizer.set_state(r.component("optim"));
        logs = r.meta.epoch_logs.clone();
        if logs.len() != r.epoch {
            return Err(Error::Checkpoint(format!("{} epoch logs for epoch {}", logs.len(), r.epoch)));
        }
    }
    let mut checkpoint = finetune_checkpoint(config, &logs, &model, &optimizer, train.len());
    for epoch in logs.len()..config.finetune_epochs {
        let batches = epoch_batches(train.len(), config.batch_size, seed, stream::FINETUNE_SHUFFLE, epoch);
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let paths: Vec<&Path> = batch.iter().map(|&i| train[i].0).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].1.index()).collect();
            let x = prepare_batch(store, &paths, config)?;
            model.zero_grad();
            let (logits, cache) = model.forward(&x, Mode::Train)?;
            let (loss, dlogits) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss {loss} at epoch {} batch {b}", epoch + 1)));
            }
            model.backward(&cache, &dlogits);
            optimizer.step(&mut model, "");
            total += loss;
        }
        let eval = evaluate(&mut model, &test, store, config)?;
        let log = EpochLog { epoch: epoch + 1, train_loss: total / batches.len().max(1) as f64, eval };
        info!("fine-tune epoch {}/{}: {}", epoch + 1, config.finetune_epochs, log.to_record());
        logs.push(log);
        checkpoint = finetune_checkpoint(config, &logs, &model, &optimizer, train.len());
        observer.finetune_epoch(logs.last().unwrap(), &checkpoint)?;
    }
    Ok(FinetuneOutcome { logs, checkpoint, train_images: train.len() })
}

/// Mean and population variance of each metric over the last `k` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub k: usize,
    pub loss: MetricStats,
    pub sen: MetricStats,
    pub spe: MetricStats,
    pub hm: MetricStats,
    pub auc: MetricStats,
    pub acc: MetricStats,
}

impl AggregateReport {
    pub fn scalars(&self) -> [(&'static str, MetricStats); 6] {
        [("loss", self.loss), ("sen", self.sen), ("spe", self.spe), ("hm", self.hm), ("auc", self.auc), ("acc", self.acc)]
    }
}

pub fn aggregate_last_k(logs: &[EpochLog], k: usize) -> Result<AggregateReport> {
    if k == 0 || k > logs.len() {
        return Err(Error::InvalidArgument(format!("cannot aggregate the last {k} of {} epochs", logs.len())));
    }
    let window = &logs[logs.len() - k..];
    let stats = |f: &dyn Fn(&EpochLog) -> f64| MetricStats::of(&window.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        k,
        loss: stats(&|l| l.train_loss)?,
        sen: stats(&|l| l.eval.sen)?,
        spe: stats(&|l| l.eval.spe)?,
        hm: stats(&|l| l.eval.hm)?,
        auc: stats(&|l| l.eval.auc)?,
        acc: stats(&|l| l.eval.acc)?,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub ssl: Option<CheckpointEnvelope>,
    pub finetune: FinetuneOutcome,
    pub aggregate: AggregateReport,
}

/// Chains the stages selected by `config.init_mode` on a split manifest.
///
/// `external` is the backbone file for the transfer variants.
pub fn run_experiment(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    external: Option<&CheckpointEnvelope>,
    observer: &mut dyn Observer,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mode = config.init_mode;
    if mode.uses_external_backbone() != external.is_some() {
        return Err(Error::Config(format!(
            "init_mode {mode} {} an external backbone",
            if mode.uses_external_backbone() { "requires" } else { "does not take" }
        )));
    }
    let ssl = if mode.runs_ssl() {
        let mut unlabeled = manifest.unlabeled_train();
        if config.ssl_include_test {
            unlabeled.paths.extend(manifest.records_in(Split::Test).map(|r| r.path.clone()));
        }
        Some(run_ssl_pretraining(config, &unlabeled, store, external, None, observer)?)
    } else {
        None
    };
    let init = ssl.as_ref().or(external);
    let finetune = run_finetune(config, manifest, store, init, None, observer)?;
    let aggregate = aggregate_last_k(&finetune.logs, config.eval_last_k.min(finetune.logs.len()).max(1))?;
    Ok(ExperimentOutcome { ssl, finetune, aggregate })
}

/// The backbone blobs of any checkpoint as standalone weights.
pub fn backbone_weights(env: &CheckpointEnvelope) -> ParameterSet<f32> {
    env.component("backbone")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleRecord;

    fn tiny_config(mode: InitMode) -> TrainConfig {
        TrainConfig {
            ssl_epochs: 2,
            finetune_epochs: 2,
            batch_size: 8,
            mlp_hidden: 16,
            projection_size: 8,
            view_size: 16,
            finetune_size: 16,
            backbone: "conv:4,8".into(),
            input_channels: 1,
            init_mode: mode,
            seed: Some(5),
            ..Default::default()
        }
    }

    /// Each class brightens a different quadrant.
    fn toy_data(per_class: usize, size: usize) -> (DatasetManifest, MemoryStore) {
        let mut store = MemoryStore::default();
        let mut records = Vec::new();
        for c in CxrClass::ALL {
            for i in 0..per_class {
                let path = PathBuf::from(format!("{c}/{i}.png"));
                let (qi, qj) = (c.index() / 2, c.index() % 2);
                let img = Array3::from_shape_fn((1, size, size), |(_, y, x)| {
                    let inside = y * 2 / size == qi && x * 2 / size == qj;
                    let noise = ((i * 31 + y * 7 + x * 13) % 17) as f32 / 170.0;
                    if inside { 0.8 + noise } else { 0.1 + noise }
                });
                store.insert(path.clone(), img);
                records.push(SampleRecord { path, class_label: c, split: Split::Unassigned });
            }
        }
        let m = DatasetManifest { records, ..Default::default() };
        (crate::data::split(&m, 0.75, 1).unwrap(), store)
    }

    #[test]
    fn ssl_smoke_logs_one_finite_loss_per_epoch() {
        let (m, store) = toy_data(2, 16);
        let cfg = tiny_config(InitMode::SslOnly);
        let env = run_ssl_pretraining(&cfg, &m.unlabeled_train(), &store, None, None, &mut ()).unwrap();
        assert_eq!(env.meta.ssl_losses.len(), 2);
        assert!(env.meta.ssl_losses.iter().all(|l| l.total.is_finite()));
        assert_eq!(env.stage, Stage::SslPretrained);
        for prefix in ["backbone", "projector", "predictor", "target", "optim"] {
            assert!(!env.component(prefix).is_empty(), "{prefix}");
        }
    }

    #[test]
    fn ssl_rejects_mismatched_modes() {
        let (m, store) = toy_data(2, 16);
        let u = m.unlabeled_train();
        assert!(run_ssl_pretraining(&tiny_config(InitMode::TransferSsl), &u, &store, None, None, &mut ()).is_err());
        assert!(run_ssl_pretraining(&tiny_config(InitMode::Scratch), &u, &store, None, None, &mut ()).is_err());
    }

    #[test]
    fn separable_toy_problem_is_learned_from_scratch() {
        let (m, store) = toy_data(16, 16);
        let cfg = TrainConfig { finetune_epochs: 30, learning_rate: 0.05, ..tiny_config(InitMode::Scratch) };
        let out = run_finetune(&cfg, &m, &store, None, None, &mut ()).unwrap();
        assert_eq!(out.logs.len(), 30);
        assert!(out.logs.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
        let acc = out.logs.last().unwrap().eval.acc;
        assert!(acc > 0.9, "final accuracy {acc}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (m, store) = toy_data(4, 16);
        let cfg = TrainConfig { ssl_epochs: 3, ..tiny_config(InitMode::SslOnly) };
        let full = run_ssl_pretraining(&cfg, &m.unlabeled_train(), &store, None, None, &mut ()).unwrap();
        let first = run_ssl_pretraining(&TrainConfig { ssl_epochs: 1, ..cfg.clone() }, &m.unlabeled_train(), &store, None, None, &mut ()).unwrap();
        let first = CheckpointEnvelope::from_bytes(&first.to_bytes().unwrap()).unwrap();
        let resumed = run_ssl_pretraining(&cfg, &m.unlabeled_train(), &store, None, Some(&first), &mut ()).unwrap();
        assert_eq!(resumed.to_bytes().unwrap(), full.to_bytes().unwrap());
    }

    #[test]
    fn aggregate_examples() {
        let report = EvalReport::new(&[CxrClass::Covid, CxrClass::Normal], &[CxrClass::Covid, CxrClass::Normal], &[0.9, 0.1]).unwrap();
        let log = |epoch, acc| EpochLog { epoch, train_loss: 0.5, eval: EvalReport { acc, ..report.clone() } };
        let logs: Vec<_> = (1..=12).map(|e| log(e, 0.9)).collect();
        let a = aggregate_last_k(&logs, 10).unwrap();
        assert!((a.acc.mean - 0.9).abs() < 1e-12 && a.acc.variance.abs() < 1e-15);
        let a = aggregate_last_k(&[log(1, 0.0), log(2, 1.0)], 2).unwrap();
        assert_eq!((a.acc.mean, a.acc.variance), (0.5, 0.25));
        assert!(aggregate_last_k(&logs, 13).is_err());
    }

    #[test]
    fn epoch_record_is_flat() {
        let report = EvalReport::new(&[CxrClass::Normal], &[CxrClass::Normal], &[0.1]).unwrap();
        let line = EpochLog { epoch: 3, train_loss: 0.25, eval: report }.to_record();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["epoch"], 3);
        assert_eq!(v["loss"], 0.25);
        assert!(v["sen"].is_null());
        assert_eq!(v["acc"], 1.0);
    }
}
