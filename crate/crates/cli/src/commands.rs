//! One function per subcommand. Each returns the JSON summary printed on
//! stdout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mint_core::aad::{batch_extract, AuditableDataKind, FeatureStore};
use mint_core::audit::{save_registry_manifest, AuditRegistry, RegistryClassifierEntry, RegistryManifest, RegistryModelEntry, REGISTRY_VERSION};
use mint_core::audited::{build_toy_audited_model, train_audited, AuditedModel, AuditedSidecar, TapConfig};
use mint_core::cache::{load_store, save_store};
use mint_core::classifier::{build_classifier, train_mint, MintArchitecture};
use mint_core::data::{
    generate_synthetic_dataset, ingest_image_dir, load_dataset, plan_split_ids, save_dataset, DatasetPartition,
    Partition, Sample,
};
use mint_core::harness::{compute_accuracy, emit_report, run_grid, untrained_control_features, GridReport, ReportFormat, RunContext};
use nnkit::RandomStream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cli::{EvaluateArgs, ExtractArgs, GenDataArgs, ReportArgs, TrainAuditedArgs, TrainMintArgs};
use crate::config::{IngestConfig, PipelineConfig};
use crate::error::CliError;
use crate::layout::{require, Layout};

const PROGRESS_EVERY: usize = 2000;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    require(path)?;
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        CliError::Core(mint_core::MintError::Artifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    })
}

fn short_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn gen_data(cfg: &mut PipelineConfig, args: &GenDataArgs, layout: &Layout) -> Result<Value, CliError> {
    if let Some(n) = args.samples_per_class {
        cfg.data.samples_per_class = n;
    }
    if let Some(n) = args.external_count {
        cfg.data.external_count = n;
    }
    if let Some(n) = args.image_size {
        cfg.data.image_size = n;
    }
    if let (Some(m), Some(e)) = (&args.members_dir, &args.externals_dir) {
        cfg.ingest = Some(IngestConfig {
            members_dir: m.clone(),
            externals_dir: e.clone(),
            preprocess: cfg.preprocess(),
        });
    }
    let start = Instant::now();
    let (partition, skipped) = match &cfg.ingest {
        None => (generate_synthetic_dataset(&cfg.data)?, Vec::new()),
        Some(ingest) => ingest_dirs(ingest)?,
    };
    let synthetic = cfg.ingest.is_none().then_some(&cfg.data);
    let manifest = save_dataset(&partition, synthetic, layout.data_dir())?;
    write_json(&layout.resolved_config(), cfg)?;
    Ok(json!({
        "command": "gen-data",
        "dataset_digest": manifest.dataset_digest,
        "members": manifest.member_count,
        "externals": manifest.external_count,
        "skipped": skipped,
        "path": layout.data_dir(),
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

/// Members take their class from the first directory under the root.
fn ingest_dirs(ingest: &IngestConfig) -> Result<(DatasetPartition, Vec<String>), CliError> {
    require(&ingest.members_dir)?;
    require(&ingest.externals_dir)?;
    let members = ingest_image_dir(&ingest.members_dir, Partition::Member, &ingest.preprocess, "members")?;
    let externals = ingest_image_dir(&ingest.externals_dir, Partition::External, &ingest.preprocess, "externals")?;
    let class_of = |id: &str| id.split_once('/').map_or("", |(c, _)| c).to_string();
    let classes: Vec<String> = {
        let mut c: Vec<String> = members.samples.iter().map(|s| class_of(&s.id)).collect();
        c.sort();
        c.dedup();
        c
    };
    let relabel = |s: Sample, prefix: &str| Sample {
        id: format!("{prefix}/{}", s.id),
        ..s
    };
    let member_samples = members
        .samples
        .into_iter()
        .map(|s| {
            let label = classes.binary_search(&class_of(&s.id)).expect("class collected");
            Sample {
                class_label: Some(label),
                ..relabel(s, "members")
            }
        })
        .collect();
    let external_samples = externals.samples.into_iter().map(|s| relabel(s, "externals")).collect();
    let skipped = members
        .skipped
        .iter()
        .map(|(p, _)| format!("members/{p}"))
        .chain(externals.skipped.iter().map(|(p, _)| format!("externals/{p}")))
        .collect();
    Ok((DatasetPartition::new(member_samples, external_samples)?, skipped))
}

pub fn train_audited_cmd(cfg: &mut PipelineConfig, args: &TrainAuditedArgs, layout: &Layout) -> Result<Value, CliError> {
    if let Some(n) = args.epochs {
        cfg.audited.train.epochs = n;
    }
    if let Some(lr) = args.learning_rate {
        cfg.audited.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.audited.train.batch_size = b;
    }
    require(&layout.dataset_manifest())?;
    require(&layout.dataset_images())?;
    let start = Instant::now();
    let (partition, _) = load_dataset(layout.data_dir())?;
    let members = partition.members();
    let n_classes = members.iter().filter_map(|s| s.class_label).max().map_or(0, |m| m + 1);
    let preprocess = match members.first().map(|s| s.image.shape().to_vec()).as_deref() {
        Some(&[c, h, _]) => mint_core::data::Preprocess { size: h, channels: c },
        _ => return Err(CliError::Config("dataset has no member images".into())),
    };
    let model = build_toy_audited_model(
        cfg.audited.channels,
        cfg.audited.embedding_dim,
        n_classes.max(2),
        preprocess,
        cfg.audited_init_seed(),
    )?;
    let (model, metrics) = train_audited(model, members, &cfg.audited.train)?;
    fs::create_dir_all(layout.model_dir())?;
    let sidecar = model.save(layout.model_checkpoint(), layout.model_sidecar())?;
    write_json(&layout.model_metrics(), &metrics)?;
    write_json(&layout.resolved_config(), cfg)?;
    Ok(json!({
        "command": "train-audited",
        "architecture_id": sidecar.architecture_id,
        "checkpoint_sha256": sidecar.checkpoint_sha256,
        "untrained_accuracy": metrics.untrained_accuracy,
        "final_train_accuracy": metrics.final_train_accuracy,
        "final_train_loss": metrics.final_train_loss,
        "path": layout.model_checkpoint(),
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn load_audited(layout: &Layout) -> Result<AuditedModel, CliError> {
    require(&layout.model_checkpoint())?;
    require(&layout.model_sidecar())?;
    Ok(AuditedModel::load(layout.model_checkpoint(), layout.model_sidecar())?.detach_head()?)
}

pub fn extract(cfg: &mut PipelineConfig, args: &ExtractArgs, layout: &Layout) -> Result<Value, CliError> {
    if let Some(taps) = &args.taps {
        cfg.taps = TapConfig::new(taps.iter().copied())?;
    }
    if args.normalize_outcome {
        cfg.features.normalize_outcome = true;
    }
    cfg.grid.feature_options = cfg.features;
    let model = load_audited(layout)?;
    require(&layout.dataset_manifest())?;
    let start = Instant::now();
    let (partition, manifest) = load_dataset(layout.data_dir())?;
    let extraction = batch_extract(&model, partition.iter().cloned().map(Ok), &cfg.taps, PROGRESS_EVERY);
    let store = FeatureStore::from_records(&extraction.records, cfg.features);
    if layout.features_dir().exists() {
        fs::remove_dir_all(layout.features_dir())?;
    }
    save_store(&store, layout.features_dir())?;
    let control = match &manifest.config {
        Some(data) => {
            let control = untrained_control_features(&model, data, cfg.control_model_seed(), cfg.features)?;
            save_store(&control, layout.control_dir())?;
            true
        }
        None => {
            log::warn!("ingested data has no identically distributed pool; skipping the untrained-model control");
            false
        }
    };
    write_json(&layout.resolved_config(), cfg)?;
    let sets: Vec<Value> = store
        .sets()
        .map(|s| json!({"auditable_data": s.kind(), "form": s.form(), "shape": s.shape(), "records": s.len()}))
        .collect();
    let unavailable: Vec<Value> = store
        .unavailable()
        .iter()
        .map(|((k, f), r)| json!({"auditable_data": k, "form": f, "reason": r}))
        .collect();
    Ok(json!({
        "command": "extract",
        "records": extraction.records.len(),
        "skipped": extraction.skipped.iter().map(|s| &s.sample_id).collect::<Vec<_>>(),
        "sets": sets,
        "unavailable": unavailable,
        "untrained_control": control,
        "path": layout.features_dir(),
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierMetrics {
    architecture: MintArchitecture,
    auditable_data: AuditableDataKind,
    train_size: usize,
    held_out: usize,
    held_out_accuracy: f64,
    final_train_accuracy: f64,
}

pub fn train_mint_cmd(cfg: &mut PipelineConfig, args: &TrainMintArgs, layout: &Layout) -> Result<Value, CliError> {
    if let Some(k) = &args.kinds {
        cfg.mint.kinds = k.clone();
    }
    if let Some(a) = &args.architectures {
        cfg.mint.architectures = a.clone();
    }
    if let Some(n) = args.train_size {
        cfg.mint.train_size = n;
    }
    if let Some(n) = args.epochs {
        cfg.mint.train.epochs = n;
    }
    if let Some(t) = args.threshold {
        cfg.mint.threshold = t;
    }
    let model = load_audited(layout)?;
    require(&layout.features_index())?;
    let start = Instant::now();
    let store = load_store(layout.features_dir())?;
    let pool = store
        .sets()
        .next()
        .ok_or_else(|| CliError::Config("feature store is empty".into()))?;
    let plan = plan_split_ids(
        &pool.member_ids(),
        &pool.external_ids(),
        cfg.mint.train_size,
        cfg.grid.test_size,
        cfg.mint_split_seed(),
    )?;
    fs::create_dir_all(layout.mint_dir())?;
    let mut entries = Vec::new();
    let mut metrics = Vec::new();
    let mut skipped = Vec::new();
    for &arch in &cfg.mint.architectures {
        for &kind in &cfg.mint.kinds {
            let set = match store.get(kind, arch.form()) {
                Ok(s) if arch.supports(kind) => s,
                Ok(_) => {
                    skipped.push(json!({"architecture": arch, "auditable_data": kind, "reason": "unsupported combination"}));
                    continue;
                }
                Err(e) => {
                    skipped.push(json!({"architecture": arch, "auditable_data": kind, "reason": e.to_string()}));
                    continue;
                }
            };
            let stream = RandomStream::new(cfg.mint.train.seed).derive_named(&format!("{arch}-{kind}"));
            let clf = match build_classifier(arch, kind, set.shape(), stream.derive_named("init").key()) {
                Ok(c) => c,
                Err(e) => {
                    skipped.push(json!({"architecture": arch, "auditable_data": kind, "reason": e.to_string()}));
                    continue;
                }
            };
            let train = set.select(&plan.mint_train)?;
            let held_out = set.select(&plan.mint_test)?;
            let config = nnkit::TrainConfig {
                seed: stream.derive_named("train").key(),
                ..cfg.mint.train
            };
            log::info!("training {arch} MINT on {kind} ({} samples)", train.len());
            let (clf, m) = train_mint(clf, &train, &config)?;
            let clf = clf.with_threshold(cfg.mint.threshold)?.with_feature_options(store.options());
            let labels: Vec<Partition> = held_out.items().iter().map(|i| i.membership).collect();
            let accuracy = compute_accuracy(&clf.predict_set(&held_out)?, &labels)?;
            let stem = format!("{arch}-{}", kind.slug());
            clf.save(
                layout.mint_dir().join(format!("{stem}.mintnn")),
                layout.mint_dir().join(format!("{stem}.json")),
            )?;
            entries.push(RegistryClassifierEntry {
                auditable_data: kind,
                architecture: arch,
                checkpoint: PathBuf::from(format!("{stem}.mintnn")),
                sidecar: PathBuf::from(format!("{stem}.json")),
            });
            metrics.push(ClassifierMetrics {
                architecture: arch,
                auditable_data: kind,
                train_size: train.len(),
                held_out: held_out.len(),
                held_out_accuracy: accuracy,
                final_train_accuracy: m.final_train_accuracy,
            });
        }
    }
    if entries.is_empty() {
        return Err(CliError::Config("no legal (architecture, auditable data) combination to train".into()));
    }
    let manifest = RegistryManifest {
        version: REGISTRY_VERSION,
        models: vec![RegistryModelEntry {
            model_id: model.architecture_id().to_string(),
            checkpoint: PathBuf::from("../model/audited.mintnn"),
            sidecar: PathBuf::from("../model/audited.json"),
            taps: cfg.taps.clone(),
            classifiers: entries,
        }],
    };
    save_registry_manifest(&manifest, layout.registry())?;
    AuditRegistry::load(layout.registry())?;
    write_json(&layout.mint_metrics(), &metrics)?;
    write_json(&layout.resolved_config(), cfg)?;
    Ok(json!({
        "command": "train-mint",
        "registry": layout.registry(),
        "classifiers": metrics,
        "skipped": skipped,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

pub fn evaluate(cfg: &mut PipelineConfig, args: &EvaluateArgs, layout: &Layout) -> Result<Value, CliError> {
    let grid = &mut cfg.grid;
    if let Some(k) = &args.kinds {
        grid.kinds = k.clone();
    }
    if let Some(a) = &args.architectures {
        grid.architectures = a.clone();
    }
    if let Some(s) = &args.train_sizes {
        grid.train_sizes = s.clone();
    }
    if let Some(r) = args.repetitions {
        grid.repetitions = r;
    }
    if let Some(t) = args.test_size {
        grid.test_size = t;
    }
    if let Some(e) = args.epochs {
        grid.train_config.epochs = e;
    }
    grid.feature_options = cfg.features;
    require(&layout.registry())?;
    require(&layout.features_index())?;
    let sidecar: AuditedSidecar = read_json(&layout.model_sidecar())?;
    let dataset: mint_core::data::DatasetManifest = read_json(&layout.dataset_manifest())?;
    let start = Instant::now();
    let features = load_store(layout.features_dir())?;
    let untrained = if args.skip_untrained_control || !layout.control_dir().exists() {
        None
    } else {
        Some(load_store(layout.control_dir())?)
    };
    let run_id = match &args.run_id {
        Some(id) => id.clone(),
        None => {
            let key = serde_json::to_vec(&(&cfg.grid, &dataset.dataset_digest, &sidecar.checkpoint_sha256))?;
            format!("run-{}", short_hex(&key))
        }
    };
    let context = RunContext {
        run_id: run_id.clone(),
        dataset_digest: dataset.dataset_digest,
        audited_model: format!("{}@{}", sidecar.architecture_id, sidecar.checkpoint_sha256),
    };
    let report = run_grid(&cfg.grid, &features, untrained.as_ref(), context)?;
    fs::create_dir_all(layout.reports_dir())?;
    let mut written = Vec::new();
    for format in [ReportFormat::Markdown, ReportFormat::Csv, ReportFormat::Json] {
        let path = layout.report(&run_id, format);
        fs::write(&path, emit_report(&report, format)?)?;
        written.push(path);
    }
    write_json(&layout.resolved_config(), cfg)?;
    Ok(json!({
        "command": "evaluate",
        "run_id": run_id,
        "reports": written,
        "cells": summarize_cells(&report),
        "controls": report.controls,
        "excluded": report.excluded.len(),
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn summarize_cells(report: &GridReport) -> BTreeMap<String, Option<f64>> {
    let mut out = BTreeMap::new();
    for t in &report.tables {
        for r in &t.rows {
            for c in &r.cells {
                out.insert(
                    format!("{}/{}/{}", t.architecture, r.auditable_data, c.train_size),
                    c.outcome.mean(),
                );
            }
        }
    }
    out
}

/// Loads `<out>/reports/<run>.run.json`, or `run` itself when it is a path.
pub fn load_run(run: &str, layout: &Layout) -> Result<GridReport, CliError> {
    let direct = Path::new(run);
    let path = if direct.extension().is_some_and(|e| e == "json") {
        direct.to_path_buf()
    } else {
        layout.report(run, ReportFormat::Json)
    };
    read_json(&path)
}

pub fn report(args: &ReportArgs, layout: &Layout) -> Result<String, CliError> {
    let format: ReportFormat = args.format.parse()?;
    let run = load_run(&args.run, layout)?;
    Ok(emit_report(&run, format)?)
}
