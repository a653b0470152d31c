//! Experiment grid over auditable-data kind x MINT train size x
//! architecture, with accuracy tables, controls and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use nnkit::{RandomStream, TrainConfig};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aad::{batch_extract, AuditableDataKind, FeatureOptions, FeatureSet, FeatureStore, LabeledFeatures};
use crate::audited::{build_toy_audited_model, AuditedModel, TapConfig};
use crate::classifier::{
    build_classifier, default_mint_train_config, feature_set_digest, train_mint, MembershipScore, MintArchitecture,
};
use crate::data::{generate_synthetic_dataset, plan_split_ids, Partition, SyntheticDataConfig};
use crate::{MintError, Result};

pub const DEFAULT_TRAIN_SIZES: [usize; 3] = [250, 1000, 2000];
pub const DEFAULT_TEST_SIZE: usize = 1000;
pub const DEFAULT_REPETITIONS: usize = 3;
pub const REFERENCE_LABEL: &str = "full-scale reference, not reproduced";
pub const REFERENCE_COLUMNS: [&str; 3] = ["1K", "50K", "100K"];

/// Published full-scale Vanilla MINT accuracies.
pub const REFERENCE_VANILLA: [(AuditableDataKind, [f64; 3]); 6] = [
    (AuditableDataKind::ConvLayer(1), [0.62, 0.80, 0.80]),
    (AuditableDataKind::ConvLayer(2), [0.56, 0.67, 0.68]),
    (AuditableDataKind::ConvLayer(3), [0.56, 0.58, 0.59]),
    (AuditableDataKind::ConvLayer(4), [0.73, 0.76, 0.76]),
    (AuditableDataKind::ModelOutcome, [0.67, 0.78, 0.78]),
    (AuditableDataKind::AllConvLayers, [0.76, 0.82, 0.84]),
];

/// Published full-scale CNN MINT accuracies.
pub const REFERENCE_CNN: [(AuditableDataKind, [f64; 3]); 4] = [
    (AuditableDataKind::ConvLayer(1), [0.88, 0.89, 0.89]),
    (AuditableDataKind::ConvLayer(2), [0.85, 0.86, 0.86]),
    (AuditableDataKind::ConvLayer(3), [0.68, 0.71, 0.75]),
    (AuditableDataKind::ConvLayer(4), [0.68, 0.70, 0.74]),
];

pub fn reference_table(architecture: MintArchitecture) -> &'static [(AuditableDataKind, [f64; 3])] {
    match architecture {
        MintArchitecture::Vanilla => &REFERENCE_VANILLA,
        MintArchitecture::Cnn => &REFERENCE_CNN,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub kinds: Vec<AuditableDataKind>,
    /// Total (balanced) MINT training-set sizes.
    pub train_sizes: Vec<usize>,
    pub architectures: Vec<MintArchitecture>,
    pub repetitions: usize,
    pub seed: u64,
    /// Size of the held-out test split shared by every cell.
    pub test_size: usize,
    /// Training size used by the controls; clipped to the largest grid size.
    pub control_train_size: usize,
    pub train_config: TrainConfig,
    pub feature_options: FeatureOptions,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            kinds: AuditableDataKind::TABLE_ORDER.to_vec(),
            train_sizes: DEFAULT_TRAIN_SIZES.to_vec(),
            architectures: vec![MintArchitecture::Vanilla, MintArchitecture::Cnn],
            repetitions: DEFAULT_REPETITIONS,
            seed: 0,
            test_size: DEFAULT_TEST_SIZE,
            control_train_size: 1000,
            train_config: default_mint_train_config(),
            feature_options: FeatureOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedRow {
    pub architecture: MintArchitecture,
    pub auditable_data: AuditableDataKind,
    pub reason: String,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.architectures.is_empty() {
            return Err(MintError::Config("grid needs at least one kind and one architecture".into()));
        }
        if self.train_sizes.is_empty() || self.train_sizes.contains(&0) || self.train_sizes.contains(&1) {
            return Err(MintError::Config(format!(
                "train sizes must be at least 2, got {:?}",
                self.train_sizes
            )));
        }
        if self.repetitions == 0 {
            return Err(MintError::Config("repetitions must be positive".into()));
        }
        if self.test_size < 2 {
            return Err(MintError::Config("test_size must be at least 2".into()));
        }
        self.train_config
            .validate()
            .map_err(|e| MintError::Config(e.to_string()))
    }

    /// Rows each architecture will run, plus the excluded combinations.
    /// `shapes` maps kinds to per-sample map shapes, used to drop taps too
    /// small for the CNN.
    pub fn plan_rows(
        &self,
        shapes: &BTreeMap<AuditableDataKind, Vec<usize>>,
    ) -> (Vec<(MintArchitecture, Vec<AuditableDataKind>)>, Vec<ExcludedRow>) {
        let mut rows = Vec::new();
        let mut excluded = Vec::new();
        let mut kinds = self.kinds.clone();
        kinds.sort_by_key(|k| AuditableDataKind::TABLE_ORDER.iter().position(|t| t == k));
        kinds.dedup();
        for &arch in &self.architectures {
            let mut legal = Vec::new();
            for &kind in &kinds {
                let reason = if !arch.supports(kind) {
                    Some(match kind {
                        AuditableDataKind::ModelOutcome => "CNN MINT cannot be applied to the output vector".to_string(),
                        _ => "tap resolutions differ, so map-form concatenation is impractical".to_string(),
                    })
                } else if arch == MintArchitecture::Cnn {
                    match shapes.get(&kind) {
                        Some(s) => build_classifier(arch, kind, s, 0).err().map(|e| e.to_string()),
                        None => Some("no map shape available for this tap".into()),
                    }
                } else {
                    None
                };
                match reason {
                    Some(reason) => excluded.push(ExcludedRow {
                        architecture: arch,
                        auditable_data: kind,
                        reason,
                    }),
                    None => legal.push(kind),
                }
            }
            rows.push((arch, legal));
        }
        (rows, excluded)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub split_seed: u64,
    pub init_seed: u64,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok {
        mean: f64,
        /// Largest absolute deviation of a repetition from the mean.
        spread: f64,
        repetitions: Vec<RepetitionResult>,
    },
    Failed {
        reason: String,
    },
}

impl CellOutcome {
    pub fn mean(&self) -> Option<f64> {
        match self {
            CellOutcome::Ok { mean, .. } => Some(*mean),
            CellOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub train_size: usize,
    pub outcome: CellOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub auditable_data: AuditableDataKind,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub architecture: MintArchitecture,
    pub train_sizes: Vec<usize>,
    pub rows: Vec<TableRow>,
}

impl AccuracyTable {
    pub fn cell(&self, kind: AuditableDataKind, train_size: usize) -> Option<&Cell> {
        self.rows
            .iter()
            .find(|r| r.auditable_data == kind)?
            .cells
            .iter()
            .find(|c| c.train_size == train_size)
    }

    pub fn cell_count(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).sum()
    }

    /// Row with the highest mean over its successful cells.
    pub fn best_row(&self) -> Option<AuditableDataKind> {
        best_of(self.rows.iter().filter_map(|r| {
            let means: Vec<f64> = r.cells.iter().filter_map(|c| c.outcome.mean()).collect();
            (!means.is_empty()).then(|| (r.auditable_data, means.iter().sum::<f64>() / means.len() as f64))
        }))
    }
}

fn best_of(rows: impl Iterator<Item = (AuditableDataKind, f64)>) -> Option<AuditableDataKind> {
    let mut best: Option<(AuditableDataKind, f64)> = None;
    for (k, v) in rows {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlResult {
    pub architecture: MintArchitecture,
    pub auditable_data: AuditableDataKind,
    pub train_size: usize,
    /// Test accuracy after training on permuted membership labels.
    pub shuffled_label_accuracy: f64,
    /// Test accuracy on features of a never-trained audited model over
    /// identically distributed D and E; `None` when not run.
    pub untrained_model_accuracy: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub run_id: String,
    pub dataset_digest: String,
    pub audited_model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBlock {
    pub label: String,
    pub architecture: MintArchitecture,
    pub columns: Vec<String>,
    pub rows: Vec<(AuditableDataKind, Vec<f64>)>,
}

impl ReferenceBlock {
    pub fn of(architecture: MintArchitecture) -> Self {
        Self {
            label: REFERENCE_LABEL.into(),
            architecture,
            columns: REFERENCE_COLUMNS.iter().map(|s| s.to_string()).collect(),
            rows: reference_table(architecture)
                .iter()
                .map(|(k, v)| (*k, v.to_vec()))
                .collect(),
        }
    }
}

/// Everything a run produces; serialized as `<run-id>.run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub context: RunContext,
    pub grid: ExperimentGrid,
    pub test_split: Vec<String>,
    /// Digest of the full feature set per kind and form.
    pub feature_digests: BTreeMap<String, String>,
    pub tables: Vec<AccuracyTable>,
    pub excluded: Vec<ExcludedRow>,
    pub controls: Vec<ControlResult>,
    pub reference: Vec<ReferenceBlock>,
}

impl GridReport {
    pub fn table(&self, architecture: MintArchitecture) -> Option<&AccuracyTable> {
        self.tables.iter().find(|t| t.architecture == architecture)
    }

    pub fn control(&self, architecture: MintArchitecture) -> Option<&ControlResult> {
        self.controls.iter().find(|c| c.architecture == architecture)
    }
}

/// Fraction of decisions that match the labels.
pub fn compute_accuracy(scores: &[MembershipScore], labels: &[Partition]) -> Result<f64> {
    if scores.is_empty() {
        return Err(MintError::Empty("no scores to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(MintError::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let hits = scores.iter().zip(labels).filter(|(s, l)| s.decision == **l).count();
    Ok(hits as f64 / scores.len() as f64)
}

fn mean_and_spread(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let spread = values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    (mean, spread)
}

/// Seeds of repetition `rep` at `train_size`: shared by every row so rows
/// at the same coordinates see the same split.
fn repetition_seeds(grid_seed: u64, train_size: usize, rep: usize) -> (u64, u64) {
    let s = RandomStream::new(grid_seed)
        .derive_named("cell")
        .derive(train_size as u64)
        .derive(rep as u64);
    (s.derive_named("split").key(), s.derive_named("init").key())
}

struct Pools {
    members: Vec<String>,
    externals: Vec<String>,
    test: Vec<String>,
}

fn split_pools(ids: &FeatureSet, grid: &ExperimentGrid) -> Result<Pools> {
    let mut members = ids.member_ids();
    let mut externals = ids.external_ids();
    let test_seed = RandomStream::new(grid.seed).derive_named("test-split").key();
    let test = plan_split_ids(&members, &externals, 0, grid.test_size, test_seed)?.mint_test;
    let held: std::collections::HashSet<&str> = test.iter().map(String::as_str).collect();
    members.retain(|id| !held.contains(id.as_str()));
    externals.retain(|id| !held.contains(id.as_str()));
    let largest = grid.train_sizes.iter().copied().max().unwrap_or(0);
    let (need_m, need_e) = (largest.div_ceil(2), largest / 2);
    if need_m > members.len() || need_e > externals.len() {
        return Err(MintError::InsufficientSamples {
            need_member: need_m + grid.test_size.div_ceil(2),
            need_external: need_e + grid.test_size / 2,
            have_member: members.len() + grid.test_size.div_ceil(2),
            have_external: externals.len() + grid.test_size / 2,
        });
    }
    Ok(Pools {
        members,
        externals,
        test,
    })
}

fn train_and_score(
    arch: MintArchitecture,
    train: &FeatureSet,
    test: &FeatureSet,
    config: &TrainConfig,
    init_seed: u64,
) -> Result<(f64, f64, f64)> {
    let classifier = build_classifier(arch, train.kind(), train.shape(), init_seed)?;
    let config = TrainConfig {
        seed: init_seed,
        ..*config
    };
    let (classifier, metrics) = train_mint(classifier, train, &config)?;
    let scores = classifier.predict_set(test)?;
    let labels: Vec<Partition> = test.items().iter().map(|i| i.membership).collect();
    Ok((
        compute_accuracy(&scores, &labels)?,
        metrics.final_train_accuracy,
        metrics.final_train_loss,
    ))
}

fn run_cell(
    grid: &ExperimentGrid,
    arch: MintArchitecture,
    full: &FeatureSet,
    test: &FeatureSet,
    pools: &Pools,
    train_size: usize,
) -> CellOutcome {
    let mut reps = Vec::with_capacity(grid.repetitions);
    for rep in 0..grid.repetitions {
        let (split_seed, init_seed) = repetition_seeds(grid.seed, train_size, rep);
        let result = plan_split_ids(&pools.members, &pools.externals, train_size, 0, split_seed)
            .and_then(|plan| full.select(&plan.mint_train))
            .and_then(|train| train_and_score(arch, &train, test, &grid.train_config, init_seed));
        match result {
            Ok((test_accuracy, train_accuracy, train_loss)) => reps.push(RepetitionResult {
                split_seed,
                init_seed,
                test_accuracy,
                train_accuracy,
                train_loss,
            }),
            Err(e) => {
                log::warn!("{arch} {} n={train_size} rep {rep} failed: {e}", full.kind());
                return CellOutcome::Failed {
                    reason: format!("repetition {rep}: {e}"),
                };
            }
        }
    }
    let accs: Vec<f64> = reps.iter().map(|r| r.test_accuracy).collect();
    let (mean, spread) = mean_and_spread(&accs);
    log::info!("{arch} {} n={train_size}: {mean:.3} ± {spread:.3}", full.kind());
    CellOutcome::Ok {
        mean,
        spread,
        repetitions: reps,
    }
}

/// Permutes membership labels among the items of a training set.
fn shuffle_labels(set: &FeatureSet, seed: u64) -> Result<FeatureSet> {
    let mut labels: Vec<Partition> = set.items().iter().map(|i| i.membership).collect();
    labels.shuffle(&mut RandomStream::new(seed).derive_named("label-shuffle").rng());
    let items: Vec<LabeledFeatures> = set
        .items()
        .iter()
        .zip(labels)
        .map(|(i, membership)| LabeledFeatures {
            membership,
            ..i.clone()
        })
        .collect();
    FeatureSet::new(set.kind(), set.form(), set.shape().to_vec(), items)
}

fn control_kind(arch: MintArchitecture, rows: &[AuditableDataKind]) -> Option<AuditableDataKind> {
    match arch {
        MintArchitecture::Vanilla if rows.contains(&AuditableDataKind::AllConvLayers) => {
            Some(AuditableDataKind::AllConvLayers)
        }
        _ => rows.first().copied(),
    }
}

/// Accuracy of one fresh classifier trained on part of `full` with a
/// train/test split drawn from `seed`.
pub fn single_run_accuracy(
    full: &FeatureSet,
    arch: MintArchitecture,
    train_size: usize,
    test_size: usize,
    config: &TrainConfig,
    seed: u64,
    shuffle: bool,
) -> Result<f64> {
    let plan = plan_split_ids(&full.member_ids(), &full.external_ids(), train_size, test_size, seed)?;
    let mut train = full.select(&plan.mint_train)?;
    if shuffle {
        train = shuffle_labels(&train, seed)?;
    }
    let test = full.select(&plan.mint_test)?;
    let init = RandomStream::new(seed).derive_named("init").key();
    Ok(train_and_score(arch, &train, &test, config, init)?.0)
}

/// Runs every legal cell of `grid` over `features` and the controls.
/// `untrained` holds features of a never-trained audited model on
/// identically distributed D and E; pass `None` to skip that control.
pub fn run_grid(
    grid: &ExperimentGrid,
    features: &FeatureStore,
    untrained: Option<&FeatureStore>,
    context: RunContext,
) -> Result<GridReport> {
    grid.validate()?;
    if features.options() != grid.feature_options {
        return Err(MintError::Config(format!(
            "features were extracted with {:?} but the grid asks for {:?}",
            features.options(),
            grid.feature_options
        )));
    }
    let reference_set = features
        .sets()
        .next()
        .ok_or_else(|| MintError::Empty("no feature sets to evaluate".into()))?;
    let pools = split_pools(reference_set, grid)?;
    let shapes = features.map_shapes();
    let (plan, excluded) = grid.plan_rows(&shapes);
    for e in &excluded {
        log::info!("excluded {} x {}: {}", e.architecture, e.auditable_data, e.reason);
    }
    let control_size = grid
        .control_train_size
        .min(grid.train_sizes.iter().copied().max().unwrap_or(0));

    let mut tables = Vec::new();
    let mut controls = Vec::new();
    let mut feature_digests = BTreeMap::new();
    for (arch, kinds) in plan {
        let mut rows = Vec::with_capacity(kinds.len());
        for &kind in &kinds {
            let full = match features.get(kind, arch.form()) {
                Ok(f) => f,
                Err(e) => {
                    let reason = e.to_string();
                    rows.push(TableRow {
                        auditable_data: kind,
                        cells: grid
                            .train_sizes
                            .iter()
                            .map(|&train_size| Cell {
                                train_size,
                                outcome: CellOutcome::Failed { reason: reason.clone() },
                            })
                            .collect(),
                    });
                    continue;
                }
            };
            feature_digests.insert(format!("{arch}/{}", kind.slug()), feature_set_digest(full));
            let test = match full.select(&pools.test) {
                Ok(t) => t,
                Err(e) => {
                    let reason = e.to_string();
                    rows.push(TableRow {
                        auditable_data: kind,
                        cells: grid
                            .train_sizes
                            .iter()
                            .map(|&train_size| Cell {
                                train_size,
                                outcome: CellOutcome::Failed { reason: reason.clone() },
                            })
                            .collect(),
                    });
                    continue;
                }
            };
            let cells = grid
                .train_sizes
                .par_iter()
                .map(|&train_size| Cell {
                    train_size,
                    outcome: run_cell(grid, arch, full, &test, &pools, train_size),
                })
                .collect();
            rows.push(TableRow {
                auditable_data: kind,
                cells,
            });
        }
        if let Some(kind) = control_kind(arch, &kinds) {
            let seed = RandomStream::new(grid.seed).derive_named("control").key();
            let shuffled = features
                .get(kind, arch.form())
                .and_then(|full| {
                    let plan = plan_split_ids(&pools.members, &pools.externals, control_size, 0, seed)?;
                    let train = shuffle_labels(&full.select(&plan.mint_train)?, seed)?;
                    let test = full.select(&pools.test)?;
                    Ok(train_and_score(arch, &train, &test, &grid.train_config, seed)?.0)
                })?;
            let (untrained, note) = match untrained {
                Some(u) => (
                    Some(single_run_accuracy(
                        u.get(kind, arch.form())?,
                        arch,
                        control_size,
                        grid.test_size,
                        &grid.train_config,
                        seed,
                        false,
                    )?),
                    None,
                ),
                None => (None, Some("untrained-model control not run".to_string())),
            };
            log::info!("{arch} controls: shuffled {shuffled:.3}, untrained {untrained:?}");
            controls.push(ControlResult {
                architecture: arch,
                auditable_data: kind,
                train_size: control_size,
                shuffled_label_accuracy: shuffled,
                untrained_model_accuracy: untrained,
                note,
            });
        }
        tables.push(AccuracyTable {
            architecture: arch,
            train_sizes: grid.train_sizes.clone(),
            rows,
        });
    }
    let reference = tables.iter().map(|t| ReferenceBlock::of(t.architecture)).collect();
    Ok(GridReport {
        context,
        grid: grid.clone(),
        test_split: pools.test,
        feature_digests,
        tables,
        excluded,
        controls,
        reference,
    })
}

/// Features for the untrained-model control: a fresh model with the same
/// architecture (never trained) over a dataset whose external side has zero
/// offset and its own seed, so D and E are identically distributed.
pub fn untrained_control_features(
    like: &AuditedModel,
    data: &SyntheticDataConfig,
    model_seed: u64,
    options: FeatureOptions,
) -> Result<FeatureStore> {
    let config = SyntheticDataConfig {
        external_offsets: vec![0.0],
        external_seed: Some(RandomStream::new(data.seed).derive_named("control-external").key()),
        ..data.clone()
    };
    let partition = generate_synthetic_dataset(&config)?;
    let model = build_toy_audited_model(
        like.channels(),
        like.embedding_dim(),
        like.n_classes(),
        *like.preprocess(),
        model_seed,
    )?
    .detach_head()?;
    let extraction = batch_extract(&model, partition.iter().cloned().map(Ok), &TapConfig::all(), 0);
    if let Some(s) = extraction.skipped.first() {
        return Err(MintError::Config(format!("control extraction failed on {}: {}", s.sample_id, s.reason)));
    }
    Ok(FeatureStore::from_records(&extraction.records, options))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "table.csv",
            ReportFormat::Json => "run.json",
            ReportFormat::Markdown => "table.md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = MintError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(MintError::ReportFormat(s.to_string())),
        }
    }
}

pub fn emit_report(report: &GridReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Csv => emit_csv(report),
        ReportFormat::Markdown => Ok(emit_markdown(report)),
    }
}

fn arch_title(arch: MintArchitecture) -> &'static str {
    match arch {
        MintArchitecture::Vanilla => "Vanilla MINT",
        MintArchitecture::Cnn => "CNN MINT",
    }
}

fn bold_if(text: String, bold: bool) -> String {
    if bold {
        format!("**{text}**")
    } else {
        text
    }
}

fn emit_markdown(report: &GridReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# MINT accuracy: {}\n", report.context.run_id);
    let _ = writeln!(
        md,
        "Threshold accuracy on a shared balanced test split of {} samples; cells are mean ± max deviation over {} repetitions.\n",
        report.grid.test_size, report.grid.repetitions
    );
    for table in &report.tables {
        let best = table.best_row();
        let _ = writeln!(md, "## {} (desk scale)\n", arch_title(table.architecture));
        let header: Vec<String> = table.train_sizes.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(md, "| Auditable data | {} |", header.join(" | "));
        let _ = writeln!(md, "|---|{}", "---|".repeat(header.len()));
        for row in &table.rows {
            let bold = best == Some(row.auditable_data);
            let cells: Vec<String> = row
                .cells
                .iter()
                .map(|c| match &c.outcome {
                    CellOutcome::Ok { mean, spread, .. } => bold_if(format!("{mean:.3} ± {spread:.3}"), bold),
                    CellOutcome::Failed { .. } => "failed".to_string(),
                })
                .collect();
            let _ = writeln!(
                md,
                "| {} | {} |",
                bold_if(row.auditable_data.label(), bold),
                cells.join(" | ")
            );
        }
        md.push('\n');
        for e in report.excluded.iter().filter(|e| e.architecture == table.architecture) {
            let _ = writeln!(md, "- {} excluded: {}", e.auditable_data.label(), e.reason);
        }
        for row in &table.rows {
            for c in &row.cells {
                if let CellOutcome::Failed { reason } = &c.outcome {
                    let _ = writeln!(md, "- {} at {} failed: {}", row.auditable_data.label(), c.train_size, reason);
                }
            }
        }
        if let Some(c) = report.control(table.architecture) {
            let untrained = c
                .untrained_model_accuracy
                .map_or_else(|| "not run".to_string(), |a| format!("{a:.3}"));
            let _ = writeln!(
                md,
                "- Controls ({}, {} training samples): shuffled labels {:.3}; untrained audited model {}",
                c.auditable_data.label(),
                c.train_size,
                c.shuffled_label_accuracy,
                untrained
            );
        }
        md.push('\n');
        let reference = ReferenceBlock::of(table.architecture);
        let best_ref = best_of(
            reference
                .rows
                .iter()
                .map(|(k, v)| (*k, v.iter().sum::<f64>() / v.len() as f64)),
        );
        let _ = writeln!(md, "### {}: {}\n", arch_title(table.architecture), reference.label);
        let _ = writeln!(md, "| Auditable data | {} |", reference.columns.join(" | "));
        let _ = writeln!(md, "|---|{}", "---|".repeat(reference.columns.len()));
        for (kind, values) in &reference.rows {
            let bold = best_ref == Some(*kind);
            let cells: Vec<String> = values.iter().map(|v| bold_if(format!("{v:.2}"), bold)).collect();
            let _ = writeln!(md, "| {} | {} |", bold_if(kind.label(), bold), cells.join(" | "));
        }
        md.push('\n');
    }
    md
}

/// One CSV line of the accuracy tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvCell {
    pub architecture: MintArchitecture,
    pub auditable_data: String,
    pub train_size: usize,
    pub status: String,
    pub mean: Option<f64>,
    pub spread: Option<f64>,
    /// Per-repetition test accuracies, `;`-separated.
    pub accuracies: String,
}

fn emit_csv(report: &GridReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for table in &report.tables {
        for row in &table.rows {
            for c in &row.cells {
                let (status, mean, spread, accs) = match &c.outcome {
                    CellOutcome::Ok {
                        mean,
                        spread,
                        repetitions,
                    } => (
                        "ok",
                        Some(*mean),
                        Some(*spread),
                        repetitions
                            .iter()
                            .map(|r| r.test_accuracy.to_string())
                            .collect::<Vec<_>>()
                            .join(";"),
                    ),
                    CellOutcome::Failed { .. } => ("failed", None, None, String::new()),
                };
                w.serialize(CsvCell {
                    architecture: table.architecture,
                    auditable_data: row.auditable_data.label(),
                    train_size: c.train_size,
                    status: status.into(),
                    mean,
                    spread,
                    accuracies: accs,
                })?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| MintError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_csv_cells(text: &str) -> Result<Vec<CsvCell>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<CsvCell>, _>>()?)
}
