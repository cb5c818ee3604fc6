//! Landmark ablation, model ablation and cross-distribution transfer.
//!
//! Every training run is keyed by its dataset and [`RunSpec`] and memoized
//! in a [`Runner`], so experiments that share runs only train once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::metrics::{evaluate, MetricsReport, TRANSFER_CLASSES};
use crate::model::{Model, ModelConfig, ModelError, Variant};
use crate::scene_graph::{landmark_dropout, Behavior, SceneSequence, NUM_CLASSES};
use crate::seed::{derive_seed, sha256_hex};
use crate::traffic_sim::Dataset;
use crate::train::{train, TrainConfig};

/// Landmark fractions of the default landmark ablation.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.5, 0.75, 1.0];

/// Classes whose accuracy depends on landmarks for context.
pub const LANDMARK_SENSITIVE: [Behavior; 4] = [
    Behavior::LaneChangeLeftToRight,
    Behavior::LaneChangeRightToLeft,
    Behavior::MovingAway,
    Behavior::MovingTowards,
];

/// One training run: a model/training config, a master seed and the share of
/// landmarks kept in every split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub keep_fraction: f64,
}

impl RunSpec {
    /// Default configs for `variant`, seeded from `seed`.
    pub fn new(variant: Variant, seed: u64, epochs: usize) -> Self {
        Self {
            model: ModelConfig::for_variant(variant),
            train: TrainConfig { epochs, ..TrainConfig::default() },
            seed,
            keep_fraction: 1.0,
        }
        .seeded()
    }

    /// Re-derives the init and shuffle seeds from the master seed.
    pub fn seeded(mut self) -> Self {
        self.model.seed = derive_seed(self.seed, "model.init");
        self.train.seed = derive_seed(self.seed, "train.order");
        self
    }

    pub fn with_keep_fraction(mut self, keep: f64) -> Self {
        self.keep_fraction = keep;
        self
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Wall time of data preparation and training.
    pub train_secs: f64,
    /// Test-split report over all six classes, with the training loss curve.
    pub test: MetricsReport,
}

/// Splits of `dataset` with landmark dropout applied to every sequence.
pub fn prepared_splits(
    dataset: &Dataset,
    keep_fraction: f64,
    seed: u64,
) -> Result<[Vec<SceneSequence>; 3], ModelError> {
    let split = &dataset.manifest.split;
    let pick = |indices: &[usize]| -> Result<Vec<SceneSequence>, ModelError> {
        indices
            .iter()
            .map(|&i| {
                let s = derive_seed(seed, &format!("landmark_dropout.{i}"));
                Ok(landmark_dropout(&dataset.sequences[i], keep_fraction, s)?)
            })
            .collect()
    };
    Ok([pick(&split.train)?, pick(&split.val)?, pick(&split.test)?])
}

/// Content hash identifying a dataset.
pub fn dataset_key(dataset: &Dataset) -> String {
    sha256_hex(&serde_json::to_vec(&dataset.manifest).expect("manifest serializes"))
}

type Slot = Arc<Mutex<Option<Arc<RunResult>>>>;

/// Memoizing executor for training runs. Concurrent requests for the same
/// run wait for a single training job.
#[derive(Default)]
pub struct Runner {
    cache: Mutex<BTreeMap<String, Slot>>,
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trains and evaluates `spec` on `dataset`, or returns the cached result.
    pub fn run(&self, dataset: &Dataset, spec: &RunSpec) -> Result<Arc<RunResult>, ModelError> {
        let key = format!(
            "{}:{}",
            dataset_key(dataset),
            serde_json::to_string(spec).expect("spec serializes")
        );
        let slot = self.cache.lock().expect("runner cache poisoned").entry(key).or_default().clone();
        let mut entry = slot.lock().expect("runner slot poisoned");
        if let Some(hit) = entry.as_ref() {
            return Ok(hit.clone());
        }
        log::info!(
            "training {} seed {} keep {}",
            spec.model.variant,
            spec.seed,
            spec.keep_fraction
        );
        let start = Instant::now();
        let [train_set, val_set, test_set] = prepared_splits(dataset, spec.keep_fraction, spec.seed)?;
        let outcome = train(&spec.model, &train_set, &val_set, &spec.train)?;
        let train_secs = start.elapsed().as_secs_f64();
        let mut test = evaluate(&outcome.model, &test_set, None)?;
        test.loss_curve = outcome.loss_curve();
        let result = Arc::new(RunResult {
            spec: spec.clone(),
            model: outcome.model,
            best_epoch: outcome.best_epoch,
            best_val_accuracy: outcome.best_val_accuracy,
            train_secs,
            test,
        });
        *entry = Some(result.clone());
        Ok(result)
    }
}

/// Per-class accuracy averaged over reports; classes without samples in
/// every report stay `None`.
pub fn average_per_class(reports: &[&MetricsReport]) -> [Option<f64>; NUM_CLASSES] {
    let mut out = [None; NUM_CLASSES];
    for (c, slot) in out.iter_mut().enumerate() {
        let v: Vec<f64> = reports.iter().filter_map(|r| r.per_class_accuracy[c]).collect();
        if !v.is_empty() && v.len() == reports.len() {
            *slot = Some(v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    out
}

fn mean_of(per_class: &[Option<f64>; NUM_CLASSES], classes: &[Behavior]) -> f64 {
    let v: Vec<f64> = classes.iter().filter_map(|c| per_class[c.index()]).collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |a| format!("{:.1}", 100.0 * a))
}

fn check_seeds(seeds: &[u64]) -> Result<(), ModelError> {
    if seeds.is_empty() {
        return Err(ModelError::Config("at least one seed is required".into()));
    }
    Ok(())
}

/// Seed-averaged accuracies for one landmark fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionColumn {
    pub fraction: f64,
    pub per_class_accuracy: [Option<f64>; NUM_CLASSES],
    /// Mean over the landmark-sensitive classes.
    pub sensitive_mean: f64,
    pub mean_accuracy: f64,
    pub runs: Vec<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkAblation {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub columns: Vec<FractionColumn>,
}

impl LandmarkAblation {
    pub fn column(&self, fraction: f64) -> Option<&FractionColumn> {
        self.columns.iter().find(|c| c.fraction == fraction)
    }

    /// Classes as rows, one column per landmark fraction.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let header = |f: f64| {
            if f == 1.0 {
                "ours (full)".to_string()
            } else {
                format!("ours ({}%)", (100.0 * f).round())
            }
        };
        let _ = write!(out, "{:<8}", "class");
        for c in &self.columns {
            let _ = write!(out, "{:>14}", header(c.fraction));
        }
        out.push('\n');
        for b in Behavior::ALL {
            let _ = write!(out, "{:<8}", b.abbrev());
            for c in &self.columns {
                let _ = write!(out, "{:>14}", pct(c.per_class_accuracy[b.index()]));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<8}", "LC/MV");
        for c in &self.columns {
            let _ = write!(out, "{:>14}", pct(Some(c.sensitive_mean)));
        }
        out.push('\n');
        out
    }
}

/// Trains one model per (fraction, seed) with dropout on train, val and test.
pub fn ablate_landmarks(
    runner: &Runner,
    dataset: &Dataset,
    variant: Variant,
    fractions: &[f64],
    seeds: &[u64],
    epochs: usize,
) -> Result<LandmarkAblation, ModelError> {
    check_seeds(seeds)?;
    if fractions.is_empty() {
        return Err(ModelError::Config("at least one landmark fraction is required".into()));
    }
    let mut columns = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let spec = RunSpec::new(variant, seed, epochs).with_keep_fraction(fraction);
            runs.push(runner.run(dataset, &spec)?.test.clone());
        }
        let per_class = average_per_class(&runs.iter().collect::<Vec<_>>());
        columns.push(FractionColumn {
            fraction,
            per_class_accuracy: per_class,
            sensitive_mean: mean_of(&per_class, &LANDMARK_SENSITIVE),
            mean_accuracy: mean_of(&per_class, &Behavior::ALL),
            runs,
        });
    }
    Ok(LandmarkAblation { variant, seeds: seeds.to_vec(), columns })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub per_class_accuracy: [Option<f64>; NUM_CLASSES],
    pub mean_accuracy: f64,
    pub runs: Vec<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAblation {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
}

impl ModelAblation {
    pub fn row(&self, variant: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Variants as rows, classes as columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "model");
        for b in Behavior::ALL {
            let _ = write!(out, "{:>7}", b.abbrev());
        }
        let _ = writeln!(out, "{:>7}", "mean");
        for r in &self.rows {
            let _ = write!(out, "{:<8}", r.variant.name());
            for b in Behavior::ALL {
                let _ = write!(out, "{:>7}", pct(r.per_class_accuracy[b.index()]));
            }
            let _ = writeln!(out, "{:>7}", pct(Some(r.mean_accuracy)));
        }
        out
    }
}

/// Trains every variant on the same data with the same seeds.
pub fn ablate_model(
    runner: &Runner,
    dataset: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    epochs: usize,
) -> Result<ModelAblation, ModelError> {
    check_seeds(seeds)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            runs.push(runner.run(dataset, &RunSpec::new(variant, seed, epochs))?.test.clone());
        }
        let per_class = average_per_class(&runs.iter().collect::<Vec<_>>());
        rows.push(VariantRow {
            variant,
            per_class_accuracy: per_class,
            mean_accuracy: mean_of(&per_class, &Behavior::ALL),
            runs,
        });
    }
    Ok(ModelAblation { seeds: seeds.to_vec(), rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferColumn {
    pub distribution: String,
    pub per_class_accuracy: [Option<f64>; NUM_CLASSES],
    pub mean_accuracy: f64,
    /// `mean_accuracy` relative to the in-distribution column.
    pub retention: f64,
    pub runs: Vec<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub classes: Vec<Behavior>,
    /// The training distribution first, then each held-out distribution.
    pub columns: Vec<TransferColumn>,
}

impl TransferReport {
    /// Transfer classes as rows, distributions as columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "class");
        for c in &self.columns {
            let _ = write!(out, "{:>14}", c.distribution);
        }
        out.push('\n');
        for b in &self.classes {
            let _ = write!(out, "{:<10}", b.abbrev());
            for c in &self.columns {
                let _ = write!(out, "{:>14}", pct(c.per_class_accuracy[b.index()]));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<10}", "mean");
        for c in &self.columns {
            let _ = write!(out, "{:>14}", pct(Some(c.mean_accuracy)));
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "retention");
        for c in &self.columns {
            let _ = write!(out, "{:>14}", format!("{:.2}", c.retention));
        }
        out.push('\n');
        out
    }
}

/// Trains on `source` (all classes) and evaluates the transfer classes on
/// the test split of `source` and of each target.
pub fn transfer(
    runner: &Runner,
    variant: Variant,
    source: (&str, &Dataset),
    targets: &[(&str, &Dataset)],
    seeds: &[u64],
    epochs: usize,
) -> Result<TransferReport, ModelError> {
    check_seeds(seeds)?;
    let models: Vec<Arc<RunResult>> = seeds
        .iter()
        .map(|&seed| runner.run(source.1, &RunSpec::new(variant, seed, epochs)))
        .collect::<Result<_, _>>()?;
    let mut columns: Vec<TransferColumn> = Vec::with_capacity(targets.len() + 1);
    for (name, dataset) in std::iter::once(&source).chain(targets) {
        let test = dataset.test();
        let runs: Vec<MetricsReport> = models
            .iter()
            .map(|r| evaluate(&r.model, &test, Some(&TRANSFER_CLASSES)))
            .collect::<Result<_, _>>()?;
        let per_class = average_per_class(&runs.iter().collect::<Vec<_>>());
        let mean_accuracy = mean_of(&per_class, &TRANSFER_CLASSES);
        let reference = columns.first().map_or(mean_accuracy, |c| c.mean_accuracy);
        columns.push(TransferColumn {
            distribution: name.to_string(),
            per_class_accuracy: per_class,
            mean_accuracy,
            retention: if reference > 0.0 { mean_accuracy / reference } else { 0.0 },
            runs,
        });
    }
    Ok(TransferReport { variant, seeds: seeds.to_vec(), classes: TRANSFER_CLASSES.to_vec(), columns })
}
