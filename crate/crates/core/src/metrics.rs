//! Confusion-matrix evaluation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError};
use crate::scene_graph::{Behavior, SceneSequence, NUM_CLASSES};

pub const METRICS_SCHEMA: &str = "maneuver-graph-metrics";
pub const METRICS_VERSION: u32 = 1;

/// Classes shared by every distribution in transfer evaluation.
pub const TRANSFER_CLASSES: [Behavior; 3] =
    [Behavior::MovingAway, Behavior::MovingTowards, Behavior::Parked];

/// Per-class recall and a confusion matrix. `confusion[truth][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub version: u32,
    pub classes: Vec<Behavior>,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub row_totals: [usize; NUM_CLASSES],
    /// Recall per class; `None` for classes absent from the evaluated set.
    pub per_class_accuracy: [Option<f64>; NUM_CLASSES],
    pub overall_accuracy: f64,
    /// Mean of the defined per-class accuracies.
    pub mean_accuracy: f64,
    pub samples: usize,
    /// Mean training loss per epoch, when produced by a training run.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

impl MetricsReport {
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (Behavior, Behavior)>,
        classes: &[Behavior],
    ) -> Self {
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for (truth, predicted) in pairs {
            confusion[truth.index()][predicted.index()] += 1;
        }
        let row_totals = confusion.map(|row| row.iter().sum());
        let mut per_class_accuracy = [None; NUM_CLASSES];
        for c in classes {
            let i = c.index();
            if row_totals[i] > 0 {
                per_class_accuracy[i] = Some(confusion[i][i] as f64 / row_totals[i] as f64);
            }
        }
        let samples: usize = row_totals.iter().sum();
        let correct: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
        let defined: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
        Self {
            schema: METRICS_SCHEMA.to_string(),
            version: METRICS_VERSION,
            classes: classes.to_vec(),
            confusion,
            row_totals,
            per_class_accuracy,
            overall_accuracy: if samples == 0 { 0.0 } else { correct as f64 / samples as f64 },
            mean_accuracy: if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 },
            samples,
            loss_curve: Vec::new(),
        }
    }

    pub fn accuracy(&self, class: Behavior) -> Option<f64> {
        self.per_class_accuracy[class.index()]
    }

    /// Mean accuracy over `classes`, skipping classes without samples.
    pub fn mean_over(&self, classes: &[Behavior]) -> f64 {
        let v: Vec<f64> = classes.iter().filter_map(|&c| self.accuracy(c)).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// Aligned confusion table with ground-truth rows, row totals and recall.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<6}", "GT");
        for c in &self.classes {
            let _ = write!(out, "{:>7}", c.abbrev());
        }
        let _ = writeln!(out, "{:>8}{:>9}", "total", "acc(%)");
        for &truth in &self.classes {
            let i = truth.index();
            let _ = write!(out, "{:<6}", truth.abbrev());
            for pred in &self.classes {
                let _ = write!(out, "{:>7}", self.confusion[i][pred.index()]);
            }
            let acc = self.per_class_accuracy[i].map_or("-".to_string(), |a| format!("{:.1}", 100.0 * a));
            let _ = writeln!(out, "{:>8}{:>9}", self.row_totals[i], acc);
        }
        let _ = writeln!(
            out,
            "overall {:.1}%  mean {:.1}%  ({} vehicles)",
            100.0 * self.overall_accuracy,
            100.0 * self.mean_accuracy,
            self.samples
        );
        out
    }
}

/// `(truth, prediction)` for every labelled vehicle. With `subset`, only
/// vehicles whose truth is in the subset count and the argmax is taken over
/// the subset's logits.
pub fn predictions(
    model: &Model,
    sequences: &[SceneSequence],
    subset: Option<&[Behavior]>,
) -> Result<Vec<(Behavior, Behavior)>, ModelError> {
    let per_sequence: Vec<Vec<(Behavior, Behavior)>> = sequences
        .par_iter()
        .map(|seq| {
            let pred = model.predict(seq)?;
            let mut out = Vec::new();
            for (k, &row) in pred.rows.iter().enumerate() {
                let Some(truth) = seq.label_of(row) else { continue };
                let allowed: &[Behavior] = subset.unwrap_or(&Behavior::ALL);
                if !allowed.contains(&truth) {
                    continue;
                }
                let scores = pred.logits.row(k);
                let mut best = allowed[0];
                for &c in allowed {
                    if scores[c.index()] > scores[best.index()] {
                        best = c;
                    }
                }
                out.push((truth, best));
            }
            Ok(out)
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(per_sequence.into_iter().flatten().collect())
}

pub fn evaluate(
    model: &Model,
    sequences: &[SceneSequence],
    subset: Option<&[Behavior]>,
) -> Result<MetricsReport, ModelError> {
    let classes: Vec<Behavior> = match subset {
        Some(s) => Behavior::ALL.into_iter().filter(|c| s.contains(c)).collect(),
        None => Behavior::ALL.to_vec(),
    };
    if classes.is_empty() {
        return Err(ModelError::Config("class subset is empty".into()));
    }
    let pairs = predictions(model, sequences, Some(&classes))?;
    Ok(MetricsReport::from_pairs(pairs, &classes))
}
