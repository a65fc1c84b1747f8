//! Curriculum pseudo-labeling: per-class adaptive confidence thresholds and
//! selection of confident teacher predictions.
//!
//! Thresholds are estimated once per epoch from the teacher's (calibrated)
//! probabilities over the full target training set, then frozen for the
//! epoch's batches.

use crate::calibration::PredictionSet;
use crate::error::{CatError, Result};

/// Default base confidence threshold.
pub const DEFAULT_TAU: f64 = 0.9;

/// Warm-up mapping `x / (2 - x)`: convex, monotone on [0, 1] with fixed
/// points 0 and 1, so classes learned less well get proportionally lower
/// thresholds.
pub fn warmup_map(x: f64) -> f64 {
    x / (2.0 - x)
}

/// Per-class adaptive thresholds for one epoch.
#[derive(Debug, Clone)]
pub struct ThresholdState {
    pub tau: f64,
    /// High-confidence prediction counts per class.
    pub sigma: Vec<usize>,
    /// Counts normalized by the best-learned class.
    pub beta: Vec<f64>,
    /// Effective per-class thresholds, each in [0, tau].
    pub thresholds: Vec<f64>,
}

impl ThresholdState {
    /// Fixed threshold `tau` for every class; used before any adaptive
    /// estimate exists.
    pub fn fixed(tau: f64, classes: usize) -> Self {
        ThresholdState {
            tau,
            sigma: vec![0; classes],
            beta: vec![1.0; classes],
            thresholds: vec![tau; classes],
        }
    }
}

/// Pseudo-labels accepted from one target batch.
#[derive(Debug, Clone, Default)]
pub struct PseudoLabelBatch {
    /// Indices into the target batch.
    pub selected: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    /// Confidence of each selected sample at selection time.
    pub confidences: Vec<f64>,
    pub epoch: usize,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        if self.is_empty() {
            None
        } else {
            Some(self.confidences.iter().sum::<f64>() / self.len() as f64)
        }
    }
}

/// Estimate per-class thresholds from teacher predictions over the full
/// target training set.
///
/// `sigma[k]` counts samples predicted as class k with confidence at least
/// `tau`; `beta[k] = sigma[k] / max_k sigma[k]` and the class threshold is
/// `warmup_map(beta[k]) * tau`. With no confident prediction anywhere every
/// threshold falls back to `tau`.
pub fn update_thresholds(preds: &PredictionSet, tau: f64) -> Result<ThresholdState> {
    if preds.is_empty() {
        return Err(CatError::Data(
            "adaptive thresholds need a non-empty target set".into(),
        ));
    }
    if !(0.0 < tau && tau <= 1.0) {
        return Err(CatError::Param(format!(
            "base threshold must lie in (0, 1], got {}",
            tau
        )));
    }
    let k = preds.classes();
    let mut sigma = vec![0usize; k];
    for i in 0..preds.len() {
        if preds.confidences[i] >= tau {
            sigma[preds.predicted[i]] += 1;
        }
    }
    let max_sigma = *sigma.iter().max().expect("K >= 1");
    let (beta, thresholds) = if max_sigma == 0 {
        (vec![1.0; k], vec![tau; k])
    } else {
        let beta: Vec<f64> = sigma.iter().map(|&s| s as f64 / max_sigma as f64).collect();
        let thresholds = beta.iter().map(|&b| warmup_map(b) * tau).collect();
        (beta, thresholds)
    };
    Ok(ThresholdState {
        tau,
        sigma,
        beta,
        thresholds,
    })
}

/// Keep exactly the samples whose confidence meets the threshold of their
/// predicted class, labeled by that prediction.
pub fn select_pseudo_labels(
    preds: &PredictionSet,
    state: &ThresholdState,
    epoch: usize,
) -> Result<PseudoLabelBatch> {
    if preds.classes() != state.thresholds.len() {
        return Err(CatError::Shape {
            op: "select_pseudo_labels",
            detail: format!(
                "{} classes in predictions, {} thresholds",
                preds.classes(),
                state.thresholds.len()
            ),
        });
    }
    let mut batch = PseudoLabelBatch {
        epoch,
        ..PseudoLabelBatch::default()
    };
    for i in 0..preds.len() {
        let class = preds.predicted[i];
        if preds.confidences[i] >= state.thresholds[class] {
            batch.selected.push(i);
            batch.pseudo_labels.push(class);
            batch.confidences.push(preds.confidences[i]);
        }
    }
    Ok(batch)
}

/// Fraction of selected pseudo-labels matching the ground truth; `None` for
/// an empty selection. Evaluation-only: the labels here never feed training.
pub fn pseudo_label_accuracy(batch: &PseudoLabelBatch, true_labels: &[usize]) -> Option<f64> {
    if batch.is_empty() {
        return None;
    }
    let hits = batch
        .selected
        .iter()
        .zip(&batch.pseudo_labels)
        .filter(|(&i, &y)| true_labels[i] == y)
        .count();
    Some(hits as f64 / batch.len() as f64)
}
