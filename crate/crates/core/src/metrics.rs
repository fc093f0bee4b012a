//! Binary confusion-matrix statistics (attack = positive class) and the
//! per-round record written to `records.jsonl`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index treated as positive.
pub const ATTACK: usize = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(Error::invalid(format!("non-binary class pair ({p}, {y})")));
        }
        match (p == ATTACK, y == ATTACK) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

/// Which ratios hit 0/0 and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UndefinedRatios {
    pub precision: bool,
    pub sensitivity: bool,
    pub specificity: bool,
    pub f1: bool,
}

impl UndefinedRatios {
    pub fn any(&self) -> bool {
        self.precision || self.sensitivity || self.specificity || self.f1
    }

    pub fn names(&self) -> Vec<String> {
        [
            ("precision", self.precision),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("f1", self.f1),
        ]
        .into_iter()
        .filter(|(_, hit)| *hit)
        .map(|(name, _)| name.to_owned())
        .collect()
    }
}

fn ratio(num: f64, den: f64, undefined: &mut bool) -> f64 {
    if den == 0.0 {
        *undefined = true;
        0.0
    } else {
        num / den
    }
}

/// Accuracy, precision, sensitivity, specificity and F1, with every 0/0
/// ratio reported as 0.
pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics> {
    classification_metrics_flagged(c).map(|(m, _)| m)
}

pub fn classification_metrics_flagged(
    c: &ConfusionCounts,
) -> Result<(ClassificationMetrics, UndefinedRatios)> {
    if c.total() == 0 {
        return Err(Error::invalid("no evaluated samples"));
    }
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let mut flags = UndefinedRatios::default();
    let accuracy = (tp + tn) / c.total() as f64;
    let precision = ratio(tp, tp + fp, &mut flags.precision);
    let sensitivity = ratio(tp, tp + fn_, &mut flags.sensitivity);
    let specificity = ratio(tn, tn + fp, &mut flags.specificity);
    let f1 = ratio(
        2.0 * precision * sensitivity,
        precision + sensitivity,
        &mut flags.f1,
    );
    Ok((
        ClassificationMetrics {
            accuracy,
            precision,
            sensitivity,
            specificity,
            f1,
        },
        flags,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Candidate,
    Revalidation,
    Fedavg,
    Centralized,
}

/// Outcome of the annealing acceptance test for a candidate round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    AcceptedBetter,
    AcceptedWorse,
    Rejected,
    /// Revalidation found the best solution degraded; it was replaced by a
    /// fresh random one.
    Reinitialized,
    Retained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSnapshot {
    pub tau: usize,
    pub eta: f64,
    pub participants: Vec<usize>,
}

/// One aggregation round (or one centralized block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub phase: Phase,
    /// Annealing epoch (0 for the initial evaluation); absent outside FedSA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub solution: Option<SolutionSnapshot>,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    /// Participant-weighted mean of the local training losses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub federated_objective: Option<f64>,
    /// Metrics whose ratio was 0/0 and therefore reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined_metrics: Vec<String>,
}

impl RoundRecord {
    /// Record with metrics filled from an evaluation; driver-specific fields empty.
    pub fn from_evaluation(
        round_index: usize,
        phase: Phase,
        loss: f64,
        predictions: &[usize],
        labels: &[usize],
    ) -> Result<Self> {
        let counts = confusion(predictions, labels)?;
        let (m, flags) = classification_metrics_flagged(&counts)?;
        Ok(RoundRecord {
            round_index,
            phase,
            epoch: None,
            solution: None,
            loss,
            accuracy: m.accuracy,
            precision: m.precision,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            f1: m.f1,
            temperature: None,
            decision: None,
            federated_objective: None,
            undefined_metrics: flags.names(),
        })
    }

    pub fn metrics(&self) -> ClassificationMetrics {
        ClassificationMetrics {
            accuracy: self.accuracy,
            precision: self.precision,
            sensitivity: self.sensitivity,
            specificity: self.specificity,
            f1: self.f1,
        }
    }
}

/// First round whose accuracy reaches `target`.
pub fn rounds_to_accuracy(records: &[RoundRecord], target: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.accuracy >= target)
        .map(|r| r.round_index)
}
