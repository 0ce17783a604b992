//! Multi-label confusion counts with macro and micro precision, recall and F1.
//!
//! Per-class precision and recall use `0/0 = 0`. Macro F1 is the harmonic
//! mean of macro precision and macro recall; the mean of per-class F1 is
//! reported alongside it as `macro_f1_per_class_mean`.

use serde::Serialize;
use thiserror::Error;

use crate::corpus::LabelVector;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error(
    "label vectors of length {predicted} and {target} cannot be compared against {classes} classes"
)]
pub struct LengthMismatch {
    pub predicted: usize,
    pub target: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn accumulate(
        &mut self,
        predicted: &LabelVector,
        target: &LabelVector,
    ) -> Result<(), LengthMismatch> {
        let c = self.classes();
        if predicted.len() != c || target.len() != c {
            return Err(LengthMismatch {
                predicted: predicted.len(),
                target: target.len(),
                classes: c,
            });
        }
        for (i, (&p, &t)) in predicted
            .as_bools()
            .iter()
            .zip(target.as_bools())
            .enumerate()
        {
            match (p, t) {
                (true, true) => self.tp[i] += 1,
                (true, false) => self.fp[i] += 1,
                (false, true) => self.fn_[i] += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<(), LengthMismatch> {
        if other.classes() != self.classes() {
            return Err(LengthMismatch {
                predicted: other.classes(),
                target: other.classes(),
                classes: self.classes(),
            });
        }
        for i in 0..self.classes() {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        Ok(())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

pub fn class_scores(counts: &ConfusionCounts, i: usize) -> Prf {
    Prf::new(
        ratio(counts.tp[i], counts.tp[i] + counts.fp[i]),
        ratio(counts.tp[i], counts.tp[i] + counts.fn_[i]),
    )
}

pub fn macro_scores(counts: &ConfusionCounts) -> Prf {
    let c = counts.classes().max(1) as f64;
    let (p, r) = (0..counts.classes())
        .map(|i| class_scores(counts, i))
        .fold((0.0, 0.0), |(p, r), s| (p + s.precision, r + s.recall));
    Prf::new(p / c, r / c)
}

pub fn micro_scores(counts: &ConfusionCounts) -> Prf {
    let tp: u64 = counts.tp.iter().sum();
    let fp: u64 = counts.fp.iter().sum();
    let fn_: u64 = counts.fn_.iter().sum();
    Prf::new(ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub label: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassReport>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub macro_f1_per_class_mean: f64,
    #[serde(rename = "micro")]
    pub micro_avg: Prf,
}

impl MetricsReport {
    /// `labels` names each class; missing names fall back to the class index.
    pub fn new(counts: &ConfusionCounts, labels: &[String]) -> Self {
        let per_class: Vec<ClassReport> = (0..counts.classes())
            .map(|i| {
                let s = class_scores(counts, i);
                ClassReport {
                    label: labels.get(i).cloned().unwrap_or_else(|| i.to_string()),
                    tp: counts.tp[i],
                    fp: counts.fp[i],
                    fn_: counts.fn_[i],
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                }
            })
            .collect();
        let mean_f1 = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64
        };
        Self {
            per_class,
            macro_avg: macro_scores(counts),
            macro_f1_per_class_mean: mean_f1,
            micro_avg: micro_scores(counts),
        }
    }
}
