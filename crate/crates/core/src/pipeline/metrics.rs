use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Occurrences of the class in the truth.
    pub support: usize,
}

/// Per-class scores in [`Label::ALL`] order plus their unweighted mean F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub classes: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
}

impl FoldMetrics {
    pub fn class(&self, label: Label) -> &ClassMetrics {
        &self.classes[label.index()]
    }
}

/// Precision, recall and F1 per class. A class with no predictions or no
/// true members scores F1 = 0.
pub fn evaluate(predictions: &[Label], truth: &[Label]) -> Result<FoldMetrics> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truth.len(),
        });
    }
    let mut confusion = [[0usize; Label::COUNT]; Label::COUNT];
    for (p, t) in predictions.iter().zip(truth) {
        confusion[t.index()][p.index()] += 1;
    }
    let classes: Vec<ClassMetrics> = Label::ALL
        .iter()
        .map(|&label| {
            let c = label.index();
            let tp = confusion[c][c];
            let predicted: usize = (0..Label::COUNT).map(|t| confusion[t][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
            let f1 = if predicted == 0 || actual == 0 || precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label,
                precision,
                recall,
                f1,
                support: actual,
            }
        })
        .collect();
    let macro_f1 = classes.iter().map(|c| c.f1).sum::<f64>() / Label::COUNT as f64;
    let correct: usize = (0..Label::COUNT).map(|c| confusion[c][c]).sum();
    let accuracy = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
    Ok(FoldMetrics {
        classes,
        macro_f1,
        accuracy,
    })
}

/// [`evaluate`] over class names such as `"HATE"`.
pub fn evaluate_names<S: AsRef<str>>(predictions: &[S], truth: &[S]) -> Result<FoldMetrics> {
    let parse = |v: &[S]| v.iter().map(|s| s.as_ref().parse::<Label>()).collect::<Result<Vec<_>>>();
    evaluate(&parse(predictions)?, &parse(truth)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    #[serde(flatten)]
    pub metrics: FoldMetrics,
}

/// Per-fold metrics and their mean over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub mean: FoldMetrics,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one fold".into()));
        }
        let n = folds.len() as f64;
        let mean_of = |f: &dyn Fn(&FoldMetrics) -> f64| folds.iter().map(f).sum::<f64>() / n;
        let classes = Label::ALL
            .iter()
            .map(|&label| ClassMetrics {
                label,
                precision: mean_of(&|m| m.class(label).precision),
                recall: mean_of(&|m| m.class(label).recall),
                f1: mean_of(&|m| m.class(label).f1),
                support: folds.iter().map(|m| m.class(label).support).sum(),
            })
            .collect();
        let mean = FoldMetrics {
            classes,
            macro_f1: mean_of(&|m| m.macro_f1),
            accuracy: mean_of(&|m| m.accuracy),
        };
        Ok(EvalReport {
            k: folds.len(),
            folds: folds
                .into_iter()
                .enumerate()
                .map(|(fold, metrics)| FoldReport { fold, metrics })
                .collect(),
            mean,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `fold,class,precision,recall,f1,macro_f1`, one row per fold and class,
    /// then the means with fold `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,class,precision,recall,f1,macro_f1\n");
        let rows = self
            .folds
            .iter()
            .map(|f| (f.fold.to_string(), &f.metrics))
            .chain(std::iter::once(("mean".to_string(), &self.mean)));
        for (fold, m) in rows {
            for c in &m.classes {
                let _ = writeln!(
                    out,
                    "{fold},{},{:.6},{:.6},{:.6},{:.6}",
                    c.label, c.precision, c.recall, c.f1, m.macro_f1
                );
            }
        }
        out
    }
}
