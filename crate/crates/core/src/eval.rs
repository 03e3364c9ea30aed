//! Confusion matrices, macro-averaged F1 and per-scenario reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("label {0:?} is not in the vocabulary")]
    UnknownLabel(String),
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("class index {0} out of range")]
    IndexOutOfRange(usize),
}

/// Text stored in every report describing the averaging rule.
pub const AVERAGING_POLICY: &str = "macro F1: unweighted mean of per-class F1 over classes that occur in the truth or the predictions; \
a class with precision + recall = 0 scores 0; classes with no support and no predictions are left out";

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: u64,
    pub predicted: u64,
    pub true_positives: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when the class has neither support nor predictions.
    pub in_macro_average: bool,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        ConfusionMatrix { classes, counts: vec![vec![0; n]; n] }
    }

    pub fn from_indices(truth: &[usize], pred: &[usize], classes: Vec<String>) -> Result<Self, EvalError> {
        if truth.len() != pred.len() {
            return Err(EvalError::LengthMismatch { truth: truth.len(), pred: pred.len() });
        }
        let mut cm = ConfusionMatrix::new(classes);
        let n = cm.classes.len();
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n || p >= n {
                return Err(EvalError::IndexOutOfRange(t.max(p)));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn per_class(&self) -> Vec<ClassMetrics> {
        let n = self.classes.len();
        (0..n)
            .map(|i| {
                let tp = self.counts[i][i];
                let support: u64 = self.counts[i].iter().sum();
                let predicted: u64 = (0..n).map(|r| self.counts[r][i]).sum();
                let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
                let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
                let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
                ClassMetrics {
                    label: self.classes[i].clone(),
                    support,
                    predicted,
                    true_positives: tp,
                    precision,
                    recall,
                    f1,
                    in_macro_average: support > 0 || predicted > 0,
                }
            })
            .collect()
    }

    /// 0 when no class qualifies (empty input).
    pub fn macro_f1(&self) -> f64 {
        let m: Vec<f64> = self.per_class().iter().filter(|c| c.in_macro_average).map(|c| c.f1).collect();
        if m.is_empty() {
            0.0
        } else {
            m.iter().sum::<f64>() / m.len() as f64
        }
    }
}

/// Builds a matrix from label strings.
pub fn confusion(truth: &[&str], pred: &[&str], vocabulary: &[String]) -> Result<ConfusionMatrix, EvalError> {
    let index = |s: &str| vocabulary.iter().position(|v| v == s).ok_or_else(|| EvalError::UnknownLabel(s.to_string()));
    let t = truth.iter().map(|s| index(s)).collect::<Result<Vec<_>, _>>()?;
    let p = pred.iter().map(|s| index(s)).collect::<Result<Vec<_>, _>>()?;
    ConfusionMatrix::from_indices(&t, &p, vocabulary.to_vec())
}

pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    cm.macro_f1()
}

/// Macro F1 over class indices without naming the classes.
pub fn macro_f1_indices(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    let names = (0..n_classes).map(|i| i.to_string()).collect();
    ConfusionMatrix::from_indices(truth, pred, names).map_or(0.0, |cm| cm.macro_f1())
}

/// One model's predictions at one label level.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub model: String,
    pub level: String,
    pub classes: Vec<String>,
    /// None for rows without a true label at this level; they are skipped.
    pub truth: Vec<Option<usize>>,
    pub pred: Vec<usize>,
    /// Source dataset per row, when known.
    pub dataset: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub dataset: String,
    pub level: String,
    pub model: String,
    pub rows: u64,
    pub macro_f1: f64,
    pub classes: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub averaging: String,
    pub models: Vec<String>,
    pub scenarios: Vec<ScenarioResult>,
    pub notes: Vec<String>,
}

/// Label for rows whose dataset is unknown.
pub const ALL_DATASETS: &str = "all";

fn level_suffix(level: &str) -> &str {
    level.get(..1).unwrap_or(level)
}

/// One result per (dataset, level, model), computed by restricting each
/// prediction set to the rows of that dataset. Expected datasets with no
/// rows get a note instead of a result.
pub fn scenario_report(preds: &[Predictions], expected_datasets: &[String]) -> EvalReport {
    let mut scenarios = Vec::new();
    let mut notes = Vec::new();
    let mut seen = BTreeSet::new();
    let mut models = Vec::new();
    for p in preds {
        if !models.contains(&p.model) {
            models.push(p.model.clone());
        }
        let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for i in 0..p.pred.len() {
            let Some(t) = p.truth[i] else { continue };
            let ds = p.dataset.get(i).and_then(|d| d.as_deref()).unwrap_or(ALL_DATASETS);
            let g = groups.entry(ds).or_default();
            g.0.push(t);
            g.1.push(p.pred[i]);
        }
        for (ds, (t, pr)) in groups {
            seen.insert(ds.to_string());
            let cm = ConfusionMatrix::from_indices(&t, &pr, p.classes.clone()).expect("indices come from the vocabulary");
            scenarios.push(ScenarioResult {
                scenario: format!("{ds}-{}", level_suffix(&p.level)),
                dataset: ds.to_string(),
                level: p.level.clone(),
                model: p.model.clone(),
                rows: t.len() as u64,
                macro_f1: cm.macro_f1(),
                classes: cm.per_class(),
                confusion: cm,
            });
        }
    }
    for d in expected_datasets {
        if !seen.contains(d) {
            notes.push(format!("dataset {d} is absent from the inputs; its rows are omitted"));
        }
    }
    scenarios.sort_by(|a, b| (&a.dataset, &b.level, &a.model).cmp(&(&b.dataset, &a.level, &b.model)));
    EvalReport { averaging: AVERAGING_POLICY.to_string(), models, scenarios, notes }
}

impl EvalReport {
    /// Scenarios as rows, models as columns.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<&str> = Vec::new();
        for s in &self.scenarios {
            if !rows.contains(&s.scenario.as_str()) {
                rows.push(&s.scenario);
            }
        }
        let w0 = rows.iter().map(|r| r.len()).max().unwrap_or(0).max("scenario".len());
        let widths: Vec<usize> = self.models.iter().map(|m| m.len().max(6)).collect();
        let mut out = String::new();
        write!(out, "{:<w0$}", "scenario").unwrap();
        for (m, w) in self.models.iter().zip(&widths) {
            write!(out, "  {m:>w$}").unwrap();
        }
        out.push('\n');
        for r in rows {
            write!(out, "{r:<w0$}").unwrap();
            for (m, w) in self.models.iter().zip(&widths) {
                match self.scenarios.iter().find(|s| s.scenario == r && &s.model == m) {
                    Some(s) => write!(out, "  {:>w$.4}", s.macro_f1).unwrap(),
                    None => write!(out, "  {:>w$}", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        writeln!(out, "\n{}", self.averaging).unwrap();
        for n in &self.notes {
            writeln!(out, "note: {n}").unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
