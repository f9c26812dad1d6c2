//! Span-based micro-F1 over exact-match extraction tuples.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::ParseDiagnostics;
use crate::corpus::{Extraction, IESample, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Outer whitespace trimmed, otherwise byte-exact.
    #[default]
    Exact,
    /// Additionally lowercased.
    Lower,
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" | "none" => Ok(Self::Exact),
            "lower" => Ok(Self::Lower),
            other => Err(format!("unknown normalization {other:?} (expected exact or lower)")),
        }
    }
}

fn norm(s: &str, n: Normalization) -> String {
    let t = s.trim();
    match n {
        Normalization::Exact => t.to_string(),
        Normalization::Lower => t.to_lowercase(),
    }
}

/// Tuple compared for a match. Argument keys carry the sample's event type.
pub fn match_key(e: &Extraction, event_type: Option<&str>, n: Normalization) -> Vec<String> {
    match e {
        Extraction::Entity { label, span } => vec![norm(label, n), norm(span, n)],
        Extraction::Relation {
            relation,
            subject,
            object,
        } => vec![norm(relation, n), norm(subject, n), norm(object, n)],
        Extraction::Trigger { label, trigger } => vec![norm(label, n), norm(trigger, n)],
        Extraction::Argument { role, argument } => {
            vec![norm(event_type.unwrap_or(""), n), norm(role, n), norm(argument, n)]
        }
    }
}

/// Exact agreement on every field the task's metric requires.
pub fn matches(pred: &Extraction, gold: &Extraction, event_type: Option<&str>) -> bool {
    pred.task() == gold.task()
        && match_key(pred, event_type, Normalization::Exact) == match_key(gold, event_type, Normalization::Exact)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// Precision, recall, F1 in percent. An empty denominator yields 100 for
    /// precision or recall; F1 is 0 when both are 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let p = if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let r = if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (100.0 * p, 100.0 * r, 100.0 * f)
    }
}

/// Set-based counts for one sample.
pub fn count_sample(pred: &[Extraction], gold: &[Extraction], event_type: Option<&str>, n: Normalization) -> Counts {
    let p: BTreeSet<Vec<String>> = pred.iter().map(|e| match_key(e, event_type, n)).collect();
    let g: BTreeSet<Vec<String>> = gold.iter().map(|e| match_key(e, event_type, n)).collect();
    let tp = p.intersection(&g).count();
    Counts {
        tp,
        fp: p.len() - tp,
        fn_: g.len() - tp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub extractions: Vec<Extraction>,
    #[serde(default)]
    pub segments: usize,
    #[serde(default)]
    pub skipped: usize,
    #[serde(default)]
    pub ambiguous_commas: usize,
}

impl Prediction {
    pub fn new(id: impl Into<String>, extractions: Vec<Extraction>) -> Self {
        Self {
            id: id.into(),
            extractions,
            segments: 0,
            skipped: 0,
            ambiguous_commas: 0,
        }
    }

    pub fn with_diagnostics(mut self, d: &ParseDiagnostics) -> Self {
        self.segments = d.segments;
        self.skipped = d.skipped;
        self.ambiguous_commas = d.ambiguous_commas;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub dataset: String,
    pub task: Task,
    pub samples: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub parse_segments: usize,
    pub parse_skipped: usize,
    pub parse_ambiguous_commas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAverage {
    pub task: Task,
    pub datasets: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub normalization: Normalization,
    pub rows: Vec<DatasetRow>,
    /// Unweighted means over each task's dataset rows.
    pub task_averages: Vec<TaskAverage>,
}

/// Micro-aggregated counts per (dataset, task). Every gold sample needs
/// exactly one prediction and vice versa.
pub fn micro_f1(predictions: &[Prediction], golds: &[IESample], n: Normalization) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::Invalid(format!("duplicate prediction for sample {}", p.id)));
        }
    }
    let mut groups: BTreeMap<(String, Task), Vec<(&IESample, &Prediction)>> = BTreeMap::new();
    let mut seen = 0;
    for g in golds {
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::Invalid(format!("no prediction for sample {}", g.id)))?;
        seen += 1;
        groups.entry((g.dataset.clone(), g.task)).or_default().push((g, p));
    }
    if seen != predictions.len() {
        let gold_ids: std::collections::HashSet<&str> = golds.iter().map(|g| g.id.as_str()).collect();
        let stray = predictions
            .iter()
            .find(|p| !gold_ids.contains(p.id.as_str()))
            .map(|p| p.id.clone())
            .unwrap_or_default();
        return Err(Error::Invalid(format!("prediction {stray} has no gold sample")));
    }

    let rows: Vec<DatasetRow> = groups
        .into_par_iter()
        .map(|((dataset, task), items)| {
            let mut counts = Counts::default();
            let (mut seg, mut skip, mut amb) = (0, 0, 0);
            for (g, p) in &items {
                let ev = g.event.as_ref().map(|e| e.event_type.as_str());
                counts.add(count_sample(&p.extractions, &g.output, ev, n));
                seg += p.segments;
                skip += p.skipped;
                amb += p.ambiguous_commas;
            }
            let (precision, recall, f1) = counts.prf();
            DatasetRow {
                dataset,
                task,
                samples: items.len(),
                counts,
                precision,
                recall,
                f1,
                parse_segments: seg,
                parse_skipped: skip,
                parse_ambiguous_commas: amb,
            }
        })
        .collect();

    let mut task_averages = Vec::new();
    for task in Task::ALL {
        let rs: Vec<&DatasetRow> = rows.iter().filter(|r| r.task == task).collect();
        if rs.is_empty() {
            continue;
        }
        let m = rs.len() as f64;
        task_averages.push(TaskAverage {
            task,
            datasets: rs.len(),
            precision: rs.iter().map(|r| r.precision).sum::<f64>() / m,
            recall: rs.iter().map(|r| r.recall).sum::<f64>() / m,
            f1: rs.iter().map(|r| r.f1).sum::<f64>() / m,
        });
    }
    Ok(EvalReport {
        normalization: n,
        rows,
        task_averages,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// Aligned-column table: dataset rows grouped by task, each group
    /// followed by its average.
    pub fn to_table(&self) -> String {
        let header = ["Dataset", "Task", "TP", "FP", "FN", "P", "R", "F1"];
        let mut lines: Vec<[String; 8]> = Vec::new();
        for avg in &self.task_averages {
            for r in self.rows.iter().filter(|r| r.task == avg.task) {
                lines.push([
                    r.dataset.clone(),
                    r.task.code().to_string(),
                    r.counts.tp.to_string(),
                    r.counts.fp.to_string(),
                    r.counts.fn_.to_string(),
                    format!("{:.2}", r.precision),
                    format!("{:.2}", r.recall),
                    format!("{:.2}", r.f1),
                ]);
            }
            lines.push([
                "Avg".into(),
                avg.task.code().to_string(),
                String::new(),
                String::new(),
                String::new(),
                format!("{:.2}", avg.precision),
                format!("{:.2}", avg.recall),
                format!("{:.2}", avg.f1),
            ]);
        }
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for l in &lines {
            for (w, c) in widths.iter_mut().zip(l) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let fmt_row = |out: &mut String, cells: &[String]| {
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i < 2 {
                    let _ = write!(out, "{c:<w$}");
                } else {
                    let _ = write!(out, "{c:>w$}");
                }
                out.push_str(if i + 1 == cells.len() { "\n" } else { "  " });
            }
        };
        let head: Vec<String> = header.iter().map(|s| s.to_string()).collect();
        fmt_row(&mut out, &head);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        fmt_row(&mut out, &rule);
        for l in &lines {
            fmt_row(&mut out, l);
        }
        out
    }
}
