//! Scoring detector output against ground truth.
//!
//! A faulty task is a true positive when some alert names a faulty machine
//! and a false negative otherwise (silence or the wrong machine). A clean
//! task is a true negative when it raised no alert. The alert metric is not
//! considered.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::Alert;
use crate::error::{Error, Result};
use crate::simulator::{FaultType, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Counts {
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`: the harmonic mean of precision and recall
    /// where both exist, and 0 for a detector that finds nothing.
    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Tp => self.tp += 1,
            Outcome::Fn => self.fn_ += 1,
            Outcome::Tn => self.tn += 1,
            Outcome::Fp => self.fp += 1,
        }
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Outcome {
    Tp,
    Fn,
    Tn,
    Fp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub fault_type: Option<FaultType>,
    pub outcome: Outcome,
    pub alerted_machines: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub calls: usize,
    pub mean_seconds: f64,
    pub max_seconds: f64,
}

impl Timings {
    pub fn from_seconds(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        Self {
            calls: samples.len(),
            mean_seconds: samples.iter().sum::<f64>() / samples.len() as f64,
            max_seconds: samples.iter().cloned().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pipeline: String,
    pub overall: Counts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Faulty tasks by injected fault type, in declaration order.
    pub by_fault_type: BTreeMap<FaultType, Counts>,
    pub tasks: Vec<TaskOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

/// Scores per-task alerts against ground truth; both must cover the same
/// tasks. Task order in either input does not matter.
pub fn evaluate(
    pipeline: &str,
    alerts: &BTreeMap<String, Vec<Alert>>,
    truth: &[GroundTruth],
) -> Result<EvalReport> {
    let truth_ids: BTreeSet<&str> = truth.iter().map(|t| t.task_id.as_str()).collect();
    if truth_ids.len() != truth.len() {
        return Err(Error::TaskSetMismatch(
            "duplicate task in ground truth".into(),
        ));
    }
    let alert_ids: BTreeSet<&str> = alerts.keys().map(String::as_str).collect();
    if truth_ids != alert_ids {
        let missing: Vec<_> = truth_ids.difference(&alert_ids).take(3).collect();
        let extra: Vec<_> = alert_ids.difference(&truth_ids).take(3).collect();
        return Err(Error::TaskSetMismatch(format!(
            "no alert list for {missing:?}; no ground truth for {extra:?}"
        )));
    }
    let mut sorted: Vec<&GroundTruth> = truth.iter().collect();
    sorted.sort_by(|a, b| a.task_id.cmp(&b.task_id));

    let mut overall = Counts::default();
    let mut by_fault_type = BTreeMap::new();
    let mut tasks = Vec::with_capacity(sorted.len());
    for t in sorted {
        let list = &alerts[&t.task_id];
        let alerted: BTreeSet<&str> = list.iter().map(|a| a.machine_id.as_str()).collect();
        let fault_type = t.faults.first().map(|f| f.fault_type);
        let outcome = if t.is_faulty() {
            if t.faults
                .iter()
                .any(|f| alerted.contains(f.machine_id.as_str()))
            {
                Outcome::Tp
            } else {
                Outcome::Fn
            }
        } else if alerted.is_empty() {
            Outcome::Tn
        } else {
            Outcome::Fp
        };
        overall.add(outcome);
        if let Some(ft) = fault_type {
            by_fault_type
                .entry(ft)
                .or_insert_with(Counts::default)
                .add(outcome);
        }
        tasks.push(TaskOutcome {
            task_id: t.task_id.clone(),
            fault_type,
            outcome,
            alerted_machines: alerted.into_iter().map(str::to_string).collect(),
        });
    }
    Ok(EvalReport {
        pipeline: pipeline.to_string(),
        precision: overall.precision(),
        recall: overall.recall(),
        f1: overall.f1(),
        overall,
        by_fault_type,
        tasks,
        timings: None,
    })
}

/// Three decimals, or "n/a" when undefined.
pub fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

impl EvalReport {
    pub fn summary_row(&self) -> String {
        let c = &self.overall;
        format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            self.pipeline,
            c.tp,
            c.fn_,
            c.tn,
            c.fp,
            fmt_ratio(self.precision),
            fmt_ratio(self.recall),
            fmt_ratio(self.f1)
        )
    }

    /// Markdown tables: totals, then recall per fault type.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str("| pipeline | TP | FN | TN | FP | precision | recall | F1 |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        let _ = writeln!(s, "{}", self.summary_row());
        if !self.by_fault_type.is_empty() {
            s.push_str("\n| fault type | tasks | TP | FN | recall |\n|---|---|---|---|---|\n");
            for (ft, c) in &self.by_fault_type {
                let _ = writeln!(
                    s,
                    "| {ft} | {} | {} | {} | {} |",
                    c.total(),
                    c.tp,
                    c.fn_,
                    fmt_ratio(c.recall())
                );
            }
        }
        s
    }
}
