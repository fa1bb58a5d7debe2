//! One entry point over the primary detector and its reference variants,
//! plus the call schedule that replays periodic detection over a task.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{ablation_trace, md_trace, Ablation, MdConfig};
use crate::detector::{
    metric_trace, replay, run_ordered, session_order, session_starts_at, Alert, AlertContext,
    DetectorConfig, ModelSet, ScoreTrace, SessionOutcome,
};
use crate::error::{Error, Result};
use crate::metric::MetricKind;
use crate::prioritization::PriorityList;
use crate::tensor::TaskTensors;
use crate::vae::VaeModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Minder,
    Md,
    Raw,
    Con,
    Int,
}

impl Pipeline {
    pub const ALL: [Pipeline; 5] = [
        Pipeline::Minder,
        Pipeline::Md,
        Pipeline::Raw,
        Pipeline::Con,
        Pipeline::Int,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Minder => "minder",
            Pipeline::Md => "md",
            Pipeline::Raw => "raw",
            Pipeline::Con => "con",
            Pipeline::Int => "int",
        }
    }

    /// Walks metrics in priority order rather than scoring them jointly.
    pub fn per_metric(self) -> bool {
        matches!(self, Pipeline::Minder | Pipeline::Raw)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown pipeline {s:?} (minder, md, raw, con, int)"
                ))
            })
    }
}

/// Trained models a pipeline may need.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Models {
    pub per_metric: ModelSet,
    pub integrated: Option<VaeModel>,
}

/// Everything a detection call needs apart from the task.
#[derive(Debug, Clone, Copy)]
pub struct Detection<'a> {
    pub pipeline: Pipeline,
    pub models: &'a Models,
    pub priority: &'a PriorityList,
    pub cfg: &'a DetectorConfig,
    pub md: &'a MdConfig,
}

impl Detection<'_> {
    fn order(&self, tensors: &TaskTensors) -> Vec<Option<MetricKind>> {
        if self.pipeline.per_metric() {
            session_order(tensors, self.priority)
                .into_iter()
                .map(Some)
                .collect()
        } else {
            vec![None]
        }
    }

    fn trace(
        &self,
        tensors: &TaskTensors,
        label: Option<MetricKind>,
        starts: &[usize],
    ) -> Result<ScoreTrace> {
        let models = self.models;
        match self.pipeline {
            Pipeline::Minder => {
                let metric = label.expect("per-metric pipeline");
                let model = models
                    .per_metric
                    .get(&metric)
                    .ok_or(Error::MissingModel(metric))?;
                metric_trace(
                    tensors.get(metric).expect("ordered metrics exist"),
                    model,
                    starts,
                    self.cfg,
                )
            }
            Pipeline::Md => md_trace(tensors, starts, self.cfg, self.md),
            Pipeline::Raw => ablation_trace(
                Ablation::Raw,
                tensors,
                &models.per_metric,
                None,
                label,
                starts,
                self.cfg,
            ),
            Pipeline::Con => ablation_trace(
                Ablation::Con,
                tensors,
                &models.per_metric,
                None,
                None,
                starts,
                self.cfg,
            ),
            Pipeline::Int => ablation_trace(
                Ablation::Int,
                tensors,
                &models.per_metric,
                models.integrated.as_ref(),
                None,
                starts,
                self.cfg,
            ),
        }
    }

    fn check(&self, tensors: &TaskTensors) -> Result<()> {
        self.cfg.validate(tensors.grid_interval())?;
        if tensors.machines() < 2 {
            return Err(Error::InvalidParameter(format!(
                "task {} has {} machine(s); at least 2 required",
                tensors.task_id(),
                tensors.machines()
            )));
        }
        Ok(())
    }

    /// Every trace of one session, in evaluation order, regardless of
    /// fall-through; [`replay`] turns them into the session outcome for any
    /// threshold or continuity setting.
    pub fn traces(&self, tensors: &TaskTensors, end: usize) -> Result<Vec<ScoreTrace>> {
        self.check(tensors)?;
        let starts = session_starts_at(end, tensors.grid_interval(), self.cfg);
        self.order(tensors)
            .into_iter()
            .map(|label| self.trace(tensors, label, &starts))
            .collect()
    }

    /// One detection call over the data ending (exclusive) at grid index `end`.
    pub fn session(&self, tensors: &TaskTensors, end: usize) -> Result<SessionOutcome> {
        self.check(tensors)?;
        let starts = session_starts_at(end, tensors.grid_interval(), self.cfg);
        let ctx = AlertContext::of(tensors);
        run_ordered(&self.order(tensors), &ctx, self.cfg, |label| {
            self.trace(tensors, label, &starts)
        })
    }

    /// Runs every scheduled call over the task (see [`call_ends`]) and
    /// merges their alerts, keeping the first per machine and metric.
    pub fn run(&self, tensors: &TaskTensors) -> Result<TaskDetection> {
        self.check(tensors)?;
        let mut out = TaskDetection {
            task_id: tensors.task_id().to_string(),
            alerts: Vec::new(),
            calls: Vec::new(),
        };
        let mut seen = BTreeSet::new();
        for end in call_ends(tensors.timesteps(), tensors.grid_interval(), self.cfg) {
            let t0 = Instant::now();
            let s = self.session(tensors, end)?;
            out.calls.push(CallRecord {
                end_index: end,
                evaluated: s.evaluated,
                seconds: t0.elapsed().as_secs_f64(),
            });
            for a in s.alerts {
                if seen.insert((a.machine_id.clone(), a.metric)) {
                    out.alerts.push(a);
                }
            }
        }
        Ok(out)
    }
}

/// Outcome of replaying precomputed traces, the cheap path for sweeps.
pub fn replay_traces(
    traces: &[ScoreTrace],
    tensors: &TaskTensors,
    cfg: &DetectorConfig,
) -> SessionOutcome {
    replay(traces, &AlertContext::of(tensors), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub end_index: usize,
    pub evaluated: Vec<Option<MetricKind>>,
    /// Wall-clock time of the call.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDetection {
    pub task_id: String,
    pub alerts: Vec<Alert>,
    pub calls: Vec<CallRecord>,
}

/// End indices (exclusive) of the periodic calls over `timesteps` steps,
/// oldest first. The last call always ends at the newest sample; earlier
/// calls are spaced `call_interval_seconds` apart while a full lookback
/// still fits.
pub fn call_ends(timesteps: usize, grid_interval: f64, cfg: &DetectorConfig) -> Vec<usize> {
    let look = (cfg.lookback_seconds / grid_interval).round() as usize;
    let every = ((cfg.call_interval_seconds / grid_interval).round() as usize).max(1);
    let mut ends = vec![timesteps];
    let mut end = timesteps;
    while end >= every && end - every >= look {
        end -= every;
        ends.push(end);
    }
    ends.reverse();
    ends
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_names_round_trip() {
        for p in Pipeline::ALL {
            assert_eq!(p.name().parse::<Pipeline>().unwrap(), p);
            assert_eq!(
                serde_json::to_string(&p).unwrap(),
                format!("\"{}\"", p.name())
            );
        }
        assert!("nope".parse::<Pipeline>().is_err());
    }

    #[test]
    fn call_schedule() {
        let cfg = DetectorConfig::default();
        assert_eq!(call_ends(960, 1.0, &cfg), vec![960]);
        assert_eq!(call_ends(1400, 1.0, &cfg), vec![920, 1400]);
        assert_eq!(call_ends(2000, 1.0, &cfg), vec![1040, 1520, 2000]);
        assert_eq!(call_ends(100, 1.0, &cfg), vec![100]);
    }
}
