//! Offline steps shared by the command-line tool and the test harnesses:
//! building training sets, training the per-metric and integrated models,
//! and learning the metric priority list from labeled tasks.

use serde::{Deserialize, Serialize};

use crate::detector::ModelSet;
use crate::error::{Error, Result};
use crate::metric::MetricKind;
use crate::prioritization::{
    extract_priority, labeled_spans, train_tree, DecisionTree, PriorityList, TreeParams,
};
use crate::simulator::GroundTruth;
use crate::tensor::{window_iter, TaskTensors};
use crate::vae::{train_model, ModelScope, TrainingSet, TrainingSummary, VaeHyperparams, VaeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hyperparams: VaeHyperparams,
    /// Windows kept per model after uniform thinning.
    pub max_windows: usize,
    pub stride: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hyperparams: VaeHyperparams::default(),
            max_windows: 4096,
            stride: 1,
        }
    }
}

/// Every machine's windows of `metric` across `tasks`, thinned to
/// `cfg.max_windows`.
pub fn metric_training_set(
    tasks: &[TaskTensors],
    metric: MetricKind,
    cfg: &TrainingConfig,
) -> Result<TrainingSet> {
    let w = cfg.hyperparams.w;
    let mut set = TrainingSet::new(w);
    for t in tasks {
        let Some(tensor) = t.get(metric) else {
            continue;
        };
        for win in window_iter(tensor, w, cfg.stride)? {
            set.push(win.data)?;
        }
    }
    set.thin(cfg.max_windows, cfg.hyperparams.seed ^ metric as u64);
    Ok(set)
}

/// Time-major windows over all `metrics` together.
pub fn integrated_training_set(
    tasks: &[TaskTensors],
    metrics: &[MetricKind],
    cfg: &TrainingConfig,
) -> Result<TrainingSet> {
    let w = cfg.hyperparams.w;
    let k = metrics.len();
    let mut set = TrainingSet::new(w * k);
    let mut x = vec![0.0; w * k];
    for t in tasks {
        let Some(series) = metrics
            .iter()
            .map(|m| t.get(*m))
            .collect::<Option<Vec<_>>>()
        else {
            continue;
        };
        if t.timesteps() < w {
            continue;
        }
        for i in 0..t.machines() {
            for s in (0..=t.timesteps() - w).step_by(cfg.stride) {
                for (c, tensor) in series.iter().enumerate() {
                    for (step, v) in tensor.row(i)[s..s + w].iter().enumerate() {
                        x[step * k + c] = *v;
                    }
                }
                set.push(&x)?;
            }
        }
    }
    set.thin(cfg.max_windows, cfg.hyperparams.seed ^ 0x17);
    Ok(set)
}

/// Trains one model for `metric`; the seed is offset per metric so models
/// do not share initial weights.
pub fn train_metric_model(
    tasks: &[TaskTensors],
    metric: MetricKind,
    cfg: &TrainingConfig,
) -> Result<(VaeModel, TrainingSummary)> {
    let set = metric_training_set(tasks, metric, cfg)?;
    let hp = VaeHyperparams {
        seed: cfg.hyperparams.seed.wrapping_add(metric as u64),
        ..cfg.hyperparams.clone()
    };
    train_model(ModelScope::Single(metric), hp, &set)
}

pub fn train_metric_models(
    tasks: &[TaskTensors],
    metrics: &[MetricKind],
    cfg: &TrainingConfig,
) -> Result<ModelSet> {
    metrics
        .iter()
        .map(|&m| Ok((m, train_metric_model(tasks, m, cfg)?.0)))
        .collect()
}

pub fn train_integrated_model(
    tasks: &[TaskTensors],
    metrics: &[MetricKind],
    cfg: &TrainingConfig,
) -> Result<(VaeModel, TrainingSummary)> {
    if metrics.is_empty() {
        return Err(Error::InvalidParameter(
            "integrated model needs at least one metric".into(),
        ));
    }
    let set = integrated_training_set(tasks, metrics, cfg)?;
    train_model(
        ModelScope::Integrated(metrics.to_vec()),
        cfg.hyperparams.clone(),
        &set,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrioritizeConfig {
    /// Steps per labeled span.
    pub span: usize,
    pub tree: TreeParams,
}

impl Default for PrioritizeConfig {
    fn default() -> Self {
        Self {
            span: 120,
            tree: TreeParams::default(),
        }
    }
}

/// Learns the tree and the priority list from tasks with known faults.
pub fn prioritize(
    tasks: &[(TaskTensors, GroundTruth)],
    catalog: &[MetricKind],
    cfg: &PrioritizeConfig,
) -> Result<(DecisionTree, PriorityList)> {
    let mut rows = Vec::new();
    for (t, truth) in tasks {
        let faults: Vec<(f64, f64)> = truth
            .faults
            .iter()
            .map(|f| (f.onset, f.onset + f.duration))
            .collect();
        rows.extend(labeled_spans(t, cfg.span, &faults)?);
    }
    let tree = train_tree(&rows, cfg.tree)?;
    let priority = extract_priority(&tree, catalog);
    Ok((tree, priority))
}
