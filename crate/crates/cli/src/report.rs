//! Markdown summary of a run: corpus, priority list, one row per evaluated
//! pipeline, recall per fault type and, on request, parameter sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use rayon::prelude::*;
use trainwatch_core::detector::{Alert, DetectorConfig, DistanceKind, ScoreTrace};
use trainwatch_core::eval::{evaluate, fmt_ratio, EvalReport};
use trainwatch_core::pipeline::{call_ends, replay_traces, Detection, Models, Pipeline};
use trainwatch_core::prioritization::PriorityList;
use trainwatch_core::simulator::{FaultType, GroundTruth};
use trainwatch_core::tensor::TaskTensors;

use crate::commands::{load_models, load_priority, read_evaluation};
use crate::config::Config;
use crate::store::{load_split, read_truth, update_manifest, write_file, RunDir, Split};

const TABLE_HEAD: &str = "| pipeline | TP | FN | TN | FP | precision | recall | F1 |\n|---|---|---|---|---|---|---|---|\n";

pub fn write_report(run: &RunDir, cfg: &Config, sweep: bool) -> Result<()> {
    let mut s = String::from("# Detection report\n\n");
    corpus_section(run, cfg, &mut s)?;
    priority_section(run, &mut s)?;
    let evals: Vec<EvalReport> = Pipeline::ALL
        .into_iter()
        .filter_map(|p| read_evaluation(run, p).transpose())
        .collect::<Result<_>>()?;
    s.push_str("## Pipelines\n\n");
    if evals.is_empty() {
        s.push_str("No evaluations yet; run `detect` and `evaluate`.\n\n");
    } else {
        s.push_str(TABLE_HEAD);
        for e in &evals {
            let _ = writeln!(s, "{}", e.summary_row());
        }
        s.push('\n');
        fault_type_section(&evals, &mut s);
    }
    if sweep {
        sweep_sections(run, cfg, &mut s)?;
    }
    write_file(&run.report(), s.as_bytes())?;
    print!("{s}");
    update_manifest(run, "report", &sweep)
}

fn corpus_section(run: &RunDir, cfg: &Config, s: &mut String) -> Result<()> {
    s.push_str("## Corpus\n\n| split | tasks | faulty | clean |\n|---|---|---|---|\n");
    for split in Split::ALL {
        if !run.truth(split).exists() {
            continue;
        }
        let truth = read_truth(run, split)?;
        let faulty = truth.iter().filter(|t| t.is_faulty()).count();
        let _ = writeln!(
            s,
            "| {split} | {} | {faulty} | {} |",
            truth.len(),
            truth.len() - faulty
        );
    }
    let sim = &cfg.simulator;
    let machines: Vec<String> = sim.machine_choices.iter().map(|m| m.to_string()).collect();
    let _ = writeln!(
        s,
        "\nNoise sigma {}, machines per task {{{}}}, eval seed {}.\n",
        sim.noise_sigma,
        machines.join(", "),
        sim.seed
    );
    Ok(())
}

fn priority_section(run: &RunDir, s: &mut String) -> Result<()> {
    let p = run.priority();
    if !p.exists() {
        return Ok(());
    }
    let list = PriorityList::parse(
        &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
    )?;
    s.push_str("## Metric priority\n\n| rank | metric | shallowest split |\n|---|---|---|\n");
    for (i, e) in list.entries.iter().enumerate() {
        let depth = e.min_depth.map_or("-".to_string(), |d| d.to_string());
        let _ = writeln!(s, "| {} | {} | {depth} |", i + 1, e.metric);
    }
    s.push('\n');
    Ok(())
}

fn fault_type_section(evals: &[EvalReport], s: &mut String) {
    let types: BTreeSet<FaultType> = evals
        .iter()
        .flat_map(|e| e.by_fault_type.keys().copied())
        .collect();
    if types.is_empty() {
        return;
    }
    s.push_str("## Recall by fault type\n\n| fault type | tasks |");
    for e in evals {
        let _ = write!(s, " {} |", e.pipeline);
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(evals.len()));
    s.push('\n');
    for ft in types {
        let n = evals
            .iter()
            .filter_map(|e| e.by_fault_type.get(&ft))
            .map(|c| c.total())
            .max()
            .unwrap_or(0);
        let _ = write!(s, "| {ft} | {n} |");
        for e in evals {
            let _ = write!(
                s,
                " {} |",
                fmt_ratio(e.by_fault_type.get(&ft).and_then(|c| c.recall()))
            );
        }
        s.push('\n');
    }
    s.push('\n');
}

/// Traces of every call of one task.
type TaskTraces = Vec<Vec<ScoreTrace>>;

fn task_traces(det: &Detection<'_>, tasks: &[TaskTensors]) -> Result<Vec<TaskTraces>> {
    tasks
        .par_iter()
        .map(|t| {
            call_ends(t.timesteps(), t.grid_interval(), det.cfg)
                .into_iter()
                .map(|end| det.traces(t, end).map_err(anyhow::Error::from))
                .collect::<Result<TaskTraces>>()
        })
        .collect()
}

/// Alerts of replaying every call, first alert per machine and metric kept.
pub fn replay_alerts(
    tasks: &[TaskTensors],
    traces: &[TaskTraces],
    cfg: &DetectorConfig,
) -> BTreeMap<String, Vec<Alert>> {
    tasks
        .iter()
        .zip(traces)
        .map(|(t, calls)| {
            let mut seen = BTreeSet::new();
            let alerts = calls
                .iter()
                .flat_map(|tr| replay_traces(tr, t, cfg).alerts)
                .filter(|a| seen.insert((a.machine_id.clone(), a.metric)))
                .collect();
            (t.task_id().to_string(), alerts)
        })
        .collect()
}

fn sweep_row(
    label: &str,
    tasks: &[TaskTensors],
    traces: &[TaskTraces],
    cfg: &DetectorConfig,
    truth: &[GroundTruth],
) -> Result<String> {
    let r = evaluate(label, &replay_alerts(tasks, traces, cfg), truth)?;
    Ok(r.summary_row())
}

fn sweep_sections(run: &RunDir, cfg: &Config, s: &mut String) -> Result<()> {
    let models: Models = load_models(run)?;
    let priority = load_priority(run, Pipeline::Minder, &models)?;
    let tasks = load_split(run, Split::Eval)?;
    let ids: BTreeSet<&str> = tasks.iter().map(|t| t.task_id()).collect();
    let truth: Vec<GroundTruth> = read_truth(run, Split::Eval)?
        .into_iter()
        .filter(|t| ids.contains(t.task_id.as_str()))
        .collect();
    let base = &cfg.detector;
    let det = |c: &'_ DetectorConfig| -> Result<Vec<TaskTraces>> {
        task_traces(
            &Detection {
                pipeline: Pipeline::Minder,
                models: &models,
                priority: &priority,
                cfg: c,
                md: &cfg.md,
            },
            &tasks,
        )
    };
    let traces = det(base)?;
    let grid = tasks.first().map_or(1.0, |t| t.grid_interval());

    s.push_str("## Similarity threshold (minder)\n\n");
    s.push_str(&TABLE_HEAD.replace("pipeline", "threshold"));
    for th in [0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0] {
        let c = DetectorConfig {
            similarity_threshold: th,
            ..base.clone()
        };
        let _ = writeln!(
            s,
            "{}",
            sweep_row(&format!("{th:.1}"), &tasks, &traces, &c, &truth)?
        );
    }

    s.push_str("\n## Continuity (minder)\n\n");
    s.push_str(&TABLE_HEAD.replace("pipeline", "continuity (s)"));
    for cont in [0.0, 30.0, 60.0, 120.0, 240.0, 480.0] {
        let c = DetectorConfig {
            continuity_seconds: cont,
            ..base.clone()
        };
        if c.validate(grid).is_err() {
            continue;
        }
        let _ = writeln!(
            s,
            "{}",
            sweep_row(&format!("{cont}"), &tasks, &traces, &c, &truth)?
        );
    }

    s.push_str("\n## Distance kind (minder)\n\n");
    s.push_str(&TABLE_HEAD.replace("pipeline", "distance"));
    for kind in [
        DistanceKind::Euclidean,
        DistanceKind::Manhattan,
        DistanceKind::Chebyshev,
    ] {
        let c = DetectorConfig {
            distance_kind: kind,
            ..base.clone()
        };
        let row = if kind == base.distance_kind {
            sweep_row(&format!("{kind:?}"), &tasks, &traces, &c, &truth)?
        } else {
            sweep_row(&format!("{kind:?}"), &tasks, &det(&c)?, &c, &truth)?
        };
        let _ = writeln!(s, "{row}");
    }
    s.push('\n');
    Ok(())
}
