//! Subcommand bodies. Each resolves its configuration, reads the artifacts
//! it depends on and writes its own under the run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trainwatch_core::detector::Alert;
use trainwatch_core::eval::{evaluate, EvalReport, Timings};
use trainwatch_core::pipeline::{CallRecord, Detection, Models, Pipeline, TaskDetection};
use trainwatch_core::prioritization::PriorityList;
use trainwatch_core::simulator::{plan_corpus, FaultMix, GroundTruth};
use trainwatch_core::tensor::TaskTensors;
use trainwatch_core::trace::{parse_trace, TraceFormat};
use trainwatch_core::vae::{read_model, write_model, ModelScope, TrainingSummary, VaeModel};
use trainwatch_core::workflow::{prioritize, train_integrated_model, train_metric_model};
use trainwatch_core::MetricKind;

use crate::config::Config;
use crate::store::{
    list_files, load_split, read_json, read_jsonl, read_truth, update_manifest, write_file,
    write_json, write_jsonl, write_tensors, RunDir, Split,
};
use crate::{report, Cli, Command, DetectorFlags, EXIT_ALERTS, EXIT_OK};

/// The configuration `cli` runs with: built-in defaults, then the config
/// file, then the flags of its subcommand.
pub fn resolve(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    match &cli.command {
        Command::Simulate(a) => {
            let s = &mut cfg.simulator;
            set(&mut s.tasks, a.tasks);
            set(&mut s.seed, a.seed);
            set(&mut s.noise_sigma, a.noise_sigma);
            set(&mut s.train_tasks, a.train_tasks);
            set(&mut s.history_tasks, a.history_tasks);
            set(&mut s.machine_choices, a.machines.clone());
            set(&mut s.duration, a.duration);
        }
        Command::Train(a) => {
            set(&mut cfg.vae.epochs, a.epochs);
            set(&mut cfg.training.max_windows, a.max_windows);
            set(&mut cfg.vae.seed, a.vae_seed);
            if a.no_integrated {
                cfg.training.integrated = false;
            }
        }
        Command::Prioritize(a) => {
            set(&mut cfg.prioritize.tree.max_depth, a.max_depth);
            set(&mut cfg.prioritize.span, a.span);
        }
        Command::Detect(a) => apply_detector(&mut cfg, &a.detector),
        Command::Preprocess(_) | Command::Evaluate(_) | Command::Report(_) => {}
    }
    cfg.check()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn apply_detector(cfg: &mut Config, f: &DetectorFlags) {
    let d = &mut cfg.detector;
    set(&mut d.similarity_threshold, f.threshold);
    set(&mut d.continuity_seconds, f.continuity);
    set(&mut d.distance_kind, f.distance);
    set(&mut d.embedding_source, f.embedding);
    set(&mut d.lookback_seconds, f.lookback);
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let cfg = resolve(cli)?;
    let run = RunDir::new(&cli.run_dir);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()?;
    pool.install(|| match &cli.command {
        Command::Simulate(_) => simulate(&run, &cfg).map(|_| EXIT_OK),
        Command::Preprocess(a) => preprocess(&run, &cfg, a.split.as_deref()).map(|_| EXIT_OK),
        Command::Train(_) => train(&run, &cfg).map(|_| EXIT_OK),
        Command::Prioritize(_) => prioritize_cmd(&run, &cfg).map(|_| EXIT_OK),
        Command::Detect(a) => match &a.trace {
            Some(path) => detect_file(&run, &cfg, a.pipeline, path),
            None => detect(&run, &cfg, a.pipeline, a.split, a.task.as_deref()),
        },
        Command::Evaluate(a) => evaluate_cmd(&run, a.pipeline, a.split).map(|_| EXIT_OK),
        Command::Report(a) => report::write_report(&run, &cfg, a.sweep).map(|_| EXIT_OK),
    })
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes the three corpora: trace files plus `truth.jsonl` per split.
pub fn simulate(run: &RunDir, cfg: &Config) -> Result<()> {
    let s = &cfg.simulator;
    let template = s.template(&cfg.catalog()?);
    let mix = s.mix()?;
    let splits = [
        (Split::Train, s.train_tasks, FaultMix::none(), s.train_seed),
        (Split::History, s.history_tasks, mix.clone(), s.history_seed),
        (Split::Eval, s.tasks, mix, s.seed),
    ];
    let mut planned = Vec::new();
    for (split, n, mix, seed) in splits {
        let mut plans = plan_corpus(n, &template, &mix, seed)
            .with_context(|| format!("planning the {split} corpus"))?;
        for (i, p) in plans.iter_mut().enumerate() {
            p.spec.task_id = format!("{split}-{i:04}");
        }
        planned.push((split, plans));
    }
    for (split, plans) in planned {
        let dir = run.corpus(split);
        reset_dir(&dir)?;
        let truths: Vec<GroundTruth> = plans
            .par_iter()
            .map(|p| -> Result<GroundTruth> {
                let task = p.generate()?;
                let path = dir.join(format!("{}.csv", task.truth.task_id));
                let f = fs::File::create(&path)
                    .with_context(|| format!("writing {}", path.display()))?;
                task.trace.write_csv(f)?;
                Ok(task.truth)
            })
            .collect::<Result<_>>()?;
        write_jsonl(&run.truth(split), &truths)?;
        let faulty = truths.iter().filter(|t| t.is_faulty()).count();
        eprintln!(
            "simulate: {split}: {} task(s), {faulty} faulty -> {}",
            truths.len(),
            dir.display()
        );
    }
    update_manifest(run, "simulate", &cfg.simulator)
}

fn trace_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files = list_files(dir, "csv")?;
    files.extend(
        list_files(dir, "jsonl")?
            .into_iter()
            .filter(|p| p.file_name().and_then(|n| n.to_str()) != Some("truth.jsonl")),
    );
    files.sort();
    Ok(files)
}

fn prepare_file(
    path: &Path,
    cfg: &Config,
    only: Option<&BTreeSet<MetricKind>>,
) -> Result<TaskTensors> {
    let raw = parse_trace(path, TraceFormat::from_path(path))?;
    let metrics: Vec<MetricKind> = raw
        .metrics()
        .into_iter()
        .filter(|m| only.is_none_or(|o| o.contains(m)))
        .collect();
    if metrics.is_empty() {
        bail!("{}: no usable metrics", path.display());
    }
    TaskTensors::prepare(
        &raw,
        &metrics,
        &cfg.catalog()?,
        cfg.preprocess.grid_interval,
    )
    .with_context(|| format!("preprocessing {}", path.display()))
}

/// Aligns and normalizes every trace file into `tensors/<split>/`.
pub fn preprocess(run: &RunDir, cfg: &Config, splits: Option<&[Split]>) -> Result<()> {
    let chosen: Vec<Split> = match splits {
        Some(s) => s.to_vec(),
        None => Split::ALL
            .into_iter()
            .filter(|s| run.corpus(*s).exists())
            .collect(),
    };
    if chosen.is_empty() {
        bail!(
            "no corpus under {}; run `simulate` first",
            run.root().display()
        );
    }
    for split in chosen {
        let src = run.corpus(split);
        if !src.exists() {
            bail!("{} not found", src.display());
        }
        let dst = run.tensors(split);
        reset_dir(&dst)?;
        let files = trace_files(&src)?;
        files
            .par_iter()
            .map(|p| -> Result<()> {
                let t = prepare_file(p, cfg, None)?;
                write_tensors(&dst.join(format!("{}.tensors", t.task_id())), &t)
            })
            .collect::<Result<()>>()?;
        eprintln!(
            "preprocess: {split}: {} task(s) -> {}",
            files.len(),
            dst.display()
        );
    }
    update_manifest(run, "preprocess", &cfg.preprocess)
}

enum Job {
    Metric(MetricKind),
    Integrated,
}

/// Trains the per-metric models, and the integrated one when configured.
pub fn train(run: &RunDir, cfg: &Config) -> Result<()> {
    let tasks = load_split(run, Split::Train)?;
    if tasks.is_empty() {
        bail!("the train split holds no tasks");
    }
    let metrics: Vec<MetricKind> = tasks
        .iter()
        .flat_map(|t| t.metrics())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tc = cfg.training();
    let mut jobs: Vec<Job> = metrics.iter().map(|&m| Job::Metric(m)).collect();
    if cfg.training.integrated {
        jobs.push(Job::Integrated);
    }
    let trained: Vec<(String, VaeModel, TrainingSummary, f64)> = jobs
        .par_iter()
        .map(|job| -> Result<_> {
            let t0 = Instant::now();
            let (name, (model, summary)) = match job {
                Job::Metric(m) => (m.name().to_string(), train_metric_model(&tasks, *m, &tc)?),
                Job::Integrated => (
                    "integrated".to_string(),
                    train_integrated_model(&tasks, &metrics, &tc)?,
                ),
            };
            Ok((name, model, summary, t0.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;
    let dir = run.models();
    reset_dir(&dir)?;
    let mut summaries = BTreeMap::new();
    for (name, model, summary, secs) in trained {
        let path = dir.join(format!("{name}.model"));
        let mut buf = Vec::new();
        write_model(&model, &mut buf)?;
        write_file(&path, &buf)?;
        eprintln!(
            "train: {name}: {} windows, best epoch {} loss {:.3e} ({secs:.1}s)",
            summary.samples, summary.best_epoch, summary.best_loss
        );
        summaries.insert(name, summary);
    }
    write_json(&dir.join("training.json"), &summaries)?;
    update_manifest(run, "train", &(&cfg.vae, &cfg.training))
}

pub fn load_models(run: &RunDir) -> Result<Models> {
    let dir = run.models();
    if !dir.exists() {
        bail!("{} not found; run `train` first", dir.display());
    }
    let mut models = Models::default();
    for p in list_files(&dir, "model")? {
        let f = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
        let m = read_model(f).with_context(|| format!("reading {}", p.display()))?;
        match m.scope().clone() {
            ModelScope::Single(k) => {
                models.per_metric.insert(k, m);
            }
            ModelScope::Integrated(_) => models.integrated = Some(m),
        }
    }
    if models.per_metric.is_empty() && models.integrated.is_none() {
        bail!("no models in {}; run `train` first", dir.display());
    }
    Ok(models)
}

fn join_truth(
    tasks: Vec<TaskTensors>,
    truth: Vec<GroundTruth>,
) -> Result<Vec<(TaskTensors, GroundTruth)>> {
    let mut by_id: BTreeMap<String, GroundTruth> =
        truth.into_iter().map(|t| (t.task_id.clone(), t)).collect();
    tasks
        .into_iter()
        .map(|t| {
            let g = by_id
                .remove(t.task_id())
                .ok_or_else(|| anyhow!("no ground truth for task {}", t.task_id()))?;
            Ok((t, g))
        })
        .collect()
}

/// Learns the tree on the history split; writes `priority.txt` and `tree.txt`.
pub fn prioritize_cmd(run: &RunDir, cfg: &Config) -> Result<()> {
    let tasks = load_split(run, Split::History)?;
    let pairs = join_truth(tasks, read_truth(run, Split::History)?)?;
    let metrics: Vec<MetricKind> = pairs
        .iter()
        .flat_map(|(t, _)| t.metrics())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (tree, priority) = prioritize(&pairs, &metrics, &cfg.prioritize)?;
    write_file(&run.priority(), priority.to_text().as_bytes())?;
    write_file(&run.tree(), tree.to_text().as_bytes())?;
    print!("{}", priority.to_text());
    update_manifest(run, "prioritize", &cfg.prioritize)
}

pub fn load_priority(run: &RunDir, pipeline: Pipeline, models: &Models) -> Result<PriorityList> {
    let p = run.priority();
    if p.exists() {
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        return Ok(PriorityList::parse(&text)?);
    }
    if pipeline.per_metric() {
        bail!("{} not found; run `prioritize` first", p.display());
    }
    Ok(PriorityList::catalog_order(
        &models.per_metric.keys().copied().collect::<Vec<_>>(),
    ))
}

/// Per-task call records of one detect run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallsRow {
    pub task_id: String,
    pub calls: Vec<CallRecord>,
}

/// Detection over every task of a cached split.
pub fn detect(
    run: &RunDir,
    cfg: &Config,
    pipeline: Pipeline,
    split: Split,
    only: Option<&[String]>,
) -> Result<i32> {
    let models = load_models(run)?;
    let priority = load_priority(run, pipeline, &models)?;
    let mut tasks = load_split(run, split)?;
    if let Some(ids) = only {
        let known: BTreeSet<&str> = tasks.iter().map(|t| t.task_id()).collect();
        if let Some(missing) = ids.iter().find(|id| !known.contains(id.as_str())) {
            bail!("no task {missing:?} in the {split} split");
        }
        tasks.retain(|t| ids.iter().any(|id| id == t.task_id()));
    }
    let det = Detection {
        pipeline,
        models: &models,
        priority: &priority,
        cfg: &cfg.detector,
        md: &cfg.md,
    };
    let results: Vec<TaskDetection> = tasks
        .par_iter()
        .map(|t| {
            det.run(t)
                .with_context(|| format!("detecting on {}", t.task_id()))
        })
        .collect::<Result<_>>()?;
    let alerts: Vec<&Alert> = results.iter().flat_map(|r| &r.alerts).collect();
    write_jsonl(&run.alerts(pipeline.name()), &alerts)?;
    let calls: Vec<CallsRow> = results
        .iter()
        .map(|r| CallsRow {
            task_id: r.task_id.clone(),
            calls: r.calls.clone(),
        })
        .collect();
    write_jsonl(&run.calls(pipeline.name()), &calls)?;
    let secs: Vec<f64> = calls
        .iter()
        .flat_map(|c| c.calls.iter().map(|x| x.seconds))
        .collect();
    let t = Timings::from_seconds(&secs);
    eprintln!(
        "detect: {pipeline}: {} alert(s) over {} task(s); {} call(s), mean {:.3}s, max {:.3}s",
        alerts.len(),
        tasks.len(),
        t.calls,
        t.mean_seconds,
        t.max_seconds
    );
    update_manifest(
        run,
        &format!("detect-{pipeline}"),
        &(&cfg.detector, &cfg.md),
    )?;
    Ok(if alerts.is_empty() {
        EXIT_OK
    } else {
        EXIT_ALERTS
    })
}

/// Detection on one trace file; the alert stream goes to stdout.
pub fn detect_file(run: &RunDir, cfg: &Config, pipeline: Pipeline, path: &Path) -> Result<i32> {
    let models = load_models(run)?;
    let priority = load_priority(run, pipeline, &models)?;
    let known: BTreeSet<MetricKind> = models.per_metric.keys().copied().collect();
    let only = (pipeline != Pipeline::Md && pipeline != Pipeline::Int).then_some(&known);
    let t = prepare_file(path, cfg, only)?;
    let det = Detection {
        pipeline,
        models: &models,
        priority: &priority,
        cfg: &cfg.detector,
        md: &cfg.md,
    };
    let r = det.run(&t)?;
    let mut out = std::io::stdout().lock();
    for a in &r.alerts {
        writeln!(out, "{}", serde_json::to_string(a)?)?;
    }
    Ok(if r.alerts.is_empty() {
        EXIT_OK
    } else {
        EXIT_ALERTS
    })
}

/// Scores a detect run on `split`; the task set is the one detection ran on.
pub fn evaluate_cmd(run: &RunDir, pipeline: Pipeline, split: Split) -> Result<EvalReport> {
    let name = pipeline.name();
    let calls_path = run.calls(name);
    if !calls_path.exists() {
        bail!(
            "{} not found; run `detect --pipeline {name}` first",
            calls_path.display()
        );
    }
    let calls: Vec<CallsRow> = read_jsonl(&calls_path)?;
    let ids: BTreeSet<&str> = calls.iter().map(|c| c.task_id.as_str()).collect();
    let truth: Vec<GroundTruth> = read_truth(run, split)?
        .into_iter()
        .filter(|t| ids.contains(t.task_id.as_str()))
        .collect();
    let mut alerts: BTreeMap<String, Vec<Alert>> =
        ids.iter().map(|id| (id.to_string(), Vec::new())).collect();
    for a in read_jsonl::<Alert>(&run.alerts(name))? {
        alerts.entry(a.task_id.clone()).or_default().push(a);
    }
    let mut report = evaluate(name, &alerts, &truth)?;
    let secs: Vec<f64> = calls
        .iter()
        .flat_map(|c| c.calls.iter().map(|x| x.seconds))
        .collect();
    report.timings = Some(Timings::from_seconds(&secs));
    write_json(&run.evaluation(name), &report)?;
    print!("{}", report.to_table());
    update_manifest(run, &format!("evaluate-{name}"), &split)?;
    Ok(report)
}

pub fn read_evaluation(run: &RunDir, pipeline: Pipeline) -> Result<Option<EvalReport>> {
    let p = run.evaluation(pipeline.name());
    if p.exists() {
        Ok(Some(read_json(&p)?))
    } else {
        Ok(None)
    }
}
