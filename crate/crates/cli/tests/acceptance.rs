//! Acceptance suite. Every criterion prints one PASS or FAIL line on stdout
//! as soon as it is decided; the test fails if any criterion failed.

#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use trainwatch_cli::report::replay_alerts;
use trainwatch_core::baselines::{stat_features, MdConfig, MOMENT_EPSILON};
use trainwatch_core::detector::{distance_sums, Alert, DetectorConfig, DistanceKind, ScoreTrace};
use trainwatch_core::eval::{evaluate, EvalReport};
use trainwatch_core::pipeline::{call_ends, Detection, Models, Pipeline};
use trainwatch_core::prioritization::{
    best_split, max_z_feature, zscore_per_machine, Label, PriorityList, ZScoreFeature, STD_EPSILON,
};
use trainwatch_core::simulator::{plan_corpus, CorpusTemplate, FaultMix, GroundTruth};
use trainwatch_core::tensor::{window_iter, AlignedTensor, TaskTensors};
use trainwatch_core::vae::{ModelScope, VaeHyperparams, VaeModel};
use trainwatch_core::workflow::{
    prioritize, train_integrated_model, train_metric_model, PrioritizeConfig, TrainingConfig,
};
use trainwatch_core::MetricKind;

const EVAL_TASKS: usize = 200;
const EVAL_SEED: u64 = 7;
const TRAIN_TASKS: usize = 16;
const TRAIN_SEED: u64 = 101;
const HISTORY_TASKS: usize = 100;
const HISTORY_SEED: u64 = 202;
const HELD_OUT_SEED: u64 = 303;
const DEFAULT_SIGMA: f64 = 0.005;
const HIGH_SIGMA: f64 = 0.15;
const ORACLE_TOL: f64 = 1e-9;

struct Verdicts(Vec<(u32, bool)>);

impl Verdicts {
    fn record(&mut self, id: u32, title: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{tag} criterion {id:>2} {title}: {detail}");
        let _ = out.flush();
        self.0.push((id, pass));
    }
}

struct Corpus {
    tasks: Vec<TaskTensors>,
    truth: Vec<GroundTruth>,
}

fn corpus(n: usize, tmpl: &CorpusTemplate, mix: &FaultMix, seed: u64) -> Corpus {
    let metrics = tmpl.metric_kinds();
    let pairs: Vec<(TaskTensors, GroundTruth)> = plan_corpus(n, tmpl, mix, seed)
        .unwrap()
        .par_iter()
        .map(|p| {
            let task = p.generate().unwrap();
            let t = TaskTensors::prepare(&task.trace, &metrics, &tmpl.bounds, tmpl.grid_interval)
                .unwrap();
            (t, task.truth)
        })
        .collect();
    let (tasks, truth) = pairs.into_iter().unzip();
    Corpus { tasks, truth }
}

/// Models, priority and eval corpus at one noise level.
struct Stack {
    tmpl: CorpusTemplate,
    models: Models,
    priority: PriorityList,
    eval: Corpus,
    train_seconds: BTreeMap<String, f64>,
    setup_seconds: f64,
}

fn build_stack(sigma: f64, integrated: bool) -> Stack {
    let t0 = Instant::now();
    let tmpl = CorpusTemplate::standard(sigma);
    let metrics = tmpl.metric_kinds();
    let train = corpus(TRAIN_TASKS, &tmpl, &FaultMix::none(), TRAIN_SEED).tasks;
    let tc = TrainingConfig::default();
    let mut jobs: Vec<Option<MetricKind>> = metrics.iter().copied().map(Some).collect();
    if integrated {
        jobs.push(None);
    }
    let trained: Vec<(Option<MetricKind>, VaeModel, f64)> = jobs
        .par_iter()
        .map(|job| {
            let s = Instant::now();
            let (model, _) = match job {
                Some(m) => train_metric_model(&train, *m, &tc).unwrap(),
                None => train_integrated_model(&train, &metrics, &tc).unwrap(),
            };
            (*job, model, s.elapsed().as_secs_f64())
        })
        .collect();
    let mut models = Models::default();
    let mut train_seconds = BTreeMap::new();
    for (job, model, secs) in trained {
        match job {
            Some(m) => {
                train_seconds.insert(m.name().to_string(), secs);
                models.per_metric.insert(m, model);
            }
            None => {
                train_seconds.insert("integrated".to_string(), secs);
                models.integrated = Some(model);
            }
        }
    }
    let history = corpus(HISTORY_TASKS, &tmpl, &FaultMix::production(), HISTORY_SEED);
    let pairs: Vec<(TaskTensors, GroundTruth)> =
        history.tasks.into_iter().zip(history.truth).collect();
    let (_, priority) = prioritize(&pairs, &metrics, &PrioritizeConfig::default()).unwrap();
    drop(pairs);
    let eval = corpus(EVAL_TASKS, &tmpl, &FaultMix::production(), EVAL_SEED);
    Stack {
        tmpl,
        models,
        priority,
        eval,
        train_seconds,
        setup_seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Fall-through detection over `which` eval tasks (all when `None`).
fn detect(
    stack: &Stack,
    pipeline: Pipeline,
    cfg: &DetectorConfig,
    which: Option<&[usize]>,
) -> (EvalReport, f64) {
    let t0 = Instant::now();
    let md = MdConfig::default();
    let det = Detection {
        pipeline,
        models: &stack.models,
        priority: &stack.priority,
        cfg,
        md: &md,
    };
    let idx: Vec<usize> =
        which.map_or_else(|| (0..stack.eval.tasks.len()).collect(), <[usize]>::to_vec);
    let alerts: BTreeMap<String, Vec<Alert>> = idx
        .par_iter()
        .map(|&i| {
            let r = det.run(&stack.eval.tasks[i]).unwrap();
            (r.task_id, r.alerts)
        })
        .collect();
    let truth: Vec<GroundTruth> = idx.iter().map(|&i| stack.eval.truth[i].clone()).collect();
    (
        evaluate(pipeline.name(), &alerts, &truth).unwrap(),
        t0.elapsed().as_secs_f64(),
    )
}

fn f1(r: &EvalReport) -> f64 {
    r.f1.unwrap_or(0.0)
}

fn summary(r: &EvalReport) -> String {
    let c = &r.overall;
    format!(
        "{} P {:.3} R {:.3} F1 {:.3} (TP {} FP {} FN {} TN {})",
        r.pipeline,
        r.precision.unwrap_or(0.0),
        r.recall.unwrap_or(0.0),
        f1(r),
        c.tp,
        c.fp,
        c.fn_,
        c.tn
    )
}

fn held_out_mse(stack: &Stack) -> BTreeMap<MetricKind, f64> {
    let held = corpus(4, &stack.tmpl, &FaultMix::none(), HELD_OUT_SEED);
    stack
        .models
        .per_metric
        .par_iter()
        .map(|(&m, model)| {
            let mut ws = model.workspace();
            let (mut total, mut n) = (0.0, 0usize);
            for t in &held.tasks {
                for w in window_iter(t.get(m).unwrap(), model.window_len(), 1).unwrap() {
                    total += model.reconstruct(w.data, &mut ws).unwrap().mse;
                    n += 1;
                }
            }
            (m, total / n as f64)
        })
        .collect()
}

type AlertKey = (String, String, Option<MetricKind>);

fn alert_keys(alerts: &BTreeMap<String, Vec<Alert>>) -> BTreeSet<AlertKey> {
    alerts
        .values()
        .flatten()
        .map(|a| (a.task_id.clone(), a.machine_id.clone(), a.metric))
        .collect()
}

/// Alert sets along a sweep, each checked to be contained in the previous one.
fn nested_sweep(
    tasks: &[TaskTensors],
    traces: &[Vec<Vec<ScoreTrace>>],
    cfgs: &[DetectorConfig],
) -> (bool, Vec<usize>) {
    let sets: Vec<BTreeSet<AlertKey>> = cfgs
        .iter()
        .map(|c| alert_keys(&replay_alerts(tasks, traces, c)))
        .collect();
    let nested = sets.windows(2).all(|p| p[1].is_subset(&p[0]));
    (nested, sets.iter().map(BTreeSet::len).collect())
}

fn monotonicity(stack: &Stack) -> (bool, String) {
    let tasks: Vec<TaskTensors> = stack.eval.tasks.iter().take(30).cloned().collect();
    let base = DetectorConfig {
        exhaustive: true,
        ..DetectorConfig::default()
    };
    let md = MdConfig::default();
    let det = Detection {
        pipeline: Pipeline::Minder,
        models: &stack.models,
        priority: &stack.priority,
        cfg: &base,
        md: &md,
    };
    let traces: Vec<Vec<Vec<ScoreTrace>>> = tasks
        .par_iter()
        .map(|t| {
            call_ends(t.timesteps(), t.grid_interval(), &base)
                .into_iter()
                .map(|end| det.traces(t, end).unwrap())
                .collect()
        })
        .collect();
    let loose = DetectorConfig {
        continuity_seconds: 30.0,
        ..base.clone()
    };
    let thresholds: Vec<DetectorConfig> = (0..=25)
        .map(|i| DetectorConfig {
            similarity_threshold: i as f64 * 0.1,
            ..loose.clone()
        })
        .collect();
    let mut conts: Vec<f64> = (0..=20).map(|i| i as f64 * 15.0).collect();
    conts.extend([360.0, 480.0, 600.0, 720.0, 840.0]);
    let continuities: Vec<DetectorConfig> = conts
        .iter()
        .map(|&c| DetectorConfig {
            continuity_seconds: c,
            ..base.clone()
        })
        .collect();
    let (th_ok, th_counts) = nested_sweep(&tasks, &traces, &thresholds);
    let (c_ok, c_counts) = nested_sweep(&tasks, &traces, &continuities);
    let detail = format!(
        "{} threshold points 0.0..2.5 alerts {:?} nested {th_ok}; {} continuity points 0..840 s alerts {:?} nested {c_ok}",
        thresholds.len(),
        th_counts,
        continuities.len(),
        c_counts
    );
    let varied = th_counts.first() > th_counts.last() && c_counts.first() > c_counts.last();
    (
        th_ok && c_ok && varied && thresholds.len() >= 20 && continuities.len() >= 20,
        detail,
    )
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_TOL * b.abs().max(1.0)
}

fn gradient_suite(draws: usize) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut worst: f64 = 0.0;
    let mut params = 0usize;
    for _ in 0..draws {
        let width = rng.gen_range(1..4);
        let scope = if width == 1 {
            ModelScope::Single(MetricKind::ALL[rng.gen_range(0..MetricKind::ALL.len())])
        } else {
            ModelScope::Integrated(MetricKind::ALL[..width].to_vec())
        };
        let hp = VaeHyperparams {
            w: rng.gen_range(2..9),
            hidden_size: rng.gen_range(1..5),
            latent_size: rng.gen_range(1..4),
            lstm_layers: rng.gen_range(1..3),
            kl_weight: rng.gen_range(0.0..1.0),
            seed: rng.gen(),
            ..VaeHyperparams::default()
        };
        let mut m = VaeModel::initialized(scope, hp.clone()).unwrap();
        let x: Vec<f64> = (0..hp.w * width).map(|_| rng.gen_range(0.0..1.0)).collect();
        let eps = rand_vec(&mut rng, hp.latent_size);
        let mut ws = m.workspace();
        let mut grad = vec![0.0; m.param_count()];
        m.loss_and_grad(&x, &eps, &mut grad, &mut ws).unwrap();
        let h = 1e-6;
        for k in 0..m.param_count() {
            let orig = m.params()[k];
            m.params_mut()[k] = orig + h;
            let up = m.loss(&x, &eps, &mut ws).unwrap().total;
            m.params_mut()[k] = orig - h;
            let down = m.loss(&x, &eps, &mut ws).unwrap().total;
            m.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        params += m.param_count();
    }
    (
        worst < 1e-4,
        format!("{draws} draws, {params} parameters, worst relative error {worst:.2e} < 1e-4"),
    )
}

fn brute_sums(e: &[Vec<f64>], kind: DistanceKind) -> Vec<f64> {
    let pair = |a: &[f64], b: &[f64]| -> f64 {
        let d = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match kind {
            DistanceKind::Euclidean => d.map(|v| v * v).sum::<f64>().sqrt(),
            DistanceKind::Manhattan => d.sum(),
            DistanceKind::Chebyshev => d.fold(0.0, f64::max),
        }
    };
    (0..e.len())
        .map(|i| {
            (0..e.len())
                .filter(|&j| j != i)
                .map(|j| pair(&e[i], &e[j]))
                .sum()
        })
        .collect()
}

fn brute_z(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().rev().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var.sqrt() < STD_EPSILON {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / var.sqrt()).collect()
}

fn random_rows(rng: &mut ChaCha8Rng, m: usize, w: usize) -> Vec<Vec<f64>> {
    let flat = rng.gen_bool(0.1);
    (0..m)
        .map(|_| {
            (0..w)
                .map(|_| if flat { 0.5 } else { rng.gen_range(0.0..1.0) })
                .collect()
        })
        .collect()
}

fn tensor(metric: MetricKind, rows: Vec<Vec<f64>>) -> AlignedTensor {
    let ids = (0..rows.len()).map(|i| format!("m{i:02}")).collect();
    AlignedTensor::from_rows("t", metric, ids, 0.0, 1.0, rows, true).unwrap()
}

fn gini(c: [f64; 2]) -> f64 {
    let n = c[0] + c[1];
    if n == 0.0 {
        0.0
    } else {
        1.0 - (c[0] / n).powi(2) - (c[1] / n).powi(2)
    }
}

const SPLIT_METRICS: [MetricKind; 3] = [
    MetricKind::CpuUsage,
    MetricKind::PfcTxPacketRate,
    MetricKind::GpuDutyCycle,
];

/// Gain of cutting `rows` on `metric` at `th`, or `None` if one side is empty.
fn partition_gain(rows: &[ZScoreFeature], metric: MetricKind, th: f64) -> Option<f64> {
    let mut left = [0.0; 2];
    let mut right = [0.0; 2];
    for r in rows {
        let side = if r.per_metric_max_z[&metric] <= th {
            &mut left
        } else {
            &mut right
        };
        side[(r.label == Label::Abnormal) as usize] += 1.0;
    }
    let (nl, nr) = (left[0] + left[1], right[0] + right[1]);
    if nl == 0.0 || nr == 0.0 {
        return None;
    }
    let parent = gini([left[0] + right[0], left[1] + right[1]]);
    Some(parent - (nl * gini(left) + nr * gini(right)) / (nl + nr))
}

fn oracle_suite(instances: usize) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let mut bad: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fail = |name: &'static str, ok: bool| {
        if !ok {
            *bad.entry(name).or_default() += 1;
        }
    };
    for _ in 0..instances {
        let m = rng.gen_range(2..=12);
        let w = rng.gen_range(1..=16);

        let e: Vec<Vec<f64>> = (0..m).map(|_| rand_vec(&mut rng, w)).collect();
        for kind in [
            DistanceKind::Euclidean,
            DistanceKind::Manhattan,
            DistanceKind::Chebyshev,
        ] {
            let got = distance_sums(&e, kind).unwrap();
            fail(
                "distance_sums",
                got.iter()
                    .zip(brute_sums(&e, kind))
                    .all(|(a, b)| close(*a, b)),
            );
        }

        let rows = random_rows(&mut rng, m, w);
        let t = tensor(MetricKind::CpuUsage, rows.clone());
        let at = rng.gen_range(0..w);
        let col: Vec<f64> = rows.iter().map(|r| r[at]).collect();
        let got = zscore_per_machine(&t, at).unwrap();
        fail(
            "zscore_per_machine",
            got.iter().zip(brute_z(&col)).all(|(a, b)| close(*a, b)),
        );

        let k = rng.gen_range(1..=3);
        let tensors: Vec<AlignedTensor> = MetricKind::ALL[..k]
            .iter()
            .enumerate()
            .map(|(i, &metric)| {
                tensor(
                    metric,
                    if i == 0 {
                        rows.clone()
                    } else {
                        random_rows(&mut rng, m, w)
                    },
                )
            })
            .collect();
        let task = TaskTensors::from_tensors(tensors.clone()).unwrap();
        let start = rng.gen_range(0..w);
        let end = rng.gen_range(start + 1..=w);
        let f = max_z_feature(&task, (start, end), Label::Normal).unwrap();
        let ok = tensors.iter().all(|tt| {
            let want = (start..end)
                .flat_map(|i| brute_z(&tt.column(i)))
                .fold(0.0f64, |a, z| a.max(z.abs()));
            close(f.per_metric_max_z[&tt.metric()], want)
        });
        fail("max_z_feature", ok && f.per_metric_max_z.len() == k);

        let data = &rows[0];
        let s = stat_features(data);
        let n = data.len() as f64;
        let mean = data.iter().rev().sum::<f64>() / n;
        let mom = |p: i32| data.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
        let var = mom(2);
        let (skew, kurt) = if var < MOMENT_EPSILON {
            (0.0, 0.0)
        } else {
            (mom(3) / var.powf(1.5), mom(4) / (var * var))
        };
        fail(
            "stat_features",
            close(s.mean, mean)
                && close(s.variance, var)
                && close(s.skewness, skew)
                && close(s.kurtosis, kurt),
        );

        let levels = rng.gen_range(2..8);
        let n_rows = rng.gen_range(2..=24);
        let feats: Vec<ZScoreFeature> = (0..n_rows)
            .map(|i| ZScoreFeature {
                task_id: format!("t{i}"),
                window_span: (0, 1),
                per_metric_max_z: SPLIT_METRICS
                    .iter()
                    .map(|&mk| (mk, rng.gen_range(0..levels) as f64 * 0.5))
                    .collect(),
                label: if rng.gen_bool(0.4) {
                    Label::Abnormal
                } else {
                    Label::Normal
                },
            })
            .collect();
        let refs: Vec<&ZScoreFeature> = feats.iter().collect();
        let brute = SPLIT_METRICS
            .iter()
            .flat_map(|&mk| feats.iter().map(move |p| (mk, p.per_metric_max_z[&mk])))
            .filter_map(|(mk, th)| partition_gain(&feats, mk, th))
            .fold(None, |a: Option<f64>, g| Some(a.map_or(g, |x| x.max(g))));
        let ok = match (best_split(&refs, &SPLIT_METRICS, 1), brute) {
            (Some(sp), Some(g)) => {
                close(sp.gain, g)
                    && partition_gain(&feats, sp.metric, sp.threshold).is_some_and(|x| close(x, g))
            }
            (None, None) => true,
            _ => false,
        };
        fail("cart_root_split", ok);
    }
    let names = [
        "distance_sums",
        "zscore_per_machine",
        "max_z_feature",
        "stat_features",
        "cart_root_split",
    ];
    let detail = format!(
        "{instances} instances each of {} (M <= 12, w <= 16, tol 1e-9); mismatches {:?}",
        names.join(", "),
        bad
    );
    (bad.is_empty(), detail)
}

fn run_cli(dir: &Path, config: &Path, jobs: usize, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_trainwatch"))
        .arg("--config")
        .arg(config)
        .arg("--run-dir")
        .arg(dir)
        .arg("--jobs")
        .arg(jobs.to_string())
        .args(args)
        .output()
        .unwrap();
    out.status.code().unwrap_or(-1)
}

const TINY_CONFIG: &str = "\
[simulator]
tasks = 6
train_tasks = 2
history_tasks = 12
machine_choices = [4, 8]
duration = 400.0
earliest_onset = 30.0
fault_duration = [150.0, 250.0]

[vae]
epochs = 3

[training]
max_windows = 256

[detector]
lookback_seconds = 360.0
";

fn cli_run(root: &Path, config: &Path, jobs: usize) -> Result<(), String> {
    let stages: [&[&str]; 9] = [
        &["simulate"],
        &["preprocess"],
        &["train"],
        &["prioritize"],
        &["detect"],
        &["evaluate"],
        &["detect", "--pipeline", "md"],
        &["evaluate", "--pipeline", "md"],
        &["report", "--sweep"],
    ];
    for s in stages {
        let code = run_cli(root, config, jobs, s);
        let ok = if s[0] == "detect" {
            code == 0 || code == 2
        } else {
            code == 0
        };
        if !ok {
            return Err(format!("`{}` exited {code}", s.join(" ")));
        }
    }
    Ok(())
}

fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files: Vec<String> = vec![
        "alerts.jsonl".into(),
        "alerts-md.jsonl".into(),
        "report.md".into(),
        "priority.txt".into(),
    ];
    for e in std::fs::read_dir(root.join("models")).unwrap() {
        let name = e.unwrap().file_name().into_string().unwrap();
        if name.ends_with(".model") {
            files.push(format!("models/{name}"));
        }
    }
    files
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(root.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

fn determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if let Err(e) = cli_run(&a, &config, 1).and_then(|_| cli_run(&b, &config, 3)) {
        return (false, e);
    }
    let (fa, fb) = (artifacts(&a), artifacts(&b));
    let differing: Vec<&String> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();
    let models = fa.keys().filter(|k| k.starts_with("models/")).count();
    let ok = differing.is_empty() && fa.keys().eq(fb.keys()) && models > 0;
    (
        ok,
        format!(
            "two CLI runs (1 and 3 worker threads): {models} model files, alert streams, priority list and report compared; differing {differing:?}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut v = Verdicts(Vec::new());

    let default = build_stack(DEFAULT_SIGMA, false);
    let cfg = DetectorConfig::default();
    let (minder, minder_secs) = detect(&default, Pipeline::Minder, &cfg, None);
    let total = default.setup_seconds + minder_secs;
    let (p, r) = (
        minder.precision.unwrap_or(0.0),
        minder.recall.unwrap_or(0.0),
    );
    v.record(
        1,
        "default corpus quality and runtime",
        p >= 0.90 && r >= 0.85 && total <= 600.0,
        format!(
            "{}; precision >= 0.90, recall >= 0.85; end to end {total:.0} s <= 600 s (setup {:.0} s, detection {minder_secs:.0} s)",
            summary(&minder),
            default.setup_seconds
        ),
    );

    let (md, _) = detect(&default, Pipeline::Md, &cfg, None);
    v.record(
        2,
        "MD baseline below primary",
        f1(&md) < f1(&minder),
        format!("{} < {:.3}", summary(&md), f1(&minder)),
    );

    let clean: Vec<usize> = (0..default.eval.truth.len())
        .filter(|&i| !default.eval.truth[i].is_faulty())
        .collect();
    let off = DetectorConfig {
        continuity_seconds: 0.0,
        ..cfg.clone()
    };
    let (fp_off, _) = detect(&default, Pipeline::Minder, &off, Some(&clean));
    let (fp_on, _) = detect(&default, Pipeline::Minder, &cfg, Some(&clean));
    v.record(
        4,
        "continuity suppresses false alarms",
        fp_off.overall.fp > fp_on.overall.fp,
        format!(
            "{} clean tasks: FP {} with continuity 0 s > FP {} with 240 s",
            clean.len(),
            fp_off.overall.fp,
            fp_on.overall.fp
        ),
    );

    let mse = held_out_mse(&default);
    let worst_mse = mse.values().fold(0.0f64, |a, &b| a.max(b));
    let worst_secs = default
        .train_seconds
        .values()
        .fold(0.0f64, |a, &b| a.max(b));
    v.record(
        5,
        "reconstruction quality",
        worst_mse < 1e-4 && worst_secs <= 120.0 && mse.len() == 10,
        format!(
            "held-out clean MSE per metric {:?}; worst {worst_mse:.2e} < 1e-4; slowest training {worst_secs:.1} s <= 120 s",
            mse.iter().map(|(m, e)| format!("{m} {e:.1e}")).collect::<Vec<_>>()
        ),
    );

    let top5: Vec<MetricKind> = default.priority.metrics().into_iter().take(5).collect();
    let wanted = [
        MetricKind::PfcTxPacketRate,
        MetricKind::CpuUsage,
        MetricKind::GpuDutyCycle,
    ];
    v.record(
        8,
        "learned metric priority",
        wanted.iter().all(|m| top5.contains(m)),
        format!("top 5 {top5:?} contains {wanted:?}"),
    );

    let (ok, detail) = monotonicity(&default);
    v.record(10, "monotone alert sets", ok, detail);
    drop(default);

    let noisy = build_stack(HIGH_SIGMA, true);
    let reports: Vec<EvalReport> = [
        Pipeline::Minder,
        Pipeline::Raw,
        Pipeline::Con,
        Pipeline::Int,
    ]
    .into_iter()
    .map(|p| detect(&noisy, p, &cfg, None).0)
    .collect();
    let (prim, raw, con, int) = (&reports[0], &reports[1], &reports[2], &reports[3]);
    v.record(
        3,
        "ablations on a high-noise corpus",
        raw.recall.unwrap_or(0.0) < prim.recall.unwrap_or(0.0)
            && f1(con) <= f1(prim)
            && f1(int) <= f1(prim),
        format!(
            "sigma {HIGH_SIGMA}: {}; {}; {}; {}",
            summary(prim),
            summary(raw),
            summary(con),
            summary(int)
        ),
    );
    drop(noisy);

    let (ok, detail) = gradient_suite(120);
    v.record(6, "analytic gradients", ok, detail);

    let (ok, detail) = oracle_suite(1200);
    v.record(7, "brute-force oracles", ok, detail);

    let (ok, detail) = determinism();
    v.record(9, "determinism", ok, detail);

    let failed: Vec<u32> = v.0.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
