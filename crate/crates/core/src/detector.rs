//! Online faulty-machine detection.
//!
//! Each window of each machine is embedded (denoised by the metric's model),
//! machines are scored by the standard score of their summed distance to
//! every other machine, and the top machine becomes a candidate when its
//! score clears the similarity threshold. A candidate turns into an alert
//! once it has held for `continuity_seconds` of consecutive windows.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MetricKind;
use crate::prioritization::{standard_scores, PriorityList};
use crate::tensor::{AlignedTensor, TaskTensors};
use crate::vae::{VaeModel, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    Manhattan,
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    #[default]
    DenoisedVector,
    LatentMu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub similarity_threshold: f64,
    /// Zero disables the continuity check: the first candidate alerts.
    pub continuity_seconds: f64,
    pub window_w: usize,
    pub stride: usize,
    pub lookback_seconds: f64,
    pub call_interval_seconds: f64,
    pub distance_kind: DistanceKind,
    pub embedding_source: EmbeddingSource,
    /// Scan every metric instead of stopping at the first that alerts.
    pub exhaustive: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 1.0,
            continuity_seconds: 240.0,
            window_w: 8,
            stride: 1,
            lookback_seconds: 900.0,
            call_interval_seconds: 480.0,
            distance_kind: DistanceKind::Euclidean,
            embedding_source: EmbeddingSource::DenoisedVector,
            exhaustive: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, grid_interval: f64) -> Result<()> {
        if self.window_w < 2 || self.stride == 0 {
            return Err(Error::InvalidParameter(
                "window_w must be >= 2 and stride >= 1".into(),
            ));
        }
        if self.similarity_threshold.is_nan() {
            return Err(Error::InvalidParameter(
                "similarity threshold is NaN".into(),
            ));
        }
        let step = self.stride as f64 * grid_interval;
        if !(self.continuity_seconds == 0.0 || self.continuity_seconds >= step)
            || !self.continuity_seconds.is_finite()
        {
            return Err(Error::InvalidParameter(format!(
                "continuity_seconds must be 0 or >= stride × grid interval ({step} s)"
            )));
        }
        let need = self.continuity_seconds + self.window_w as f64 * grid_interval;
        if !(self.lookback_seconds >= need) {
            return Err(Error::InvalidParameter(format!(
                "lookback {} s must cover continuity plus one window ({need} s)",
                self.lookback_seconds
            )));
        }
        if !(self.call_interval_seconds > 0.0) {
            return Err(Error::InvalidParameter("call interval must be > 0".into()));
        }
        Ok(())
    }

    /// Consecutive hits needed before an alert.
    pub fn hits_required(&self, grid_interval: f64) -> usize {
        let step = self.stride as f64 * grid_interval;
        ((self.continuity_seconds / step) - 1e-9).ceil().max(1.0) as usize
    }
}

pub fn distance(a: &[f64], b: &[f64], kind: DistanceKind) -> f64 {
    let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    match kind {
        DistanceKind::Euclidean => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        DistanceKind::Manhattan => diffs.sum(),
        DistanceKind::Chebyshev => diffs.fold(0.0, f64::max),
    }
}

/// Sum of distances from each embedding to every other one.
pub fn distance_sums<V: AsRef<[f64]>>(embeddings: &[V], kind: DistanceKind) -> Result<Vec<f64>> {
    let m = embeddings.len();
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "{m} embeddings; at least 2 required"
        )));
    }
    let dim = embeddings[0].as_ref().len();
    if let Some(bad) = embeddings.iter().find(|e| e.as_ref().len() != dim) {
        return Err(Error::LengthMismatch(dim, bad.as_ref().len()));
    }
    let mut sums = vec![0.0; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = distance(embeddings[i].as_ref(), embeddings[j].as_ref(), kind);
            sums[i] += d;
            sums[j] += d;
        }
    }
    Ok(sums)
}

/// Standard scores of the distance sums.
pub fn normal_scores(sums: &[f64]) -> Vec<f64> {
    standard_scores(sums)
}

/// Index and value of the largest score; ties go to the lower index.
pub fn argmax(scores: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &s) in scores.iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowVerdict {
    /// `None` for pipelines that score all metrics jointly.
    pub metric: Option<MetricKind>,
    pub window_start: usize,
    pub candidate: Option<usize>,
    pub normal_scores: Vec<f64>,
}

impl WindowVerdict {
    pub fn from_scores(
        metric: Option<MetricKind>,
        window_start: usize,
        normal_scores: Vec<f64>,
        threshold: f64,
    ) -> Self {
        let (i, best) = argmax(&normal_scores);
        Self {
            metric,
            window_start,
            candidate: (best > threshold).then_some(i),
            normal_scores,
        }
    }

    pub fn peak_score(&self) -> f64 {
        argmax(&self.normal_scores).1
    }
}

fn check_start(tensor: &AlignedTensor, start: usize, w: usize) -> Result<()> {
    let t = tensor.timesteps();
    if w > t {
        return Err(Error::WindowTooLong { w, len: t });
    }
    if start + w > t {
        return Err(Error::WindowOutOfRange { start, last: t - w });
    }
    Ok(())
}

/// Embedding of one machine's window under `source`.
pub(crate) fn embed(
    model: &VaeModel,
    data: &[f64],
    source: EmbeddingSource,
    ws: &mut Workspace,
) -> Result<Vec<f64>> {
    let r = model.reconstruct(data, ws)?;
    Ok(match source {
        EmbeddingSource::DenoisedVector => r.denoised,
        EmbeddingSource::LatentMu => r.mu,
    })
}

fn check_model(tensor: &AlignedTensor, model: &VaeModel, cfg: &DetectorConfig) -> Result<()> {
    if model.metric() != Some(tensor.metric()) {
        return Err(Error::MetricMismatch {
            model: model.scope().to_string(),
            window: tensor.metric(),
        });
    }
    if model.window_len() != cfg.window_w {
        return Err(Error::ShapeMismatch(format!(
            "model window {} but detector window {}",
            model.window_len(),
            cfg.window_w
        )));
    }
    if !tensor.is_normalized() {
        return Err(Error::InvalidParameter(format!(
            "tensor for {} is not normalized",
            tensor.metric()
        )));
    }
    Ok(())
}

/// Similarity check of every machine's window starting at `window_start`.
pub fn detect_window(
    tensor: &AlignedTensor,
    model: &VaeModel,
    window_start: usize,
    cfg: &DetectorConfig,
) -> Result<WindowVerdict> {
    let e = embed_windows(tensor, Some(model), &[window_start], cfg)?;
    Ok(WindowVerdict::from_scores(
        Some(tensor.metric()),
        window_start,
        scores_at(&[&e], 0, cfg.distance_kind)?,
        cfg.similarity_threshold,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub task_id: String,
    pub machine_id: String,
    pub metric: Option<MetricKind>,
    /// Epoch seconds of the first window of the run.
    pub first_window_start: f64,
    /// Epoch seconds of the window that completed the run.
    pub last_window_start: f64,
    pub first_window_index: usize,
    pub last_window_index: usize,
    pub consecutive_hits: usize,
    pub peak_normal_score: f64,
}

/// Task context needed to turn candidate runs into alerts.
#[derive(Debug, Clone, PartialEq)]
pub struct AlertContext {
    pub task_id: String,
    pub machine_ids: Vec<String>,
    pub grid_start: f64,
    pub grid_interval: f64,
}

impl AlertContext {
    pub fn of(tensors: &TaskTensors) -> Self {
        Self {
            task_id: tensors.task_id().to_string(),
            machine_ids: tensors.machine_ids().to_vec(),
            grid_start: tensors.time_at(0),
            grid_interval: tensors.grid_interval(),
        }
    }

    fn time_at(&self, i: usize) -> f64 {
        self.grid_start + i as f64 * self.grid_interval
    }
}

#[derive(Debug, Clone)]
struct Run {
    machine: usize,
    first: usize,
    hits: usize,
    peak: f64,
}

/// Per-metric consecutive-candidate counter.
#[derive(Debug, Clone)]
pub struct ContinuityTracker {
    metric: Option<MetricKind>,
    ctx: AlertContext,
    required: usize,
    run: Option<Run>,
    last_start: Option<usize>,
    alerted: BTreeSet<usize>,
}

impl ContinuityTracker {
    pub fn new(metric: Option<MetricKind>, ctx: AlertContext, cfg: &DetectorConfig) -> Self {
        let required = cfg.hits_required(ctx.grid_interval);
        Self {
            metric,
            ctx,
            required,
            run: None,
            last_start: None,
            alerted: BTreeSet::new(),
        }
    }

    pub fn hits_required(&self) -> usize {
        self.required
    }

    pub fn update(&mut self, verdict: &WindowVerdict) -> Result<Option<Alert>> {
        self.observe(
            verdict.window_start,
            verdict.candidate,
            verdict.peak_score(),
        )
    }

    /// Same as [`ContinuityTracker::update`] from the candidate and its score.
    pub fn observe(
        &mut self,
        window_start: usize,
        candidate: Option<usize>,
        score: f64,
    ) -> Result<Option<Alert>> {
        if let Some(last) = self.last_start {
            if window_start <= last {
                return Err(Error::OutOfOrderVerdict {
                    last,
                    got: window_start,
                });
            }
        }
        self.last_start = Some(window_start);
        let Some(machine) = candidate else {
            self.run = None;
            return Ok(None);
        };
        match &mut self.run {
            Some(r) if r.machine == machine => {
                r.hits += 1;
                r.peak = r.peak.max(score);
            }
            _ => {
                self.run = Some(Run {
                    machine,
                    first: window_start,
                    hits: 1,
                    peak: score,
                })
            }
        }
        let r = self.run.as_ref().expect("run set above");
        if r.hits >= self.required && !self.alerted.contains(&machine) {
            self.alerted.insert(machine);
            return Ok(Some(Alert {
                task_id: self.ctx.task_id.clone(),
                machine_id: self.ctx.machine_ids[machine].clone(),
                metric: self.metric,
                first_window_start: self.ctx.time_at(r.first),
                last_window_start: self.ctx.time_at(window_start),
                first_window_index: r.first,
                last_window_index: window_start,
                consecutive_hits: r.hits,
                peak_normal_score: r.peak,
            }));
        }
        Ok(None)
    }
}

/// Top machine and its normal score for every window start of one scorer.
/// Candidates at any threshold follow from it, so sweeps reuse one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub metric: Option<MetricKind>,
    pub starts: Vec<usize>,
    pub best_machine: Vec<usize>,
    pub best_score: Vec<f64>,
}

impl ScoreTrace {
    pub fn new(metric: Option<MetricKind>) -> Self {
        Self {
            metric,
            starts: Vec::new(),
            best_machine: Vec::new(),
            best_score: Vec::new(),
        }
    }

    pub fn push(&mut self, start: usize, scores: &[f64]) {
        let (i, s) = argmax(scores);
        self.starts.push(start);
        self.best_machine.push(i);
        self.best_score.push(s);
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Number of windows with a candidate at `threshold`.
    pub fn candidates(&self, threshold: f64) -> usize {
        self.best_score.iter().filter(|&&s| s > threshold).count()
    }

    /// Alerts the continuity check raises on this trace.
    pub fn alerts(&self, ctx: &AlertContext, cfg: &DetectorConfig) -> Vec<Alert> {
        let mut tracker = ContinuityTracker::new(self.metric, ctx.clone(), cfg);
        let mut out = Vec::new();
        for k in 0..self.len() {
            let s = self.best_score[k];
            let cand = (s > cfg.similarity_threshold).then_some(self.best_machine[k]);
            if let Some(a) = tracker
                .observe(self.starts[k], cand, s)
                .expect("trace starts increase")
            {
                out.push(a);
            }
        }
        out
    }
}

/// Window starts examined by one session over a series of `timesteps`
/// steps: the last `lookback_seconds`, every `stride` steps.
pub fn session_starts(timesteps: usize, grid_interval: f64, cfg: &DetectorConfig) -> Vec<usize> {
    session_starts_at(timesteps, grid_interval, cfg)
}

/// Window starts of a session whose data ends (exclusive) at `end`.
pub fn session_starts_at(end: usize, grid_interval: f64, cfg: &DetectorConfig) -> Vec<usize> {
    let look = ((cfg.lookback_seconds / grid_interval).round() as usize).min(end);
    if look < cfg.window_w {
        return Vec::new();
    }
    (end - look..=end - cfg.window_w)
        .step_by(cfg.stride)
        .collect()
}

/// Embeddings of every machine at every window start of one scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub starts: Vec<usize>,
    pub machines: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn new(starts: Vec<usize>, machines: usize, dim: usize) -> Self {
        Self {
            data: Vec::with_capacity(starts.len() * machines * dim),
            starts,
            machines,
            dim,
        }
    }

    /// Appends the next embedding, ordered by window then machine.
    pub fn push(&mut self, e: &[f64]) -> Result<()> {
        if e.len() != self.dim {
            return Err(Error::LengthMismatch(self.dim, e.len()));
        }
        self.data.extend_from_slice(e);
        Ok(())
    }

    pub fn get(&self, window: usize, machine: usize) -> &[f64] {
        let at = (window * self.machines + machine) * self.dim;
        &self.data[at..at + self.dim]
    }

    pub fn is_complete(&self) -> bool {
        self.data.len() == self.starts.len() * self.machines * self.dim
    }
}

/// Per-machine window embeddings of one metric; without a model the raw
/// window is the embedding.
pub fn embed_windows(
    tensor: &AlignedTensor,
    model: Option<&VaeModel>,
    starts: &[usize],
    cfg: &DetectorConfig,
) -> Result<Embeddings> {
    let w = cfg.window_w;
    let m = tensor.machines();
    if let Some(model) = model {
        check_model(tensor, model, cfg)?;
    } else if !tensor.is_normalized() {
        return Err(Error::InvalidParameter(format!(
            "tensor for {} is not normalized",
            tensor.metric()
        )));
    }
    let dim = match (model, cfg.embedding_source) {
        (Some(model), EmbeddingSource::LatentMu) => model.hyperparams().latent_size,
        _ => w,
    };
    let mut out = Embeddings::new(starts.to_vec(), m, dim);
    let mut ws = model.map(VaeModel::workspace);
    for &s in starts {
        check_start(tensor, s, w)?;
        for i in 0..m {
            let data = &tensor.row(i)[s..s + w];
            match (model, ws.as_mut()) {
                (Some(model), Some(ws)) => {
                    out.push(&embed(model, data, cfg.embedding_source, ws)?)?
                }
                _ => out.push(data)?,
            }
        }
    }
    Ok(out)
}

fn check_parts(parts: &[&Embeddings]) -> Result<()> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidParameter("no embeddings to score".into()))?;
    if let Some(p) = parts
        .iter()
        .find(|p| p.starts != first.starts || p.machines != first.machines)
    {
        return Err(Error::ShapeMismatch(format!(
            "embedding sets differ ({} vs {} windows, {} vs {} machines)",
            first.starts.len(),
            p.starts.len(),
            first.machines,
            p.machines
        )));
    }
    Ok(())
}

fn scores_into(
    parts: &[&Embeddings],
    k: usize,
    kind: DistanceKind,
    rows: &mut [Vec<f64>],
) -> Result<Vec<f64>> {
    for (i, row) in rows.iter_mut().enumerate() {
        row.clear();
        for p in parts {
            row.extend_from_slice(p.get(k, i));
        }
    }
    Ok(normal_scores(&distance_sums(rows, kind)?))
}

/// Normal scores at window `k` over the concatenation of `parts`, which
/// must share window starts and machine count.
pub fn scores_at(parts: &[&Embeddings], k: usize, kind: DistanceKind) -> Result<Vec<f64>> {
    check_parts(parts)?;
    let mut rows = vec![Vec::new(); parts[0].machines];
    scores_into(parts, k, kind, &mut rows)
}

/// Trace over the concatenation of `parts`.
pub fn trace_of(
    label: Option<MetricKind>,
    parts: &[&Embeddings],
    kind: DistanceKind,
) -> Result<ScoreTrace> {
    check_parts(parts)?;
    let first = parts[0];
    let mut trace = ScoreTrace::new(label);
    let mut rows = vec![Vec::new(); first.machines];
    for (k, &s) in first.starts.iter().enumerate() {
        trace.push(s, &scores_into(parts, k, kind, &mut rows)?);
    }
    Ok(trace)
}

/// Trace of the primary per-metric scorer over `starts`.
pub fn metric_trace(
    tensor: &AlignedTensor,
    model: &VaeModel,
    starts: &[usize],
    cfg: &DetectorConfig,
) -> Result<ScoreTrace> {
    let e = embed_windows(tensor, Some(model), starts, cfg)?;
    trace_of(Some(tensor.metric()), &[&e], cfg.distance_kind)
}

/// Result of one detection call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionOutcome {
    pub alerts: Vec<Alert>,
    /// Scorers evaluated, in order (metric or `None` for joint scorers).
    pub evaluated: Vec<Option<MetricKind>>,
}

/// Runs scorers in order and stops at the first one that alerts, unless
/// `cfg.exhaustive` is set.
pub fn run_ordered<F>(
    order: &[Option<MetricKind>],
    ctx: &AlertContext,
    cfg: &DetectorConfig,
    mut trace_of: F,
) -> Result<SessionOutcome>
where
    F: FnMut(Option<MetricKind>) -> Result<ScoreTrace>,
{
    let mut out = SessionOutcome::default();
    for &label in order {
        let trace = trace_of(label)?;
        if out.absorb(&trace, ctx, cfg) && !cfg.exhaustive {
            break;
        }
    }
    Ok(out)
}

/// The session outcome for already computed traces, given in order.
pub fn replay(traces: &[ScoreTrace], ctx: &AlertContext, cfg: &DetectorConfig) -> SessionOutcome {
    let mut out = SessionOutcome::default();
    for trace in traces {
        if out.absorb(trace, ctx, cfg) && !cfg.exhaustive {
            break;
        }
    }
    out
}

impl SessionOutcome {
    fn absorb(&mut self, trace: &ScoreTrace, ctx: &AlertContext, cfg: &DetectorConfig) -> bool {
        self.evaluated.push(trace.metric);
        let alerts = trace.alerts(ctx, cfg);
        let found = !alerts.is_empty();
        self.alerts.extend(alerts);
        found
    }
}

/// Per-metric models.
pub type ModelSet = BTreeMap<MetricKind, VaeModel>;

/// Priority metrics that the task actually carries, in priority order.
pub fn session_order(tensors: &TaskTensors, priority: &PriorityList) -> Vec<MetricKind> {
    priority
        .metrics()
        .into_iter()
        .filter(|m| tensors.get(*m).is_some())
        .collect()
}

/// One detection call over the task's most recent `lookback_seconds`,
/// walking metrics in priority order.
pub fn detect_session(
    tensors: &TaskTensors,
    models: &ModelSet,
    priority: &PriorityList,
    cfg: &DetectorConfig,
) -> Result<SessionOutcome> {
    cfg.validate(tensors.grid_interval())?;
    let first = tensors.tensors().next().expect("task has tensors");
    for t in tensors.tensors() {
        if !t.same_grid(first) {
            return Err(Error::GridMismatch(format!(
                "{} vs {}",
                t.metric(),
                first.metric()
            )));
        }
    }
    let starts = session_starts(tensors.timesteps(), tensors.grid_interval(), cfg);
    let ctx = AlertContext::of(tensors);
    let order: Vec<Option<MetricKind>> = session_order(tensors, priority)
        .into_iter()
        .map(Some)
        .collect();
    run_ordered(&order, &ctx, cfg, |label| {
        let metric = label.expect("per-metric order");
        let model = models.get(&metric).ok_or(Error::MissingModel(metric))?;
        metric_trace(tensors.get(metric).expect("filtered"), model, &starts, cfg)
    })
}
