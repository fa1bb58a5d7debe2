//! Reference detectors: a Mahalanobis-distance detector over window moments
//! and three variants of the primary pipeline (raw windows, concatenated
//! per-metric embeddings, one integrated multi-metric model).

use serde::{Deserialize, Serialize};

use crate::detector::{
    embed, embed_windows, normal_scores, scores_at, trace_of, DetectorConfig, EmbeddingSource,
    Embeddings, ModelSet, ScoreTrace, WindowVerdict,
};
use crate::error::{Error, Result};
use crate::metric::MetricKind;
use crate::tensor::TaskTensors;
use crate::vae::VaeModel;

/// Variance below which skewness and kurtosis are reported as 0.
pub const MOMENT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatFeatures {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl StatFeatures {
    pub fn to_array(self) -> [f64; 4] {
        [self.mean, self.variance, self.skewness, self.kurtosis]
    }
}

/// Population moments of one window.
pub fn stat_features(data: &[f64]) -> StatFeatures {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in data {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let variance = m2 / n;
    if variance < MOMENT_EPSILON {
        return StatFeatures {
            mean,
            variance,
            skewness: 0.0,
            kurtosis: 0.0,
        };
    }
    StatFeatures {
        mean,
        variance,
        skewness: m3 / n / variance.powf(1.5),
        kurtosis: m4 / n / (variance * variance),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatFeatureVector {
    pub machine_id: String,
    /// Four moments per metric, metrics in catalog order.
    pub features: Vec<f64>,
}

/// Moment features of every machine for the window at `start`.
pub fn machine_features(
    tensors: &TaskTensors,
    start: usize,
    w: usize,
) -> Result<Vec<StatFeatureVector>> {
    if start + w > tensors.timesteps() {
        return Err(Error::WindowOutOfRange {
            start,
            last: tensors.timesteps().saturating_sub(w),
        });
    }
    Ok(tensors
        .machine_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| StatFeatureVector {
            machine_id: id.clone(),
            features: tensors
                .tensors()
                .flat_map(|t| stat_features(&t.row(i)[start..start + w]).to_array())
                .collect(),
        })
        .collect())
}

/// Eigen-decomposition of a symmetric `n × n` row-major matrix by cyclic
/// Jacobi rotations. Eigenvalues come back in descending order with the
/// matching eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// Projected rows, `M × r` with `r = min(k, rank)`.
    pub scores: Vec<Vec<f64>>,
    /// Unit loadings, one row per kept component.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each kept component.
    pub variances: Vec<f64>,
    pub means: Vec<f64>,
    pub rank: usize,
    /// Fewer than `k` components carry variance.
    pub rank_deficient: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projects the rows of `features` onto the top `k` principal axes of their
/// sample covariance. The largest-magnitude loading of every axis is made
/// positive.
pub fn pca_project(features: &[Vec<f64>], k: usize) -> Result<Pca> {
    let m = features.len();
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "PCA needs at least 2 rows, got {m}"
        )));
    }
    let f = features[0].len();
    if let Some(r) = features.iter().find(|r| r.len() != f) {
        return Err(Error::LengthMismatch(f, r.len()));
    }
    if k == 0 || k > m.min(f) {
        return Err(Error::InvalidParameter(format!(
            "k = {k} must be in 1..={}",
            m.min(f)
        )));
    }
    let means: Vec<f64> = (0..f)
        .map(|j| features.iter().map(|r| r[j]).sum::<f64>() / m as f64)
        .collect();
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|r| r.iter().zip(&means).map(|(v, mu)| v - mu).collect())
        .collect();
    let denom = (m - 1) as f64;

    // Covariance when features are few, the dual Gram matrix otherwise.
    let (values, axes): (Vec<f64>, Vec<Vec<f64>>) = if f <= m {
        let mut c = vec![0.0; f * f];
        for r in &x {
            for i in 0..f {
                for j in 0..f {
                    c[i * f + j] += r[i] * r[j];
                }
            }
        }
        c.iter_mut().for_each(|v| *v /= denom);
        symmetric_eigen(&c, f)
    } else {
        let mut g = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let v = dot(&x[i], &x[j]) / denom;
                g[i * m + j] = v;
                g[j * m + i] = v;
            }
        }
        let (vals, us) = symmetric_eigen(&g, m);
        let axes = us
            .iter()
            .map(|u| {
                let mut v = vec![0.0; f];
                for (row, &ui) in x.iter().zip(u) {
                    for (vj, xj) in v.iter_mut().zip(row) {
                        *vj += ui * xj;
                    }
                }
                let norm = dot(&v, &v).sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                v
            })
            .collect();
        (vals, axes)
    };

    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let tol = 1e-12 * top.max(1e-300) + 1e-300;
    let rank = values.iter().filter(|&&l| l > tol).count();
    let kept = k.min(rank);
    let mut components = Vec::with_capacity(kept);
    for axis in axes.into_iter().take(kept) {
        let mut lead = 0;
        for (j, v) in axis.iter().enumerate() {
            if v.abs() > axis[lead].abs() {
                lead = j;
            }
        }
        let sign = if axis[lead] < 0.0 { -1.0 } else { 1.0 };
        components.push(axis.into_iter().map(|v| v * sign).collect::<Vec<_>>());
    }
    let scores = x
        .iter()
        .map(|r| components.iter().map(|c| dot(r, c)).collect())
        .collect();
    Ok(Pca {
        scores,
        components,
        variances: values.into_iter().take(kept).collect(),
        means,
        rank,
        rank_deficient: rank < k,
    })
}

/// Sample covariance (`k × k`, row-major) of `points`.
pub fn sample_covariance(points: &[Vec<f64>]) -> Vec<f64> {
    let m = points.len();
    let k = points.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..k)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / m as f64)
        .collect();
    let mut c = vec![0.0; k * k];
    for p in points {
        for i in 0..k {
            for j in 0..k {
                c[i * k + j] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    let denom = (m.max(2) - 1) as f64;
    c.iter_mut().for_each(|v| *v /= denom);
    c
}

/// Mahalanobis metric for a covariance regularized by `lambda · I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mahalanobis {
    dim: usize,
    chol: Vec<f64>,
}

impl Mahalanobis {
    pub fn new(cov: &[f64], dim: usize, lambda: f64) -> Result<Self> {
        if cov.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "covariance has {} entries for dim {dim}",
                cov.len()
            )));
        }
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = cov[i * dim + j] + if i == j { lambda } else { 0.0 };
                for p in 0..j {
                    s -= l[i * dim + p] * l[j * dim + p];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::InvalidParameter(
                            "covariance is not positive definite".into(),
                        ));
                    }
                    l[i * dim + i] = s.sqrt();
                } else {
                    l[i * dim + j] = s / l[j * dim + j];
                }
            }
        }
        Ok(Self { dim, chol: l })
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.dim;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = a[i] - b[i];
            for p in 0..i {
                s -= self.chol[i * n + p] * y[p];
            }
            y[i] = s / self.chol[i * n + i];
        }
        dot(&y, &y).sqrt()
    }

    pub fn distance_sums(&self, points: &[Vec<f64>]) -> Vec<f64> {
        let m = points.len();
        let mut sums = vec![0.0; m];
        for i in 0..m {
            for j in i + 1..m {
                let d = self.distance(&points[i], &points[j]);
                sums[i] += d;
                sums[j] += d;
            }
        }
        sums
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdConfig {
    /// Upper bound on kept components; the effective count is also capped at `M − 1`.
    pub components: usize,
    pub regularization: f64,
}

impl Default for MdConfig {
    fn default() -> Self {
        Self {
            components: 4,
            regularization: 1e-6,
        }
    }
}

fn md_scores(
    tensors: &TaskTensors,
    start: usize,
    cfg: &DetectorConfig,
    md: &MdConfig,
) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = machine_features(tensors, start, cfg.window_w)?
        .into_iter()
        .map(|r| r.features)
        .collect();
    let m = rows.len();
    let k = md.components.min(m - 1).min(rows[0].len()).max(1);
    let pca = pca_project(&rows, k)?;
    if pca.components.is_empty() {
        return Ok(vec![0.0; m]);
    }
    let dim = pca.components.len();
    let metric = Mahalanobis::new(&sample_covariance(&pca.scores), dim, md.regularization)?;
    Ok(normal_scores(&metric.distance_sums(&pca.scores)))
}

fn check_task(tensors: &TaskTensors) -> Result<()> {
    if tensors.machines() < 2 {
        return Err(Error::InvalidParameter(format!(
            "{} machine(s); at least 2 required",
            tensors.machines()
        )));
    }
    if let Some(t) = tensors.tensors().find(|t| !t.is_normalized()) {
        return Err(Error::InvalidParameter(format!(
            "tensor for {} is not normalized",
            t.metric()
        )));
    }
    Ok(())
}

/// Mahalanobis-distance verdict over all metrics for one window.
pub fn md_detect(
    tensors: &TaskTensors,
    window_start: usize,
    cfg: &DetectorConfig,
    md: &MdConfig,
) -> Result<WindowVerdict> {
    check_task(tensors)?;
    let scores = md_scores(tensors, window_start, cfg, md)?;
    Ok(WindowVerdict::from_scores(
        None,
        window_start,
        scores,
        cfg.similarity_threshold,
    ))
}

pub fn md_trace(
    tensors: &TaskTensors,
    starts: &[usize],
    cfg: &DetectorConfig,
    md: &MdConfig,
) -> Result<ScoreTrace> {
    check_task(tensors)?;
    let mut trace = ScoreTrace::new(None);
    for &s in starts {
        trace.push(s, &md_scores(tensors, s, cfg, md)?);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Distances between the normalized raw windows.
    Raw,
    /// One distance pass over all per-metric embeddings concatenated.
    Con,
    /// A single model over all metrics.
    Int,
}

/// Metrics the task carries that have a per-metric model, in catalog order.
pub fn con_metrics(tensors: &TaskTensors, models: &ModelSet) -> Vec<MetricKind> {
    tensors
        .metrics()
        .filter(|m| models.contains_key(m))
        .collect()
}

/// Per-metric embeddings concatenated by [`Ablation::Con`].
pub fn con_embeddings(
    tensors: &TaskTensors,
    models: &ModelSet,
    starts: &[usize],
    cfg: &DetectorConfig,
) -> Result<Vec<Embeddings>> {
    let metrics = con_metrics(tensors, models);
    if metrics.is_empty() {
        let first = tensors.metrics().next().ok_or(Error::NoTrainingData)?;
        return Err(Error::MissingModel(first));
    }
    metrics
        .iter()
        .map(|m| {
            embed_windows(
                tensors.get(*m).expect("listed"),
                Some(&models[m]),
                starts,
                cfg,
            )
        })
        .collect()
}

/// Embeddings of an integrated model over the task's matching metrics.
pub fn int_embeddings(
    tensors: &TaskTensors,
    model: &VaeModel,
    starts: &[usize],
    cfg: &DetectorConfig,
) -> Result<Embeddings> {
    let metrics = model.scope().metrics().to_vec();
    let series = metrics
        .iter()
        .map(|m| tensors.get(*m).ok_or(Error::MissingModel(*m)))
        .collect::<Result<Vec<_>>>()?;
    if model.window_len() != cfg.window_w {
        return Err(Error::ShapeMismatch(format!(
            "model window {} but detector window {}",
            model.window_len(),
            cfg.window_w
        )));
    }
    check_task(tensors)?;
    let w = cfg.window_w;
    let k = metrics.len();
    let dim = match cfg.embedding_source {
        EmbeddingSource::DenoisedVector => w * k,
        EmbeddingSource::LatentMu => model.hyperparams().latent_size,
    };
    let mut ws = model.workspace();
    let mut out = Embeddings::new(starts.to_vec(), tensors.machines(), dim);
    let mut x = vec![0.0; w * k];
    for &s in starts {
        if s + w > tensors.timesteps() {
            return Err(Error::WindowOutOfRange {
                start: s,
                last: tensors.timesteps().saturating_sub(w),
            });
        }
        for i in 0..tensors.machines() {
            for (c, t) in series.iter().enumerate() {
                for (step, v) in t.row(i)[s..s + w].iter().enumerate() {
                    x[step * k + c] = *v;
                }
            }
            out.push(&embed(model, &x, cfg.embedding_source, &mut ws)?)?;
        }
    }
    Ok(out)
}

/// Verdict of an ablation for one window. `metric` selects the series for
/// [`Ablation::Raw`] and is ignored otherwise.
pub fn ablation_detect(
    mode: Ablation,
    tensors: &TaskTensors,
    models: &ModelSet,
    integrated: Option<&VaeModel>,
    metric: Option<MetricKind>,
    window_start: usize,
    cfg: &DetectorConfig,
) -> Result<WindowVerdict> {
    let starts = [window_start];
    let (label, scores) = match mode {
        Ablation::Raw => {
            let metric =
                metric.ok_or_else(|| Error::InvalidParameter("RAW needs a metric".into()))?;
            let t = tensors
                .get(metric)
                .ok_or_else(|| Error::InvalidParameter(format!("task has no {metric} series")))?;
            let e = embed_windows(t, None, &starts, cfg)?;
            (Some(metric), scores_at(&[&e], 0, cfg.distance_kind)?)
        }
        Ablation::Con => {
            let parts = con_embeddings(tensors, models, &starts, cfg)?;
            let refs: Vec<&Embeddings> = parts.iter().collect();
            let label = match refs.len() {
                1 => con_metrics(tensors, models).first().copied(),
                _ => None,
            };
            (label, scores_at(&refs, 0, cfg.distance_kind)?)
        }
        Ablation::Int => {
            let model = integrated
                .ok_or_else(|| Error::InvalidParameter("INT needs an integrated model".into()))?;
            let e = int_embeddings(tensors, model, &starts, cfg)?;
            (None, scores_at(&[&e], 0, cfg.distance_kind)?)
        }
    };
    Ok(WindowVerdict::from_scores(
        label,
        window_start,
        scores,
        cfg.similarity_threshold,
    ))
}

/// Ablation trace over the window `starts` of one session.
pub fn ablation_trace(
    mode: Ablation,
    tensors: &TaskTensors,
    models: &ModelSet,
    integrated: Option<&VaeModel>,
    metric: Option<MetricKind>,
    starts: &[usize],
    cfg: &DetectorConfig,
) -> Result<ScoreTrace> {
    match mode {
        Ablation::Raw => {
            let metric =
                metric.ok_or_else(|| Error::InvalidParameter("RAW needs a metric".into()))?;
            let t = tensors
                .get(metric)
                .ok_or_else(|| Error::InvalidParameter(format!("task has no {metric} series")))?;
            trace_of(
                Some(metric),
                &[&embed_windows(t, None, starts, cfg)?],
                cfg.distance_kind,
            )
        }
        Ablation::Con => {
            let parts = con_embeddings(tensors, models, starts, cfg)?;
            let refs: Vec<&Embeddings> = parts.iter().collect();
            trace_of(None, &refs, cfg.distance_kind)
        }
        Ablation::Int => {
            let model = integrated
                .ok_or_else(|| Error::InvalidParameter("INT needs an integrated model".into()))?;
            trace_of(
                None,
                &[&int_embeddings(tensors, model, starts, cfg)?],
                cfg.distance_kind,
            )
        }
    }
}
