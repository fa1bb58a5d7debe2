//! Alignment onto a common grid, min-max normalization and windowing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{Bounds, MetricCatalog, MetricKind};
use crate::trace::{RawTraceSet, Sample};

/// Machines × timesteps matrix for one metric of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedTensor {
    task_id: String,
    metric: MetricKind,
    machine_ids: Vec<String>,
    grid_start: f64,
    grid_interval: f64,
    timesteps: usize,
    /// Row-major, one row per machine.
    values: Vec<f64>,
    normalized: bool,
}

impl AlignedTensor {
    pub fn from_rows(
        task_id: impl Into<String>,
        metric: MetricKind,
        machine_ids: Vec<String>,
        grid_start: f64,
        grid_interval: f64,
        rows: Vec<Vec<f64>>,
        normalized: bool,
    ) -> Result<Self> {
        if machine_ids.len() != rows.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} machine ids for {} rows",
                machine_ids.len(),
                rows.len()
            )));
        }
        if rows.len() < 2 {
            return Err(Error::TooFewMachines {
                metric,
                found: rows.len(),
            });
        }
        if !(grid_interval > 0.0 && grid_interval.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid interval {grid_interval}"
            )));
        }
        let timesteps = rows[0].len();
        if timesteps == 0 || rows.iter().any(|r| r.len() != timesteps) {
            return Err(Error::ShapeMismatch(
                "rows must be non-empty and equally long".into(),
            ));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "tensor values must be finite".into(),
            ));
        }
        if normalized && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter(
                "normalized tensor values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            task_id: task_id.into(),
            metric,
            machine_ids,
            grid_start,
            grid_interval,
            timesteps,
            values,
            normalized,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }
    pub fn metric(&self) -> MetricKind {
        self.metric
    }
    pub fn machine_ids(&self) -> &[String] {
        &self.machine_ids
    }
    pub fn machines(&self) -> usize {
        self.machine_ids.len()
    }
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }
    pub fn grid_start(&self) -> f64 {
        self.grid_start
    }
    pub fn grid_interval(&self) -> f64 {
        self.grid_interval
    }
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
    /// Epoch seconds of grid index `i`.
    pub fn time_at(&self, i: usize) -> f64 {
        self.grid_start + i as f64 * self.grid_interval
    }
    pub fn row(&self, machine: usize) -> &[f64] {
        &self.values[machine * self.timesteps..(machine + 1) * self.timesteps]
    }
    pub fn get(&self, machine: usize, t: usize) -> f64 {
        self.values[machine * self.timesteps + t]
    }
    /// Values of every machine at one time index.
    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.machines()).map(|m| self.get(m, t)).collect()
    }

    /// Keeps the last `len` timesteps.
    pub fn tail(&self, len: usize) -> AlignedTensor {
        let len = len.min(self.timesteps);
        let skip = self.timesteps - len;
        self.slice(skip, self.timesteps)
    }

    /// Sub-range `[start, end)` of the time axis.
    pub fn slice(&self, start: usize, end: usize) -> AlignedTensor {
        assert!(
            start < end && end <= self.timesteps,
            "bad slice {start}..{end}"
        );
        let values = (0..self.machines())
            .flat_map(|m| self.row(m)[start..end].iter().copied())
            .collect();
        AlignedTensor {
            task_id: self.task_id.clone(),
            metric: self.metric,
            machine_ids: self.machine_ids.clone(),
            grid_start: self.time_at(start),
            grid_interval: self.grid_interval,
            timesteps: end - start,
            values,
            normalized: self.normalized,
        }
    }

    /// Reorders machine rows: row `i` of the result is row `order[i]` of `self`.
    pub fn permute_machines(&self, order: &[usize]) -> AlignedTensor {
        assert_eq!(order.len(), self.machines());
        let rows = order.iter().map(|&i| self.row(i).to_vec()).collect();
        let ids = order.iter().map(|&i| self.machine_ids[i].clone()).collect();
        AlignedTensor::from_rows(
            self.task_id.clone(),
            self.metric,
            ids,
            self.grid_start,
            self.grid_interval,
            rows,
            self.normalized,
        )
        .expect("permutation preserves invariants")
    }

    /// Same machine set and time grid.
    pub fn same_grid(&self, other: &AlignedTensor) -> bool {
        self.machine_ids == other.machine_ids
            && self.timesteps == other.timesteps
            && self.grid_start == other.grid_start
            && self.grid_interval == other.grid_interval
    }
}

/// Index of the sample nearest `t`; ties go to the earlier sample.
pub(crate) fn nearest_index(samples: &[Sample], t: f64) -> usize {
    let idx = samples.partition_point(|s| s.t < t);
    if idx == 0 {
        return 0;
    }
    if idx == samples.len() {
        return samples.len() - 1;
    }
    let before = t - samples[idx - 1].t;
    let after = samples[idx].t - t;
    if after < before {
        idx
    } else {
        idx - 1
    }
}

/// Aligns all machines carrying `metric` onto a shared grid over the
/// intersection of their time ranges, padding with the nearest sample.
pub fn align(raw: &RawTraceSet, metric: MetricKind, grid_interval: f64) -> Result<AlignedTensor> {
    if !(grid_interval > 0.0 && grid_interval.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "grid interval {grid_interval}"
        )));
    }
    let machines = raw.machines_with(metric);
    if machines.len() < 2 {
        return Err(Error::TooFewMachines {
            metric,
            found: machines.len(),
        });
    }
    let streams: Vec<&[Sample]> = machines
        .iter()
        .map(|m| raw.stream(m, metric).expect("listed machine has stream"))
        .collect();
    if streams.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyOverlap { metric });
    }
    let first = streams
        .iter()
        .map(|s| s[0].t)
        .fold(f64::NEG_INFINITY, f64::max);
    let last = streams
        .iter()
        .map(|s| s[s.len() - 1].t)
        .fold(f64::INFINITY, f64::min);
    let k0 = (first / grid_interval).ceil();
    let k1 = (last / grid_interval).floor();
    if k1 < k0 {
        return Err(Error::EmptyOverlap { metric });
    }
    let n = (k1 - k0) as usize + 1;
    let grid_start = k0 * grid_interval;
    let rows = streams
        .iter()
        .map(|s| {
            (0..n)
                .map(|k| {
                    let t = grid_start + k as f64 * grid_interval;
                    s[nearest_index(s, t)].value
                })
                .collect()
        })
        .collect();
    AlignedTensor::from_rows(
        raw.task_id.clone(),
        metric,
        machines.iter().map(|m| m.to_string()).collect(),
        grid_start,
        grid_interval,
        rows,
        false,
    )
}

/// Min-max normalization into [0, 1] against physical limits, clamping
/// out-of-range readings.
pub fn normalize_minmax(tensor: &AlignedTensor, bounds: Bounds) -> Result<AlignedTensor> {
    if tensor.normalized {
        return Err(Error::AlreadyNormalized(tensor.metric));
    }
    let mut out = tensor.clone();
    for v in &mut out.values {
        *v = bounds.normalize(*v);
    }
    out.normalized = true;
    Ok(out)
}

/// Every metric of one task on a shared machine set and grid, normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTensors {
    task_id: String,
    tensors: BTreeMap<MetricKind, AlignedTensor>,
}

impl TaskTensors {
    /// Aligns each metric, crops all of them to their common grid range and
    /// normalizes against the catalog bounds.
    pub fn prepare(
        raw: &RawTraceSet,
        metrics: &[MetricKind],
        catalog: &MetricCatalog,
        grid_interval: f64,
    ) -> Result<Self> {
        if metrics.is_empty() {
            return Err(Error::InvalidParameter("no metrics requested".into()));
        }
        let aligned = metrics
            .iter()
            .map(|&m| align(raw, m, grid_interval))
            .collect::<Result<Vec<_>>>()?;
        let cropped = crop_to_common(aligned)?;
        let tensors = cropped
            .into_iter()
            .map(|t| Ok((t.metric, normalize_minmax(&t, catalog.bounds(t.metric))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            task_id: raw.task_id.clone(),
            tensors,
        })
    }

    /// Wraps already normalized tensors that share one grid.
    pub fn from_tensors(tensors: Vec<AlignedTensor>) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidParameter("no tensors".into()))?
            .clone();
        let mut map = BTreeMap::new();
        for t in tensors {
            if !t.same_grid(&first) {
                return Err(Error::GridMismatch(format!(
                    "{} differs from {}",
                    t.metric, first.metric
                )));
            }
            if !t.normalized {
                return Err(Error::InvalidParameter(format!(
                    "tensor for {} is not normalized",
                    t.metric
                )));
            }
            if map.insert(t.metric, t).is_some() {
                return Err(Error::InvalidParameter("metric supplied twice".into()));
            }
        }
        Ok(Self {
            task_id: first.task_id.clone(),
            tensors: map,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }
    pub fn get(&self, metric: MetricKind) -> Option<&AlignedTensor> {
        self.tensors.get(&metric)
    }
    pub fn metrics(&self) -> impl Iterator<Item = MetricKind> + '_ {
        self.tensors.keys().copied()
    }
    pub fn tensors(&self) -> impl Iterator<Item = &AlignedTensor> {
        self.tensors.values()
    }
    fn any(&self) -> &AlignedTensor {
        self.tensors.values().next().expect("at least one tensor")
    }
    pub fn machine_ids(&self) -> &[String] {
        self.any().machine_ids()
    }
    pub fn machines(&self) -> usize {
        self.any().machines()
    }
    pub fn timesteps(&self) -> usize {
        self.any().timesteps()
    }
    pub fn grid_interval(&self) -> f64 {
        self.any().grid_interval()
    }
    pub fn time_at(&self, i: usize) -> f64 {
        self.any().time_at(i)
    }

    /// Keeps the last `len` timesteps of every metric.
    pub fn tail(&self, len: usize) -> TaskTensors {
        TaskTensors {
            task_id: self.task_id.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(m, t)| (*m, t.tail(len)))
                .collect(),
        }
    }

    /// Reorders machines identically in every metric.
    pub fn permute_machines(&self, order: &[usize]) -> TaskTensors {
        TaskTensors {
            task_id: self.task_id.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(m, t)| (*m, t.permute_machines(order)))
                .collect(),
        }
    }
}

fn crop_to_common(aligned: Vec<AlignedTensor>) -> Result<Vec<AlignedTensor>> {
    let first = &aligned[0];
    let iv = first.grid_interval;
    for t in &aligned {
        if t.machine_ids != first.machine_ids {
            return Err(Error::GridMismatch(format!(
                "{} is carried by different machines than {}",
                t.metric, first.metric
            )));
        }
    }
    let k0 = |t: &AlignedTensor| (t.grid_start / iv).round() as i64;
    let start = aligned.iter().map(k0).max().expect("non-empty");
    let end = aligned
        .iter()
        .map(|t| k0(t) + t.timesteps as i64)
        .min()
        .expect("non-empty");
    if end <= start {
        return Err(Error::EmptyOverlap {
            metric: first.metric,
        });
    }
    Ok(aligned
        .iter()
        .map(|t| {
            let off = (start - k0(t)) as usize;
            if off == 0 && t.timesteps as i64 == end - start {
                t.clone()
            } else {
                t.slice(off, off + (end - start) as usize)
            }
        })
        .collect())
}

/// A length-`w` slice of one machine's series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<'a> {
    pub machine_index: usize,
    pub metric: MetricKind,
    pub start_index: usize,
    pub data: &'a [f64],
}

impl<'a> Window<'a> {
    pub fn at(
        tensor: &'a AlignedTensor,
        machine_index: usize,
        start_index: usize,
        w: usize,
    ) -> Result<Self> {
        if w < 2 {
            return Err(Error::InvalidParameter(format!("window length {w} < 2")));
        }
        let len = tensor.timesteps();
        if w > len {
            return Err(Error::WindowTooLong { w, len });
        }
        if start_index + w > len {
            return Err(Error::WindowOutOfRange {
                start: start_index,
                last: len - w,
            });
        }
        Ok(Window {
            machine_index,
            metric: tensor.metric(),
            start_index,
            data: &tensor.row(machine_index)[start_index..start_index + w],
        })
    }
}

/// Machine-major iterator over every window of a tensor.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    tensor: &'a AlignedTensor,
    w: usize,
    stride: usize,
    per_machine: usize,
    next: usize,
}

impl<'a> Windows<'a> {
    pub fn per_machine(&self) -> usize {
        self.per_machine
    }
}

impl<'a> Iterator for Windows<'a> {
    type Item = Window<'a>;

    fn next(&mut self) -> Option<Window<'a>> {
        let total = self.per_machine * self.tensor.machines();
        if self.next >= total {
            return None;
        }
        let machine = self.next / self.per_machine;
        let start = (self.next % self.per_machine) * self.stride;
        self.next += 1;
        Some(Window {
            machine_index: machine,
            metric: self.tensor.metric(),
            start_index: start,
            data: &self.tensor.row(machine)[start..start + self.w],
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.per_machine * self.tensor.machines() - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Windows<'_> {}

/// Number of window starts for a series of length `len`.
pub fn window_count(len: usize, w: usize, stride: usize) -> usize {
    if w > len || stride == 0 {
        0
    } else {
        (len - w) / stride + 1
    }
}

pub fn window_iter(tensor: &AlignedTensor, w: usize, stride: usize) -> Result<Windows<'_>> {
    if w < 2 {
        return Err(Error::InvalidParameter(format!("window length {w} < 2")));
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be >= 1".into()));
    }
    if w > tensor.timesteps() {
        return Err(Error::WindowTooLong {
            w,
            len: tensor.timesteps(),
        });
    }
    Ok(Windows {
        tensor,
        w,
        stride,
        per_machine: window_count(tensor.timesteps(), w, stride),
        next: 0,
    })
}
