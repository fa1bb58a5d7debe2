//! Metric prioritization: per-machine Z-score dispersion features and a
//! CART decision tree whose split depths order the metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MetricKind;
use crate::tensor::{AlignedTensor, TaskTensors};

/// Standard deviations below this are treated as zero dispersion.
pub const STD_EPSILON: f64 = 1e-9;

/// Population standard scores; all zero when the spread is below
/// [`STD_EPSILON`].
pub fn standard_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= STD_EPSILON) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Z-score of every machine at one time index.
pub fn zscore_per_machine(tensor: &AlignedTensor, time_index: usize) -> Result<Vec<f64>> {
    if time_index >= tensor.timesteps() {
        return Err(Error::IndexOutOfRange {
            index: time_index,
            len: tensor.timesteps(),
        });
    }
    Ok(standard_scores(&tensor.column(time_index)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }
}

/// Max |Z| per metric over one span of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreFeature {
    pub task_id: String,
    /// Grid indices `[start, end)`.
    pub window_span: (usize, usize),
    pub per_metric_max_z: BTreeMap<MetricKind, f64>,
    pub label: Label,
}

fn max_abs_z(tensor: &AlignedTensor, start: usize, end: usize) -> f64 {
    let mut col = vec![0.0; tensor.machines()];
    let mut best: f64 = 0.0;
    for t in start..end {
        for (m, c) in col.iter_mut().enumerate() {
            *c = tensor.get(m, t);
        }
        for z in standard_scores(&col) {
            best = best.max(z.abs());
        }
    }
    best
}

/// Features of every metric of a task over `span`.
pub fn max_z_feature(
    tensors: &TaskTensors,
    window_span: (usize, usize),
    label: Label,
) -> Result<ZScoreFeature> {
    let (start, end) = window_span;
    let len = tensors.timesteps();
    if start >= end || end > len {
        return Err(Error::SpanUncovered { start, end, len });
    }
    let per_metric_max_z = tensors
        .tensors()
        .map(|t| (t.metric(), max_abs_z(t, start, end)))
        .collect();
    Ok(ZScoreFeature {
        task_id: tensors.task_id().to_string(),
        window_span,
        per_metric_max_z,
        label,
    })
}

/// Cuts a task into consecutive spans of `span_len` steps. A span is
/// abnormal iff it overlaps one of `faults`, given as epoch-second
/// intervals `[start, end)`.
pub fn labeled_spans(
    tensors: &TaskTensors,
    span_len: usize,
    faults: &[(f64, f64)],
) -> Result<Vec<ZScoreFeature>> {
    if span_len == 0 {
        return Err(Error::InvalidParameter("span length must be >= 1".into()));
    }
    let len = tensors.timesteps();
    let iv = tensors.grid_interval();
    let mut out = Vec::new();
    let mut start = 0;
    while start + span_len <= len {
        let end = start + span_len;
        let (t0, t1) = (tensors.time_at(start), tensors.time_at(end - 1) + iv);
        let abnormal = faults.iter().any(|&(a, b)| b > a && a < t1 && b > t0);
        let label = if abnormal {
            Label::Abnormal
        } else {
            Label::Normal
        };
        out.push(max_z_feature(tensors, (start, end), label)?);
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        metric: MetricKind,
        /// Instances with value `<= threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
        counts: [usize; 2],
    },
    Leaf {
        class: Label,
        purity: f64,
        counts: [usize; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
    pub max_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 7,
            min_samples_leaf: 1,
        }
    }
}

/// Chosen split of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub metric: MetricKind,
    pub threshold: f64,
    pub gain: f64,
}

const GAIN_TIE: f64 = 1e-12;

fn gini(c: [usize; 2]) -> f64 {
    let n = (c[0] + c[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p = c[0] as f64 / n;
    let q = c[1] as f64 / n;
    1.0 - p * p - q * q
}

fn counts_of(rows: &[&ZScoreFeature]) -> [usize; 2] {
    let mut c = [0, 0];
    for r in rows {
        c[r.label.index()] += 1;
    }
    c
}

/// Best Gini split of `rows` over `metrics` (scanned in the given order),
/// with midpoint thresholds between sorted distinct values. Ties keep the
/// earlier metric, then the lower threshold. A zero-gain split is still
/// returned; `None` means no threshold separates the rows.
pub fn best_split(
    rows: &[&ZScoreFeature],
    metrics: &[MetricKind],
    min_samples_leaf: usize,
) -> Option<Split> {
    let total = counts_of(rows);
    let n = rows.len();
    let parent = gini(total);
    let mut best: Option<Split> = None;
    let mut vals: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &metric in metrics {
        vals.clear();
        vals.extend(
            rows.iter()
                .map(|r| (r.per_metric_max_z[&metric], r.label.index())),
        );
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0usize; 2];
        for i in 0..n.saturating_sub(1) {
            left[vals[i].1] += 1;
            if vals[i].0 == vals[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            let nr = n - nl;
            if nl < min_samples_leaf || nr < min_samples_leaf {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let gain = parent - (nl as f64 * gini(left) + nr as f64 * gini(right)) / n as f64;
            let threshold = 0.5 * (vals[i].0 + vals[i + 1].0);
            if best.is_none_or(|b| gain > b.gain + GAIN_TIE) {
                best = Some(Split {
                    metric,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

/// CART induction with Gini impurity.
pub fn train_tree(dataset: &[ZScoreFeature], params: TreeParams) -> Result<DecisionTree> {
    if params.max_depth == 0 {
        return Err(Error::InvalidParameter("max_depth must be >= 1".into()));
    }
    let first = dataset.first().ok_or(Error::SingleClassDataset)?;
    let metrics: Vec<MetricKind> = first.per_metric_max_z.keys().copied().collect();
    for row in dataset {
        if row.per_metric_max_z.len() != metrics.len()
            || metrics
                .iter()
                .any(|m| !row.per_metric_max_z.contains_key(m))
        {
            return Err(Error::InvalidParameter(format!(
                "feature rows disagree on metrics (task {})",
                row.task_id
            )));
        }
        if row.per_metric_max_z.values().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite feature in task {}",
                row.task_id
            )));
        }
    }
    let rows: Vec<&ZScoreFeature> = dataset.iter().collect();
    let c = counts_of(&rows);
    if c[0] == 0 || c[1] == 0 {
        return Err(Error::SingleClassDataset);
    }
    let mut tree = DecisionTree {
        nodes: Vec::new(),
        max_depth: params.max_depth,
    };
    grow(&mut tree, rows, 0, &metrics, params);
    Ok(tree)
}

fn leaf(c: [usize; 2]) -> Node {
    let class = if c[1] > c[0] {
        Label::Abnormal
    } else {
        Label::Normal
    };
    let n = (c[0] + c[1]).max(1) as f64;
    Node::Leaf {
        class,
        purity: c[0].max(c[1]) as f64 / n,
        counts: c,
    }
}

fn grow(
    tree: &mut DecisionTree,
    rows: Vec<&ZScoreFeature>,
    depth: usize,
    metrics: &[MetricKind],
    p: TreeParams,
) -> usize {
    let id = tree.nodes.len();
    let c = counts_of(&rows);
    let pure = c[0] == 0 || c[1] == 0;
    let split = if pure || depth >= p.max_depth || rows.len() < 2 * p.min_samples_leaf.max(1) {
        None
    } else {
        best_split(&rows, metrics, p.min_samples_leaf.max(1))
    };
    let Some(split) = split else {
        tree.nodes.push(leaf(c));
        return id;
    };
    tree.nodes.push(leaf(c));
    let (l, r): (Vec<_>, Vec<_>) = rows
        .into_iter()
        .partition(|row| row.per_metric_max_z[&split.metric] <= split.threshold);
    let left = grow(tree, l, depth + 1, metrics, p);
    let right = grow(tree, r, depth + 1, metrics, p);
    tree.nodes[id] = Node::Split {
        metric: split.metric,
        threshold: split.threshold,
        left,
        right,
        counts: c,
    };
    id
}

impl DecisionTree {
    /// Class predicted for one feature row.
    pub fn predict(&self, row: &ZScoreFeature) -> Label {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { class, .. } => return *class,
                Node::Split {
                    metric,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let v = row.per_metric_max_z.get(metric).copied().unwrap_or(0.0);
                    at = if v <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Depth of every node, root at 0.
    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0; self.nodes.len()];
        let mut stack = vec![(0usize, 0usize)];
        while let Some((id, d)) = stack.pop() {
            depth[id] = d;
            if let Node::Split { left, right, .. } = self.nodes[id] {
                stack.push((left, d + 1));
                stack.push((right, d + 1));
            }
        }
        depth
    }

    /// Indented audit view: one node per line with metric, threshold and
    /// class counts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.write_node(0, 0, &mut out);
        out
    }

    fn write_node(&self, id: usize, depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        match &self.nodes[id] {
            Node::Split {
                metric,
                threshold,
                left,
                right,
                counts,
            } => {
                let _ = writeln!(
                    out,
                    "{pad}split {metric} <= {threshold:.6} (normal {}, abnormal {})",
                    counts[0], counts[1]
                );
                self.write_node(*left, depth + 1, out);
                self.write_node(*right, depth + 1, out);
            }
            Node::Leaf {
                class,
                purity,
                counts,
            } => {
                let name = match class {
                    Label::Normal => "normal",
                    Label::Abnormal => "abnormal",
                };
                let _ = writeln!(
                    out,
                    "{pad}leaf {name} purity {purity:.4} (normal {}, abnormal {})",
                    counts[0], counts[1]
                );
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityEntry {
    pub metric: MetricKind,
    /// Shallowest split on this metric; `None` when the tree never uses it.
    pub min_depth: Option<usize>,
}

/// Detection order of metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityList {
    pub entries: Vec<PriorityEntry>,
}

/// Orders `catalog` by the shallowest depth at which the tree splits on each
/// metric; ties and unused metrics keep catalog order, unused ones last.
pub fn extract_priority(tree: &DecisionTree, catalog: &[MetricKind]) -> PriorityList {
    let depths = tree.depths();
    let mut min_depth: BTreeMap<MetricKind, usize> = BTreeMap::new();
    for (id, node) in tree.nodes.iter().enumerate() {
        if let Node::Split { metric, .. } = node {
            let d = min_depth.entry(*metric).or_insert(usize::MAX);
            *d = (*d).min(depths[id]);
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut entries: Vec<PriorityEntry> = catalog
        .iter()
        .filter(|m| seen.insert(**m))
        .map(|&metric| PriorityEntry {
            metric,
            min_depth: min_depth.get(&metric).copied(),
        })
        .collect();
    entries.sort_by_key(|e| e.min_depth.unwrap_or(usize::MAX));
    PriorityList { entries }
}

impl PriorityList {
    /// Catalog order, no depth information.
    pub fn catalog_order(metrics: &[MetricKind]) -> Self {
        Self {
            entries: metrics
                .iter()
                .map(|&metric| PriorityEntry {
                    metric,
                    min_depth: None,
                })
                .collect(),
        }
    }

    pub fn metrics(&self) -> Vec<MetricKind> {
        self.entries.iter().map(|e| e.metric).collect()
    }

    pub fn rank_of(&self, metric: MetricKind) -> Option<usize> {
        self.entries.iter().position(|e| e.metric == metric)
    }

    /// One `<metric> <depth|->` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            match e.min_depth {
                Some(d) => {
                    let _ = writeln!(out, "{} {d}", e.metric);
                }
                None => {
                    let _ = writeln!(out, "{} -", e.metric);
                }
            }
        }
        out
    }

    /// Parses [`PriorityList::to_text`] output; blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap_or_default();
            let metric: MetricKind = name.parse().map_err(|_| Error::UnknownMetric {
                line: i as u64 + 1,
                name: name.to_string(),
            })?;
            let min_depth = match parts.next() {
                None | Some("-") => None,
                Some(d) => Some(d.parse().map_err(|_| {
                    Error::InvalidParameter(format!("priority line {}: bad depth {d:?}", i + 1))
                })?),
            };
            if !seen.insert(metric) {
                return Err(Error::InvalidParameter(format!(
                    "priority line {}: {metric} repeated",
                    i + 1
                )));
            }
            entries.push(PriorityEntry { metric, min_depth });
        }
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use MetricKind::*;

    fn tensor(rows: Vec<Vec<f64>>, metric: MetricKind) -> AlignedTensor {
        let ids = (0..rows.len()).map(|i| format!("m{i}")).collect();
        AlignedTensor::from_rows("t", metric, ids, 0.0, 1.0, rows, true).unwrap()
    }

    fn row(values: &[(MetricKind, f64)], label: Label) -> ZScoreFeature {
        ZScoreFeature {
            task_id: "t".into(),
            window_span: (0, 1),
            per_metric_max_z: values.iter().copied().collect(),
            label,
        }
    }

    #[test]
    fn equal_machines_score_zero() {
        let t = tensor(vec![vec![0.4, 0.2]; 3], CpuUsage);
        assert_eq!(zscore_per_machine(&t, 1).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            zscore_per_machine(&t, 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn hand_computed_zscores() {
        let z = standard_scores(&[0.0, 0.0, 3.0]);
        let s = 2f64.sqrt();
        let want = [-1.0 / s, -1.0 / s, 2.0 / s];
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_dispersion_task_has_zero_features() {
        let t = TaskTensors::from_tensors(vec![
            tensor(vec![vec![0.5; 4]; 3], CpuUsage),
            tensor(vec![vec![0.1; 4]; 3], DiskUsage),
        ])
        .unwrap();
        let f = max_z_feature(&t, (0, 4), Label::Normal).unwrap();
        assert!(f.per_metric_max_z.values().all(|&v| v == 0.0));
        assert!(matches!(
            max_z_feature(&t, (2, 5), Label::Normal),
            Err(Error::SpanUncovered { .. })
        ));
    }

    #[test]
    fn labeled_spans_mark_overlap() {
        let t =
            TaskTensors::from_tensors(vec![tensor(vec![vec![0.5; 10], vec![0.4; 10]], CpuUsage)])
                .unwrap();
        let rows = labeled_spans(&t, 4, &[(5.0, 6.0)]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].label, Label::Normal);
        assert_eq!(rows[1].label, Label::Abnormal);
        assert_eq!(rows[1].window_span, (4, 8));
    }

    #[test]
    fn separable_dataset_yields_depth_one_tree() {
        let mut data = Vec::new();
        for i in 0..10 {
            let v = i as f64;
            let label = if i < 4 {
                Label::Normal
            } else {
                Label::Abnormal
            };
            data.push(row(&[(CpuUsage, 0.5), (DiskUsage, v)], label));
        }
        let tree = train_tree(&data, TreeParams::default()).unwrap();
        assert_eq!(tree.nodes.len(), 3);
        match &tree.nodes[0] {
            Node::Split {
                metric, threshold, ..
            } => {
                assert_eq!(*metric, DiskUsage);
                assert_eq!(*threshold, 3.5);
            }
            n => panic!("{n:?}"),
        }
        for n in &tree.nodes[1..] {
            assert!(matches!(n, Node::Leaf { purity, .. } if *purity == 1.0));
        }
        let p = extract_priority(&tree, &[CpuUsage, DiskUsage]);
        assert_eq!(p.metrics(), vec![DiskUsage, CpuUsage]);
        assert_eq!(p.entries[1].min_depth, None);
    }

    #[test]
    fn single_class_is_rejected() {
        let data = vec![row(&[(CpuUsage, 1.0)], Label::Normal); 3];
        assert!(matches!(
            train_tree(&data, TreeParams::default()),
            Err(Error::SingleClassDataset)
        ));
        assert!(matches!(
            train_tree(&[], TreeParams::default()),
            Err(Error::SingleClassDataset)
        ));
    }

    #[test]
    fn equal_gain_prefers_catalog_order_then_low_threshold() {
        // Both metrics separate the classes perfectly.
        let data = vec![
            row(&[(CpuUsage, 0.0), (PfcTxPacketRate, 0.0)], Label::Normal),
            row(&[(CpuUsage, 1.0), (PfcTxPacketRate, 1.0)], Label::Abnormal),
        ];
        let tree = train_tree(&data, TreeParams::default()).unwrap();
        assert!(matches!(
            tree.nodes[0],
            Node::Split {
                metric: CpuUsage,
                ..
            }
        ));
    }

    #[test]
    fn priority_orders_by_depth() {
        let tree = DecisionTree {
            max_depth: 7,
            nodes: vec![
                Node::Split {
                    metric: PfcTxPacketRate,
                    threshold: 1.0,
                    left: 1,
                    right: 4,
                    counts: [3, 3],
                },
                Node::Split {
                    metric: CpuUsage,
                    threshold: 1.0,
                    left: 2,
                    right: 3,
                    counts: [3, 1],
                },
                leaf([3, 0]),
                leaf([0, 1]),
                leaf([0, 2]),
            ],
        };
        let p = extract_priority(&tree, &[CpuUsage, PfcTxPacketRate, MemoryUsage, DiskUsage]);
        assert_eq!(
            p.metrics(),
            vec![PfcTxPacketRate, CpuUsage, MemoryUsage, DiskUsage]
        );
        let text = p.to_text();
        assert_eq!(PriorityList::parse(&text).unwrap(), p);
        assert!(tree.to_text().contains("split PfcTxPacketRate"));
    }

    #[test]
    fn priority_parse_errors() {
        assert!(PriorityList::parse("Nope 1\n").is_err());
        assert!(PriorityList::parse("CpuUsage 1\nCpuUsage 2\n").is_err());
        assert!(PriorityList::parse("CpuUsage x\n").is_err());
        let p = PriorityList::parse("# header\n\nCpuUsage\n").unwrap();
        assert_eq!(p.metrics(), vec![CpuUsage]);
    }
}
