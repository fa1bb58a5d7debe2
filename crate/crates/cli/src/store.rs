//! Run directory layout and the on-disk formats of every artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trainwatch_core::simulator::GroundTruth;
use trainwatch_core::tensor::{AlignedTensor, TaskTensors};
use trainwatch_core::MetricKind;

/// The three corpora of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Fault-free tasks the models learn from.
    Train,
    /// Labeled tasks the metric priority is learned from.
    History,
    /// Labeled tasks detection is scored on.
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::History, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::History => "history",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split {s:?} (train, history, eval)"))
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self, split: Split) -> PathBuf {
        self.root.join("corpus").join(split.name())
    }

    pub fn truth(&self, split: Split) -> PathBuf {
        self.corpus(split).join("truth.jsonl")
    }

    pub fn tensors(&self, split: Split) -> PathBuf {
        self.root.join("tensors").join(split.name())
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn metric_model(&self, m: MetricKind) -> PathBuf {
        self.models().join(format!("{m}.model"))
    }

    pub fn integrated_model(&self) -> PathBuf {
        self.models().join("integrated.model")
    }

    pub fn priority(&self) -> PathBuf {
        self.root.join("priority.txt")
    }

    pub fn tree(&self) -> PathBuf {
        self.root.join("tree.txt")
    }

    /// `alerts.jsonl` for the primary pipeline, `alerts-<name>.jsonl` otherwise.
    pub fn alerts(&self, pipeline: &str) -> PathBuf {
        match pipeline {
            "minder" => self.root.join("alerts.jsonl"),
            p => self.root.join(format!("alerts-{p}.jsonl")),
        }
    }

    /// Per-task call records, including wall-clock time.
    pub fn calls(&self, pipeline: &str) -> PathBuf {
        self.root.join(format!("calls-{pipeline}.jsonl"))
    }

    pub fn evaluation(&self, pipeline: &str) -> PathBuf {
        self.root.join(format!("eval-{pipeline}.json"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn jsonl_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_file(path, jsonl_string(rows)?.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

pub fn read_truth(run: &RunDir, split: Split) -> Result<Vec<GroundTruth>> {
    let p = run.truth(split);
    if !p.exists() {
        bail!("{} not found; run `simulate` first", p.display());
    }
    read_jsonl(&p)
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    out.sort();
    Ok(out)
}

const TENSOR_MAGIC: &[u8; 4] = b"TWTT";
const TENSOR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    task_id: String,
    machine_ids: Vec<String>,
    grid_start: f64,
    grid_interval: f64,
    timesteps: usize,
    metrics: Vec<MetricKind>,
}

/// Normalized tensors of one task: magic, version, a JSON header, then
/// every value as little-endian f64 (metric, machine, time order).
pub fn write_tensors(path: &Path, t: &TaskTensors) -> Result<()> {
    create_parent(path)?;
    let header = TensorHeader {
        task_id: t.task_id().to_string(),
        machine_ids: t.machine_ids().to_vec(),
        grid_start: t.time_at(0),
        grid_interval: t.grid_interval(),
        timesteps: t.timesteps(),
        metrics: t.metrics().collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(f);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(head.len() as u64).to_le_bytes())?;
    w.write_all(&head)?;
    for tensor in t.tensors() {
        for i in 0..tensor.machines() {
            for v in tensor.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<TaskTensors> {
    let ctx = || format!("reading tensors {}", path.display());
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(ctx)?
        .read_to_end(&mut bytes)
        .with_context(ctx)?;
    if bytes.len() < 16 || &bytes[..4] != TENSOR_MAGIC {
        bail!("{}: not a tensor file", path.display());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != TENSOR_VERSION {
        bail!(
            "{}: tensor format version {version}, expected {TENSOR_VERSION}",
            path.display()
        );
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16 + hlen;
    if bytes.len() < body {
        bail!("{}: truncated header", path.display());
    }
    let h: TensorHeader = serde_json::from_slice(&bytes[16..body]).with_context(ctx)?;
    let m = h.machine_ids.len();
    let expected = h.metrics.len() * m * h.timesteps * 8;
    if bytes.len() - body != expected {
        bail!(
            "{}: expected {expected} value bytes, found {}",
            path.display(),
            bytes.len() - body
        );
    }
    let mut values = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut tensors = Vec::with_capacity(h.metrics.len());
    for &metric in &h.metrics {
        let rows = (0..m)
            .map(|_| values.by_ref().take(h.timesteps).collect())
            .collect();
        tensors.push(
            AlignedTensor::from_rows(
                h.task_id.clone(),
                metric,
                h.machine_ids.clone(),
                h.grid_start,
                h.grid_interval,
                rows,
                true,
            )
            .with_context(ctx)?,
        );
    }
    TaskTensors::from_tensors(tensors).with_context(ctx)
}

/// All cached tensors of a split, sorted by task id.
pub fn load_split(run: &RunDir, split: Split) -> Result<Vec<TaskTensors>> {
    let dir = run.tensors(split);
    if !dir.exists() {
        bail!("{} not found; run `preprocess` first", dir.display());
    }
    list_files(&dir, "tensors")?
        .iter()
        .map(|p| read_tensors(p))
        .collect()
}

/// Provenance of a run: the resolved configuration each stage used and the
/// SHA-256 of every artifact except wall-clock records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, serde_json::Value>,
    pub artifacts: BTreeMap<String, String>,
}

fn hashed(rel: &str) -> bool {
    rel != "manifest.json" && !rel.starts_with("calls-") && !rel.starts_with("eval-")
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            hash_tree(root, &p, out)?;
            continue;
        }
        let rel = p
            .strip_prefix(root)
            .expect("under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if !hashed(&rel) {
            continue;
        }
        let mut h = Sha256::new();
        let mut f = BufReader::new(fs::File::open(&p)?);
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
        out.insert(rel, format!("{:x}", h.finalize()));
    }
    Ok(())
}

/// Records `stage` with its configuration and rehashes the run directory.
pub fn update_manifest<T: Serialize>(run: &RunDir, stage: &str, config: &T) -> Result<()> {
    let path = run.manifest();
    let mut m: Manifest = if path.exists() {
        read_json(&path)?
    } else {
        Manifest::default()
    };
    m.stages
        .insert(stage.to_string(), serde_json::to_value(config)?);
    m.artifacts.clear();
    hash_tree(run.root(), run.root(), &mut m.artifacts)?;
    write_json(&path, &m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskTensors {
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let t = |metric, k: f64| {
            let rows = (0..3)
                .map(|i| {
                    (0..5)
                        .map(|s| (i as f64 * 0.1 + s as f64 * k) % 1.0)
                        .collect()
                })
                .collect();
            AlignedTensor::from_rows("job", metric, ids.clone(), 100.0, 2.0, rows, true).unwrap()
        };
        TaskTensors::from_tensors(vec![
            t(MetricKind::CpuUsage, 0.07),
            t(MetricKind::DiskUsage, 0.13),
        ])
        .unwrap()
    }

    #[test]
    fn tensors_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("job.tensors");
        let t = task();
        write_tensors(&p, &t).unwrap();
        assert_eq!(read_tensors(&p).unwrap(), t);
    }

    #[test]
    fn damaged_tensor_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("job.tensors");
        write_tensors(&p, &task()).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_tensors(&p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(read_tensors(&p).is_err());
    }

    #[test]
    fn manifest_skips_wall_clock_records() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        write_file(&run.priority(), b"CpuUsage 0\n").unwrap();
        write_file(&run.calls("minder"), b"{}\n").unwrap();
        write_file(&run.tensors(Split::Eval).join("x.tensors"), b"x").unwrap();
        update_manifest(&run, "prioritize", &1).unwrap();
        let m: Manifest = read_json(&run.manifest()).unwrap();
        let keys: Vec<&str> = m.artifacts.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["priority.txt", "tensors/eval/x.tensors"]);
        assert_eq!(m.stages["prioritize"], serde_json::json!(1));
    }

    #[test]
    fn split_names() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("test".parse::<Split>().is_err());
    }
}
