//! Raw per-machine telemetry and the on-disk trace formats.
//!
//! CSV traces carry the header `timestamp,machine_id,metric,value`, one sample
//! per row. Any other file extension is read as JSON lines with the same four
//! keys.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MetricKind;

const CSV_HEADER: [&str; 4] = ["timestamp", "machine_id", "metric", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub machine_id: String,
    pub metric: MetricKind,
}

/// Samples for one task keyed by (machine, metric). Streams are kept sorted by
/// timestamp with no duplicates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTraceSet {
    pub task_id: String,
    streams: BTreeMap<StreamKey, Vec<Sample>>,
}

impl RawTraceSet {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            streams: BTreeMap::new(),
        }
    }

    /// Inserts a whole stream. Samples are sorted; duplicates and non-finite
    /// values are rejected.
    pub fn insert_stream(
        &mut self,
        machine_id: impl Into<String>,
        metric: MetricKind,
        mut samples: Vec<Sample>,
    ) -> Result<()> {
        let machine_id = machine_id.into();
        if let Some(bad) = samples
            .iter()
            .find(|s| !s.t.is_finite() || !s.value.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "non-finite sample ({}, {}) for {machine_id}/{metric}",
                bad.t, bad.value
            )));
        }
        samples.sort_by(|a, b| a.t.total_cmp(&b.t));
        check_duplicates(&machine_id, metric, &samples)?;
        self.streams
            .insert(StreamKey { machine_id, metric }, samples);
        Ok(())
    }

    pub fn stream(&self, machine_id: &str, metric: MetricKind) -> Option<&[Sample]> {
        self.streams
            .get(&StreamKey {
                machine_id: machine_id.to_string(),
                metric,
            })
            .map(Vec::as_slice)
    }

    pub(crate) fn stream_mut(
        &mut self,
        machine_id: &str,
        metric: MetricKind,
    ) -> Option<&mut Vec<Sample>> {
        self.streams.get_mut(&StreamKey {
            machine_id: machine_id.to_string(),
            metric,
        })
    }

    pub fn streams(&self) -> impl Iterator<Item = (&StreamKey, &[Sample])> {
        self.streams.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn stream_count(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    /// Sorted, deduplicated machine ids across all streams.
    pub fn machine_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.streams.keys().map(|k| k.machine_id.clone()).collect();
        ids.dedup();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Machines that carry `metric`, sorted.
    pub fn machines_with(&self, metric: MetricKind) -> Vec<&str> {
        self.streams
            .keys()
            .filter(|k| k.metric == metric)
            .map(|k| k.machine_id.as_str())
            .collect()
    }

    pub fn metrics(&self) -> Vec<MetricKind> {
        let mut m: Vec<MetricKind> = self.streams.keys().map(|k| k.metric).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Earliest and latest timestamp over all streams.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        self.streams
            .values()
            .filter(|s| !s.is_empty())
            .fold(None, |acc, s| {
                let (lo, hi) = (s[0].t, s[s.len() - 1].t);
                Some(match acc {
                    None => (lo, hi),
                    Some((a, b)) => (f64::min(a, lo), f64::max(b, hi)),
                })
            })
    }

    /// Writes the CSV trace format, rows ordered by machine, metric, time.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "{}", CSV_HEADER.join(","))?;
        for (key, samples) in &self.streams {
            for s in samples {
                writeln!(w, "{},{},{},{}", s.t, key.machine_id, key.metric, s.value)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_duplicates(machine_id: &str, metric: MetricKind, samples: &[Sample]) -> Result<()> {
    if let Some(pair) = samples.windows(2).find(|p| p[0].t == p[1].t) {
        return Err(Error::DuplicateSample {
            machine_id: machine_id.to_string(),
            metric,
            timestamp: pair[0].t,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    JsonLines,
}

impl TraceFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => TraceFormat::Csv,
            _ => TraceFormat::JsonLines,
        }
    }
}

#[derive(Deserialize)]
struct JsonRow {
    timestamp: f64,
    machine_id: String,
    metric: String,
    value: f64,
}

/// Reads a trace file. The task id is the file stem.
pub fn parse_trace(path: &Path, format: TraceFormat) -> Result<RawTraceSet> {
    let task_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("task")
        .to_string();
    let mut rows: BTreeMap<StreamKey, Vec<Sample>> = BTreeMap::new();
    let mut push = |line: u64, ts: f64, machine: String, metric: &str, value: f64| -> Result<()> {
        if !ts.is_finite() || !value.is_finite() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: "non-finite timestamp or value".into(),
            });
        }
        let metric = metric
            .parse::<MetricKind>()
            .map_err(|_| Error::UnknownMetric {
                line,
                name: metric.to_string(),
            })?;
        rows.entry(StreamKey {
            machine_id: machine,
            metric,
        })
        .or_default()
        .push(Sample { t: ts, value });
        Ok(())
    };

    match format {
        TraceFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .trim(csv::Trim::All)
                .from_path(path)
                .map_err(|e| csv_error(path, e))?;
            let mut records = reader.records();
            match records.next() {
                None => {}
                Some(header) => {
                    let header = header.map_err(|e| csv_error(path, e))?;
                    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
                        return Err(Error::MalformedRow {
                            path: path.to_path_buf(),
                            line: 1,
                            reason: format!("expected header {}", CSV_HEADER.join(",")),
                        });
                    }
                }
            }
            for rec in records {
                let rec = rec.map_err(|e| csv_error(path, e))?;
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                let malformed = |reason: &str| Error::MalformedRow {
                    path: path.to_path_buf(),
                    line,
                    reason: reason.to_string(),
                };
                if rec.len() != 4 {
                    return Err(malformed("expected 4 fields"));
                }
                let ts: f64 = rec[0].parse().map_err(|_| malformed("bad timestamp"))?;
                let value: f64 = rec[3].parse().map_err(|_| malformed("bad value"))?;
                push(line, ts, rec[1].to_string(), &rec[2], value)?;
            }
        }
        TraceFormat::JsonLines => {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line_no = i as u64 + 1;
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                // serde_json rejects NaN literals, which surfaces as a malformed row.
                let row: JsonRow =
                    serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason: e.to_string(),
                    })?;
                push(
                    line_no,
                    row.timestamp,
                    row.machine_id,
                    &row.metric,
                    row.value,
                )?;
            }
        }
    }

    let mut set = RawTraceSet::new(task_id);
    for (key, mut samples) in rows {
        samples.sort_by(|a, b| a.t.total_cmp(&b.t));
        check_duplicates(&key.machine_id, key.metric, &samples)?;
        set.streams.insert(key, samples);
    }
    Ok(set)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            reason: format!("{other:?}"),
        },
    }
}
