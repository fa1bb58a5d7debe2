//! Synthetic cluster telemetry with fault injection.
//!
//! All healthy machines of a task share one waveform per metric. Each sample
//! adds independent Gaussian noise. Waveforms, noise and fault levels are in
//! normalized units and mapped to physical units through the metric bounds.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{MetricCatalog, MetricKind};
use crate::trace::{RawTraceSet, Sample};

/// Shared per-metric signal in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Waveform {
    Constant {
        level: f64,
    },
    Sine {
        amplitude: f64,
        period: f64,
        phase: f64,
    },
    /// High for the first half of each period. A positive `edge` turns the
    /// jumps into linear ramps of that many seconds.
    Square {
        low: f64,
        high: f64,
        period: f64,
        phase: f64,
        #[serde(default)]
        edge: f64,
    },
    Composite {
        parts: Vec<Waveform>,
    },
}

impl Waveform {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Waveform::Constant { level } => *level,
            Waveform::Sine {
                amplitude,
                period,
                phase,
            } => amplitude * (TAU * (t + phase) / period).sin(),
            Waveform::Square {
                low,
                high,
                period,
                phase,
                edge,
            } => {
                let u = ((t + phase) / period).rem_euclid(1.0) * period;
                let half = period / 2.0;
                if *edge <= 0.0 {
                    return if u < half { *high } else { *low };
                }
                let step = high - low;
                if u < *edge {
                    low + step * u / edge
                } else if u < half {
                    *high
                } else if u < half + edge {
                    high - step * (u - half) / edge
                } else {
                    *low
                }
            }
            Waveform::Composite { parts } => parts.iter().map(|p| p.eval(t)).sum(),
        }
    }

    /// Same waveform with every periodic component advanced by `dt` seconds.
    pub fn shifted(&self, dt: f64) -> Waveform {
        match self {
            Waveform::Constant { level } => Waveform::Constant { level: *level },
            Waveform::Sine {
                amplitude,
                period,
                phase,
            } => Waveform::Sine {
                amplitude: *amplitude,
                period: *period,
                phase: phase + dt,
            },
            Waveform::Square {
                low,
                high,
                period,
                phase,
                edge,
            } => Waveform::Square {
                low: *low,
                high: *high,
                period: *period,
                phase: phase + dt,
                edge: *edge,
            },
            Waveform::Composite { parts } => Waveform::Composite {
                parts: parts.iter().map(|p| p.shifted(dt)).collect(),
            },
        }
    }

    /// Bounds on the values the waveform can take.
    pub fn range(&self) -> (f64, f64) {
        match self {
            Waveform::Constant { level } => (*level, *level),
            Waveform::Sine { amplitude, .. } => (-amplitude.abs(), amplitude.abs()),
            Waveform::Square { low, high, .. } => (low.min(*high), low.max(*high)),
            Waveform::Composite { parts } => parts
                .iter()
                .map(Waveform::range)
                .fold((0.0, 0.0), |(a, b), (lo, hi)| (a + lo, b + hi)),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Waveform::Constant { level } => level.is_finite(),
            Waveform::Sine {
                amplitude,
                period,
                phase,
            } => amplitude.is_finite() && phase.is_finite() && *period > 0.0 && period.is_finite(),
            Waveform::Square {
                low,
                high,
                period,
                phase,
                edge,
            } => {
                low.is_finite()
                    && high.is_finite()
                    && phase.is_finite()
                    && *period > 0.0
                    && period.is_finite()
                    && *edge >= 0.0
                    && *edge <= period / 2.0
            }
            Waveform::Composite { parts } => return parts.iter().try_for_each(Waveform::validate),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid waveform {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub metric: MetricKind,
    pub waveform: Waveform,
    pub noise_sigma: f64,
}

/// One simulated task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub task_id: String,
    pub machines: usize,
    /// Seconds of telemetry.
    pub duration: f64,
    pub grid_interval: f64,
    /// Epoch seconds of the first sample.
    pub start_time: f64,
    pub metrics: Vec<MetricSpec>,
    pub bounds: MetricCatalog,
    pub seed: u64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.machines < 2 {
            return Err(Error::InvalidParameter(format!(
                "{} machines; at least 2 required",
                self.machines
            )));
        }
        if !(self.grid_interval > 0.0 && self.grid_interval.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid interval {}",
                self.grid_interval
            )));
        }
        if !(self.duration >= 16.0 * self.grid_interval) || !self.duration.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "duration {} s is shorter than 16 grid intervals",
                self.duration
            )));
        }
        if !self.start_time.is_finite() {
            return Err(Error::InvalidParameter("start time must be finite".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::InvalidParameter("no metrics configured".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.metrics {
            if !seen.insert(m.metric) {
                return Err(Error::InvalidParameter(format!(
                    "metric {} listed twice",
                    m.metric
                )));
            }
            if !(m.noise_sigma >= 0.0 && m.noise_sigma.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "noise sigma {} for {}",
                    m.noise_sigma, m.metric
                )));
            }
            m.waveform.validate()?;
        }
        Ok(())
    }

    pub fn samples_per_stream(&self) -> usize {
        (self.duration / self.grid_interval).floor() as usize
    }

    pub fn machine_id(i: usize) -> String {
        format!("m{i:02}")
    }
}

fn stream_rng(seed: u64, machine: usize, metric: MetricKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((machine as u64) << 8 | metric.index() as u64);
    rng
}

/// Generates every machine's streams from the shared waveforms plus noise.
pub fn gen_cluster(spec: &ClusterSpec) -> Result<RawTraceSet> {
    spec.validate()?;
    let n = spec.samples_per_stream();
    let mut raw = RawTraceSet::new(spec.task_id.clone());
    for ms in &spec.metrics {
        let bounds = spec.bounds.bounds(ms.metric);
        let base: Vec<f64> = (0..n)
            .map(|k| ms.waveform.eval(k as f64 * spec.grid_interval))
            .collect();
        for m in 0..spec.machines {
            let mut rng = stream_rng(spec.seed, m, ms.metric);
            let noise = Normal::new(0.0, ms.noise_sigma).expect("sigma validated");
            let samples = base
                .iter()
                .enumerate()
                .map(|(k, &b)| {
                    let e = if ms.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    Sample {
                        t: spec.start_time + k as f64 * spec.grid_interval,
                        value: bounds.denormalize(b + e),
                    }
                })
                .collect();
            raw.insert_stream(ClusterSpec::machine_id(m), ms.metric, samples)?;
        }
    }
    Ok(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultType {
    EccError,
    PcieDowngrading,
    NicDropout,
    GpuCardDrop,
    NvlinkError,
    AocError,
    CudaExecError,
    GpuExecError,
    HdfsError,
    MachineUnreachable,
}

impl FaultType {
    pub const ALL: [FaultType; 10] = [
        FaultType::EccError,
        FaultType::PcieDowngrading,
        FaultType::NicDropout,
        FaultType::GpuCardDrop,
        FaultType::NvlinkError,
        FaultType::AocError,
        FaultType::CudaExecError,
        FaultType::GpuExecError,
        FaultType::HdfsError,
        FaultType::MachineUnreachable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultType::EccError => "EccError",
            FaultType::PcieDowngrading => "PcieDowngrading",
            FaultType::NicDropout => "NicDropout",
            FaultType::GpuCardDrop => "GpuCardDrop",
            FaultType::NvlinkError => "NvlinkError",
            FaultType::AocError => "AocError",
            FaultType::CudaExecError => "CudaExecError",
            FaultType::GpuExecError => "GpuExecError",
            FaultType::HdfsError => "HdfsError",
            FaultType::MachineUnreachable => "MachineUnreachable",
        }
    }
}

impl fmt::Display for FaultType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        FaultType::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown fault type {s:?}"))
    }
}

/// How a fault rewrites one metric of the target machine. Levels and slopes
/// are in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    DropTo {
        level: f64,
    },
    SurgeTo {
        level: f64,
    },
    /// Adds `slope · (t − onset)`, slope per second.
    Ramp {
        slope: f64,
    },
    /// Holds the value found at onset.
    Flatline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub metric: MetricKind,
    #[serde(flatten)]
    pub effect: Effect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultProfile {
    pub fault_type: FaultType,
    pub target_machine: usize,
    /// Seconds after the first sample of the task.
    pub onset: f64,
    pub duration: f64,
    pub perturbations: Vec<Perturbation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub machine_id: String,
    pub fault_type: FaultType,
    /// Epoch seconds.
    pub onset: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub task_id: String,
    pub faults: Vec<FaultRecord>,
}

impl GroundTruth {
    pub fn clean(task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            faults: Vec::new(),
        }
    }

    pub fn is_faulty(&self) -> bool {
        !self.faults.is_empty()
    }
}

/// Rewrites the target machine's perturbed metrics over
/// `[onset, onset + duration)` and records the fault.
pub fn inject_fault(
    traces: &RawTraceSet,
    profile: &FaultProfile,
    bounds: &MetricCatalog,
) -> Result<(RawTraceSet, GroundTruth)> {
    let ids = traces.machine_ids();
    let machine = ids.get(profile.target_machine).ok_or_else(|| {
        Error::ProfileOutOfBounds(format!(
            "target machine {} but the task has {} machines",
            profile.target_machine,
            ids.len()
        ))
    })?;
    let (t0, t1) = traces
        .time_span()
        .ok_or_else(|| Error::ProfileOutOfBounds("trace set has no samples".into()))?;
    let span = t1 - t0;
    if !(profile.onset >= 0.0
        && profile.duration >= 0.0
        && profile.onset + profile.duration <= span + 1e-9)
    {
        return Err(Error::ProfileOutOfBounds(format!(
            "fault [{}, {}) s exceeds the {} s trace",
            profile.onset,
            profile.onset + profile.duration,
            span
        )));
    }
    if profile.perturbations.is_empty() {
        return Err(Error::ProfileOutOfBounds(
            "profile has no perturbations".into(),
        ));
    }
    let mut out = traces.clone();
    let start = t0 + profile.onset;
    let end = start + profile.duration;
    for p in &profile.perturbations {
        let b = bounds.bounds(p.metric);
        let stream = out.stream_mut(machine, p.metric).ok_or_else(|| {
            Error::ProfileOutOfBounds(format!("machine {machine} has no {} stream", p.metric))
        })?;
        let held = stream
            .iter()
            .find(|s| s.t >= start)
            .map(|s| s.value)
            .unwrap_or_default();
        for s in stream.iter_mut().filter(|s| s.t >= start && s.t < end) {
            s.value = match p.effect {
                Effect::DropTo { level } | Effect::SurgeTo { level } => b.denormalize(level),
                Effect::Ramp { slope } => s.value + b.range() * slope * (s.t - start),
                Effect::Flatline => held,
            };
        }
    }
    let truth = GroundTruth {
        task_id: traces.task_id.clone(),
        faults: vec![FaultRecord {
            machine_id: machine.clone(),
            fault_type: profile.fault_type,
            onset: start,
            duration: profile.duration,
        }],
    };
    Ok((out, truth))
}

fn drop_to(metric: MetricKind, level: f64) -> Perturbation {
    Perturbation {
        metric,
        effect: Effect::DropTo { level },
    }
}

/// Default fault duration of every template, in seconds.
pub const DEFAULT_FAULT_DURATION: f64 = 360.0;

/// One template per fault type, targeting machine 0 at onset 0.
pub fn default_profiles() -> BTreeMap<FaultType, FaultProfile> {
    use MetricKind::*;
    FaultType::ALL
        .iter()
        .map(|&ft| {
            let perturbations = match ft {
                // CPU 80.0%, GPU 65.7%
                FaultType::EccError => vec![drop_to(CpuUsage, 0.02), drop_to(GpuDutyCycle, 0.0)],
                // PFC 100%
                FaultType::PcieDowngrading => vec![Perturbation {
                    metric: PfcTxPacketRate,
                    effect: Effect::SurgeTo { level: 0.85 },
                }],
                // CPU, GPU, throughput and memory all 100%
                FaultType::NicDropout => vec![
                    drop_to(CpuUsage, 0.05),
                    drop_to(GpuDutyCycle, 0.0),
                    drop_to(TcpRdmaThroughput, 0.0),
                    drop_to(MemoryUsage, 0.3),
                ],
                // CPU 75.0%, GPU 70.0%
                FaultType::GpuCardDrop => vec![drop_to(CpuUsage, 0.1), drop_to(GpuDutyCycle, 0.0)],
                // CPU 83.3%, NVLink traffic stops with the link
                FaultType::NvlinkError => {
                    vec![drop_to(CpuUsage, 0.1), drop_to(NvlinkBandwidth, 0.0)]
                }
                // at most 25% on every column
                FaultType::AocError => vec![Perturbation {
                    metric: TcpThroughput,
                    effect: Effect::Ramp { slope: -0.0015 },
                }],
                // CPU 61.9%, memory 61.9%
                FaultType::CudaExecError => {
                    vec![drop_to(CpuUsage, 0.3), drop_to(MemoryUsage, 0.45)]
                }
                // GPU 71.4%
                FaultType::GpuExecError => {
                    vec![drop_to(GpuDutyCycle, 0.45), drop_to(GpuSmActivity, 0.4)]
                }
                // CPU 57.1%, GPU 57.1%
                FaultType::HdfsError => vec![drop_to(CpuUsage, 0.35), drop_to(GpuDutyCycle, 0.5)],
                // throughput 53.6%, CPU 47.4%
                FaultType::MachineUnreachable => vec![
                    Perturbation {
                        metric: TcpThroughput,
                        effect: Effect::Flatline,
                    },
                    Perturbation {
                        metric: TcpRdmaThroughput,
                        effect: Effect::Flatline,
                    },
                    drop_to(CpuUsage, 0.2),
                ],
            };
            (
                ft,
                FaultProfile {
                    fault_type: ft,
                    target_machine: 0,
                    onset: 0.0,
                    duration: DEFAULT_FAULT_DURATION,
                    perturbations,
                },
            )
        })
        .collect()
}

/// Probability of each fault type per task; the remainder is fault-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultMix(pub Vec<(FaultType, f64)>);

impl FaultMix {
    pub fn none() -> Self {
        FaultMix(Vec::new())
    }

    /// Observed frequency of each fault type in production training clusters.
    pub fn production() -> Self {
        use FaultType::*;
        FaultMix(vec![
            (EccError, 0.389),
            (PcieDowngrading, 0.066),
            (NicDropout, 0.057),
            (GpuCardDrop, 0.020),
            (NvlinkError, 0.017),
            (AocError, 0.009),
            (CudaExecError, 0.146),
            (GpuExecError, 0.077),
            (HdfsError, 0.057),
            (MachineUnreachable, 0.060),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.0.iter().map(|(_, p)| p).sum();
        if self.0.iter().any(|(_, p)| !(*p >= 0.0)) || total > 1.0 + 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "fault mix proportions must be >= 0 and sum to <= 1 (sum {total})"
            )));
        }
        Ok(())
    }

    /// Per-type task counts for `n` tasks by largest remainder; `None` entries
    /// are fault-free.
    pub fn quotas(&self, n: usize) -> Vec<(Option<FaultType>, usize)> {
        let clean_p = (1.0 - self.0.iter().map(|(_, p)| p).sum::<f64>()).max(0.0);
        let mut rows: Vec<(Option<FaultType>, f64)> =
            self.0.iter().map(|&(f, p)| (Some(f), p)).collect();
        rows.push((None, clean_p));
        let exact: Vec<f64> = rows.iter().map(|(_, p)| p * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut left = n.saturating_sub(counts.iter().sum());
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        rows.into_iter().map(|(f, _)| f).zip(counts).collect()
    }
}

/// Shared settings of every task in a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusTemplate {
    /// Machine counts drawn uniformly per task.
    pub machine_choices: Vec<usize>,
    pub duration: f64,
    pub grid_interval: f64,
    pub start_time: f64,
    pub metrics: Vec<MetricSpec>,
    pub bounds: MetricCatalog,
    /// Faults start no earlier than this many seconds into the task.
    pub earliest_onset: f64,
    /// Fault durations are drawn uniformly from this range, in seconds.
    pub fault_duration: (f64, f64),
    /// Waveform phases are shifted per task by up to this many seconds.
    pub phase_jitter: f64,
    /// Per task and metric, the baseline moves by up to this much
    /// (normalized units), staying within [`LEVEL_MARGIN`, 1 − `LEVEL_MARGIN`].
    #[serde(default)]
    pub level_jitter: f64,
}

/// Closest a jittered waveform may come to either end of the normalized range.
pub const LEVEL_MARGIN: f64 = 0.02;

fn level_offset(wave: &Waveform, jitter: f64, rng: &mut ChaCha8Rng) -> f64 {
    if jitter <= 0.0 {
        return 0.0;
    }
    let (lo, hi) = wave.range();
    let down = jitter.min((lo - LEVEL_MARGIN).max(0.0));
    let up = jitter.min((1.0 - LEVEL_MARGIN - hi).max(0.0));
    rng.gen_range(-down..=up)
}

impl CorpusTemplate {
    /// Ten metrics whose waveforms loosely follow a synchronous training job.
    pub fn standard(noise_sigma: f64) -> Self {
        use MetricKind::*;
        let sine = |offset: f64, amplitude: f64, period: f64| Waveform::Composite {
            parts: vec![
                Waveform::Constant { level: offset },
                Waveform::Sine {
                    amplitude,
                    period,
                    phase: 0.0,
                },
            ],
        };
        let square = |low: f64, high: f64, period: f64| Waveform::Square {
            low,
            high,
            period,
            phase: 0.0,
            edge: 10.0,
        };
        let metrics = vec![
            (CpuUsage, sine(0.6, 0.08, 90.0)),
            (PfcTxPacketRate, sine(0.08, 0.02, 45.0)),
            (MemoryUsage, sine(0.7, 0.02, 600.0)),
            (DiskUsage, sine(0.45, 0.05, 300.0)),
            (TcpThroughput, square(0.35, 0.55, 240.0)),
            (TcpRdmaThroughput, sine(0.5, 0.2, 120.0)),
            (GpuDutyCycle, sine(0.85, 0.08, 60.0)),
            (GpuPowerDraw, sine(0.7, 0.1, 60.0)),
            (GpuSmActivity, sine(0.75, 0.1, 60.0)),
            (NvlinkBandwidth, square(0.25, 0.55, 180.0)),
        ]
        .into_iter()
        .map(|(metric, waveform)| MetricSpec {
            metric,
            waveform,
            noise_sigma,
        })
        .collect();
        Self {
            machine_choices: vec![4, 8, 16],
            duration: 960.0,
            grid_interval: 1.0,
            start_time: 1_700_000_000.0,
            metrics,
            bounds: MetricCatalog::default(),
            earliest_onset: 60.0,
            fault_duration: (300.0, 600.0),
            phase_jitter: 600.0,
            level_jitter: 0.15,
        }
    }

    pub fn metric_kinds(&self) -> Vec<MetricKind> {
        self.metrics.iter().map(|m| m.metric).collect()
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        for m in &mut self.metrics {
            m.noise_sigma = sigma;
        }
        self
    }
}

/// Everything needed to regenerate one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub spec: ClusterSpec,
    pub fault: Option<FaultProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTask {
    pub trace: RawTraceSet,
    pub truth: GroundTruth,
}

impl TaskPlan {
    pub fn generate(&self) -> Result<LabeledTask> {
        let clean = gen_cluster(&self.spec)?;
        match &self.fault {
            None => Ok(LabeledTask {
                truth: GroundTruth::clean(clean.task_id.clone()),
                trace: clean,
            }),
            Some(profile) => {
                let (trace, truth) = inject_fault(&clean, profile, &self.spec.bounds)?;
                Ok(LabeledTask { trace, truth })
            }
        }
    }
}

/// Plans a deterministic corpus: fault types are assigned by quota and
/// shuffled, machine counts, phases, targets, onsets and durations drawn from
/// the seed.
pub fn plan_corpus(
    n_tasks: usize,
    template: &CorpusTemplate,
    mix: &FaultMix,
    seed: u64,
) -> Result<Vec<TaskPlan>> {
    mix.validate()?;
    if template.machine_choices.is_empty() {
        return Err(Error::InvalidParameter(
            "no machine counts to choose from".into(),
        ));
    }
    let (lo, hi) = template.fault_duration;
    let any_faults = mix.0.iter().any(|(_, p)| *p > 0.0);
    if any_faults
        && !(lo >= 0.0
            && lo <= hi
            && template.earliest_onset >= 0.0
            && template.earliest_onset + hi <= template.duration)
    {
        return Err(Error::InvalidParameter(
            "fault duration range does not fit between earliest onset and task end".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<Option<FaultType>> = mix
        .quotas(n_tasks)
        .into_iter()
        .flat_map(|(f, c)| std::iter::repeat_n(f, c))
        .collect();
    kinds.shuffle(&mut rng);
    let templates = default_profiles();
    let mut plans = Vec::with_capacity(n_tasks);
    for (i, kind) in kinds.into_iter().enumerate() {
        let machines = *template
            .machine_choices
            .choose(&mut rng)
            .expect("non-empty");
        let shift = rng.gen_range(0.0..=template.phase_jitter);
        let offsets: Vec<f64> = template
            .metrics
            .iter()
            .map(|m| level_offset(&m.waveform, template.level_jitter, &mut rng))
            .collect();
        let task_seed = rng.gen::<u64>();
        let span = (template.duration / template.grid_interval).floor() - 1.0;
        let span = span * template.grid_interval;
        let fault = kind.map(|ft| {
            let duration = if hi > lo {
                rng.gen_range(lo..=hi).round()
            } else {
                lo
            };
            let latest = (span - duration).max(template.earliest_onset);
            let onset = rng.gen_range(template.earliest_onset..=latest).round();
            let target = rng.gen_range(0..machines);
            FaultProfile {
                target_machine: target,
                onset,
                duration,
                ..templates[&ft].clone()
            }
        });
        let spec = ClusterSpec {
            task_id: format!("task-{i:04}"),
            machines,
            duration: template.duration,
            grid_interval: template.grid_interval,
            start_time: template.start_time + (i as f64) * 10_000.0,
            metrics: template
                .metrics
                .iter()
                .zip(&offsets)
                .map(|(m, &offset)| MetricSpec {
                    metric: m.metric,
                    waveform: if offset == 0.0 {
                        m.waveform.shifted(shift)
                    } else {
                        Waveform::Composite {
                            parts: vec![
                                m.waveform.shifted(shift),
                                Waveform::Constant { level: offset },
                            ],
                        }
                    },
                    noise_sigma: m.noise_sigma,
                })
                .collect(),
            bounds: template.bounds.clone(),
            seed: task_seed,
        };
        plans.push(TaskPlan { spec, fault });
    }
    Ok(plans)
}

/// Generates a whole corpus in memory.
pub fn gen_labeled_corpus(
    n_tasks: usize,
    template: &CorpusTemplate,
    mix: &FaultMix,
    seed: u64,
) -> Result<Vec<LabeledTask>> {
    plan_corpus(n_tasks, template, mix, seed)?
        .iter()
        .map(TaskPlan::generate)
        .collect()
}
