//! Run configuration: one TOML file with a section per stage. Every key has
//! a built-in default; command-line flags override the file.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trainwatch_core::baselines::MdConfig;
use trainwatch_core::detector::DetectorConfig;
use trainwatch_core::simulator::{CorpusTemplate, FaultMix, FaultType};
use trainwatch_core::vae::VaeHyperparams;
use trainwatch_core::workflow::{PrioritizeConfig, TrainingConfig};
use trainwatch_core::{Bounds, MetricCatalog, MetricKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    /// Evaluation tasks.
    pub tasks: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub machine_choices: Vec<usize>,
    pub duration: f64,
    pub level_jitter: f64,
    /// Faults start no earlier than this, in seconds.
    pub earliest_onset: f64,
    /// Range of fault durations, in seconds.
    pub fault_duration: (f64, f64),
    /// Fault-free tasks used to train the models.
    pub train_tasks: usize,
    pub train_seed: u64,
    /// Labeled tasks used to learn the metric priority.
    pub history_tasks: usize,
    pub history_seed: u64,
    /// Probability of each fault type per task; absent means the default
    /// production mix.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault_mix: Option<BTreeMap<String, f64>>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        let t = CorpusTemplate::standard(0.005);
        Self {
            tasks: 200,
            seed: 7,
            noise_sigma: 0.005,
            machine_choices: t.machine_choices,
            duration: t.duration,
            level_jitter: t.level_jitter,
            earliest_onset: t.earliest_onset,
            fault_duration: t.fault_duration,
            train_tasks: 16,
            train_seed: 101,
            history_tasks: 100,
            history_seed: 202,
            fault_mix: None,
        }
    }
}

impl SimulatorConfig {
    pub fn template(&self, bounds: &MetricCatalog) -> CorpusTemplate {
        let mut t = CorpusTemplate::standard(self.noise_sigma);
        t.machine_choices = self.machine_choices.clone();
        t.duration = self.duration;
        t.level_jitter = self.level_jitter;
        t.earliest_onset = self.earliest_onset;
        t.fault_duration = self.fault_duration;
        t.bounds = bounds.clone();
        t
    }

    pub fn mix(&self) -> Result<FaultMix> {
        let Some(m) = &self.fault_mix else {
            return Ok(FaultMix::production());
        };
        let mut rows = Vec::new();
        for (name, p) in m {
            let ft: FaultType = name.parse().map_err(anyhow::Error::msg)?;
            rows.push((ft, *p));
        }
        rows.sort_by_key(|r| r.0);
        let mix = FaultMix(rows);
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub max_windows: usize,
    pub stride: usize,
    /// Also train the single multi-metric model.
    pub integrated: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        Self {
            max_windows: d.max_windows,
            stride: d.stride,
            integrated: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// Seconds between grid points of the aligned tensors.
    pub grid_interval: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self { grid_interval: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub simulator: SimulatorConfig,
    pub preprocess: PreprocessSection,
    /// Physical limits by metric name, overriding the catalog.
    pub bounds: BTreeMap<String, Bounds>,
    pub vae: VaeHyperparams,
    pub training: TrainingSection,
    pub prioritize: PrioritizeConfig,
    pub detector: DetectorConfig,
    pub md: MdConfig,
    /// Worker threads; 0 picks one per core.
    pub jobs: usize,
}

impl Config {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.catalog()?;
        Ok(cfg)
    }

    pub fn catalog(&self) -> Result<MetricCatalog> {
        let mut c = MetricCatalog::default();
        for (name, b) in &self.bounds {
            let m: MetricKind = name
                .parse()
                .map_err(|e: String| anyhow::anyhow!("[bounds] {e}"))?;
            c.set(
                m,
                Bounds::new(b.min, b.max).with_context(|| format!("[bounds] {name}"))?,
            );
        }
        Ok(c)
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            hyperparams: self.vae.clone(),
            max_windows: self.training.max_windows,
            stride: self.training.stride,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.vae.validate()?;
        if self.vae.w != self.detector.window_w {
            bail!(
                "vae.w ({}) must equal detector.window_w ({})",
                self.vae.w,
                self.detector.window_w
            );
        }
        self.simulator.mix()?;
        self.catalog()?;
        self.detector.validate(self.preprocess.grid_interval)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
