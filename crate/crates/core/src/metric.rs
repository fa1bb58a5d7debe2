//! Host monitoring metrics and their physical limits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! metric_catalog {
    ($($variant:ident => ($min:expr, $max:expr)),+ $(,)?) => {
        /// One collected host metric. Declaration order is the catalog order used
        /// for tie-breaking throughout the crate.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum MetricKind {
            $($variant),+
        }

        impl MetricKind {
            pub const ALL: &'static [MetricKind] = &[$(MetricKind::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(MetricKind::$variant => stringify!($variant)),+
                }
            }

            /// Hardware limits used by min-max normalization unless overridden.
            pub fn default_bounds(self) -> Bounds {
                match self {
                    $(MetricKind::$variant => Bounds { min: $min, max: $max }),+
                }
            }
        }
    };
}

metric_catalog! {
    CpuUsage => (0.0, 100.0),
    PfcTxPacketRate => (0.0, 100_000.0),
    MemoryUsage => (0.0, 100.0),
    DiskUsage => (0.0, 100.0),
    TcpThroughput => (0.0, 25.0),
    TcpRdmaThroughput => (0.0, 200.0),
    GpuMemoryUsed => (0.0, 80.0),
    GpuDutyCycle => (0.0, 100.0),
    GpuPowerDraw => (0.0, 400.0),
    GpuTemperature => (0.0, 100.0),
    GpuSmActivity => (0.0, 100.0),
    GpuClocks => (0.0, 2000.0),
    GpuTensorCoreActivity => (0.0, 100.0),
    GpuGraphicsEngineActivity => (0.0, 100.0),
    GpuFpEngineActivity => (0.0, 100.0),
    GpuMemoryBandwidthUtil => (0.0, 100.0),
    PcieBandwidth => (0.0, 64.0),
    PcieUsage => (0.0, 100.0),
    NvlinkBandwidth => (0.0, 600.0),
    EcnPacketRate => (0.0, 100_000.0),
    CnpPacketRate => (0.0, 100_000.0),
}

impl MetricKind {
    /// Position in the catalog.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        MetricKind::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// Lower and upper physical limit of a metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::InvalidParameter(format!(
                "bounds require finite min < max, got ({min}, {max})"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Physical value to the unit interval, clamped.
    pub fn normalize(&self, value: f64) -> f64 {
        ((value - self.min) / self.range()).clamp(0.0, 1.0)
    }

    /// Unit-interval value back to physical units (no clamping).
    pub fn denormalize(&self, unit: f64) -> f64 {
        self.min + unit * self.range()
    }
}

/// Per-metric bounds, defaulting to [`MetricKind::default_bounds`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCatalog {
    overrides: BTreeMap<MetricKind, Bounds>,
}

impl MetricCatalog {
    pub fn with_override(mut self, metric: MetricKind, bounds: Bounds) -> Self {
        self.overrides.insert(metric, bounds);
        self
    }

    pub fn set(&mut self, metric: MetricKind, bounds: Bounds) {
        self.overrides.insert(metric, bounds);
    }

    pub fn bounds(&self, metric: MetricKind) -> Bounds {
        self.overrides
            .get(&metric)
            .copied()
            .unwrap_or_else(|| metric.default_bounds())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn catalog_has_unique_names_and_valid_bounds() {
        assert_eq!(MetricKind::ALL.len(), 21);
        let names: BTreeSet<_> = MetricKind::ALL.iter().map(|m| m.name()).collect();
        assert_eq!(names.len(), MetricKind::ALL.len());
        for (i, m) in MetricKind::ALL.iter().enumerate() {
            assert_eq!(m.index(), i);
            let b = m.default_bounds();
            assert!(b.min < b.max, "{m}");
        }
    }

    #[test]
    fn names_round_trip() {
        for m in MetricKind::ALL {
            assert_eq!(m.name().parse::<MetricKind>().unwrap(), *m);
        }
        assert!("CpuUsagee".parse::<MetricKind>().is_err());
    }

    #[test]
    fn bounds_reject_inverted_limits() {
        assert!(Bounds::new(1.0, 1.0).is_err());
        assert!(Bounds::new(2.0, 1.0).is_err());
        assert!(Bounds::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let cat = MetricCatalog::default()
            .with_override(MetricKind::CpuUsage, Bounds::new(0.0, 1.0).unwrap());
        assert_eq!(cat.bounds(MetricKind::CpuUsage).max, 1.0);
        assert_eq!(cat.bounds(MetricKind::DiskUsage).max, 100.0);
    }
}
