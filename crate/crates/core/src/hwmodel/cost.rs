use serde::{Deserialize, Serialize};

use super::{MetricId, Metrics};
use crate::error::{Error, Result};

/// Weighted hardware cost with per-metric normalization references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub c_energy: f64,
    pub c_latency: f64,
    pub c_area: f64,
    pub ref_energy: f64,
    pub ref_latency: f64,
    pub ref_area: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            c_energy: 2.9,
            c_latency: 6.2,
            c_area: 1.0,
            ref_energy: 1.0,
            ref_latency: 1.0,
            ref_area: 1.0,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [self.c_energy, self.c_latency, self.c_area];
        let refs = [self.ref_energy, self.ref_latency, self.ref_area];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Config("cost coefficients must be finite and nonnegative".into()));
        }
        if coeffs.iter().all(|&c| c == 0.0) {
            return Err(Error::Config("at least one cost coefficient must be positive".into()));
        }
        if refs.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::Config("cost references must be finite and positive".into()));
        }
        Ok(())
    }

    /// Same coefficients with references replaced by `refs`.
    pub fn with_references(self, refs: &Metrics) -> Self {
        Self {
            ref_energy: refs.energy_mj,
            ref_latency: refs.latency_ms,
            ref_area: refs.area_mm2,
            ..self
        }
    }

    /// Effective weight `c / ref` of each metric, in `[latency, energy, area]` order.
    pub fn weights(&self) -> [f64; 3] {
        MetricId::ALL.map(|m| match m {
            MetricId::Latency => self.c_latency / self.ref_latency,
            MetricId::Energy => self.c_energy / self.ref_energy,
            MetricId::Area => self.c_area / self.ref_area,
        })
    }
}

pub fn cost_hw(m: &Metrics, cfg: &CostConfig) -> f64 {
    cfg.c_energy * (m.energy_mj / cfg.ref_energy)
        + cfg.c_latency * (m.latency_ms / cfg.ref_latency)
        + cfg.c_area * (m.area_mm2 / cfg.ref_area)
}
