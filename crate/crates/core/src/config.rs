//! Experiment configuration: a single JSON file validated up front, before
//! any cell runs.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policies::POLICY_NAMES;
use crate::stochastic::{Popularity, ServiceFamily, ServiceModel};
use crate::topology::{ClusterTopology, TypeCatalog};

/// Enumerating all C(M, d) types; configs beyond this are rejected.
const MAX_TYPES: usize = 200_000;

#[derive(Debug, Error)]
#[error("invalid config:\n{}", .0.join("\n"))]
pub struct ConfigError(pub Vec<String>);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySection {
    pub branching: Vec<usize>,
    /// Locality levels N; defaults to branching.len() + 1.
    #[serde(default)]
    pub levels: Option<usize>,
    /// Replicas per data chunk (d).
    #[serde(default = "default_replicas")]
    pub replicas: usize,
}

fn default_replicas() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceSection {
    pub family: ServiceFamily,
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrivalSection {
    pub popularity: Popularity,
    /// Hard per-slot bound on total arrivals (C_A).
    #[serde(default = "default_cap")]
    pub cap: u64,
}

fn default_cap() -> u64 {
    100
}

/// Offered load grid: either fractions of the instance's capacity (the LP
/// optimum is the normalizer) or raw total rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SweepSection {
    CapacityFraction { rho: Vec<f64> },
    TotalRate { rates: Vec<f64> },
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection::CapacityFraction { rho: vec![0.5, 0.7, 0.8, 0.9, 0.95, 1.05] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub topology: TopologySection,
    pub service: ServiceSection,
    pub arrival: ArrivalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub policies: Vec<String>,
    pub horizon: u64,
    /// Slots excluded from time averages; defaults to 10% of the horizon.
    #[serde(default)]
    pub warmup: Option<u64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub trace: bool,
    #[serde(default = "default_rng")]
    pub rng: String,
    /// FCFS locality scan depth; None scans the whole queue.
    #[serde(default)]
    pub fcfs_scan_depth: Option<usize>,
    /// Output directory; the CLI's --out overrides it.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_rng() -> String {
    "chacha8".to_string()
}

fn binomial_capped(m: usize, d: usize, cap: usize) -> usize {
    let mut result = 1usize;
    for i in 0..d {
        result = result.saturating_mul(m - i) / (i + 1);
        if result > cap {
            return cap + 1;
        }
    }
    result
}

/// Validated, ready-to-run form of a config.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub config: ExperimentConfig,
    pub topology: Arc<ClusterTopology>,
    pub catalog: Arc<TypeCatalog>,
    pub service: ServiceModel,
    pub warmup: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(vec![format!("json: {e}")]))
    }

    pub fn validate(&self) -> Result<ValidatedConfig, ConfigError> {
        let mut errors = Vec::new();

        let levels = self.topology.levels.unwrap_or(self.topology.branching.len() + 1);
        let topology = match ClusterTopology::new(self.topology.branching.clone(), levels) {
            Ok(t) => Some(t),
            Err(e) => {
                errors.push(format!("topology: {e}"));
                None
            }
        };

        if let Some(topo) = &topology {
            let m = topo.servers();
            if self.topology.replicas == 0 || self.topology.replicas > m {
                errors.push(format!(
                    "topology: replicas {} out of range 1..={m}",
                    self.topology.replicas
                ));
            } else if binomial_capped(m, self.topology.replicas, MAX_TYPES) > MAX_TYPES {
                errors.push(format!(
                    "topology: C({m}, {}) task types exceed the supported {MAX_TYPES}",
                    self.topology.replicas
                ));
            }
            if self.service.means.len() != topo.levels() {
                errors.push(format!(
                    "service: {} means for {} levels",
                    self.service.means.len(),
                    topo.levels()
                ));
            }
        }

        let service = match ServiceModel::new(self.service.family, self.service.means.clone()) {
            Ok(s) => Some(s),
            Err(e) => {
                errors.push(format!("service: {e}"));
                None
            }
        };

        if let Popularity::Zipf { exponent } = self.arrival.popularity {
            if !exponent.is_finite() || exponent < 0.0 {
                errors.push(format!("arrival: zipf exponent {exponent} must be nonnegative"));
            }
        }
        if self.arrival.cap == 0 {
            errors.push("arrival: cap must be positive".into());
        }

        match &self.sweep {
            SweepSection::CapacityFraction { rho } => {
                if rho.is_empty() {
                    errors.push("sweep: empty rho grid".into());
                }
                if rho.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                    errors.push(format!("sweep: rho values must be positive, got {rho:?}"));
                }
            }
            SweepSection::TotalRate { rates } => {
                if rates.is_empty() {
                    errors.push("sweep: empty rate grid".into());
                }
                if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
                    errors.push(format!("sweep: rates must be nonnegative, got {rates:?}"));
                }
                if rates.iter().any(|r| *r > self.arrival.cap as f64) {
                    errors.push(format!(
                        "sweep: rates must not exceed the arrival cap {}",
                        self.arrival.cap
                    ));
                }
            }
        }

        if self.policies.is_empty() {
            errors.push("policies: at least one required".into());
        }
        for p in &self.policies {
            if !POLICY_NAMES.contains(&p.as_str()) {
                errors.push(format!("policies: unknown policy {p:?} (expected {POLICY_NAMES:?})"));
            }
        }

        let warmup = self.warmup.unwrap_or(self.horizon / 10);
        if self.horizon == 0 {
            errors.push("horizon: must be positive".into());
        }
        if warmup >= self.horizon && self.horizon > 0 {
            errors.push(format!("warmup {warmup} leaves no slots of horizon {}", self.horizon));
        }
        if self.seeds.is_empty() {
            errors.push("seeds: at least one required".into());
        }
        if self.rng != "chacha8" {
            errors.push(format!("rng: only \"chacha8\" is supported, got {:?}", self.rng));
        }

        if !errors.is_empty() {
            return Err(ConfigError(errors));
        }
        let topology = Arc::new(topology.expect("validated"));
        let catalog = TypeCatalog::all_types(&topology, self.topology.replicas)
            .map_err(|e| ConfigError(vec![format!("catalog: {e}")]))?;
        Ok(ValidatedConfig {
            config: self.clone(),
            topology,
            catalog: Arc::new(catalog),
            service: service.expect("validated"),
            warmup,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn desk_config_json() -> String {
        r#"{
            "topology": { "branching": [2, 2, 3], "replicas": 3 },
            "service": { "family": "lognormal", "means": [1.0, 1.1111111111111112, 1.6666666666666667, 4.0] },
            "arrival": { "popularity": { "kind": "uniform" }, "cap": 100 },
            "sweep": { "mode": "capacity-fraction", "rho": [0.5] },
            "policies": ["gb-pandas"],
            "horizon": 2000,
            "seeds": [1, 2]
        }"#
        .to_string()
    }

    #[test]
    fn desk_config_parses_and_validates() {
        let cfg = ExperimentConfig::from_json(&desk_config_json()).unwrap();
        let validated = cfg.validate().unwrap();
        assert_eq!(validated.topology.servers(), 12);
        assert_eq!(validated.topology.levels(), 4);
        assert_eq!(validated.catalog.len(), 220);
        assert_eq!(validated.warmup, 200);
    }

    #[test]
    fn zero_usable_horizon_is_rejected() {
        let mut cfg = ExperimentConfig::from_json(&desk_config_json()).unwrap();
        cfg.warmup = Some(2000);
        let err = cfg.validate().unwrap_err();
        assert!(err.0.iter().any(|e| e.contains("warmup")), "{err}");
    }

    #[test]
    fn unknown_policy_is_rejected() {
        let mut cfg = ExperimentConfig::from_json(&desk_config_json()).unwrap();
        cfg.policies = vec!["round-robin".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decreasing_means_are_rejected() {
        let mut cfg = ExperimentConfig::from_json(&desk_config_json()).unwrap();
        cfg.service.means = vec![4.0, 1.0, 2.0, 3.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unsupported_rng_is_rejected() {
        let mut cfg = ExperimentConfig::from_json(&desk_config_json()).unwrap();
        cfg.rng = "mt19937".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(
            r#"{
                "topology": { "branching": [4], "replicas": 2 },
                "service": { "family": "geometric", "means": [1.0, 2.0] },
                "arrival": { "popularity": { "kind": "zipf", "exponent": 1.2 } },
                "policies": ["fcfs"],
                "horizon": 100,
                "seeds": [7]
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.arrival.cap, 100);
        assert_eq!(cfg.rng, "chacha8");
        assert!(matches!(cfg.sweep, SweepSection::CapacityFraction { .. }));
        assert!(cfg.validate().is_ok());
    }
}
