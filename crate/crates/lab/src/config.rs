//! TOML experiment configuration.
//!
//! ```toml
//! archetype = "dual_encoder"
//! methods = ["cda", "task_vector", "daudos"]
//! settings = ["raw", "text_only", "vision_only", "both"]
//! seeds = [3, 4, 5]
//! output_dir = "runs/demo"
//! daudos_k_fraction = 0.3334
//!
//! [gen]
//! n_samples = 640
//! seed = 0
//! bias_channel = "vision"
//! bias_strength = 0.15
//! gender_occupation_correlation = 1.0
//! noise_sigma = 0.05
//!
//! [train]
//! epochs = 80            # budget for base training
//! lr = 0.05
//! base_target_ra = 0.92  # early-stop once the base resolves this fraction
//! debias_epochs = 8
//! debias_lr = 0.005
//! daudos_epoch_factor = 3
//!
//! [search]
//! trials = 64
//! lambda_gap = 1.0
//! seed = 11
//!
//! [probes]
//! n_per_cell = 12
//! ```
//!
//! The `MBL_SEED` environment variable, when set, replaces the seed list.

use serde::Deserialize;

use mbl_core::debias::{CavSource, DosPolarity, SearchConfig};
use mbl_core::forge::{BiasChannel, GenSpec};
use mbl_core::models::{Archetype, FreezeSetting};

use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Cda,
    TaskVector,
    Daudos,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cda => "cda",
            Method::TaskVector => "task_vector",
            Method::Daudos => "daudos",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "cda" => Ok(Method::Cda),
            "task_vector" | "taskvector" => Ok(Method::TaskVector),
            "daudos" => Ok(Method::Daudos),
            other => Err(LabError::Validation(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    archetype: String,
    methods: Vec<String>,
    settings: Vec<String>,
    seeds: Vec<u64>,
    output_dir: Option<String>,
    #[serde(default = "default_k_fraction")]
    daudos_k_fraction: f64,
    #[serde(default = "default_polarity")]
    dos_polarity: String,
    #[serde(default = "default_cav_source")]
    cav_source: String,
    gen: RawGen,
    train: RawTrain,
    #[serde(default)]
    search: RawSearch,
    #[serde(default)]
    probes: RawProbes,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGen {
    n_samples: usize,
    #[serde(default)]
    seed: u64,
    bias_channel: String,
    bias_strength: f64,
    gender_occupation_correlation: f64,
    #[serde(default = "default_noise")]
    noise_sigma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs: usize,
    lr: f64,
    #[serde(default = "default_target_ra")]
    base_target_ra: f64,
    debias_epochs: usize,
    #[serde(default)]
    debias_lr: Option<f64>,
    #[serde(default = "default_daudos_factor")]
    daudos_epoch_factor: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSearch {
    #[serde(default = "default_trials")]
    trials: u32,
    #[serde(default = "default_lambda")]
    lambda_gap: f64,
    #[serde(default = "default_search_seed")]
    seed: u64,
}

impl Default for RawSearch {
    fn default() -> Self {
        RawSearch {
            trials: default_trials(),
            lambda_gap: default_lambda(),
            seed: default_search_seed(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProbes {
    #[serde(default = "default_n_per_cell")]
    n_per_cell: usize,
}

fn default_k_fraction() -> f64 {
    1.0 / 3.0
}
fn default_polarity() -> String {
    "ascending".to_string()
}
fn default_cav_source() -> String {
    "vision".to_string()
}
fn default_noise() -> f64 {
    0.05
}
fn default_target_ra() -> f64 {
    0.92
}
fn default_daudos_factor() -> usize {
    3
}
fn default_trials() -> u32 {
    64
}
fn default_lambda() -> f64 {
    1.0
}
fn default_search_seed() -> u64 {
    11
}
fn default_n_per_cell() -> usize {
    12
}

impl Default for RawProbes {
    fn default() -> Self {
        RawProbes {
            n_per_cell: default_n_per_cell(),
        }
    }
}

/// Validated experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub archetype: Archetype,
    pub methods: Vec<Method>,
    pub settings: Vec<FreezeSetting>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<String>,
    pub daudos_k_fraction: f64,
    pub dos_polarity: DosPolarity,
    pub cav_source: CavSource,
    pub gen: GenSpec,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub n_per_cell: usize,
    /// Canonical text this config was parsed from; hashed into output paths.
    canonical: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub base_target_ra: f64,
    pub debias_epochs: usize,
    pub debias_lr: f64,
    pub daudos_epoch_factor: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| LabError::Validation(format!("config parse error: {e}")))?;
        let archetype = Archetype::parse(&raw.archetype)
            .map_err(|e| LabError::Validation(e.to_string()))?;
        let methods: Vec<Method> = raw
            .methods
            .iter()
            .map(|m| Method::parse(m))
            .collect::<Result<_>>()?;
        let settings: Vec<FreezeSetting> = raw
            .settings
            .iter()
            .map(|s| FreezeSetting::parse(s).map_err(|e| LabError::Validation(e.to_string())))
            .collect::<Result<_>>()?;

        if methods.is_empty() {
            return Err(LabError::Validation("methods must be non-empty".into()));
        }
        if settings.is_empty() {
            return Err(LabError::Validation("settings must be non-empty".into()));
        }
        let mut seeds = raw.seeds.clone();
        if let Ok(value) = std::env::var("MBL_SEED") {
            let seed: u64 = value.parse().map_err(|_| {
                LabError::Validation(format!("MBL_SEED `{value}` is not an integer"))
            })?;
            seeds = vec![seed];
        }
        if seeds.is_empty() {
            return Err(LabError::Validation("seeds must be non-empty".into()));
        }
        if !(0.0 < raw.daudos_k_fraction && raw.daudos_k_fraction <= 1.0) {
            return Err(LabError::Validation(format!(
                "daudos_k_fraction {} outside (0, 1]",
                raw.daudos_k_fraction
            )));
        }
        let gen = GenSpec {
            n_samples: raw.gen.n_samples,
            seed: raw.gen.seed,
            bias_channel: BiasChannel::parse(&raw.gen.bias_channel)
                .map_err(|e| LabError::Validation(e.to_string()))?,
            bias_strength: raw.gen.bias_strength,
            gender_occupation_correlation: raw.gen.gender_occupation_correlation,
            noise_sigma: raw.gen.noise_sigma,
        };
        gen.validate().map_err(|e| LabError::Validation(e.to_string()))?;
        if raw.train.epochs == 0 || raw.train.debias_epochs == 0 {
            return Err(LabError::Validation("epoch counts must be >= 1".into()));
        }
        if raw.train.lr <= 0.0 {
            return Err(LabError::Validation("lr must be > 0".into()));
        }
        if raw.train.daudos_epoch_factor == 0 {
            return Err(LabError::Validation("daudos_epoch_factor must be >= 1".into()));
        }
        let search = SearchConfig {
            trials: raw.search.trials,
            lambda_gap: raw.search.lambda_gap,
            seed: raw.search.seed,
        };
        search
            .validate()
            .map_err(|e| LabError::Validation(e.to_string()))?;
        if raw.probes.n_per_cell == 0 {
            return Err(LabError::Validation("probes.n_per_cell must be >= 1".into()));
        }

        let mut canonical = text.to_string();
        canonical.push_str("\n# effective seeds: ");
        for s in &seeds {
            canonical.push_str(&format!("{s},"));
        }
        Ok(ExperimentConfig {
            archetype,
            methods,
            settings,
            seeds,
            output_dir: raw.output_dir,
            daudos_k_fraction: raw.daudos_k_fraction,
            dos_polarity: DosPolarity::parse(&raw.dos_polarity)
                .map_err(|e| LabError::Validation(e.to_string()))?,
            cav_source: CavSource::parse(&raw.cav_source)
                .map_err(|e| LabError::Validation(e.to_string()))?,
            gen,
            train: TrainConfig {
                epochs: raw.train.epochs,
                lr: raw.train.lr,
                base_target_ra: raw.train.base_target_ra,
                debias_epochs: raw.train.debias_epochs,
                debias_lr: raw.train.debias_lr.unwrap_or(raw.train.lr),
                daudos_epoch_factor: raw.train.daudos_epoch_factor,
            },
            search,
            n_per_cell: raw.probes.n_per_cell,
            canonical,
        })
    }

    /// FNV-1a digest of the canonical config text; output paths embed it so
    /// every artifact location is a pure function of the configuration.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.canonical.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    pub fn digest_hex(&self) -> String {
        format!("{:016x}", self.digest())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
archetype = "dual_encoder"
methods = ["cda"]
settings = ["vision_only"]
seeds = [1, 2]

[gen]
n_samples = 64
bias_channel = "vision"
bias_strength = 0.15
gender_occupation_correlation = 1.0

[train]
epochs = 10
lr = 0.05
debias_epochs = 4
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.archetype, Archetype::DualEncoder);
        assert_eq!(cfg.methods, vec![Method::Cda]);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.train.debias_lr, 0.05);
        assert_eq!(cfg.n_per_cell, 12);
        assert_eq!(cfg.search.trials, 64);
        assert!((cfg.daudos_k_fraction - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_seeds_fail_validation() {
        let bad = MINIMAL.replace("seeds = [1, 2]", "seeds = []");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(LabError::Validation(_))
        ));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(LabError::Validation(_))
        ));
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(a.digest(), b.digest());
        let other =
            ExperimentConfig::from_toml(&MINIMAL.replace("epochs = 10", "epochs = 11")).unwrap();
        assert_ne!(a.digest(), other.digest());
    }
}
