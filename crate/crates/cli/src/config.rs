use std::path::Path;

use anyhow::{bail, Context};
use euigeo::corpus::DedupePolicy;
use euigeo::offset::{InferenceConfig, DEFAULT_MIN_CONSISTENCY};
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DedupeChoice {
    First,
    Last,
    Random,
}

/// Settings shared by every subcommand. Loaded from `--config`, then
/// overridden by explicit flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub min_wan: usize,
    pub min_bssid: usize,
    pub min_consistency: f64,
    pub dedupe_policy: DedupeChoice,
    pub seed: u64,
    pub dispersion_threshold_km: f64,
    pub prefix_len: u8,
    pub strict_ul: bool,
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let inf = InferenceConfig::default();
        PipelineConfig {
            min_wan: inf.min_wan,
            min_bssid: inf.min_bssid,
            min_consistency: DEFAULT_MIN_CONSISTENCY,
            dedupe_policy: DedupeChoice::First,
            seed: 0,
            dispersion_threshold_km: euigeo::cluster::DEFAULT_DISPERSION_KM,
            prefix_len: euigeo::cluster::DEFAULT_PREFIX_LEN,
            strict_ul: false,
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..=1.0).contains(&self.min_consistency) {
            bail!("min_consistency {} outside [0, 1]", self.min_consistency);
        }
        if !self.dispersion_threshold_km.is_finite() || self.dispersion_threshold_km < 0.0 {
            bail!("dispersion_threshold_km must be a nonnegative number");
        }
        if self.prefix_len > 128 {
            bail!("prefix_len {} exceeds 128", self.prefix_len);
        }
        if self.threads == Some(0) {
            bail!("threads must be positive");
        }
        Ok(())
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            min_wan: self.min_wan,
            min_bssid: self.min_bssid,
        }
    }

    pub fn dedupe(&self) -> DedupePolicy {
        match self.dedupe_policy {
            DedupeChoice::First => DedupePolicy::First,
            DedupeChoice::Last => DedupePolicy::Last,
            DedupeChoice::Random => DedupePolicy::Random(self.seed),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
