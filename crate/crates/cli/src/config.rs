//! Run configuration: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use polygrain_core::engine::{BaselinePredictor, Thresholds};
use polygrain_core::substrate::{OrientationSampler, SeedSampler};
use polygrain_core::DomainSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubstrateSource {
    /// Sample seeds and orientations, then tessellate.
    Generate {
        sampler: SeedSampler,
        #[serde(default)]
        orientation: OrientationSampler,
    },
    /// Start from a serialized graph.
    FromGraph { graph_path: PathBuf },
    /// Start from a grain-index image (GIDX).
    FromImage { image_path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Layering {
    /// Fixed layer count; spacing defaults to lz / (n_l - 1).
    Explicit { n_l: usize, dz: Option<f64> },
    /// Derive count and spacing from an elimination table.
    Table { table_path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorConfig {
    Identity,
    Baseline(BaselinePredictor),
    Gnn {
        regressor_manifest: PathBuf,
        regressor_blob: PathBuf,
        classifier_manifest: PathBuf,
        classifier_blob: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub substrate: SubstrateSource,
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub layering: Layering,
    pub output_dir: PathBuf,
    /// Raster resolution in pixels per micrometer.
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_resolution() -> f64 {
    polygrain_core::raster::DEFAULT_PIXELS_PER_MICRON
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
        config.domain.normalized_defaults().check()?;
        config.thresholds.check()?;
        if config.resolution <= 0.0 || !config.resolution.is_finite() {
            anyhow::bail!("resolution must be positive");
        }
        Ok(config)
    }

    /// Stable 64-bit FNV-1a hash of the canonical config serialization;
    /// written into provenance sidecars.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).unwrap_or_default();
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}
