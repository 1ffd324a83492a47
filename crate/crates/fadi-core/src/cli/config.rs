//! Run configuration read from a JSON file. Every field has a default, so
//! `{}` is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cli::CliError;
use crate::episodes::WorldConfig;
use crate::losses::MarginConfig;
use crate::pipeline::{mix_seed, DiscriminationOptions, SgdConfig, StageKind};

/// Where the association step gets its similarity matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilaritySource {
    /// The generator's ground-truth novel-to-base affinity.
    Affinity,
    /// Lin similarity over the world's emitted taxonomy.
    Taxonomy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub hidden_dim: usize,
    pub tau: f64,
    pub policy: String,
    pub similarity_source: SimilaritySource,
    pub with_regression: bool,
    /// Initialize `FC2'` from the pretrained `FC2` weights.
    pub assoc_warm_start: bool,
    pub inherit_base_rows: bool,
    pub init_novel_from_assoc: bool,
    pub world: WorldConfig,
    pub sgd: SgdConfig,
    /// Explicit margin weights; when absent the shot schedule
    /// (β=1/K, α=1/(3K), γ=0.001) applies.
    pub margin: Option<MarginConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "fadi_out".into(),
            hidden_dim: 32,
            tau: 20.0,
            policy: "top1-nodup".into(),
            similarity_source: SimilaritySource::Affinity,
            with_regression: false,
            assoc_warm_start: true,
            inherit_base_rows: true,
            init_novel_from_assoc: true,
            world: WorldConfig::default(),
            sgd: SgdConfig::default(),
            margin: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// `FADI_SEED` overrides the config seed when set.
    pub fn apply_env_seed(&mut self) -> Result<(), CliError> {
        if let Ok(raw) = std::env::var("FADI_SEED") {
            let seed: u64 = raw
                .parse()
                .map_err(|_| CliError::usage(format!("FADI_SEED must be an integer, got {raw:?}")))?;
            self.seed = seed;
        }
        Ok(())
    }

    /// World config with its seed resolved: an explicit nonzero world seed
    /// wins, otherwise the world seed derives from the run seed.
    pub fn resolved_world(&self) -> WorldConfig {
        let mut world = self.world.clone();
        if world.seed == 0 {
            world.seed = mix_seed(self.seed, 0x57);
        }
        world
    }

    /// Per-stage SGD config with an independent derived seed.
    pub fn stage_sgd(&self, stage: StageKind) -> SgdConfig {
        let tag = match stage {
            StageKind::BaseTrain => 1,
            StageKind::Associate => 2,
            StageKind::Discriminate => 3,
            StageKind::TfaFinetune => 4,
        };
        SgdConfig { seed: mix_seed(self.seed, tag), ..self.sgd.clone() }
    }

    pub fn margin_config(&self) -> MarginConfig {
        self.margin.unwrap_or_else(|| MarginConfig::for_shots(self.world.k_shot))
    }

    pub fn discrimination_options(&self) -> DiscriminationOptions {
        DiscriminationOptions {
            with_regression: self.with_regression,
            inherit_base_rows: self.inherit_base_rows,
            init_novel_from_assoc: self.init_novel_from_assoc,
        }
    }
}
