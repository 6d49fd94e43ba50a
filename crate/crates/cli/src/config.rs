use crate::error::CliError;
use opa_core::adapter::AdaptConfig;
use opa_core::rotmath::Dim;
use opa_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything a pipeline run reads; flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every stage: datasets use `seed` and `seed + 1`, training,
    /// adaptation and the benchmark suite use `seed`.
    pub seed: u64,
    pub dim: u8,
    pub datagen: DatagenSection,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    /// Samples per dataset.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub held_out: usize,
    /// Also write the adaptation-time and repel-attract sweeps.
    pub sweeps: bool,
    pub time_budgets: Vec<f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dim: 2,
            datagen: DatagenSection::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalSection::default(),
            serve: ServeSection::default(),
        }
    }
}

impl Default for DatagenSection {
    fn default() -> Self {
        DatagenSection { samples: 2000 }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            held_out: 5,
            sweeps: true,
            time_budgets: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            lambdas: (0..=10).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::read(path, e, "CONFIG_NOT_FOUND"))?;
        toml::from_str(&text).map_err(|e| CliError::data("CONFIG_INVALID", format!("{}: {e}", path.display())))
    }

    pub fn dim(&self) -> Result<Dim, CliError> {
        Dim::from_usize(self.dim as usize).ok_or_else(|| CliError::usage("BAD_DIM", format!("dim must be 2 or 3, got {}", self.dim)))
    }

    /// The defaults as a TOML document, shown by `--help`.
    pub fn default_toml() -> String {
        toml::to_string(&RunConfig::default()).expect("defaults serialize")
    }
}
