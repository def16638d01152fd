//! Run configuration: the game plus `[train]`, `[eval]`, `[sweep]` and
//! `[critic_bench]` tables in one TOML file.

use std::fs;
use std::path::Path;

use lqmfg::{EvalConfig, GameSpec, GameSpecConfig, LoopConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Which policy `eval-ne` and `sweep` deploy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyChoice {
    /// The exact equilibrium pair `(K*, F*)`.
    #[default]
    ExactMfe,
    /// The output of the outer loop configured under `[train]`.
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_list: Vec<usize>,
    /// Outer-round counts; only used with exact-inner training.
    pub r_list: Vec<usize>,
    pub policy: PolicyChoice,
    /// Population size for a single `eval-ne` run.
    pub n: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_list: vec![4, 16, 64, 256],
            r_list: vec![1, 2, 4, 8],
            policy: PolicyChoice::ExactMfe,
            n: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticBenchConfig {
    pub t_list: Vec<usize>,
    pub seeds: usize,
    /// Evaluated gain `[K₁ K₂]`; the equilibrium gain when absent.
    pub k: Option<Vec<Vec<f64>>>,
    /// Mean-field matrix; `F*` when absent.
    pub f: Option<Vec<Vec<f64>>>,
}

impl Default for CriticBenchConfig {
    fn default() -> Self {
        CriticBenchConfig {
            t_list: vec![5_000, 50_000, 500_000],
            seeds: 10,
            k: None,
            f: None,
        }
    }
}

/// Fully resolved configuration, as recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; every random stream of a run derives from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub game: GameSpecConfig,
    #[serde(default)]
    pub train: LoopConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub critic_bench: CriticBenchConfig,
}

impl RunConfig {
    pub fn spec(&self) -> Result<GameSpec, CliError> {
        Ok(GameSpec::try_from(&self.game)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }
}

/// Loads a TOML configuration, or the configuration embedded in a run
/// manifest when the file ends in `.json`.
pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: crate::output::RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad manifest {}: {e}", path.display())))?;
        return Ok(manifest.config);
    }
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
}
