//! Run configuration file: every section optional, unknown keys rejected.

use std::path::Path;

use alm::baselines::GreedyParams;
use alm::cluster::{KMeansConfig, DEFAULT_WINDOW};
use alm::mcmc::ChainConfig;
use alm::model::ModelParams;
use alm::predict::PredictConfig;
use alm::synth::SynthConfig;
use alm::{AlmError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSettings {
    pub k: usize,
    pub window: usize,
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        let km = KMeansConfig::default();
        ClusterSettings { k: 3, window: DEFAULT_WINDOW, restarts: km.restarts, max_iterations: km.max_iterations }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Fraction of each track marked as observed by `synth`.
    pub observed_fraction: f64,
    pub model: ModelParams<f64>,
    pub chain: ChainConfig,
    pub predict: PredictConfig,
    pub greedy: GreedyParams<f64>,
    pub cluster: ClusterSettings,
    /// Pixels per lattice cell in rasters.
    pub cell_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            observed_fraction: 0.5,
            model: ModelParams::default(),
            chain: ChainConfig::default(),
            predict: PredictConfig::default(),
            greedy: GreedyParams::default(),
            cluster: ClusterSettings::default(),
            cell_size: 8,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AlmError::Input(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<(Self, Option<String>)> {
        match path {
            None => Ok((RunConfig::default(), None)),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| AlmError::Input(format!("{}: {e}", p.display())))?;
                Ok((Self::parse(&text)?, Some(text)))
            }
        }
    }
}
