//! Study configuration: one versioned JSON document drives data generation,
//! training, shift estimation, and the experiment runs.

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::planner::{CostWeights, SolverOptions};
use crate::sim::SimConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    ConstantVelocity,
    Ridge,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub window: usize,
    pub lambda: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Ridge,
            window: 8,
            lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    /// Nominal-environment episodes used to fit the ridge predictor.
    pub ridge_episodes: usize,
    /// Nominal-environment episodes used to fit sigma.
    pub sigma_episodes: usize,
    /// Nominal-environment episodes scored for the fixed real calibration
    /// set (the no-robustification baseline's K).
    pub calib_episodes: usize,
    /// Per seen environment: episodes feeding diffusion training.
    pub seen_train_episodes: usize,
    /// Per seen environment: held-out episodes for real score sets and
    /// validation rows.
    pub seen_holdout_episodes: usize,
    /// Random cells kept per training episode (the full grid is redundant).
    pub cells_per_episode: usize,
    /// Validation rows kept per holdout episode.
    pub validation_cells_per_episode: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ridge_episodes: 120,
            sigma_episodes: 120,
            calib_episodes: 500,
            seen_train_episodes: 120,
            seen_holdout_episodes: 60,
            cells_per_episode: 500,
            validation_cells_per_episode: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformalConfig {
    pub delta: f64,
    /// Synthetic calibration size K.
    pub k_synthetic: usize,
    /// Global mass-relocation fraction for the Levy-Prokhorov quantile.
    pub rho_lp: f64,
    pub sigma_floor: f64,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            k_synthetic: 500,
            rho_lp: 0.0,
            sigma_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Number of nearest seen contexts aggregated for an unseen context.
    pub aggregate_contexts: usize,
    /// State pairs per diffusion step for the score Lipschitz estimate.
    pub l2_pairs_per_step: usize,
    /// Cap on validation rows used for the held-out noise MSE.
    pub e_rows_cap: usize,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            aggregate_contexts: 2,
            l2_pairs_per_step: 100,
            e_rows_cap: 400,
        }
    }
}

/// Acceptance gate evaluated by the `report` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportGate {
    pub case: String,
    pub loop_mode: String,
    /// "all" or a specific environment label.
    pub env: String,
    #[serde(default)]
    pub min_coverage: Option<f64>,
    #[serde(default)]
    pub min_safety: Option<f64>,
    #[serde(default)]
    pub max_coverage: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub episodes_per_cell: usize,
    pub write_traces: bool,
    #[serde(default)]
    pub gates: Vec<ReportGate>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            episodes_per_cell: 200,
            write_traces: false,
            gates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub version: u32,
    pub sim: SimConfig,
    pub predictor: PredictorConfig,
    pub diffusion: DiffusionConfig,
    pub data: DataConfig,
    pub conformal: ConformalConfig,
    pub shift: ShiftConfig,
    pub solver: SolverOptions,
    pub weights: CostWeights,
    pub run: RunConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            sim: SimConfig::default(),
            predictor: PredictorConfig::default(),
            // Narrower and shorter than the library defaults: the corridor
            // study samples the reverse chain half a million times per
            // episode, so the per-draw budget is tight.
            diffusion: DiffusionConfig {
                t_diff: 32,
                beta_start: 4e-4,
                beta_end: 0.062,
                encoder_hidden: vec![48, 48],
                noise_hidden: vec![32, 32],
                encoder_epochs: 150,
                noise_epochs: 60,
                ..DiffusionConfig::default()
            },
            data: DataConfig::default(),
            conformal: ConformalConfig::default(),
            shift: ShiftConfig::default(),
            solver: SolverOptions::default(),
            weights: CostWeights::default(),
            run: RunConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} != supported {CONFIG_VERSION}",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    /// Open-loop lookahead: everything after the observation buffer.
    pub fn open_horizon(&self) -> usize {
        self.sim.episode_len - self.sim.buffer_len
    }

    /// Stable hash of the resolved config for report provenance.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_version_check() {
        let cfg = StudyConfig::default();
        let dir = std::env::temp_dir().join("driftplan-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("config.json");
        cfg.save(&path).unwrap();
        let loaded = StudyConfig::load(&path).unwrap();
        assert_eq!(loaded.hash(), cfg.hash());

        let mut bad = cfg.clone();
        bad.version = 99;
        bad.save(&path).unwrap();
        assert!(StudyConfig::load(&path).is_err());
    }
}
