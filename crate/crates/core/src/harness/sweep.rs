//! Nuisance sweep: 2-Wasserstein distance between synthetic draws at a
//! swept nuisance value and a fixed environment's measured errors, per
//! lookahead.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seed;
use crate::sim::EnvKind;

use super::data::{episode_eta, histories_at, obstacle_rollout, StudyArtifacts};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub tau: usize,
    pub w2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub env: usize,
    /// Mean measured nuisance of the probed environment.
    pub eta_measured: f64,
    pub rows: Vec<SweepRow>,
    /// Grid value minimizing the mean W2 over the lookahead set.
    pub argmin_eta: f64,
}

/// For each eta in the grid, compare n synthetic draws per lookahead against
/// the environment's measured error samples at the fixed step.
#[allow(clippy::too_many_arguments)]
pub fn w2_vs_nuisance_sweep(
    artifacts: &StudyArtifacts,
    env_j: usize,
    eta_grid: &[f64],
    t_fixed: usize,
    tau_set: &[usize],
    n: usize,
    episodes: usize,
    master_seed: u64,
) -> Result<SweepResult> {
    let cfg = &artifacts.config;
    let sweep_seed = seed::derive(master_seed, &format!("sweep-{env_j}"));

    // Real error samples at (t_fixed, h, i) pooled over agents, plus the
    // environment's measured nuisance.
    let mut real: Vec<Vec<f64>> = vec![Vec::new(); tau_set.len()];
    let mut eta_sum = 0.0;
    for e in 0..episodes {
        let traj = obstacle_rollout(
            cfg,
            EnvKind::Test(env_j),
            seed::derive_index(sweep_seed, e as u64),
        )?;
        eta_sum += episode_eta(cfg, &traj)?;
        let hist = histories_at(&traj, t_fixed, cfg.sim.dt);
        let preds = artifacts
            .predictor
            .predict(&hist, t_fixed, *tau_set.iter().max().unwrap())?;
        for (hi, &h) in tau_set.iter().enumerate() {
            for i in 1..=cfg.sim.agents {
                let (px, py) = preds.get(t_fixed + h, i);
                let (ox, oy) = traj[t_fixed + h][i - 1];
                real[hi].push(((px - ox).powi(2) + (py - oy).powi(2)).sqrt());
            }
        }
    }
    for r in &mut real {
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let eta_measured = eta_sum / episodes as f64;

    let mut rows = Vec::new();
    let mut mean_by_eta = Vec::new();
    for (gi, &eta) in eta_grid.iter().enumerate() {
        let mut mean_w2 = 0.0;
        for (hi, &h) in tau_set.iter().enumerate() {
            let cells: Vec<crate::diffusion::ContextVector> = (1..=cfg.sim.agents)
                .map(|i| crate::diffusion::ContextVector::new(eta, t_fixed, h, i))
                .collect();
            let grid = artifacts.model.prepare_grid(&cells);
            let per_cell = n.div_ceil(cfg.sim.agents);
            let streams: Vec<u64> = (0..per_cell)
                .map(|d| {
                    seed::derive_index(
                        seed::derive(sweep_seed, &format!("draws-{gi}-{h}")),
                        d as u64,
                    )
                })
                .collect();
            // Negative raw draws are clipped, matching what calibration
            // consumes.
            let mut synth: Vec<f64> = grid
                .sample_rows(&streams)?
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            synth.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let w2 = crate::shift::wasserstein2_sorted(&real[hi], &synth);
            rows.push(SweepRow { eta, tau: h, w2 });
            mean_w2 += w2;
        }
        mean_by_eta.push(mean_w2 / tau_set.len() as f64);
    }
    let argmin = mean_by_eta
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| eta_grid[i])
        .unwrap_or(f64::NAN);
    Ok(SweepResult {
        env: env_j,
        eta_measured,
        rows,
        argmin_eta: argmin,
    })
}
