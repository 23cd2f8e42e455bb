//! Data generation: scripted rollouts, predictor fitting, sigma fitting,
//! real calibration score sets, diffusion training data, and per-environment
//! held-out datasets.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{Provenance, ScoreSet};
use crate::diffusion::{ContextVector, DiffusionModel};
use crate::error::{Error, Result};
use crate::predictor::{
    ConstantVelocity, ObstacleHistory, RidgePredictor, TrajectoryPredictor,
};
use crate::scores::{episode_score, fit_sigma, PredictionErrorTensor, SigmaTable};
use crate::seed;
use crate::sim::{CorridorWorld, EnvKind, EnvironmentConfig};

use super::config::{PredictorKind, StudyConfig};

/// Environments whose rollouts train the diffusion model; the odd-numbered
/// ones stay unseen.
pub const SEEN_ENVS: [usize; 5] = [2, 4, 6, 8, 10];
pub const HELDOUT_ENVS: [usize; 5] = [1, 3, 5, 7, 9];

/// One seen environment's held-out data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeenEnvData {
    pub k: usize,
    pub eta_mean: f64,
    /// Real episode scores on the planning-horizon grid.
    pub scores_closed: ScoreSet,
    /// Real episode scores on the open-loop grid.
    pub scores_open: ScoreSet,
    /// Held-out (context, raw error) rows for per-step noise MSE.
    pub validation: Vec<(ContextVector, f64)>,
}

/// Everything the experiment runs consume.
pub struct StudyArtifacts {
    pub config: StudyConfig,
    pub master_seed: u64,
    pub predictor: Box<dyn TrajectoryPredictor>,
    pub sigma_closed: SigmaTable,
    pub sigma_open: SigmaTable,
    pub calib_closed: ScoreSet,
    pub calib_open: ScoreSet,
    pub seen_envs: Vec<SeenEnvData>,
    pub model: DiffusionModel,
}

pub fn env_config(cfg: &StudyConfig, kind: EnvKind) -> Result<EnvironmentConfig> {
    match kind {
        EnvKind::Train => Ok(EnvironmentConfig::train(cfg.sim.dt)),
        EnvKind::Test(k) => EnvironmentConfig::test(k, cfg.sim.dt),
    }
}

/// Obstacle trajectories for one scripted episode (the ego does not
/// influence the obstacles).
pub fn obstacle_rollout(
    cfg: &StudyConfig,
    kind: EnvKind,
    seed: u64,
) -> Result<Vec<[(f64, f64); 2]>> {
    let env = env_config(cfg, kind)?;
    Ok(CorridorWorld::rollout(
        &env,
        &cfg.sim,
        seed,
        cfg.sim.episode_len,
    ))
}

/// Histories for both obstacles up to and including step t.
pub fn histories_at(traj: &[[(f64, f64); 2]], t: usize, dt: f64) -> Vec<ObstacleHistory> {
    (0..2)
        .map(|i| ObstacleHistory::new(traj[..=t].iter().map(|p| p[i]).collect(), dt))
        .collect()
}

/// Prediction-error tensor over the full episode for a given predictor and
/// lookahead horizon.
pub fn error_tensor(
    traj: &[[(f64, f64); 2]],
    predictor: &dyn TrajectoryPredictor,
    horizon: usize,
    dt: f64,
) -> Result<PredictionErrorTensor> {
    let t_len = traj.len() - 1; // episode length T
    let mut tensor = PredictionErrorTensor::new(t_len, horizon, 2);
    for t in 1..t_len {
        let hist = histories_at(traj, t, dt);
        let preds = predictor.predict(&hist, t, horizon)?;
        for tau in t + 1..=(t + horizon).min(t_len) {
            for i in 1..=2usize {
                let (px, py) = preds.get(tau, i);
                let (ox, oy) = traj[tau][i - 1];
                let err = ((px - ox).powi(2) + (py - oy).powi(2)).sqrt();
                tensor.set(t, tau, i, err)?;
            }
        }
    }
    Ok(tensor)
}

/// Measured nuisance over the first buffer_len steps of a trajectory.
pub fn episode_eta(cfg: &StudyConfig, traj: &[[(f64, f64); 2]]) -> Result<f64> {
    let buffers: Vec<Vec<(f64, f64)>> = (0..2)
        .map(|i| {
            traj[..=cfg.sim.buffer_len]
                .iter()
                .map(|p| p[i])
                .collect()
        })
        .collect();
    crate::sim::estimate_nuisance(&buffers, cfg.sim.buffer_len, cfg.sim.dt)
}

/// Fit the ridge predictor on nominal-environment rollouts: features are the
/// least-squares velocity over the window, targets the realized
/// displacements per lookahead.
pub fn fit_ridge(cfg: &StudyConfig, master_seed: u64) -> Result<RidgePredictor> {
    let horizon = cfg.open_horizon();
    let window = cfg.predictor.window;
    let dt = cfg.sim.dt;
    let seed_root = seed::derive(master_seed, "ridge-fit");
    let mut samples: Vec<Vec<([f64; 2], (f64, f64))>> = vec![Vec::new(); horizon];
    for e in 0..cfg.data.ridge_episodes {
        let traj = obstacle_rollout(cfg, EnvKind::Train, seed::derive_index(seed_root, e as u64))?;
        let t_len = traj.len() - 1;
        for t in 1..t_len {
            let hist = histories_at(&traj, t, dt);
            // Feature: constant-velocity estimate over the window.
            let cv = ConstantVelocity { window };
            let base = cv.predict(&hist, t, 1)?;
            for i in 1..=2usize {
                let (p1x, p1y) = base.get(t + 1, i);
                let (px, py) = traj[t][i - 1];
                let vx = (p1x - px) / dt;
                let vy = (p1y - py) / dt;
                for h in 1..=horizon.min(t_len - t) {
                    let (ox, oy) = traj[t + h][i - 1];
                    samples[h - 1].push(([vx, vy], (ox - px, oy - py)));
                }
            }
        }
    }
    RidgePredictor::fit(&samples, window, cfg.predictor.lambda)
}

pub fn make_predictor(cfg: &StudyConfig, master_seed: u64) -> Result<Box<dyn TrajectoryPredictor>> {
    match cfg.predictor.kind {
        PredictorKind::ConstantVelocity => Ok(Box::new(ConstantVelocity {
            window: cfg.predictor.window,
        })),
        PredictorKind::Ridge => Ok(Box::new(fit_ridge(cfg, master_seed)?)),
    }
}

/// Sigma tables (open-loop horizon and its planning-horizon restriction)
/// from nominal-environment rollouts.
pub fn fit_sigma_tables(
    cfg: &StudyConfig,
    predictor: &dyn TrajectoryPredictor,
    master_seed: u64,
) -> Result<(SigmaTable, SigmaTable)> {
    let horizon = cfg.open_horizon();
    let seed_root = seed::derive(master_seed, "sigma-fit");
    let tensors: Vec<PredictionErrorTensor> = (0..cfg.data.sigma_episodes)
        .into_par_iter()
        .map(|e| {
            let traj =
                obstacle_rollout(cfg, EnvKind::Train, seed::derive_index(seed_root, e as u64))?;
            error_tensor(&traj, predictor, horizon, cfg.sim.dt)
        })
        .collect::<Result<_>>()?;
    let sigma_open = fit_sigma(&tensors, cfg.conformal.sigma_floor)?;
    let sigma_closed = sigma_open.restrict(cfg.sim.horizon)?;
    Ok((sigma_open, sigma_closed))
}

/// Real calibration score sets from nominal-environment rollouts, on both
/// grids.
pub fn build_real_calibration(
    cfg: &StudyConfig,
    predictor: &dyn TrajectoryPredictor,
    sigma_closed: &SigmaTable,
    sigma_open: &SigmaTable,
    master_seed: u64,
) -> Result<(ScoreSet, ScoreSet)> {
    let seed_root = seed::derive(master_seed, "real-calibration");
    let pairs: Vec<(f64, f64)> = (0..cfg.data.calib_episodes)
        .into_par_iter()
        .map(|e| {
            let traj =
                obstacle_rollout(cfg, EnvKind::Train, seed::derive_index(seed_root, e as u64))?;
            let open = error_tensor(&traj, predictor, cfg.open_horizon(), cfg.sim.dt)?;
            let closed = error_tensor(&traj, predictor, cfg.sim.horizon, cfg.sim.dt)?;
            Ok((
                episode_score(&closed, sigma_closed)?,
                episode_score(&open, sigma_open)?,
            ))
        })
        .collect::<Result<_>>()?;
    let closed = ScoreSet::new(
        pairs.iter().map(|p| p.0).collect(),
        Provenance::RealCalibration,
    )?
    .with_context("train");
    let open = ScoreSet::new(
        pairs.iter().map(|p| p.1).collect(),
        Provenance::RealCalibration,
    )?
    .with_context("train");
    Ok((closed, open))
}

/// Distinct indices: everything when the cap allows, otherwise a partial
/// shuffle.
fn subsample(n: usize, cap: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    if cap >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..cap {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(cap);
    idx
}

/// Diffusion training targets from scripted rollouts of the seen
/// environments: one (context, error) row per grid cell per episode.
pub fn generate_training_data(
    cfg: &StudyConfig,
    episodes_per_env: usize,
    master_seed: u64,
) -> Result<Vec<(ContextVector, f64)>> {
    let predictor = make_predictor(cfg, master_seed)?;
    let mut rows = Vec::new();
    for &k in SEEN_ENVS.iter() {
        let env_seed = seed::derive(master_seed, &format!("env-data-{k}"));
        for e in 0..episodes_per_env {
            let traj =
                obstacle_rollout(cfg, EnvKind::Test(k), seed::derive_index(env_seed, e as u64))?;
            let eta = episode_eta(cfg, &traj)?;
            let tensor = error_tensor(&traj, predictor.as_ref(), cfg.sim.horizon, cfg.sim.dt)?;
            for (t, tau, i, v) in tensor.iter() {
                rows.push((ContextVector::new(eta, t, tau - t, i), v));
            }
        }
    }
    Ok(rows)
}

/// Diffusion training rows plus per-environment held-out data.
pub fn build_env_datasets(
    cfg: &StudyConfig,
    predictor: &dyn TrajectoryPredictor,
    sigma_closed: &SigmaTable,
    sigma_open: &SigmaTable,
    master_seed: u64,
) -> Result<(Vec<(ContextVector, f64)>, Vec<SeenEnvData>)> {
    let mut train_rows = Vec::new();
    let mut seen = Vec::new();
    for &k in SEEN_ENVS.iter() {
        let env_seed = seed::derive(master_seed, &format!("env-data-{k}"));
        let total = cfg.data.seen_train_episodes + cfg.data.seen_holdout_episodes;
        let episodes: Vec<(Vec<[(f64, f64); 2]>, f64)> = (0..total)
            .into_par_iter()
            .map(|e| {
                let traj =
                    obstacle_rollout(cfg, EnvKind::Test(k), seed::derive_index(env_seed, e as u64))?;
                let eta = episode_eta(cfg, &traj)?;
                Ok((traj, eta))
            })
            .collect::<Result<_>>()?;

        // Training rows: subsampled grid cells from the first block (the
        // full grid if the cap allows).
        let mut rng = seed::rng(seed::derive(env_seed, "cells"));
        for (traj, eta) in episodes.iter().take(cfg.data.seen_train_episodes) {
            let tensor = error_tensor(traj, predictor, cfg.sim.horizon, cfg.sim.dt)?;
            let cells: Vec<(usize, usize, usize, f64)> = tensor.iter().collect();
            for idx in subsample(cells.len(), cfg.data.cells_per_episode, &mut rng) {
                let (t, tau, i, v) = cells[idx];
                train_rows.push((ContextVector::new(*eta, t, tau - t, i), v));
            }
        }

        // Held-out block: real score sets and validation rows.
        let holdout = &episodes[cfg.data.seen_train_episodes..];
        let mut closed_scores = Vec::new();
        let mut open_scores = Vec::new();
        let mut validation = Vec::new();
        let mut eta_sum = 0.0;
        for (traj, eta) in holdout {
            let closed = error_tensor(traj, predictor, cfg.sim.horizon, cfg.sim.dt)?;
            let open = error_tensor(traj, predictor, cfg.open_horizon(), cfg.sim.dt)?;
            closed_scores.push(episode_score(&closed, sigma_closed)?);
            open_scores.push(episode_score(&open, sigma_open)?);
            let cells: Vec<(usize, usize, usize, f64)> = closed.iter().collect();
            for idx in subsample(cells.len(), cfg.data.validation_cells_per_episode, &mut rng) {
                let (t, tau, i, v) = cells[idx];
                validation.push((ContextVector::new(*eta, t, tau - t, i), v));
            }
            eta_sum += eta;
        }
        seen.push(SeenEnvData {
            k,
            eta_mean: eta_sum / holdout.len().max(1) as f64,
            scores_closed: ScoreSet::new(closed_scores, Provenance::RealCalibration)?
                .with_context(format!("env-{k}")),
            scores_open: ScoreSet::new(open_scores, Provenance::RealCalibration)?
                .with_context(format!("env-{k}")),
            validation,
        });
    }
    Ok((train_rows, seen))
}

/// Build the full artifact bundle in memory.
pub fn build_artifacts(cfg: &StudyConfig, master_seed: u64) -> Result<StudyArtifacts> {
    let predictor = make_predictor(cfg, master_seed)?;
    let (sigma_open, sigma_closed) = fit_sigma_tables(cfg, predictor.as_ref(), master_seed)?;
    let (calib_closed, calib_open) = build_real_calibration(
        cfg,
        predictor.as_ref(),
        &sigma_closed,
        &sigma_open,
        master_seed,
    )?;
    let (train_rows, seen_envs) = build_env_datasets(
        cfg,
        predictor.as_ref(),
        &sigma_closed,
        &sigma_open,
        master_seed,
    )?;
    if train_rows.is_empty() {
        return Err(Error::InvalidConfig("no diffusion training rows".into()));
    }
    let model = DiffusionModel::train(
        &train_rows,
        &cfg.diffusion,
        seed::derive(master_seed, "diffusion"),
    )?;
    Ok(StudyArtifacts {
        config: cfg.clone(),
        master_seed,
        predictor,
        sigma_closed,
        sigma_open,
        calib_closed,
        calib_open,
        seen_envs,
        model,
    })
}

/// Artifact file layout under the output directory.
pub mod paths {
    use std::path::{Path, PathBuf};

    pub fn config_lock(out: &Path) -> PathBuf {
        out.join("config.lock.json")
    }
    pub fn ridge(out: &Path) -> PathBuf {
        out.join("data/ridge.json")
    }
    pub fn diffusion_train(out: &Path) -> PathBuf {
        out.join("data/diffusion_train.json")
    }
    pub fn env_data(out: &Path, k: usize) -> PathBuf {
        out.join(format!("data/env_{k}.json"))
    }
    pub fn sigma_closed(out: &Path) -> PathBuf {
        out.join("sigma/sigma_closed.json")
    }
    pub fn sigma_open(out: &Path) -> PathBuf {
        out.join("sigma/sigma_open.json")
    }
    pub fn calib_closed(out: &Path) -> PathBuf {
        out.join("data/calib_scores_closed.txt")
    }
    pub fn calib_open(out: &Path) -> PathBuf {
        out.join("data/calib_scores_open.txt")
    }
    pub fn model(out: &Path) -> PathBuf {
        out.join("model/diffusion.json")
    }
    pub fn shift_dir(out: &Path) -> PathBuf {
        out.join("shift")
    }
    pub fn runs_dir(out: &Path) -> PathBuf {
        out.join("runs")
    }
    pub fn traces_dir(out: &Path) -> PathBuf {
        out.join("traces")
    }
    pub fn report_dir(out: &Path) -> PathBuf {
        out.join("report")
    }
}

fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(file, value)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

/// gen-data: fit the predictor and persist it with the diffusion training
/// rows and per-environment held-out datasets. Sigma-dependent artifacts are
/// produced by fit-sigma.
pub fn generate_and_save_data(
    cfg: &StudyConfig,
    out: &std::path::Path,
    master_seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cfg.save(&paths::config_lock(out))?;
    let predictor = make_predictor(cfg, master_seed)?;
    if let PredictorKind::Ridge = cfg.predictor.kind {
        let ridge = fit_ridge(cfg, master_seed)?;
        if let Some(dir) = paths::ridge(out).parent() {
            std::fs::create_dir_all(dir)?;
        }
        ridge.save(&paths::ridge(out))?;
    }
    // Sigma tables are needed to score the held-out sets; fit them here too
    // (fit-sigma re-derives and persists the same tables for audit).
    let (sigma_open, sigma_closed) = fit_sigma_tables(cfg, predictor.as_ref(), master_seed)?;
    let (train_rows, seen) = build_env_datasets(
        cfg,
        predictor.as_ref(),
        &sigma_closed,
        &sigma_open,
        master_seed,
    )?;
    write_json(&paths::diffusion_train(out), &train_rows)?;
    for env in &seen {
        write_json(&paths::env_data(out, env.k), env)?;
    }
    Ok(())
}

/// fit-sigma: derive the sigma tables and the real calibration score sets.
pub fn fit_and_save_sigma(
    cfg: &StudyConfig,
    out: &std::path::Path,
    master_seed: u64,
) -> Result<()> {
    let predictor = load_predictor(cfg, out, master_seed)?;
    let (sigma_open, sigma_closed) = fit_sigma_tables(cfg, predictor.as_ref(), master_seed)?;
    let (calib_closed, calib_open) = build_real_calibration(
        cfg,
        predictor.as_ref(),
        &sigma_closed,
        &sigma_open,
        master_seed,
    )?;
    if let Some(dir) = paths::sigma_closed(out).parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(
        paths::sigma_closed(out),
        serde_json::to_string_pretty(&sigma_closed.to_json_map())?,
    )?;
    std::fs::write(
        paths::sigma_open(out),
        serde_json::to_string_pretty(&sigma_open.to_json_map())?,
    )?;
    std::fs::write(paths::calib_closed(out), calib_closed.to_text())?;
    std::fs::write(paths::calib_open(out), calib_open.to_text())?;
    Ok(())
}

/// train-diffusion: train the model on the persisted rows.
pub fn train_and_save_model(
    cfg: &StudyConfig,
    out: &std::path::Path,
    master_seed: u64,
) -> Result<()> {
    let rows: Vec<(ContextVector, f64)> = read_json(&paths::diffusion_train(out))?;
    let model = DiffusionModel::train(
        &rows,
        &cfg.diffusion,
        seed::derive(master_seed, "diffusion"),
    )?;
    if let Some(dir) = paths::model(out).parent() {
        std::fs::create_dir_all(dir)?;
    }
    model.save(&paths::model(out))
}

fn load_predictor(
    cfg: &StudyConfig,
    out: &std::path::Path,
    master_seed: u64,
) -> Result<Box<dyn TrajectoryPredictor>> {
    match cfg.predictor.kind {
        PredictorKind::ConstantVelocity => Ok(Box::new(ConstantVelocity {
            window: cfg.predictor.window,
        })),
        PredictorKind::Ridge => {
            let path = paths::ridge(out);
            if path.exists() {
                Ok(Box::new(RidgePredictor::load(&path)?))
            } else {
                Ok(Box::new(fit_ridge(cfg, master_seed)?))
            }
        }
    }
}

/// Load the full artifact bundle from a directory populated by gen-data,
/// fit-sigma, and train-diffusion.
pub fn load_artifacts(
    cfg: &StudyConfig,
    out: &std::path::Path,
    master_seed: u64,
) -> Result<StudyArtifacts> {
    let predictor = load_predictor(cfg, out, master_seed)?;
    let sigma_closed = SigmaTable::from_json_map(&serde_json::from_str(
        &std::fs::read_to_string(paths::sigma_closed(out))?,
    )?)?;
    let sigma_open = SigmaTable::from_json_map(&serde_json::from_str(
        &std::fs::read_to_string(paths::sigma_open(out))?,
    )?)?;
    let calib_closed = ScoreSet::from_text(
        &std::fs::read_to_string(paths::calib_closed(out))?,
        Provenance::RealCalibration,
    )?;
    let calib_open = ScoreSet::from_text(
        &std::fs::read_to_string(paths::calib_open(out))?,
        Provenance::RealCalibration,
    )?;
    let mut seen_envs = Vec::new();
    for &k in SEEN_ENVS.iter() {
        seen_envs.push(read_json::<SeenEnvData>(&paths::env_data(out, k))?);
    }
    let model = DiffusionModel::load(&paths::model(out))?;
    Ok(StudyArtifacts {
        config: cfg.clone(),
        master_seed,
        predictor,
        sigma_closed,
        sigma_open,
        calib_closed,
        calib_open,
        seen_envs,
        model,
    })
}
