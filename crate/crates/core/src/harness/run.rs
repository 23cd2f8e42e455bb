//! Case execution: per-episode calibration, quantile construction, receding-
//! horizon (or open-loop) planning, and coverage/safety/timing bookkeeping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    robust_quantile_lp, vanilla_quantile, QuantileResult, ScoreSet,
};
use crate::diffusion::ContextVector;
use crate::error::{Error, Result};
use crate::planner::{fallback, solve, MpcProblem, MpcSolution, SolveStatus};
use crate::scores::{build_synthetic_scoreset, episode_score, region_radii};
use crate::seed;
use crate::shift::{
    aggregate_unseen_context, analytic_w2_bound, estimate_l2, wasserstein_inf_1d,
    BoundIngredients, ContextScoreSet,
};
use crate::sim::{check_collision, ego_step, EgoInput, EnvKind, EpisodeTrace, StepRecord};

use super::data::{episode_eta, error_tensor, histories_at, StudyArtifacts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseId {
    Case0,
    Case1,
    Case2,
    Case3,
}

impl CaseId {
    pub fn all() -> [CaseId; 4] {
        [CaseId::Case0, CaseId::Case1, CaseId::Case2, CaseId::Case3]
    }

    pub fn label(&self) -> &'static str {
        match self {
            CaseId::Case0 => "0",
            CaseId::Case1 => "1",
            CaseId::Case2 => "2",
            CaseId::Case3 => "3",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "0" => Ok(CaseId::Case0),
            "1" => Ok(CaseId::Case1),
            "2" => Ok(CaseId::Case2),
            "3" => Ok(CaseId::Case3),
            _ => Err(Error::InvalidConfig(format!("unknown case {s:?}"))),
        }
    }

    /// Calibration source mandated by the case.
    pub fn uses_synthetic_calibration(&self) -> bool {
        !matches!(self, CaseId::Case0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopMode {
    Open,
    Closed,
}

impl LoopMode {
    pub fn label(&self) -> &'static str {
        match self {
            LoopMode::Open => "open",
            LoopMode::Closed => "closed",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(LoopMode::Open),
            "closed" => Ok(LoopMode::Closed),
            _ => Err(Error::InvalidConfig(format!("unknown loop mode {s:?}"))),
        }
    }
}

/// Case instantiation: calibration source and ambiguity follow the case id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case: CaseId,
    pub loop_mode: LoopMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: usize,
    pub seed: u64,
    pub eta: f64,
    pub coverage: bool,
    pub collision: bool,
    pub fallback_used: bool,
    pub infeasible_steps: usize,
    pub r_used: f64,
    pub c_robust: f64,
    pub test_score: f64,
    /// Per planning step: solve time plus the episode's calibration time
    /// amortized uniformly over the steps.
    pub step_ms: Vec<f64>,
    pub calib_ms: f64,
    /// Collision despite coverage holding and no fallback engaged; must
    /// never happen if the region logic is consistent.
    pub theorem1_violation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub env: String,
    pub case: String,
    pub loop_mode: String,
    pub n: usize,
    pub coverage: f64,
    pub safety: f64,
    pub infeasible: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub r_used: f64,
}

pub struct CaseRunResult {
    pub outcomes: Vec<EpisodeOutcome>,
    pub row: ReportRow,
    pub traces: Vec<EpisodeTrace>,
}

/// Select the validation rows of the nearest seen contexts, capped.
fn aggregate_validation_rows(
    artifacts: &StudyArtifacts,
    eta_star: f64,
    count: usize,
    cap: usize,
) -> Vec<(ContextVector, f64)> {
    let mut order: Vec<usize> = (0..artifacts.seen_envs.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (artifacts.seen_envs[a].eta_mean - eta_star).abs();
        let db = (artifacts.seen_envs[b].eta_mean - eta_star).abs();
        da.partial_cmp(&db).unwrap()
    });
    let mut rows = Vec::new();
    for &idx in order.iter().take(count) {
        rows.extend_from_slice(&artifacts.seen_envs[idx].validation);
    }
    if rows.len() > cap {
        // Deterministic thinning.
        let stride = rows.len() as f64 / cap as f64;
        rows = (0..cap)
            .map(|i| rows[(i as f64 * stride) as usize].clone())
            .collect();
    }
    rows
}

/// Per-episode calibration: score set, ambiguity radius, and quantile.
fn calibrate(
    artifacts: &StudyArtifacts,
    spec: &CaseSpec,
    eta: f64,
    seed: u64,
) -> Result<(QuantileResult, f64, f64)> {
    let cfg = &artifacts.config;
    let delta = cfg.conformal.delta;
    let (horizon, sigma, calib_real) = match spec.loop_mode {
        LoopMode::Closed => (cfg.sim.horizon, &artifacts.sigma_closed, &artifacts.calib_closed),
        LoopMode::Open => (cfg.open_horizon(), &artifacts.sigma_open, &artifacts.calib_open),
    };
    let start = std::time::Instant::now();

    let synthetic: Option<ScoreSet> = if spec.case.uses_synthetic_calibration() {
        Some(build_synthetic_scoreset(
            &artifacts.model,
            eta,
            cfg.sim.episode_len,
            horizon,
            cfg.sim.agents,
            sigma,
            cfg.conformal.k_synthetic,
            seed::derive(seed, "calibration"),
        )?)
    } else {
        None
    };

    let (quantile, r_used) = match spec.case {
        CaseId::Case0 => (vanilla_quantile(calib_real, delta)?, 0.0),
        CaseId::Case1 => (vanilla_quantile(synthetic.as_ref().unwrap(), delta)?, 0.0),
        CaseId::Case2 => {
            let datasets: Vec<ContextScoreSet> = artifacts
                .seen_envs
                .iter()
                .map(|e| ContextScoreSet {
                    eta: e.eta_mean,
                    scores: match spec.loop_mode {
                        LoopMode::Closed => e.scores_closed.clone(),
                        LoopMode::Open => e.scores_open.clone(),
                    },
                })
                .collect();
            let real = aggregate_unseen_context(
                &datasets,
                eta,
                cfg.shift.aggregate_contexts.min(datasets.len()),
            )?;
            let r = wasserstein_inf_1d(&real, synthetic.as_ref().unwrap());
            (
                robust_quantile_lp(synthetic.as_ref().unwrap(), delta, r, cfg.conformal.rho_lp)?,
                r,
            )
        }
        CaseId::Case3 => {
            let rows = aggregate_validation_rows(
                artifacts,
                eta,
                cfg.shift.aggregate_contexts.min(artifacts.seen_envs.len()),
                cfg.shift.e_rows_cap,
            );
            let e_table = if rows.is_empty() {
                artifacts.model.train_meta.noise_mse_per_step.clone()
            } else {
                artifacts
                    .model
                    .noise_mse_on(&rows, seed::derive(seed, "noise-mse"))
            };
            // Score-regularity constant: max over a small representative
            // context grid at the episode's nuisance.
            let t_len = cfg.sim.episode_len;
            let mut l2 = vec![f64::NEG_INFINITY; artifacts.model.t_diff()];
            for (gi, t_probe) in [t_len / 4, t_len / 2, 3 * t_len / 4].into_iter().enumerate() {
                for (hi, h_probe) in [1usize, cfg.sim.horizon / 2 + 1, cfg.sim.horizon]
                    .into_iter()
                    .enumerate()
                {
                    for agent in 1..=cfg.sim.agents.min(2) {
                        let c = ContextVector::new(eta, t_probe, h_probe, agent);
                        let probe_seed = seed::derive(
                            seed,
                            &format!("l2-{gi}-{hi}-{agent}"),
                        );
                        let est = estimate_l2(
                            &artifacts.model,
                            &c,
                            cfg.shift.l2_pairs_per_step,
                            probe_seed,
                        );
                        for (slot, v) in l2.iter_mut().zip(est.iter()) {
                            *slot = slot.max(*v);
                        }
                    }
                }
            }
            let ingredients =
                BoundIngredients::from_model_stats(&artifacts.model.schedule, e_table, l2)?;
            let est = analytic_w2_bound(&ingredients, &artifacts.model.schedule)?;
            // The bound lives in the model's standardized units; rescale to
            // meters before the Lipschitz propagation.
            let eps_w = est.value * artifacts.model.target_stats.std;
            let r = crate::shift::propagate_to_radius(eps_w, sigma);
            (
                robust_quantile_lp(synthetic.as_ref().unwrap(), delta, r, cfg.conformal.rho_lp)?,
                r,
            )
        }
    };
    let calib_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((quantile, r_used, calib_ms))
}

/// Run one episode of a case in an environment.
pub fn run_episode(
    artifacts: &StudyArtifacts,
    spec: &CaseSpec,
    env: EnvKind,
    episode: usize,
    ep_seed: u64,
    want_trace: bool,
) -> Result<(EpisodeOutcome, Option<EpisodeTrace>)> {
    let cfg = &artifacts.config;
    let sim = &cfg.sim;
    let (horizon, sigma) = match spec.loop_mode {
        LoopMode::Closed => (sim.horizon, &artifacts.sigma_closed),
        LoopMode::Open => (cfg.open_horizon(), &artifacts.sigma_open),
    };
    let traj = super::data::obstacle_rollout(cfg, env, ep_seed)?;
    let eta = episode_eta(cfg, &traj)?;
    let (quantile, r_used, calib_ms) = calibrate(artifacts, spec, eta, ep_seed)?;

    let mut ego = sim.ego_start;
    let mut ego_states = vec![ego];
    let mut inputs = Vec::new();
    let mut solve_ms = Vec::new();
    let mut collision = false;
    let mut fallback_used = false;
    let mut infeasible_steps = 0usize;
    let mut records = Vec::new();

    let advance = |ego: &mut crate::sim::EgoState,
                       u: EgoInput,
                       t_next: usize,
                       ego_states: &mut Vec<crate::sim::EgoState>,
                       inputs: &mut Vec<EgoInput>,
                       collision: &mut bool| {
        *ego = ego_step(ego, &u, sim.dt, &sim.limits);
        ego_states.push(*ego);
        inputs.push(u);
        let obs = [traj[t_next][0], traj[t_next][1]];
        let (hit, _) = check_collision(ego, &obs, sim.eps);
        *collision |= hit;
    };

    // Observation buffer: scripted lane keep.
    for t in 0..sim.buffer_len {
        advance(
            &mut ego,
            EgoInput { phi: 0.0, a: 0.0 },
            t + 1,
            &mut ego_states,
            &mut inputs,
            &mut collision,
        );
    }

    let plan_steps = sim.episode_len - sim.buffer_len;
    if quantile.infinite {
        // Unbounded regions: report infeasibility and brake.
        fallback_used = true;
        infeasible_steps = plan_steps;
        for t in sim.buffer_len..sim.episode_len {
            advance(
                &mut ego,
                EgoInput {
                    phi: 0.0,
                    a: -sim.limits.a_max,
                },
                t + 1,
                &mut ego_states,
                &mut inputs,
                &mut collision,
            );
            solve_ms.push(0.0);
        }
    } else {
        match spec.loop_mode {
            LoopMode::Closed => {
                let mut warm: Option<MpcSolution> = None;
                for t in sim.buffer_len..sim.episode_len {
                    let hist = histories_at(&traj, t, sim.dt);
                    let preds = artifacts.predictor.predict(&hist, t, horizon)?;
                    let radii = region_radii(&quantile, sigma, t, horizon, sim.agents)?;
                    let problem = MpcProblem {
                        state: ego,
                        horizon,
                        dt: sim.dt,
                        predictions: preds,
                        radii,
                        eps: sim.eps,
                        goal: sim.ego_goal,
                        weights: cfg.weights,
                        limits: sim.limits,
                    };
                    let mut sol = solve(&problem, warm.as_ref(), &cfg.solver)?;
                    if sol.status == SolveStatus::Infeasible {
                        infeasible_steps += 1;
                        fallback_used = true;
                        sol = fallback(&problem);
                    }
                    solve_ms.push(sol.solve_ms);
                    if want_trace {
                        let preds_ref = &problem.predictions;
                        let radii_ref = &problem.radii;
                        records.push(StepRecord {
                            t,
                            predictions: (1..=horizon)
                                .flat_map(|h| {
                                    (1..=sim.agents).map(move |i| preds_ref.get(t + h, i))
                                })
                                .collect(),
                            radii: (1..=horizon)
                                .flat_map(|h| {
                                    (1..=sim.agents).map(move |i| radii_ref.get(t + h, i))
                                })
                                .collect(),
                            solve_ms: sol.solve_ms,
                            status: sol.status.to_string(),
                        });
                    }
                    let u = sol.inputs[0];
                    advance(
                        &mut ego,
                        u,
                        t + 1,
                        &mut ego_states,
                        &mut inputs,
                        &mut collision,
                    );
                    warm = Some(sol);
                }
            }
            LoopMode::Open => {
                let t0 = sim.buffer_len;
                let hist = histories_at(&traj, t0, sim.dt);
                let preds = artifacts.predictor.predict(&hist, t0, horizon)?;
                let radii = region_radii(&quantile, sigma, t0, horizon, sim.agents)?;
                let problem = MpcProblem {
                    state: ego,
                    horizon,
                    dt: sim.dt,
                    predictions: preds,
                    radii,
                    eps: sim.eps,
                    goal: sim.ego_goal,
                    weights: cfg.weights,
                    limits: sim.limits,
                };
                // The single long-horizon solve gets a larger inner budget.
                let mut opts = cfg.solver.clone();
                opts.inner_iters *= 4;
                let mut sol = solve(&problem, None, &opts)?;
                if sol.status == SolveStatus::Infeasible {
                    infeasible_steps = plan_steps;
                    fallback_used = true;
                    sol = fallback(&problem);
                }
                solve_ms.push(sol.solve_ms);
                for (idx, t) in (t0..sim.episode_len).enumerate() {
                    advance(
                        &mut ego,
                        sol.inputs[idx],
                        t + 1,
                        &mut ego_states,
                        &mut inputs,
                        &mut collision,
                    );
                }
            }
        }
    }

    // Whole-episode coverage: the test score against the calibrated bound.
    let tensor = error_tensor(&traj, artifacts.predictor.as_ref(), horizon, sim.dt)?;
    let test_score = episode_score(&tensor, sigma)?;
    let coverage = quantile.infinite || test_score <= quantile.c_robust;

    let amortized = calib_ms / plan_steps as f64;
    let step_ms: Vec<f64> = if solve_ms.len() == 1 {
        // Open loop: one solve spread over the executed steps.
        let per = solve_ms[0] / plan_steps as f64 + amortized;
        vec![per; plan_steps]
    } else {
        solve_ms.iter().map(|s| s + amortized).collect()
    };

    let theorem1_violation = collision && coverage && !fallback_used;
    let outcome = EpisodeOutcome {
        episode,
        seed: ep_seed,
        eta,
        coverage,
        collision,
        fallback_used,
        infeasible_steps,
        r_used,
        c_robust: quantile.c_robust,
        test_score,
        step_ms,
        calib_ms,
        theorem1_violation,
    };
    let trace = want_trace.then(|| EpisodeTrace {
        env: env.to_string(),
        case_id: spec.case.label().to_string(),
        loop_mode: spec.loop_mode.label().to_string(),
        seed: ep_seed,
        eta,
        ego: ego_states,
        inputs,
        obstacles: traj.iter().map(|p| p.to_vec()).collect(),
        collision,
        coverage,
        fallback_used,
        infeasible_steps,
        test_score,
        c_robust: quantile.c_robust,
        r_used,
        step_ms: outcome.step_ms.clone(),
        calib_ms,
        plan_records: records,
    });
    Ok((outcome, trace))
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 * p).ceil() as usize).clamp(1, sorted.len());
    sorted[idx - 1]
}

/// Run a case over an environment. Episode seeds derive from
/// master -> env -> case/loop -> episode; episodes execute in parallel and
/// deterministically.
pub fn run_case(
    artifacts: &StudyArtifacts,
    spec: &CaseSpec,
    env: EnvKind,
    episodes: usize,
    master_seed: u64,
) -> Result<CaseRunResult> {
    let env_seed = seed::derive(master_seed, &format!("env-{env}"));
    let case_seed = seed::derive(
        env_seed,
        &format!("case-{}-{}", spec.case.label(), spec.loop_mode.label()),
    );
    let want_trace = artifacts.config.run.write_traces;
    let results: Vec<(EpisodeOutcome, Option<EpisodeTrace>)> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            run_episode(
                artifacts,
                spec,
                env,
                e,
                seed::derive_index(case_seed, e as u64),
                want_trace,
            )
        })
        .collect::<Result<_>>()?;

    let mut outcomes = Vec::with_capacity(episodes);
    let mut traces = Vec::new();
    for (o, t) in results {
        outcomes.push(o);
        if let Some(t) = t {
            traces.push(t);
        }
    }

    let n = outcomes.len();
    let coverage = outcomes.iter().filter(|o| o.coverage).count() as f64 / n as f64;
    let safety = outcomes.iter().filter(|o| !o.collision).count() as f64 / n as f64;
    let infeasible = outcomes.iter().filter(|o| o.fallback_used).count() as f64 / n as f64;
    let mut all_steps: Vec<f64> = outcomes.iter().flat_map(|o| o.step_ms.clone()).collect();
    all_steps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_ms = all_steps.iter().sum::<f64>() / all_steps.len().max(1) as f64;
    let p95_ms = percentile(&all_steps, 0.95);
    let r_used = outcomes.iter().map(|o| o.r_used).sum::<f64>() / n as f64;

    Ok(CaseRunResult {
        row: ReportRow {
            env: env.to_string(),
            case: spec.case.label().to_string(),
            loop_mode: spec.loop_mode.label().to_string(),
            n,
            coverage,
            safety,
            infeasible,
            mean_ms,
            p95_ms,
            r_used,
        },
        outcomes,
        traces,
    })
}
