//! Receding-horizon planner with robust prediction-region collision
//! constraints.
//!
//! The solver is a penalty-method single-shooting scheme over the input
//! sequence: the tightened collision constraints enter the objective as
//! squared hinge penalties under an increasing penalty weight, the inner
//! unconstrained problem is solved by projected gradient descent with
//! analytic gradients through the bicycle dynamics, and the outer loop
//! raises the penalty until the worst violation is below tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::PredictionSet;
use crate::scores::RegionRadii;
use crate::sim::{ego_step, EgoInput, EgoLimits, EgoState};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostWeights {
    pub tracking: f64,
    pub effort: f64,
    pub terminal: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            tracking: 1.0,
            effort: 0.1,
            terminal: 5.0,
        }
    }
}

/// One receding-horizon problem instance.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub state: EgoState,
    pub horizon: usize,
    pub dt: f64,
    pub predictions: PredictionSet,
    pub radii: RegionRadii,
    pub eps: f64,
    pub goal: (f64, f64),
    pub weights: CostWeights,
    pub limits: EgoLimits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveStatus::Optimal => write!(f, "optimal"),
            SolveStatus::MaxIter => write!(f, "max-iter"),
            SolveStatus::Infeasible => write!(f, "infeasible"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltyRound {
    pub mu: f64,
    pub inner_iters: usize,
    pub objective: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub inputs: Vec<EgoInput>,
    /// States x_0..x_H under the inputs.
    pub states: Vec<EgoState>,
    pub objective: f64,
    pub status: SolveStatus,
    pub solve_ms: f64,
    pub max_violation: f64,
    pub fallback: bool,
    pub penalty_trace: Option<Vec<PenaltyRound>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub violation_tol: f64,
    pub step_init: f64,
    pub trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            inner_iters: 120,
            outer_iters: 10,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            violation_tol: 1e-6,
            step_init: 0.05,
            trace: false,
        }
    }
}

/// Closed form of the worst-case collision margin over a prediction ball:
/// ||ego - pred|| - radius - eps; the constraint is satisfied iff >= 0.
pub fn tighten_constraint(pred: (f64, f64), radius: f64, eps: f64, ego_pos: (f64, f64)) -> f64 {
    let dx = ego_pos.0 - pred.0;
    let dy = ego_pos.1 - pred.1;
    (dx * dx + dy * dy).sqrt() - radius - eps
}

struct Rollout {
    states: Vec<EgoState>,
    /// v-clamp activity per step (gradient of the clamp is zero there).
    clamped: Vec<bool>,
}

fn roll(problem: &MpcProblem, inputs: &[EgoInput]) -> Rollout {
    let mut states = Vec::with_capacity(problem.horizon + 1);
    let mut clamped = Vec::with_capacity(problem.horizon);
    states.push(problem.state);
    for u in inputs {
        let prev = *states.last().unwrap();
        let next = ego_step(&prev, u, problem.dt, &problem.limits);
        let raw_v = prev.v + problem.dt * u.a;
        clamped.push(raw_v < problem.limits.v_min || raw_v > problem.limits.v_max);
        states.push(next);
    }
    Rollout { states, clamped }
}

/// Penalized objective and its analytic gradient w.r.t. the stacked inputs
/// [phi_0, a_0, phi_1, a_1, ...].
fn objective_and_grad(
    problem: &MpcProblem,
    inputs: &[EgoInput],
    mu: f64,
    grad: &mut [f64],
) -> (f64, f64) {
    let h = problem.horizon;
    let w = &problem.weights;
    let rollout = roll(problem, inputs);
    let states = &rollout.states;

    let mut cost = 0.0f64;
    let mut max_violation = 0.0f64;
    // dJ/dx_tau accumulated per state.
    let mut lam = vec![[0.0f64; 4]; h + 1];
    for tau in 1..=h {
        let s = &states[tau];
        let (gx, gy) = problem.goal;
        let mut wx = w.tracking;
        if tau == h {
            wx += w.terminal;
        }
        cost += wx * ((s.x - gx).powi(2) + (s.y - gy).powi(2));
        lam[tau][0] += 2.0 * wx * (s.x - gx);
        lam[tau][1] += 2.0 * wx * (s.y - gy);

        for i in 1..=problem.predictions.agents {
            let pred = problem.predictions.get(problem.predictions.base_time + tau, i);
            let radius = problem.radii.get(problem.radii.base_time + tau, i);
            let m = tighten_constraint(pred, radius, problem.eps, (s.x, s.y));
            max_violation = max_violation.max(-m);
            if m < 0.0 {
                cost += mu * m * m;
                let dx = s.x - pred.0;
                let dy = s.y - pred.1;
                let dist = (dx * dx + dy * dy).sqrt();
                if dist > 1e-12 {
                    lam[tau][0] += 2.0 * mu * m * dx / dist;
                    lam[tau][1] += 2.0 * mu * m * dy / dist;
                }
            }
        }
    }
    for (k, u) in inputs.iter().enumerate() {
        cost += w.effort * (u.phi * u.phi + u.a * u.a);
        grad[2 * k] = 2.0 * w.effort * u.phi;
        grad[2 * k + 1] = 2.0 * w.effort * u.a;
    }

    // Backward sweep through the dynamics.
    for tau in (1..=h).rev() {
        let prev = &states[tau - 1];
        let u = &inputs[tau - 1];
        let l = lam[tau];
        let dt = problem.dt;
        let wl = problem.limits.wheelbase;
        let dv = if rollout.clamped[tau - 1] { 0.0 } else { 1.0 };
        // Input gradient.
        let cos_phi = u.phi.cos();
        grad[2 * (tau - 1)] += l[2] * dt * prev.v / (wl * cos_phi * cos_phi);
        grad[2 * (tau - 1) + 1] += l[3] * dv * dt;
        // State gradient to tau-1.
        if tau > 1 {
            let (sin_t, cos_t) = prev.theta.sin_cos();
            lam[tau - 1][0] += l[0];
            lam[tau - 1][1] += l[1];
            lam[tau - 1][2] += -l[0] * dt * prev.v * sin_t + l[1] * dt * prev.v * cos_t + l[2];
            lam[tau - 1][3] +=
                l[0] * dt * cos_t + l[1] * dt * sin_t + l[2] * dt * u.phi.tan() / wl + l[3] * dv;
        }
    }
    (cost, max_violation)
}

fn clamp_inputs(inputs: &mut [EgoInput], limits: &EgoLimits) {
    for u in inputs {
        u.phi = u.phi.clamp(-limits.phi_max, limits.phi_max);
        u.a = u.a.clamp(-limits.a_max, limits.a_max);
    }
}

/// Solve one receding-horizon problem. A warm start (the previous solution
/// shifted by one input with the last input repeated) is used when given;
/// cold starts try three deterministic seeds (straight, veer up, veer down)
/// and keep the best, since a head-on constraint is a saddle for a single
/// gradient descent.
pub fn solve(
    problem: &MpcProblem,
    warm_start: Option<&MpcSolution>,
    opts: &SolverOptions,
) -> Result<MpcSolution> {
    let start = std::time::Instant::now();
    let h = problem.horizon;
    if let Some(prev) = warm_start {
        if prev.inputs.len() == h {
            let mut shifted: Vec<EgoInput> = prev.inputs[1..].to_vec();
            shifted.push(*prev.inputs.last().unwrap());
            let mut sol = solve_from(problem, shifted, opts)?;
            sol.solve_ms = start.elapsed().as_secs_f64() * 1e3;
            return Ok(sol);
        }
    }
    let veer = |sign: f64| -> Vec<EgoInput> {
        (0..h)
            .map(|k| EgoInput {
                phi: if k < h / 2 { sign * 0.25 } else { -sign * 0.25 },
                a: 0.0,
            })
            .collect()
    };
    let mut best: Option<MpcSolution> = None;
    for seed in [vec![EgoInput { phi: 0.0, a: 0.0 }; h], veer(1.0), veer(-1.0)] {
        let cand = solve_from(problem, seed, opts)?;
        let better = match &best {
            None => true,
            Some(b) => match (
                cand.status != SolveStatus::Infeasible,
                b.status != SolveStatus::Infeasible,
            ) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => cand.objective < b.objective,
                (false, false) => cand.max_violation < b.max_violation,
            },
        };
        if better {
            best = Some(cand);
        }
    }
    let mut sol = best.unwrap();
    sol.solve_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(sol)
}

fn solve_from(
    problem: &MpcProblem,
    mut inputs: Vec<EgoInput>,
    opts: &SolverOptions,
) -> Result<MpcSolution> {
    let start = std::time::Instant::now();
    let h = problem.horizon;
    clamp_inputs(&mut inputs, &problem.limits);

    let mut grad = vec![0.0f64; 2 * h];
    let mut trace = opts.trace.then(Vec::new);
    let mut mu = opts.penalty_init;
    let mut final_violation = f64::INFINITY;
    let mut final_cost = f64::INFINITY;
    let mut inner_converged = false;

    for _outer in 0..opts.outer_iters {
        let mut step = opts.step_init;
        let (mut cost, mut violation) = objective_and_grad(problem, &inputs, mu, &mut grad);
        if !cost.is_finite() {
            return Err(Error::NonFiniteCost(0));
        }
        inner_converged = false;
        let mut iters_used = 0usize;
        for iter in 0..opts.inner_iters {
            iters_used = iter + 1;
            // Projected gradient step with backtracking.
            let mut accepted = false;
            for _bt in 0..30 {
                let mut cand: Vec<EgoInput> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, u)| EgoInput {
                        phi: u.phi - step * grad[2 * k],
                        a: u.a - step * grad[2 * k + 1],
                    })
                    .collect();
                clamp_inputs(&mut cand, &problem.limits);
                let move_sq: f64 = cand
                    .iter()
                    .zip(inputs.iter())
                    .map(|(c, u)| (c.phi - u.phi).powi(2) + (c.a - u.a).powi(2))
                    .sum();
                if move_sq < 1e-20 {
                    break;
                }
                let mut cand_grad = vec![0.0f64; 2 * h];
                let (cand_cost, cand_violation) =
                    objective_and_grad(problem, &cand, mu, &mut cand_grad);
                if !cand_cost.is_finite() {
                    return Err(Error::NonFiniteCost(iter));
                }
                if cand_cost <= cost - 1e-4 * move_sq / step {
                    inputs = cand;
                    grad = cand_grad;
                    cost = cand_cost;
                    violation = cand_violation;
                    step = (step * 1.5).min(1.0);
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                inner_converged = true;
                break;
            }
        }
        if let Some(t) = trace.as_mut() {
            t.push(PenaltyRound {
                mu,
                inner_iters: iters_used,
                objective: cost,
                max_violation: violation,
            });
        }
        final_violation = violation;
        final_cost = cost;
        if violation < opts.violation_tol {
            break;
        }
        mu *= opts.penalty_growth;
    }

    let rollout = roll(problem, &inputs);
    let status = if final_violation < opts.violation_tol {
        if inner_converged {
            SolveStatus::Optimal
        } else {
            SolveStatus::MaxIter
        }
    } else {
        SolveStatus::Infeasible
    };
    Ok(MpcSolution {
        inputs,
        states: rollout.states,
        objective: final_cost,
        status,
        solve_ms: start.elapsed().as_secs_f64() * 1e3,
        max_violation: final_violation,
        fallback: false,
        penalty_trace: trace,
    })
}

/// Maximal braking for the whole horizon; used when the solve reports
/// infeasibility so the episode is counted rather than silently continued.
pub fn fallback(problem: &MpcProblem) -> MpcSolution {
    let inputs = vec![
        EgoInput {
            phi: 0.0,
            a: -problem.limits.a_max,
        };
        problem.horizon
    ];
    let rollout = roll(problem, &inputs);
    MpcSolution {
        inputs,
        states: rollout.states,
        objective: f64::INFINITY,
        status: SolveStatus::Infeasible,
        solve_ms: 0.0,
        max_violation: f64::INFINITY,
        fallback: true,
        penalty_trace: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::QuantileResult;
    use crate::scores::{region_radii, SigmaTable};
    use rand::Rng;

    fn finite_quantile(c: f64) -> QuantileResult {
        QuantileResult {
            c_nominal: c,
            c_robust: c,
            delta_correction: 0.0,
            effective_level: 0.9,
            infinite: false,
        }
    }

    /// Build a problem with explicit per-(h, i) prediction points and a
    /// uniform radius.
    fn problem(
        state: EgoState,
        horizon: usize,
        preds: impl Fn(usize, usize) -> (f64, f64),
        radius: f64,
        agents: usize,
    ) -> MpcProblem {
        let dt = 0.125;
        let base_time = 0;
        let preds = &preds;
        let set_points: Vec<(f64, f64)> = (1..=horizon)
            .flat_map(|h| (1..=agents).map(move |i| preds(h, i)))
            .collect();
        let pred_set = PredictionSet::from_points(base_time, horizon, agents, set_points);
        let sigma = SigmaTable::uniform(horizon, agents, 1.0);
        let radii = region_radii(&finite_quantile(radius), &sigma, base_time, horizon, agents)
            .unwrap();
        MpcProblem {
            state,
            horizon,
            dt,
            predictions: pred_set,
            radii,
            eps: 0.3,
            goal: (35.0, -0.5),
            weights: CostWeights::default(),
            limits: EgoLimits::default(),
        }
    }

    #[test]
    fn tighten_constraint_examples() {
        assert!((tighten_constraint((0.0, 0.0), 0.5, 0.1, (1.0, 0.0)) - 0.4).abs() < 1e-12);
        let m = tighten_constraint((2.0, 1.0), 0.5, 0.1, (2.0, 1.0));
        assert!((m + 0.6).abs() < 1e-12);
        // Zero inflation reduces to the nominal margin.
        let m = tighten_constraint((0.0, 0.0), 0.0, 0.3, (1.0, 0.0));
        assert!((m - 0.7).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = crate::seed::rng(64);
        for trial in 0..30 {
            let h = 6;
            let state = EgoState {
                x: rng.gen_range(-1.0..1.0),
                y: rng.gen_range(-1.0..1.0),
                theta: rng.gen_range(-0.4..0.4),
                v: rng.gen_range(0.8..1.2),
            };
            let ox: f64 = rng.gen_range(0.0..1.5);
            let oy: f64 = rng.gen_range(-1.0..1.0);
            let p = problem(
                state,
                h,
                |hh, i| (ox + 0.1 * hh as f64, oy + 0.3 * i as f64),
                rng.gen_range(0.1..0.6),
                2,
            );
            let inputs: Vec<EgoInput> = (0..h)
                .map(|_| EgoInput {
                    phi: rng.gen_range(-0.3..0.3),
                    a: rng.gen_range(-0.4..0.4),
                })
                .collect();
            let mu = 50.0;
            let mut grad = vec![0.0; 2 * h];
            let (_, _) = objective_and_grad(&p, &inputs, mu, &mut grad);
            let fd_step = 1e-6;
            let mut fd = vec![0.0f64; 2 * h];
            for (k, f) in fd.iter_mut().enumerate() {
                let mut up = inputs.clone();
                let mut dn = inputs.clone();
                if k % 2 == 0 {
                    up[k / 2].phi += fd_step;
                    dn[k / 2].phi -= fd_step;
                } else {
                    up[k / 2].a += fd_step;
                    dn[k / 2].a -= fd_step;
                }
                let mut scratch = vec![0.0; 2 * h];
                let (cu, _) = objective_and_grad(&p, &up, mu, &mut scratch);
                let (cd, _) = objective_and_grad(&p, &dn, mu, &mut scratch);
                *f = (cu - cd) / (2.0 * fd_step);
            }
            // Vector-norm relative error: per-component comparisons on
            // near-zero components are dominated by cancellation noise in
            // the finite differences themselves.
            let num: f64 = fd
                .iter()
                .zip(grad.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-9);
            assert!(
                num / den <= 1e-4,
                "trial {trial}: gradient relative error {}",
                num / den
            );
        }
    }

    #[test]
    fn unconstrained_limit_accelerates_to_goal() {
        let state = EgoState {
            x: 0.0,
            y: -0.5,
            theta: 0.0,
            v: 0.8,
        };
        // Obstacles far away.
        let p = problem(state, 8, |_, _| (100.0, 100.0), 0.2, 2);
        let sol = solve(&p, None, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.max_violation < 1e-6);
        // Near-maximal acceleration toward the goal.
        assert!(
            sol.inputs[0].a > 0.9 * p.limits.a_max,
            "a0 = {}",
            sol.inputs[0].a
        );
        for tau in 1..=8usize {
            for i in 1..=2usize {
                let m = tighten_constraint(
                    p.predictions.get(tau, i),
                    p.radii.get(tau, i),
                    p.eps,
                    (sol.states[tau].x, sol.states[tau].y),
                );
                assert!(m > 0.0);
            }
        }
    }

    #[test]
    fn blocking_region_is_infeasible_and_fallback_brakes() {
        let state = EgoState {
            x: 0.0,
            y: -0.5,
            theta: 0.0,
            v: 1.0,
        };
        // A huge region centered on the ego blocks everything.
        let p = problem(state, 6, |_, _| (0.3, -0.5), 50.0, 1);
        let sol = solve(&p, None, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);

        let fb = fallback(&p);
        assert!(fb.fallback);
        // v = 1 at a_max = 2, dt = 1/8: zero after 4 steps.
        assert!((fb.states[1].v - 0.75).abs() < 1e-12);
        assert!((fb.states[4].v - 0.0).abs() < 1e-12);
        assert_eq!(fb.states[6].v, 0.0);

        // Stationary ego stays put under fallback.
        let p2 = problem(
            EgoState {
                x: 0.0,
                y: 0.0,
                theta: 0.0,
                v: 0.0,
            },
            4,
            |_, _| (1.0, 0.0),
            50.0,
            1,
        );
        let fb2 = fallback(&p2);
        for s in &fb2.states {
            assert_eq!((s.x, s.y), (0.0, 0.0));
        }
    }

    #[test]
    fn head_on_obstacle_forces_lane_change() {
        let state = EgoState {
            x: 0.0,
            y: -0.5,
            theta: 0.0,
            v: 1.0,
        };
        // Oncoming obstacle in the ego lane (slightly below center), free
        // lane above: the plan must move the ego toward +y while keeping
        // every margin nonnegative.
        let h = 10;
        let p = problem(
            state,
            h,
            |hh, _| (2.0 - 0.1 * hh as f64, -0.52),
            0.25,
            1,
        );
        let sol = solve(&p, None, &SolverOptions::default()).unwrap();
        assert_ne!(sol.status, SolveStatus::Infeasible);
        let end = sol.states.last().unwrap();
        assert!(end.y > state.y + 0.05, "no lateral move: y = {}", end.y);
        for tau in 1..=h {
            let m = tighten_constraint(
                p.predictions.get(tau, 1),
                p.radii.get(tau, 1),
                p.eps,
                (sol.states[tau].x, sol.states[tau].y),
            );
            assert!(m >= -1e-6, "margin at tau={tau}: {m}");
        }
    }

    #[test]
    fn resimulation_reproduces_solution_states() {
        let state = EgoState {
            x: 0.0,
            y: -0.4,
            theta: 0.1,
            v: 0.9,
        };
        let p = problem(state, 8, |hh, _| (3.0 - 0.05 * hh as f64, -0.5), 0.3, 1);
        let sol = solve(&p, None, &SolverOptions::default()).unwrap();
        let mut s = p.state;
        for (tau, u) in sol.inputs.iter().enumerate() {
            s = ego_step(&s, u, p.dt, &p.limits);
            let r = &sol.states[tau + 1];
            assert!((s.x - r.x).abs() < 1e-9);
            assert!((s.y - r.y).abs() < 1e-9);
            assert!((s.theta - r.theta).abs() < 1e-9);
            assert!((s.v - r.v).abs() < 1e-9);
        }
    }

    #[test]
    fn solver_is_deterministic_and_warm_startable() {
        let state = EgoState {
            x: 0.0,
            y: -0.5,
            theta: 0.0,
            v: 1.0,
        };
        let p = problem(state, 6, |hh, _| (2.0 - 0.1 * hh as f64, -0.5), 0.2, 1);
        let a = solve(&p, None, &SolverOptions::default()).unwrap();
        let b = solve(&p, None, &SolverOptions::default()).unwrap();
        assert_eq!(a.objective, b.objective);
        for (ua, ub) in a.inputs.iter().zip(b.inputs.iter()) {
            assert_eq!(ua.phi, ub.phi);
            assert_eq!(ua.a, ub.a);
        }
        let warm = solve(&p, Some(&a), &SolverOptions::default()).unwrap();
        assert_ne!(warm.status, SolveStatus::Infeasible);
    }

    /// Enlarging every radius never enlarges the feasible input set
    /// (enumerated on a coarse grid, H = 3).
    #[test]
    fn monotone_conservatism_on_input_grid() {
        let state = EgoState {
            x: 0.0,
            y: -0.5,
            theta: 0.0,
            v: 1.0,
        };
        let small = problem(state, 3, |hh, _| (1.0 - 0.1 * hh as f64, -0.5), 0.2, 1);
        let large = problem(state, 3, |hh, _| (1.0 - 0.1 * hh as f64, -0.5), 0.4, 1);
        let grid = [-0.4, 0.0, 0.4];
        let acc = [-1.0, 0.0, 1.0];
        let feasible = |p: &MpcProblem, seq: &[EgoInput]| -> bool {
            let states = roll(p, seq).states;
            for tau in 1..=3usize {
                let m = tighten_constraint(
                    p.predictions.get(tau, 1),
                    p.radii.get(tau, 1),
                    p.eps,
                    (states[tau].x, states[tau].y),
                );
                if m < 0.0 {
                    return false;
                }
            }
            true
        };
        let mut checked = 0usize;
        for p0 in grid {
            for a0 in acc {
                for p1 in grid {
                    for a1 in acc {
                        for p2 in grid {
                            for a2 in acc {
                                let seq = vec![
                                    EgoInput { phi: p0, a: a0 },
                                    EgoInput { phi: p1, a: a1 },
                                    EgoInput { phi: p2, a: a2 },
                                ];
                                if feasible(&large, &seq) {
                                    assert!(
                                        feasible(&small, &seq),
                                        "large-radius feasible but small-radius not"
                                    );
                                }
                                checked += 1;
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(checked, 729);
    }
}
