//! Two-lane corridor world: shifted test environments, goal-seeking obstacle
//! motion with velocity-obstacle avoidance, kinematic-bicycle ego dynamics,
//! nuisance estimation, and collision checking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EgoInput {
    pub phi: f64,
    pub a: f64,
}

/// Ego actuation and state bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EgoLimits {
    pub phi_max: f64,
    pub a_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub wheelbase: f64,
}

impl Default for EgoLimits {
    fn default() -> Self {
        Self {
            phi_max: 0.6,
            a_max: 2.0,
            v_min: 0.0,
            v_max: 2.0,
            wheelbase: 0.5,
        }
    }
}

/// Forward-Euler kinematic bicycle step; position and heading integrate the
/// pre-update velocity, and the post-update speed is clamped to bounds.
pub fn ego_step(s: &EgoState, u: &EgoInput, dt: f64, limits: &EgoLimits) -> EgoState {
    EgoState {
        x: s.x + dt * s.v * s.theta.cos(),
        y: s.y + dt * s.v * s.theta.sin(),
        theta: s.theta + dt * (s.v / limits.wheelbase) * u.phi.tan(),
        v: (s.v + dt * u.a).clamp(limits.v_min, limits.v_max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    Train,
    Test(usize),
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvKind::Train => write!(f, "train"),
            EnvKind::Test(k) => write!(f, "{k}"),
        }
    }
}

/// Corridor geometry, obstacle initial conditions, and the sampled goal and
/// speed laws for one environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub kind: EnvKind,
    pub p_a0: (f64, f64),
    pub p_b0: (f64, f64),
    pub goal_x: [f64; 2],
    pub goal_y_interval: [[f64; 2]; 2],
    pub speed_interval: [f64; 2],
    pub dt: f64,
}

impl EnvironmentConfig {
    /// Nominal distribution: goals at the lane centers with a +-0.015
    /// latitude band, speeds U[0.5, 1.0].
    pub fn train(dt: f64) -> Self {
        Self {
            kind: EnvKind::Train,
            p_a0: (20.0, -0.5),
            p_b0: (30.0, 0.5),
            goal_x: [0.0, 10.0],
            goal_y_interval: [[-0.515, -0.485], [0.485, 0.515]],
            speed_interval: [0.5, 1.0],
            dt,
        }
    }

    /// Shifted environment k in 1..=10: agent A's goal latitude drifts
    /// upward in 0.03-wide bands, B mirrors it, speeds U[0.55, 1.05].
    pub fn test(k: usize, dt: f64) -> Result<Self> {
        if !(1..=10).contains(&k) {
            return Err(Error::InvalidConfig(format!("environment index {k}")));
        }
        let lo = -0.06 + 0.03 * (k as f64 - 1.0);
        let hi = -0.03 + 0.03 * (k as f64 - 1.0);
        Ok(Self {
            kind: EnvKind::Test(k),
            p_a0: (20.0, -0.5),
            p_b0: (30.0, 0.5),
            goal_x: [0.0, 10.0],
            goal_y_interval: [[lo, hi], [-hi, -lo]],
            speed_interval: [0.55, 1.05],
            dt,
        })
    }
}

/// Realized per-episode obstacle parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObstacleParams {
    pub goal: [(f64, f64); 2],
    pub speed: [f64; 2],
}

/// Uniform draws of goals and base speeds from the configured intervals.
pub fn sample_environment(cfg: &EnvironmentConfig, seed: u64) -> ObstacleParams {
    let mut rng = seed::rng(seed::derive(seed, "environment"));
    let gy_a = rng.gen_range(cfg.goal_y_interval[0][0]..cfg.goal_y_interval[0][1]);
    let gy_b = rng.gen_range(cfg.goal_y_interval[1][0]..cfg.goal_y_interval[1][1]);
    let v_a = rng.gen_range(cfg.speed_interval[0]..cfg.speed_interval[1]);
    let v_b = rng.gen_range(cfg.speed_interval[0]..cfg.speed_interval[1]);
    ObstacleParams {
        goal: [(cfg.goal_x[0], gy_a), (cfg.goal_x[1], gy_b)],
        speed: [v_a, v_b],
    }
}

fn norm(v: (f64, f64)) -> f64 {
    (v.0 * v.0 + v.1 * v.1).sqrt()
}

fn rotate(v: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

/// True when the relative-velocity ray from `pos` enters the disc of radius
/// `clearance` around `other`.
fn on_collision_course(
    pos: (f64, f64),
    vel: (f64, f64),
    other: (f64, f64),
    other_vel: (f64, f64),
    clearance: f64,
) -> bool {
    let d = (other.0 - pos.0, other.1 - pos.1);
    let dist = norm(d);
    if dist <= clearance {
        return true;
    }
    let v_rel = (vel.0 - other_vel.0, vel.1 - other_vel.1);
    let speed = norm(v_rel);
    if speed < 1e-12 {
        return false;
    }
    let closing = (v_rel.0 * d.0 + v_rel.1 * d.1) / speed;
    if closing <= 0.0 {
        return false;
    }
    // Perpendicular miss distance of the ray.
    let cross = (v_rel.0 * d.1 - v_rel.1 * d.0) / speed;
    cross.abs() < clearance
}

/// Goal-seeking step with a single velocity-obstacle constraint: the
/// preferred velocity points at the goal; when the other obstacle is within
/// sensing range and on a collision course, the preferred velocity is
/// rotated by the minimal angle that moves the relative-velocity ray out of
/// the collision cone (counterclockwise on ties). Obstacles that reach their
/// goal stay there.
#[allow(clippy::too_many_arguments)]
pub fn obstacle_step(
    pos: (f64, f64),
    goal: (f64, f64),
    speed: f64,
    neighbors: &[((f64, f64), (f64, f64))],
    clearance: f64,
    sensing: f64,
    dt: f64,
) -> (f64, f64) {
    let to_goal = (goal.0 - pos.0, goal.1 - pos.1);
    let dist_goal = norm(to_goal);
    if dist_goal <= speed * dt {
        return goal; // absorbing goal
    }
    let mut vel = (
        speed * to_goal.0 / dist_goal,
        speed * to_goal.1 / dist_goal,
    );
    for &(other, other_vel) in neighbors {
        let gap = norm((other.0 - pos.0, other.1 - pos.1));
        if gap > sensing {
            continue;
        }
        if !on_collision_course(pos, vel, other, other_vel, clearance) {
            continue;
        }
        // Scan outward in angle (counterclockwise first on ties), then
        // refine by bisection between the last blocked and first clear
        // angle.
        let steps = 720;
        let mut chosen = None;
        'scan: for s in 1..=steps {
            let mag = std::f64::consts::PI * s as f64 / steps as f64;
            for dir in [1.0, -1.0] {
                let cand = rotate(vel, dir * mag);
                if !on_collision_course(pos, cand, other, other_vel, clearance) {
                    let mut lo = mag - std::f64::consts::PI / steps as f64;
                    let mut hi = mag;
                    for _ in 0..40 {
                        let mid = 0.5 * (lo + hi);
                        if on_collision_course(
                            pos,
                            rotate(vel, dir * mid),
                            other,
                            other_vel,
                            clearance,
                        ) {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    chosen = Some(rotate(vel, dir * hi));
                    break 'scan;
                }
            }
        }
        if let Some(v) = chosen {
            vel = v;
        }
    }
    (pos.0 + vel.0 * dt, pos.1 + vel.1 * dt)
}

/// Mean absolute lateral velocity over the buffer:
/// eta = 1/(2 T_b) sum_i sum_t |(y_i(t+1) - y_i(t)) / dt|.
pub fn estimate_nuisance(buffers: &[Vec<(f64, f64)>], buffer_len: usize, dt: f64) -> Result<f64> {
    let mut total = 0.0;
    for positions in buffers {
        if positions.len() < buffer_len + 1 {
            return Err(Error::ShortBuffer {
                need: buffer_len + 1,
                got: positions.len(),
            });
        }
        for t in 0..buffer_len {
            total += ((positions[t + 1].1 - positions[t].1) / dt).abs();
        }
    }
    Ok(total / (buffers.len() as f64 * buffer_len as f64))
}

/// Collision margin: min over obstacles of distance minus eps; collision
/// when negative.
pub fn check_collision(ego: &EgoState, obstacles: &[(f64, f64)], eps: f64) -> (bool, f64) {
    let mut margin = f64::INFINITY;
    for (ox, oy) in obstacles {
        let d = ((ego.x - ox).powi(2) + (ego.y - oy).powi(2)).sqrt() - eps;
        margin = margin.min(d);
    }
    (margin < 0.0, margin)
}

/// Simulation constants shared by every episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    /// Episode length T in steps; trajectories carry T+1 samples.
    pub episode_len: usize,
    /// MPC lookahead horizon H.
    pub horizon: usize,
    /// Nuisance observation buffer T_b in steps.
    pub buffer_len: usize,
    /// Collision safety margin (meters).
    pub eps: f64,
    pub limits: EgoLimits,
    pub ego_start: EgoState,
    pub ego_goal: (f64, f64),
    /// Obstacle-obstacle clearance radius for the avoidance rule.
    pub clearance: f64,
    /// Obstacle sensing range for the avoidance rule.
    pub sensing: f64,
    /// Half-width of the per-step multiplicative speed jitter that stands in
    /// for the upstream simulator's per-step velocity adjustments.
    pub speed_jitter: f64,
    pub agents: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.125,
            episode_len: 80,
            horizon: 10,
            buffer_len: 8,
            eps: 0.3,
            limits: EgoLimits::default(),
            ego_start: EgoState {
                x: 0.0,
                y: -0.5,
                theta: 0.0,
                v: 0.8,
            },
            ego_goal: (35.0, -0.5),
            clearance: 0.3,
            sensing: 3.0,
            speed_jitter: 0.08,
            agents: 2,
        }
    }
}

/// Obstacle world for one episode; (config, seed) fully determine the
/// trajectories.
pub struct CorridorWorld {
    pub params: ObstacleParams,
    pub positions: [(f64, f64); 2],
    reached: [bool; 2],
    clearance: f64,
    sensing: f64,
    jitter: f64,
    dt: f64,
    rng: rand_chacha::ChaCha8Rng,
}

impl CorridorWorld {
    pub fn new(env: &EnvironmentConfig, sim: &SimConfig, seed: u64) -> Self {
        let params = sample_environment(env, seed);
        Self {
            params,
            positions: [env.p_a0, env.p_b0],
            reached: [false; 2],
            clearance: sim.clearance,
            sensing: sim.sensing,
            jitter: sim.speed_jitter,
            dt: env.dt,
            rng: seed::rng(seed::derive(seed, "jitter")),
        }
    }

    /// Advance both obstacles one step and return the new positions.
    pub fn step(&mut self) -> [(f64, f64); 2] {
        let mut speeds = [0.0f64; 2];
        for (i, s) in speeds.iter_mut().enumerate() {
            let jitter: f64 = self.rng.gen_range(-self.jitter..=self.jitter);
            *s = self.params.speed[i] * (1.0 + jitter);
        }
        let prev = self.positions;
        let mut vels = [(0.0, 0.0); 2];
        for i in 0..2 {
            let to_goal = (
                self.params.goal[i].0 - prev[i].0,
                self.params.goal[i].1 - prev[i].1,
            );
            let d = norm(to_goal);
            vels[i] = if d > 1e-12 && !self.reached[i] {
                (speeds[i] * to_goal.0 / d, speeds[i] * to_goal.1 / d)
            } else {
                (0.0, 0.0)
            };
        }
        for i in 0..2 {
            if self.reached[i] {
                continue;
            }
            let other = 1 - i;
            let next = obstacle_step(
                prev[i],
                self.params.goal[i],
                speeds[i],
                &[(prev[other], vels[other])],
                self.clearance,
                self.sensing,
                self.dt,
            );
            if next == self.params.goal[i] {
                self.reached[i] = true;
            }
            self.positions[i] = next;
        }
        self.positions
    }

    /// Roll the full obstacle trajectory: positions at steps 0..=len.
    pub fn rollout(env: &EnvironmentConfig, sim: &SimConfig, seed: u64, len: usize) -> Vec<[(f64, f64); 2]> {
        let mut world = Self::new(env, sim, seed);
        let mut out = Vec::with_capacity(len + 1);
        out.push(world.positions);
        for _ in 0..len {
            out.push(world.step());
        }
        out
    }
}

/// What the planner recorded at one step (kept when tracing is enabled).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub predictions: Vec<(f64, f64)>,
    pub radii: Vec<f64>,
    pub solve_ms: f64,
    pub status: String,
}

/// Full per-episode record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub env: String,
    pub case_id: String,
    pub loop_mode: String,
    pub seed: u64,
    pub eta: f64,
    pub ego: Vec<EgoState>,
    pub inputs: Vec<EgoInput>,
    pub obstacles: Vec<Vec<(f64, f64)>>,
    pub collision: bool,
    pub coverage: bool,
    pub fallback_used: bool,
    pub infeasible_steps: usize,
    pub test_score: f64,
    pub c_robust: f64,
    pub r_used: f64,
    pub step_ms: Vec<f64>,
    pub calib_ms: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plan_records: Vec<StepRecord>,
}
