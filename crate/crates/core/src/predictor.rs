//! Obstacle trajectory predictors.
//!
//! The default is constant-velocity extrapolation with a least-squares
//! velocity estimate. A linear ridge predictor trained on nominal-environment
//! rollouts is also provided; conformal validity holds for any fixed
//! predictor, so the choice only affects region sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed positions of one obstacle up to the current step, uniform dt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstacleHistory {
    pub positions: Vec<(f64, f64)>,
    pub dt: f64,
}

impl ObstacleHistory {
    pub fn new(positions: Vec<(f64, f64)>, dt: f64) -> Self {
        Self { positions, dt }
    }
}

/// Predictions yhat(tau, i) for tau in {t+1 .. t+H}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSet {
    pub base_time: usize,
    pub horizon: usize,
    pub agents: usize,
    yhat: Vec<(f64, f64)>, // [(h-1) * agents + (i-1)]
}

impl PredictionSet {
    /// Assemble from explicit points laid out [(h-1) * agents + (i-1)].
    pub fn from_points(
        base_time: usize,
        horizon: usize,
        agents: usize,
        yhat: Vec<(f64, f64)>,
    ) -> Self {
        assert_eq!(yhat.len(), horizon * agents);
        Self {
            base_time,
            horizon,
            agents,
            yhat,
        }
    }

    pub fn get(&self, tau: usize, i: usize) -> (f64, f64) {
        let h = tau - self.base_time;
        self.yhat[(h - 1) * self.agents + (i - 1)]
    }
}

/// Least-squares velocity over the last `window` samples (slope of position
/// against time). Falls back to however many samples exist, needing at
/// least two.
fn ls_velocity(history: &ObstacleHistory, window: usize) -> Result<(f64, f64)> {
    let n_avail = history.positions.len();
    if n_avail < 2 {
        return Err(Error::InsufficientHistory(n_avail));
    }
    let w = window.max(2).min(n_avail);
    let pts = &history.positions[n_avail - w..];
    let mean_k = (w as f64 - 1.0) / 2.0;
    let (mut sxy_x, mut sxy_y, mut skk) = (0.0, 0.0, 0.0);
    let (mut mean_x, mut mean_y) = (0.0, 0.0);
    for (x, y) in pts {
        mean_x += x;
        mean_y += y;
    }
    mean_x /= w as f64;
    mean_y /= w as f64;
    for (k, (x, y)) in pts.iter().enumerate() {
        let dk = k as f64 - mean_k;
        sxy_x += dk * (x - mean_x);
        sxy_y += dk * (y - mean_y);
        skk += dk * dk;
    }
    Ok((sxy_x / skk / history.dt, sxy_y / skk / history.dt))
}

/// Constant-velocity prediction: yhat(t+h) = p_t + h dt v_ls.
pub fn predict(
    histories: &[ObstacleHistory],
    t: usize,
    horizon: usize,
    window: usize,
) -> Result<PredictionSet> {
    let agents = histories.len();
    let mut yhat = vec![(0.0, 0.0); horizon * agents];
    for (idx, hist) in histories.iter().enumerate() {
        let (vx, vy) = ls_velocity(hist, window)?;
        let (px, py) = *hist.positions.last().unwrap();
        for h in 1..=horizon {
            let dtau = h as f64 * hist.dt;
            yhat[(h - 1) * agents + idx] = (px + dtau * vx, py + dtau * vy);
        }
    }
    Ok(PredictionSet {
        base_time: t,
        horizon,
        agents,
        yhat,
    })
}

/// Pluggable predictor interface so the calibration pipeline is independent
/// of the extrapolation model.
pub trait TrajectoryPredictor: Send + Sync {
    fn predict(&self, histories: &[ObstacleHistory], t: usize, horizon: usize)
        -> Result<PredictionSet>;
}

/// The spec'd constant-velocity baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantVelocity {
    pub window: usize,
}

impl Default for ConstantVelocity {
    fn default() -> Self {
        Self { window: 4 }
    }
}

impl TrajectoryPredictor for ConstantVelocity {
    fn predict(
        &self,
        histories: &[ObstacleHistory],
        t: usize,
        horizon: usize,
    ) -> Result<PredictionSet> {
        predict(histories, t, horizon, self.window)
    }
}

/// Linear ridge predictor: per lookahead h, displacement = A_h [1, vx, vy]
/// with the velocity features estimated by least squares over `window`
/// samples. Trained once on nominal-environment rollouts; the regularizer
/// shrinks weakly identified coefficients (in the corridor, the lateral
/// velocity) toward zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgePredictor {
    pub window: usize,
    pub lambda: f64,
    /// Per lookahead h: coefficients for dx and dy, each over [1, vx, vy].
    coef: Vec<[[f64; 3]; 2]>,
}

impl RidgePredictor {
    /// Fit from (feature, displacement) rows per lookahead. `samples[h-1]`
    /// holds ([vx, vy], (dx, dy)) training pairs for lookahead h.
    pub fn fit(
        samples: &[Vec<([f64; 2], (f64, f64))>],
        window: usize,
        lambda: f64,
    ) -> Result<Self> {
        let mut coef = Vec::with_capacity(samples.len());
        for rows in samples {
            if rows.is_empty() {
                return Err(Error::InvalidConfig(
                    "ridge fit needs at least one row per lookahead".into(),
                ));
            }
            let n = rows.len() as f64;
            // Normal equations over features [1, vx, vy]; the ridge term
            // skips the intercept.
            let mut xtx = [[0.0f64; 3]; 3];
            let mut xty = [[0.0f64; 2]; 3];
            for (f, (dx, dy)) in rows {
                let feat = [1.0, f[0], f[1]];
                for a in 0..3 {
                    for b in 0..3 {
                        xtx[a][b] += feat[a] * feat[b];
                    }
                    xty[a][0] += feat[a] * dx;
                    xty[a][1] += feat[a] * dy;
                }
            }
            for a in 1..3 {
                xtx[a][a] += lambda * n;
            }
            let solved = solve3(xtx, xty)?;
            coef.push([
                [solved[0][0], solved[1][0], solved[2][0]],
                [solved[0][1], solved[1][1], solved[2][1]],
            ]);
        }
        Ok(Self {
            window,
            lambda,
            coef,
        })
    }

    pub fn horizon(&self) -> usize {
        self.coef.len()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl TrajectoryPredictor for RidgePredictor {
    fn predict(
        &self,
        histories: &[ObstacleHistory],
        t: usize,
        horizon: usize,
    ) -> Result<PredictionSet> {
        let agents = histories.len();
        let mut yhat = vec![(0.0, 0.0); horizon * agents];
        for (idx, hist) in histories.iter().enumerate() {
            let (vx, vy) = ls_velocity(hist, self.window)?;
            let (px, py) = *hist.positions.last().unwrap();
            for h in 1..=horizon {
                // Beyond the trained horizon, extrapolate the last
                // coefficient row linearly in h.
                let (row, scale) = if h <= self.coef.len() {
                    (&self.coef[h - 1], 1.0)
                } else {
                    (
                        &self.coef[self.coef.len() - 1],
                        h as f64 / self.coef.len() as f64,
                    )
                };
                let dx = scale * (row[0][0] + row[0][1] * vx + row[0][2] * vy);
                let dy = scale * (row[1][0] + row[1][1] * vx + row[1][2] * vy);
                yhat[(h - 1) * agents + idx] = (px + dx, py + dy);
            }
        }
        Ok(PredictionSet {
            base_time: t,
            horizon,
            agents,
            yhat,
        })
    }
}

/// Gaussian elimination with partial pivoting for the 3x3 normal equations,
/// two right-hand sides.
fn solve3(mut a: [[f64; 3]; 3], mut b: [[f64; 2]; 3]) -> Result<[[f64; 2]; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::InvalidConfig("singular ridge system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..2 {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    let mut x = [[0.0f64; 2]; 3];
    for row in (0..3).rev() {
        for k in 0..2 {
            let mut v = b[row][k];
            for col in row + 1..3 {
                v -= a[row][col] * x[col][k];
            }
            x[row][k] = v / a[row][row];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(points: &[(f64, f64)], dt: f64) -> ObstacleHistory {
        ObstacleHistory::new(points.to_vec(), dt)
    }

    #[test]
    fn static_obstacle_predicts_in_place() {
        let h = hist(&[(2.0, 1.0); 6], 0.125);
        let p = predict(&[h], 5, 4, 4).unwrap();
        for tau in 6..=9 {
            assert_eq!(p.get(tau, 1), (2.0, 1.0));
        }
    }

    #[test]
    fn uniform_motion_hand_kinematics() {
        // (1, 0) m/s at dt = 0.125: four steps ahead is +0.5 in x.
        let dt = 0.125;
        let pts: Vec<(f64, f64)> = (0..8).map(|k| (k as f64 * dt, 0.3)).collect();
        let p = predict(&[hist(&pts, dt)], 7, 4, 4).unwrap();
        let (px, _) = *pts.last().unwrap();
        let got = p.get(11, 1);
        assert!((got.0 - (px + 0.5)).abs() < 1e-12);
        assert!((got.1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn two_point_slope() {
        let dt = 0.125;
        let p = predict(&[hist(&[(0.0, 0.0), (dt * 0.8, 0.0)], dt)], 1, 1, 2).unwrap();
        let got = p.get(2, 1);
        assert!((got.0 - (dt * 0.8 + dt * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn insufficient_history_is_an_error() {
        let h = hist(&[(0.0, 0.0)], 0.125);
        assert!(matches!(
            predict(&[h], 0, 1, 4),
            Err(Error::InsufficientHistory(1))
        ));
    }

    #[test]
    fn translation_equivariance() {
        let dt = 0.125;
        let pts: Vec<(f64, f64)> = (0..6)
            .map(|k| ((k as f64 * 0.07).sin(), (k as f64 * 0.11).cos()))
            .collect();
        let shifted: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (x + 3.0, y - 2.0)).collect();
        let p0 = predict(&[hist(&pts, dt)], 5, 3, 4).unwrap();
        let p1 = predict(&[hist(&shifted, dt)], 5, 3, 4).unwrap();
        for tau in 6..=8 {
            let a = p0.get(tau, 1);
            let b = p1.get(tau, 1);
            assert!((b.0 - a.0 - 3.0).abs() < 1e-12);
            assert!((b.1 - a.1 + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_on_affine_motion() {
        let dt = 0.125;
        let (vx, vy) = (0.7, -0.2);
        let pts: Vec<(f64, f64)> = (0..10)
            .map(|k| (1.0 + vx * dt * k as f64, 2.0 + vy * dt * k as f64))
            .collect();
        let p = predict(&[hist(&pts, dt)], 9, 5, 4).unwrap();
        for h in 1..=5usize {
            let expect = (
                pts[9].0 + vx * dt * h as f64,
                pts[9].1 + vy * dt * h as f64,
            );
            let got = p.get(9 + h, 1);
            assert!((got.0 - expect.0).abs() < 1e-10);
            assert!((got.1 - expect.1).abs() < 1e-10);
        }
    }

    #[test]
    fn ridge_shrinks_weak_coordinates() {
        // Training rows where vy is pure noise at tiny scale and dy is 0:
        // the dy|vy coefficient must be shrunk essentially to zero, while
        // dx tracks vx.
        let mut rng = crate::seed::rng(4);
        use rand::Rng;
        let mut rows = Vec::new();
        for _ in 0..500 {
            let vx: f64 = rng.gen_range(0.5..1.0);
            let vy: f64 = rng.gen_range(-1e-3..1e-3);
            rows.push(([vx, vy], (vx * 0.5, 0.0)));
        }
        let ridge = RidgePredictor::fit(&[rows], 4, 1e-3).unwrap();
        let dy_vy = ridge.coef[0][1][2];
        assert!(dy_vy.abs() < 0.05, "dy|vy coefficient {dy_vy}");
        let dx_vx = ridge.coef[0][0][1];
        assert!((dx_vx - 0.5).abs() < 0.05, "dx|vx coefficient {dx_vx}");
    }

    #[test]
    fn ridge_predicts_from_features() {
        // One lookahead, identity-ish mapping dx = 0.25 vx.
        let rows: Vec<([f64; 2], (f64, f64))> = (0..200)
            .map(|k| {
                let vx = 0.5 + 0.002 * k as f64;
                ([vx, 0.0], (0.25 * vx, 0.0))
            })
            .collect();
        let ridge = RidgePredictor::fit(&[rows], 2, 1e-6).unwrap();
        let dt = 0.125;
        let pts = vec![(0.0, 0.0), (0.8 * dt, 0.0)];
        let p = ridge.predict(&[hist(&pts, dt)], 1, 1).unwrap();
        let got = p.get(2, 1);
        // Small systematic offset from the ridge penalty itself.
        assert!((got.0 - (0.8 * dt + 0.25 * 0.8)).abs() < 1e-4, "{got:?}");
    }
}
