//! Nonconformity scores over prediction-error tensors, sigma normalization,
//! and robust prediction-region radii.
//!
//! An episode's score is the sigma-normalized maximum position error over the
//! whole index set S = {(t, tau, i) : 1 <= t <= T-1, t < tau <= min(t+H, T),
//! 1 <= i <= N}. Synthetic scores replace the measured errors with draws from
//! the conditional diffusion model on the same grid.

use serde::{Deserialize, Serialize};

use crate::conformal::{Provenance, QuantileResult, ScoreSet};
use crate::diffusion::{AsContext, ContextVector, DiffusionModel};
use crate::error::{Error, Result};
use crate::seed;

/// Dense per-episode tensor of position-error norms, indexed by
/// (t, tau, i), 1-based, over the index set S.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "TensorRepr", try_from = "TensorRepr")]
pub struct PredictionErrorTensor {
    episode_len: usize, // T
    horizon: usize,     // H
    agents: usize,      // N
    values: Vec<f64>,   // [(t-1) * H * N + (h-1) * N + (i-1)], NaN off-grid
}

/// Wire form: off-grid cells as null rather than NaN.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    episode_len: usize,
    horizon: usize,
    agents: usize,
    values: Vec<Option<f64>>,
}

impl From<PredictionErrorTensor> for TensorRepr {
    fn from(t: PredictionErrorTensor) -> Self {
        Self {
            episode_len: t.episode_len,
            horizon: t.horizon,
            agents: t.agents,
            values: t
                .values
                .iter()
                .map(|v| if v.is_finite() { Some(*v) } else { None })
                .collect(),
        }
    }
}

impl TryFrom<TensorRepr> for PredictionErrorTensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        if r.values.len() != (r.episode_len.saturating_sub(1)) * r.horizon * r.agents {
            return Err(Error::InvalidConfig("tensor size mismatch".into()));
        }
        Ok(Self {
            episode_len: r.episode_len,
            horizon: r.horizon,
            agents: r.agents,
            values: r.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        })
    }
}

impl PredictionErrorTensor {
    pub fn new(episode_len: usize, horizon: usize, agents: usize) -> Self {
        let values = vec![f64::NAN; (episode_len.saturating_sub(1)) * horizon * agents];
        Self {
            episode_len,
            horizon,
            agents,
            values,
        }
    }

    /// Build from a closure evaluated on every (t, tau, i) in S.
    pub fn from_fn(
        episode_len: usize,
        horizon: usize,
        agents: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut tensor = Self::new(episode_len, horizon, agents);
        for t in 1..episode_len {
            for tau in t + 1..=(t + horizon).min(episode_len) {
                for i in 1..=agents {
                    tensor.set(t, tau, i, f(t, tau, i))?;
                }
            }
        }
        Ok(tensor)
    }

    fn index(&self, t: usize, tau: usize, i: usize) -> Option<usize> {
        if t < 1 || t >= self.episode_len || i < 1 || i > self.agents {
            return None;
        }
        if tau <= t || tau > (t + self.horizon).min(self.episode_len) {
            return None;
        }
        let h = tau - t;
        Some((t - 1) * self.horizon * self.agents + (h - 1) * self.agents + (i - 1))
    }

    pub fn set(&mut self, t: usize, tau: usize, i: usize, v: f64) -> Result<()> {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidScore(v));
        }
        let idx = self
            .index(t, tau, i)
            .ok_or_else(|| Error::InvalidConfig(format!("({t},{tau},{i}) outside index set")))?;
        self.values[idx] = v;
        Ok(())
    }

    pub fn get(&self, t: usize, tau: usize, i: usize) -> Option<f64> {
        self.index(t, tau, i)
            .map(|idx| self.values[idx])
            .filter(|v| v.is_finite())
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Iterate the populated index set as (t, tau, i, value).
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let (h_max, n) = (self.horizon, self.agents);
        self.values.iter().enumerate().filter_map(move |(idx, &v)| {
            if !v.is_finite() {
                return None;
            }
            let t = idx / (h_max * n) + 1;
            let rem = idx % (h_max * n);
            let h = rem / n + 1;
            let i = rem % n + 1;
            Some((t, t + h, i, v))
        })
    }

    /// Number of populated cells.
    pub fn len(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Normalization constants sigma(h, i) indexed by lookahead offset and agent,
/// floored away from zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaTable {
    horizon: usize,
    agents: usize,
    sigma: Vec<f64>, // [(h-1) * agents + (i-1)]
    sigma_min: f64,
}

impl SigmaTable {
    pub fn from_values(horizon: usize, agents: usize, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != horizon * agents {
            return Err(Error::InvalidConfig("sigma table size mismatch".into()));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidConfig("sigma values must be positive".into()));
        }
        let sigma_min = sigma.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            horizon,
            agents,
            sigma,
            sigma_min,
        })
    }

    /// Uniform table (tests and degenerate fixtures).
    pub fn uniform(horizon: usize, agents: usize, value: f64) -> Self {
        Self::from_values(horizon, agents, vec![value; horizon * agents]).unwrap()
    }

    pub fn get(&self, h: usize, i: usize) -> Result<f64> {
        if h < 1 || h > self.horizon || i < 1 || i > self.agents {
            return Err(Error::MissingSigma { h, i });
        }
        Ok(self.sigma[(h - 1) * self.agents + (i - 1)])
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Restrict to a shorter lookahead horizon.
    pub fn restrict(&self, horizon: usize) -> Result<Self> {
        if horizon > self.horizon {
            return Err(Error::MissingSigma { h: horizon, i: 1 });
        }
        Self::from_values(
            horizon,
            self.agents,
            self.sigma[..horizon * self.agents].to_vec(),
        )
    }

    /// JSON map keyed "h:i".
    pub fn to_json_map(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for h in 1..=self.horizon {
            for i in 1..=self.agents {
                map.insert(
                    format!("{h}:{i}"),
                    serde_json::json!(self.sigma[(h - 1) * self.agents + (i - 1)]),
                );
            }
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json_map(value: &serde_json::Value) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::InvalidConfig("sigma map must be an object".into()))?;
        let mut entries = Vec::new();
        for (key, v) in map {
            let (h, i) = key
                .split_once(':')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::InvalidConfig(format!("bad sigma key {key:?}")))?;
            let val = v
                .as_f64()
                .ok_or_else(|| Error::InvalidConfig("sigma value must be a number".into()))?;
            entries.push((h, i, val));
        }
        let horizon = entries.iter().map(|e| e.0).max().unwrap_or(0);
        let agents = entries.iter().map(|e| e.1).max().unwrap_or(0);
        let mut sigma = vec![0.0; horizon * agents];
        for (h, i, v) in entries {
            sigma[(h - 1) * agents + (i - 1)] = v;
        }
        Self::from_values(horizon, agents, sigma)
    }
}

/// sigma(h, i) = mean over episodes and t of errors(t, t+h, i), floored.
pub fn fit_sigma(calibration_errors: &[PredictionErrorTensor], floor: f64) -> Result<SigmaTable> {
    let first = calibration_errors.first().ok_or(Error::EmptyTensor)?;
    let (horizon, agents) = (first.horizon(), first.agents());
    let mut sums = vec![0.0f64; horizon * agents];
    let mut counts = vec![0usize; horizon * agents];
    for tensor in calibration_errors {
        for (t, tau, i, v) in tensor.iter() {
            let h = tau - t;
            if h <= horizon && i <= agents {
                sums[(h - 1) * agents + (i - 1)] += v;
                counts[(h - 1) * agents + (i - 1)] += 1;
            }
        }
    }
    let sigma: Vec<f64> = sums
        .iter()
        .zip(counts.iter())
        .map(|(s, c)| if *c > 0 { (s / *c as f64).max(floor) } else { floor })
        .collect();
    SigmaTable::from_values(horizon, agents, sigma)
}

/// Episode nonconformity score: max over S of error / sigma(tau - t, i).
pub fn episode_score(errors: &PredictionErrorTensor, sigma: &SigmaTable) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let mut best = f64::NEG_INFINITY;
    for (t, tau, i, v) in errors.iter() {
        let s = sigma.get(tau - t, i)?;
        best = best.max(v / s);
    }
    Ok(best)
}

/// The (t, tau, i) grid underlying a synthetic episode score, in the fixed
/// deterministic order used for per-cell RNG streams.
fn score_grid(eta: f64, episode_len: usize, horizon: usize, agents: usize) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for t in 1..episode_len {
        for tau in t + 1..=(t + horizon).min(episode_len) {
            for i in 1..=agents {
                cells.push(GridCell {
                    ctx: ContextVector::new(eta, t, tau - t, i),
                    h: tau - t,
                    i,
                });
            }
        }
    }
    cells
}

struct GridCell {
    ctx: ContextVector,
    h: usize,
    i: usize,
}

impl AsContext for GridCell {
    fn context(&self) -> ContextVector {
        self.ctx
    }
}

/// One synthetic episode score: a draw from the model at every grid cell,
/// clipped at zero, sigma-normalized, maxed.
pub fn synthetic_episode_score(
    model: &DiffusionModel,
    eta: f64,
    episode_len: usize,
    horizon: usize,
    agents: usize,
    sigma: &SigmaTable,
    rng_seed: u64,
) -> Result<f64> {
    let scores =
        build_synthetic_scores_impl(model, eta, episode_len, horizon, agents, sigma, &[rng_seed])?;
    Ok(scores[0])
}

/// K synthetic episode scores with stream-split seeds: score k uses the
/// derived seed (seed, k) and is bit-identical to a standalone
/// `synthetic_episode_score` call with that seed.
#[allow(clippy::too_many_arguments)]
pub fn build_synthetic_scoreset(
    model: &DiffusionModel,
    eta: f64,
    episode_len: usize,
    horizon: usize,
    agents: usize,
    sigma: &SigmaTable,
    k: usize,
    rng_seed: u64,
) -> Result<ScoreSet> {
    if k == 0 {
        return Err(Error::EmptyScoreSet);
    }
    let streams: Vec<u64> = (0..k)
        .map(|i| seed::derive_index(rng_seed, i as u64))
        .collect();
    let scores =
        build_synthetic_scores_impl(model, eta, episode_len, horizon, agents, sigma, &streams)?;
    Ok(ScoreSet::new(scores, Provenance::Synthetic)?.with_context(format!("eta={eta:.6}")))
}

fn build_synthetic_scores_impl(
    model: &DiffusionModel,
    eta: f64,
    episode_len: usize,
    horizon: usize,
    agents: usize,
    sigma: &SigmaTable,
    streams: &[u64],
) -> Result<Vec<f64>> {
    let cells = score_grid(eta, episode_len, horizon, agents);
    if cells.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let inv_sigma: Vec<f64> = cells
        .iter()
        .map(|c| sigma.get(c.h, c.i).map(|s| 1.0 / s))
        .collect::<Result<_>>()?;
    let grid = model.prepare_grid(&cells);
    let draws = grid.sample_rows(streams)?;
    let n_cells = cells.len();
    let scores = streams
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let row = &draws[k * n_cells..(k + 1) * n_cells];
            let mut best = f64::NEG_INFINITY;
            for (d, inv_s) in row.iter().zip(inv_sigma.iter()) {
                best = best.max(d.max(0.0) * inv_s);
            }
            best
        })
        .collect();
    Ok(scores)
}

/// Per-(tau, i) robust region radii at base time t:
/// radius = sigma(tau - t, i) * (C + Delta).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionRadii {
    pub base_time: usize,
    pub horizon: usize,
    pub agents: usize,
    radii: Vec<f64>, // [(h-1) * agents + (i-1)]
    pub quantile: QuantileResult,
    pub centers_source: String,
}

impl RegionRadii {
    /// Radius for absolute prediction time tau and agent i.
    pub fn get(&self, tau: usize, i: usize) -> f64 {
        let h = tau - self.base_time;
        self.radii[(h - 1) * self.agents + (i - 1)]
    }
}

pub fn region_radii(
    quantile: &QuantileResult,
    sigma: &SigmaTable,
    t: usize,
    horizon: usize,
    agents: usize,
) -> Result<RegionRadii> {
    if quantile.infinite {
        return Err(Error::InfiniteQuantile);
    }
    let scale = quantile.c_nominal + quantile.delta_correction;
    let mut radii = vec![0.0; horizon * agents];
    for h in 1..=horizon {
        for i in 1..=agents {
            radii[(h - 1) * agents + (i - 1)] = sigma.get(h, i)? * scale;
        }
    }
    Ok(RegionRadii {
        base_time: t,
        horizon,
        agents,
        radii,
        quantile: *quantile,
        centers_source: String::new(),
    })
}
