//! Distribution-shift estimation between synthetic calibration scores and
//! deployment scores: exact 1-D empirical Wasserstein distances, the
//! analytic diffusion-error bound assembled from per-step noise MSE and
//! drift/score regularity constants, Lipschitz propagation to the robust
//! radius, and unseen-context dataset aggregation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conformal::ScoreSet;
use crate::diffusion::{forward_sample, ContextVector, DiffusionModel, VarianceSchedule};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftKind {
    EmpiricalWInf,
    EmpiricalW2,
    AnalyticW2Bound,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub kind: ShiftKind,
    pub value: f64,
    pub sample_sizes: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_id: Option<String>,
}

/// Exact 2-Wasserstein distance between two empirical distributions given as
/// sorted samples: the quantile-function L2 distance on the merged
/// probability grid. For equal sizes this reduces to the root mean square of
/// sorted pairwise differences.
pub fn wasserstein2_sorted(a: &[f64], b: &[f64]) -> f64 {
    merged_grid_fold(a, b, 0.0, |acc, len, qa, qb| {
        acc + len * (qa - qb) * (qa - qb)
    })
    .sqrt()
}

/// Exact infinity-Wasserstein distance: the max absolute difference of the
/// two empirical quantile functions.
pub fn wasserstein_inf_sorted(a: &[f64], b: &[f64]) -> f64 {
    merged_grid_fold(a, b, 0.0, |acc, _len, qa, qb| acc.max((qa - qb).abs()))
}

/// Sweep the merged quantile grid of two sorted samples, folding over
/// (accumulator, segment length, quantile of a, quantile of b).
fn merged_grid_fold(
    a: &[f64],
    b: &[f64],
    init: f64,
    mut f: impl FnMut(f64, f64, f64, f64) -> f64,
) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let (n, m) = (a.len() as f64, b.len() as f64);
    let mut acc = init;
    let mut u = 0.0f64;
    let (mut ia, mut ib) = (0usize, 0usize);
    while ia < a.len() && ib < b.len() {
        let next_a = (ia + 1) as f64 / n;
        let next_b = (ib + 1) as f64 / m;
        let next = next_a.min(next_b);
        acc = f(acc, next - u, a[ia], b[ib]);
        if next_a <= next {
            ia += 1;
        }
        if next_b <= next {
            ib += 1;
        }
        u = next;
    }
    acc
}

pub fn wasserstein2_1d(a: &ScoreSet, b: &ScoreSet) -> f64 {
    wasserstein2_sorted(a.scores(), b.scores())
}

pub fn wasserstein_inf_1d(a: &ScoreSet, b: &ScoreSet) -> f64 {
    wasserstein_inf_sorted(a.scores(), b.scores())
}

/// Ingredients of the analytic 2-Wasserstein bound. `m[j]` is
/// exp(sum_{s<=j} (L1(s) + L2(s) beta_s)); `residual_term` is
/// sqrt(sum_j beta_j^2 m[j]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundIngredients {
    pub e: Vec<f64>,
    pub h: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub m: Vec<f64>,
    pub residual_term: f64,
}

/// Overflow guard: exponents beyond this make the bound unbounded rather
/// than clamped.
const EXP_GUARD: f64 = 700.0;

impl BoundIngredients {
    /// Derive H, L1 and M from measured per-step noise MSE and estimated
    /// score regularity constants: H(j) = E(j)/(1 - alpha_bar_j),
    /// L1(j) = beta_j^2 / 4.
    pub fn from_model_stats(
        schedule: &VarianceSchedule,
        e: Vec<f64>,
        l2: Vec<f64>,
    ) -> Result<Self> {
        let t_diff = schedule.len();
        if e.len() != t_diff || l2.len() != t_diff {
            return Err(Error::InvalidConfig(
                "ingredient tables must cover every diffusion step".into(),
            ));
        }
        let h: Vec<f64> = (1..=t_diff)
            .map(|j| e[j - 1] / (1.0 - schedule.alpha_bar(j)))
            .collect();
        let l1: Vec<f64> = (1..=t_diff)
            .map(|j| schedule.beta(j) * schedule.beta(j) / 4.0)
            .collect();
        Self::assemble(schedule, e, h, l1, l2)
    }

    /// Assemble from explicitly supplied tables (tests, audits).
    pub fn assemble(
        schedule: &VarianceSchedule,
        e: Vec<f64>,
        h: Vec<f64>,
        l1: Vec<f64>,
        l2: Vec<f64>,
    ) -> Result<Self> {
        let t_diff = schedule.len();
        let mut m = Vec::with_capacity(t_diff);
        let mut exponent = 0.0f64;
        let mut residual_sq = 0.0f64;
        for j in 1..=t_diff {
            exponent += l1[j - 1] + l2[j - 1] * schedule.beta(j);
            if exponent > EXP_GUARD {
                return Err(Error::UnboundedShift);
            }
            let mj = exponent.exp();
            m.push(mj);
            residual_sq += schedule.beta(j) * schedule.beta(j) * mj;
        }
        Ok(Self {
            e,
            h,
            l1,
            l2,
            m,
            residual_term: residual_sq.sqrt(),
        })
    }

    /// CSV audit dump: columns j, beta, E, H, L1, L2, M.
    pub fn write_csv<W: std::io::Write>(
        &self,
        schedule: &VarianceSchedule,
        mut out: W,
    ) -> Result<()> {
        writeln!(out, "j,beta,E,H,L1,L2,M")?;
        for j in 1..=schedule.len() {
            writeln!(
                out,
                "{j},{},{},{},{},{},{}",
                schedule.beta(j),
                self.e[j - 1],
                self.h[j - 1],
                self.l1[j - 1],
                self.l2[j - 1],
                self.m[j - 1]
            )?;
        }
        Ok(())
    }
}

/// Analytic 2-Wasserstein bound between the target conditional distribution
/// and the learned one:
/// sum_j beta_j M(j) sqrt(H(j)) + sqrt(sum_j beta_j^2 M(j)).
///
/// The value is in the model's standardized target units; callers rescale by
/// the target std when raw units are needed.
pub fn analytic_w2_bound(
    ingredients: &BoundIngredients,
    schedule: &VarianceSchedule,
) -> Result<ShiftEstimate> {
    let t_diff = schedule.len();
    if ingredients.h.len() != t_diff || ingredients.m.len() != t_diff {
        return Err(Error::InvalidConfig(
            "ingredient tables must cover every diffusion step".into(),
        ));
    }
    let mut score_term = 0.0f64;
    for j in 1..=t_diff {
        score_term += schedule.beta(j) * ingredients.m[j - 1] * ingredients.h[j - 1].sqrt();
    }
    let value = score_term + ingredients.residual_term;
    if !value.is_finite() {
        return Err(Error::UnboundedShift);
    }
    Ok(ShiftEstimate {
        kind: ShiftKind::AnalyticW2Bound,
        value,
        sample_sizes: (0, 0),
        context_id: None,
    })
}

/// The score estimator induced by the noise-prediction net:
/// s_theta(s, j, c) = -eps_theta(s, j, c) / sqrt(1 - alpha_bar_j).
pub fn score_estimator(model: &DiffusionModel, s_std: f64, j: usize, c: &ContextVector) -> f64 {
    -model.predict_noise_std(s_std, j, c) / (1.0 - model.schedule.alpha_bar(j)).sqrt()
}

/// Empirical one-sided Lipschitz constant of the learned score per diffusion
/// step: the max over sampled state pairs of
/// (s(a) - s(b)) (a - b) / |a - b|^2. Pairs are drawn from the forward
/// marginal around the model's own residual spread.
pub fn estimate_l2(
    model: &DiffusionModel,
    c: &ContextVector,
    pairs_per_step: usize,
    seed: u64,
) -> Vec<f64> {
    let t_diff = model.t_diff();
    let fphi = model.encode_std(c);
    let spread = model.residual_std.max(1e-6);
    (1..=t_diff)
        .map(|j| {
            let mut rng = seed::rng(seed::derive_index(seed, j as u64));
            let mut best = f64::NEG_INFINITY;
            let mut seen = false;
            for _ in 0..pairs_per_step {
                let u0a = fphi + spread * rng.sample::<f64, _>(StandardNormal);
                let u0b = fphi + spread * rng.sample::<f64, _>(StandardNormal);
                let ea: f64 = rng.sample(StandardNormal);
                let eb: f64 = rng.sample(StandardNormal);
                let sa = forward_sample(&model.schedule, u0a, fphi, j, ea);
                let sb = forward_sample(&model.schedule, u0b, fphi, j, eb);
                if (sa - sb).abs() < 1e-12 {
                    continue;
                }
                let score_a = score_estimator(model, sa, j, c);
                let score_b = score_estimator(model, sb, j, c);
                best = best.max((score_a - score_b) / (sa - sb));
                seen = true;
            }
            if seen {
                best
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-step noise MSE on held-out rows, in the model's standardized space.
pub fn estimate_noise_mse(
    model: &DiffusionModel,
    rows: &[(ContextVector, f64)],
    seed: u64,
) -> Vec<f64> {
    model.noise_mse_on(rows, seed)
}

/// Score-space shift radius from a raw-unit Wasserstein bound:
/// r = eps_w / sigma_min.
pub fn propagate_to_radius(w2_bound: f64, sigma: &crate::scores::SigmaTable) -> f64 {
    w2_bound / sigma.sigma_min()
}

/// A seen context's test score set, tagged with its nuisance coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextScoreSet {
    pub eta: f64,
    pub scores: ScoreSet,
}

/// Union of the `count` nearest seen contexts' score sets (distance on the
/// nuisance coordinate; ties broken toward the smaller eta).
pub fn aggregate_unseen_context(
    datasets: &[ContextScoreSet],
    eta_star: f64,
    count: usize,
) -> Result<ScoreSet> {
    if count == 0 || count > datasets.len() {
        return Err(Error::NotEnoughContexts {
            requested: count,
            available: datasets.len(),
        });
    }
    let mut order: Vec<usize> = (0..datasets.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (datasets[a].eta - eta_star).abs();
        let db = (datasets[b].eta - eta_star).abs();
        da.partial_cmp(&db)
            .unwrap()
            .then(datasets[a].eta.partial_cmp(&datasets[b].eta).unwrap())
    });
    let mut merged = datasets[order[0]].scores.clone();
    for &idx in order.iter().take(count).skip(1) {
        merged = merged.union(&datasets[idx].scores);
    }
    Ok(merged.with_context(format!("eta_star={eta_star:.6}")))
}
