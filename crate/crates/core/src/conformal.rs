//! Vanilla and robust conformal quantiles over scalar score sets.
//!
//! The robust variants inflate the calibration quantile so that coverage
//! survives any test distribution inside an ambiguity set around the
//! calibration distribution: an f-divergence ball (total variation in closed
//! form, arbitrary generators via one-dimensional bisection) or a
//! Levy-Prokhorov ball parameterized by a local displacement radius `eps`
//! and a global mass-relocation fraction `rho`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a calibration score set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    RealCalibration,
    Synthetic,
}

/// A finite multiset of nonnegative scalar nonconformity scores, stored
/// sorted ascending.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSet {
    scores: Vec<f64>,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context_id: Option<String>,
}

impl ScoreSet {
    pub fn new(mut scores: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyScoreSet);
        }
        for &s in &scores {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::InvalidScore(s));
            }
        }
        scores.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self {
            scores,
            provenance,
            context_id: None,
        })
    }

    pub fn with_context(mut self, context_id: impl Into<String>) -> Self {
        self.context_id = Some(context_id.into());
        self
    }

    /// Scores in ascending order.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn context_id(&self) -> Option<&str> {
        self.context_id.as_deref()
    }

    /// The k-th smallest score, 1-indexed.
    pub fn order_statistic(&self, k: usize) -> f64 {
        self.scores[k - 1]
    }

    /// Merge two score multisets (used by unseen-context aggregation).
    pub fn union(&self, other: &ScoreSet) -> ScoreSet {
        let mut scores = self.scores.clone();
        scores.extend_from_slice(&other.scores);
        scores.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        ScoreSet {
            scores,
            provenance: self.provenance,
            context_id: self.context_id.clone(),
        }
    }

    /// Newline-delimited decimal text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.scores {
            out.push_str(&format!("{s}\n"));
        }
        out
    }

    pub fn from_text(text: &str, provenance: Provenance) -> Result<Self> {
        let mut scores = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad score line: {line:?}")))?;
            scores.push(v);
        }
        Self::new(scores, provenance)
    }
}

/// Ambiguity-set description for robust conformal prediction.
#[derive(Clone)]
pub enum AmbiguitySpec {
    /// No robustification: vanilla conformal prediction.
    None,
    /// Total-variation f-divergence ball of radius `r`.
    FDivTv { r: f64 },
    /// Generic f-divergence ball of radius `r` with generator `f`.
    FDivGeneric { r: f64, generator: FGenerator },
    /// Levy-Prokhorov ball: local radius `eps` plus global fraction `rho`.
    LevyProkhorov { eps: f64, rho: f64 },
}

impl fmt::Debug for AmbiguitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AmbiguitySpec::None => write!(f, "None"),
            AmbiguitySpec::FDivTv { r } => write!(f, "FDivTv {{ r: {r} }}"),
            AmbiguitySpec::FDivGeneric { r, .. } => write!(f, "FDivGeneric {{ r: {r} }}"),
            AmbiguitySpec::LevyProkhorov { eps, rho } => {
                write!(f, "LevyProkhorov {{ eps: {eps}, rho: {rho} }}")
            }
        }
    }
}

/// A 1-D convex divergence generator with f(1) = 0.
#[derive(Clone)]
pub struct FGenerator(Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl FGenerator {
    pub fn new(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    /// f(u) = |u - 1| / 2.
    pub fn total_variation() -> Self {
        Self::new(|u| 0.5 * (u - 1.0).abs())
    }

    /// f(u) = u ln u, with f(0) = 0 by continuity.
    pub fn kullback_leibler() -> Self {
        Self::new(|u| if u <= 0.0 { 0.0 } else { u * u.ln() })
    }

    pub fn eval(&self, u: f64) -> f64 {
        (self.0)(u)
    }
}

/// Result of a quantile computation.
///
/// When `infinite` is set the requested level exceeded 1 and no finite score
/// can certify coverage: the region is unbounded and downstream constraint
/// construction must report infeasibility rather than clamping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuantileResult {
    pub c_nominal: f64,
    pub c_robust: f64,
    pub delta_correction: f64,
    pub effective_level: f64,
    pub infinite: bool,
}

impl QuantileResult {
    fn unbounded(c_nominal: f64, level: f64) -> Self {
        Self {
            c_nominal,
            c_robust: f64::INFINITY,
            delta_correction: f64::INFINITY,
            effective_level: level,
            infinite: true,
        }
    }
}

/// Tolerance for snapping `K * level` to an integer before taking the
/// ceiling, so that levels that are exact rationals (e.g. 0.9 * 20) do not
/// get bumped one order statistic up by float noise.
const INDEX_SNAP: f64 = 1e-9;

/// 1-indexed order statistic for the right-continuous empirical quantile:
/// ceil(K * level). `None` when the level requires more than K samples.
fn quantile_index(k: usize, level: f64) -> Option<usize> {
    let x = k as f64 * level;
    let nearest = x.round();
    let idx = if (x - nearest).abs() <= INDEX_SNAP * x.abs().max(1.0) {
        nearest as i64
    } else {
        x.ceil() as i64
    };
    let idx = idx.max(1);
    if idx as usize > k {
        None
    } else {
        Some(idx as usize)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) || !delta.is_finite() {
        return Err(Error::InvalidDelta(delta));
    }
    Ok(())
}

fn check_radius(r: f64) -> Result<()> {
    if !r.is_finite() || r < 0.0 {
        return Err(Error::InvalidRadius(r));
    }
    Ok(())
}

/// Corrected (1-delta)-quantile of the calibration scores: the
/// ceil((K+1)(1-delta))-th smallest score.
pub fn vanilla_quantile(scores: &ScoreSet, delta: f64) -> Result<QuantileResult> {
    check_delta(delta)?;
    let k = scores.len();
    let level = (1.0 + 1.0 / k as f64) * (1.0 - delta);
    match quantile_index(k, level) {
        Some(idx) => {
            let c = scores.order_statistic(idx);
            Ok(QuantileResult {
                c_nominal: c,
                c_robust: c,
                delta_correction: 0.0,
                effective_level: level,
                infinite: false,
            })
        }
        None => Ok(QuantileResult::unbounded(f64::INFINITY, level)),
    }
}

/// Shared level pipeline for the f-divergence lemma, parameterized by the
/// pair (g, g^{-1}).
fn fdiv_pipeline(
    scores: &ScoreSet,
    delta: f64,
    g: &dyn Fn(f64) -> Result<f64>,
    g_inv: &dyn Fn(f64) -> Result<f64>,
) -> Result<QuantileResult> {
    let k = scores.len();
    let nominal = vanilla_quantile(scores, delta)?;

    let ginv1 = g_inv(1.0 - delta)?;
    let inner = (1.0 + 1.0 / k as f64) * ginv1;
    if inner > 1.0 + INDEX_SNAP {
        return Ok(QuantileResult::unbounded(nominal.c_nominal, inner));
    }
    let delta_k = 1.0 - g(inner.min(1.0))?;
    let level = g_inv((1.0 - delta_k).clamp(0.0, 1.0))?; // 1 - delta_tilde
    match quantile_index(k, level) {
        Some(idx) => {
            let c_rob = scores.order_statistic(idx);
            Ok(QuantileResult {
                c_nominal: nominal.c_nominal,
                c_robust: c_rob,
                delta_correction: c_rob - nominal.c_nominal,
                effective_level: level,
                infinite: false,
            })
        }
        None => Ok(QuantileResult::unbounded(nominal.c_nominal, level)),
    }
}

/// Robust quantile under a total-variation ball, using the closed forms
/// g(beta) = max(0, beta - r) and g^{-1}(tau) = min(1, tau + r).
pub fn robust_quantile_fdiv_tv(scores: &ScoreSet, delta: f64, r: f64) -> Result<QuantileResult> {
    check_delta(delta)?;
    check_radius(r)?;
    let g = move |beta: f64| -> Result<f64> { Ok((beta - r).max(0.0)) };
    let g_inv = move |tau: f64| -> Result<f64> { Ok((tau + r).min(1.0)) };
    fdiv_pipeline(scores, delta, &g, &g_inv)
}

const BISECT_TOL: f64 = 1e-9;
const BISECT_MAX_ITER: usize = 200;

/// Two-point divergence beta*f(z/beta) + (1-beta)*f((1-z)/(1-beta)).
fn two_point_divergence(f: &FGenerator, beta: f64, z: f64) -> f64 {
    let beta = beta.clamp(1e-12, 1.0 - 1e-12);
    beta * f.eval(z / beta) + (1.0 - beta) * f.eval((1.0 - z) / (1.0 - beta))
}

/// g(beta) = inf { z in [0,1] : two_point_divergence(beta, z) <= r }.
///
/// The divergence is convex in z with minimum 0 at z = beta, so the feasible
/// set is an interval containing beta and the infimum lies in [0, beta].
fn g_generic(f: &FGenerator, r: f64, beta: f64) -> Result<f64> {
    let beta = beta.clamp(0.0, 1.0);
    if two_point_divergence(f, beta, 0.0) <= r {
        return Ok(0.0);
    }
    // Divergence is nonincreasing on [0, beta]: bisect for the crossing.
    let mut lo = 0.0; // divergence > r
    let mut hi = beta; // divergence <= r (it is 0 at beta)
    for _ in 0..BISECT_MAX_ITER {
        if hi - lo <= BISECT_TOL {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if two_point_divergence(f, beta, mid) <= r {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::BisectionFailed {
        max_iter: BISECT_MAX_ITER,
        residual: hi - lo,
    })
}

/// g^{-1}(tau) = sup { beta in [0,1] : g(beta) <= tau }, by bisection on
/// beta (g is nondecreasing).
fn g_inv_generic(f: &FGenerator, r: f64, tau: f64) -> Result<f64> {
    if g_generic(f, r, 1.0)? <= tau {
        return Ok(1.0);
    }
    let mut lo = 0.0; // g(lo) <= tau (g(0) = 0)
    let mut hi = 1.0; // g(hi) > tau
    for _ in 0..BISECT_MAX_ITER {
        if hi - lo <= BISECT_TOL {
            return Ok(lo);
        }
        let mid = 0.5 * (lo + hi);
        if g_generic(f, r, mid)? <= tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::BisectionFailed {
        max_iter: BISECT_MAX_ITER,
        residual: hi - lo,
    })
}

/// Robust quantile under a generic f-divergence ball; g and g^{-1} are
/// evaluated by one-dimensional bisection.
pub fn robust_quantile_fdiv_generic(
    scores: &ScoreSet,
    delta: f64,
    r: f64,
    generator: &FGenerator,
) -> Result<QuantileResult> {
    check_delta(delta)?;
    check_radius(r)?;
    let g = move |beta: f64| g_generic(generator, r, beta);
    let g_inv = move |tau: f64| g_inv_generic(generator, r, tau);
    fdiv_pipeline(scores, delta, &g, &g_inv)
}

/// Robust quantile under a Levy-Prokhorov ball: the level shifts to
/// 1 - beta + rho with beta = delta + (delta - rho - 2)/K, and the local
/// radius `eps` is added to the selected order statistic.
pub fn robust_quantile_lp(
    scores: &ScoreSet,
    delta: f64,
    eps_lp: f64,
    rho_lp: f64,
) -> Result<QuantileResult> {
    check_delta(delta)?;
    check_radius(eps_lp)?;
    if !rho_lp.is_finite() || rho_lp < 0.0 || rho_lp >= 1.0 {
        return Err(Error::InvalidRho(rho_lp));
    }
    let k = scores.len();
    let nominal = vanilla_quantile(scores, delta)?;
    let beta = delta + (delta - rho_lp - 2.0) / k as f64;
    let level = 1.0 - beta + rho_lp;
    match quantile_index(k, level) {
        Some(idx) => {
            let c_rob = scores.order_statistic(idx) + eps_lp;
            Ok(QuantileResult {
                c_nominal: nominal.c_nominal,
                c_robust: c_rob,
                delta_correction: c_rob - nominal.c_nominal,
                effective_level: level,
                infinite: false,
            })
        }
        None => Ok(QuantileResult::unbounded(nominal.c_nominal, level)),
    }
}

/// Dispatch on an [`AmbiguitySpec`].
pub fn robust_quantile(
    scores: &ScoreSet,
    delta: f64,
    spec: &AmbiguitySpec,
) -> Result<QuantileResult> {
    match spec {
        AmbiguitySpec::None => vanilla_quantile(scores, delta),
        AmbiguitySpec::FDivTv { r } => robust_quantile_fdiv_tv(scores, delta, *r),
        AmbiguitySpec::FDivGeneric { r, generator } => {
            robust_quantile_fdiv_generic(scores, delta, *r, generator)
        }
        AmbiguitySpec::LevyProkhorov { eps, rho } => {
            robust_quantile_lp(scores, delta, *eps, *rho)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn set(scores: Vec<f64>) -> ScoreSet {
        ScoreSet::new(scores, Provenance::RealCalibration).unwrap()
    }

    fn grid(k: usize) -> ScoreSet {
        set((1..=k).map(|i| i as f64 / k as f64).collect())
    }

    /// Independent sort-and-count oracle: smallest score x such that the
    /// fraction of scores <= x is at least `level`; None when even the max
    /// falls short of the level.
    fn oracle_quantile(scores: &[f64], level: f64) -> Option<f64> {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = sorted.len() as f64;
        for (i, &x) in sorted.iter().enumerate() {
            if (i + 1) as f64 / k >= level - 1e-12 {
                return Some(x);
            }
        }
        None
    }

    #[test]
    fn vanilla_examples() {
        // K=10, step 0.5, delta=0.2 -> level 0.88 -> 9th smallest = 4.5.
        let s = set((1..=10).map(|i| i as f64 * 0.5).collect());
        let q = vanilla_quantile(&s, 0.2).unwrap();
        assert!(!q.infinite);
        assert!((q.effective_level - 0.88).abs() < 1e-12);
        assert_eq!(q.c_nominal, 4.5);

        // K=5, delta=0.1 -> level 1.08 -> infinite.
        let s = set(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let q = vanilla_quantile(&s, 0.1).unwrap();
        assert!(q.infinite);

        // Degenerate distribution.
        let s = set(vec![2.0; 7]);
        let q = vanilla_quantile(&s, 0.3).unwrap();
        assert!(!q.infinite);
        assert_eq!(q.c_nominal, 2.0);
    }

    #[test]
    fn vanilla_rejects_bad_delta() {
        let s = set(vec![1.0]);
        assert!(vanilla_quantile(&s, 0.0).is_err());
        assert!(vanilla_quantile(&s, 1.0).is_err());
        assert!(vanilla_quantile(&s, -0.2).is_err());
        assert!(vanilla_quantile(&s, f64::NAN).is_err());
    }

    #[test]
    fn tv_worked_example() {
        // K=100 scores 0.01..1.00, delta=0.1, r=0.05:
        // g^{-1}(0.9)=0.95, delta_K=0.0905, level=0.9595, index 96 -> 0.96.
        let s = grid(100);
        let q = robust_quantile_fdiv_tv(&s, 0.1, 0.05).unwrap();
        assert!(!q.infinite);
        assert!((q.effective_level - 0.9595).abs() < 1e-12);
        assert!((q.c_robust - 0.96).abs() < 1e-12);
        assert!((q.delta_correction - (q.c_robust - q.c_nominal)).abs() < 1e-15);
    }

    #[test]
    fn tv_zero_radius_reduces_to_vanilla() {
        for k in [10usize, 37, 100] {
            let s = grid(k);
            for delta in [0.05, 0.1, 0.25, 0.4] {
                let v = vanilla_quantile(&s, delta).unwrap();
                let r = robust_quantile_fdiv_tv(&s, delta, 0.0).unwrap();
                assert_eq!(v.infinite, r.infinite, "k={k} delta={delta}");
                if !v.infinite {
                    assert_eq!(v.c_nominal, r.c_robust, "k={k} delta={delta}");
                }
            }
        }
    }

    #[test]
    fn tv_saturates_to_infinite() {
        let s = grid(100);
        // 1 - delta + r >= 1 forces the inner level above 1.
        let q = robust_quantile_fdiv_tv(&s, 0.1, 0.2).unwrap();
        assert!(q.infinite);
    }

    #[test]
    fn generic_tv_matches_closed_form() {
        let s = grid(100);
        let f = FGenerator::total_variation();
        for (delta, r) in [(0.1, 0.05), (0.2, 0.01), (0.05, 0.02), (0.3, 0.0)] {
            let closed = robust_quantile_fdiv_tv(&s, delta, r).unwrap();
            let gen = robust_quantile_fdiv_generic(&s, delta, r, &f).unwrap();
            assert_eq!(closed.infinite, gen.infinite);
            if !closed.infinite {
                assert!(
                    (closed.c_robust - gen.c_robust).abs() <= 1e-9,
                    "delta={delta} r={r}: {} vs {}",
                    closed.c_robust,
                    gen.c_robust
                );
                assert!((closed.effective_level - gen.effective_level).abs() <= 1e-6);
            }
        }
    }

    /// Dense-grid oracle for the generic solver: g by scanning z at 1e-6
    /// resolution, g^{-1} by binary search over the 1e-6 beta grid.
    fn oracle_g(f: &FGenerator, r: f64, beta: f64) -> f64 {
        let n = 1_000_000usize;
        let mut lo = 0usize; // first feasible index unknown yet
        // two_point_divergence is nonincreasing on [0, beta]; scan by
        // bisection over grid indices to keep the oracle fast but still
        // grid-exact.
        let zb = (beta * n as f64).floor() as usize;
        if two_point_divergence(f, beta, 0.0) <= r {
            return 0.0;
        }
        let mut hi = zb; // feasible (divergence ~ 0 at beta)
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            let z = mid as f64 / n as f64;
            if two_point_divergence(f, beta, z) <= r {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi as f64 / n as f64
    }

    fn oracle_g_inv(f: &FGenerator, r: f64, tau: f64) -> f64 {
        let n = 1_000_000usize;
        if oracle_g(f, r, 1.0) <= tau {
            return 1.0;
        }
        let mut lo = 0usize; // g(0)=0 <= tau
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if oracle_g(f, r, mid as f64 / n as f64) <= tau {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo as f64 / n as f64
    }

    #[test]
    fn generic_kl_matches_grid_oracle() {
        let s = grid(100);
        let f = FGenerator::kullback_leibler();
        let (delta, r) = (0.1, 0.01);
        let k = s.len() as f64;

        let ginv1 = oracle_g_inv(&f, r, 1.0 - delta);
        let inner = (1.0 + 1.0 / k) * ginv1;
        assert!(inner <= 1.0);
        let delta_k = 1.0 - oracle_g(&f, r, inner);
        let level = oracle_g_inv(&f, r, 1.0 - delta_k);
        let expected = oracle_quantile(s.scores(), level).unwrap();

        let q = robust_quantile_fdiv_generic(&s, delta, r, &f).unwrap();
        assert!(!q.infinite);
        assert_eq!(q.c_robust, expected);
        assert!((q.effective_level - level).abs() < 1e-5);
    }

    #[test]
    fn generic_zero_radius_reduces_to_vanilla() {
        let s = grid(50);
        let f = FGenerator::kullback_leibler();
        let v = vanilla_quantile(&s, 0.2).unwrap();
        let q = robust_quantile_fdiv_generic(&s, 0.2, 0.0, &f).unwrap();
        assert_eq!(v.c_nominal, q.c_robust);
    }

    #[test]
    fn lp_worked_example() {
        // delta=0.1, rho=0.05, eps=0.1, K=100 -> beta=0.0805, level=0.9695,
        // index 97 -> 0.97 + 0.1 = 1.07.
        let s = grid(100);
        let q = robust_quantile_lp(&s, 0.1, 0.1, 0.05).unwrap();
        assert!(!q.infinite);
        assert!((q.effective_level - 0.9695).abs() < 1e-12);
        assert!((q.c_robust - 1.07).abs() < 1e-12);
    }

    #[test]
    fn lp_zero_radii_dominates_vanilla() {
        for k in [50usize, 100, 400] {
            let s = grid(k);
            for delta in [0.1, 0.2, 0.3] {
                let v = vanilla_quantile(&s, delta).unwrap();
                let q = robust_quantile_lp(&s, delta, 0.0, 0.0).unwrap();
                if !q.infinite {
                    let lp_level = q.effective_level;
                    let van_level = v.effective_level;
                    assert!(lp_level >= van_level - 1e-12);
                    assert!(q.c_robust >= v.c_nominal);
                }
            }
        }
    }

    #[test]
    fn lp_rho_at_delta_is_infinite() {
        let s = grid(100);
        let q = robust_quantile_lp(&s, 0.1, 0.0, 0.1).unwrap();
        assert!(q.infinite);
        let q = robust_quantile_lp(&s, 0.1, 0.0, 0.3).unwrap();
        assert!(q.infinite);
    }

    #[test]
    fn oracle_equivalence_small_k() {
        // All quantile kinds vs the sort-and-count oracle, K <= 20.
        let mut rng = crate::seed::rng(11);
        for k in 1..=20usize {
            let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..10.0)).collect();
            let s = set(scores);
            for step in 1..=10usize {
                let delta = 0.05 * step as f64;
                let v = vanilla_quantile(&s, delta).unwrap();
                let level = (1.0 + 1.0 / k as f64) * (1.0 - delta);
                match oracle_quantile(s.scores(), level) {
                    Some(x) => {
                        assert!(!v.infinite, "k={k} delta={delta}");
                        assert_eq!(v.c_nominal, x, "k={k} delta={delta}");
                    }
                    None => assert!(v.infinite, "k={k} delta={delta}"),
                }

                for r in [0.0, 0.02, 0.07] {
                    let q = robust_quantile_fdiv_tv(&s, delta, r).unwrap();
                    if !q.infinite {
                        let x = oracle_quantile(s.scores(), q.effective_level).unwrap();
                        assert_eq!(q.c_robust, x, "tv k={k} delta={delta} r={r}");
                    }
                }

                for (eps, rho) in [(0.0, 0.0), (0.1, 0.0), (0.05, 0.02)] {
                    let q = robust_quantile_lp(&s, delta, eps, rho).unwrap();
                    let beta = delta + (delta - rho - 2.0) / k as f64;
                    match oracle_quantile(s.scores(), 1.0 - beta + rho) {
                        Some(x) => {
                            assert!(!q.infinite);
                            assert_eq!(q.c_robust, x + eps, "lp k={k} delta={delta}");
                        }
                        None => assert!(q.infinite, "lp k={k} delta={delta}"),
                    }
                }
            }
        }
    }

    #[test]
    fn monotone_in_radii() {
        let s = grid(200);
        let delta = 0.1;
        let mut prev = 0.0;
        for i in 0..12 {
            let r = 0.01 * i as f64;
            let q = robust_quantile_fdiv_tv(&s, delta, r).unwrap();
            if q.infinite {
                break;
            }
            assert!(q.c_robust >= prev, "tv not monotone at r={r}");
            prev = q.c_robust;
        }
        let mut prev = 0.0;
        for i in 0..10 {
            let eps = 0.05 * i as f64;
            let q = robust_quantile_lp(&s, delta, eps, 0.0).unwrap();
            assert!(q.c_robust >= prev);
            prev = q.c_robust;
        }
        let mut prev = 0.0;
        for i in 0..8 {
            let rho = 0.01 * i as f64;
            let q = robust_quantile_lp(&s, delta, 0.0, rho).unwrap();
            if q.infinite {
                break;
            }
            assert!(q.c_robust >= prev);
            prev = q.c_robust;
        }
    }

    #[test]
    fn vanilla_coverage_law() {
        // K calibration + 1 test i.i.d. continuous: coverage of the corrected
        // quantile lands in [1-delta, 1-delta+1/(K+1)].
        let mut rng = crate::seed::rng(202);
        let (k, delta, reps) = (100usize, 0.1, 3000usize);
        let mut hits = 0usize;
        for _ in 0..reps {
            let scores: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powf(0.7)).collect();
            let test: f64 = rng.gen::<f64>().powf(0.7);
            let q = vanilla_quantile(&ScoreSet::new(scores, Provenance::Synthetic).unwrap(), delta)
                .unwrap();
            if test <= q.c_nominal {
                hits += 1;
            }
        }
        let cov = hits as f64 / reps as f64;
        assert!(
            cov >= 1.0 - delta - 0.02 && cov <= 1.0 - delta + 1.0 / (k as f64 + 1.0) + 0.02,
            "coverage {cov}"
        );
    }

    #[test]
    fn lp_robust_coverage_under_shift() {
        // Test scores = calibration distribution shifted by +eps on a
        // (1-rho) fraction, arbitrary on a rho fraction: C_rob still covers
        // at level 1-delta.
        let mut rng = crate::seed::rng(303);
        let (k, delta, eps, rho, reps) = (200usize, 0.1, 0.1, 0.02, 4000usize);
        let mut hits = 0usize;
        for _ in 0..reps {
            let scores: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() * 2.0).collect();
            let s = ScoreSet::new(scores, Provenance::Synthetic).unwrap();
            let q = robust_quantile_lp(&s, delta, eps, rho).unwrap();
            assert!(!q.infinite);
            let base: f64 = rng.gen::<f64>() * 2.0;
            let test = if rng.gen::<f64>() < rho {
                q.c_robust + 1.0 // adversarial relocated mass
            } else {
                base + eps
            };
            if test <= q.c_robust {
                hits += 1;
            }
        }
        let cov = hits as f64 / reps as f64;
        assert!(cov >= 1.0 - delta - 0.02, "robust coverage {cov}");
    }

    #[test]
    fn scoreset_validation_and_text_roundtrip() {
        assert!(ScoreSet::new(vec![], Provenance::Synthetic).is_err());
        assert!(ScoreSet::new(vec![-0.1], Provenance::Synthetic).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], Provenance::Synthetic).is_err());

        let s = set(vec![0.3, 0.1, 0.2]);
        assert_eq!(s.scores(), &[0.1, 0.2, 0.3]);
        let text = s.to_text();
        let back = ScoreSet::from_text(&text, Provenance::RealCalibration).unwrap();
        assert_eq!(back.scores(), s.scores());
    }
}
