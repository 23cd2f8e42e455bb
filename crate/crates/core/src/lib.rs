//! Robust conformal prediction regions for uncontrollable agents, calibrated
//! with synthetic scores from a conditional diffusion model and embedded as
//! tightened collision constraints in a receding-horizon planner.
//!
//! Crate layout mirrors the pipeline:
//! - [`conformal`]: vanilla and robust quantiles over scalar score sets.
//! - [`scores`]: nonconformity scores, sigma normalization, region radii.
//! - [`diffusion`]: conditional diffusion model over scalar targets.
//! - [`shift`]: empirical and analytic distribution-shift estimates.
//! - [`predictor`]: obstacle trajectory predictors.
//! - [`sim`]: two-lane corridor world and ego dynamics.
//! - [`planner`]: penalty-method MPC with tightened constraints.
//! - [`harness`]: experiment orchestration, reports, and the CLI surface.

pub mod conformal;
pub mod diffusion;
pub mod error;
pub mod planner;
pub mod predictor;
pub mod scores;
pub mod seed;
pub mod shift;
pub mod sim;

pub mod harness;

pub use error::{Error, Result};
