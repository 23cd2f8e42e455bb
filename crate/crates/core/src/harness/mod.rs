//! Experiment orchestration: data generation, diffusion training, shift
//! estimation, case execution across the shifted environments, the nuisance
//! sweep, and report emission.

pub mod config;
pub mod data;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{PredictorKind, ReportGate, StudyConfig};
pub use data::{build_artifacts, StudyArtifacts, HELDOUT_ENVS, SEEN_ENVS};
pub use report::{emit_report, evaluate_gates, write_summary_csv};
pub use run::{run_case, CaseId, CaseRunResult, CaseSpec, EpisodeOutcome, LoopMode, ReportRow};
pub use sweep::{w2_vs_nuisance_sweep, SweepResult, SweepRow};
