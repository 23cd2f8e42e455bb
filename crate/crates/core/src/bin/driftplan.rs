//! Study CLI: data generation, diffusion training, sigma fitting, shift
//! estimation, case execution, the nuisance sweep, and report emission.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use driftplan::diffusion::ContextVector;
use driftplan::harness::data::{self, paths};
use driftplan::harness::{
    self, run_case, CaseId, CaseSpec, LoopMode, ReportRow, StudyConfig, HELDOUT_ENVS,
};
use driftplan::seed;
use driftplan::shift::{analytic_w2_bound, estimate_l2, BoundIngredients};
use driftplan::sim::EnvKind;

#[derive(Parser)]
#[command(name = "driftplan", version, about = "Robust conformal prediction regions for safe corridor planning")]
struct Cli {
    /// Study configuration (JSON); defaults to the built-in study config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every random quantity derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for artifacts, runs, and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll training data: predictor fit, diffusion rows, per-env datasets.
    GenData,
    /// Train the conditional diffusion model on the generated rows.
    TrainDiffusion,
    /// Fit the sigma tables and the real calibration score sets.
    FitSigma,
    /// Per seen environment: noise-MSE, score-regularity, and the analytic
    /// bound; writes audit CSVs.
    EstimateShift,
    /// Run one experiment cell (case x environment x loop).
    Run {
        /// Case id: 0 | 1 | 2 | 3.
        #[arg(long)]
        case: String,
        /// Environment: 1..10 or "train".
        #[arg(long)]
        env: String,
        /// Loop mode: open | closed.
        #[arg(long, value_name = "MODE", default_value = "closed")]
        r#loop: String,
        /// Episodes; defaults to the config's episodes_per_cell.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Wasserstein-vs-nuisance sweep over held-out environments.
    SweepW2 {
        /// Environment to probe; default sweeps every held-out one.
        #[arg(long)]
        env: Option<usize>,
        /// Synthetic draws per (eta, lookahead).
        #[arg(long, default_value_t = 2000)]
        draws: usize,
        /// Real episodes sampled from the probed environment.
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Fixed observation step.
        #[arg(long, default_value_t = 20)]
        t_fixed: usize,
    },
    /// Merge run rows into report.csv / report.json and evaluate gates.
    Report,
}

fn parse_env(s: &str) -> anyhow::Result<EnvKind> {
    if s == "train" {
        return Ok(EnvKind::Train);
    }
    let k: usize = s.parse().context("environment must be 1..10 or 'train'")?;
    if !(1..=10).contains(&k) {
        bail!("environment index {k} out of range");
    }
    Ok(EnvKind::Test(k))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => StudyConfig::load(path)?,
        None => StudyConfig::default(),
    };
    let out = cli.out.clone();
    let master_seed = cli.seed;

    match cli.command {
        Command::GenData => {
            log::info!("generating data into {}", out.display());
            data::generate_and_save_data(&cfg, &out, master_seed)?;
            log::info!("done: predictor, diffusion rows, env datasets");
        }
        Command::TrainDiffusion => {
            log::info!("training diffusion model");
            data::train_and_save_model(&cfg, &out, master_seed)?;
            log::info!("model written to {}", paths::model(&out).display());
        }
        Command::FitSigma => {
            log::info!("fitting sigma tables and real calibration sets");
            data::fit_and_save_sigma(&cfg, &out, master_seed)?;
        }
        Command::EstimateShift => {
            let artifacts = data::load_artifacts(&cfg, &out, master_seed)?;
            let dir = paths::shift_dir(&out);
            std::fs::create_dir_all(&dir)?;
            let mut summary = Vec::new();
            for env in &artifacts.seen_envs {
                let e = artifacts
                    .model
                    .noise_mse_on(&env.validation, seed::derive(master_seed, "shift-e"));
                let c = ContextVector::new(
                    env.eta_mean,
                    cfg.sim.episode_len / 2,
                    cfg.sim.horizon / 2 + 1,
                    1,
                );
                let l2 = estimate_l2(
                    &artifacts.model,
                    &c,
                    cfg.shift.l2_pairs_per_step,
                    seed::derive(master_seed, "shift-l2"),
                );
                let ing = BoundIngredients::from_model_stats(&artifacts.model.schedule, e, l2)?;
                let est = analytic_w2_bound(&ing, &artifacts.model.schedule)?;
                let eps_w = est.value * artifacts.model.target_stats.std;
                let r_closed =
                    driftplan::shift::propagate_to_radius(eps_w, &artifacts.sigma_closed);
                let csv_path = dir.join(format!("ingredients_env{}.csv", env.k));
                let file = std::fs::File::create(&csv_path)?;
                ing.write_csv(&artifacts.model.schedule, std::io::BufWriter::new(file))?;
                log::info!(
                    "env {}: bound {:.4} (std units), eps_w {:.5} m, r {:.4}",
                    env.k,
                    est.value,
                    eps_w,
                    r_closed
                );
                summary.push(serde_json::json!({
                    "env": env.k,
                    "eta_mean": env.eta_mean,
                    "bound_std_units": est.value,
                    "eps_w_m": eps_w,
                    "r_closed": r_closed,
                }));
            }
            std::fs::write(
                dir.join("summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
        }
        Command::Run {
            case,
            env,
            r#loop,
            episodes,
        } => {
            let spec = CaseSpec {
                case: CaseId::from_label(&case)?,
                loop_mode: LoopMode::from_label(&r#loop)?,
            };
            let env_kind = parse_env(&env)?;
            let episodes = episodes.unwrap_or(cfg.run.episodes_per_cell);
            let artifacts = data::load_artifacts(&cfg, &out, master_seed)?;
            log::info!(
                "running case {} {} on env {env_kind} ({episodes} episodes)",
                spec.case.label(),
                spec.loop_mode.label()
            );
            let result = run_case(&artifacts, &spec, env_kind, episodes, master_seed)?;
            let runs = paths::runs_dir(&out);
            std::fs::create_dir_all(&runs)?;
            let stem = format!(
                "env{}_case{}_{}",
                env_kind,
                spec.case.label(),
                spec.loop_mode.label()
            );
            let row_path = runs.join(format!("row_{stem}.csv"));
            let file = std::fs::File::create(&row_path)?;
            harness::write_summary_csv(
                std::slice::from_ref(&result.row),
                std::io::BufWriter::new(file),
            )?;
            let episodes_path = runs.join(format!("episodes_{stem}.json"));
            std::fs::write(&episodes_path, serde_json::to_string(&result.outcomes)?)?;
            if cfg.run.write_traces {
                let tdir = paths::traces_dir(&out);
                std::fs::create_dir_all(&tdir)?;
                for trace in &result.traces {
                    let path = tdir.join(format!("trace_{stem}_ep{}.json", trace.seed));
                    std::fs::write(&path, serde_json::to_string(trace)?)?;
                }
            }
            log::info!(
                "coverage {:.3} safety {:.3} infeasible {:.3} mean {:.1} ms p95 {:.1} ms",
                result.row.coverage,
                result.row.safety,
                result.row.infeasible,
                result.row.mean_ms,
                result.row.p95_ms
            );
        }
        Command::SweepW2 {
            env,
            draws,
            episodes,
            t_fixed,
        } => {
            let artifacts = data::load_artifacts(&cfg, &out, master_seed)?;
            let envs: Vec<usize> = match env {
                Some(k) => vec![k],
                None => HELDOUT_ENVS.to_vec(),
            };
            // Sweep the measured nuisance range of the seen environments.
            let etas: Vec<f64> = artifacts.seen_envs.iter().map(|e| e.eta_mean).collect();
            let (lo, hi) = (
                etas.iter().cloned().fold(f64::INFINITY, f64::min) * 0.9,
                etas.iter().cloned().fold(0.0f64, f64::max) * 1.1,
            );
            let grid: Vec<f64> = (0..12)
                .map(|i| lo + (hi - lo) * i as f64 / 11.0)
                .collect();
            let tau_set = [2usize, 5, 8, 10];
            let dir = paths::shift_dir(&out);
            std::fs::create_dir_all(&dir)?;
            for k in envs {
                let res = harness::w2_vs_nuisance_sweep(
                    &artifacts,
                    k,
                    &grid,
                    t_fixed,
                    &tau_set,
                    draws,
                    episodes,
                    master_seed,
                )?;
                let path = dir.join(format!("w2_sweep_env{k}.csv"));
                let mut buf = String::from("eta,tau,w2\n");
                for row in &res.rows {
                    buf.push_str(&format!("{},{},{}\n", row.eta, row.tau, row.w2));
                }
                std::fs::write(&path, buf)?;
                log::info!(
                    "env {k}: measured eta {:.5}, argmin eta {:.5}",
                    res.eta_measured,
                    res.argmin_eta
                );
            }
        }
        Command::Report => {
            let runs = paths::runs_dir(&out);
            let mut rows: Vec<ReportRow> = Vec::new();
            if runs.is_dir() {
                let mut files: Vec<_> = std::fs::read_dir(&runs)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| {
                        p.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with("row_") && n.ends_with(".csv"))
                    })
                    .collect();
                files.sort();
                for path in files {
                    rows.extend(harness::report::read_summary_csv(&path)?);
                }
            }
            let failures =
                harness::emit_report(&cfg, master_seed, &rows, &paths::report_dir(&out))?;
            for f in &failures {
                log::error!("gate failure: {f}");
            }
            println!(
                "report written: {} rows, {} gate failures",
                rows.len(),
                failures.len()
            );
            if !failures.is_empty() {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
