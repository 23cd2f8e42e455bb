//! Report emission: the summary CSV (one row per env x case x loop), the
//! full JSON report, and exit-code gating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::{ReportGate, StudyConfig};
use super::run::ReportRow;

pub const CSV_HEADER: &str = "env,case,loop,n,coverage,safety,infeasible,mean_ms,p95_ms,r_used";

pub fn write_summary_csv<W: std::io::Write>(rows: &[ReportRow], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.3},{:.3},{:.6}",
            r.env,
            r.case,
            r.loop_mode,
            r.n,
            r.coverage,
            r.safety,
            r.infeasible,
            r.mean_ms,
            r.p95_ms,
            r.r_used
        )?;
    }
    Ok(())
}

pub fn read_summary_csv(path: &std::path::Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new().from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::InvalidConfig(format!("bad csv row: {e}")))?;
        let get = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::InvalidConfig("missing csv column".into()))
        };
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad csv number {s:?}")))
        };
        rows.push(ReportRow {
            env: get(0)?.to_string(),
            case: get(1)?.to_string(),
            loop_mode: get(2)?.to_string(),
            n: get(3)?
                .parse()
                .map_err(|_| Error::InvalidConfig("bad n".into()))?,
            coverage: parse(get(4)?)?,
            safety: parse(get(5)?)?,
            infeasible: parse(get(6)?)?,
            mean_ms: parse(get(7)?)?,
            p95_ms: parse(get(8)?)?,
            r_used: parse(get(9)?)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub rows: Vec<ReportRow>,
    pub gate_failures: Vec<String>,
}

/// Evaluate the configured gates against the rows; returns failure messages.
pub fn evaluate_gates(gates: &[ReportGate], rows: &[ReportRow]) -> Vec<String> {
    let mut failures = Vec::new();
    for gate in gates {
        let matching: Vec<&ReportRow> = rows
            .iter()
            .filter(|r| {
                r.case == gate.case
                    && r.loop_mode == gate.loop_mode
                    && (gate.env == "all" || r.env == gate.env)
            })
            .collect();
        if matching.is_empty() {
            failures.push(format!(
                "gate {}/{}/{}: no matching rows",
                gate.case, gate.loop_mode, gate.env
            ));
            continue;
        }
        for r in matching {
            if let Some(min) = gate.min_coverage {
                if r.coverage < min {
                    failures.push(format!(
                        "env {} case {} {}: coverage {:.3} < {min}",
                        r.env, r.case, r.loop_mode, r.coverage
                    ));
                }
            }
            if let Some(max) = gate.max_coverage {
                if r.coverage > max {
                    failures.push(format!(
                        "env {} case {} {}: coverage {:.3} > {max}",
                        r.env, r.case, r.loop_mode, r.coverage
                    ));
                }
            }
            if let Some(min) = gate.min_safety {
                if r.safety < min {
                    failures.push(format!(
                        "env {} case {} {}: safety {:.3} < {min}",
                        r.env, r.case, r.loop_mode, r.safety
                    ));
                }
            }
        }
    }
    failures
}

/// Write report.csv and report.json; returns the gate failures.
pub fn emit_report(
    config: &StudyConfig,
    master_seed: u64,
    rows: &[ReportRow],
    out_dir: &std::path::Path,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("report.csv");
    let file = std::fs::File::create(&csv_path)?;
    write_summary_csv(rows, std::io::BufWriter::new(file))?;
    let failures = evaluate_gates(&config.run.gates, rows);
    let report = FullReport {
        config_hash: config.hash(),
        master_seed,
        rows: rows.to_vec(),
        gate_failures: failures.clone(),
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_run_produces_header_only_csv() {
        let mut buf = Vec::new();
        write_summary_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn csv_roundtrip_and_column_contract() {
        let rows = vec![ReportRow {
            env: "3".into(),
            case: "2".into(),
            loop_mode: "closed".into(),
            n: 200,
            coverage: 0.915,
            safety: 0.98,
            infeasible: 0.01,
            mean_ms: 120.5,
            p95_ms: 300.25,
            r_used: 0.42,
        }];
        let mut buf = Vec::new();
        write_summary_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("env,case,loop,n,coverage,safety,infeasible,mean_ms,p95_ms,r_used\n"));
        let dir = std::env::temp_dir().join("driftplan-report-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rows.csv");
        std::fs::write(&path, &text).unwrap();
        let back = read_summary_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].env, "3");
        assert_eq!(back[0].n, 200);
        assert!((back[0].coverage - 0.915).abs() < 1e-9);
    }

    #[test]
    fn gates_fire_on_violations() {
        let rows = vec![ReportRow {
            env: "9".into(),
            case: "2".into(),
            loop_mode: "closed".into(),
            n: 10,
            coverage: 0.5,
            safety: 0.99,
            infeasible: 0.0,
            mean_ms: 1.0,
            p95_ms: 1.0,
            r_used: 0.0,
        }];
        let gates = vec![ReportGate {
            case: "2".into(),
            loop_mode: "closed".into(),
            env: "all".into(),
            min_coverage: Some(0.85),
            min_safety: Some(0.9),
            max_coverage: None,
        }];
        let failures = evaluate_gates(&gates, &rows);
        assert_eq!(failures.len(), 1);
        assert!(failures[0].contains("coverage"));
    }
}
