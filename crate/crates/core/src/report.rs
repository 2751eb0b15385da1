//! Delimited tables and structured summaries for solved policies and Monte
//! Carlo runs. Numbers are written with 17 significant digits so every value
//! round-trips exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cr3bp::{Mat6, Vec6};
use crate::error::{Error, Result};
use crate::montecarlo::{compare_quantiles, MonteCarloReport};
use crate::steering::SteeringSolution;
use crate::stt::DiscretizedPlan;

/// Slack factor for the quantile pass/fail column.
pub const QUANTILE_SLACK: f64 = 1.1;

pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Reads a table written by this module back into a header and numeric rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Parse(format!("{}: '{f}': {e}", path.display()))))
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec6,
    pub covariance: Mat6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSummary {
    pub n_samples: usize,
    pub n_excluded: usize,
    pub seed: u64,
    pub terminal: Moments,
    pub terminal_mardia_skewness: f64,
    pub terminal_mardia_kurtosis: f64,
    pub dv_mean_total: f64,
    pub dv_max_total: f64,
    pub quantile_slack: f64,
    pub quantile_nodes_passing: usize,
    pub max_quantile_ratio: f64,
    pub final_quantile_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub objective: String,
    pub norm_mode: String,
    pub status: String,
    pub objective_value: f64,
    pub mon_objective: f64,
    pub max_position_trace: f64,
    pub terminal_residual: f64,
    pub predicted_terminal: Moments,
    /// Sum over maneuvers of `||u_bar_k||` (nondimensional).
    pub predicted_dv_mean_total: f64,
    pub empirical: Option<EmpiricalSummary>,
}

pub fn summarize(solution: &SteeringSolution, mc: Option<&MonteCarloReport>) -> Summary {
    let last = solution.x_bar.len() - 1;
    let empirical = mc.map(|r| {
        let rows = compare_quantiles(r, QUANTILE_SLACK);
        let t = r.nodes.last().expect("report has nodes");
        Summary::empirical(r, t, &rows)
    });
    Summary {
        objective: solution.kind.tag().into(),
        norm_mode: solution.norm_mode.to_string(),
        status: solution.status.clone(),
        objective_value: solution.objective_value,
        mon_objective: solution.mon.objective,
        max_position_trace: solution.stats.max_pos_trace(),
        terminal_residual: solution.terminal_residual,
        predicted_terminal: Moments {
            mean: solution.x_bar[last],
            covariance: solution.stats.covariance(last),
        },
        predicted_dv_mean_total: solution.u_bar.iter().map(|u| u.norm()).sum(),
        empirical,
    }
}

impl Summary {
    fn empirical(r: &MonteCarloReport, t: &crate::montecarlo::NodeStats, rows: &[crate::montecarlo::QuantileRow]) -> EmpiricalSummary {
        EmpiricalSummary {
            n_samples: r.n_samples,
            n_excluded: r.excluded.len(),
            seed: r.seed,
            terminal: Moments {
                mean: t.mean,
                covariance: t.covariance,
            },
            terminal_mardia_skewness: t.mardia_skewness,
            terminal_mardia_kurtosis: t.mardia_kurtosis,
            dv_mean_total: r.dv.mean_total,
            dv_max_total: r.dv.max_total,
            quantile_slack: QUANTILE_SLACK,
            quantile_nodes_passing: rows.iter().filter(|q| q.pass).count(),
            max_quantile_ratio: rows.iter().map(|q| q.ratio).fold(0.0, f64::max),
            final_quantile_ratio: rows.last().map_or(f64::NAN, |q| q.ratio),
        }
    }
}

/// Writes `quantiles`, `mon`, `dv` tables and the `summary` file for one
/// objective. Empirical columns are omitted when `mc` is `None`.
pub fn emit_report(
    solution: &SteeringSolution,
    mc: Option<&MonteCarloReport>,
    plan: &DiscretizedPlan,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let tag = solution.kind.tag();
    let n = plan.n_nodes();
    let t0 = plan.node_times()[0];
    let revs: Vec<f64> = plan.node_times().iter().map(|t| (t - t0) / plan.orbit.period).collect();
    let stats = &solution.stats;
    let mut written = Vec::new();

    let mut header = vec!["node", "time_revs", "predicted_quant_ub_r", "r_tilde", "predicted_quant_ub_v", "v_tilde"];
    if mc.is_some() {
        header.extend([
            "empirical_quantile_r",
            "ratio_r",
            "empirical_quantile_v",
            "empirical_mean_norm_r",
            "empirical_pos_cov_trace",
            "predicted_pos_cov_trace",
            "mardia_skewness",
            "mardia_kurtosis",
        ]);
    }
    let ratios = mc.map(|r| compare_quantiles(r, QUANTILE_SLACK));
    let rows: Vec<Vec<String>> = (0..n)
        .map(|k| {
            let mut row = vec![
                k.to_string(),
                fmt_num(revs[k]),
                fmt_num(stats.quant_ub_r[k]),
                fmt_num(solution.r_tilde[k]),
                fmt_num(stats.quant_ub_v[k]),
                fmt_num(solution.v_tilde[k]),
            ];
            if let (Some(r), Some(q)) = (mc, &ratios) {
                let s = &r.nodes[k];
                let pos_trace: f64 = (0..3).map(|i| s.covariance[(i, i)]).sum();
                row.extend([
                    fmt_num(s.quantile_r),
                    fmt_num(q[k].ratio),
                    fmt_num(s.quantile_v),
                    fmt_num(s.mean.fixed_rows::<3>(0).norm()),
                    fmt_num(pos_trace),
                    fmt_num(stats.pos_trace[k]),
                    fmt_num(s.mardia_skewness),
                    fmt_num(s.mardia_kurtosis),
                ]);
            }
            row
        })
        .collect();
    let path = out_dir.join(format!("quantiles.{tag}.csv"));
    write_table(&path, &header, &rows)?;
    written.push(path);

    let rows: Vec<Vec<String>> = (0..n)
        .map(|k| {
            vec![
                k.to_string(),
                fmt_num(revs[k]),
                fmt_num(solution.mon.eps_r[k]),
                fmt_num(solution.mon.eps_v[k]),
                fmt_num(solution.mon.blended()[k]),
            ]
        })
        .collect();
    let path = out_dir.join(format!("mon.{tag}.csv"));
    write_table(&path, &["node", "time_revs", "eps_r", "eps_v", "blended"], &rows)?;
    written.push(path);

    let mut header = vec!["node", "time_revs", "u_bar_norm", "control_bound"];
    if mc.is_some() {
        header.push("empirical_mean_dv");
    }
    let rows: Vec<Vec<String>> = (0..n - 1)
        .map(|k| {
            let mut row = vec![
                k.to_string(),
                fmt_num(revs[k]),
                fmt_num(solution.u_bar[k].norm()),
                fmt_num(stats.control_bound[k]),
            ];
            if let Some(r) = mc {
                row.push(fmt_num(r.dv.mean_per_node[k]));
            }
            row
        })
        .collect();
    let path = out_dir.join(format!("dv.{tag}.csv"));
    write_table(&path, &header, &rows)?;
    written.push(path);

    let path = out_dir.join(format!("summary.{tag}.json"));
    write_json(&path, &summarize(solution, mc))?;
    written.push(path);
    Ok(written)
}
