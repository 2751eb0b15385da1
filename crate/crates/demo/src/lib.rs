//! WebAssembly bindings for the browser demo. Every export returns a JSON
//! string; the page in `www/` parses and plots it.

use std::cell::OnceCell;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use nlsteer::cr3bp::{correct_periodic, propagate, time_constant, ReferenceOrbit, Vec6};
use nlsteer::integrate::Tolerances;
use nlsteer::mon::{build_g_coefficients, GCoefficients};
use nlsteer::montecarlo::{compare_quantiles, simulate_closed_loop};
use nlsteer::report::QUANTILE_SLACK;
use nlsteer::scenario::Scenario;
use nlsteer::steering::{
    assemble_blocks, build_program, kalman_schedule, solve, BlockOperators, FilterSchedule, ObjectiveKind, SolverConfig,
};
use nlsteer::stt::{discretize_reference, nonlinear_deviation, series_predict, DiscretizedPlan};
use nlsteer::tensors::NormConfig;
use nlsteer::{Error, Result};

/// Scenario-independent artifacts, built on first use.
struct Precomputed {
    scenario: Scenario,
    orbit: ReferenceOrbit,
    plan: DiscretizedPlan,
    g: GCoefficients,
    filter: FilterSchedule,
    blocks: BlockOperators,
}

thread_local! {
    static STATE: OnceCell<Precomputed> = const { OnceCell::new() };
}

fn precompute() -> Result<Precomputed> {
    let scenario = Scenario::l2_halo();
    let c = scenario.constants();
    let orbit = correct_periodic(&scenario.initial_guess(), scenario.orbit.period_guess, &c, 1e-12)?;
    let plan = discretize_reference(&orbit, scenario.orbit.segments_per_rev, scenario.orbit.revs, &c)?;
    let g = build_g_coefficients(&plan, scenario.tuning.m_star, &NormConfig::default())?;
    let filter = kalman_schedule(&plan, &scenario.measurement_model(), &scenario.p_tilde0())?;
    let blocks = assemble_blocks(&plan, &filter, &scenario.p_hat0())?;
    Ok(Precomputed {
        scenario,
        orbit,
        plan,
        g,
        filter,
        blocks,
    })
}

fn with_state<T>(f: impl FnOnce(&Precomputed) -> Result<T>) -> Result<T> {
    STATE.with(|cell| {
        if cell.get().is_none() {
            let p = precompute()?;
            let _ = cell.set(p);
        }
        f(cell.get().expect("initialized above"))
    })
}

#[derive(Debug, Serialize)]
pub struct OrbitPlot {
    pub period_days: f64,
    pub tau_revs: f64,
    /// Positions in km, rotating frame, barycentric.
    pub trajectory: Vec<[f64; 3]>,
    pub nodes: Vec<[f64; 3]>,
    pub moon: [f64; 3],
}

pub fn orbit_plot_data(samples: usize) -> Result<OrbitPlot> {
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    with_state(|s| {
        let c = s.scenario.constants();
        let km = |v: &Vec6| [c.nd_to_km(v[0]), c.nd_to_km(v[1]), c.nd_to_km(v[2])];
        let mut trajectory = Vec::with_capacity(samples + 1);
        let x0 = s.orbit.initial_state;
        for i in 0..=samples {
            let t = s.orbit.period * i as f64 / samples as f64;
            let x = if i == 0 { x0 } else { propagate(&x0, 0.0, t, &c, Tolerances::default())? };
            trajectory.push(km(&x.to_vec6()));
        }
        let nodes = s.plan.orbit.node_states.iter().map(|x| km(&x.to_vec6())).collect();
        Ok(OrbitPlot {
            period_days: s.orbit.period * c.time_unit / 86400.0,
            tau_revs: time_constant(&s.orbit)?,
            trajectory,
            nodes,
            moon: [c.nd_to_km(1.0 - c.mu), 0.0, 0.0],
        })
    })
}

#[derive(Debug, Serialize)]
pub struct ResidualCurves {
    pub segment: usize,
    /// Deviation magnitudes, km-equivalent position scale (n.d. times the
    /// length unit).
    pub magnitudes_km: Vec<f64>,
    /// Prediction error norms, same scaling.
    pub first_order_km: Vec<f64>,
    pub second_order_km: Vec<f64>,
    pub first_order_slope: f64,
    pub second_order_slope: f64,
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    num / den
}

/// Series prediction error against nonlinear propagation for deviations
/// along a fixed direction, log-spaced from `min_nd` to `max_nd`.
pub fn residual_curve_data(segment: usize, points: usize, min_nd: f64, max_nd: f64) -> Result<ResidualCurves> {
    if points < 2 || !(min_nd > 0.0 && max_nd > min_nd) {
        return Err(Error::invalid("need points >= 2 and 0 < min < max"));
    }
    with_state(|s| {
        let seg = s
            .plan
            .segments
            .get(segment)
            .ok_or_else(|| Error::invalid(format!("segment {segment} out of range")))?;
        let c = s.scenario.constants();
        let dir = Vec6::new(0.5, -0.3, 0.4, 10.0, 5.0, -8.0).normalize();
        let ratio = (max_nd / min_nd).ln();
        let hs: Vec<f64> = (0..points)
            .map(|i| min_nd * (ratio * i as f64 / (points - 1) as f64).exp())
            .collect();
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for h in &hs {
            let dx = dir * *h;
            let truth = nonlinear_deviation(seg, &dx, &c, Tolerances::default())?;
            first.push(c.nd_to_km((series_predict(seg, &dx, 1)? - truth).norm()));
            second.push(c.nd_to_km((series_predict(seg, &dx, 2)? - truth).norm()));
        }
        Ok(ResidualCurves {
            segment,
            magnitudes_km: hs.iter().map(|h| c.nd_to_km(*h)).collect(),
            first_order_slope: slope(&hs, &first),
            second_order_slope: slope(&hs, &second),
            first_order_km: first,
            second_order_km: second,
        })
    })
}

#[derive(Debug, Serialize)]
pub struct QuantileBounds {
    pub objective: String,
    pub status: String,
    pub time_revs: Vec<f64>,
    /// Predicted 0.999 position quantile bound per node, km.
    pub predicted_km: Vec<f64>,
    /// Empirical 0.999 quantile of the true position deviation, km (empty
    /// when no samples were run).
    pub empirical_km: Vec<f64>,
    pub ratio: Vec<f64>,
    pub mon_objective: f64,
    pub max_position_trace_km2: f64,
    pub mean_total_dv_mps: Option<f64>,
}

pub fn quantile_bound_data(objective: &str, u_max_mps: f64, lambda: f64, n_samples: usize, seed: u64) -> Result<QuantileBounds> {
    let kind: ObjectiveKind = objective.parse()?;
    with_state(|s| {
        let mut scenario = s.scenario;
        scenario.constraints.u_max_mps = u_max_mps;
        scenario.tuning.lambda = lambda;
        scenario.run.n_samples = n_samples;
        scenario.run.seed = seed;
        scenario.validate()?;
        let c = scenario.constants();
        let problem = build_program(kind, &s.blocks, &s.filter, &s.g, &scenario.steering_config())?;
        let sol = solve(&problem, &SolverConfig::default())?;
        let t0 = s.plan.node_times()[0];
        let time_revs = s.plan.node_times().iter().map(|t| (t - t0) / s.orbit.period).collect();
        let predicted_km = sol.stats.quant_ub_r.iter().map(|v| c.nd_to_km(*v)).collect();
        let (mut empirical_km, mut ratio, mut dv) = (Vec::new(), Vec::new(), None);
        if n_samples > 0 {
            let cfg = scenario.monte_carlo_config();
            let report = simulate_closed_loop(&sol, &s.plan, &s.filter, &cfg)?;
            empirical_km = report.nodes.iter().map(|n| c.nd_to_km(n.quantile_r)).collect();
            ratio = compare_quantiles(&report, QUANTILE_SLACK).iter().map(|r| r.ratio).collect();
            dv = Some(c.nd_to_mps(report.dv.mean_total));
        }
        Ok(QuantileBounds {
            objective: kind.tag().into(),
            status: sol.status.clone(),
            time_revs,
            predicted_km,
            empirical_km,
            ratio,
            mon_objective: sol.mon.objective,
            max_position_trace_km2: sol.stats.max_pos_trace() * c.length_unit * c.length_unit,
            mean_total_dv_mps: dv,
        })
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Corrected halo orbit sampled at `samples` points per period, with the
/// maneuver nodes.
#[wasm_bindgen]
pub fn orbit_plot(samples: usize) -> std::result::Result<String, JsError> {
    to_js(orbit_plot_data(samples))
}

#[wasm_bindgen]
pub fn residual_curves(segment: usize, points: usize, min_nd: f64, max_nd: f64) -> std::result::Result<String, JsError> {
    to_js(residual_curve_data(segment, points, min_nd, max_nd))
}

/// Solves the steering program with the given thrust limit and blend weight
/// and, when `n_samples > 0`, runs a nonlinear Monte Carlo of the policy.
#[wasm_bindgen]
pub fn quantile_bounds(
    objective: &str,
    u_max_mps: f64,
    lambda: f64,
    n_samples: usize,
    seed: u64,
) -> std::result::Result<String, JsError> {
    to_js(quantile_bound_data(objective, u_max_mps, lambda, n_samples, seed))
}
