//! Closed-loop Monte Carlo: truth integrated with the full dynamics, the
//! linearized filter and the steering policy in the loop.

use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cr3bp::{Mat6, Vec6};
use crate::error::{Error, Result};
use crate::integrate::Tolerances;
use crate::steering::filter::FilterSchedule;
use crate::steering::{control_matrix, psd_factor, SteeringSolution};
use crate::stt::{nonlinear_deviation, DiscretizedPlan};

/// How truth deviations move across a segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Propagation {
    Nonlinear(Tolerances),
    /// `dx_{k+1} = A_k dx_k`; used to check the linear predictions.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Quantile probability is `1 - eps_x`.
    pub eps_x: f64,
    /// Estimate dispersion at node 0 (before the first measurement).
    pub p_hat0: Mat6,
    /// Mean deviation at node 0.
    pub mean0: Vec6,
    pub propagation: Propagation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrajectory {
    /// Pre-maneuver true deviation from the reference at each node.
    pub truth: Vec<Vec6>,
    /// Pre-maneuver estimated deviation after the measurement update.
    pub estimate: Vec<Vec6>,
    /// Applied impulses, one per maneuver node.
    pub dv: Vec<Vector3<f64>>,
}

impl SampleTrajectory {
    /// True deviation after the maneuver at node `k`.
    pub fn truth_post(&self, k: usize) -> Vec6 {
        match self.dv.get(k) {
            Some(u) => self.truth[k] + control_matrix() * u,
            None => self.truth[k],
        }
    }

    pub fn terminal(&self) -> Vec6 {
        *self.truth.last().expect("trajectory has nodes")
    }

    pub fn total_dv(&self) -> f64 {
        self.dv.iter().map(|u| u.norm()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample: usize,
    pub node: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node: usize,
    pub time_revs: f64,
    /// Mean and covariance of the pre-maneuver true deviation.
    pub mean: Vec6,
    pub covariance: Mat6,
    pub estimate_mean: Vec6,
    /// Empirical `1 - eps` quantiles of the post-maneuver deviation norms.
    pub quantile_r: f64,
    pub quantile_v: f64,
    pub predicted_r: f64,
    pub predicted_v: f64,
    pub mardia_skewness: f64,
    pub mardia_kurtosis: f64,
    /// Set when the sample covariance needed a ridge.
    pub mardia_regularized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvSummary {
    pub mean_total: f64,
    pub max_total: f64,
    pub per_sample_total: Vec<f64>,
    /// Mean impulse magnitude at each maneuver node.
    pub mean_per_node: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub seed: u64,
    pub n_samples: usize,
    pub probability: f64,
    pub nodes: Vec<NodeStats>,
    pub dv: DvSummary,
    pub excluded: Vec<SampleFailure>,
}

impl MonteCarloReport {
    pub fn n_used(&self) -> usize {
        self.n_samples - self.excluded.len()
    }
}

fn normal6(rng: &mut ChaCha20Rng) -> Vec6 {
    Vec6::from_fn(|_, _| StandardNormal.sample(rng))
}

struct Loop<'a> {
    solution: &'a SteeringSolution,
    plan: &'a DiscretizedPlan,
    filter: &'a FilterSchedule,
    p_hat0_half: Mat6,
    p_tilde0_half: Mat6,
    mean0: Vec6,
    propagation: Propagation,
}

impl Loop<'_> {
    fn run(&self, seed: u64, index: usize) -> std::result::Result<SampleTrajectory, SampleFailure> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let n = self.plan.n_nodes();
        let m = self.solution.u_bar.len();
        let b = control_matrix();
        let model = &self.filter.model;

        let mut xhat = self.mean0 + self.p_hat0_half * normal6(&mut rng);
        let mut x = xhat + self.p_tilde0_half * normal6(&mut rng);
        let mut z = xhat - self.mean0;
        let mut out = SampleTrajectory {
            truth: Vec::with_capacity(n),
            estimate: Vec::with_capacity(n),
            dv: Vec::with_capacity(m),
        };
        for k in 0..n {
            if k > 0 {
                let seg = &self.plan.segments[k - 1];
                x = match self.propagation {
                    Propagation::Linear => seg.stm * x,
                    Propagation::Nonlinear(tol) => {
                        nonlinear_deviation(seg, &x, &self.plan.constants, tol).map_err(|e| SampleFailure {
                            sample: index,
                            node: k,
                            message: e.to_string(),
                        })?
                    }
                };
                xhat = seg.stm * xhat;
                z = seg.stm * z;
            }
            let y = model.c * x + model.d * normal6(&mut rng);
            let innovation = self.filter.gains[k] * (y - model.c * xhat);
            xhat += innovation;
            z += innovation;
            out.truth.push(x);
            out.estimate.push(xhat);
            if k < m {
                let u = self.solution.u_bar[k] + self.solution.gains[k] * z;
                x += b * u;
                xhat += b * u;
                out.dv.push(u);
            }
        }
        Ok(out)
    }
}

/// Simulates `n_samples` closed-loop trajectories. Sample `i` draws from its
/// own ChaCha stream `i` of the master seed, so results do not depend on
/// scheduling. Failed samples are returned separately, in index order.
pub fn simulate_samples(
    solution: &SteeringSolution,
    plan: &DiscretizedPlan,
    filter: &FilterSchedule,
    cfg: &MonteCarloConfig,
) -> Result<(Vec<SampleTrajectory>, Vec<SampleFailure>)> {
    let n = plan.n_nodes();
    if filter.n_nodes() != n || solution.u_bar.len() + 1 != n || solution.gains.len() + 1 != n {
        return Err(Error::DimensionMismatch {
            context: "monte carlo artifacts",
            expected: n,
            found: filter.n_nodes(),
        });
    }
    let lp = Loop {
        solution,
        plan,
        filter,
        p_hat0_half: psd_factor(&cfg.p_hat0)?,
        p_tilde0_half: psd_factor(&filter.p_minus[0])?,
        mean0: cfg.mean0,
        propagation: cfg.propagation,
    };
    let runs: Vec<_> = (0..cfg.n_samples).into_par_iter().map(|i| lp.run(cfg.seed, i)).collect();
    let mut samples = Vec::with_capacity(runs.len());
    let mut failures = Vec::new();
    for r in runs {
        match r {
            Ok(s) => samples.push(s),
            Err(f) => failures.push(f),
        }
    }
    if !failures.is_empty() {
        log::warn!("{} of {} samples excluded after integration failures", failures.len(), cfg.n_samples);
    }
    Ok((samples, failures))
}

pub fn simulate_closed_loop(
    solution: &SteeringSolution,
    plan: &DiscretizedPlan,
    filter: &FilterSchedule,
    cfg: &MonteCarloConfig,
) -> Result<MonteCarloReport> {
    if cfg.n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if !(cfg.eps_x > 0.0 && cfg.eps_x < 1.0) {
        return Err(Error::invalid(format!("eps_x {} outside (0, 1)", cfg.eps_x)));
    }
    let (samples, excluded) = simulate_samples(solution, plan, filter, cfg)?;
    if samples.is_empty() {
        return Err(Error::Simulation("every sample failed".into()));
    }
    summarize(&samples, excluded, solution, plan, cfg)
}

fn mean_and_cov(xs: &[Vec6]) -> (Vec6, Mat6) {
    let n = xs.len() as f64;
    let mean = xs.iter().fold(Vec6::zeros(), |a, x| a + x) / n;
    let mut cov = Mat6::zeros();
    for x in xs {
        let d = x - mean;
        cov += d * d.transpose();
    }
    (mean, cov / (n - 1.0).max(1.0))
}

/// Builds the per-node report from simulated samples.
pub fn summarize(
    samples: &[SampleTrajectory],
    excluded: Vec<SampleFailure>,
    solution: &SteeringSolution,
    plan: &DiscretizedPlan,
    cfg: &MonteCarloConfig,
) -> Result<MonteCarloReport> {
    let n = plan.n_nodes();
    let p = 1.0 - cfg.eps_x;
    let period = plan.orbit.period;
    let t0 = plan.node_times()[0];
    let mut nodes = Vec::with_capacity(n);
    for k in 0..n {
        let truth: Vec<Vec6> = samples.iter().map(|s| s.truth[k]).collect();
        let est: Vec<Vec6> = samples.iter().map(|s| s.estimate[k]).collect();
        let post: Vec<Vec6> = samples.iter().map(|s| s.truth_post(k)).collect();
        let (mean, covariance) = mean_and_cov(&truth);
        let (estimate_mean, _) = mean_and_cov(&est);
        let rn: Vec<f64> = post.iter().map(|x| x.fixed_rows::<3>(0).norm()).collect();
        let vn: Vec<f64> = post.iter().map(|x| x.fixed_rows::<3>(3).norm()).collect();
        let (skew, kurt, reg) = match gaussianity_stats(&truth) {
            Ok(g) => (g.skewness, g.kurtosis, g.regularized),
            Err(_) => (f64::NAN, f64::NAN, true),
        };
        nodes.push(NodeStats {
            node: k,
            time_revs: (plan.node_times()[k] - t0) / period,
            mean,
            covariance,
            estimate_mean,
            quantile_r: empirical_quantile(&rn, p)?,
            quantile_v: empirical_quantile(&vn, p)?,
            predicted_r: solution.stats.quant_ub_r[k],
            predicted_v: solution.stats.quant_ub_v[k],
            mardia_skewness: skew,
            mardia_kurtosis: kurt,
            mardia_regularized: reg,
        });
    }
    let per_sample_total: Vec<f64> = samples.iter().map(SampleTrajectory::total_dv).collect();
    let count = samples.len() as f64;
    let mean_per_node = (0..n - 1)
        .map(|k| samples.iter().map(|s| s.dv[k].norm()).sum::<f64>() / count)
        .collect();
    Ok(MonteCarloReport {
        seed: cfg.seed,
        n_samples: cfg.n_samples,
        probability: p,
        nodes,
        dv: DvSummary {
            mean_total: per_sample_total.iter().sum::<f64>() / count,
            max_total: per_sample_total.iter().copied().fold(0.0, f64::max),
            per_sample_total,
            mean_per_node,
        },
        excluded,
    })
}

/// Order-statistic quantile with linear interpolation between ranks
/// (`h = (n - 1) p`).
pub fn empirical_quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("empirical quantile of an empty sample"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("quantile probability {p} outside (0, 1)")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussianity {
    /// Mardia `b_{1,d}`.
    pub skewness: f64,
    /// Mardia `b_{2,d}`.
    pub kurtosis: f64,
    pub regularized: bool,
}

const MARDIA_RIDGE: f64 = 1e-12;

/// Mardia's multivariate skewness and kurtosis with the biased sample
/// covariance.
pub fn gaussianity_stats(samples: &[Vec6]) -> Result<Gaussianity> {
    let n = samples.len();
    if n <= 6 {
        return Err(Error::invalid(format!("need more than 6 samples, got {n}")));
    }
    let (mean, cov) = mean_and_cov(samples);
    let cov = cov * ((n - 1) as f64 / n as f64);
    let scale = cov.trace() / 6.0;
    if !(scale > 0.0) {
        return Err(Error::SingularMatrix("sample covariance"));
    }
    let (chol, regularized) = match cov.cholesky() {
        Some(c) => (c, false),
        None => {
            log::warn!("sample covariance is singular; adding a {MARDIA_RIDGE:e} ridge");
            let c = (cov + Mat6::identity() * (MARDIA_RIDGE * scale))
                .cholesky()
                .ok_or(Error::SingularMatrix("sample covariance"))?;
            (c, true)
        }
    };
    // Whitened samples y_i = L^{-1}(x_i - mean); then d_i^T S^-1 d_j = y_i . y_j.
    let cols: Vec<Vec6> = samples.iter().map(|x| x - mean).collect();
    let mut y = DMatrix::from_fn(6, n, |r, c| cols[c][r]);
    chol.l_dirty().solve_lower_triangular_mut(&mut y);
    let gram = y.transpose() * &y;
    let nf = n as f64;
    let skewness = gram.iter().map(|g| g.powi(3)).sum::<f64>() / (nf * nf);
    let kurtosis = gram.diagonal().iter().map(|g| g * g).sum::<f64>() / nf;
    Ok(Gaussianity {
        skewness,
        kurtosis,
        regularized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub node: usize,
    pub time_revs: f64,
    pub predicted: f64,
    pub empirical: f64,
    pub ratio: f64,
    pub pass: bool,
}

/// Empirical over predicted position quantile at each node; `pass` when the
/// ratio is at most `slack`.
pub fn compare_quantiles(report: &MonteCarloReport, slack: f64) -> Vec<QuantileRow> {
    report
        .nodes
        .iter()
        .map(|s| {
            let ratio = if s.predicted_r > 0.0 {
                s.quantile_r / s.predicted_r
            } else if s.quantile_r == 0.0 {
                1.0
            } else {
                f64::INFINITY
            };
            QuantileRow {
                node: s.node,
                time_revs: s.time_revs,
                predicted: s.predicted_r,
                empirical: s.quantile_r,
                ratio,
                pass: ratio <= slack,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mon::GCoefficients;
    use crate::steering::testkit::{diag, plan};
    use crate::steering::{assemble_blocks, build_program, kalman_schedule, solve, MeasurementModel, NormMode, ObjectiveKind, SolverConfig, SteeringConfig};
    use rand::Rng;

    fn steered(p_hat0: Mat6, p_tilde0: Mat6) -> (DiscretizedPlan, FilterSchedule, SteeringSolution) {
        let plan = plan(3, None);
        let filter = kalman_schedule(&plan, &MeasurementModel::full_state(1e-3, 1e-3), &p_tilde0).unwrap();
        let blocks = assemble_blocks(&plan, &filter, &p_hat0).unwrap();
        let cfg = SteeringConfig {
            u_max: 1.0,
            eps_x: 1e-3,
            lambda: 0.5,
            norm_mode: NormMode::Surrogate,
            mean0: Vec6::zeros(),
            target: Vec6::zeros(),
        };
        let g = GCoefficients::zeros(4, 2);
        let sol = solve(&build_program(ObjectiveKind::MinCovariance, &blocks, &filter, &g, &cfg).unwrap(), &SolverConfig::default()).unwrap();
        (plan, filter, sol)
    }

    fn mc_cfg(p_hat0: Mat6, n: usize) -> MonteCarloConfig {
        MonteCarloConfig {
            n_samples: n,
            seed: 7,
            eps_x: 1e-3,
            p_hat0,
            mean0: Vec6::zeros(),
            propagation: Propagation::Linear,
        }
    }

    #[test]
    fn degenerate_dispersions_reproduce_reference() {
        let (plan, mut filter, sol) = steered(diag(0.1, 0.05), diag(0.01, 0.01));
        // No dispersion anywhere: zero initial covariances and no noise.
        filter.p_minus[0] = Mat6::zeros();
        filter.model.d = Mat6::zeros();
        let (samples, failed) = simulate_samples(&sol, &plan, &filter, &mc_cfg(Mat6::zeros(), 20)).unwrap();
        assert!(failed.is_empty());
        for s in &samples {
            assert!(s.truth.iter().chain(&s.estimate).all(|x| *x == Vec6::zeros()));
            assert!(s.dv.iter().all(|u| *u == Vector3::zeros()));
        }
    }

    #[test]
    fn linear_stub_matches_predicted_statistics() {
        let p_hat0 = diag(0.1, 0.05);
        let (plan, filter, sol) = steered(p_hat0, diag(0.01, 0.01));
        let n = 1000;
        let rep = simulate_closed_loop(&sol, &plan, &filter, &mc_cfg(p_hat0, n)).unwrap();
        assert!(rep.excluded.is_empty());
        for (k, node) in rep.nodes.iter().enumerate() {
            let p = sol.stats.covariance(k);
            assert!((node.covariance - p).norm() < 0.15 * p.norm(), "node {k}");
            for i in 0..6 {
                let se = (p[(i, i)] / n as f64).sqrt();
                assert!((node.mean[i] - sol.x_bar[k][i]).abs() < 3.0 * se, "node {k} component {i}");
            }
        }
    }

    #[test]
    fn identical_seed_is_bit_identical() {
        let p_hat0 = diag(0.1, 0.05);
        let (plan, filter, sol) = steered(p_hat0, diag(0.01, 0.01));
        let a = simulate_closed_loop(&sol, &plan, &filter, &mc_cfg(p_hat0, 64)).unwrap();
        let b = simulate_closed_loop(&sol, &plan, &filter, &mc_cfg(p_hat0, 64)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let mut other = mc_cfg(p_hat0, 64);
        other.seed = 8;
        let c = simulate_closed_loop(&sol, &plan, &filter, &other).unwrap();
        assert_ne!(a.nodes[1].mean, c.nodes[1].mean);
    }

    #[test]
    fn quantile_comparison_ratios() {
        let p_hat0 = diag(0.1, 0.05);
        let (plan, filter, sol) = steered(p_hat0, diag(0.01, 0.01));
        let mut rep = simulate_closed_loop(&sol, &plan, &filter, &mc_cfg(p_hat0, 32)).unwrap();
        for node in &mut rep.nodes {
            node.quantile_r = node.predicted_r;
        }
        let rows = compare_quantiles(&rep, 1.0);
        assert!(rows.iter().all(|r| r.ratio == 1.0 && r.pass));
    }

    #[test]
    fn quantile_interpolates_between_ranks() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(empirical_quantile(&v, 0.5).unwrap(), 50.5);
        assert_eq!(empirical_quantile(&[3.25; 7], 0.999).unwrap(), 3.25);
        assert!(empirical_quantile(&[], 0.5).is_err());
        assert!(empirical_quantile(&v, 1.0).is_err());
    }

    #[test]
    fn uniform_quantile_matches_analytic_value() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let q = empirical_quantile(&v, 0.999).unwrap();
        assert!((q - 0.999).abs() < 2e-3, "{q}");
    }

    #[test]
    fn quantile_is_monotone_in_p() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let mut last = f64::NEG_INFINITY;
        for i in 1..100 {
            let q = empirical_quantile(&v, i as f64 / 100.0).unwrap();
            assert!(q >= last);
            last = q;
        }
    }

    fn gaussian_samples(n: usize, seed: u64) -> Vec<Vec6> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| normal6(&mut rng)).collect()
    }

    #[test]
    fn gaussian_skewness_within_asymptotic_band() {
        let n = 10_000;
        let g = gaussianity_stats(&gaussian_samples(n, 17)).unwrap();
        // n b1 / 6 is asymptotically chi-square with d(d+1)(d+2)/6 = 56 dof;
        // its 99.5% point is 88.24.
        assert!(n as f64 * g.skewness / 6.0 < 88.24, "{}", g.skewness);
        // b2 is asymptotically N(d(d+2), 8d(d+2)/n).
        assert!((g.kurtosis - 48.0).abs() < 2.576 * (8.0 * 48.0 / n as f64).sqrt());
        assert!(!g.regularized);
    }

    #[test]
    fn mardia_is_affine_invariant() {
        let xs = gaussian_samples(400, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let a = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Mat6::identity() * 3.0;
        let shift = normal6(&mut rng);
        let ys: Vec<Vec6> = xs.iter().map(|x| a * x + shift).collect();
        let gx = gaussianity_stats(&xs).unwrap();
        let gy = gaussianity_stats(&ys).unwrap();
        assert!((gx.kurtosis - gy.kurtosis).abs() < 1e-9);
        assert!((gx.skewness - gy.skewness).abs() < 1e-9);
    }

    #[test]
    fn identical_samples_are_rejected() {
        assert!(gaussianity_stats(&vec![Vec6::repeat(1.0); 50]).is_err());
        assert!(gaussianity_stats(&gaussian_samples(6, 1)).is_err());
    }
}
