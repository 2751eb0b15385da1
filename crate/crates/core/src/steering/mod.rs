//! Impulsive linear covariance steering in block Cholesky form: filter
//! schedule, stacked operators, chance-constraint quantiles and the conic
//! programs for the minimum-nonlinearity and minimum-covariance objectives.

pub mod blocks;
pub mod chance;
pub mod filter;
pub mod program;

use std::fmt;
use std::ops::AddAssign;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3x6, SMatrix, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

pub use blocks::{assemble_blocks, BlockOperators};
pub use chance::{chi2_quantile, factor_norm, quantile_upper_bound};
pub use filter::{kalman_schedule, FilterSchedule, MeasurementModel};
pub use program::{build_program, solve, ConicProblem, SolverConfig};

use crate::cr3bp::{Mat6, Vec6};
use crate::error::{Error, Result};
use crate::mon::MonBound;

/// How spectral norms of covariance factors enter the program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Frobenius norm (second-order cones only); never smaller than spectral.
    #[default]
    Surrogate,
    /// Spectral norm through a semidefinite embedding.
    Exact,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Surrogate => "surrogate",
            Self::Exact => "exact",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surrogate" => Ok(Self::Surrogate),
            "exact" => Ok(Self::Exact),
            other => Err(Error::invalid(format!("unknown norm mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "min-nl")]
    MinNonlinearity,
    #[serde(rename = "min-cov")]
    MinCovariance,
}

impl ObjectiveKind {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::MinNonlinearity => "min-nl",
            Self::MinCovariance => "min-cov",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min-nl" => Ok(Self::MinNonlinearity),
            "min-cov" => Ok(Self::MinCovariance),
            other => Err(Error::invalid(format!("unknown objective '{other}'"))),
        }
    }
}

/// Problem data that does not come from the dynamics: limits, risk level,
/// weighting and boundary means (all nondimensional deviations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub u_max: f64,
    pub eps_x: f64,
    pub lambda: f64,
    pub norm_mode: NormMode,
    pub mean0: Vec6,
    pub target: Vec6,
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_max >= 0.0 && self.u_max.is_finite()) {
            return Err(Error::Validation {
                field: "u_max".into(),
                message: "must be finite and nonnegative".into(),
            });
        }
        if !(self.eps_x > 0.0 && self.eps_x < 1.0) {
            return Err(Error::Validation {
                field: "eps_x".into(),
                message: "must lie in (0, 1)".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Validation {
                field: "lambda".into(),
                message: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

/// Impulse input matrix `B = [0; I3]`.
pub fn control_matrix() -> SMatrix<f64, 6, 3> {
    let mut b = SMatrix::<f64, 6, 3>::zeros();
    for i in 0..3 {
        b[(i + 3, i)] = 1.0;
    }
    b
}

/// Some square-root factor `F` with `F F^T = m` for a symmetric PSD matrix:
/// Cholesky when it succeeds, otherwise the clipped eigen square root.
pub fn psd_factor(m: &Mat6) -> Result<Mat6> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(c) = sym.cholesky() {
        return Ok(c.l());
    }
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.min() < -1e-10 * scale {
        return Err(Error::SingularMatrix("covariance is not positive semidefinite"));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(eig.eigenvectors * Mat6::from_diagonal(&root))
}

/// Predicted statistics of a policy, evaluated with plain linear algebra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    /// Pre-maneuver predicted means.
    pub mean_pre: Vec<Vec6>,
    /// Post-maneuver predicted means.
    pub mean_post: Vec<Vec6>,
    /// Pre-maneuver estimate covariance factors, `6 x 6(k+2)`.
    pub p_hat_half: Vec<DMatrix<f64>>,
    /// Post-maneuver estimate covariance factors.
    pub p_hat_plus_half: Vec<DMatrix<f64>>,
    /// Estimation-error covariance factors after the measurement update.
    pub p_tilde_half: Vec<Mat6>,
    /// Quantile metrics with the program's norm.
    pub r_tilde: Vec<f64>,
    pub v_tilde: Vec<f64>,
    /// Quantile upper bounds with the spectral norm.
    pub quant_ub_r: Vec<f64>,
    pub quant_ub_v: Vec<f64>,
    /// `trace(H_r P_k H_r^T)` of the pre-maneuver true-state covariance.
    pub pos_trace: Vec<f64>,
    /// Left side of each control chance constraint (program norm).
    pub control_bound: Vec<f64>,
}

impl PolicyStats {
    /// Pre-maneuver true-state covariance `P_k = P^_k + P~_k`.
    pub fn covariance(&self, k: usize) -> Mat6 {
        let f = &self.p_hat_half[k];
        let p = f * f.transpose();
        Mat6::from_fn(|i, j| p[(i, j)]) + self.p_tilde_half[k] * self.p_tilde_half[k].transpose()
    }

    pub fn covariance_post(&self, k: usize) -> Mat6 {
        let f = &self.p_hat_plus_half[k];
        let p = f * f.transpose();
        Mat6::from_fn(|i, j| p[(i, j)]) + self.p_tilde_half[k] * self.p_tilde_half[k].transpose()
    }

    pub fn max_pos_trace(&self) -> f64 {
        self.pos_trace.iter().copied().fold(0.0, f64::max)
    }
}

fn rows(m: &DMatrix<f64>, start: usize) -> DMatrix<f64> {
    m.rows(start, 3).into_owned()
}

fn with_tilde(m: &DMatrix<f64>, tilde: &Mat6, start: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(3, m.ncols() + 6);
    out.view_mut((0, 0), (3, m.ncols())).copy_from(&rows(m, start));
    for i in 0..3 {
        for j in 0..6 {
            out[(i, m.ncols() + j)] = tilde[(i + start, j)];
        }
    }
    out
}

/// Propagates means and covariance factors of a block-diagonal feedback
/// policy `u_k = u_bar_k + K_k z_k`.
pub fn evaluate_policy(
    blocks: &BlockOperators,
    filter: &FilterSchedule,
    u_bar: &[Vector3<f64>],
    gains: &[Matrix3x6<f64>],
    cfg: &SteeringConfig,
) -> Result<PolicyStats> {
    let n = blocks.n_nodes;
    let m = blocks.n_maneuvers();
    if u_bar.len() != m || gains.len() != m {
        return Err(Error::DimensionMismatch {
            context: "policy length",
            expected: m,
            found: u_bar.len().min(gains.len()),
        });
    }
    let b = control_matrix();
    let q = chi2_quantile(cfg.eps_x, 3)?.sqrt();
    let width = 6 * (n + 1);
    let mut stats = PolicyStats {
        mean_pre: Vec::with_capacity(n),
        mean_post: Vec::with_capacity(n),
        p_hat_half: Vec::with_capacity(n),
        p_hat_plus_half: Vec::with_capacity(n),
        p_tilde_half: filter.p_post.iter().map(psd_factor).collect::<Result<_>>()?,
        r_tilde: Vec::with_capacity(n),
        v_tilde: Vec::with_capacity(n),
        quant_ub_r: Vec::with_capacity(n),
        quant_ub_v: Vec::with_capacity(n),
        pos_trace: Vec::with_capacity(n),
        control_bound: Vec::with_capacity(m),
    };
    let mut mean = cfg.mean0;
    // Running post-maneuver factor, kept at full width.
    let mut f_prev = DMatrix::<f64>::zeros(6, width);
    for k in 0..n {
        let cols = 6 * (k + 2);
        let f_k = if k == 0 {
            blocks.factor_row(0)
        } else {
            let a = &blocks.stms[k - 1];
            mean = a * stats.mean_post[k - 1];
            let ad = DMatrix::from_fn(6, 6, |i, j| a[(i, j)]);
            let mut f = (&ad * &f_prev).columns(0, cols).into_owned();
            f.view_mut((0, 6 * (k + 1)), (6, 6)).add_assign(&blocks.innovation_half[k]);
            f
        };
        let mut f_plus = f_k.clone();
        let mut mean_plus = mean;
        if k < m {
            mean_plus += b * u_bar[k];
            let u_fac = DMatrix::from_fn(3, 6, |i, j| gains[k][(i, j)]) * blocks.factor_row(k);
            f_plus.view_mut((3, 0), (3, cols)).add_assign(&u_fac);
            stats.control_bound.push(u_bar[k].norm() + q * factor_norm(&u_fac, cfg.norm_mode));
        }
        let tilde = &stats.p_tilde_half[k];
        let pos = DVector::from_iterator(3, mean_plus.iter().take(3).copied());
        let vel = DVector::from_iterator(3, mean_plus.iter().skip(3).copied());
        let fr = with_tilde(&f_plus, tilde, 0);
        let fv = with_tilde(&f_plus, tilde, 3);
        stats.r_tilde.push(pos.norm() + q * factor_norm(&fr, cfg.norm_mode));
        stats.v_tilde.push(vel.norm() + q * factor_norm(&fv, cfg.norm_mode));
        stats.quant_ub_r.push(pos.norm() + q * factor_norm(&fr, NormMode::Exact));
        stats.quant_ub_v.push(vel.norm() + q * factor_norm(&fv, NormMode::Exact));
        stats.pos_trace.push(with_tilde(&f_k, tilde, 0).norm_squared());
        stats.mean_pre.push(mean);
        stats.mean_post.push(mean_plus);
        f_prev.fill(0.0);
        f_prev.view_mut((0, 0), (6, cols)).copy_from(&f_plus);
        stats.p_hat_half.push(f_k);
        stats.p_hat_plus_half.push(f_plus);
    }
    Ok(stats)
}

/// Solved policy with its predicted statistics and bound values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSolution {
    pub kind: ObjectiveKind,
    pub norm_mode: NormMode,
    pub u_bar: Vec<Vector3<f64>>,
    pub gains: Vec<Matrix3x6<f64>>,
    /// Pre-maneuver predicted means `X_bar`.
    pub x_bar: Vec<Vec6>,
    pub stats: PolicyStats,
    pub r_tilde: Vec<f64>,
    pub v_tilde: Vec<f64>,
    pub mon: MonBound,
    /// Recomputed objective: the bound for min-NL, the largest positional
    /// trace for min-cov.
    pub objective_value: f64,
    /// Objective reported by the solver, in the same units.
    pub solver_objective: f64,
    pub terminal_residual: f64,
    pub status: String,
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
}
