//! Stacked block operators of the impulsive steering problem.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use super::filter::FilterSchedule;
use super::{control_matrix, psd_factor};
use crate::cr3bp::Mat6;
use crate::error::{Error, Result};
use crate::stt::DiscretizedPlan;

const JITTER_SCHEDULE: [f64; 5] = [1e-14, 1e-13, 1e-12, 1e-11, 1e-10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockOperators {
    pub n_nodes: usize,
    /// `6N x 6`, block `k` is `A_{k-1} .. A_0`.
    pub a_stack: DMatrix<f64>,
    /// `6N x 3(N-1)`, block `(k, j)` is `Phi(k, j) B` for `j < k`.
    pub b_stack: DMatrix<f64>,
    /// `6N x 3(N-1)`, as `b_stack` but including the diagonal `B`.
    pub b_plus: DMatrix<f64>,
    /// `6N x 6N`, block `(k, j)` is `Phi(k, j) L_j` for `j <= k`.
    pub l_stack: DMatrix<f64>,
    /// Covariance of the open-loop estimate deviations `Z`.
    pub s: DMatrix<f64>,
    /// Lower-triangular Cholesky factor of `s` (after jitter).
    pub s_half: DMatrix<f64>,
    /// Relative diagonal jitter that was needed to factor `s`.
    pub s_jitter: f64,
    /// Structured factor `[A P0^{1/2} | L P_Y^{1/2}]`, `6N x 6(N+1)`.
    /// Row block `k` has nonzeros only in its first `6(k+2)` columns.
    pub factor: DMatrix<f64>,
    pub p_hat0_half: Mat6,
    /// `L_k P_Y,k^{1/2}`, the fresh innovation block entering at node `k`.
    pub innovation_half: Vec<Mat6>,
    pub stms: Vec<Mat6>,
}

impl BlockOperators {
    pub fn n_maneuvers(&self) -> usize {
        self.n_nodes - 1
    }

    /// `Phi(k, j) = A_{k-1} .. A_j`.
    pub fn phi(&self, k: usize, j: usize) -> Mat6 {
        (j..k).fold(Mat6::identity(), |acc, i| self.stms[i] * acc)
    }

    /// Row block `k` of the structured factor, truncated to its nonzero
    /// columns.
    pub fn factor_row(&self, k: usize) -> DMatrix<f64> {
        self.factor.view((6 * k, 0), (6, 6 * (k + 2))).into_owned()
    }
}

fn put(dst: &mut DMatrix<f64>, r: usize, c: usize, m: &DMatrix<f64>) {
    dst.view_mut((r, c), (m.nrows(), m.ncols())).copy_from(m);
}

fn dyn6(m: &Mat6) -> DMatrix<f64> {
    DMatrix::from_fn(6, 6, |i, j| m[(i, j)])
}

/// Cholesky with a relative diagonal jitter escalation.
pub fn cholesky_with_jitter(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(c) = Cholesky::new(s.clone()) {
        return Ok((c.l(), 0.0));
    }
    let scale = s.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for rel in JITTER_SCHEDULE {
        let mut t = s.clone();
        for i in 0..t.nrows() {
            t[(i, i)] += rel * scale;
        }
        if let Some(c) = Cholesky::new(t) {
            log::warn!("covariance factorization needed relative jitter {rel:e}");
            return Ok((c.l(), rel));
        }
    }
    Err(Error::Factorization {
        jitter: *JITTER_SCHEDULE.last().expect("non-empty"),
    })
}

pub fn assemble_blocks(plan: &DiscretizedPlan, filter: &FilterSchedule, p_hat0: &Mat6) -> Result<BlockOperators> {
    plan.check()?;
    let n = plan.n_nodes();
    if filter.n_nodes() != n {
        return Err(Error::DimensionMismatch {
            context: "filter schedule nodes",
            expected: n,
            found: filter.n_nodes(),
        });
    }
    let m = n - 1;
    let b = control_matrix();
    let stms = plan.stms();
    let phi = |k: usize, j: usize| (j..k).fold(Mat6::identity(), |acc, i| stms[i] * acc);

    let mut a_stack = DMatrix::zeros(6 * n, 6);
    let mut b_stack = DMatrix::zeros(6 * n, 3 * m);
    let mut b_plus = DMatrix::zeros(6 * n, 3 * m);
    let mut l_stack = DMatrix::zeros(6 * n, 6 * n);
    let mut factor = DMatrix::zeros(6 * n, 6 * (n + 1));
    let p_hat0_half = psd_factor(p_hat0)?;
    let p_y_half: Vec<Mat6> = filter.p_y.iter().map(psd_factor).collect::<Result<_>>()?;
    let innovation_half: Vec<Mat6> = filter.gains.iter().zip(&p_y_half).map(|(l, h)| l * h).collect();

    for k in 0..n {
        let p0 = phi(k, 0);
        put(&mut a_stack, 6 * k, 0, &dyn6(&p0));
        put(&mut factor, 6 * k, 0, &dyn6(&(p0 * p_hat0_half)));
        for j in 0..=k {
            let pkj = phi(k, j);
            if j < m {
                let pb = DMatrix::from_fn(6, 3, |r, c| (pkj * b)[(r, c)]);
                if j < k {
                    put(&mut b_stack, 6 * k, 3 * j, &pb);
                }
                put(&mut b_plus, 6 * k, 3 * j, &pb);
            }
            let pl = pkj * filter.gains[j];
            put(&mut l_stack, 6 * k, 6 * j, &dyn6(&pl));
            put(&mut factor, 6 * k, 6 * (j + 1), &dyn6(&(pl * p_y_half[j])));
        }
    }

    let mut p_y = DMatrix::zeros(6 * n, 6 * n);
    for (k, py) in filter.p_y.iter().enumerate() {
        put(&mut p_y, 6 * k, 6 * k, &dyn6(py));
    }
    let s = &a_stack * dyn6(p_hat0) * a_stack.transpose() + &l_stack * p_y * l_stack.transpose();
    let s = (&s + s.transpose()) * 0.5;
    let (s_half, s_jitter) = cholesky_with_jitter(&s)?;
    Ok(BlockOperators {
        n_nodes: n,
        a_stack,
        b_stack,
        b_plus,
        l_stack,
        s,
        s_half,
        s_jitter,
        factor,
        p_hat0_half,
        innovation_half,
        stms,
    })
}
