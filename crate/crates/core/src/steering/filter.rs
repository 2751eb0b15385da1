//! Control-independent Kalman filter schedule about the reference.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::cr3bp::Mat6;
use crate::error::{Error, Result};
use crate::stt::DiscretizedPlan;

/// Linear measurement `y = C x + D w` (deviation coordinates) and optional
/// process noise `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub c: Mat6,
    pub d: Mat6,
    pub g: Mat6,
}

impl MeasurementModel {
    /// Full-state measurement with independent position/velocity noise.
    pub fn full_state(sigma_r: f64, sigma_v: f64) -> Self {
        let mut d = Mat6::zeros();
        for i in 0..3 {
            d[(i, i)] = sigma_r;
            d[(i + 3, i + 3)] = sigma_v;
        }
        Self {
            c: Mat6::identity(),
            d,
            g: Mat6::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSchedule {
    /// Kalman gain `L_k` at every node.
    pub gains: Vec<Mat6>,
    /// Pre-update estimation-error covariance.
    pub p_minus: Vec<Mat6>,
    /// Post-update estimation-error covariance.
    pub p_post: Vec<Mat6>,
    /// Innovation covariance `C P- C^T + D D^T`.
    pub p_y: Vec<Mat6>,
    pub model: MeasurementModel,
}

impl FilterSchedule {
    pub fn n_nodes(&self) -> usize {
        self.gains.len()
    }
}

fn symmetric(m: Mat6) -> Mat6 {
    (m + m.transpose()) * 0.5
}

/// Riccati recursion with Joseph-form updates at every node, starting from
/// the pre-update covariance `p_tilde0` at node 0.
pub fn kalman_schedule(plan: &DiscretizedPlan, model: &MeasurementModel, p_tilde0: &Mat6) -> Result<FilterSchedule> {
    plan.check()?;
    if !p_tilde0.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("initial estimation covariance is not finite"));
    }
    let ddt = model.d * model.d.transpose();
    if Cholesky::new(ddt).is_none() {
        return Err(Error::SingularMatrix("measurement noise D D^T"));
    }
    let ggt = model.g * model.g.transpose();
    let n = plan.n_nodes();
    let mut out = FilterSchedule {
        gains: Vec::with_capacity(n),
        p_minus: Vec::with_capacity(n),
        p_post: Vec::with_capacity(n),
        p_y: Vec::with_capacity(n),
        model: *model,
    };
    let mut p_minus = symmetric(*p_tilde0);
    for k in 0..n {
        if k > 0 {
            let a = plan.segments[k - 1].stm;
            p_minus = symmetric(a * out.p_post[k - 1] * a.transpose() + ggt);
        }
        let p_y = symmetric(model.c * p_minus * model.c.transpose() + ddt);
        let chol = Cholesky::new(p_y).ok_or(Error::SingularMatrix("innovation covariance"))?;
        // L = P- C^T P_y^{-1}, solved as P_y L^T = C P-.
        let gain = chol.solve(&(model.c * p_minus)).transpose();
        let i_lc = Mat6::identity() - gain * model.c;
        let p_post = symmetric(i_lc * p_minus * i_lc.transpose() + gain * ddt * gain.transpose());
        out.gains.push(gain);
        out.p_minus.push(p_minus);
        out.p_post.push(p_post);
        out.p_y.push(p_y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::testkit::{diag, plan};

    #[test]
    fn uninformative_measurements_leave_open_loop_recursion() {
        let p = plan(4, None);
        let p0 = diag(0.1, 0.01);
        let f = kalman_schedule(&p, &MeasurementModel::full_state(1e6, 1e6), &p0).unwrap();
        let mut open = p0;
        for k in 0..p.n_nodes() {
            if k > 0 {
                open = p.segments[k - 1].stm * open * p.segments[k - 1].stm.transpose();
            }
            assert!(f.gains[k].amax() < 1e-12);
            assert!((f.p_post[k] - open).norm() <= 1e-9 * open.norm());
        }
    }

    #[test]
    fn accurate_measurements_collapse_to_noise_scale() {
        let p = plan(3, None);
        let (sr, sv) = (2.6e-9, 9.8e-5);
        let f = kalman_schedule(&p, &MeasurementModel::full_state(sr, sv), &diag(2.6e-3, 9.8e-4)).unwrap();
        for post in &f.p_post {
            for i in 0..3 {
                assert!(post[(i, i)] <= sr * sr * (1.0 + 1e-9));
                assert!(post[(i + 3, i + 3)] <= sv * sv * (1.0 + 1e-9));
                assert!(post[(i, i)] > 0.5 * sr * sr);
            }
        }
    }

    #[test]
    fn covariances_stay_psd() {
        let p = plan(6, None);
        let f = kalman_schedule(&p, &MeasurementModel::full_state(1e-3, 1e-2), &diag(0.3, 0.2)).unwrap();
        for m in f.p_minus.iter().chain(&f.p_post) {
            assert_eq!(*m, m.transpose());
            assert!(m.symmetric_eigenvalues().min() >= -1e-14);
        }
        for py in &f.p_y {
            assert!(py.cholesky().is_some());
        }
    }

    #[test]
    fn singular_noise_is_rejected() {
        let p = plan(2, None);
        let mut model = MeasurementModel::full_state(1.0, 1.0);
        model.d[(4, 4)] = 0.0;
        assert!(matches!(
            kalman_schedule(&p, &model, &diag(1.0, 1.0)),
            Err(Error::SingularMatrix(_))
        ));
    }
}
