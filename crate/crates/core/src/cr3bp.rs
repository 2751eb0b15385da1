//! Circular restricted three-body dynamics in the synodic frame, with analytic
//! first and second partials, halo-orbit differential correction and the
//! monodromy time constant.

use nalgebra::{DVector, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{integrate, Tolerances};
use crate::tensors::DenseTensor;

pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

const MIN_DISTANCE: f64 = 1e-12;

/// Position and velocity in nondimensional synodic coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State6 {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl State6 {
    pub fn new(r: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { r, v }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            r: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn from_vec6(x: &Vec6) -> Self {
        Self::from_slice(x.as_slice())
    }

    pub fn to_vec6(&self) -> Vec6 {
        Vec6::new(self.r.x, self.r.y, self.r.z, self.v.x, self.v.y, self.v.z)
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(self.v.iter()).all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemConstants {
    pub mu: f64,
    /// km per distance unit.
    pub length_unit: f64,
    /// Seconds per time unit.
    pub time_unit: f64,
}

impl SystemConstants {
    pub fn new(mu: f64, length_unit: f64, time_unit: f64) -> Result<Self> {
        if !(mu > 0.0 && mu < 0.5) {
            return Err(Error::invalid(format!("mass parameter {mu} outside (0, 0.5)")));
        }
        if !(length_unit > 0.0 && time_unit > 0.0) {
            return Err(Error::invalid("length and time units must be positive"));
        }
        Ok(Self {
            mu,
            length_unit,
            time_unit,
        })
    }

    pub fn earth_moon() -> Self {
        Self {
            mu: 1.215_058_560_962_404e-2,
            length_unit: 384_400.0,
            time_unit: 375_190.26,
        }
    }

    /// km/s per velocity unit.
    pub fn velocity_unit(&self) -> f64 {
        self.length_unit / self.time_unit
    }

    pub fn km_to_nd(&self, km: f64) -> f64 {
        km / self.length_unit
    }

    pub fn mps_to_nd(&self, mps: f64) -> f64 {
        mps * 1e-3 / self.velocity_unit()
    }

    pub fn nd_to_km(&self, nd: f64) -> f64 {
        nd * self.length_unit
    }

    pub fn nd_to_mps(&self, nd: f64) -> f64 {
        nd * self.velocity_unit() * 1e3
    }
}

/// Relative positions to the two primaries and their norms.
fn primaries(r: &Vector3<f64>, mu: f64) -> Result<(Vector3<f64>, f64, Vector3<f64>, f64)> {
    let rho1 = Vector3::new(r.x + mu, r.y, r.z);
    let rho2 = Vector3::new(r.x - 1.0 + mu, r.y, r.z);
    let d = rho1.norm();
    let s = rho2.norm();
    let closest = d.min(s);
    if !(closest >= MIN_DISTANCE) {
        return Err(Error::SingularPosition { distance: closest });
    }
    Ok((rho1, d, rho2, s))
}

/// Gradient of the pseudo-potential.
pub fn potential_gradient(r: &Vector3<f64>, mu: f64) -> Result<Vector3<f64>> {
    let (rho1, d, rho2, s) = primaries(r, mu)?;
    let k1 = (1.0 - mu) / (d * d * d);
    let k2 = mu / (s * s * s);
    Ok(Vector3::new(r.x, r.y, 0.0) - rho1 * k1 - rho2 * k2)
}

/// Hessian of the pseudo-potential.
pub fn potential_hessian(r: &Vector3<f64>, mu: f64) -> Result<Matrix3<f64>> {
    let (rho1, d, rho2, s) = primaries(r, mu)?;
    let mut h = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    for (rho, dist, k) in [(rho1, d, 1.0 - mu), (rho2, s, mu)] {
        let d3 = dist.powi(3);
        let d5 = dist.powi(5);
        h += (rho * rho.transpose()) * (3.0 * k / d5) - Matrix3::identity() * (k / d3);
    }
    Ok(h)
}

/// Third partials of the pseudo-potential, `U_{abc}`.
pub fn potential_third(r: &Vector3<f64>, mu: f64) -> Result<[[[f64; 3]; 3]; 3]> {
    let (rho1, d, rho2, s) = primaries(r, mu)?;
    let delta = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
    let mut out = [[[0.0; 3]; 3]; 3];
    // Evaluate each sorted index triple once and mirror it so the result is
    // exactly symmetric.
    for a in 0..3 {
        for b in a..3 {
            for c in b..3 {
                let mut v = 0.0;
                for (rho, dist, k) in [(rho1, d, 1.0 - mu), (rho2, s, mu)] {
                    let d5 = dist.powi(5);
                    let d7 = dist.powi(7);
                    v += k
                        * (-15.0 * rho[a] * rho[b] * rho[c] / d7
                            + 3.0 * (delta(a, b) * rho[c] + delta(a, c) * rho[b] + delta(b, c) * rho[a]) / d5);
                }
                for (i, j, l) in [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
                    out[i][j][l] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Equations of motion `[v; a]`.
pub fn eom(_t: f64, x: &State6, c: &SystemConstants) -> Result<Vec6> {
    let g = potential_gradient(&x.r, c.mu)?;
    let a = Vector3::new(g.x + 2.0 * x.v.y, g.y - 2.0 * x.v.x, g.z);
    Ok(Vec6::new(x.v.x, x.v.y, x.v.z, a.x, a.y, a.z))
}

/// `df/dx` of the equations of motion.
pub fn jacobian(x: &State6, c: &SystemConstants) -> Result<Mat6> {
    let h = potential_hessian(&x.r, c.mu)?;
    let mut j = Mat6::zeros();
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&h);
    j[(3, 4)] = 2.0;
    j[(4, 3)] = -2.0;
    Ok(j)
}

/// `d^2 f / dx^2` as a 6x6x6 tensor `H[i, a, b]`.
pub fn dynamics_hessian(x: &State6, c: &SystemConstants) -> Result<DenseTensor> {
    let u3 = potential_third(&x.r, c.mu)?;
    let mut data = vec![0.0; 216];
    for i in 0..3 {
        for a in 0..3 {
            for b in 0..3 {
                data[((i + 3) * 6 + a) * 6 + b] = u3[i][a][b];
            }
        }
    }
    DenseTensor::from_data(3, 6, 6, data)
}

pub fn jacobi_constant(x: &State6, c: &SystemConstants) -> Result<f64> {
    let (_, d, _, s) = primaries(&x.r, c.mu)?;
    let u = 0.5 * (x.r.x * x.r.x + x.r.y * x.r.y) + (1.0 - c.mu) / d + c.mu / s;
    Ok(2.0 * u - x.v.norm_squared())
}

pub(crate) fn state_rhs(c: SystemConstants) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<()> {
    move |t, y, dy| {
        let f = eom(t, &State6::from_slice(y), &c)?;
        dy.copy_from_slice(f.as_slice());
        Ok(())
    }
}

/// Nonlinear propagation of a single state.
pub fn propagate(x0: &State6, t0: f64, t1: f64, c: &SystemConstants, tol: Tolerances) -> Result<State6> {
    let y = integrate(state_rhs(*c), t0, t1, DVector::from_column_slice(x0.to_vec6().as_slice()), tol)?;
    Ok(State6::from_slice(y.as_slice()))
}

/// Propagates the state together with the STM.
pub fn propagate_with_stm(
    x0: &State6,
    t0: f64,
    t1: f64,
    c: &SystemConstants,
    tol: Tolerances,
) -> Result<(State6, Mat6)> {
    let cc = *c;
    let rhs = move |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = State6::from_slice(y);
        let f = eom(0.0, &x, &cc)?;
        dy[..6].copy_from_slice(f.as_slice());
        let j = jacobian(&x, &cc)?;
        let phi = Mat6::from_row_slice(&y[6..42]);
        let dphi = j * phi;
        for r in 0..6 {
            for col in 0..6 {
                dy[6 + r * 6 + col] = dphi[(r, col)];
            }
        }
        Ok(())
    };
    let mut y0 = DVector::zeros(42);
    y0.as_mut_slice()[..6].copy_from_slice(x0.to_vec6().as_slice());
    for i in 0..6 {
        y0[6 + i * 7] = 1.0;
    }
    let y = integrate(rhs, t0, t1, y0, tol)?;
    Ok((State6::from_slice(&y.as_slice()[..6]), Mat6::from_row_slice(&y.as_slice()[6..42])))
}

/// A corrected periodic orbit and its node grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOrbit {
    pub initial_state: State6,
    pub period: f64,
    pub node_times: Vec<f64>,
    pub node_states: Vec<State6>,
    pub monodromy: Mat6,
    /// Time constant in revolutions (infinite for stable orbits).
    pub tau: f64,
}

impl ReferenceOrbit {
    /// Samples `n` evenly spaced nodes over `revs` periods (endpoint included).
    pub fn with_uniform_nodes(&self, segments: usize, revs: usize, c: &SystemConstants, tol: Tolerances) -> Result<Self> {
        if segments == 0 || revs == 0 {
            return Err(Error::invalid("segments and revolutions must be positive"));
        }
        let total = segments * revs;
        let dt = self.period / segments as f64;
        let mut times = Vec::with_capacity(total + 1);
        let mut states = Vec::with_capacity(total + 1);
        // Each node is propagated from the start of its revolution so errors
        // do not accumulate across revolutions.
        for k in 0..=total {
            let within = k % segments;
            let t = k as f64 * dt;
            let s = if within == 0 {
                self.initial_state
            } else {
                propagate(&self.initial_state, 0.0, within as f64 * dt, c, tol)?
            };
            times.push(t);
            states.push(s);
        }
        Ok(Self {
            node_times: times,
            node_states: states,
            ..self.clone()
        })
    }
}

/// Settings for the differential corrector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub integrator: Tolerances,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iters: 30,
            integrator: Tolerances::default(),
        }
    }
}

/// Record of a differential correction run.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionLog {
    pub iterations: usize,
    /// Norm of the first Newton update (zero when the guess is already periodic).
    pub first_update: f64,
    pub residuals: [f64; 3],
}

/// Single-shooting correction to the half-period xz-plane crossing: holds z0
/// fixed and adjusts x0, ydot0 and the half period until y, xdot and zdot
/// vanish there.
pub fn correct_periodic(
    guess: &State6,
    period_guess: f64,
    c: &SystemConstants,
    tol: f64,
) -> Result<ReferenceOrbit> {
    correct_periodic_with(guess, period_guess, c, &CorrectionConfig { tol, ..Default::default() }).map(|(o, _)| o)
}

pub fn correct_periodic_with(
    guess: &State6,
    period_guess: f64,
    c: &SystemConstants,
    cfg: &CorrectionConfig,
) -> Result<(ReferenceOrbit, CorrectionLog)> {
    if !(cfg.tol > 0.0) {
        return Err(Error::invalid("correction tolerance must be positive"));
    }
    if !(period_guess > 0.0) {
        return Err(Error::invalid("period guess must be positive"));
    }
    let mut x0 = State6::new(
        Vector3::new(guess.r.x, 0.0, guess.r.z),
        Vector3::new(0.0, guess.v.y, 0.0),
    );
    let mut half = 0.5 * period_guess;
    let mut first_update = 0.0;
    let mut last = [f64::INFINITY; 3];
    for iter in 0..cfg.max_iters {
        let (xh, phi) = propagate_with_stm(&x0, 0.0, half, c, cfg.integrator)?;
        let res = [xh.r.y, xh.v.x, xh.v.z];
        last = res;
        let rmax = res.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        if rmax < cfg.tol {
            let (xf, monodromy) = propagate_with_stm(&x0, 0.0, 2.0 * half, c, cfg.integrator)?;
            debug_assert!(xf.is_finite());
            let period = 2.0 * half;
            let mut orbit = ReferenceOrbit {
                initial_state: x0,
                period,
                node_times: vec![0.0],
                node_states: vec![x0],
                monodromy,
                tau: f64::INFINITY,
            };
            orbit.tau = time_constant(&orbit)?;
            return Ok((
                orbit,
                CorrectionLog {
                    iterations: iter,
                    first_update,
                    residuals: res,
                },
            ));
        }
        let f = eom(0.0, &xh, c)?;
        // Rows: y, xdot, zdot. Columns: x0, ydot0, half period.
        let rows = [1usize, 3, 5];
        let mut jac = Matrix3::zeros();
        for (i, &r) in rows.iter().enumerate() {
            jac[(i, 0)] = phi[(r, 0)];
            jac[(i, 1)] = phi[(r, 4)];
            jac[(i, 2)] = f[r];
        }
        let rhs = -Vector3::new(res[0], res[1], res[2]);
        let step = jac
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularMatrix("differential correction shooting matrix"))?;
        if iter == 0 {
            first_update = step.norm();
        }
        x0.r.x += step[0];
        x0.v.y += step[1];
        half += step[2];
        if !(half > 0.0) {
            return Err(Error::NotConverged {
                what: "differential correction",
                iterations: iter + 1,
                residual: rmax,
            });
        }
    }
    Err(Error::NotConverged {
        what: "differential correction",
        iterations: cfg.max_iters,
        residual: last.iter().fold(0.0_f64, |m, r| m.max(r.abs())),
    })
}

/// Dominant monodromy eigenvalue: largest magnitude, ties broken by the larger
/// real part.
pub fn dominant_eigenvalue(m: &Mat6) -> nalgebra::Complex<f64> {
    let eig = m.complex_eigenvalues();
    let mut best = eig[0];
    for &e in eig.iter().skip(1) {
        let (a, b) = (e.norm(), best.norm());
        if a > b * (1.0 + 1e-12) || ((a - b).abs() <= 1e-12 * b && e.re > best.re) {
            best = e;
        }
    }
    best
}

/// `tau = 1 / (Re[ln lambda_max] * T)`, infinite when `|lambda_max| <= 1`.
pub fn time_constant_from(monodromy: &Mat6, period: f64) -> f64 {
    let lam = dominant_eigenvalue(monodromy);
    let mag = lam.norm();
    if !(mag > 1.0 + 1e-9) {
        return f64::INFINITY;
    }
    // Re[Ln z] = ln |z| for the principal branch.
    1.0 / (mag.ln() * period)
}

pub fn time_constant(orbit: &ReferenceOrbit) -> Result<f64> {
    if !orbit.monodromy.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("monodromy contains non-finite entries"));
    }
    Ok(time_constant_from(&orbit.monodromy, orbit.period))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn em() -> SystemConstants {
        SystemConstants::earth_moon()
    }

    fn sample_state(rng: &mut ChaCha8Rng) -> State6 {
        State6::new(
            Vector3::new(1.13 + rng.random_range(-0.05..0.05), rng.random_range(-0.1..0.1), -0.1767 + rng.random_range(-0.05..0.05)),
            Vector3::new(rng.random_range(-0.1..0.1), -0.2255 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
        )
    }

    #[test]
    fn earth_moon_constants_are_valid() {
        let c = em();
        assert!(SystemConstants::new(c.mu, c.length_unit, c.time_unit).is_ok());
        assert!((c.mu - 0.0122).abs() < 1e-4);
        assert!(SystemConstants::new(0.6, 1.0, 1.0).is_err());
    }

    #[test]
    fn libration_point_is_equilibrium() {
        // Bisection on U_x along the x-axis beyond the Moon (L2).
        let c = em();
        let ux = |x: f64| potential_gradient(&Vector3::new(x, 0.0, 0.0), c.mu).unwrap().x;
        let (mut lo, mut hi) = (1.0 - c.mu + 1e-3, 1.5);
        assert!(ux(lo) * ux(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ux(lo) * ux(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        let l2 = State6::new(Vector3::new(0.5 * (lo + hi), 0.0, 0.0), Vector3::zeros());
        let f = eom(0.0, &l2, &c).unwrap();
        assert!(f.fixed_rows::<3>(3).amax() < 1e-12);
    }

    #[test]
    fn mirror_symmetry_holds() {
        let c = em();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = sample_state(&mut rng);
            let mirrored = State6::new(Vector3::new(x.r.x, -x.r.y, x.r.z), Vector3::new(-x.v.x, x.v.y, -x.v.z));
            let a = eom(0.0, &mirrored, &c).unwrap();
            let b = eom(0.0, &x, &c).unwrap();
            assert_eq!(a[3], b[3]);
            assert_eq!(a[4], -b[4]);
            assert_eq!(a[5], b[5]);
        }
    }

    #[test]
    fn singular_position_is_rejected() {
        let c = em();
        let at_moon = State6::new(Vector3::new(1.0 - c.mu, 0.0, 0.0), Vector3::zeros());
        assert!(matches!(eom(0.0, &at_moon, &c), Err(Error::SingularPosition { .. })));
        assert!(jacobian(&at_moon, &c).is_err());
        assert!(dynamics_hessian(&at_moon, &c).is_err());
    }

    #[test]
    fn jacobian_structure_and_finite_differences() {
        let c = em();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let x = sample_state(&mut rng);
            let j = jacobian(&x, &c).unwrap();
            assert_eq!(j.fixed_view::<3, 3>(0, 0).amax(), 0.0);
            let lower = j.fixed_view::<3, 3>(3, 0).into_owned();
            assert_eq!(lower, lower.transpose());
            let h = 1e-6;
            let v = x.to_vec6();
            for col in 0..6 {
                let mut p = v;
                let mut m = v;
                p[col] += h;
                m[col] -= h;
                let fp = eom(0.0, &State6::from_vec6(&p), &c).unwrap();
                let fm = eom(0.0, &State6::from_vec6(&m), &c).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                for row in 0..6 {
                    assert!((fd[row] - j[(row, col)]).abs() < 1e-6, "row {row} col {col}");
                }
            }
        }
    }

    #[test]
    fn hessian_structure_and_finite_differences() {
        let c = em();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let x = sample_state(&mut rng);
            let h = dynamics_hessian(&x, &c).unwrap();
            for i in 0..6 {
                for a in 0..6 {
                    for b in 0..6 {
                        assert_eq!(h.get(&[i, a, b]), h.get(&[i, b, a]));
                        if i < 3 || a >= 3 || b >= 3 {
                            assert_eq!(h.get(&[i, a, b]), 0.0);
                        }
                    }
                }
            }
            let step = 1e-6;
            let v = x.to_vec6();
            for b in 0..6 {
                let mut p = v;
                let mut m = v;
                p[b] += step;
                m[b] -= step;
                let jp = jacobian(&State6::from_vec6(&p), &c).unwrap();
                let jm = jacobian(&State6::from_vec6(&m), &c).unwrap();
                let fd = (jp - jm) / (2.0 * step);
                for i in 0..6 {
                    for a in 0..6 {
                        assert!((fd[(i, a)] - h.get(&[i, a, b])).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_monodromy_is_stable() {
        assert!(time_constant_from(&Mat6::identity(), 3.0).is_infinite());
    }

    #[test]
    fn time_constant_decreases_with_instability() {
        let mut last = f64::INFINITY;
        for lam in [1.5, 3.0, 10.0, 100.0, 1e4] {
            let m = Mat6::from_diagonal(&Vec6::new(lam, 1.0 / lam, 1.0, 1.0, 0.5, 2.0));
            let tau = time_constant_from(&m, 3.0);
            assert!(tau < last);
            last = tau;
        }
    }

    #[test]
    fn dominant_eigenvalue_tie_breaks_on_real_part() {
        let m = Mat6::from_diagonal(&Vec6::new(-5.0, 5.0, 1.0, 1.0, 0.2, -0.2));
        assert_eq!(dominant_eigenvalue(&m).re, 5.0);
    }
}
