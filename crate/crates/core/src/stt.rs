//! First- and second-order state transition tensors along reference segments,
//! the truncated series map and its remainder, and the linearization-error
//! recursion.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cr3bp::{self, eom, jacobian, potential_third, Mat6, ReferenceOrbit, State6, SystemConstants, Vec6};
use crate::error::{Error, Result};
use crate::integrate::{integrate, Tolerances};
use crate::tensors::{tensor_vector_power, DenseTensor};

/// The only supported series truncation order.
pub const SUPPORTED_ORDER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLinearization {
    pub k: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// STM over the segment.
    pub stm: Mat6,
    /// Second-order STT, `stt[i, a, b]`, symmetric in `(a, b)`.
    pub stt: DenseTensor,
    pub x_ref_start: State6,
    pub x_ref_end: State6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedPlan {
    pub orbit: ReferenceOrbit,
    pub constants: SystemConstants,
    pub segments: Vec<SegmentLinearization>,
    pub segments_per_rev: usize,
    pub revs: usize,
}

impl DiscretizedPlan {
    /// Node count `N = segments + 1`.
    pub fn n_nodes(&self) -> usize {
        self.segments.len() + 1
    }

    pub fn node_times(&self) -> &[f64] {
        &self.orbit.node_times
    }

    pub fn stms(&self) -> Vec<Mat6> {
        self.segments.iter().map(|s| s.stm).collect()
    }

    /// `A_{to-1} .. A_{from}`, identity when `to == from`.
    pub fn stm_product(&self, from: usize, to: usize) -> Mat6 {
        (from..to).fold(Mat6::identity(), |acc, k| self.segments[k].stm * acc)
    }

    /// A plan over fixed linear maps with unit-length segments, zero
    /// reference states and optional second-order tensors (zero by default).
    pub fn from_linear_maps(stms: &[Mat6], stts: Option<Vec<DenseTensor>>) -> Result<Self> {
        if stms.is_empty() {
            return Err(Error::invalid("plan has no segments"));
        }
        let stts = match stts {
            Some(t) if t.len() != stms.len() => {
                return Err(Error::DimensionMismatch {
                    context: "second-order tensors",
                    expected: stms.len(),
                    found: t.len(),
                })
            }
            Some(t) => t,
            None => vec![DenseTensor::zeros(3, 6); stms.len()],
        };
        let zero = State6::from_vec6(&Vec6::zeros());
        let n = stms.len();
        let segments = stms
            .iter()
            .zip(stts)
            .enumerate()
            .map(|(k, (a, t))| SegmentLinearization {
                k,
                t_start: k as f64,
                t_end: (k + 1) as f64,
                stm: *a,
                stt: t,
                x_ref_start: zero,
                x_ref_end: zero,
            })
            .collect();
        let orbit = ReferenceOrbit {
            initial_state: zero,
            period: n as f64,
            node_times: (0..=n).map(|k| k as f64).collect(),
            node_states: vec![zero; n + 1],
            monodromy: stms.iter().fold(Mat6::identity(), |acc, a| a * acc),
            tau: f64::INFINITY,
        };
        Ok(Self {
            orbit,
            constants: SystemConstants::earth_moon(),
            segments,
            segments_per_rev: n,
            revs: 1,
        })
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid("plan has no segments"));
        }
        for w in self.segments.windows(2) {
            if (w[0].t_end - w[1].t_start).abs() > 1e-12 * w[1].t_start.abs().max(1.0) {
                return Err(Error::invalid("plan segments are not contiguous"));
            }
        }
        Ok(())
    }
}

const N_AUG: usize = 6 + 36 + 216;

fn augmented_rhs(c: SystemConstants) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<()> {
    move |_t, y, dy| {
        let x = State6::from_slice(&y[..6]);
        let f = eom(0.0, &x, &c)?;
        dy[..6].copy_from_slice(f.as_slice());
        let j = jacobian(&x, &c)?;
        let u3 = potential_third(&x.r, c.mu)?;
        let phi = &y[6..42];
        let phi2 = &y[42..];
        let dphi = &mut dy[6..42];
        for r in 0..6 {
            for col in 0..6 {
                let mut acc = 0.0;
                for m in 0..6 {
                    acc += j[(r, m)] * phi[m * 6 + col];
                }
                dphi[r * 6 + col] = acc;
            }
        }
        // tmp[i][k][a] = sum_j U_{ijk} Phi_{ja}, position block only.
        let mut tmp = [[[0.0; 6]; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                for a in 0..6 {
                    tmp[i][k][a] = (0..3).map(|jj| u3[i][jj][k] * phi[jj * 6 + a]).sum();
                }
            }
        }
        let dphi2 = &mut dy[42..];
        for i in 0..6 {
            for a in 0..6 {
                for b in a..6 {
                    let mut acc = 0.0;
                    for m in 0..6 {
                        let jim = j[(i, m)];
                        if jim != 0.0 {
                            acc += jim * phi2[(m * 6 + a) * 6 + b];
                        }
                    }
                    if i >= 3 {
                        for k in 0..3 {
                            acc += tmp[i - 3][k][a] * phi[k * 6 + b];
                        }
                    }
                    dphi2[(i * 6 + a) * 6 + b] = acc;
                    dphi2[(i * 6 + b) * 6 + a] = acc;
                }
            }
        }
        Ok(())
    }
}

/// Integrates the reference state with its STM and second-order STT from
/// `t0` to `t1`.
pub fn propagate_linearization(
    x0: &State6,
    t0: f64,
    t1: f64,
    c: &SystemConstants,
    tol: Tolerances,
) -> Result<SegmentLinearization> {
    if t1 < t0 {
        return Err(Error::invalid("segment end precedes its start"));
    }
    let mut y0 = DVector::zeros(N_AUG);
    y0.as_mut_slice()[..6].copy_from_slice(x0.to_vec6().as_slice());
    for i in 0..6 {
        y0[6 + i * 7] = 1.0;
    }
    let y = integrate(augmented_rhs(*c), t0, t1, y0, tol)?;
    let y = y.as_slice();
    let mut stt = DenseTensor::from_data(3, 6, 6, y[42..].to_vec())?;
    stt.symmetrize_trailing();
    Ok(SegmentLinearization {
        k: 0,
        t_start: t0,
        t_end: t1,
        stm: Mat6::from_row_slice(&y[6..42]),
        stt,
        x_ref_start: *x0,
        x_ref_end: State6::from_slice(&y[..6]),
    })
}

/// Uniform-in-time node grid over `revs` periods with per-segment
/// linearizations.
pub fn discretize_reference(
    orbit: &ReferenceOrbit,
    segments_per_rev: usize,
    revs: usize,
    c: &SystemConstants,
) -> Result<DiscretizedPlan> {
    discretize_reference_with(orbit, segments_per_rev, revs, c, Tolerances::default())
}

pub fn discretize_reference_with(
    orbit: &ReferenceOrbit,
    segments_per_rev: usize,
    revs: usize,
    c: &SystemConstants,
    tol: Tolerances,
) -> Result<DiscretizedPlan> {
    if segments_per_rev < 1 || revs < 1 {
        return Err(Error::invalid("segments_per_rev and revs must be at least 1"));
    }
    let gridded = orbit.with_uniform_nodes(segments_per_rev, revs, c, tol)?;
    let total = segments_per_rev * revs;
    let segments = (0..total)
        .into_par_iter()
        .map(|k| {
            let mut seg = propagate_linearization(
                &gridded.node_states[k],
                gridded.node_times[k],
                gridded.node_times[k + 1],
                c,
                tol,
            )?;
            seg.k = k;
            Ok(seg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscretizedPlan {
        orbit: gridded,
        constants: *c,
        segments,
        segments_per_rev,
        revs,
    })
}

fn check_order(m_star: usize, allow_first: bool) -> Result<()> {
    match m_star {
        1 if allow_first => Ok(()),
        SUPPORTED_ORDER => Ok(()),
        other => Err(Error::UnsupportedOrder(other)),
    }
}

fn quadratic_term(seg: &SegmentLinearization, dx: &Vec6) -> Vec6 {
    let v = DVector::from_column_slice(dx.as_slice());
    let q = tensor_vector_power(&seg.stt, &v, 2).expect("6x6x6 STT");
    Vec6::from_column_slice(q.as_slice()) * 0.5
}

/// `A dx + sum_{m=2}^{m*} (1/m!) Phi^(m) dx^m`.
pub fn series_predict(seg: &SegmentLinearization, dx: &Vec6, m_star: usize) -> Result<Vec6> {
    check_order(m_star, true)?;
    let lin = seg.stm * dx;
    Ok(if m_star == 1 { lin } else { lin + quadratic_term(seg, dx) })
}

/// Series tail beyond first order, truncated at `m*`.
pub fn remainder(seg: &SegmentLinearization, dx: &Vec6, m_star: usize) -> Result<Vec6> {
    check_order(m_star, false)?;
    Ok(quadratic_term(seg, dx))
}

/// Linearization error recursion `e_{k+1} = A_k e_k + R(dx+_k)`, `e_0 = 0`.
/// Returns one error vector per node.
pub fn accumulate_errors(plan: &DiscretizedPlan, post_maneuver: &[Vec6]) -> Result<Vec<Vec6>> {
    if post_maneuver.len() != plan.segments.len() {
        return Err(Error::DimensionMismatch {
            context: "post-maneuver deviations",
            expected: plan.segments.len(),
            found: post_maneuver.len(),
        });
    }
    let mut eps = Vec::with_capacity(plan.n_nodes());
    eps.push(Vec6::zeros());
    for (seg, dx) in plan.segments.iter().zip(post_maneuver) {
        let prev = eps.last().expect("non-empty");
        eps.push(seg.stm * prev + remainder(seg, dx, SUPPORTED_ORDER)?);
    }
    Ok(eps)
}

/// Nonlinear image of a deviation through the segment, as a deviation from
/// the reference end state.
pub fn nonlinear_deviation(seg: &SegmentLinearization, dx: &Vec6, c: &SystemConstants, tol: Tolerances) -> Result<Vec6> {
    let x0 = State6::from_vec6(&(seg.x_ref_start.to_vec6() + dx));
    let x1 = cr3bp::propagate(&x0, seg.t_start, seg.t_end, c, tol)?;
    Ok(x1.to_vec6() - seg.x_ref_end.to_vec6())
}
