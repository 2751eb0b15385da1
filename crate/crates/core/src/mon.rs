//! Measure-of-nonlinearity bound: g-coefficient matrices built from STT
//! tensor norms and the accumulated-error bound vectors they induce.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cr3bp::{Mat6, Vec6};
use crate::error::{Error, Result};
use crate::stt::{accumulate_errors, DiscretizedPlan, SUPPORTED_ORDER};
use crate::tensors::{contract_left, split_position_velocity, tensor_two_norm, DenseTensor, NormConfig};

/// Inflation applied to tensor norms whose eigenpair search did not converge.
pub const NONCONVERGED_INFLATION: f64 = 1.05;

/// Strictly lower-triangular coefficient matrices for one series order `m`.
/// Entry `(j, k)` bounds the contribution of the segment-`k` remainder to the
/// error at node `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBlock {
    pub m: usize,
    pub g_r: DMatrix<f64>,
    pub g_v: DMatrix<f64>,
    /// Unsplit 6-dimensional norms, used to audit the bound on the full state.
    pub g_full: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GCoefficients {
    pub m_star: usize,
    pub n_nodes: usize,
    pub blocks: Vec<GBlock>,
    /// `(j, k)` entries whose norm search did not converge (inflated).
    pub flagged: Vec<(usize, usize)>,
    /// Frobenius norm of each cumulative STM product, `(j, k, norm)`.
    pub product_norms: Vec<(usize, usize, f64)>,
}

impl GCoefficients {
    pub fn block(&self, m: usize) -> Option<&GBlock> {
        self.blocks.iter().find(|b| b.m == m)
    }

    /// All coefficients multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.g_r *= alpha;
            b.g_v *= alpha;
            b.g_full *= alpha;
        }
        out
    }

    pub fn zeros(n_nodes: usize, m_star: usize) -> Self {
        Self {
            m_star,
            n_nodes,
            blocks: (2..=m_star)
                .map(|m| GBlock {
                    m,
                    g_r: DMatrix::zeros(n_nodes, n_nodes),
                    g_v: DMatrix::zeros(n_nodes, n_nodes),
                    g_full: DMatrix::zeros(n_nodes, n_nodes),
                })
                .collect(),
            flagged: Vec::new(),
            product_norms: Vec::new(),
        }
    }
}

fn factorial(m: usize) -> f64 {
    (1..=m).map(|i| i as f64).product()
}

fn to_dmatrix(m: &Mat6) -> DMatrix<f64> {
    DMatrix::from_fn(6, 6, |i, j| m[(i, j)])
}

#[derive(Debug, Clone, Copy)]
struct EntryNorms {
    r: f64,
    v: f64,
    full: f64,
    converged: bool,
}

/// Position, velocity and full norms of `P . stt`.
fn entry_norms(product: &Mat6, stt: &DenseTensor, cfg: &NormConfig) -> Result<EntryNorms> {
    let b = contract_left(&to_dmatrix(product), stt)?;
    let (br, bv) = split_position_velocity(&b)?;
    let nr = tensor_two_norm(&br, cfg)?;
    let nv = tensor_two_norm(&bv, cfg)?;
    let nf = tensor_two_norm(&b, cfg)?;
    let inflate = |n: &crate::tensors::TensorNorm| {
        if n.converged {
            n.value
        } else {
            n.value * NONCONVERGED_INFLATION
        }
    };
    Ok(EntryNorms {
        r: inflate(&nr),
        v: inflate(&nv),
        full: inflate(&nf),
        converged: nr.converged && nv.converged && nf.converged,
    })
}

/// Builds the g-coefficient matrices: for segment `k` and node `j > k`,
/// `g(j, k) = || split(A_{j-1} .. A_{k+1} . Phi2_k) ||_2`.
pub fn build_g_coefficients(plan: &DiscretizedPlan, m_star: usize, cfg: &NormConfig) -> Result<GCoefficients> {
    if m_star != SUPPORTED_ORDER {
        return Err(Error::UnsupportedOrder(m_star));
    }
    plan.check()?;
    let n = plan.n_nodes();
    let columns: Vec<Vec<(usize, Mat6, EntryNorms)>> = (0..plan.segments.len())
        .into_par_iter()
        .map(|k| {
            let stt = &plan.segments[k].stt;
            let mut product = Mat6::identity();
            let mut col = Vec::with_capacity(n - k - 1);
            for j in (k + 1)..n {
                if j > k + 1 {
                    product = plan.segments[j - 1].stm * product;
                }
                col.push((j, product, entry_norms(&product, stt, cfg)?));
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;

    let mut g = GCoefficients::zeros(n, m_star);
    let block = &mut g.blocks[0];
    for (k, col) in columns.iter().enumerate() {
        for (j, product, e) in col {
            block.g_r[(*j, k)] = e.r;
            block.g_v[(*j, k)] = e.v;
            block.g_full[(*j, k)] = e.full;
            if !e.converged {
                g.flagged.push((*j, k));
            }
            g.product_norms.push((*j, k, product.norm()));
        }
    }
    if !g.flagged.is_empty() {
        log::warn!("{} g-coefficient entries did not converge and were inflated by 5%", g.flagged.len());
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonBound {
    pub eps_r: Vec<f64>,
    pub eps_v: Vec<f64>,
    pub lambda: f64,
    /// `max_k [(1 - lambda) eps_r_k + lambda eps_v_k]`.
    pub objective: f64,
}

impl MonBound {
    pub fn blended(&self) -> Vec<f64> {
        self.eps_r
            .iter()
            .zip(&self.eps_v)
            .map(|(r, v)| (1.0 - self.lambda) * r + self.lambda * v)
            .collect()
    }
}

fn check_nonnegative(name: &str, v: &[f64]) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::invalid(format!("{name} has a negative or non-finite entry {bad}")));
    }
    Ok(())
}

/// `eps = sum_m (1/m!) G[m] x^m` applied elementwise to a nonnegative vector.
pub fn bound_vector(g: &GCoefficients, pick: impl Fn(&GBlock) -> &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = DVector::zeros(g.n_nodes);
    for b in &g.blocks {
        let pw = DVector::from_iterator(x.len(), x.iter().map(|v| v.powi(b.m as i32)));
        out += pick(b) * pw / factorial(b.m);
    }
    out.iter().copied().collect()
}

pub fn evaluate_bound(g: &GCoefficients, r_tilde: &[f64], v_tilde: &[f64], lambda: f64) -> Result<MonBound> {
    for (name, v) in [("r_tilde", r_tilde), ("v_tilde", v_tilde)] {
        if v.len() != g.n_nodes {
            return Err(Error::DimensionMismatch {
                context: "bound input length",
                expected: g.n_nodes,
                found: v.len(),
            });
        }
        check_nonnegative(name, v)?;
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let eps_r = bound_vector(g, |b| &b.g_r, r_tilde);
    let eps_v = bound_vector(g, |b| &b.g_v, v_tilde);
    let mut bound = MonBound {
        eps_r,
        eps_v,
        lambda,
        objective: 0.0,
    };
    bound.objective = bound.blended().into_iter().fold(0.0, f64::max);
    Ok(bound)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleReport {
    /// `||eps_k||_2` from the error recursion.
    pub error_norms: Vec<f64>,
    /// Bound evaluated from the unsplit coefficients.
    pub bounds: Vec<f64>,
    /// `bound - error`, nonnegative when the inequality holds.
    pub margins: Vec<f64>,
    pub holds: bool,
}

/// Audits `||eps_k|| <= eps~_k` for a deterministic list of post-maneuver
/// deviations (one per segment).
pub fn triangle_bound_check(plan: &DiscretizedPlan, g: &GCoefficients, deviations: &[Vec6]) -> Result<TriangleReport> {
    let eps = accumulate_errors(plan, deviations)?;
    let mut norms: Vec<f64> = deviations.iter().map(|d| d.norm()).collect();
    norms.push(0.0);
    let bounds = bound_vector(g, |b| &b.g_full, &norms);
    let error_norms: Vec<f64> = eps.iter().map(|e| e.norm()).collect();
    let margins: Vec<f64> = bounds.iter().zip(&error_norms).map(|(b, e)| b - e).collect();
    // Allow rounding at the level of the bound itself.
    let holds = margins
        .iter()
        .zip(&bounds)
        .all(|(m, b)| *m >= -1e-12 * b.max(f64::MIN_POSITIVE));
    Ok(TriangleReport {
        error_norms,
        bounds,
        margins,
        holds,
    })
}
