//! Conic programs for the two steering objectives, assembled for and solved
//! by Clarabel.
//!
//! Decision variables are scaled so the solver sees O(1) data: means and
//! covariance factors are divided by `sigma` (the largest initial standard
//! deviation), and each gain is expressed in the whitened basis of its
//! open-loop factor row.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, Matrix3x6, Vector3};
use serde::{Deserialize, Serialize};

use super::blocks::BlockOperators;
use super::filter::FilterSchedule;
use super::{chi2_quantile, evaluate_policy, psd_factor, NormMode, ObjectiveKind, SteeringConfig, SteeringSolution};
use crate::cr3bp::Mat6;
use crate::error::{Error, Result};
use crate::mon::{evaluate_bound, GCoefficients};
use crate::stt::SUPPORTED_ORDER;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: u32,
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 400,
            tol_feas: 5e-9,
            tol_gap_abs: 1e-9,
            tol_gap_rel: 1e-8,
            verbose: false,
        }
    }
}

/// Affine expression `c + sum coef * x[idx]`.
#[derive(Debug, Clone, Default)]
struct Expr {
    c: f64,
    t: Vec<(usize, f64)>,
}

impl Expr {
    fn constant(c: f64) -> Self {
        Self { c, t: Vec::new() }
    }

    fn var(i: usize, coef: f64) -> Self {
        Self {
            c: 0.0,
            t: vec![(i, coef)],
        }
    }

    fn add(mut self, i: usize, coef: f64) -> Self {
        if coef != 0.0 {
            self.t.push((i, coef));
        }
        self
    }

    fn scaled(mut self, a: f64) -> Self {
        self.c *= a;
        for t in &mut self.t {
            t.1 *= a;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Cone {
    Zero(usize),
    Nonneg(usize),
    Soc(usize),
    #[cfg_attr(not(feature = "sdp"), allow(dead_code))]
    Psd(usize),
}

/// Rows of `A x + s = b`, `s` in a product of cones. Each row is pushed as
/// the affine expression that the slack must equal.
#[derive(Debug, Clone, Default)]
struct Builder {
    rows: usize,
    ti: Vec<usize>,
    tj: Vec<usize>,
    tv: Vec<f64>,
    b: Vec<f64>,
    cones: Vec<Cone>,
}

impl Builder {
    fn push(&mut self, e: &Expr) {
        for &(j, v) in &e.t {
            if v != 0.0 {
                self.ti.push(self.rows);
                self.tj.push(j);
                self.tv.push(-v);
            }
        }
        self.b.push(e.c);
        self.rows += 1;
    }

    fn cone(&mut self, c: Cone) {
        match (self.cones.last_mut(), c) {
            (Some(Cone::Zero(n)), Cone::Zero(m)) => *n += m,
            (Some(Cone::Nonneg(n)), Cone::Nonneg(m)) => *n += m,
            _ => self.cones.push(c),
        }
    }

    fn zero(&mut self, e: Expr) {
        self.push(&e);
        self.cone(Cone::Zero(1));
    }

    fn nonneg(&mut self, e: Expr) {
        self.push(&e);
        self.cone(Cone::Nonneg(1));
    }

    /// `es[0] >= ||es[1..]||`.
    fn soc(&mut self, es: &[Expr]) {
        for e in es {
            self.push(e);
        }
        self.cone(Cone::Soc(es.len()));
    }

    /// `t >= ||M||_2` through `[[t I, M], [M^T, t I]] >= 0`; `m` is given
    /// row-major as `p x q` expressions.
    fn spectral(&mut self, t: usize, m: &[Expr], p: usize, q: usize) {
        let n = p + q;
        let sqrt2 = std::f64::consts::SQRT_2;
        for col in 0..n {
            for row in 0..=col {
                let e = if row == col {
                    Expr::var(t, 1.0)
                } else if row < p && col >= p {
                    m[row * q + (col - p)].clone().scaled(sqrt2)
                } else {
                    Expr::constant(0.0)
                };
                self.push(&e);
            }
        }
        self.cones.push(Cone::Psd(n));
    }
}

/// Variable offsets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Layout {
    n_vars: usize,
    u_bar: usize,
    gains: usize,
    mean: usize,
    f_plus: Vec<usize>,
    u_fac: Vec<usize>,
    p: usize,
    q: usize,
    a_r: usize,
    b_r: usize,
    a_v: usize,
    b_v: usize,
    s_r: usize,
    s_v: usize,
    gamma: usize,
}

fn cols(k: usize) -> usize {
    6 * (k + 2)
}

impl Layout {
    fn new(n: usize, kind: ObjectiveKind) -> Self {
        let m = n - 1;
        let mut next = 0;
        let mut take = |len: usize| {
            let at = next;
            next += len;
            at
        };
        let u_bar = take(3 * m);
        let gains = take(18 * m);
        let mean = take(6 * n);
        let f_plus = (0..n).map(|k| take(6 * cols(k))).collect();
        let u_fac = (0..m).map(|k| take(3 * cols(k))).collect();
        let p = take(m);
        let q = take(m);
        let nl = kind == ObjectiveKind::MinNonlinearity;
        let extra = if nl { n } else { 0 };
        let (a_r, b_r, a_v, b_v, s_r, s_v) = (take(extra), take(extra), take(extra), take(extra), take(extra), take(extra));
        let gamma = take(1);
        Self {
            n_vars: next,
            u_bar,
            gains,
            mean,
            f_plus,
            u_fac,
            p,
            q,
            a_r,
            b_r,
            a_v,
            b_v,
            s_r,
            s_v,
            gamma,
        }
    }

    fn fp(&self, k: usize, i: usize, c: usize) -> usize {
        self.f_plus[k] + i * cols(k) + c
    }

    fn uf(&self, k: usize, i: usize, c: usize) -> usize {
        self.u_fac[k] + i * cols(k) + c
    }

    fn gain(&self, k: usize, i: usize, j: usize) -> usize {
        self.gains + 18 * k + 6 * i + j
    }
}

/// An assembled conic program plus everything needed to interpret its
/// solution.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub kind: ObjectiveKind,
    pub cfg: SteeringConfig,
    pub n_nodes: usize,
    pub n_vars: usize,
    pub n_rows: usize,
    /// Variable scale for means and factors.
    pub sigma: f64,
    /// Per-maneuver whitening maps: `K_k = sigma K''_k W_k`.
    pub whiten: Vec<DMatrix<f64>>,
    /// Objective scale: the solver minimizes `gamma / objective_scale`
    /// (for min-cov `gamma` is the Frobenius norm, not its square).
    pub objective_scale: f64,
    layout: Layout,
    builder: Builder,
    blocks: BlockOperators,
    filter: FilterSchedule,
    g: GCoefficients,
}

/// Builds the min-NL or min-cov program over `(U_bar, K)`.
pub fn build_program(
    kind: ObjectiveKind,
    blocks: &BlockOperators,
    filter: &FilterSchedule,
    g: &GCoefficients,
    cfg: &SteeringConfig,
) -> Result<ConicProblem> {
    cfg.validate()?;
    let n = blocks.n_nodes;
    if n < 2 {
        return Err(Error::invalid("steering needs at least one segment"));
    }
    if filter.n_nodes() != n || g.n_nodes != n {
        return Err(Error::DimensionMismatch {
            context: "program inputs node count",
            expected: n,
            found: if filter.n_nodes() != n { filter.n_nodes() } else { g.n_nodes },
        });
    }
    if g.m_star != SUPPORTED_ORDER {
        return Err(Error::UnsupportedOrder(g.m_star));
    }
    #[cfg(not(feature = "sdp"))]
    if cfg.norm_mode == NormMode::Exact {
        return Err(Error::invalid("exact norm mode requires the `sdp` feature"));
    }
    let m = n - 1;
    let layout = Layout::new(n, kind);
    let sigma = blocks.p_hat0_half.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if !(sigma > 0.0) {
        return Err(Error::invalid("initial estimate covariance is zero"));
    }
    let q = chi2_quantile(cfg.eps_x, 3)?.sqrt();
    let rows_k: Vec<DMatrix<f64>> = (0..n).map(|k| blocks.factor_row(k)).collect();
    // factor_row(k) = U S V^T; with K = sigma K'' S^-1 U^T the control
    // factor becomes sigma K'' V^T, which has orthonormal rows.
    let mut whiten = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    for r in &rows_k[..m] {
        let svd = r.clone().svd(true, true);
        let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let smax = svd.singular_values.max();
        let inv = svd.singular_values.map(|v| if v > 1e-14 * smax { 1.0 / v } else { 0.0 });
        whiten.push(DMatrix::from_diagonal(&inv) * u.transpose());
        basis.push(vt);
    }
    let tilde: Vec<Mat6> = filter.p_post.iter().map(psd_factor).collect::<Result<_>>()?;
    let mut bld = Builder::default();
    let l = &layout;

    // Post-maneuver mean recursion and terminal condition.
    for k in 0..n {
        for i in 0..6 {
            let mut e = Expr::var(l.mean + 6 * k + i, 1.0);
            if k == 0 {
                e.c = -cfg.mean0[i] / sigma;
            } else {
                let a = &blocks.stms[k - 1];
                for j in 0..6 {
                    e = e.add(l.mean + 6 * (k - 1) + j, -a[(i, j)]);
                }
            }
            if k < m && i >= 3 {
                e = e.add(l.u_bar + 3 * k + (i - 3), -1.0);
            }
            bld.zero(e);
        }
    }
    for i in 0..6 {
        let mut e = Expr::var(l.mean + 6 * (n - 1) + i, 1.0);
        e.c = -cfg.target[i] / sigma;
        bld.zero(e);
    }

    // Control factor U''_k = K''_k Q_k.
    for k in 0..m {
        let qk = &basis[k];
        for i in 0..3 {
            for c in 0..cols(k) {
                let mut e = Expr::var(l.uf(k, i, c), 1.0);
                for j in 0..6 {
                    e = e.add(l.gain(k, i, j), -qk[(j, c)]);
                }
                bld.zero(e);
            }
        }
    }

    // Closed-loop factor recursion F+_k = A F+_{k-1} + Lambda_k + B U_k.
    for k in 0..n {
        for i in 0..6 {
            for c in 0..cols(k) {
                let mut e = Expr::var(l.fp(k, i, c), 1.0);
                if k == 0 {
                    e.c = -rows_k[0][(i, c)] / sigma;
                } else {
                    let a = &blocks.stms[k - 1];
                    if c < cols(k - 1) {
                        for j in 0..6 {
                            e = e.add(l.fp(k - 1, j, c), -a[(i, j)]);
                        }
                    } else {
                        e.c = -blocks.innovation_half[k][(i, c - cols(k - 1))] / sigma;
                    }
                }
                if k < m && i >= 3 {
                    e = e.add(l.uf(k, i - 3, c), -1.0);
                }
                bld.zero(e);
            }
        }
    }

    // Control chance constraints.
    for k in 0..m {
        bld.nonneg(
            Expr::constant(cfg.u_max / sigma)
                .add(l.p + k, -1.0)
                .add(l.q + k, -q),
        );
    }
    for k in 0..m {
        let mut es = vec![Expr::var(l.p + k, 1.0)];
        es.extend((0..3).map(|i| Expr::var(l.u_bar + 3 * k + i, 1.0)));
        bld.soc(&es);
        let fac: Vec<Expr> = (0..3)
            .flat_map(|i| (0..cols(k)).map(move |c| (i, c)))
            .map(|(i, c)| Expr::var(l.uf(k, i, c), 1.0))
            .collect();
        norm_bound(&mut bld, cfg.norm_mode, l.q + k, fac, 3, cols(k));
    }

    // Row block `start..start+3` of the post-maneuver factor, followed by the
    // constant estimation-error block.
    let post_block = |k: usize, start: usize| -> Vec<Expr> {
        let w = cols(k) + 6;
        let mut out = Vec::with_capacity(3 * w);
        for i in 0..3 {
            for c in 0..cols(k) {
                out.push(Expr::var(l.fp(k, start + i, c), 1.0));
            }
            for j in 0..6 {
                out.push(Expr::constant(tilde[k][(start + i, j)] / sigma));
            }
        }
        out
    };

    let objective_scale;
    match kind {
        ObjectiveKind::MinNonlinearity => {
            let gb = g.block(2).ok_or(Error::UnsupportedOrder(2))?;
            let wr = (1.0 - cfg.lambda) / 2.0;
            let wv = cfg.lambda / 2.0;
            let row_max = (0..n)
                .map(|k| (0..n).map(|j| wr * gb.g_r[(k, j)] + wv * gb.g_v[(k, j)]).sum::<f64>())
                .fold(0.0, f64::max);
            objective_scale = if row_max > 0.0 { sigma * sigma * row_max } else { sigma * sigma };
            let coef = sigma * sigma / objective_scale;
            for k in 0..n {
                let mut e = Expr::var(l.gamma, 1.0);
                for j in 0..n {
                    e = e.add(l.s_r + j, -wr * gb.g_r[(k, j)] * coef);
                    e = e.add(l.s_v + j, -wv * gb.g_v[(k, j)] * coef);
                }
                bld.nonneg(e);
            }
            for k in 0..n {
                for (start, a, b, s) in [(0, l.a_r, l.b_r, l.s_r), (3, l.a_v, l.b_v, l.s_v)] {
                    let mut es = vec![Expr::var(a + k, 1.0)];
                    es.extend((0..3).map(|i| Expr::var(l.mean + 6 * k + start + i, 1.0)));
                    bld.soc(&es);
                    norm_bound(&mut bld, cfg.norm_mode, b + k, post_block(k, start), 3, cols(k) + 6);
                    // s >= (a + q b)^2
                    bld.soc(&[
                        Expr::var(s + k, 1.0).with_const(1.0),
                        Expr::var(a + k, 2.0).add(b + k, 2.0 * q),
                        Expr::var(s + k, 1.0).with_const(-1.0),
                    ]);
                }
            }
        }
        ObjectiveKind::MinCovariance => {
            // max_k ||H_r P_k^{1/2}||_F has the same minimizers as its square
            // and needs only plain second-order cones.
            objective_scale = sigma;
            for k in 0..n {
                let mut es = vec![Expr::var(l.gamma, 1.0)];
                for i in 0..3 {
                    for c in 0..cols(k) {
                        let e = if k == 0 {
                            Expr::constant(rows_k[0][(i, c)] / sigma)
                        } else if c < cols(k - 1) {
                            let a = &blocks.stms[k - 1];
                            (0..6).fold(Expr::default(), |e, j| e.add(l.fp(k - 1, j, c), a[(i, j)]))
                        } else {
                            Expr::constant(blocks.innovation_half[k][(i, c - cols(k - 1))] / sigma)
                        };
                        es.push(e);
                    }
                    for j in 0..6 {
                        es.push(Expr::constant(tilde[k][(i, j)] / sigma));
                    }
                }
                bld.soc(&es);
            }
        }
    }
    Ok(ConicProblem {
        kind,
        cfg: *cfg,
        n_nodes: n,
        n_vars: layout.n_vars,
        n_rows: bld.rows,
        sigma,
        whiten,
        objective_scale,
        layout,
        builder: bld,
        blocks: blocks.clone(),
        filter: filter.clone(),
        g: g.clone(),
    })
}

impl Expr {
    fn with_const(mut self, c: f64) -> Self {
        self.c += c;
        self
    }
}

fn norm_bound(bld: &mut Builder, mode: NormMode, t: usize, m: Vec<Expr>, p: usize, q: usize) {
    match mode {
        NormMode::Surrogate => {
            let mut es = Vec::with_capacity(m.len() + 1);
            es.push(Expr::var(t, 1.0));
            es.extend(m);
            bld.soc(&es);
        }
        NormMode::Exact => bld.spectral(t, &m, p, q),
    }
}

fn to_clarabel(c: Cone) -> SupportedConeT<f64> {
    match c {
        Cone::Zero(n) => SupportedConeT::ZeroConeT(n),
        Cone::Nonneg(n) => SupportedConeT::NonnegativeConeT(n),
        Cone::Soc(n) => SupportedConeT::SecondOrderConeT(n),
        #[cfg(feature = "sdp")]
        Cone::Psd(n) => SupportedConeT::PSDTriangleConeT(n),
        #[cfg(not(feature = "sdp"))]
        Cone::Psd(_) => unreachable!("semidefinite cones are rejected at build time"),
    }
}

/// Solves the program and evaluates the resulting policy.
pub fn solve(problem: &ConicProblem, solver_cfg: &SolverConfig) -> Result<SteeringSolution> {
    let bld = &problem.builder;
    let l = &problem.layout;
    let a = CscMatrix::new_from_triplets(bld.rows, l.n_vars, bld.ti.clone(), bld.tj.clone(), bld.tv.clone());
    let p = CscMatrix::zeros((l.n_vars, l.n_vars));
    let mut obj = vec![0.0; l.n_vars];
    obj[l.gamma] = 1.0;
    let cones: Vec<_> = bld.cones.iter().copied().map(to_clarabel).collect();
    let settings = DefaultSettingsBuilder::default()
        .verbose(solver_cfg.verbose)
        .max_iter(solver_cfg.max_iter)
        .tol_feas(solver_cfg.tol_feas)
        .tol_gap_abs(solver_cfg.tol_gap_abs)
        .tol_gap_rel(solver_cfg.tol_gap_rel)
        .max_threads(1)
        .build()
        .map_err(|e| Error::Solver { status: e.to_string() })?;
    let mut solver = DefaultSolver::new(&p, &obj, &a, &bld.b, &cones, settings)
        .map_err(|e| Error::Solver { status: e.to_string() })?;
    solver.solve();
    let sol = &solver.solution;
    let status = format!("{:?}", sol.status);
    match sol.status {
        SolverStatus::Solved => {}
        SolverStatus::AlmostSolved => log::warn!("solver returned reduced accuracy ({status})"),
        _ => return Err(Error::Solver { status }),
    }
    let x = &sol.x;
    let sigma = problem.sigma;
    let m = problem.n_nodes - 1;
    let u_bar: Vec<Vector3<f64>> = (0..m)
        .map(|k| Vector3::from_fn(|i, _| sigma * x[l.u_bar + 3 * k + i]))
        .collect();
    let gains: Vec<Matrix3x6<f64>> = (0..m)
        .map(|k| {
            let kt = DMatrix::from_fn(3, 6, |i, j| sigma * x[l.gain(k, i, j)]);
            let kk = kt * &problem.whiten[k];
            Matrix3x6::from_fn(|i, j| kk[(i, j)])
        })
        .collect();
    let cfg = &problem.cfg;
    let stats = evaluate_policy(&problem.blocks, &problem.filter, &u_bar, &gains, cfg)?;
    let mon = evaluate_bound(&problem.g, &stats.r_tilde, &stats.v_tilde, cfg.lambda)?;
    let objective_value = match problem.kind {
        ObjectiveKind::MinNonlinearity => mon.objective,
        ObjectiveKind::MinCovariance => stats.max_pos_trace(),
    };
    let terminal_residual = (stats.mean_pre[problem.n_nodes - 1] - cfg.target).amax();
    Ok(SteeringSolution {
        kind: problem.kind,
        norm_mode: cfg.norm_mode,
        u_bar,
        gains,
        x_bar: stats.mean_pre.clone(),
        r_tilde: stats.r_tilde.clone(),
        v_tilde: stats.v_tilde.clone(),
        stats,
        mon,
        objective_value,
        solver_objective: match problem.kind {
            ObjectiveKind::MinNonlinearity => x[l.gamma] * problem.objective_scale,
            ObjectiveKind::MinCovariance => (x[l.gamma] * problem.objective_scale).powi(2),
        },
        terminal_residual,
        status,
        iterations: sol.iterations,
        primal_residual: sol.r_prim,
        dual_residual: sol.r_dual,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::cr3bp::Vec6;
    use crate::mon::build_g_coefficients;
    use crate::steering::filter::{kalman_schedule, MeasurementModel};
    use crate::steering::testkit::{diag, plan};
    use crate::steering::{assemble_blocks, quantile_upper_bound};
    use crate::stt::DiscretizedPlan;
    use crate::tensors::NormConfig;

    struct Fixture {
        plan: DiscretizedPlan,
        filter: FilterSchedule,
        blocks: BlockOperators,
        p_hat0: Mat6,
    }

    fn fixture(segments: usize, seed: Option<u64>) -> Fixture {
        let plan = plan(segments, seed);
        let filter = kalman_schedule(&plan, &MeasurementModel::full_state(1e-3, 1e-3), &diag(0.01, 0.01)).unwrap();
        let p_hat0 = diag(0.1, 0.05);
        let blocks = assemble_blocks(&plan, &filter, &p_hat0).unwrap();
        Fixture {
            plan,
            filter,
            blocks,
            p_hat0,
        }
    }

    fn cfg(u_max: f64) -> SteeringConfig {
        SteeringConfig {
            u_max,
            eps_x: 1e-3,
            lambda: 0.52,
            norm_mode: NormMode::Surrogate,
            mean0: Vec6::new(0.02, 0.0, -0.01, 0.0, 0.01, 0.0),
            target: Vec6::new(0.02, 0.0, -0.01, 0.0, 0.01, 0.0),
        }
    }

    fn pos_trace(p: &Mat6) -> f64 {
        (0..3).map(|i| p[(i, i)]).sum()
    }

    #[test]
    fn min_cov_without_authority_matches_open_loop_covariance() {
        let fx = fixture(1, None);
        let g = GCoefficients::zeros(2, 2);
        let mut c = cfg(0.0);
        c.target = fx.plan.segments[0].stm * c.mean0;
        let pr = build_program(ObjectiveKind::MinCovariance, &fx.blocks, &fx.filter, &g, &c).unwrap();
        let sol = solve(&pr, &SolverConfig::default()).unwrap();
        // Closed form: P_0 = P^0 + P~0^-, P_1 = A P_0 A^T.
        let p0 = fx.p_hat0 + fx.filter.p_minus[0];
        let a = fx.plan.segments[0].stm;
        let expect = pos_trace(&p0).max(pos_trace(&(a * p0 * a.transpose())));
        assert!((sol.objective_value - expect).abs() <= 1e-9 * expect, "{} vs {expect}", sol.objective_value);
        assert!((sol.solver_objective - expect).abs() <= 1e-6 * expect);
    }

    #[test]
    fn vanishing_coefficients_give_zero_bound() {
        let fx = fixture(3, None);
        let g = GCoefficients::zeros(4, 2);
        let pr = build_program(ObjectiveKind::MinNonlinearity, &fx.blocks, &fx.filter, &g, &cfg(1.0)).unwrap();
        let sol = solve(&pr, &SolverConfig::default()).unwrap();
        assert_eq!(sol.objective_value, 0.0);
        assert!(sol.solver_objective.abs() < 1e-8);
    }

    #[test]
    fn min_nl_objective_is_homogeneous_in_g() {
        let fx = fixture(3, Some(11));
        let g = build_g_coefficients(&fx.plan, 2, &NormConfig::default()).unwrap();
        let c = cfg(0.5);
        let base = solve(&build_program(ObjectiveKind::MinNonlinearity, &fx.blocks, &fx.filter, &g, &c).unwrap(), &SolverConfig::default()).unwrap();
        assert!(base.objective_value > 0.0);
        for alpha in [0.25, 8.0] {
            let gs = g.scaled(alpha);
            let s = solve(&build_program(ObjectiveKind::MinNonlinearity, &fx.blocks, &fx.filter, &gs, &c).unwrap(), &SolverConfig::default()).unwrap();
            let rel = (s.objective_value - alpha * base.objective_value).abs() / (alpha * base.objective_value);
            assert!(rel < 1e-6, "alpha {alpha}: rel {rel}");
        }
    }

    #[test]
    fn solutions_are_feasible() {
        let fx = fixture(4, Some(3));
        let g = build_g_coefficients(&fx.plan, 2, &NormConfig::default()).unwrap();
        let c = cfg(0.4);
        for kind in [ObjectiveKind::MinNonlinearity, ObjectiveKind::MinCovariance] {
            let sol = solve(&build_program(kind, &fx.blocks, &fx.filter, &g, &c).unwrap(), &SolverConfig::default()).unwrap();
            assert_eq!(sol.status, "Solved");
            assert!(sol.objective_value >= 0.0);
            assert!(sol.terminal_residual < 1e-8, "{kind}: {}", sol.terminal_residual);
            assert!(sol.primal_residual < 1e-8);
            for (k, bound) in sol.stats.control_bound.iter().enumerate() {
                assert!(*bound <= c.u_max * (1.0 + 1e-6));
                // Surrogate constraints imply the spectral ones.
                let fac = DMatrix::from_fn(3, 6, |i, j| sol.gains[k][(i, j)]) * fx.blocks.factor_row(k);
                let spectral = quantile_upper_bound(
                    &nalgebra::DVector::from_column_slice(sol.u_bar[k].as_slice()),
                    &fac,
                    c.eps_x,
                    3,
                    NormMode::Exact,
                )
                .unwrap();
                assert!(spectral <= bound + 1e-12);
            }
            assert!(sol.r_tilde.iter().chain(&sol.v_tilde).all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn predicted_covariance_is_estimate_plus_error() {
        let fx = fixture(3, None);
        let m = fx.blocks.n_maneuvers();
        let stats = evaluate_policy(
            &fx.blocks,
            &fx.filter,
            &vec![Vector3::zeros(); m],
            &vec![Matrix3x6::zeros(); m],
            &cfg(1.0),
        )
        .unwrap();
        for k in 0..fx.blocks.n_nodes {
            let s_kk = fx.blocks.s.view((6 * k, 6 * k), (6, 6));
            let expect = Mat6::from_fn(|i, j| s_kk[(i, j)]) + fx.filter.p_post[k];
            assert!((stats.covariance(k) - expect).norm() <= 1e-10 * expect.norm());
            // Kalman identity: estimate plus error covariance equals the
            // propagated truth covariance.
            let truth = fx.blocks.phi(k, 0) * (fx.p_hat0 + fx.filter.p_minus[0]) * fx.blocks.phi(k, 0).transpose();
            assert!((stats.covariance(k) - truth).norm() <= 1e-10 * truth.norm());
        }
    }

    #[test]
    fn full_size_dimensions() {
        let fx = fixture(18, None);
        let g = GCoefficients::zeros(19, 2);
        let pr = build_program(ObjectiveKind::MinCovariance, &fx.blocks, &fx.filter, &g, &cfg(1.0)).unwrap();
        assert_eq!(pr.n_nodes, 19);
        assert_eq!(pr.whiten.len(), 18);
        assert_eq!(pr.layout.u_bar, 0);
        assert_eq!(pr.layout.gains, 3 * 18);
        assert_eq!(pr.layout.mean - pr.layout.gains, 18 * 18);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let fx = fixture(3, None);
        let g = GCoefficients::zeros(5, 2);
        assert!(build_program(ObjectiveKind::MinNonlinearity, &fx.blocks, &fx.filter, &g, &cfg(1.0)).is_err());
        let mut c = cfg(1.0);
        c.lambda = 1.5;
        assert!(build_program(ObjectiveKind::MinNonlinearity, &fx.blocks, &fx.filter, &GCoefficients::zeros(4, 2), &c).is_err());
    }
}
