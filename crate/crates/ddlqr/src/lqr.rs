//! Model-based building blocks: the classic LQR semidefinite program, the
//! Riccati fixed-point oracle, the input-constrained per-step LMI program,
//! and the model-based receding-horizon loop.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::conic::{AffExpr, AffMatrix, ConicProblem, ConicSolution, SolveStatus};
use crate::error::{Error, Result};
use crate::sim::{step_plant, AlgorithmTag, EpisodeLog, EpisodeResult, NoiseSource, StepRow};

/// Plant matrices; single input per the problem setting.
#[derive(Clone, Debug)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension("A must be square".into()));
        }
        if b.len() != a.nrows() {
            return Err(Error::Dimension("B length must match A".into()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite system entries".into()));
        }
        Ok(LtiSystem { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|l| l.norm())
            .fold(0.0, f64::max)
    }
}

/// Cost weights: Q PSD, R a positive scalar (m = 1).
#[derive(Clone, Debug)]
pub struct LqrWeights {
    pub q: DMatrix<f64>,
    pub r: f64,
}

impl LqrWeights {
    pub fn new(q: DMatrix<f64>, r: f64) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(Error::Dimension("Q must be square".into()));
        }
        let sym = (&q + q.transpose()) * 0.5;
        let min_eig = sym
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 {
            return Err(Error::InvalidArgument(format!(
                "Q must be PSD (min eigenvalue {min_eig:.3e})"
            )));
        }
        if r <= 0.0 {
            return Err(Error::InvalidArgument("R must be positive".into()));
        }
        Ok(LqrWeights { q, r })
    }

    pub fn identity(n: usize) -> Self {
        LqrWeights {
            q: DMatrix::identity(n, n),
            r: 1.0,
        }
    }
}

/// Per-step synthesis output. The gain is always recomputed as `M P^-1`.
#[derive(Clone, Debug)]
pub struct ControllerState {
    pub p: DMatrix<f64>,
    pub m: RowDVector<f64>,
    pub w: f64,
    pub tau: f64,
    /// `f64::INFINITY` when the step carried no input constraint.
    pub beta: f64,
    pub gamma: f64,
}

impl ControllerState {
    pub fn gain(&self) -> RowDVector<f64> {
        let p_inv = self
            .p
            .clone()
            .try_inverse()
            .expect("P is positive definite by construction");
        &self.m * p_inv
    }

    pub fn control(&self, x: &DVector<f64>) -> f64 {
        (self.gain() * x)[0]
    }

    /// `x' P^-1 x`
    pub fn lyapunov(&self, x: &DVector<f64>) -> f64 {
        let p_inv = self.p.clone().try_inverse().expect("P positive definite");
        (x.transpose() * p_inv * x)[0]
    }

    /// Certified worst-case bound `tau * gamma`.
    pub fn bound(&self) -> f64 {
        self.tau * self.gamma
    }

    /// The five per-step LMI blocks evaluated at a given plant `(A, B)`.
    /// Block order: input-margin block, gain block, state block, cost block,
    /// and the scalar trace row as a 1x1 matrix.
    pub fn lmi_blocks(
        &self,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        weights: &LqrWeights,
        eps: f64,
        x: &DVector<f64>,
    ) -> Vec<DMatrix<f64>> {
        let n = self.p.nrows();
        let c = 1.0 / self.tau + eps;
        let apbm = a * &self.p + b * &self.m;
        let mut b1 = DMatrix::zeros(2 * n, 2 * n);
        b1.view_mut((0, 0), (n, n))
            .copy_from(&(&self.p - DMatrix::identity(n, n) * c));
        b1.view_mut((0, n), (n, n)).copy_from(&apbm);
        b1.view_mut((n, 0), (n, n)).copy_from(&apbm.transpose());
        b1.view_mut((n, n), (n, n)).copy_from(&self.p);

        let b2 = bordered_num(self.beta, &self.m, &self.p);
        let b3 = bordered_num(self.beta, &(x.transpose() * self.beta), &self.p);
        let b4 = bordered_num(self.w, &(&self.m * weights.r.sqrt()), &self.p);
        let c1 = self.gamma - (&weights.q * &self.p).trace() - self.w;
        vec![b1, b2, b3, b4, DMatrix::from_element(1, 1, c1)]
    }

    /// Smallest eigenvalue over all five LMI blocks at `(A, B)`.
    pub fn lmi_min_eig(
        &self,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        weights: &LqrWeights,
        eps: f64,
        x: &DVector<f64>,
    ) -> f64 {
        self.lmi_blocks(a, b, weights, eps, x)
            .iter()
            .map(min_eig)
            .fold(f64::INFINITY, f64::min)
    }
}

fn bordered_num(tl: f64, top: &RowDVector<f64>, inner: &DMatrix<f64>) -> DMatrix<f64> {
    let n = inner.nrows();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m[(0, 0)] = tl;
    for c in 0..n {
        m[(0, 1 + c)] = top[c];
        m[(1 + c, 0)] = top[c];
    }
    m.view_mut((1, 1), (n, n)).copy_from(inner);
    m
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Solution of the discrete algebraic Riccati equation by fixed-point
/// iteration, used as an independent oracle for the SDP route.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub k: RowDVector<f64>,
    /// `Tr(P)`: the average LQR cost under unit-covariance noise.
    pub gamma: f64,
}

pub fn riccati_oracle(
    system: &LtiSystem,
    weights: &LqrWeights,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution> {
    let a = &system.a;
    let b = &system.b;
    let mut p = weights.q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let btpb = (b.transpose() * &p * b)[0] + weights.r;
        let btpa = b.transpose() * &p * a;
        let next = &weights.q + a.transpose() * &p * a
            - (a.transpose() * &p * b) * (&btpa / btpb);
        residual = (&next - &p).amax();
        p = next;
        if residual < tol {
            let btpb = (b.transpose() * &p * b)[0] + weights.r;
            let k = -(b.transpose() * &p * a) / btpb;
            let gamma = p.trace();
            return Ok(RiccatiSolution { p, k, gamma });
        }
    }
    Err(Error::RiccatiDiverged {
        iterations: max_iter,
        residual,
    })
}

/// Decision-variable handles shared by the per-step LMI programs.
struct StepVars {
    p: AffMatrix,
    m: AffMatrix,
    w: VarExpr,
    gamma: VarExpr,
    beta: Option<VarExpr>,
}

type VarExpr = AffExpr;

fn trace_qp(q: &DMatrix<f64>, p: &AffMatrix) -> AffExpr {
    let mut t = AffExpr::zero();
    for r in 0..q.nrows() {
        for c in 0..q.ncols() {
            t.add_assign(&p.get(c, r).scaled(q[(r, c)]));
        }
    }
    t
}

/// Classic unconstrained LQR SDP: minimize gamma subject to the three
/// diagonal blocks and `P > 0` (realized as `P >= delta I`).
pub fn solve_classic_lqr(system: &LtiSystem, weights: &LqrWeights) -> Result<ControllerState> {
    let n = system.n();
    let delta = 1e-6;
    let mut prob = ConicProblem::new();
    let p = prob.symmetric("P", n);
    let m = prob.row_vector("M", n);
    let w = AffExpr::var(prob.scalar("W"));
    let gamma = AffExpr::var(prob.scalar("gamma"));

    // C1: gamma - Tr(QP) - W >= 0
    let mut c1 = gamma.clone();
    c1.sub_assign(&trace_qp(&weights.q, &p));
    c1.sub_assign(&w);
    prob.nonneg(c1);

    // C2: [P - I, AP + BM; *, P] >= 0
    let apbm = p.left_mul(&system.a).add(&AffMatrix::col_times_row(&system.b, &m));
    let p_minus_i = p.sub(&AffMatrix::from_dense(&DMatrix::identity(n, n)));
    prob.psd(AffMatrix::sym_block2(&p_minus_i, &apbm, &p));

    // C3: [W, R^{1/2} M; *, P] >= 0
    prob.psd(AffMatrix::bordered(&w, &m.scaled(weights.r.sqrt()), &p));

    // P >= delta I
    prob.psd(p.sub(&AffMatrix::from_dense(&(DMatrix::identity(n, n) * delta))));

    prob.minimize(gamma.clone());
    let sol = prob.solve(1e-10)?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::Solver(format!(
            "classic LQR SDP terminated with {:?}; this should not happen for a \
             controllable system with R > 0",
            sol.status
        )));
    }
    Ok(extract_state(&sol, &p, &m, &w, &gamma, None, 1.0))
}

fn extract_state(
    sol: &ConicSolution,
    p: &AffMatrix,
    m: &AffMatrix,
    w: &AffExpr,
    gamma: &AffExpr,
    beta: Option<&AffExpr>,
    tau: f64,
) -> ControllerState {
    let pm = sol.matrix_value(p);
    let mm = sol.matrix_value(m);
    ControllerState {
        p: pm,
        m: RowDVector::from_iterator(mm.ncols(), mm.iter().cloned()),
        w: sol.value(w),
        tau,
        beta: beta.map(|b| sol.value(b)).unwrap_or(f64::INFINITY),
        gamma: sol.value(gamma),
    }
}

/// Previous-step data carried by the receding-horizon monotonicity
/// constraints.
#[derive(Clone, Debug)]
pub struct PrevStep {
    pub p_prev: DMatrix<f64>,
    pub tau_prev: f64,
}

/// Candidate taus for one step: grid intersected with (0, tau_prev], with
/// tau_prev itself kept as a candidate so the previous solution stays
/// admissible.
pub fn filter_tau_grid(grid: &[f64], prev: Option<&PrevStep>) -> Vec<f64> {
    let mut out: Vec<f64> = match prev {
        Some(p) => {
            let mut g: Vec<f64> = grid.iter().cloned().filter(|t| *t <= p.tau_prev).collect();
            if p.tau_prev.is_finite() && !g.iter().any(|t| (*t - p.tau_prev).abs() < 1e-15) {
                g.push(p.tau_prev);
            }
            g
        }
        None => grid.to_vec(),
    };
    out.sort_by(|a, b| b.partial_cmp(a).unwrap());
    out
}

fn solve_fixed_tau_model(
    system: &LtiSystem,
    weights: &LqrWeights,
    eps: f64,
    x: &DVector<f64>,
    prev: Option<&PrevStep>,
    tau: f64,
    delta: f64,
    tol: f64,
) -> Result<Option<ControllerState>> {
    let n = system.n();
    let mut prob = ConicProblem::new();
    let p = prob.symmetric("P", n);
    let m = prob.row_vector("M", n);
    let w = AffExpr::var(prob.scalar("W"));
    let gamma = AffExpr::var(prob.scalar("gamma"));
    let beta = AffExpr::var(prob.scalar("beta"));

    let vars = StepVars {
        p,
        m,
        w,
        gamma,
        beta: Some(beta),
    };
    add_step_lmis(&mut prob, system, weights, eps, x, tau, &vars, delta, prev);
    prob.minimize(vars.gamma.clone());
    let sol = prob.solve(tol)?;
    match sol.status {
        SolveStatus::Optimal => Ok(Some(extract_state(
            &sol,
            &vars.p,
            &vars.m,
            &vars.w,
            &vars.gamma,
            vars.beta.as_ref(),
            tau,
        ))),
        SolveStatus::Infeasible => Ok(None),
        // drop ill-conditioned grid extremes instead of aborting the search
        SolveStatus::NumericalFailure => Ok(None),
        other => Err(Error::Solver(format!(
            "fixed-tau model step returned {other:?} (residuals {:?})",
            sol.residuals
        ))),
    }
}

fn add_step_lmis(
    prob: &mut ConicProblem,
    system: &LtiSystem,
    weights: &LqrWeights,
    eps: f64,
    x: &DVector<f64>,
    tau: f64,
    vars: &StepVars,
    delta: f64,
    prev: Option<&PrevStep>,
) {
    let n = system.n();
    let c = 1.0 / tau + eps;

    // trace row
    let mut c1 = vars.gamma.clone();
    c1.sub_assign(&trace_qp(&weights.q, &vars.p));
    c1.sub_assign(&vars.w);
    prob.nonneg(c1);

    // input-margin block with the known plant
    let apbm = vars
        .p
        .left_mul(&system.a)
        .add(&AffMatrix::col_times_row(&system.b, &vars.m));
    let shifted = vars
        .p
        .sub(&AffMatrix::from_dense(&(DMatrix::identity(n, n) * c)));
    prob.psd(AffMatrix::sym_block2(&shifted, &apbm, &vars.p));

    if let Some(beta) = &vars.beta {
        // gain block [beta, M; *, P]
        prob.psd(AffMatrix::bordered(beta, &vars.m, &vars.p));
        // state block [beta, beta x'; *, P]
        let mut bx = AffMatrix::zeros(1, n);
        for cidx in 0..n {
            *bx.get_mut(0, cidx) = beta.scaled(x[cidx]);
        }
        prob.psd(AffMatrix::bordered(beta, &bx, &vars.p));
        prob.nonneg(&(beta.clone()) - &AffExpr::constant(delta));
    }

    // cost block [W, R^{1/2} M; *, P]
    prob.psd(AffMatrix::bordered(
        &vars.w,
        &vars.m.scaled(weights.r.sqrt()),
        &vars.p,
    ));

    // P >= delta I
    prob.psd(
        vars.p
            .sub(&AffMatrix::from_dense(&(DMatrix::identity(n, n) * delta))),
    );
    // P >= P_prev
    if let Some(prev) = prev {
        prob.psd(vars.p.sub(&AffMatrix::from_dense(&prev.p_prev)));
    }
}

/// One receding-horizon step with the known model: for each candidate tau,
/// solve the per-step SDP and keep the minimizer of `tau * gamma`.
pub fn solve_constrained_step_model(
    system: &LtiSystem,
    weights: &LqrWeights,
    eps: f64,
    x: &DVector<f64>,
    prev: Option<&PrevStep>,
    tau_grid: &[f64],
    delta: f64,
    tol: f64,
) -> Result<ControllerState> {
    if tau_grid.is_empty() {
        return Err(Error::InvalidArgument("tau grid is empty".into()));
    }
    let candidates = filter_tau_grid(tau_grid, prev);
    let mut best: Option<ControllerState> = None;
    for tau in candidates {
        if let Some(state) = solve_fixed_tau_model(system, weights, eps, x, prev, tau, delta, tol)?
        {
            if best.as_ref().map_or(true, |b| state.bound() < b.bound()) {
                best = Some(state);
            }
        }
    }
    best.ok_or_else(|| Error::StepInfeasible {
        step: 0,
        detail: format!(
            "all tau grid points infeasible at x = {:?} (bounded control cannot reach \
             this state's feasibility region)",
            x.as_slice()
        ),
    })
}

/// Default logarithmic tau grid: `points` values spanning [lo, hi].
pub fn log_tau_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && points >= 2);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (llo + (lhi - llo) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Model-based input-constrained receding-horizon LQR loop, keeping the
/// rows collected before any infeasible step.
#[allow(clippy::too_many_arguments)]
pub fn run_model_loop_logged(
    system: &LtiSystem,
    weights: &LqrWeights,
    eps: f64,
    x1: &DVector<f64>,
    steps: usize,
    tau_grid: &[f64],
    noise: &mut NoiseSource,
    delta: f64,
    tol: f64,
) -> Result<EpisodeResult> {
    if steps == 0 {
        return Err(Error::InvalidArgument("step count must be >= 1".into()));
    }
    let mut log = EpisodeLog::new(AlgorithmTag::ModelBased);
    let mut x = x1.clone();
    let mut prev: Option<PrevStep> = None;
    for k in 1..=steps {
        let state = match solve_constrained_step_model(
            system,
            weights,
            eps,
            &x,
            prev.as_ref(),
            tau_grid,
            delta,
            tol,
        ) {
            Ok(state) => state,
            Err(Error::StepInfeasible { detail, .. }) => {
                return Ok(EpisodeResult {
                    log,
                    infeasible_at: Some((k, detail)),
                });
            }
            Err(e) => return Err(e),
        };
        let u = state.control(&x);
        let w = noise.sample();
        let x_next = step_plant(system, &x, u, &w);
        log.push(StepRow {
            k,
            x: x.clone(),
            u,
            tau: state.tau,
            gamma: state.gamma,
            bound: state.bound(),
            lyapunov: state.lyapunov(&x),
            chebyshev_radius: None,
            feasible: true,
        });
        prev = Some(PrevStep {
            p_prev: state.p.clone(),
            tau_prev: state.tau,
        });
        x = x_next;
    }
    Ok(EpisodeResult::complete(log))
}

/// As [`run_model_loop_logged`], but an infeasible step is a hard error.
#[allow(clippy::too_many_arguments)]
pub fn run_model_loop(
    system: &LtiSystem,
    weights: &LqrWeights,
    eps: f64,
    x1: &DVector<f64>,
    steps: usize,
    tau_grid: &[f64],
    noise: &mut NoiseSource,
    delta: f64,
    tol: f64,
) -> Result<EpisodeLog> {
    run_model_loop_logged(system, weights, eps, x1, steps, tau_grid, noise, delta, tol)?
        .into_log()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::NoiseKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_system(a: f64, b: f64) -> LtiSystem {
        LtiSystem::new(
            DMatrix::from_element(1, 1, a),
            DVector::from_element(1, b),
        )
        .unwrap()
    }

    pub(crate) fn example1_system() -> LtiSystem {
        LtiSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, -0.99, 0.99, 0.0]),
            DVector::from_column_slice(&[0.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn riccati_no_dynamics() {
        let sys = scalar_system(0.0, 1.0);
        let w = LqrWeights::identity(1);
        let sol = riccati_oracle(&sys, &w, 1e-12, 10_000).unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-10);
        assert!(sol.k[0].abs() < 1e-10);
        assert!((sol.gamma - 1.0).abs() < 1e-10);
    }

    #[test]
    fn riccati_scalar_fixed_point() {
        let sys = scalar_system(0.5, 1.0);
        let w = LqrWeights::identity(1);
        let sol = riccati_oracle(&sys, &w, 1e-12, 10_000).unwrap();
        // closed form root of p^2 - 0.25 p - 1 = 0
        let expected = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
        assert!((sol.p[(0, 0)] - expected).abs() < 1e-9);
    }

    #[test]
    fn riccati_example1_converges() {
        let sys = example1_system();
        let w = LqrWeights::identity(2);
        let sol = riccati_oracle(&sys, &w, 1e-12, 100_000).unwrap();
        assert!((sol.gamma - sol.p.trace()).abs() < 1e-12);
        assert!(sol.gamma > 2.0); // cost exceeds pure-noise floor Tr(Q)
    }

    #[test]
    fn classic_lqr_no_dynamics() {
        let sys = scalar_system(0.0, 1.0);
        let w = LqrWeights::identity(1);
        let st = solve_classic_lqr(&sys, &w).unwrap();
        assert!(st.gain()[0].abs() < 1e-5);
        assert!((st.gamma - 1.0).abs() < 1e-5);
    }

    #[test]
    fn classic_lqr_matches_riccati_scalar() {
        let sys = scalar_system(0.5, 1.0);
        let w = LqrWeights::identity(1);
        let st = solve_classic_lqr(&sys, &w).unwrap();
        let oracle = riccati_oracle(&sys, &w, 1e-12, 10_000).unwrap();
        assert!((st.gamma - oracle.gamma).abs() / oracle.gamma < 1e-4);
    }

    #[test]
    fn classic_lqr_randomized_oracle_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in 0..20 {
            let n = 1 + (i % 4);
            let sys = crate::sim::random_schur_stable(&mut rng, n, 0.9);
            let w = LqrWeights::identity(n);
            let st = solve_classic_lqr(&sys, &w).unwrap();
            let oracle = riccati_oracle(&sys, &w, 1e-13, 200_000).unwrap();
            let rel = (st.gamma - oracle.gamma).abs() / oracle.gamma;
            assert!(rel < 1e-4, "system {i}: relative gamma gap {rel:.2e}");
            // closed loop Schur stable
            let acl = &sys.a + &sys.b * st.gain();
            let rho = acl
                .complex_eigenvalues()
                .iter()
                .map(|l| l.norm())
                .fold(0.0, f64::max);
            assert!(rho < 1.0 + 1e-6, "system {i}: closed-loop radius {rho}");
        }
    }

    #[test]
    fn constrained_step_at_origin() {
        let sys = example1_system();
        let w = LqrWeights::identity(2);
        let grid = log_tau_grid(1e-2, 1e2, 9);
        let x = DVector::zeros(2);
        let st =
            solve_constrained_step_model(&sys, &w, 0.1, &x, None, &grid, 1e-6, 1e-8).unwrap();
        assert!(st.control(&x).abs() < 1e-6);
    }

    #[test]
    fn constrained_step_example1_respects_input_bound() {
        let sys = example1_system();
        let w = LqrWeights::identity(2);
        let grid = log_tau_grid(1e-2, 1e2, 25);
        let x = DVector::from_column_slice(&[1.0, 1.0]);
        let st =
            solve_constrained_step_model(&sys, &w, 0.1, &x, None, &grid, 1e-6, 1e-8).unwrap();
        assert!(st.control(&x).abs() <= 1.0 + 1e-6);
        // Cauchy-Schwarz premises
        let p_inv = st.p.clone().try_inverse().unwrap();
        let mpm = (&st.m * &p_inv * st.m.transpose())[0];
        let xpx = (x.transpose() * &p_inv * &x)[0];
        assert!(st.beta >= mpm - 1e-6);
        assert!(1.0 / st.beta >= xpx - 1e-6);
    }

    #[test]
    fn unstable_system_far_state_infeasible() {
        // spectral radius 1.5; far state cannot be driven with |u| <= 1
        let sys = scalar_system(1.5, 1.0);
        let w = LqrWeights::identity(1);
        let grid = log_tau_grid(1e-2, 1e2, 9);
        let x = DVector::from_element(1, 100.0);
        let res = solve_constrained_step_model(&sys, &w, 0.1, &x, None, &grid, 1e-6, 1e-8);
        assert!(matches!(res, Err(Error::StepInfeasible { .. })));
    }

    #[test]
    fn model_loop_noise_free_lyapunov_decrease() {
        let sys = example1_system();
        let w = LqrWeights::identity(2);
        let grid = log_tau_grid(1e-2, 1e2, 9);
        let mut noise = NoiseSource::new(2, 1, 0.1, NoiseKind::Zero);
        let x1 = DVector::from_column_slice(&[1.0, 1.0]);
        let log = run_model_loop(&sys, &w, 0.1, &x1, 8, &grid, &mut noise, 1e-6, 1e-8).unwrap();
        for win in log.rows.windows(2) {
            if win[0].x.norm() > 1e-9 {
                assert!(
                    win[1].lyapunov < win[0].lyapunov,
                    "V must strictly decrease: {} -> {}",
                    win[0].lyapunov,
                    win[1].lyapunov
                );
            }
            assert!(win[1].tau <= win[0].tau + 1e-12);
        }
        for row in &log.rows {
            assert!(row.u.abs() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn tau_scaling_feasibility_transfer() {
        // If (P, M, tau, eps) satisfies the input-margin block then the
        // rescaled tuple (tau P, tau M, 1, tau eps) does as well.
        let sys = example1_system();
        let w = LqrWeights::identity(2);
        let grid = log_tau_grid(1e-1, 1e1, 7);
        let x = DVector::from_column_slice(&[0.5, 0.5]);
        let eps = 0.1;
        let st = solve_constrained_step_model(&sys, &w, eps, &x, None, &grid, 1e-6, 1e-8).unwrap();
        let scaled = ControllerState {
            p: &st.p * st.tau,
            m: &st.m * st.tau,
            w: st.w,
            tau: 1.0,
            beta: st.beta,
            gamma: st.gamma,
        };
        // evaluate only the input-margin block at the rescaled tuple
        let blocks = scaled.lmi_blocks(&sys.a, &sys.b, &w, st.tau * eps, &x);
        assert!(
            min_eig(&blocks[0]) >= -1e-7,
            "rescaled margin block eig {:.3e}",
            min_eig(&blocks[0])
        );
        // gains agree
        let g1 = st.gain();
        let g2 = scaled.gain();
        assert!((g1 - g2).amax() < 1e-8);
    }

    #[test]
    fn recursive_feasibility_noise_free() {
        // replay the previous solution as a feasibility witness at the
        // noise-free successor state
        let sys = example1_system();
        let w = LqrWeights::identity(2);
        let grid = log_tau_grid(1e-2, 1e2, 9);
        let eps = 0.1;
        let mut x = DVector::from_column_slice(&[1.0, 1.0]);
        let mut prev: Option<PrevStep> = None;
        let mut last: Option<ControllerState> = None;
        for _ in 0..4 {
            let st = solve_constrained_step_model(
                &sys, &w, eps, &x, prev.as_ref(), &grid, 1e-6, 1e-8,
            )
            .unwrap();
            if let Some(prev_state) = &last {
                // previous (P, M, W, tau, beta) must satisfy the LMIs at the
                // new state
                let margin = prev_state.lmi_min_eig(&sys.a, &sys.b, &w, eps, &x);
                assert!(margin >= -1e-6, "warm witness violated: {margin:.3e}");
            }
            let u = st.control(&x);
            x = step_plant(&sys, &x, u, &DVector::zeros(2));
            prev = Some(PrevStep {
                p_prev: st.p.clone(),
                tau_prev: st.tau,
            });
            last = Some(st);
        }
    }
}
