//! Data-driven robust synthesis: the scalarized quadratic form `g(z)`, the
//! dual-multiplier SOS program that enforces the per-step LMIs for every
//! plant in the consistency set, the per-step solver with its tau line
//! search, the data-driven receding-horizon loop, and the unconstrained
//! baseline synthesis.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conic::{AffExpr, AffMatrix, ConicProblem, ConicSolution, SolveStatus};
use crate::consistency::{
    build_theta_d, interior_radius, DataRecord, DataSample, ThetaD,
};
use crate::error::{Error, Result};
use crate::lqr::{filter_tau_grid, log_tau_grid, ControllerState, LqrWeights, LtiSystem, PrevStep};
use crate::poly::{compile_sos, nonneg_poly_on_ball, norm_sq_poly, Monomial, PolyExpr};
use crate::sim::{step_plant, AlgorithmTag, EpisodeLog, EpisodeResult, NoiseSource, StepRow};

/// Index layout of the scalarization variable z. `z1 = [y; v]` carries the
/// input-margin block, `z2`/`z3` the gain and state blocks (absent in the
/// unconstrained baseline), `z4` the cost block, and `z5` the trace row.
#[derive(Clone, Debug)]
pub struct ZLayout {
    pub n: usize,
    pub z1: Range<usize>,
    pub z2: Option<Range<usize>>,
    pub z3: Option<Range<usize>>,
    pub z4: Range<usize>,
    pub z5: usize,
    pub n_z: usize,
}

impl ZLayout {
    /// Input-constrained layout: all five blocks, `n_z = 5n + 4`.
    pub fn full(n: usize) -> Self {
        ZLayout {
            n,
            z1: 0..2 * n,
            z2: Some(2 * n..3 * n + 1),
            z3: Some(3 * n + 1..4 * n + 2),
            z4: 4 * n + 2..5 * n + 3,
            z5: 5 * n + 3,
            n_z: 5 * n + 4,
        }
    }

    /// Baseline layout without the input-constraint blocks, `n_z = 3n + 2`.
    pub fn baseline(n: usize) -> Self {
        ZLayout {
            n,
            z1: 0..2 * n,
            z2: None,
            z3: None,
            z4: 2 * n..3 * n + 1,
            z5: 3 * n + 1,
            n_z: 3 * n + 2,
        }
    }
}

/// Numeric value of the plant-independent quadratic form `g(z)` at a fixed
/// controller tuple: the diagonal of the input-margin block plus the full
/// gain, state and cost blocks plus the trace row times `z5^2`.
pub fn g_value(
    layout: &ZLayout,
    state: &ControllerState,
    weights: &LqrWeights,
    eps: f64,
    x: &DVector<f64>,
    z: &[f64],
) -> f64 {
    assert_eq!(z.len(), layout.n_z);
    let n = layout.n;
    let c = 1.0 / state.tau + eps;
    let mut g = 0.0;
    // y'(P - cI)y + v'P v
    for a in 0..n {
        for b in 0..n {
            let yy = z[layout.z1.start + a] * z[layout.z1.start + b];
            let vv = z[layout.z1.start + n + a] * z[layout.z1.start + n + b];
            g += state.p[(a, b)] * (yy + vv);
            if a == b {
                g -= c * yy;
            }
        }
    }
    let bordered = |range: &Range<usize>, tl: f64, top: &dyn Fn(usize) -> f64| -> f64 {
        let h = z[range.start];
        let mut s = tl * h * h;
        for i in 0..n {
            let wi = z[range.start + 1 + i];
            s += 2.0 * h * top(i) * wi;
            for j in 0..n {
                s += state.p[(i, j)] * wi * z[range.start + 1 + j];
            }
        }
        s
    };
    if let Some(z2) = &layout.z2 {
        g += bordered(z2, state.beta, &|i| state.m[i]);
    }
    if let Some(z3) = &layout.z3 {
        g += bordered(z3, state.beta, &|i| state.beta * x[i]);
    }
    let sqrt_r = weights.r.sqrt();
    g += bordered(&layout.z4, state.w, &|i| sqrt_r * state.m[i]);
    let z5 = z[layout.z5];
    g += z5 * z5 * (state.gamma - (&weights.q * &state.p).trace() - state.w);
    g
}

/// Decision-variable handles of one robust synthesis program.
struct RobustVars {
    p: AffMatrix,
    m: AffMatrix,
    w: AffExpr,
    gamma: AffExpr,
    beta: Option<AffExpr>,
}

fn mono2(n_vars: usize, i: usize, j: usize) -> Monomial {
    let mut e = vec![0u32; n_vars];
    e[i] += 1;
    e[j] += 1;
    Monomial(e)
}

/// Symbolic `g(z)`: a quadratic in z whose coefficients are affine in the
/// decision variables.
fn g_poly(
    layout: &ZLayout,
    vars: &RobustVars,
    weights: &LqrWeights,
    eps: f64,
    tau: f64,
    x: Option<&DVector<f64>>,
) -> PolyExpr {
    let n = layout.n;
    let n_z = layout.n_z;
    let c = 1.0 / tau + eps;
    let mut g = PolyExpr::zero(n_z);
    for a in 0..n {
        for b in 0..n {
            let mut coeff_y = vars.p.get(a, b).clone();
            if a == b {
                coeff_y = &coeff_y - &AffExpr::constant(c);
            }
            g.add_term(mono2(n_z, layout.z1.start + a, layout.z1.start + b), coeff_y);
            g.add_term(
                mono2(n_z, layout.z1.start + n + a, layout.z1.start + n + b),
                vars.p.get(a, b).clone(),
            );
        }
    }
    let bordered = |g: &mut PolyExpr, range: &Range<usize>, tl: &AffExpr, top: &dyn Fn(usize) -> AffExpr| {
        g.add_term(mono2(n_z, range.start, range.start), tl.clone());
        for i in 0..n {
            g.add_term(
                mono2(n_z, range.start, range.start + 1 + i),
                top(i).scaled(2.0),
            );
            for j in 0..n {
                g.add_term(
                    mono2(n_z, range.start + 1 + i, range.start + 1 + j),
                    vars.p.get(i, j).clone(),
                );
            }
        }
    };
    if let (Some(z2), Some(beta)) = (&layout.z2, &vars.beta) {
        bordered(&mut g, z2, beta, &|i| vars.m.get(0, i).clone());
    }
    if let (Some(z3), Some(beta)) = (&layout.z3, &vars.beta) {
        let x = x.expect("state block requires the current state");
        bordered(&mut g, z3, beta, &|i| beta.scaled(x[i]));
    }
    let sqrt_r = weights.r.sqrt();
    bordered(&mut g, &layout.z4, &vars.w, &|i| {
        vars.m.get(0, i).scaled(sqrt_r)
    });
    // trace row: gamma - Tr(QP) - W
    let mut c1 = vars.gamma.clone();
    for r in 0..n {
        for cidx in 0..n {
            c1.sub_assign(&vars.p.get(cidx, r).scaled(weights.q[(r, cidx)]));
        }
    }
    c1.sub_assign(&vars.w);
    g.add_term(mono2(n_z, layout.z5, layout.z5), c1);
    g
}

/// Configuration of the data-driven synthesis route.
#[derive(Clone, Debug)]
pub struct RobustConfig {
    pub tau_grid: Vec<f64>,
    /// Half-degree r of the Putinar certificates.
    pub relaxation_degree: u32,
    /// Strictness margin: `P >= delta I`, `beta >= delta`, and the
    /// certificate target keeps a `delta ||z||^2` margin.
    pub delta: f64,
    pub tol: f64,
    /// Restrict dual multipliers to polynomials in z1 only.
    pub sparsity: bool,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            tau_grid: log_tau_grid(1e-2, 1e2, 25),
            relaxation_degree: 1,
            delta: 1e-6,
            tol: 1e-8,
            sparsity: true,
        }
    }
}

fn extract_state(
    sol: &ConicSolution,
    vars: &RobustVars,
    tau: f64,
) -> ControllerState {
    let pm = sol.matrix_value(&vars.p);
    let mm = sol.matrix_value(&vars.m);
    ControllerState {
        p: pm,
        m: RowDVector::from_iterator(mm.ncols(), mm.iter().cloned()),
        w: sol.value(&vars.w),
        tau,
        beta: vars
            .beta
            .as_ref()
            .map(|b| sol.value(b))
            .unwrap_or(f64::INFINITY),
        gamma: sol.value(&vars.gamma),
    }
}

/// One fixed-tau robust SDP over the consistency set described by `td`.
/// `x = None` selects the unconstrained baseline variant. Returns `None` on
/// certified infeasibility.
fn solve_fixed_tau_robust(
    td: &ThetaD,
    weights: &LqrWeights,
    x: Option<&DVector<f64>>,
    prev: Option<&PrevStep>,
    tau: f64,
    cfg: &RobustConfig,
) -> Result<Option<ControllerState>> {
    let n = td.n;
    let constrained = x.is_some();
    let layout = if constrained {
        ZLayout::full(n)
    } else {
        ZLayout::baseline(n)
    };
    let r = cfg.relaxation_degree;
    let delta = cfg.delta;

    let mut prob = ConicProblem::new();
    let p = prob.symmetric("P", n);
    let m = prob.row_vector("M", n);
    let w = AffExpr::var(prob.scalar("W"));
    let gamma = AffExpr::var(prob.scalar("gamma"));
    let beta = constrained.then(|| AffExpr::var(prob.scalar("beta")));

    prob.psd(p.sub(&AffMatrix::from_dense(&(DMatrix::identity(n, n) * delta))));
    if let Some(prev) = prev {
        prob.psd(p.sub(&AffMatrix::from_dense(&prev.p_prev)));
    }
    if let Some(beta) = &beta {
        prob.nonneg(beta - &AffExpr::constant(delta));
    }

    let vars = RobustVars { p, m, w, gamma, beta };
    let g = g_poly(&layout, &vars, weights, td.eps, tau, x);

    // one dual multiplier per (column of Theta, state row); each is a fresh
    // polynomial nonnegative on the unit ball
    let lam_vars = if cfg.sparsity { 2 * n } else { layout.n_z };
    let cols = td.cols();
    let mut lambda = Vec::with_capacity(cols);
    for i in 0..cols {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let (poly, _cert) =
                nonneg_poly_on_ball(&mut prob, lam_vars, r, &format!("L{i}_{j}"));
            row.push(poly);
        }
        lambda.push(row);
    }

    // stationarity: Theta Lambda(z) = -2 [P; M] v y' identically in z
    for p_row in 0..=n {
        for j in 0..n {
            let mut lhs = PolyExpr::zero(lam_vars);
            for i in 0..cols {
                lhs = lhs.add(&lambda[i][j].scaled(td.theta[(p_row, i)]));
            }
            let mut rhs = PolyExpr::zero(lam_vars);
            for a in 0..n {
                // monomial y_j * v_a; coefficient -2 [P; M]_{p_row, a}
                let stack = if p_row < n {
                    vars.p.get(p_row, a).clone()
                } else {
                    vars.m.get(0, a).clone()
                };
                rhs.add_term(mono2(lam_vars, j, n + a), stack.scaled(-2.0));
            }
            let diff = lhs.sub(&rhs);
            for (_, coeff) in diff.terms() {
                if !coeff.is_trivially_zero(0.0) {
                    prob.eq_zero(coeff.clone());
                }
            }
        }
    }

    // worst-case positivity: g(z) - Tr(D Lambda(z)) >= delta ||z||^2 on the
    // unit ball, certified by SOS
    let mut target = g;
    for i in 0..cols {
        for j in 0..n {
            target = target.sub(&lambda[i][j].embed(layout.n_z, 0).scaled(td.d[(j, i)]));
        }
    }
    target = target.sub(&norm_sq_poly(layout.n_z).scaled(delta));
    compile_sos(&mut prob, &target, r.max(1), true, "cert")?;

    prob.minimize(vars.gamma.clone());
    let sol = prob.solve(cfg.tol)?;
    match sol.status {
        SolveStatus::Optimal => Ok(Some(extract_state(&sol, &vars, tau))),
        SolveStatus::Infeasible => Ok(None),
        // ill-conditioned grid extremes: drop the candidate rather than
        // abort the whole line search
        SolveStatus::NumericalFailure => Ok(None),
        other => Err(Error::Solver(format!(
            "robust SDP (tau = {tau}) returned {other:?} (residuals {:?})",
            sol.residuals
        ))),
    }
}

/// Output of one data-driven receding-horizon step.
#[derive(Clone, Debug)]
pub struct DdStep {
    pub state: ControllerState,
    /// Inscribed-ball radius of the consistency set before any repair.
    pub chebyshev_radius: f64,
    /// True when the noise bound was inflated to restore an interior point.
    pub eps_inflated: bool,
}

/// One data-driven step: Slater check on the consistency set, then a tau
/// line search of robust SDPs keeping the minimizer of `tau * gamma`.
pub fn solve_dd_step(
    record: &DataRecord,
    weights: &LqrWeights,
    x: &DVector<f64>,
    prev: Option<&PrevStep>,
    cfg: &RobustConfig,
) -> Result<DdStep> {
    if cfg.tau_grid.is_empty() {
        return Err(Error::InvalidArgument("tau grid is empty".into()));
    }
    let radius = interior_radius(record)?;
    let eps_inflated = radius <= 1e-9;
    let inflated;
    let record_ref = if eps_inflated {
        let mut w = record.clone();
        w.inflate_eps(1e-6);
        inflated = w;
        &inflated
    } else {
        record
    };
    let td = build_theta_d(record_ref)?;
    let candidates = filter_tau_grid(&cfg.tau_grid, prev);
    let mut best: Option<ControllerState> = None;
    for tau in candidates {
        if let Some(state) = solve_fixed_tau_robust(&td, weights, Some(x), prev, tau, cfg)? {
            if best.as_ref().map_or(true, |b| state.bound() < b.bound()) {
                best = Some(state);
            }
        }
    }
    match best {
        Some(state) => Ok(DdStep {
            state,
            chebyshev_radius: radius,
            eps_inflated,
        }),
        None => Err(Error::StepInfeasible {
            step: 0,
            detail: format!(
                "all tau grid points infeasible at x = {:?} for the current \
                 consistency set",
                x.as_slice()
            ),
        }),
    }
}

/// Data-driven input-constrained receding-horizon loop. With `grow` the
/// closed-loop transitions are appended to the record so the consistency
/// set shrinks online; without it the training set is used throughout.
/// Mid-episode infeasibility falls back to the previous controller (the
/// logged row is marked infeasible); infeasibility at the first step is a
/// hard error.
#[allow(clippy::too_many_arguments)]
pub fn run_dd_loop_logged(
    true_system: &LtiSystem,
    weights: &LqrWeights,
    record: &DataRecord,
    x1: &DVector<f64>,
    steps: usize,
    cfg: &RobustConfig,
    noise: &mut NoiseSource,
    grow: bool,
) -> Result<(EpisodeResult, DataRecord)> {
    if steps == 0 {
        return Err(Error::InvalidArgument("step count must be >= 1".into()));
    }
    let tag = if grow {
        AlgorithmTag::DataDriven
    } else {
        AlgorithmTag::DataDrivenFixedSet
    };
    let mut log = EpisodeLog::new(tag);
    let mut rec = record.clone();
    let mut x = x1.clone();
    let mut prev: Option<PrevStep> = None;
    let mut last: Option<ControllerState> = None;
    for k in 1..=steps {
        let (state, radius, feasible) =
            match solve_dd_step(&rec, weights, &x, prev.as_ref(), cfg) {
                Ok(dd) => {
                    prev = Some(PrevStep {
                        p_prev: dd.state.p.clone(),
                        tau_prev: dd.state.tau,
                    });
                    (dd.state, Some(dd.chebyshev_radius), true)
                }
                Err(Error::StepInfeasible { detail, .. }) => match &last {
                    Some(prev_state) if k > 1 => (prev_state.clone(), None, false),
                    _ => {
                        return Ok((
                            EpisodeResult {
                                log,
                                infeasible_at: Some((k, detail)),
                            },
                            rec,
                        ));
                    }
                },
                Err(e) => return Err(e),
            };
        let u = state.control(&x);
        let w = noise.sample();
        let x_next = step_plant(true_system, &x, u, &w);
        log.push(StepRow {
            k,
            x: x.clone(),
            u,
            tau: state.tau,
            gamma: state.gamma,
            bound: state.bound(),
            lyapunov: state.lyapunov(&x),
            chebyshev_radius: radius,
            feasible,
        });
        if grow {
            rec.push_execution(DataSample {
                x: x.clone(),
                u,
                x_next: x_next.clone(),
            })?;
        }
        last = Some(state);
        x = x_next;
    }
    Ok((EpisodeResult::complete(log), rec))
}

/// As [`run_dd_loop_logged`], but first-step infeasibility is a hard
/// error.
#[allow(clippy::too_many_arguments)]
pub fn run_dd_loop(
    true_system: &LtiSystem,
    weights: &LqrWeights,
    record: &DataRecord,
    x1: &DVector<f64>,
    steps: usize,
    cfg: &RobustConfig,
    noise: &mut NoiseSource,
    grow: bool,
) -> Result<(EpisodeLog, DataRecord)> {
    let (result, rec) =
        run_dd_loop_logged(true_system, weights, record, x1, steps, cfg, noise, grow)?;
    Ok((result.into_log()?, rec))
}

/// Unconstrained robust baseline: one gain synthesized from the record with
/// tau fixed at 1 and no input-margin blocks.
pub fn synthesize_baseline(
    record: &DataRecord,
    weights: &LqrWeights,
    cfg: &RobustConfig,
) -> Result<ControllerState> {
    let td = build_theta_d(record)?;
    match solve_fixed_tau_robust(&td, weights, None, None, 1.0, cfg)? {
        Some(state) => Ok(state),
        None => Err(Error::StepInfeasible {
            step: 0,
            detail: "baseline synthesis infeasible for this consistency set".into(),
        }),
    }
}

/// Sample plants from the consistency set and return the worst (smallest)
/// LMI eigenvalue of `state` over the sample; a robust certificate must keep
/// this nonnegative up to solver tolerance.
pub fn sampled_lmi_margin(
    record: &DataRecord,
    state: &ControllerState,
    weights: &LqrWeights,
    x: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    use crate::consistency::{chebyshev, hit_and_run, vec_ab, ChebyshevResult, Polytope};
    let td = build_theta_d(record)?;
    let poly = Polytope::from_theta_d(&td);
    let start = match chebyshev(record)? {
        ChebyshevResult::Ball {
            center_a, center_b, ..
        } => vec_ab(&center_a, &center_b),
        ChebyshevResult::Unbounded => {
            return Err(Error::InvalidArgument(
                "cannot sample an unbounded consistency set".into(),
            ))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = hit_and_run(&poly, &start, samples, &mut rng);
    let mut worst = f64::INFINITY;
    for pt in pts {
        let (a, b) = crate::consistency::unvec_ab(&pt, record.n());
        worst = worst.min(state.lmi_min_eig(&a, &b, weights, record.eps(), x));
    }
    Ok(worst)
}
