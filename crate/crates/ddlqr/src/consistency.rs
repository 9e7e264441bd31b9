//! The polytopic consistency set: membership, the stacked data matrices
//! Theta/D, LP-based geometry (Chebyshev radius, support functions), the
//! fixed-z primal/dual LP pair, and test-scale oracles (vertex enumeration,
//! hit-and-run sampling).
//!
//! Vectorization order of `(A, B)` is fixed to row-major A followed by B so
//! directions and centers are reproducible.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conic::{AffExpr, ConicProblem, SolveStatus};
use crate::error::{Error, Result};
use crate::lqr::{ControllerState, LqrWeights};
use crate::robust::{g_value, ZLayout};

/// One observed transition.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSample {
    pub x: DVector<f64>,
    pub u: f64,
    pub x_next: DVector<f64>,
}

/// Training plus execution samples with the shared noise bound. Execution
/// data is append-only.
#[derive(Clone, Debug)]
pub struct DataRecord {
    n: usize,
    eps: f64,
    training: Vec<DataSample>,
    execution: Vec<DataSample>,
}

impl DataRecord {
    pub fn new(n: usize, eps: f64, training: Vec<DataSample>) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("noise bound eps must be > 0".into()));
        }
        let rec = DataRecord {
            n,
            eps,
            training: Vec::new(),
            execution: Vec::new(),
        };
        let mut rec = rec;
        for s in training {
            rec.check_sample(&s)?;
            rec.training.push(s);
        }
        Ok(rec)
    }

    fn check_sample(&self, s: &DataSample) -> Result<()> {
        if s.x.len() != self.n || s.x_next.len() != self.n {
            return Err(Error::Dimension(format!(
                "sample dimension {} does not match record dimension {}",
                s.x.len(),
                self.n
            )));
        }
        if s.x.iter().chain(s.x_next.iter()).any(|v| !v.is_finite()) || !s.u.is_finite() {
            return Err(Error::InvalidArgument("non-finite sample entries".into()));
        }
        Ok(())
    }

    pub fn push_execution(&mut self, s: DataSample) -> Result<()> {
        self.check_sample(&s)?;
        self.execution.push(s);
        Ok(())
    }

    /// Inflate the noise bound (Slater repair); logged by callers.
    pub fn inflate_eps(&mut self, by: f64) {
        self.eps += by;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn n_training(&self) -> usize {
        self.training.len()
    }

    pub fn n_execution(&self) -> usize {
        self.execution.len()
    }

    pub fn total(&self) -> usize {
        self.training.len() + self.execution.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &DataSample> {
        self.training.iter().chain(self.execution.iter())
    }

    /// True iff every sample residual satisfies
    /// `||x_next - A x - B u||_inf <= eps`.
    pub fn contains(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> bool {
        self.samples().all(|s| {
            let resid = &s.x_next - a * &s.x - b * s.u;
            resid.amax() <= self.eps + 1e-12
        })
    }

    /// CSV export: a comment header carrying n and eps, then one row per
    /// sample: kind, x(1..n), u, x_next(1..n).
    pub fn export_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# n={} eps={}", self.n, self.eps)?;
        let mut header = vec!["kind".to_string()];
        header.extend((1..=self.n).map(|i| format!("x{i}")));
        header.push("u".into());
        header.extend((1..=self.n).map(|i| format!("x_next{i}")));
        writeln!(f, "{}", header.join(","))?;
        for (kind, s) in self
            .training
            .iter()
            .map(|s| ("train", s))
            .chain(self.execution.iter().map(|s| ("exec", s)))
        {
            let mut row = vec![kind.to_string()];
            row.extend(s.x.iter().map(|v| format!("{v:.17e}")));
            row.push(format!("{:.17e}", s.u));
            row.extend(s.x_next.iter().map(|v| format!("{v:.17e}")));
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn import_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut reader = BufReader::new(f);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let first = first.trim();
        let (n, eps) = parse_record_header(first)?;
        let mut csv_reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let mut rec = DataRecord::new(n, eps, Vec::new())?;
        for row in csv_reader.records() {
            let row = row?;
            if row.len() != 2 * n + 2 {
                return Err(Error::Config(format!(
                    "record row has {} fields, expected {}",
                    row.len(),
                    2 * n + 2
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad number '{s}': {e}")))
            };
            let mut x = DVector::zeros(n);
            for i in 0..n {
                x[i] = parse(&row[1 + i])?;
            }
            let u = parse(&row[1 + n])?;
            let mut x_next = DVector::zeros(n);
            for i in 0..n {
                x_next[i] = parse(&row[2 + n + i])?;
            }
            let sample = DataSample { x, u, x_next };
            match &row[0] {
                "train" => {
                    rec.check_sample(&sample)?;
                    rec.training.push(sample);
                }
                "exec" => rec.push_execution(sample)?,
                other => {
                    return Err(Error::Config(format!("unknown sample kind '{other}'")));
                }
            }
        }
        Ok(rec)
    }
}

fn parse_record_header(line: &str) -> Result<(usize, f64)> {
    // expected: "# n=<n> eps=<eps>"
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Config("record file missing '# n=.. eps=..' header".into()))?;
    let mut n = None;
    let mut eps = None;
    for tok in body.split_whitespace() {
        if let Some(v) = tok.strip_prefix("n=") {
            n = v.parse::<usize>().ok();
        } else if let Some(v) = tok.strip_prefix("eps=") {
            eps = v.parse::<f64>().ok();
        }
    }
    match (n, eps) {
        (Some(n), Some(eps)) => Ok((n, eps)),
        _ => Err(Error::Config("record header must carry n= and eps=".into())),
    }
}

/// The stacked data matrices of the dual formulation: `Theta` is
/// (n+1) x 2(N+N_d) and `D` is n x 2(N+N_d); membership reads
/// `[A B] Theta <= D` columnwise. Each sample block stacks its positive
/// columns first, then the negated ones.
#[derive(Clone, Debug)]
pub struct ThetaD {
    pub theta: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub n: usize,
    pub eps: f64,
}

impl ThetaD {
    pub fn cols(&self) -> usize {
        self.theta.ncols()
    }
}

pub fn build_theta_d(record: &DataRecord) -> Result<ThetaD> {
    if record.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build Theta/D from an empty record".into(),
        ));
    }
    let n = record.n();
    let eps = record.eps();
    let groups: [&[DataSample]; 2] = [&record.training, &record.execution];
    let total = record.total();
    let mut theta = DMatrix::zeros(n + 1, 2 * total);
    let mut d = DMatrix::zeros(n, 2 * total);
    let mut col = 0;
    for group in groups {
        let m = group.len();
        for (j, s) in group.iter().enumerate() {
            for r in 0..n {
                theta[(r, col + j)] = s.x[r];
                theta[(r, col + m + j)] = -s.x[r];
                d[(r, col + j)] = eps + s.x_next[r];
                d[(r, col + m + j)] = eps - s.x_next[r];
            }
            theta[(n, col + j)] = s.u;
            theta[(n, col + m + j)] = -s.u;
        }
        col += 2 * m;
    }
    Ok(ThetaD { theta, d, n, eps })
}

/// Linear-inequality form of the consistency set in vectorized
/// `(A, B)` coordinates: `G theta_vec <= h`.
#[derive(Clone, Debug)]
pub struct Polytope {
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub dim: usize,
}

impl Polytope {
    pub fn from_theta_d(td: &ThetaD) -> Polytope {
        let n = td.n;
        let dim = n * (n + 1);
        let cols = td.cols();
        let mut g = DMatrix::zeros(cols * n, dim);
        let mut h = DVector::zeros(cols * n);
        let mut row = 0;
        for i in 0..cols {
            for r in 0..n {
                for c in 0..n {
                    g[(row, r * n + c)] = td.theta[(c, i)];
                }
                g[(row, n * n + r)] = td.theta[(n, i)];
                h[row] = td.d[(r, i)];
                row += 1;
            }
        }
        Polytope { g, h, dim }
    }

    pub fn contains_point(&self, theta: &DVector<f64>, tol: f64) -> bool {
        let s = &self.g * theta - &self.h;
        s.iter().all(|v| *v <= tol)
    }
}

/// Row-major A then B vectorization.
pub fn vec_ab(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut v = DVector::zeros(n * (n + 1));
    for r in 0..n {
        for c in 0..n {
            v[r * n + c] = a[(r, c)];
        }
        v[n * n + r] = b[r];
    }
    v
}

pub fn unvec_ab(theta: &DVector<f64>, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for r in 0..n {
        for c in 0..n {
            a[(r, c)] = theta[r * n + c];
        }
        b[r] = theta[n * n + r];
    }
    (a, b)
}

/// Largest inscribed ball of the consistency polytope.
#[derive(Clone, Debug)]
pub enum ChebyshevResult {
    Ball {
        center_a: DMatrix<f64>,
        center_b: DVector<f64>,
        radius: f64,
    },
    Unbounded,
}

pub fn chebyshev(record: &DataRecord) -> Result<ChebyshevResult> {
    let td = build_theta_d(record)?;
    chebyshev_of(&td)
}

pub fn chebyshev_of(td: &ThetaD) -> Result<ChebyshevResult> {
    let poly = Polytope::from_theta_d(td);
    let mut prob = ConicProblem::new();
    let theta: Vec<_> = (0..poly.dim)
        .map(|i| AffExpr::var(prob.scalar(&format!("th{i}"))))
        .collect();
    let rho = AffExpr::var(prob.scalar("rho"));
    for i in 0..poly.g.nrows() {
        let norm = poly.g.row(i).norm();
        // g'theta + rho*||g|| <= h
        let mut e = AffExpr::constant(poly.h[i]);
        for j in 0..poly.dim {
            e.add_assign(&theta[j].scaled(-poly.g[(i, j)]));
        }
        e.add_assign(&rho.scaled(-norm));
        prob.nonneg(e);
    }
    prob.nonneg(rho.clone());
    prob.minimize(rho.scaled(-1.0));
    let sol = prob.solve(1e-9)?;
    match sol.status {
        SolveStatus::Optimal => {
            let center = DVector::from_fn(poly.dim, |i, _| sol.value(&theta[i]));
            let (a, b) = unvec_ab(&center, td.n);
            Ok(ChebyshevResult::Ball {
                center_a: a,
                center_b: b,
                radius: sol.value(&rho),
            })
        }
        SolveStatus::Unbounded => Ok(ChebyshevResult::Unbounded),
        SolveStatus::Infeasible => Err(Error::EmptyConsistencySet(format!(
            "eps = {} admits no (A, B) for the observed data",
            td.eps
        ))),
        SolveStatus::NumericalFailure => {
            Err(Error::Solver("chebyshev LP numerical failure".into()))
        }
    }
}

/// Interior radius used by the Slater check; infinite when the Chebyshev LP
/// is unbounded.
pub fn interior_radius(record: &DataRecord) -> Result<f64> {
    match chebyshev(record)? {
        ChebyshevResult::Ball { radius, .. } => Ok(radius),
        ChebyshevResult::Unbounded => Ok(f64::INFINITY),
    }
}

/// Value of an LP over the consistency set, or unbounded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LpOutcome {
    Value(f64),
    Unbounded,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Value(v) => Some(*v),
            LpOutcome::Unbounded => None,
        }
    }
}

/// Support function `max <direction, vec(A,B)>` over the consistency set.
pub fn support(record: &DataRecord, direction: &DVector<f64>) -> Result<LpOutcome> {
    let td = build_theta_d(record)?;
    let poly = Polytope::from_theta_d(&td);
    if direction.len() != poly.dim {
        return Err(Error::Dimension(format!(
            "direction length {} does not match vectorized dimension {}",
            direction.len(),
            poly.dim
        )));
    }
    let mut prob = ConicProblem::new();
    let theta: Vec<_> = (0..poly.dim)
        .map(|i| AffExpr::var(prob.scalar(&format!("th{i}"))))
        .collect();
    add_polytope_rows(&mut prob, &poly, &theta);
    let mut obj = AffExpr::zero();
    for j in 0..poly.dim {
        obj.add_assign(&theta[j].scaled(-direction[j]));
    }
    prob.minimize(obj);
    let sol = prob.solve(1e-10)?;
    match sol.status {
        SolveStatus::Optimal => Ok(LpOutcome::Value(-sol.objective)),
        SolveStatus::Unbounded => Ok(LpOutcome::Unbounded),
        SolveStatus::Infeasible => Err(Error::EmptyConsistencySet(
            "support LP infeasible".into(),
        )),
        SolveStatus::NumericalFailure => Err(Error::Solver("support LP failed".into())),
    }
}

fn add_polytope_rows(prob: &mut ConicProblem, poly: &Polytope, theta: &[AffExpr]) {
    for i in 0..poly.g.nrows() {
        let mut e = AffExpr::constant(poly.h[i]);
        for j in 0..poly.dim {
            e.add_assign(&theta[j].scaled(-poly.g[(i, j)]));
        }
        prob.nonneg(e);
    }
}

/// Fixed parameters for the scalarized primal/dual LP pair at a given z.
#[derive(Clone, Debug)]
pub struct FixedZContext<'a> {
    pub state: &'a ControllerState,
    pub weights: &'a LqrWeights,
    pub eps: f64,
    pub x: &'a DVector<f64>,
}

/// Linear coefficients of the perturbation term `2 y'(A P + B M) v` in the
/// vectorized (A, B) coordinates; `z1 = [y; v]`.
fn perturbation_coeffs(ctx: &FixedZContext, z: &[f64], layout: &ZLayout) -> DVector<f64> {
    let n = layout.n;
    let y = DVector::from_fn(n, |i, _| z[layout.z1.start + i]);
    let v = DVector::from_fn(n, |i, _| z[layout.z1.start + n + i]);
    let pv = &ctx.state.p * &v;
    let mv = (&ctx.state.m * &v)[0];
    let mut c = DVector::zeros(n * (n + 1));
    for r in 0..n {
        for cc in 0..n {
            c[r * n + cc] = 2.0 * y[r] * pv[cc];
        }
        c[n * n + r] = 2.0 * y[r] * mv;
    }
    c
}

/// Scalarized primal: `min over (A,B) in C_N of g(z) + 2 y'(AP+BM) v`.
pub fn primal_min_fixed_z(
    record: &DataRecord,
    z: &[f64],
    ctx: &FixedZContext,
) -> Result<LpOutcome> {
    let td = build_theta_d(record)?;
    primal_min_fixed_z_of(&td, z, ctx)
}

pub fn primal_min_fixed_z_of(td: &ThetaD, z: &[f64], ctx: &FixedZContext) -> Result<LpOutcome> {
    let layout = ZLayout::full(td.n);
    let g0 = g_value(&layout, ctx.state, ctx.weights, ctx.eps, ctx.x, z);
    let coeffs = perturbation_coeffs(ctx, z, &layout);
    let poly = Polytope::from_theta_d(td);
    let mut prob = ConicProblem::new();
    let theta: Vec<_> = (0..poly.dim)
        .map(|i| AffExpr::var(prob.scalar(&format!("th{i}"))))
        .collect();
    add_polytope_rows(&mut prob, &poly, &theta);
    let mut obj = AffExpr::constant(g0);
    for j in 0..poly.dim {
        obj.add_assign(&theta[j].scaled(coeffs[j]));
    }
    prob.minimize(obj);
    let sol = prob.solve(1e-10)?;
    match sol.status {
        SolveStatus::Optimal => Ok(LpOutcome::Value(sol.objective)),
        SolveStatus::Unbounded => Ok(LpOutcome::Unbounded),
        SolveStatus::Infeasible => Err(Error::EmptyConsistencySet(
            "primal LP infeasible: consistency set empty".into(),
        )),
        SolveStatus::NumericalFailure => Err(Error::Solver("primal LP failed".into())),
    }
}

/// Dual LP at fixed z: maximize `g(z) - Tr(D Lambda)` over entrywise
/// nonnegative `Lambda` subject to `Theta Lambda = -2 [P; M] v y'`, the
/// stationarity condition paired with the perturbation `2 y'(AP + BM) v`.
pub fn dual_max_fixed_z(
    record: &DataRecord,
    z: &[f64],
    ctx: &FixedZContext,
) -> Result<LpOutcome> {
    let td = build_theta_d(record)?;
    dual_max_fixed_z_of(&td, z, ctx)
}

pub fn dual_max_fixed_z_of(td: &ThetaD, z: &[f64], ctx: &FixedZContext) -> Result<LpOutcome> {
    let n = td.n;
    let layout = ZLayout::full(n);
    let g0 = g_value(&layout, ctx.state, ctx.weights, ctx.eps, ctx.x, z);
    let y = DVector::from_fn(n, |i, _| z[layout.z1.start + i]);
    let v = DVector::from_fn(n, |i, _| z[layout.z1.start + n + i]);
    // RHS[p, j] = -2 ([P; M] v)_p y_j
    let pv = &ctx.state.p * &v;
    let mv = (&ctx.state.m * &v)[0];
    let cols = td.cols();
    let mut prob = ConicProblem::new();
    let mut lambda = vec![vec![AffExpr::zero(); n]; cols];
    for (i, row) in lambda.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            let var = AffExpr::var(prob.scalar(&format!("L{i}_{j}")));
            prob.nonneg(var.clone());
            *e = var;
        }
    }
    for p in 0..=n {
        let stack_p = if p < n { pv[p] } else { mv };
        for j in 0..n {
            let rhs = -2.0 * stack_p * y[j];
            let mut e = AffExpr::constant(-rhs);
            for i in 0..cols {
                e.add_assign(&lambda[i][j].scaled(td.theta[(p, i)]));
            }
            prob.eq_zero(e);
        }
    }
    // maximize g0 - sum_{i,j} D[j,i] Lambda[i,j]
    let mut obj = AffExpr::constant(-g0);
    for i in 0..cols {
        for j in 0..n {
            obj.add_assign(&lambda[i][j].scaled(td.d[(j, i)]));
        }
    }
    prob.minimize(obj);
    let sol = prob.solve(1e-10)?;
    match sol.status {
        SolveStatus::Optimal => Ok(LpOutcome::Value(-sol.objective)),
        // dual infeasibility certifies an unbounded primal and vice versa
        SolveStatus::Infeasible => Ok(LpOutcome::Unbounded),
        SolveStatus::Unbounded => Err(Error::Solver(
            "dual LP unbounded: primal consistency set empty".into(),
        )),
        SolveStatus::NumericalFailure => Err(Error::Solver("dual LP failed".into())),
    }
}

/// Vertex enumeration of the consistency polytope for the toy case n = 1
/// (a 2D polygon). Test oracle only; never used on the synthesis path.
pub fn vertices_2d(td: &ThetaD) -> Result<Vec<(f64, f64)>> {
    if td.n != 1 {
        return Err(Error::InvalidArgument(
            "vertex enumeration only supports n = 1".into(),
        ));
    }
    let poly = Polytope::from_theta_d(td);
    let m = poly.g.nrows();
    let mut verts: Vec<(f64, f64)> = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            let det = poly.g[(i, 0)] * poly.g[(j, 1)] - poly.g[(i, 1)] * poly.g[(j, 0)];
            if det.abs() < 1e-12 {
                continue;
            }
            let a = (poly.h[i] * poly.g[(j, 1)] - poly.g[(i, 1)] * poly.h[j]) / det;
            let b = (poly.g[(i, 0)] * poly.h[j] - poly.h[i] * poly.g[(j, 0)]) / det;
            let pt = DVector::from_column_slice(&[a, b]);
            if poly.contains_point(&pt, 1e-9)
                && !verts
                    .iter()
                    .any(|(va, vb)| (va - a).abs() < 1e-9 && (vb - b).abs() < 1e-9)
            {
                verts.push((a, b));
            }
        }
    }
    Ok(verts)
}

/// Brute-force primal value by evaluating the fixed-z objective at every
/// polytope vertex (n = 1 only).
pub fn primal_via_vertices(td: &ThetaD, z: &[f64], ctx: &FixedZContext) -> Result<f64> {
    let layout = ZLayout::full(td.n);
    let g0 = g_value(&layout, ctx.state, ctx.weights, ctx.eps, ctx.x, z);
    let coeffs = perturbation_coeffs(ctx, z, &layout);
    let verts = vertices_2d(td)?;
    if verts.is_empty() {
        return Err(Error::InvalidArgument(
            "polytope has no vertices (unbounded or empty)".into(),
        ));
    }
    Ok(verts
        .iter()
        .map(|(a, b)| g0 + coeffs[0] * a + coeffs[1] * b)
        .fold(f64::INFINITY, f64::min))
}

/// Hit-and-run sampling of the consistency polytope starting from a given
/// interior point. Steps along unbounded directions are clipped.
pub fn hit_and_run(
    poly: &Polytope,
    start: &DVector<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    const CLIP: f64 = 1e3;
    const THIN: usize = 4;
    let mut x = start.clone();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        for _ in 0..THIN {
            let d = DVector::from_fn(poly.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let d = &d / d.norm();
            let gd = &poly.g * &d;
            let slack = &poly.h - &poly.g * &x;
            let mut t_lo = -CLIP;
            let mut t_hi = CLIP;
            for i in 0..gd.len() {
                if gd[i] > 1e-14 {
                    t_hi = t_hi.min(slack[i] / gd[i]);
                } else if gd[i] < -1e-14 {
                    t_lo = t_lo.max(slack[i] / gd[i]);
                }
            }
            if t_hi <= t_lo {
                continue;
            }
            let t = rng.gen_range(t_lo..t_hi);
            x += d * t;
        }
        out.push(x.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::LtiSystem;
    use crate::sim::make_training_record;
    use nalgebra::RowDVector;
    use rand::SeedableRng;

    fn example1() -> LtiSystem {
        LtiSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, -0.99, 0.99, 0.0]),
            DVector::from_column_slice(&[0.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn contains_by_construction_and_violation() {
        let sys = example1();
        let record = make_training_record(&sys, 6, 0.1, 3).unwrap();
        assert!(record.contains(&sys.a, &sys.b));

        // perturb A enough to break a sample residual
        let s = record.samples().next().unwrap().clone();
        let mut a_bad = sys.a.clone();
        let xmax = s.x.amax();
        let dir = s.x.iamax_full().0;
        a_bad[(0, dir)] += 3.0 * 0.1 / xmax;
        assert!(!record.contains(&a_bad, &sys.b));

        // empty record accepts anything
        let empty = DataRecord::new(2, 0.1, Vec::new()).unwrap();
        assert!(empty.contains(&a_bad, &sys.b));
    }

    #[test]
    fn theta_d_single_sample_transcription() {
        let mut rec = DataRecord::new(2, 0.1, Vec::new()).unwrap();
        rec.push_execution(DataSample {
            x: DVector::from_column_slice(&[1.0, 0.0]),
            u: 1.0,
            x_next: DVector::from_column_slice(&[0.0, 1.0]),
        })
        .unwrap();
        let td = build_theta_d(&rec).unwrap();
        assert_eq!(td.cols(), 2);
        let expected_theta = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 0.0, 0.0, 1.0, -1.0]);
        assert_eq!(td.theta, expected_theta);
        let expected_d =
            DMatrix::from_row_slice(2, 2, &[0.1 + 0.0, 0.1 - 0.0, 0.1 + 1.0, 0.1 - 1.0]);
        assert_eq!(td.d, expected_d);
    }

    #[test]
    fn contains_agrees_with_matrix_test() {
        let sys = example1();
        let record = make_training_record(&sys, 5, 0.1, 11).unwrap();
        let td = build_theta_d(&record).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.2..1.2));
            let b = DVector::from_fn(2, |_, _| rng.gen_range(-1.2..1.2));
            let by_contains = record.contains(&a, &b);
            let ab = DMatrix::from_fn(2, 3, |r, c| if c < 2 { a[(r, c)] } else { b[r] });
            let lhs = &ab * &td.theta;
            let by_matrix = (0..td.cols())
                .all(|i| (0..2).all(|r| lhs[(r, i)] <= td.d[(r, i)] + 1e-12));
            assert_eq!(by_contains, by_matrix);
        }
    }

    #[test]
    fn chebyshev_vacuous_sample_unbounded() {
        let mut rec = DataRecord::new(2, 0.1, Vec::new()).unwrap();
        rec.push_execution(DataSample {
            x: DVector::zeros(2),
            u: 0.0,
            x_next: DVector::zeros(2),
        })
        .unwrap();
        assert!(matches!(
            chebyshev(&rec).unwrap(),
            ChebyshevResult::Unbounded
        ));
    }

    #[test]
    fn chebyshev_radius_monotone_under_growth() {
        let sys = example1();
        let mut record = make_training_record(&sys, 8, 0.1, 5).unwrap();
        let r1 = match chebyshev(&record).unwrap() {
            ChebyshevResult::Ball { radius, .. } => radius,
            ChebyshevResult::Unbounded => panic!("expected bounded set"),
        };
        assert!(r1 > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let extra = crate::sim::generate_training_data(&sys, 4, 0.1, &mut rng);
        for s in extra {
            record.push_execution(s).unwrap();
        }
        let r2 = match chebyshev(&record).unwrap() {
            ChebyshevResult::Ball { radius, .. } => radius,
            ChebyshevResult::Unbounded => panic!("expected bounded set"),
        };
        assert!(r2 <= r1 + 1e-8, "radius grew: {r1} -> {r2}");
    }

    #[test]
    fn chebyshev_infeasible_eps() {
        // two contradictory samples under a tiny eps
        let mut rec = DataRecord::new(1, 1e-6, Vec::new()).unwrap();
        let x = DVector::from_element(1, 1.0);
        rec.push_execution(DataSample {
            x: x.clone(),
            u: 0.0,
            x_next: DVector::from_element(1, 1.0),
        })
        .unwrap();
        rec.push_execution(DataSample {
            x,
            u: 0.0,
            x_next: DVector::from_element(1, -1.0),
        })
        .unwrap();
        assert!(matches!(
            chebyshev(&rec),
            Err(Error::EmptyConsistencySet(_))
        ));
    }

    #[test]
    fn support_examples() {
        let sys = example1();
        let record = make_training_record(&sys, 8, 0.1, 5).unwrap();
        // zero direction -> 0
        let zero = DVector::zeros(6);
        assert_eq!(support(&record, &zero).unwrap(), LpOutcome::Value(0.0));

        // monotone under record growth along a fixed direction
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dir = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let before = support(&record, &dir).unwrap().value().unwrap();
        let mut grown = record.clone();
        let extra = crate::sim::generate_training_data(&sys, 5, 0.1, &mut rng);
        for s in extra {
            grown.push_execution(s).unwrap();
        }
        let after = support(&grown, &dir).unwrap().value().unwrap();
        assert!(after <= before + 1e-7, "support grew: {before} -> {after}");

        // nesting on random points: anything in the grown set is in the
        // original set
        let td = build_theta_d(&grown).unwrap();
        let poly = Polytope::from_theta_d(&td);
        let td0 = build_theta_d(&record).unwrap();
        let poly0 = Polytope::from_theta_d(&td0);
        if let ChebyshevResult::Ball { center_a, center_b, .. } = chebyshev(&grown).unwrap() {
            let start = vec_ab(&center_a, &center_b);
            let pts = hit_and_run(&poly, &start, 50, &mut rng);
            for p in pts {
                assert!(poly0.contains_point(&p, 1e-9));
            }
        }
    }

    #[test]
    fn single_sample_polytope_unbounded_along_orthogonal_direction() {
        // one nontrivial sample: finite Chebyshev radius (slab width), but
        // the set is unbounded along directions the sample cannot pin down
        let mut rec = DataRecord::new(1, 0.1, Vec::new()).unwrap();
        rec.push_execution(DataSample {
            x: DVector::from_element(1, 1.0),
            u: 1.0,
            x_next: DVector::from_element(1, 0.5),
        })
        .unwrap();
        // direction orthogonal to (x, u) = (1, 1)
        let dir = DVector::from_column_slice(&[1.0, -1.0]);
        assert_eq!(support(&rec, &dir).unwrap(), LpOutcome::Unbounded);
    }

    fn toy_context_state() -> (ControllerState, LqrWeights) {
        let state = ControllerState {
            p: DMatrix::from_element(1, 1, 2.0),
            m: RowDVector::from_element(1, 0.3),
            w: 0.5,
            tau: 1.5,
            beta: 0.8,
            gamma: 3.0,
        };
        (state, LqrWeights::identity(1))
    }

    fn toy_record() -> DataRecord {
        let mut rec = DataRecord::new(1, 0.3, Vec::new()).unwrap();
        for (x, u, xn) in [
            (1.0, 0.5, 0.7),
            (-0.8, 1.0, 0.1),
            (0.3, -1.0, -0.6),
            (-1.2, -0.4, -0.9),
        ] {
            rec.push_execution(DataSample {
                x: DVector::from_element(1, x),
                u,
                x_next: DVector::from_element(1, xn),
            })
            .unwrap();
        }
        rec
    }

    #[test]
    fn fixed_z_trivial_cases() {
        let (state, weights) = toy_context_state();
        let record = toy_record();
        let x = DVector::from_element(1, 0.4);
        let ctx = FixedZContext {
            state: &state,
            weights: &weights,
            eps: record.eps(),
            x: &x,
        };
        let layout = ZLayout::full(1);
        // z = 0 -> p* = d* = 0
        let z = vec![0.0; layout.n_z];
        assert!(primal_min_fixed_z(&record, &z, &ctx)
            .unwrap()
            .value()
            .unwrap()
            .abs()
            < 1e-9);
        assert!(dual_max_fixed_z(&record, &z, &ctx)
            .unwrap()
            .value()
            .unwrap()
            .abs()
            < 1e-9);

        // only z5 nonzero: p* = z5^2 (gamma - Tr(QP) - W), no (A,B) term
        let mut z = vec![0.0; layout.n_z];
        z[layout.z5] = 0.7;
        let expected = 0.7 * 0.7 * (3.0 - 2.0 - 0.5);
        let p = primal_min_fixed_z(&record, &z, &ctx)
            .unwrap()
            .value()
            .unwrap();
        assert!((p - expected).abs() < 1e-8, "{p} vs {expected}");
    }

    #[test]
    fn strong_duality_and_vertex_oracle() {
        let (state, weights) = toy_context_state();
        let record = toy_record();
        let x = DVector::from_element(1, 0.4);
        let ctx = FixedZContext {
            state: &state,
            weights: &weights,
            eps: record.eps(),
            x: &x,
        };
        let td = build_theta_d(&record).unwrap();
        let layout = ZLayout::full(1);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..25 {
            let mut z: Vec<f64> = (0..layout.n_z)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            z.iter_mut().for_each(|v| *v /= norm);
            let p = primal_min_fixed_z(&record, &z, &ctx)
                .unwrap()
                .value()
                .expect("bounded primal");
            let d = dual_max_fixed_z(&record, &z, &ctx)
                .unwrap()
                .value()
                .expect("feasible dual");
            assert!(
                (p - d).abs() <= 1e-6 * p.abs().max(1.0),
                "duality gap: p* = {p}, d* = {d}"
            );
            let brute = primal_via_vertices(&td, &z, &ctx).unwrap();
            assert!(
                (p - brute).abs() <= 1e-8 * p.abs().max(1.0),
                "vertex oracle mismatch: {p} vs {brute}"
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let sys = example1();
        let mut record = make_training_record(&sys, 4, 0.1, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in crate::sim::generate_training_data(&sys, 2, 0.1, &mut rng) {
            record.push_execution(s).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.csv");
        record.export_csv(&path).unwrap();
        let back = DataRecord::import_csv(&path).unwrap();
        assert_eq!(back.n(), 2);
        assert_eq!(back.eps(), 0.1);
        assert_eq!(back.n_training(), 4);
        assert_eq!(back.n_execution(), 2);
        for (a, b) in record.samples().zip(back.samples()) {
            assert!((&a.x - &b.x).amax() < 1e-14);
            assert!((a.u - b.u).abs() < 1e-14);
            assert!((&a.x_next - &b.x_next).amax() < 1e-14);
        }
    }
}
