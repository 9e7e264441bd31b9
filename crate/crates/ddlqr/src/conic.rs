//! Abstract conic programs (linear + PSD cone constraints) and the solver
//! contract the rest of the crate targets.
//!
//! Problems are built from named scalar variables and symmetric matrix
//! blocks; every constraint is affine in the decision variables. Solving is
//! delegated to an embedded interior-point backend (Clarabel); callers only
//! see [`ConicProblem`] / [`ConicSolution`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, Mul, Neg, Sub};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Handle to a scalar decision variable of a [`ConicProblem`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

/// Affine expression in decision variables: constant + sum of weighted refs.
#[derive(Clone, Debug, Default)]
pub struct AffExpr {
    pub constant: f64,
    terms: BTreeMap<usize, f64>,
}

impl AffExpr {
    pub fn constant(c: f64) -> Self {
        AffExpr {
            constant: c,
            terms: BTreeMap::new(),
        }
    }

    pub fn var(v: VarId) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(v.0, 1.0);
        AffExpr {
            constant: 0.0,
            terms,
        }
    }

    pub fn zero() -> Self {
        AffExpr::default()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.values().all(|c| *c == 0.0)
    }

    pub fn add_term(&mut self, v: VarId, coeff: f64) {
        *self.terms.entry(v.0).or_insert(0.0) += coeff;
    }

    pub fn add_assign(&mut self, other: &AffExpr) {
        self.constant += other.constant;
        for (idx, c) in &other.terms {
            *self.terms.entry(*idx).or_insert(0.0) += c;
        }
    }

    pub fn sub_assign(&mut self, other: &AffExpr) {
        self.constant -= other.constant;
        for (idx, c) in &other.terms {
            *self.terms.entry(*idx).or_insert(0.0) -= c;
        }
    }

    pub fn scaled(&self, s: f64) -> AffExpr {
        AffExpr {
            constant: self.constant * s,
            terms: self.terms.iter().map(|(i, c)| (*i, c * s)).collect(),
        }
    }

    /// Largest variable index referenced, if any.
    fn max_var(&self) -> Option<usize> {
        self.terms
            .iter()
            .filter(|(_, c)| **c != 0.0)
            .map(|(i, _)| *i)
            .max()
    }

    fn iter_terms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.terms
            .iter()
            .filter(|(_, c)| **c != 0.0)
            .map(|(i, c)| (*i, *c))
    }

    /// True when every coefficient and the constant are negligible.
    pub fn is_trivially_zero(&self, tol: f64) -> bool {
        self.constant.abs() <= tol && self.terms.values().all(|c| c.abs() <= tol)
    }
}

impl From<f64> for AffExpr {
    fn from(c: f64) -> Self {
        AffExpr::constant(c)
    }
}

impl From<VarId> for AffExpr {
    fn from(v: VarId) -> Self {
        AffExpr::var(v)
    }
}

impl Add for &AffExpr {
    type Output = AffExpr;
    fn add(self, rhs: &AffExpr) -> AffExpr {
        let mut out = self.clone();
        out.add_assign(rhs);
        out
    }
}

impl Sub for &AffExpr {
    type Output = AffExpr;
    fn sub(self, rhs: &AffExpr) -> AffExpr {
        let mut out = self.clone();
        out.sub_assign(rhs);
        out
    }
}

impl Mul<f64> for &AffExpr {
    type Output = AffExpr;
    fn mul(self, s: f64) -> AffExpr {
        self.scaled(s)
    }
}

impl Neg for &AffExpr {
    type Output = AffExpr;
    fn neg(self) -> AffExpr {
        self.scaled(-1.0)
    }
}

/// Dense matrix of affine expressions, row-major.
#[derive(Clone, Debug)]
pub struct AffMatrix {
    pub nrows: usize,
    pub ncols: usize,
    data: Vec<AffExpr>,
}

impl AffMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        AffMatrix {
            nrows,
            ncols,
            data: vec![AffExpr::zero(); nrows * ncols],
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = AffMatrix::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                *out.get_mut(r, c) = AffExpr::constant(m[(r, c)]);
            }
        }
        out
    }

    pub fn get(&self, r: usize, c: usize) -> &AffExpr {
        &self.data[r * self.ncols + c]
    }

    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut AffExpr {
        &mut self.data[r * self.ncols + c]
    }

    pub fn transpose(&self) -> AffMatrix {
        let mut out = AffMatrix::zeros(self.ncols, self.nrows);
        for r in 0..self.nrows {
            for c in 0..self.ncols {
                *out.get_mut(c, r) = self.get(r, c).clone();
            }
        }
        out
    }

    pub fn add(&self, other: &AffMatrix) -> AffMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            a.add_assign(b);
        }
        out
    }

    pub fn sub(&self, other: &AffMatrix) -> AffMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            a.sub_assign(b);
        }
        out
    }

    pub fn scaled(&self, s: f64) -> AffMatrix {
        let mut out = self.clone();
        for e in &mut out.data {
            *e = e.scaled(s);
        }
        out
    }

    /// Numeric-left product `m * self`.
    pub fn left_mul(&self, m: &DMatrix<f64>) -> AffMatrix {
        assert_eq!(m.ncols(), self.nrows);
        let mut out = AffMatrix::zeros(m.nrows(), self.ncols);
        for r in 0..m.nrows() {
            for c in 0..self.ncols {
                let e = out.get_mut(r, c);
                for k in 0..self.nrows {
                    let w = m[(r, k)];
                    if w != 0.0 {
                        e.add_assign(&self.get(k, c).scaled(w));
                    }
                }
            }
        }
        out
    }

    /// Rank-one style product: numeric column times a 1 x k affine row.
    pub fn col_times_row(col: &DVector<f64>, row: &AffMatrix) -> AffMatrix {
        assert_eq!(row.nrows, 1);
        let mut out = AffMatrix::zeros(col.len(), row.ncols);
        for r in 0..col.len() {
            for c in 0..row.ncols {
                *out.get_mut(r, c) = row.get(0, c).scaled(col[r]);
            }
        }
        out
    }

    /// Symmetric 2x2 block `[a, b; b', d]`.
    pub fn sym_block2(a: &AffMatrix, b: &AffMatrix, d: &AffMatrix) -> AffMatrix {
        assert_eq!(a.nrows, a.ncols);
        assert_eq!(d.nrows, d.ncols);
        assert_eq!((b.nrows, b.ncols), (a.nrows, d.nrows));
        let n = a.nrows + d.nrows;
        let mut out = AffMatrix::zeros(n, n);
        for r in 0..a.nrows {
            for c in 0..a.ncols {
                *out.get_mut(r, c) = a.get(r, c).clone();
            }
        }
        for r in 0..b.nrows {
            for c in 0..b.ncols {
                *out.get_mut(r, a.ncols + c) = b.get(r, c).clone();
                *out.get_mut(a.nrows + c, r) = b.get(r, c).clone();
            }
        }
        for r in 0..d.nrows {
            for c in 0..d.ncols {
                *out.get_mut(a.nrows + r, a.ncols + c) = d.get(r, c).clone();
            }
        }
        out
    }

    /// Bordered block `[tl, top; top', inner]` with a scalar corner.
    pub fn bordered(tl: &AffExpr, top: &AffMatrix, inner: &AffMatrix) -> AffMatrix {
        assert_eq!(top.nrows, 1);
        assert_eq!(inner.nrows, inner.ncols);
        assert_eq!(top.ncols, inner.nrows);
        let n = 1 + inner.nrows;
        let mut out = AffMatrix::zeros(n, n);
        *out.get_mut(0, 0) = tl.clone();
        for c in 0..top.ncols {
            *out.get_mut(0, 1 + c) = top.get(0, c).clone();
            *out.get_mut(1 + c, 0) = top.get(0, c).clone();
        }
        for r in 0..inner.nrows {
            for c in 0..inner.ncols {
                *out.get_mut(1 + r, 1 + c) = inner.get(r, c).clone();
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Constraint {
    /// expr == 0
    Eq(AffExpr),
    /// expr >= 0
    Nonneg(AffExpr),
    /// symmetric affine matrix is PSD; only the upper triangle is used
    Psd(AffMatrix),
}

/// Abstract conic program: minimize an affine objective subject to affine
/// equalities, affine inequalities, and PSD blocks.
#[derive(Clone, Debug, Default)]
pub struct ConicProblem {
    var_names: Vec<String>,
    objective: AffExpr,
    constraints: Vec<Constraint>,
}

/// Termination status of a conic solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

/// Solver residuals reported alongside every solution.
#[derive(Clone, Copy, Debug)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap_abs: f64,
}

/// Result of [`ConicProblem::solve`].
#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub objective: f64,
    pub x: Vec<f64>,
    pub residuals: Residuals,
    pub iterations: u32,
}

impl ConicSolution {
    pub fn value(&self, e: &AffExpr) -> f64 {
        let mut v = e.constant;
        for (i, c) in e.iter_terms() {
            v += c * self.x[i];
        }
        v
    }

    pub fn matrix_value(&self, m: &AffMatrix) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows, m.ncols, |r, c| self.value(m.get(r, c)))
    }
}

impl ConicProblem {
    pub fn new() -> Self {
        ConicProblem::default()
    }

    pub fn num_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn scalar(&mut self, name: &str) -> VarId {
        let id = VarId(self.var_names.len());
        self.var_names.push(name.to_string());
        id
    }

    /// Fresh symmetric n x n block; only n(n+1)/2 scalars are created and
    /// mirrored across the diagonal.
    pub fn symmetric(&mut self, name: &str, n: usize) -> AffMatrix {
        let mut m = AffMatrix::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let v = self.scalar(&format!("{name}[{r},{c}]"));
                *m.get_mut(r, c) = AffExpr::var(v);
                if r != c {
                    *m.get_mut(c, r) = AffExpr::var(v);
                }
            }
        }
        m
    }

    pub fn row_vector(&mut self, name: &str, n: usize) -> AffMatrix {
        let mut m = AffMatrix::zeros(1, n);
        for c in 0..n {
            let v = self.scalar(&format!("{name}[{c}]"));
            *m.get_mut(0, c) = AffExpr::var(v);
        }
        m
    }

    pub fn minimize(&mut self, e: AffExpr) {
        self.check_expr(&e);
        self.objective = e;
    }

    /// expr == 0
    pub fn eq_zero(&mut self, e: AffExpr) {
        self.check_expr(&e);
        // skip identically-zero rows to keep A full row rank
        if !e.is_trivially_zero(0.0) {
            self.constraints.push(Constraint::Eq(e));
        } else if e.constant != 0.0 {
            self.constraints.push(Constraint::Eq(e));
        }
    }

    /// expr >= 0
    pub fn nonneg(&mut self, e: AffExpr) {
        self.check_expr(&e);
        self.constraints.push(Constraint::Nonneg(e));
    }

    /// matrix (symmetric) is PSD
    pub fn psd(&mut self, m: AffMatrix) {
        assert_eq!(m.nrows, m.ncols, "PSD block must be square");
        for e in &m.data {
            self.check_expr(e);
        }
        self.constraints.push(Constraint::Psd(m));
    }

    fn check_expr(&self, e: &AffExpr) {
        if let Some(mx) = e.max_var() {
            assert!(
                mx < self.var_names.len(),
                "expression references undeclared variable {mx}"
            );
        }
    }

    fn cone_rows(&self) -> (usize, usize, Vec<usize>) {
        let mut n_eq = 0;
        let mut n_ineq = 0;
        let mut psd_sides = Vec::new();
        for c in &self.constraints {
            match c {
                Constraint::Eq(_) => n_eq += 1,
                Constraint::Nonneg(_) => n_ineq += 1,
                Constraint::Psd(m) => psd_sides.push(m.nrows),
            }
        }
        (n_eq, n_ineq, psd_sides)
    }

    /// Solve with feasibility/gap tolerances set to `tol`.
    pub fn solve(&self, tol: f64) -> Result<ConicSolution> {
        if tol <= 0.0 {
            return Err(Error::InvalidArgument("solver tol must be positive".into()));
        }
        let nvars = self.num_vars();
        let (n_eq, n_ineq, psd_sides) = self.cone_rows();
        let nrows = n_eq + n_ineq + psd_sides.iter().map(|d| d * (d + 1) / 2).sum::<usize>();

        // rows: equalities, then inequalities, then svec'd PSD blocks.
        // Clarabel form: A x + s = b with s in the cone product.
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        let mut b = vec![0.0; nrows];
        let mut row = 0;
        let sqrt2 = std::f64::consts::SQRT_2;
        for c in &self.constraints {
            match c {
                Constraint::Eq(e) => {
                    // a'x + c = 0  ->  a'x = -c
                    for (i, v) in e.iter_terms() {
                        trips.push((row, i, v));
                    }
                    b[row] = -e.constant;
                    row += 1;
                }
                Constraint::Nonneg(_) => {}
                Constraint::Psd(_) => {}
            }
        }
        for c in &self.constraints {
            if let Constraint::Nonneg(e) = c {
                // a'x + c >= 0  ->  s = c + a'x >= 0  ->  A = -a, b = c
                for (i, v) in e.iter_terms() {
                    trips.push((row, i, -v));
                }
                b[row] = e.constant;
                row += 1;
            }
        }
        for c in &self.constraints {
            if let Constraint::Psd(m) = c {
                // svec: upper triangle, column-major, off-diagonals * sqrt(2)
                for j in 0..m.ncols {
                    for i in 0..=j {
                        let scale = if i == j { 1.0 } else { sqrt2 };
                        let e = m.get(i, j);
                        for (k, v) in e.iter_terms() {
                            trips.push((row, k, -v * scale));
                        }
                        b[row] = e.constant * scale;
                        row += 1;
                    }
                }
            }
        }
        debug_assert_eq!(row, nrows);

        let a = csc_from_triplets(nrows, nvars, &trips);
        let p = CscMatrix::<f64>::zeros((nvars, nvars));
        let mut q = vec![0.0; nvars];
        for (i, v) in self.objective.iter_terms() {
            q[i] += v;
        }

        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if n_eq > 0 {
            cones.push(SupportedConeT::ZeroConeT(n_eq));
        }
        if n_ineq > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(n_ineq));
        }
        for d in &psd_sides {
            cones.push(SupportedConeT::PSDTriangleConeT(*d));
        }

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_feas(tol)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .max_iter(400)
            .build()
            .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("setup: {e:?}")))?;
        solver.solve();

        let status = match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveStatus::Unbounded
            }
            _ => SolveStatus::NumericalFailure,
        };
        let objective = self.objective.constant + solver.solution.obj_val;
        Ok(ConicSolution {
            status,
            objective,
            x: solver.solution.x.clone(),
            residuals: Residuals {
                primal: solver.info.res_primal,
                dual: solver.info.res_dual,
                gap_abs: solver.info.gap_abs,
            },
            iterations: solver.info.iterations,
        })
    }

    /// Explicit Lagrangian dual of this problem, returned as another
    /// [`ConicProblem`]. With primal `min q'x + c0` over the declared cones,
    /// the dual maximum equals the negated optimum of the returned problem:
    /// `primal optimum == -dual_problem optimum` under strong duality.
    pub fn dualize(&self) -> ConicProblem {
        let mut dual = ConicProblem::new();
        // one multiplier per primal constraint row/block
        let mut stationarity: Vec<AffExpr> = (0..self.num_vars())
            .map(|_| AffExpr::zero())
            .collect();
        let mut dual_obj = AffExpr::constant(self.objective.constant);
        for (i, v) in self.objective.iter_terms() {
            stationarity[i].constant += v;
        }
        let mut k = 0usize;
        for c in &self.constraints {
            match c {
                Constraint::Eq(e) => {
                    let nu = dual.scalar(&format!("nu{k}"));
                    for (i, v) in e.iter_terms() {
                        stationarity[i].add_term(nu, v);
                    }
                    let mut t = AffExpr::var(nu);
                    t = t.scaled(e.constant);
                    dual_obj.add_assign(&t);
                }
                Constraint::Nonneg(e) => {
                    let lam = dual.scalar(&format!("lam{k}"));
                    dual.nonneg(AffExpr::var(lam));
                    for (i, v) in e.iter_terms() {
                        stationarity[i].add_term(lam, -v);
                    }
                    dual_obj.add_assign(&AffExpr::var(lam).scaled(-e.constant));
                }
                Constraint::Psd(m) => {
                    let y = dual.symmetric(&format!("Y{k}"), m.nrows);
                    dual.psd(y.clone());
                    // <Y, E(x)> over the full matrix
                    for r in 0..m.nrows {
                        for cidx in 0..m.ncols {
                            let e = m.get(r, cidx);
                            let yrc = y.get(r, cidx);
                            for (i, v) in e.iter_terms() {
                                // stationarity picks up -v * Y[r,c]
                                stationarity[i].add_assign(&yrc.scaled(-v));
                            }
                            dual_obj.add_assign(&yrc.scaled(-e.constant));
                        }
                    }
                }
            }
            k += 1;
        }
        for s in stationarity {
            dual.eq_zero(s);
        }
        // dual maximizes dual_obj; return a minimization of its negation
        dual.minimize(dual_obj.scaled(-1.0));
        dual
    }

    /// Text dump of the program for cross-checking against external solvers.
    ///
    /// Format (one item per line, 0-based indices):
    /// ```text
    /// vars <n>
    /// var <idx> <name>
    /// obj const <c0>
    /// obj <var> <coeff>
    /// eq <row> const <c> | eq <row> <var> <coeff>         # sum == 0
    /// ineq <row> const <c> | ineq <row> <var> <coeff>     # sum >= 0
    /// psd <block> <side>
    /// psdentry <block> <r> <c> const <v> | psdentry <block> <r> <c> <var> <coeff>
    /// ```
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vars {}", self.num_vars());
        for (i, n) in self.var_names.iter().enumerate() {
            let _ = writeln!(s, "var {i} {n}");
        }
        let _ = writeln!(s, "obj const {:.17e}", self.objective.constant);
        for (i, v) in self.objective.iter_terms() {
            let _ = writeln!(s, "obj {i} {v:.17e}");
        }
        let mut eq_row = 0;
        let mut ineq_row = 0;
        let mut blk = 0;
        for c in &self.constraints {
            match c {
                Constraint::Eq(e) => {
                    let _ = writeln!(s, "eq {eq_row} const {:.17e}", e.constant);
                    for (i, v) in e.iter_terms() {
                        let _ = writeln!(s, "eq {eq_row} {i} {v:.17e}");
                    }
                    eq_row += 1;
                }
                Constraint::Nonneg(e) => {
                    let _ = writeln!(s, "ineq {ineq_row} const {:.17e}", e.constant);
                    for (i, v) in e.iter_terms() {
                        let _ = writeln!(s, "ineq {ineq_row} {i} {v:.17e}");
                    }
                    ineq_row += 1;
                }
                Constraint::Psd(m) => {
                    let _ = writeln!(s, "psd {blk} {}", m.nrows);
                    for r in 0..m.nrows {
                        for cc in r..m.ncols {
                            let e = m.get(r, cc);
                            if e.constant != 0.0 {
                                let _ =
                                    writeln!(s, "psdentry {blk} {r} {cc} const {:.17e}", e.constant);
                            }
                            for (i, v) in e.iter_terms() {
                                let _ = writeln!(s, "psdentry {blk} {r} {cc} {i} {v:.17e}");
                            }
                        }
                    }
                    blk += 1;
                }
            }
        }
        s
    }
}

fn csc_from_triplets(nrows: usize, ncols: usize, trips: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
    for &(r, c, v) in trips {
        if v != 0.0 {
            by_col[c].push((r, v));
        }
    }
    let mut colptr = Vec::with_capacity(ncols + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for col in by_col.iter_mut() {
        col.sort_by_key(|(r, _)| *r);
        // merge duplicates
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
        for &(r, v) in col.iter() {
            if let Some(last) = merged.last_mut() {
                if last.0 == r {
                    last.1 += v;
                    continue;
                }
            }
            merged.push((r, v));
        }
        for (r, v) in merged {
            rowval.push(r);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(nrows, ncols, colptr, rowval, nzval)
}
