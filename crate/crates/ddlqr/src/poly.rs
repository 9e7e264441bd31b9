//! Polynomial algebra over a fixed indeterminate vector and compilation of
//! SOS nonnegativity certificates into conic constraints.
//!
//! Coefficients are affine expressions in decision variables; monomials are
//! ordered graded-lexicographically so Gram indexing and emitted constraint
//! order are deterministic.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::conic::{AffExpr, AffMatrix, ConicProblem, ConicSolution};
use crate::error::{Error, Result};

/// Exponent tuple of a monomial.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Monomial(pub Vec<u32>);

impl Monomial {
    pub fn constant(n_vars: usize) -> Self {
        Monomial(vec![0; n_vars])
    }

    pub fn var(n_vars: usize, idx: usize) -> Self {
        let mut e = vec![0; n_vars];
        e[idx] = 1;
        Monomial(e)
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .map(|(e, x)| x.powi(*e as i32))
            .product()
    }
}

impl Ord for Monomial {
    // graded-lex: lower total degree first, then lexicographic with the
    // earliest variable dominating ((1,0) precedes (0,1)).
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All exponent tuples over `n_vars` with total degree <= `max_degree`,
/// in graded-lex order. Length is C(n_vars + max_degree, max_degree).
pub fn monomial_basis(n_vars: usize, max_degree: u32) -> Vec<Monomial> {
    assert!(n_vars >= 1);
    let mut out = Vec::new();
    let mut current = vec![0u32; n_vars];
    gen_rec(&mut out, &mut current, 0, max_degree);
    out.sort();
    out
}

fn gen_rec(out: &mut Vec<Monomial>, current: &mut Vec<u32>, idx: usize, budget: u32) {
    if idx == current.len() {
        out.push(Monomial(current.clone()));
        return;
    }
    for d in 0..=budget {
        current[idx] = d;
        gen_rec(out, current, idx + 1, budget - d);
    }
    current[idx] = 0;
}

/// Sparse polynomial in a fixed indeterminate vector; each coefficient is an
/// affine expression in decision variables.
#[derive(Clone, Debug)]
pub struct PolyExpr {
    n_vars: usize,
    terms: BTreeMap<Monomial, AffExpr>,
}

impl PolyExpr {
    pub fn zero(n_vars: usize) -> Self {
        PolyExpr {
            n_vars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(n_vars: usize, c: f64) -> Self {
        let mut p = PolyExpr::zero(n_vars);
        p.add_term(Monomial::constant(n_vars), AffExpr::constant(c));
        p
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &AffExpr)> {
        self.terms.iter()
    }

    pub fn coefficient(&self, m: &Monomial) -> AffExpr {
        self.terms.get(m).cloned().unwrap_or_else(AffExpr::zero)
    }

    pub fn add_term(&mut self, m: Monomial, coeff: AffExpr) {
        assert_eq!(m.0.len(), self.n_vars, "exponent tuple length mismatch");
        self.terms
            .entry(m)
            .or_insert_with(AffExpr::zero)
            .add_assign(&coeff);
    }

    pub fn add(&self, other: &PolyExpr) -> PolyExpr {
        assert_eq!(self.n_vars, other.n_vars);
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &PolyExpr) -> PolyExpr {
        self.add(&other.scaled(-1.0))
    }

    pub fn scaled(&self, s: f64) -> PolyExpr {
        PolyExpr {
            n_vars: self.n_vars,
            terms: self
                .terms
                .iter()
                .map(|(m, c)| (m.clone(), c.scaled(s)))
                .collect(),
        }
    }

    /// Polynomial product. At least one operand must have purely constant
    /// coefficients (coefficients stay affine in decision variables).
    pub fn mul(&self, other: &PolyExpr) -> Result<PolyExpr> {
        assert_eq!(self.n_vars, other.n_vars);
        let self_const = self.terms.values().all(|c| c.is_constant());
        let other_const = other.terms.values().all(|c| c.is_constant());
        if !self_const && !other_const {
            return Err(Error::InvalidArgument(
                "product of two decision-variable polynomials is not affine".into(),
            ));
        }
        let mut out = PolyExpr::zero(self.n_vars);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let coeff = if ca.is_constant() {
                    cb.scaled(ca.constant)
                } else {
                    ca.scaled(cb.constant)
                };
                out.add_term(ma.mul(mb), coeff);
            }
        }
        Ok(out)
    }

    /// Re-index into a larger indeterminate vector: variable `i` of `self`
    /// becomes variable `offset + i`.
    pub fn embed(&self, n_vars: usize, offset: usize) -> PolyExpr {
        assert!(offset + self.n_vars <= n_vars);
        let mut out = PolyExpr::zero(n_vars);
        for (m, c) in &self.terms {
            let mut e = vec![0u32; n_vars];
            e[offset..offset + self.n_vars].copy_from_slice(&m.0);
            out.add_term(Monomial(e), c.clone());
        }
        out
    }

    /// Evaluate a constant-coefficient polynomial at a point.
    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        assert_eq!(point.len(), self.n_vars);
        let mut v = 0.0;
        for (m, c) in &self.terms {
            if !c.is_constant() {
                return Err(Error::InvalidArgument(
                    "polynomial has unresolved decision variables".into(),
                ));
            }
            v += c.constant * m.eval(point);
        }
        Ok(v)
    }

    /// Evaluate with decision variables substituted from a solution.
    pub fn eval_with(&self, sol: &ConicSolution, point: &[f64]) -> f64 {
        assert_eq!(point.len(), self.n_vars);
        self.terms
            .iter()
            .map(|(m, c)| sol.value(c) * m.eval(point))
            .sum()
    }

    /// Union of monomials of `self` and `other`.
    fn monomial_union<'a>(&'a self, other: &'a PolyExpr) -> Vec<&'a Monomial> {
        let mut set: Vec<&Monomial> = self.terms.keys().collect();
        for m in other.terms.keys() {
            if !self.terms.contains_key(m) {
                set.push(m);
            }
        }
        set.sort();
        set
    }
}

/// `1 - z'z` over `n_vars` indeterminates.
pub fn unit_ball_poly(n_vars: usize) -> PolyExpr {
    let mut p = PolyExpr::constant(n_vars, 1.0);
    for i in 0..n_vars {
        let mut e = vec![0u32; n_vars];
        e[i] = 2;
        p.add_term(Monomial(e), AffExpr::constant(-1.0));
    }
    p
}

/// `z'z` over `n_vars` indeterminates.
pub fn norm_sq_poly(n_vars: usize) -> PolyExpr {
    let mut p = PolyExpr::zero(n_vars);
    for i in 0..n_vars {
        let mut e = vec![0u32; n_vars];
        e[i] = 2;
        p.add_term(Monomial(e), AffExpr::constant(1.0));
    }
    p
}

/// Putinar-style nonnegativity witness: `sigma0 + sigma1 * (1 - z'z)` where
/// both sigmas are Gram-certified SOS.
#[derive(Clone, Debug)]
pub struct SosCertificate {
    pub basis: Vec<Monomial>,
    pub gram: AffMatrix,
    /// Gram/basis of the ball multiplier sigma1, when attached.
    pub multiplier: Option<(Vec<Monomial>, AffMatrix)>,
}

impl SosCertificate {
    /// The certified polynomial `sigma0 + sigma1 (1 - z'z)`.
    pub fn reconstruct(&self, n_vars: usize) -> PolyExpr {
        let mut p = gram_poly(n_vars, &self.basis, &self.gram);
        if let Some((basis1, gram1)) = &self.multiplier {
            let sigma1 = gram_poly(n_vars, basis1, gram1);
            p = p.add(&sigma1.mul(&unit_ball_poly(n_vars)).expect("ball poly is constant"));
        }
        p
    }
}

/// Expand `b(z)' G b(z)` as a polynomial with coefficients affine in the
/// Gram entries.
pub fn gram_poly(n_vars: usize, basis: &[Monomial], gram: &AffMatrix) -> PolyExpr {
    assert_eq!(gram.nrows, basis.len());
    assert_eq!(gram.ncols, basis.len());
    let mut p = PolyExpr::zero(n_vars);
    for i in 0..basis.len() {
        for j in i..basis.len() {
            let m = basis[i].mul(&basis[j]);
            let scale = if i == j { 1.0 } else { 2.0 };
            p.add_term(m, gram.get(i, j).scaled(scale));
        }
    }
    p
}

/// A fresh polynomial constrained to be nonnegative on the unit ball,
/// defined directly by its certificate (no separate coefficient variables).
/// Returns the reconstructed polynomial and its certificate.
pub fn nonneg_poly_on_ball(
    prob: &mut ConicProblem,
    n_vars: usize,
    half_degree: u32,
    label: &str,
) -> (PolyExpr, SosCertificate) {
    let basis = monomial_basis(n_vars, half_degree);
    let gram = prob.symmetric(&format!("{label}.G0"), basis.len());
    prob.psd(gram.clone());
    let multiplier = if half_degree >= 1 {
        let basis1 = monomial_basis(n_vars, half_degree - 1);
        let gram1 = prob.symmetric(&format!("{label}.G1"), basis1.len());
        prob.psd(gram1.clone());
        Some((basis1, gram1))
    } else {
        None
    };
    let cert = SosCertificate {
        basis,
        gram,
        multiplier,
    };
    let poly = cert.reconstruct(n_vars);
    (poly, cert)
}

/// Compile `target >= 0` (globally, or on the unit ball when `on_unit_ball`)
/// into coefficient-matching equalities plus PSD Gram blocks added to `prob`.
pub fn compile_sos(
    prob: &mut ConicProblem,
    target: &PolyExpr,
    half_degree: u32,
    on_unit_ball: bool,
    label: &str,
) -> Result<SosCertificate> {
    let n_vars = target.n_vars();
    for (m, _) in target.terms() {
        if m.degree() > 2 * half_degree {
            return Err(Error::SosDegree {
                monomial: format!("{:?}", m.0),
                degree: m.degree() as usize,
                half_degree: half_degree as usize,
            });
        }
    }
    let basis = monomial_basis(n_vars, half_degree);
    let gram = prob.symmetric(&format!("{label}.G0"), basis.len());
    prob.psd(gram.clone());
    let mut cert_poly = gram_poly(n_vars, &basis, &gram);
    let multiplier = if on_unit_ball && half_degree >= 1 {
        let basis1 = monomial_basis(n_vars, half_degree - 1);
        let gram1 = prob.symmetric(&format!("{label}.G1"), basis1.len());
        prob.psd(gram1.clone());
        let sigma1 = gram_poly(n_vars, &basis1, &gram1);
        cert_poly = cert_poly.add(&sigma1.mul(&unit_ball_poly(n_vars))?);
        Some((basis1, gram1))
    } else {
        None
    };
    // match every monomial coefficient of target against the certificate
    for m in cert_poly.monomial_union(target) {
        let diff = &cert_poly.coefficient(m) - &target.coefficient(m);
        prob.eq_zero(diff);
    }
    Ok(SosCertificate {
        basis,
        gram,
        multiplier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::SolveStatus;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_examples() {
        let b = monomial_basis(1, 0);
        assert_eq!(b, vec![Monomial(vec![0])]);

        let b = monomial_basis(2, 1);
        assert_eq!(
            b,
            vec![
                Monomial(vec![0, 0]),
                Monomial(vec![1, 0]),
                Monomial(vec![0, 1])
            ]
        );

        // Gram size C(n_z + r, r) with n_z = 14, r = 1
        assert_eq!(monomial_basis(14, 1).len(), 15);
        // binomial sanity at higher degree
        assert_eq!(monomial_basis(3, 2).len(), 10);
    }

    #[test]
    fn empty_poly_evaluates_to_zero() {
        let p = PolyExpr::zero(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let pt: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert_eq!(p.eval(&pt).unwrap(), 0.0);
        }
    }

    fn random_const_poly(rng: &mut ChaCha8Rng, n_vars: usize, deg: u32) -> PolyExpr {
        let mut p = PolyExpr::zero(n_vars);
        for m in monomial_basis(n_vars, deg) {
            if rng.gen_bool(0.6) {
                p.add_term(m, AffExpr::constant(rng.gen_range(-3.0..3.0)));
            }
        }
        p
    }

    #[test]
    fn randomized_algebra_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_const_poly(&mut rng, 2, 2);
            let b = random_const_poly(&mut rng, 2, 2);
            let c = random_const_poly(&mut rng, 2, 1);
            let pt: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            // commutativity
            let ab = a.mul(&b).unwrap();
            let ba = b.mul(&a).unwrap();
            assert!((ab.eval(&pt).unwrap() - ba.eval(&pt).unwrap()).abs() < 1e-9);
            // associativity
            let abc1 = a.mul(&b).unwrap().mul(&c).unwrap();
            let abc2 = a.mul(&b.mul(&c).unwrap()).unwrap();
            assert!((abc1.eval(&pt).unwrap() - abc2.eval(&pt).unwrap()).abs() < 1e-9);
            // addition commutes
            let s1 = a.add(&b).eval(&pt).unwrap();
            let s2 = b.add(&a).eval(&pt).unwrap();
            assert!((s1 - s2).abs() < 1e-12);
        }
    }

    #[test]
    fn sos_perfect_square() {
        // target = z1^2 over one variable
        let mut prob = ConicProblem::new();
        let mut target = PolyExpr::zero(1);
        target.add_term(Monomial(vec![2]), AffExpr::constant(1.0));
        let cert = compile_sos(&mut prob, &target, 1, false, "sq").unwrap();
        prob.minimize(AffExpr::zero());
        let sol = prob.solve(1e-9).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let g = sol.matrix_value(&cert.gram);
        // basis is [1, z]; the z-z Gram entry carries the square
        assert!((g[(1, 1)] - 1.0).abs() < 1e-6);
        assert!(g[(0, 0)].abs() < 1e-6);
        assert!(cert.multiplier.is_none());
    }

    #[test]
    fn sos_ball_constraint_itself() {
        // target = 1 - z^2 on the ball: sigma0 = 0, sigma1 = 1 is feasible
        let mut prob = ConicProblem::new();
        let target = unit_ball_poly(1);
        let cert = compile_sos(&mut prob, &target, 1, true, "ball").unwrap();
        // push sigma0 toward zero to pin the natural witness
        let mut obj = AffExpr::zero();
        for i in 0..cert.basis.len() {
            obj.add_assign(cert.gram.get(i, i));
        }
        prob.minimize(obj);
        let sol = prob.solve(1e-9).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let g0 = sol.matrix_value(&cert.gram);
        assert!(g0.amax() < 1e-6);
        let (_, g1) = cert.multiplier.as_ref().unwrap();
        assert!((sol.value(g1.get(0, 0)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sos_cross_term_on_ball_random_evaluation() {
        // target = 0.5 + z1 z2, nonnegative on the unit ball
        let mut prob = ConicProblem::new();
        let mut target = PolyExpr::constant(2, 0.5);
        target.add_term(Monomial(vec![1, 1]), AffExpr::constant(1.0));
        let cert = compile_sos(&mut prob, &target, 1, true, "x").unwrap();
        prob.minimize(AffExpr::zero());
        let sol = prob.solve(1e-9).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let rec = cert.reconstruct(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            // uniform in the unit disk
            let (x, y) = loop {
                let x: f64 = rng.gen_range(-1.0..1.0);
                let y: f64 = rng.gen_range(-1.0..1.0);
                if x * x + y * y <= 1.0 {
                    break (x, y);
                }
            };
            let v = rec.eval_with(&sol, &[x, y]);
            assert!(v >= -1e-6, "certificate negative at ({x},{y}): {v}");
            // reconstruction matches target on the ball up to multiplier slack:
            // coefficient identities make them equal everywhere
            let t = target.eval(&[x, y]).unwrap();
            assert!((v - t).abs() < 1e-5);
        }
    }

    #[test]
    fn sos_degree_mismatch_is_structured() {
        let mut prob = ConicProblem::new();
        let mut target = PolyExpr::zero(1);
        target.add_term(Monomial(vec![4]), AffExpr::constant(1.0));
        match compile_sos(&mut prob, &target, 1, false, "d") {
            Err(Error::SosDegree { degree, .. }) => assert_eq!(degree, 4),
            other => panic!("expected degree error, got {other:?}"),
        }
    }

    #[test]
    fn certificate_nonneg_on_sampled_ball() {
        // invariant: evaluating the certified target at sampled ball points
        // stays above -10*tol
        let tol = 1e-9;
        let mut prob = ConicProblem::new();
        let mut target = PolyExpr::constant(3, 0.3);
        target.add_term(Monomial(vec![1, 1, 0]), AffExpr::constant(0.4));
        target.add_term(Monomial(vec![0, 0, 2]), AffExpr::constant(0.5));
        let cert = compile_sos(&mut prob, &target, 1, true, "p").unwrap();
        prob.minimize(AffExpr::zero());
        let sol = prob.solve(tol).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let rec = cert.reconstruct(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let pt: Vec<f64> = loop {
                let p: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break p;
                }
            };
            assert!(rec.eval_with(&sol, &pt) >= -10.0 * tol.max(1e-7));
        }
    }
}
