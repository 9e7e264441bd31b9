//! Ground-truth plant simulation, disturbance and training-data generation,
//! the unconstrained baseline rollout, and metric computation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consistency::{DataRecord, DataSample};
use crate::error::{Error, Result};
use crate::lqr::LtiSystem;
use crate::lqr::LqrWeights;
use crate::robust::{synthesize_baseline, RobustConfig};

/// Bounded disturbance generator; every sample satisfies the infinity-norm
/// bound exactly by construction.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    dim: usize,
    pub eps: f64,
    pub kind: NoiseKind,
    rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// Uniform on the infinity-norm ball of radius eps.
    UniformLinf,
    Zero,
}

impl NoiseSource {
    pub fn new(dim: usize, seed: u64, eps: f64, kind: NoiseKind) -> Self {
        NoiseSource {
            dim,
            eps,
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self) -> DVector<f64> {
        match self.kind {
            NoiseKind::Zero => DVector::zeros(self.dim),
            NoiseKind::UniformLinf => DVector::from_fn(self.dim, |_, _| {
                self.rng.gen_range(-self.eps..=self.eps)
            }),
        }
    }
}

/// Exact affine plant update `x_next = A x + B u + w`.
pub fn step_plant(
    system: &LtiSystem,
    x: &DVector<f64>,
    u: f64,
    w: &DVector<f64>,
) -> DVector<f64> {
    &system.a * x + &system.b * u + w
}

/// Which loop produced an episode log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlgorithmTag {
    ModelBased,
    DataDriven,
    DataDrivenFixedSet,
    Baseline,
}

impl AlgorithmTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlgorithmTag::ModelBased => "model",
            AlgorithmTag::DataDriven => "dd",
            AlgorithmTag::DataDrivenFixedSet => "dd-fixed",
            AlgorithmTag::Baseline => "baseline",
        }
    }
}

/// One executed step of a receding-horizon episode.
#[derive(Clone, Debug)]
pub struct StepRow {
    pub k: usize,
    pub x: DVector<f64>,
    pub u: f64,
    pub tau: f64,
    pub gamma: f64,
    /// Certified worst-case bound tau * gamma.
    pub bound: f64,
    /// `x' P^-1 x` at the solve-time state.
    pub lyapunov: f64,
    pub chebyshev_radius: Option<f64>,
    pub feasible: bool,
}

#[derive(Clone, Debug)]
pub struct EpisodeLog {
    pub algorithm: AlgorithmTag,
    pub rows: Vec<StepRow>,
}

impl EpisodeLog {
    pub fn new(algorithm: AlgorithmTag) -> Self {
        EpisodeLog {
            algorithm,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: StepRow) {
        self.rows.push(row);
    }

    pub fn bounds(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.bound).collect()
    }

    pub fn max_abs_u(&self) -> f64 {
        self.rows.iter().map(|r| r.u.abs()).fold(0.0, f64::max)
    }

    /// Realized cumulative cost sum of `x'Qx + R u^2` over logged steps.
    pub fn realized_cost(&self, weights: &LqrWeights) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.x.transpose() * &weights.q * &r.x)[0] + weights.r * r.u * r.u)
            .sum()
    }
}

/// An episode that may have stopped early: the rows collected so far plus
/// the step and reason of an unrecoverable infeasibility, if any.
#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub log: EpisodeLog,
    pub infeasible_at: Option<(usize, String)>,
}

impl EpisodeResult {
    pub fn complete(log: EpisodeLog) -> Self {
        EpisodeResult {
            log,
            infeasible_at: None,
        }
    }

    pub fn into_log(self) -> Result<EpisodeLog> {
        match self.infeasible_at {
            None => Ok(self.log),
            Some((step, detail)) => Err(Error::StepInfeasible { step, detail }),
        }
    }
}

/// Random system with spectral radius scaled to `radius` (< 1) and a random
/// nonzero input column.
pub fn random_schur_stable(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> LtiSystem {
    loop {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let rho = a
            .complex_eigenvalues()
            .iter()
            .map(|l| l.norm())
            .fold(0.0, f64::max);
        if rho < 1e-6 {
            continue;
        }
        let a = a * (radius / rho);
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        if b.norm() < 0.1 {
            continue;
        }
        return LtiSystem::new(a, b).unwrap();
    }
}

/// Training samples from random initial states with excitation inputs in
/// [-1, 1] and uniform infinity-norm-bounded noise. The generating system is
/// in the resulting consistency set by construction.
pub fn generate_training_data(
    system: &LtiSystem,
    n_d: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<DataSample> {
    assert!(n_d >= 1);
    let n = system.n();
    (0..n_d)
        .map(|_| {
            let x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let u: f64 = rng.gen_range(-1.0..1.0);
            let w = if eps > 0.0 {
                DVector::from_fn(n, |_, _| rng.gen_range(-eps..=eps))
            } else {
                DVector::zeros(n)
            };
            let x_next = step_plant(system, &x, u, &w);
            DataSample { x, u, x_next }
        })
        .collect()
}

/// Convenience: fresh record with `n_d` training samples from `system`.
pub fn make_training_record(
    system: &LtiSystem,
    n_d: usize,
    eps: f64,
    seed: u64,
) -> Result<DataRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = generate_training_data(system, n_d, eps, &mut rng);
    DataRecord::new(system.n(), eps, samples)
}

/// Baseline contrast: synthesize one robust gain from training data only
/// (no input constraint, tau fixed at 1) and roll it out unchanged. Inputs
/// are logged without clipping so violations stay observable.
pub fn run_baseline_unconstrained(
    record: &DataRecord,
    weights: &LqrWeights,
    x1: &DVector<f64>,
    steps: usize,
    cfg: &RobustConfig,
    noise: &mut NoiseSource,
    true_system: &LtiSystem,
) -> Result<EpisodeLog> {
    if steps == 0 {
        return Err(Error::InvalidArgument("step count must be >= 1".into()));
    }
    let state = synthesize_baseline(record, weights, cfg)?;
    let gain = state.gain();
    let mut log = EpisodeLog::new(AlgorithmTag::Baseline);
    let mut x = x1.clone();
    for k in 1..=steps {
        let u = (&gain * &x)[0];
        let w = noise.sample();
        let x_next = step_plant(true_system, &x, u, &w);
        log.push(StepRow {
            k,
            x: x.clone(),
            u,
            tau: 1.0,
            gamma: state.gamma,
            bound: state.gamma,
            lyapunov: state.lyapunov(&x),
            chebyshev_radius: None,
            feasible: true,
        });
        x = x_next;
    }
    Ok(log)
}

/// Tabulated comparison of episode logs.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub algorithm: AlgorithmTag,
    pub max_abs_u: f64,
    pub cumulative_cost: f64,
    pub final_state_norm: f64,
    pub bounds: Vec<f64>,
    pub radii: Vec<Option<f64>>,
}

pub fn compare_metrics(logs: &[EpisodeLog], weights: &LqrWeights) -> Vec<MetricsRow> {
    logs.iter()
        .map(|log| MetricsRow {
            algorithm: log.algorithm,
            max_abs_u: log.max_abs_u(),
            cumulative_cost: log.realized_cost(weights),
            final_state_norm: log.rows.last().map(|r| r.x.norm()).unwrap_or(0.0),
            bounds: log.bounds(),
            radii: log.rows.iter().map(|r| r.chebyshev_radius).collect(),
        })
        .collect()
}
