//! Command-line front end: experiment orchestration, CSV and SVG emission,
//! and oracle-check suites.
//!
//! Exit codes: 0 success, 1 configuration or internal error, 2 synthesis
//! infeasibility (partial logs are still written).
//!
//! The environment variable `DDLQR_SOLVER_TOL` overrides the configured
//! conic-solver tolerance for all subcommands.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ddlqr::config::{write_manifest, AlgoSelector, ExperimentConfig};
use ddlqr::consistency::{
    build_theta_d, dual_max_fixed_z, interior_radius, primal_min_fixed_z, primal_via_vertices,
    DataRecord, DataSample, FixedZContext,
};
use ddlqr::lqr::{riccati_oracle, run_model_loop_logged, solve_classic_lqr, ControllerState,
    LqrWeights};
use ddlqr::plot::{write_line_plot, Series};
use ddlqr::robust::{
    run_dd_loop_logged, sampled_lmi_margin, solve_dd_step, RobustConfig, ZLayout,
};
use ddlqr::sim::{
    make_training_record, random_schur_stable, run_baseline_unconstrained, EpisodeLog,
    NoiseKind, NoiseSource,
};
use ddlqr::Error;
use nalgebra::{DMatrix, RowDVector};

#[derive(Parser)]
#[command(
    name = "ddlqr",
    about = "Robust data-driven receding-horizon LQR with input constraints",
    after_help = "Environment: DDLQR_SOLVER_TOL overrides the conic solver tolerance."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured closed loops and write CSVs, plots, and a manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured algorithm selection.
        #[arg(long, value_parser = ["model", "dd", "baseline", "all"])]
        algo: Option<String>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the independent verification suites and print a pass/fail table.
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate the configured training record and write it as CSV.
    ExportRecord {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a record CSV and print a summary.
    ImportRecord {
        #[arg(long)]
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Command::Simulate {
            config,
            algo,
            seed,
            out,
        } => cmd_simulate(&config, algo.as_deref(), seed, out.as_deref()),
        Command::OracleCheck { config } => cmd_oracle_check(&config),
        Command::ExportRecord { config, out } => cmd_export_record(&config, &out),
        Command::ImportRecord { path } => cmd_import_record(&path),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::StepInfeasible { .. } | Error::EmptyConsistencySet(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(
    path: &Path,
    algo: Option<&str>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(a) = algo {
        cfg.algo = match a {
            "model" => AlgoSelector::Model,
            "dd" => AlgoSelector::Dd,
            "baseline" => AlgoSelector::Baseline,
            _ => AlgoSelector::All,
        };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.display().to_string();
    }
    Ok(cfg)
}

fn cmd_simulate(
    path: &Path,
    algo: Option<&str>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<ExitCode, Error> {
    let cfg = load_config(path, algo, seed, out)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let system = cfg.lti_system()?;
    let weights = cfg.lqr_weights()?;
    let robust_cfg = cfg.robust_config();
    let record = make_training_record(&system, cfg.n_train, cfg.eps, cfg.seed)?;
    let x1 = cfg.x1();
    let n = cfg.n();
    // all loops see the same disturbance realization for a fair comparison
    let noise_seed = cfg.seed.wrapping_add(0x5eed);
    let fresh_noise = || NoiseSource::new(n, noise_seed, cfg.eps, NoiseKind::UniformLinf);

    let run_model = matches!(cfg.algo, AlgoSelector::Model | AlgoSelector::All);
    let run_dd = matches!(cfg.algo, AlgoSelector::Dd | AlgoSelector::All);
    let run_baseline = matches!(cfg.algo, AlgoSelector::Baseline | AlgoSelector::All);

    let mut logs: Vec<EpisodeLog> = Vec::new();
    let mut failures: Vec<(String, usize, String)> = Vec::new();

    if run_model {
        let result = run_model_loop_logged(
            &system,
            &weights,
            cfg.eps,
            &x1,
            cfg.steps,
            &robust_cfg.tau_grid,
            &mut fresh_noise(),
            robust_cfg.delta,
            robust_cfg.tol,
        )?;
        if let Some((step, detail)) = &result.infeasible_at {
            failures.push(("model".into(), *step, detail.clone()));
        }
        logs.push(result.log);
    }
    if run_dd {
        for grow in [true, false] {
            let (result, _) = run_dd_loop_logged(
                &system,
                &weights,
                &record,
                &x1,
                cfg.steps,
                &robust_cfg,
                &mut fresh_noise(),
                grow,
            )?;
            if let Some((step, detail)) = &result.infeasible_at {
                failures.push((result.log.algorithm.as_str().into(), *step, detail.clone()));
            }
            logs.push(result.log);
        }
    }
    if run_baseline {
        match run_baseline_unconstrained(
            &record,
            &weights,
            &x1,
            cfg.steps,
            &robust_cfg,
            &mut fresh_noise(),
            &system,
        ) {
            Ok(log) => logs.push(log),
            Err(Error::StepInfeasible { step, detail }) => {
                failures.push(("baseline".into(), step, detail));
            }
            Err(e) => return Err(e),
        }
    }

    write_csvs(&out_dir, &logs, n)?;
    write_plots(&out_dir, &logs)?;
    write_manifest(&out_dir, &cfg, cfg.seed)?;
    println!(
        "wrote {} episode log(s) to {}",
        logs.len(),
        out_dir.display()
    );
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for (algo, step, detail) in &failures {
            eprintln!("{algo}: infeasible at step {step}: {detail}");
        }
        Ok(ExitCode::from(2))
    }
}

fn write_csvs(dir: &Path, logs: &[EpisodeLog], n: usize) -> Result<(), Error> {
    let mut traj = File::create(dir.join("trajectory.csv"))?;
    let xcols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    writeln!(traj, "algo,k,{}", xcols.join(","))?;
    let mut ctrl = File::create(dir.join("controls.csv"))?;
    writeln!(ctrl, "algo,k,u,feasible")?;
    let mut bounds = File::create(dir.join("bounds.csv"))?;
    writeln!(bounds, "algo,k,tau,gamma,bound,lyapunov")?;
    let mut radius = File::create(dir.join("radius.csv"))?;
    writeln!(radius, "algo,k,radius")?;
    for log in logs {
        let algo = log.algorithm.as_str();
        for row in &log.rows {
            let xs: Vec<String> = row.x.iter().map(|v| format!("{v:.12e}")).collect();
            writeln!(traj, "{algo},{},{}", row.k, xs.join(","))?;
            writeln!(ctrl, "{algo},{},{:.12e},{}", row.k, row.u, row.feasible)?;
            writeln!(
                bounds,
                "{algo},{},{:.6e},{:.12e},{:.12e},{:.12e}",
                row.k, row.tau, row.gamma, row.bound, row.lyapunov
            )?;
            if let Some(r) = row.chebyshev_radius {
                writeln!(radius, "{algo},{},{r:.12e}", row.k)?;
            }
        }
    }
    Ok(())
}

fn write_plots(dir: &Path, logs: &[EpisodeLog]) -> Result<(), Error> {
    let series_of = |f: &dyn Fn(&ddlqr::sim::StepRow) -> Option<f64>| -> Vec<Series> {
        logs.iter()
            .map(|log| {
                Series::new(
                    log.algorithm.as_str(),
                    log.rows
                        .iter()
                        .filter_map(|r| f(r).map(|v| (r.k as f64, v)))
                        .collect(),
                )
            })
            .filter(|s| !s.points.is_empty())
            .collect()
    };
    write_line_plot(
        dir.join("trajectory.svg"),
        "State norm",
        "step k",
        "||x_k||",
        &series_of(&|r| Some(r.x.norm())),
    )?;
    write_line_plot(
        dir.join("controls.svg"),
        "Control inputs (constraint: |u| <= 1)",
        "step k",
        "u_k",
        &series_of(&|r| Some(r.u)),
    )?;
    write_line_plot(
        dir.join("bounds.svg"),
        "Certified worst-case bound",
        "step k",
        "tau_k * gamma_k",
        &series_of(&|r| Some(r.bound)),
    )?;
    write_line_plot(
        dir.join("radius.svg"),
        "Consistency-set Chebyshev radius",
        "step k",
        "radius",
        &series_of(&|r| r.chebyshev_radius),
    )?;
    Ok(())
}

fn cmd_export_record(config: &Path, out: &Path) -> Result<ExitCode, Error> {
    let cfg = load_config(config, None, None, None)?;
    let system = cfg.lti_system()?;
    let record = make_training_record(&system, cfg.n_train, cfg.eps, cfg.seed)?;
    record.export_csv(out)?;
    println!(
        "wrote {} training samples (n = {}, eps = {}) to {}",
        record.n_training(),
        record.n(),
        record.eps(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_import_record(path: &Path) -> Result<ExitCode, Error> {
    let record = DataRecord::import_csv(path)?;
    println!(
        "record: n = {}, eps = {}, {} training + {} execution samples",
        record.n(),
        record.eps(),
        record.n_training(),
        record.n_execution()
    );
    match interior_radius(&record)? {
        r if r.is_infinite() => println!("consistency set: unbounded"),
        r => println!("consistency set: Chebyshev radius {r:.6e}"),
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// oracle-check suites
// ---------------------------------------------------------------------------

fn cmd_oracle_check(path: &Path) -> Result<ExitCode, Error> {
    let cfg = load_config(path, None, None, None)?;
    let checks: Vec<(&str, Result<(), String>)> = vec![
        ("duality-gap", check_duality_gap(&cfg)),
        ("sdp-vs-riccati", check_sdp_vs_riccati(&cfg)),
        (
            "robust-feasibility-sampling",
            check_robust_sampling(&cfg),
        ),
        ("toy-vertex-exactness", check_toy_vertices()),
    ];
    let mut all_ok = true;
    println!("{:<30} result", "check");
    for (name, res) in &checks {
        match res {
            Ok(()) => println!("{name:<30} PASS"),
            Err(msg) => {
                all_ok = false;
                println!("{name:<30} FAIL  {msg}");
            }
        }
    }
    if all_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Solver(
            checks
                .iter()
                .find(|(_, r)| r.is_err())
                .map(|(n, _)| format!("oracle check '{n}' failed"))
                .unwrap(),
        ))
    }
}

/// Fixed-z primal and dual LPs must agree whenever the consistency set has
/// an interior point.
fn check_duality_gap(cfg: &ExperimentConfig) -> Result<(), String> {
    let (record, state, weights, x) = solved_step(cfg)?;
    let layout = ZLayout::full(record.n());
    let ctx = FixedZContext {
        state: &state,
        weights: &weights,
        eps: record.eps(),
        x: &x,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(11));
    for trial in 0..20 {
        let mut z: Vec<f64> = (0..layout.n_z)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        z.iter_mut().for_each(|v| *v /= norm);
        let p = primal_min_fixed_z(&record, &z, &ctx)
            .map_err(|e| e.to_string())?
            .value()
            .ok_or("primal unbounded")?;
        let d = dual_max_fixed_z(&record, &z, &ctx)
            .map_err(|e| e.to_string())?
            .value()
            .ok_or("dual reports unbounded primal")?;
        if (p - d).abs() > 1e-6 * p.abs().max(1.0) {
            return Err(format!("trial {trial}: p* = {p:.9e}, d* = {d:.9e}"));
        }
    }
    Ok(())
}

/// Classic LQR SDP must match the Riccati fixed-point route.
fn check_sdp_vs_riccati(cfg: &ExperimentConfig) -> Result<(), String> {
    let mut cases = vec![cfg.lti_system().map_err(|e| e.to_string())?];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(23));
    for _ in 0..5 {
        cases.push(random_schur_stable(&mut rng, cfg.n(), 0.9));
    }
    for (i, sys) in cases.iter().enumerate() {
        if sys.spectral_radius() >= 1.0 && i == 0 {
            continue; // the configured plant may be open-loop unstable
        }
        let weights = LqrWeights::identity(sys.n());
        let st = solve_classic_lqr(sys, &weights).map_err(|e| e.to_string())?;
        let oracle = riccati_oracle(sys, &weights, 1e-13, 200_000).map_err(|e| e.to_string())?;
        let gap = (st.gamma - oracle.gamma).abs() / oracle.gamma;
        if gap > 1e-4 {
            return Err(format!("system {i}: relative gamma gap {gap:.3e}"));
        }
        let kgap = (st.gain() - &oracle.k).amax();
        if kgap > 1e-3 {
            return Err(format!("system {i}: gain gap {kgap:.3e}"));
        }
    }
    Ok(())
}

/// Sampled members of the consistency set must satisfy the returned per-step
/// LMIs.
fn check_robust_sampling(cfg: &ExperimentConfig) -> Result<(), String> {
    let (record, state, weights, x) = solved_step(cfg)?;
    let margin = sampled_lmi_margin(&record, &state, &weights, &x, 100, cfg.seed)
        .map_err(|e| e.to_string())?;
    if margin < -1e-6 {
        return Err(format!("sampled LMI eigenvalue {margin:.3e} < -1e-6"));
    }
    Ok(())
}

/// n = 1 fixed-z primal LP must equal brute-force vertex enumeration.
fn check_toy_vertices() -> Result<(), String> {
    let mut rec = DataRecord::new(1, 0.3, Vec::new()).map_err(|e| e.to_string())?;
    for (x, u, xn) in [(1.0, 0.5, 0.7), (-0.8, 1.0, 0.1), (0.3, -1.0, -0.6)] {
        rec.push_execution(DataSample {
            x: DVector::from_element(1, x),
            u,
            x_next: DVector::from_element(1, xn),
        })
        .map_err(|e| e.to_string())?;
    }
    let state = ControllerState {
        p: DMatrix::from_element(1, 1, 2.0),
        m: RowDVector::from_element(1, 0.3),
        w: 0.5,
        tau: 1.5,
        beta: 0.8,
        gamma: 3.0,
    };
    let weights = LqrWeights::identity(1);
    let x = DVector::from_element(1, 0.4);
    let ctx = FixedZContext {
        state: &state,
        weights: &weights,
        eps: rec.eps(),
        x: &x,
    };
    let td = build_theta_d(&rec).map_err(|e| e.to_string())?;
    let layout = ZLayout::full(1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let mut z: Vec<f64> = (0..layout.n_z)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        z.iter_mut().for_each(|v| *v /= norm);
        let lp = primal_min_fixed_z(&rec, &z, &ctx)
            .map_err(|e| e.to_string())?
            .value()
            .ok_or("unbounded primal on bounded toy polytope")?;
        let brute = primal_via_vertices(&td, &z, &ctx).map_err(|e| e.to_string())?;
        if (lp - brute).abs() > 1e-9 * lp.abs().max(1.0) {
            return Err(format!("trial {trial}: LP {lp:.12e} vs vertices {brute:.12e}"));
        }
    }
    Ok(())
}

/// Shared setup: Slater check, then one solved data-driven step at x1.
fn solved_step(
    cfg: &ExperimentConfig,
) -> Result<(DataRecord, ControllerState, LqrWeights, DVector<f64>), String> {
    let system = cfg.lti_system().map_err(|e| e.to_string())?;
    let weights = cfg.lqr_weights().map_err(|e| e.to_string())?;
    let record = make_training_record(&system, cfg.n_train, cfg.eps, cfg.seed)
        .map_err(|e| e.to_string())?;
    let radius = interior_radius(&record).map_err(|e| format!("Slater check failed: {e}"))?;
    if radius <= 1e-9 {
        return Err(format!("Slater check failed: interior radius {radius:.3e}"));
    }
    let robust_cfg = RobustConfig {
        tau_grid: cfg.expand_tau_grid(),
        ..cfg.robust_config()
    };
    let x = cfg.x1();
    let dd = solve_dd_step(&record, &weights, &x, None, &robust_cfg)
        .map_err(|e| format!("step synthesis failed: {e}"))?;
    Ok((record, dd.state, weights, x))
}
