//! Command-line front end: scenario ingestion, subcommand dispatch, and
//! reproducible artifacts.
//!
//! Exit codes: 0 when the verdict holds, 1 when it does not, 2 on errors.

pub mod config;
pub mod output;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::did::{construct_did, genericity_scan, ParamBox};
use crate::error::{Error, Result};
use crate::experiment::{
    ensemble_run, estimate_lyapunov_exponent, exit_time_experiment, recurrence_smoke, verify_feedback_exponent,
    verify_finite_time, verify_iss, BoundReport, Scenario,
};
use crate::invariance::{check_condition_a, check_condition_ar, check_condition_ar_prime, check_invariance_nominal};
use crate::lyapunov::{
    certificate_report, check_c1, check_c2, check_c2_prime, feedback_constants, nominal_reduced_generator,
    synthesize_certificate,
};
use crate::model::{PerturbationSpec, PerturbedModel};
use crate::qcore::QOperator;
use crate::sde::{
    check_a1, check_a2, check_h1, check_h2, simulate_coupled, simulate_nominal, simulate_perturbed, CoupledSpec,
};

pub use config::{parse_scenario, render_scenario, Built, ScenarioConfig};
pub use output::Manifest;

#[derive(Debug, Parser)]
#[command(
    name = "qsme",
    version,
    about = "Robustness analysis of perturbed quantum stochastic master equations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed, overriding the scenario.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for ensembles and scans.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Replay a previous run from its manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Suppress the console report; the exit code still carries the verdict.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Algebraic invariance of the target subspace.
    CheckInvariance,
    /// Dissipation-induced decomposition and the stability verdict.
    Did,
    /// Fraction of sampled perturbation intensities that keep stability.
    GenericityScan,
    /// Lyapunov certificate, perturbation margin, and ISS envelope.
    Certify,
    /// Feedback constants and assumption checks.
    FeedbackConstants,
    /// One trajectory of the (perturbed) master equation.
    Simulate,
    /// One trajectory of the filtered feedback loop.
    FeedbackSim,
    /// Monte Carlo verification of the configured bounds.
    VerifyBounds,
    /// Recurrence of the state/filter pair to the target.
    RecurrenceSmoke,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::CheckInvariance => "check-invariance",
            Command::Did => "did",
            Command::GenericityScan => "genericity-scan",
            Command::Certify => "certify",
            Command::FeedbackConstants => "feedback-constants",
            Command::Simulate => "simulate",
            Command::FeedbackSim => "feedback-sim",
            Command::VerifyBounds => "verify-bounds",
            Command::RecurrenceSmoke => "recurrence-smoke",
        }
    }
}

/// Result of a subcommand that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub holds: bool,
    pub repair_count: usize,
    pub message: String,
    /// Structured report echoed to stdout.
    pub report: serde_json::Value,
}

fn verdict(holds: bool, message: String, report: serde_json::Value) -> Verdict {
    Verdict {
        holds,
        repair_count: 0,
        message,
        report,
    }
}

fn coupled(built: &Built) -> Result<(&CoupledSpec, &crate::qcore::DensityMatrix)> {
    match (&built.coupled, &built.filter_initial) {
        (Some(s), Some(f)) => Ok((s, f)),
        _ => Err(Error::InvalidArgument(
            "this subcommand needs a [feedback] section".into(),
        )),
    }
}

fn pert_or_zero(built: &Built) -> PerturbationSpec {
    built
        .pert
        .clone()
        .unwrap_or_else(|| PerturbationSpec::zero(built.nominal.dim(), built.nominal.n_channels()))
}

/// Runs one subcommand and writes its artifacts into `out`.
pub fn dispatch(cmd: Command, cfg: &ScenarioConfig, out: &Path) -> Result<Verdict> {
    let built = cfg.build()?;
    let run = &cfg.run;
    match cmd {
        Command::CheckInvariance => {
            let nominal = check_invariance_nominal(&built.nominal, run.u);
            let mut holds = nominal.holds;
            let mut doc = json!({ "nominal": nominal });
            if let Some(p) = &built.pert {
                let a = check_condition_a(&built.nominal, p);
                holds &= a.holds;
                doc["condition_a"] = json!(a);
                doc["condition_ar"] = json!(check_condition_ar(&built.nominal, p));
                doc["condition_ar_prime"] = json!(check_condition_ar_prime(p, built.nominal.split()));
            }
            output::write_json(&out.join("invariance.json"), &doc)?;
            Ok(verdict(holds, format!("invariant: {holds}"), doc))
        }
        Command::Did => {
            let h = built.nominal.hamiltonian(run.u);
            let d = construct_did(&h, &built.nominal.jump_operators(), built.nominal.split(), run.rank_tol)?;
            let doc = json!({
                "gas": d.gas,
                "basin_dims": d.basin_dims,
                "failure_stage": d.failure_stage,
                "invariant_dim": d.invariant_dim,
                "stage_cases": d.stage_cases.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
                "basis_change": config::matrix_config(d.basis_change.matrix()),
            });
            output::write_json(&out.join("did.json"), &doc)?;
            let msg = match d.failure_stage {
                Some(j) => format!(
                    "not GAS: invariant remainder of dimension {} at stage {j}",
                    d.invariant_dim
                ),
                None => format!("GAS with basins {:?}", d.basin_dims),
            };
            Ok(verdict(d.gas, msg, doc))
        }
        Command::GenericityScan => {
            let scan = cfg
                .scan
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("genericity-scan needs a [scan] section".into()))?;
            let pert = pert_or_zero(&built);
            let h = built.nominal.hamiltonian(run.u);
            let ls = built.nominal.jump_operators();
            let family = |x: &[f64]| -> Result<(QOperator, Vec<QOperator>)> {
                let hbar = h.add(&pert.htilde.scale(x[0]))?;
                let mut ops = ls
                    .iter()
                    .zip(&pert.ltilde)
                    .map(|(l, lt)| l.add(&lt.scale(x[1])))
                    .collect::<Result<Vec<_>>>()?;
                ops.extend(pert.c.iter().map(|c| c.scale(x[2].sqrt())));
                Ok((hbar, ops))
            };
            let sampler = ParamBox::new(scan.lo.to_vec(), scan.hi.to_vec())?;
            let r = genericity_scan(
                family,
                built.nominal.split(),
                &sampler,
                scan.n_samples,
                run.master_seed,
                run.rank_tol,
            )?;
            output::write_json(&out.join("scan.json"), &r)?;
            let holds = r.fraction >= scan.threshold;
            Ok(verdict(
                holds,
                format!("GAS fraction {} over {} samples", r.fraction, r.n_samples),
                json!(r),
            ))
        }
        Command::Certify => {
            let pert = pert_or_zero(&built);
            match certificate_report(&built.nominal, &pert, &built.initial, run.epsilon) {
                Ok(r) => {
                    let holds = r.margin.is_none_or(|m| m.preserved);
                    let doc = json!({
                        "stable": true,
                        "lambda": r.lambda,
                        "lambda_bar": r.lambda_bar,
                        "c": r.certificate.c,
                        "epsilon": r.certificate.epsilon,
                        "k_r": config::matrix_config(r.certificate.k_r.matrix()),
                        "k_spectrum": r.k_spectrum,
                        "margin": r.margin,
                        "envelope": r.envelope,
                        "stationary_bound": r.envelope.stationary_bound(),
                    });
                    output::write_json(&out.join("certificate.json"), &doc)?;
                    Ok(verdict(
                        holds,
                        format!("lambda {}, margin preserved: {holds}", r.lambda),
                        doc,
                    ))
                }
                Err(Error::NotStable { lambda, epsilon }) => {
                    let doc = json!({ "stable": false, "lambda": lambda, "epsilon": epsilon });
                    output::write_json(&out.join("certificate.json"), &doc)?;
                    Ok(verdict(
                        false,
                        format!("not exponentially stable: lambda {lambda}"),
                        doc,
                    ))
                }
                Err(e) => Err(e),
            }
        }
        Command::FeedbackConstants => {
            let (spec, _) = coupled(&built)?;
            let fc = feedback_constants(&spec.nd, &spec.fp)?;
            let flat = |r: Result<Vec<bool>>| r.map(|v| json!(v)).unwrap_or_else(|e| json!(e.to_string()));
            let all = |r: &Result<Vec<bool>>| matches!(r, Ok(v) if v.iter().all(|b| *b));
            let (c1, c2, c2p) = (check_c1(&fc), check_c2(&fc), check_c2_prime(&fc));
            let h1 = check_h1(&spec.law);
            let h2 = check_h2(&spec.nd, run.rank_tol)?;
            let a1 = check_a1(&spec.nd);
            let (a2, a2_l) = check_a2(&spec.nd, spec.nd.dim(), run.rank_tol)?;
            let holds = h1 && h2 && a1.iter().all(|b| *b) && a2 && all(&c1) && all(&c2);
            let rate = fc.rate().ok();
            let doc = json!({
                "constants": fc,
                "rate": rate,
                "h1": h1,
                "h2": h2,
                "a1": a1,
                "a2": a2,
                "a2_minimal_l": a2_l,
                "c1": flat(c1),
                "c2": flat(c2),
                "c2_prime": flat(c2p),
            });
            output::write_json(&out.join("feedback.json"), &doc)?;
            Ok(verdict(holds, format!("assumptions hold: {holds}, rate {rate:?}"), doc))
        }
        Command::Simulate => {
            let opts = cfg.sim_options();
            let rec = match &built.pert {
                Some(p) => simulate_perturbed(
                    &PerturbedModel::new(built.nominal.clone(), p.clone())?,
                    &built.initial,
                    &opts,
                )?,
                None => simulate_nominal(&built.nominal, None, &built.initial, &opts)?,
            };
            let (h, rows) = output::trajectory_rows(&rec, None, built.nominal.n_channels());
            output::write_csv(&out.join("trajectory.csv"), &h, &rows)?;
            let d0 = rec.d0_series.last().copied().unwrap_or(f64::NAN);
            Ok(Verdict {
                holds: !rec.flagged,
                repair_count: rec.repair_count,
                message: format!("final d0 {d0}, repairs {}", rec.repair_count),
                report: json!({ "final_d0": d0, "repair_count": rec.repair_count, "flagged": rec.flagged }),
            })
        }
        Command::FeedbackSim => {
            let (spec, sh0) = coupled(&built)?;
            let rec = simulate_coupled(spec, &built.initial, sh0, &cfg.sim_options())?;
            let (h, rows) = output::coupled_rows(&rec, spec.nd.n_channels());
            output::write_csv(&out.join("trajectory.csv"), &h, &rows)?;
            let d0 = rec.truth.d0_series.last().copied().unwrap_or(f64::NAN);
            let d0_filter = rec.filter.d0_series.last().copied().unwrap_or(f64::NAN);
            Ok(Verdict {
                holds: !rec.truth.flagged,
                repair_count: rec.truth.repair_count,
                message: format!("final d0 true {d0} filter {d0_filter}"),
                report: json!({
                    "final_d0_true": d0,
                    "final_d0_filter": d0_filter,
                    "repair_count": rec.truth.repair_count,
                    "flagged": rec.truth.flagged,
                }),
            })
        }
        Command::VerifyBounds => verify_bounds(cfg, &built, out),
        Command::RecurrenceSmoke => {
            let (spec, sh0) = coupled(&built)?;
            let zeta = run.zeta.unwrap_or(0.1);
            let target = run.recurrence_target.unwrap_or(0.95);
            let r = recurrence_smoke(spec, &built.initial, sh0, zeta, &cfg.ensemble())?;
            output::write_json(&out.join("recurrence.json"), &r)?;
            let doc = json!({ "zeta": r.zeta, "t_max": r.t_max, "fraction": r.fraction, "target": target });
            Ok(verdict(
                r.fraction >= target,
                format!("hitting fraction {} (target {target})", r.fraction),
                doc,
            ))
        }
    }
}

fn verify_bounds(cfg: &ScenarioConfig, built: &Built, out: &Path) -> Result<Verdict> {
    let run = &cfg.run;
    let ens = cfg.ensemble();
    let bounds: Vec<String> = if run.bounds.is_empty() {
        vec![if built.coupled.is_some() {
            "lyap_exponent"
        } else {
            "iss"
        }
        .to_string()]
    } else {
        run.bounds.clone()
    };
    let mut reports: Vec<BoundReport> = Vec::new();
    let mut repairs = 0;
    for b in &bounds {
        match b.as_str() {
            "iss" => {
                let pert = pert_or_zero(built);
                let scenario = Scenario::Perturbed {
                    model: PerturbedModel::new(built.nominal.clone(), pert.clone())?,
                    rho0: built.initial.clone(),
                };
                let stats = ensemble_run(&scenario, &ens)?;
                repairs += stats.repair_count;
                let cert = synthesize_certificate(&nominal_reduced_generator(&built.nominal, 0.0)?, run.epsilon)?;
                reports.extend(verify_iss(
                    &stats,
                    &cert,
                    &built.nominal,
                    &pert,
                    &built.initial,
                    &run.deltas,
                    &run.slack,
                )?);
            }
            "lyap_exponent" => {
                let (spec, sh0) = coupled(built)?;
                let scenario = Scenario::Coupled {
                    spec: spec.clone(),
                    sigma0: built.initial.clone(),
                    sigmahat0: sh0.clone(),
                };
                let stats = ensemble_run(&scenario, &ens)?;
                repairs += stats.repair_count;
                let t = run.t_final;
                let [lo, hi] = run.fit_window.unwrap_or([t / 3.0, t]);
                let fit = estimate_lyapunov_exponent(&stats.times, &stats.paths, (lo, hi))?;
                reports.push(verify_feedback_exponent(spec, &fit, &run.slack)?);
            }
            "finite_time" => {
                let (spec, sh0) = coupled(built)?;
                let r = verify_finite_time(
                    spec,
                    &built.initial,
                    sh0,
                    run.finite_time_delta.unwrap_or(0.5),
                    &ens,
                    &run.slack,
                )?;
                reports.push(r.report);
                reports.push(r.scaling);
            }
            "exit_time" => {
                let (spec, sh0) = coupled(built)?;
                let r = exit_time_experiment(
                    spec,
                    &built.initial,
                    sh0,
                    run.exit_level.unwrap_or(0.3),
                    &ens,
                    &run.slack,
                )?;
                reports.push(r.report);
            }
            other => {
                return Err(Error::ValidationError {
                    field: "bounds".into(),
                    constraint: format!(
                        "unknown bound {other:?}; expected iss, lyap_exponent, finite_time or exit_time"
                    ),
                })
            }
        }
    }
    let mut summary = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        let (h, rows) = output::bound_rows(r);
        output::write_csv(
            &out.join(format!("bound_{i:02}_{}.csv", r.bound_name.as_str())),
            &h,
            &rows,
        )?;
        summary.push(json!({
            "bound_name": r.bound_name,
            "satisfied": r.satisfied,
            "parameters": r.parameters,
            "slacks": r.slacks,
        }));
    }
    output::write_json(&out.join("summary.json"), &summary)?;
    let holds = reports.iter().all(|r| r.satisfied);
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.satisfied)
        .map(|r| r.bound_name.as_str())
        .collect();
    Ok(Verdict {
        holds,
        repair_count: repairs,
        message: if holds {
            format!("{} bound checks satisfied", reports.len())
        } else {
            format!("unsatisfied: {failing:?}")
        },
        report: json!(summary),
    })
}

fn load(cli: &Cli) -> Result<(ScenarioConfig, String)> {
    let text = match (&cli.manifest, &cli.config) {
        (Some(m), _) => {
            let raw = std::fs::read_to_string(m)?;
            let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| Error::ParseError {
                field: "manifest".into(),
                reason: e.to_string(),
            })?;
            if manifest.subcommand != cli.command.name() {
                return Err(Error::InvalidArgument(format!(
                    "manifest records subcommand {}, not {}",
                    manifest.subcommand,
                    cli.command.name()
                )));
            }
            if output::sha256_hex(manifest.config.as_bytes()) != manifest.config_hash {
                return Err(Error::InvalidArgument("manifest config does not match its hash".into()));
            }
            manifest.config
        }
        (None, Some(c)) => std::fs::read_to_string(c)?,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "either --config or --manifest is required".into(),
            ))
        }
    };
    let mut cfg = parse_scenario(&text)?;
    if let Some(seed) = cli.seed {
        cfg.run.master_seed = seed;
    }
    let rendered = render_scenario(&cfg)?;
    Ok((cfg, rendered))
}

fn execute(cli: &Cli) -> Result<Verdict> {
    let (cfg, rendered) = load(cli)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.outputs.as_ref().and_then(|o| o.dir.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let v = pool.install(|| dispatch(cli.command, &cfg, &out))?;
    let built = cfg.build()?;
    let model_hash = match &built.pert {
        Some(p) => crate::experiment::Scenario::Perturbed {
            model: PerturbedModel::new(built.nominal.clone(), p.clone())?,
            rho0: built.initial.clone(),
        }
        .fingerprint(),
        None => built.nominal.fingerprint(),
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: cli.command.name().to_string(),
        config_hash: output::sha256_hex(rendered.as_bytes()),
        model_hash,
        seed: cfg.run.master_seed,
        dt: cfg.run.dt,
        t_final: cfg.run.t_final,
        n_traj: cfg.run.n_traj,
        repair_count: v.repair_count,
        config: rendered,
    };
    output::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(v)
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(v) if cli.quiet => i32::from(!v.holds),
        Ok(v) => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}: {}", cli.command.name(), v.message);
            if let Ok(text) = serde_json::to_string_pretty(&v.report) {
                let _ = writeln!(stdout, "{text}");
            }
            if v.holds {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let origin = cli
                .manifest
                .as_ref()
                .or(cli.config.as_ref())
                .map_or_else(String::new, |p| format!("{}: ", p.display()));
            eprintln!("error: {origin}{e}");
            2
        }
    }
}
