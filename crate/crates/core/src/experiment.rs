//! Ensemble statistics and Monte Carlo verification of the stability bounds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::did::DEFAULT_RANK_TOL;
use crate::error::{Error, Result};
use crate::invariance::check_condition_ar_prime;
use crate::lyapunov::{
    check_c1, check_c2, check_c2_prime, feedback_constants, iss_envelope, Certificate, FeedbackConstants,
};
use crate::model::{hash_matrix, NominalModel, PerturbationSpec, PerturbedModel};
use crate::qcore::{d0_raw, outside_population_raw, CMatrix, DensityMatrix};
use crate::sde::integrate::{run_coupled, run_single, CoupledSpec, Propagator, RunStats, SimOptions, StepView};
use crate::sde::nondemolition::{check_a1, check_a2, check_h1, check_h2, FeedbackLaw};

/// Values of `d₀` at or below this are excluded from log-slope fits.
pub const LOG_FLOOR: f64 = 1e-12;

/// Minimum number of points in a per-trajectory slope fit.
pub const MIN_FIT_POINTS: usize = 10;

/// A simulated scenario: dynamics plus initial state(s).
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Nominal {
        model: NominalModel,
        law: Option<FeedbackLaw>,
        rho0: DensityMatrix,
    },
    Perturbed {
        model: PerturbedModel,
        rho0: DensityMatrix,
    },
    Coupled {
        spec: CoupledSpec,
        sigma0: DensityMatrix,
        sigmahat0: DensityMatrix,
    },
}

fn hash_f64s(h: &mut Sha256, xs: &[f64]) {
    h.update((xs.len() as u64).to_le_bytes());
    for x in xs {
        h.update(x.to_bits().to_le_bytes());
    }
}

fn hash_law(h: &mut Sha256, law: &FeedbackLaw) {
    hash_f64s(h, &[law.a, law.b, law.eps1, law.eps2]);
}

impl Scenario {
    /// Digest of the dynamics and initial states.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        match self {
            Scenario::Nominal { model, law, rho0 } => {
                h.update(b"nominal");
                h.update(model.fingerprint().as_bytes());
                if let Some(law) = law {
                    hash_law(&mut h, law);
                }
                hash_matrix(&mut h, rho0.matrix());
            }
            Scenario::Perturbed { model, rho0 } => {
                h.update(b"perturbed");
                h.update(model.nominal().fingerprint().as_bytes());
                h.update(model.pert().fingerprint().as_bytes());
                hash_matrix(&mut h, rho0.matrix());
            }
            Scenario::Coupled {
                spec,
                sigma0,
                sigmahat0,
            } => {
                h.update(b"coupled");
                h.update(coupled_fingerprint(spec).as_bytes());
                hash_matrix(&mut h, sigma0.matrix());
                hash_matrix(&mut h, sigmahat0.matrix());
            }
        }
        hex::encode(h.finalize())
    }

    fn dim_s(&self) -> usize {
        match self {
            Scenario::Nominal { model, .. } => model.split().dim_s(),
            Scenario::Perturbed { model, .. } => model.nominal().split().dim_s(),
            Scenario::Coupled { spec, .. } => spec.nd.projector_dims()[0],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Scenario::Nominal { model, rho0, .. } => crate::qcore::check_dim(model.dim(), rho0.dim()),
            Scenario::Perturbed { model, rho0 } => crate::qcore::check_dim(model.nominal().dim(), rho0.dim()),
            Scenario::Coupled {
                spec,
                sigma0,
                sigmahat0,
            } => {
                spec.check_states(sigma0, sigmahat0)?;
                spec.propagators().map(|_| ())
            }
        }
    }

    /// Runs one trajectory, handing every step to `observe`.
    pub fn run<F: FnMut(&StepView) -> bool>(&self, opts: &SimOptions, observe: F) -> Result<RunStats> {
        let mut source = opts.increments();
        match self {
            Scenario::Nominal { model, law, rho0 } => {
                let prop = Propagator::nominal(model);
                let law = law.as_ref().map(|l| (l, model.split().dim_s()));
                run_single(&prop, law, rho0.matrix(), opts, &mut source, observe)
            }
            Scenario::Perturbed { model, rho0 } => {
                let prop = Propagator::perturbed(model);
                run_single(&prop, None, rho0.matrix(), opts, &mut source, observe)
            }
            Scenario::Coupled {
                spec,
                sigma0,
                sigmahat0,
            } => {
                let (truth, filter) = spec.propagators()?;
                run_coupled(
                    &truth,
                    &filter,
                    &spec.law,
                    spec.nd.projector_dims()[0],
                    sigma0.matrix(),
                    sigmahat0.matrix(),
                    opts,
                    &mut source,
                    observe,
                )
            }
        }
    }
}

/// Digest of a feedback-loop scenario without initial states.
pub fn coupled_fingerprint(spec: &CoupledSpec) -> String {
    let mut h = Sha256::new();
    h.update(b"nd");
    for d in spec.nd.projector_dims() {
        h.update((*d as u64).to_le_bytes());
    }
    hash_matrix(&mut h, spec.nd.h0().matrix());
    hash_matrix(&mut h, spec.nd.h1().matrix());
    for k in 0..spec.nd.n_channels() {
        hash_matrix(&mut h, spec.nd.jump(k).matrix());
    }
    for p in &spec.fp.channels {
        hash_f64s(&mut h, &[p.eta, p.theta, p.etahat, p.thetahat]);
    }
    h.update(spec.pert.fingerprint().as_bytes());
    hash_law(&mut h, &spec.law);
    hex::encode(h.finalize())
}

/// Ensemble size, sampling grid, and the run options shared by every
/// trajectory (`opts.seed` is the master seed; trajectory `i` uses stream `i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub opts: SimOptions,
    pub n_traj: usize,
    /// Grid spacing in steps.
    pub grid_stride: usize,
    pub quantile_levels: Vec<f64>,
}

impl EnsembleConfig {
    pub fn new(opts: SimOptions, n_traj: usize, grid_stride: usize) -> Self {
        Self {
            opts,
            n_traj,
            grid_stride,
            quantile_levels: vec![0.1, 0.5, 0.9],
        }
    }

    fn validate(&self) -> Result<()> {
        self.opts.validate()?;
        if self.n_traj < 2 {
            return Err(Error::InvalidArgument(
                "an ensemble needs at least 2 trajectories".into(),
            ));
        }
        if self.grid_stride == 0 {
            return Err(Error::InvalidArgument("grid_stride must be at least 1".into()));
        }
        if self.quantile_levels.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::InvalidArgument("quantile levels must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn traj_opts(&self, i: usize) -> SimOptions {
        self.opts.with_trajectory(i as u64).with_thin(usize::MAX)
    }

    pub fn grid_times(&self) -> Vec<f64> {
        let n = self.opts.n_steps();
        (0..=n)
            .step_by(self.grid_stride)
            .map(|s| s as f64 * self.opts.dt)
            .collect()
    }
}

/// Runs `f` on every trajectory index in parallel and returns the results
/// in index order; the first failure (lowest index) is reported.
fn par_trajectories<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = (0..n).into_par_iter().map(&f).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::Trajectory {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
struct GridSample {
    d0: Vec<f64>,
    outside: Vec<f64>,
    d0_filter: Vec<f64>,
    repairs: usize,
    flagged: bool,
}

fn sample_grid(scenario: &Scenario, cfg: &EnsembleConfig, i: usize) -> Result<GridSample> {
    let ds = scenario.dim_s();
    let stride = cfg.grid_stride;
    let mut s = GridSample {
        d0: Vec::new(),
        outside: Vec::new(),
        d0_filter: Vec::new(),
        repairs: 0,
        flagged: false,
    };
    let stats = scenario.run(&cfg.traj_opts(i), |v| {
        if v.step % stride == 0 {
            s.d0.push(d0_raw(v.state, ds));
            s.outside.push(outside_population_raw(v.state, ds));
            if let Some(f) = v.filter {
                s.d0_filter.push(d0_raw(f, ds));
            }
        }
        true
    })?;
    s.repairs = stats.repair_count;
    s.flagged = stats.repair_count as f64 > crate::sde::integrate::REPAIR_FLAG_FRACTION * stats.steps.max(1) as f64;
    Ok(s)
}

/// Aggregated statistics of `d₀` along an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub mean_d0: Vec<f64>,
    pub stderr_d0: Vec<f64>,
    pub mean_d0_squared: Vec<f64>,
    pub stderr_d0_squared: Vec<f64>,
    /// Mean of `Tr(Π_R ρ_t)`.
    pub mean_outside: Vec<f64>,
    pub stderr_outside: Vec<f64>,
    /// Mean filter `d₀` (coupled scenarios only).
    pub mean_d0_filter: Vec<f64>,
    pub quantile_levels: Vec<f64>,
    /// `quantiles[q][t]`.
    pub quantiles: Vec<Vec<f64>>,
    pub n_traj: usize,
    pub fingerprint: String,
    pub repair_count: usize,
    pub flagged_trajectories: usize,
    /// Per-trajectory `d₀` paths on the grid.
    #[serde(skip)]
    pub paths: Vec<Vec<f64>>,
}

/// Mean and standard error of each column of `rows`.
fn column_moments(rows: &[&[f64]], n_cols: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; n_cols];
    let mut se = vec![0.0; n_cols];
    for j in 0..n_cols {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        mean[j] = m;
        se[j] = (var / n).sqrt();
    }
    (mean, se)
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn ensemble_run(scenario: &Scenario, cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    cfg.validate()?;
    scenario.validate()?;
    let samples = par_trajectories(cfg.n_traj, |i| sample_grid(scenario, cfg, i))?;
    let times = cfg.grid_times();
    let m = times.len();
    let d0: Vec<&[f64]> = samples.iter().map(|s| &s.d0[..m]).collect();
    let sq: Vec<Vec<f64>> = d0.iter().map(|r| r.iter().map(|x| x * x).collect()).collect();
    let sq_refs: Vec<&[f64]> = sq.iter().map(|r| r.as_slice()).collect();
    let outside: Vec<&[f64]> = samples.iter().map(|s| &s.outside[..m]).collect();
    let (mean_d0, stderr_d0) = column_moments(&d0, m);
    let (mean_d0_squared, stderr_d0_squared) = column_moments(&sq_refs, m);
    let (mean_outside, stderr_outside) = column_moments(&outside, m);
    let mean_d0_filter = if samples[0].d0_filter.is_empty() {
        Vec::new()
    } else {
        let f: Vec<&[f64]> = samples.iter().map(|s| &s.d0_filter[..m]).collect();
        column_moments(&f, m).0
    };
    let mut quantiles = vec![vec![0.0; m]; cfg.quantile_levels.len()];
    let mut col = vec![0.0; samples.len()];
    for j in 0..m {
        for (c, r) in col.iter_mut().zip(&d0) {
            *c = r[j];
        }
        col.sort_by(f64::total_cmp);
        for (qi, &q) in cfg.quantile_levels.iter().enumerate() {
            quantiles[qi][j] = quantile_sorted(&col, q);
        }
    }
    Ok(EnsembleStats {
        times,
        mean_d0,
        stderr_d0,
        mean_d0_squared,
        stderr_d0_squared,
        mean_outside,
        stderr_outside,
        mean_d0_filter,
        quantile_levels: cfg.quantile_levels.clone(),
        quantiles,
        n_traj: cfg.n_traj,
        fingerprint: scenario.fingerprint(),
        repair_count: samples.iter().map(|s| s.repairs).sum(),
        flagged_trajectories: samples.iter().filter(|s| s.flagged).count(),
        paths: samples.into_iter().map(|s| s.d0).collect(),
    })
}

/// Statistical slack applied by the verifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackRules {
    /// Multiple of the standard error added to mean bounds.
    pub stderr_mult: f64,
    /// Multiple of the binomial standard deviation allowed on frequencies.
    pub binomial_sigma: f64,
    /// Relative slack on the fitted decay rate.
    pub slope_slack: f64,
}

impl Default for SlackRules {
    fn default() -> Self {
        Self {
            stderr_mult: 3.0,
            binomial_sigma: 3.0,
            slope_slack: 0.2,
        }
    }
}

impl SlackRules {
    fn as_map(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("binomial_sigma".to_string(), self.binomial_sigma),
            ("slope_slack".to_string(), self.slope_slack),
            ("stderr_mult".to_string(), self.stderr_mult),
        ])
    }

    fn binomial(&self, p: f64, n: usize) -> f64 {
        self.binomial_sigma * (p * (1.0 - p) / n as f64).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundName {
    IssMean,
    IssProb,
    LyapExponent,
    FiniteTime,
    ExitTime,
}

impl BoundName {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundName::IssMean => "iss_mean",
            BoundName::IssProb => "iss_prob",
            BoundName::LyapExponent => "lyap_exponent",
            BoundName::FiniteTime => "finite_time",
            BoundName::ExitTime => "exit_time",
        }
    }
}

/// One comparison: `empirical` against `bound`, with the slack already
/// folded into `margin = bound ± slack − empirical` (positive is good).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub t: f64,
    pub empirical: f64,
    pub bound: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: BoundName,
    pub satisfied: bool,
    pub parameters: BTreeMap<String, f64>,
    pub slacks: BTreeMap<String, f64>,
    pub series: Vec<BoundPoint>,
    /// Points with negative margin.
    pub violations: Vec<BoundPoint>,
}

impl BoundReport {
    fn new(
        bound_name: BoundName,
        slack: &SlackRules,
        parameters: BTreeMap<String, f64>,
        series: Vec<BoundPoint>,
    ) -> Self {
        let violations: Vec<BoundPoint> = series.iter().filter(|p| !(p.margin >= 0.0)).copied().collect();
        Self {
            bound_name,
            satisfied: violations.is_empty(),
            parameters,
            slacks: slack.as_map(),
            series,
            violations,
        }
    }
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Checks the mean and probability clauses of the noise-to-state bound.
///
/// Returns the mean report followed by one probability report per `δ`.
pub fn verify_iss(
    stats: &EnsembleStats,
    cert: &Certificate,
    nominal: &NominalModel,
    pert: &PerturbationSpec,
    sigma0: &DensityMatrix,
    deltas: &[f64],
    slack: &SlackRules,
) -> Result<Vec<BoundReport>> {
    let expected = Scenario::Perturbed {
        model: PerturbedModel::new(nominal.clone(), pert.clone())?,
        rho0: sigma0.clone(),
    }
    .fingerprint();
    if expected != stats.fingerprint {
        return Err(Error::ScenarioMismatch(
            "ensemble was not produced from this model and initial state".into(),
        ));
    }
    if stats.paths.len() != stats.n_traj {
        return Err(Error::InvalidArgument(
            "ensemble statistics carry no per-trajectory paths".into(),
        ));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d >= 1.0)) {
        return Err(Error::InvalidArgument(format!("delta must be at least 1, got {d}")));
    }
    let env = iss_envelope(cert, nominal, pert, sigma0)?;
    let base = [
        ("c", env.c),
        ("d_const", env.d_const),
        ("k_min_eig", env.k_min_eig),
        ("alpha", pert.alpha),
        ("beta", pert.beta),
        ("gamma", pert.gamma),
        ("n_traj", stats.n_traj as f64),
    ];
    let mean_series = stats
        .times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let bound = env.mean_bound(t);
            BoundPoint {
                t,
                empirical: stats.mean_d0[j],
                bound,
                margin: bound + slack.stderr_mult * stats.stderr_d0[j] - stats.mean_d0[j],
            }
        })
        .collect();
    let mut out = vec![BoundReport::new(BoundName::IssMean, slack, params(&base), mean_series)];
    let n = stats.n_traj;
    for &delta in deltas {
        let q = env.prob_bound(delta);
        let tol = slack.binomial(q, n);
        let series = stats
            .times
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let level = delta * env.mean_bound(t);
                let inside = stats.paths.iter().filter(|p| p[j] <= level).count();
                let frac = inside as f64 / n as f64;
                BoundPoint {
                    t,
                    empirical: frac,
                    bound: q,
                    margin: frac - (q - tol),
                }
            })
            .collect();
        let mut p = params(&base);
        p.insert("delta".into(), delta);
        out.push(BoundReport::new(BoundName::IssProb, slack, p, series));
    }
    Ok(out)
}

/// Mean per-trajectory slope of `log d₀` and its 95% interval half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovFit {
    pub slope: f64,
    pub ci: f64,
    pub window: (f64, f64),
    pub per_trajectory: Vec<f64>,
}

/// Least-squares slope of `log d₀` against `t` on each path, restricted to
/// `window` and cut at the first value below [`LOG_FLOOR`].
pub fn estimate_lyapunov_exponent(times: &[f64], paths: &[Vec<f64>], window: (f64, f64)) -> Result<LyapunovFit> {
    if paths.is_empty() {
        return Err(Error::WindowDegenerate { usable: 0 });
    }
    let mut slopes = Vec::with_capacity(paths.len());
    for path in paths {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (&t, &d) in times.iter().zip(path) {
            if t < window.0 || t > window.1 {
                continue;
            }
            if !(d > LOG_FLOOR) {
                break;
            }
            xs.push(t);
            ys.push(d.ln());
        }
        if xs.len() < MIN_FIT_POINTS {
            return Err(Error::WindowDegenerate { usable: xs.len() });
        }
        slopes.push(ls_slope(&xs, &ys));
    }
    let n = slopes.len() as f64;
    let slope = slopes.iter().sum::<f64>() / n;
    let ci = if slopes.len() < 2 {
        0.0
    } else {
        let var = slopes.iter().map(|s| (s - slope).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    };
    Ok(LyapunovFit {
        slope,
        ci,
        window,
        per_trajectory: slopes,
    })
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Standing assumptions of the feedback results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    EtaBelowOne,
    H1,
    H2,
    A1,
    A2,
    C1,
    C2,
    C2Prime,
    ArPrime,
}

/// Checks `required` in order and returns the feedback constants, or
/// `HypothesisUnmet` naming the first failing assumption.
pub fn check_hypotheses(spec: &CoupledSpec, required: &[Hypothesis]) -> Result<FeedbackConstants> {
    let unmet = |name: &str, detail: String| Error::HypothesisUnmet(format!("{name}: {detail}"));
    let fc = feedback_constants(&spec.nd, &spec.fp)?;
    let all = |v: Result<Vec<bool>>, name: &str| -> Result<()> {
        match v {
            Ok(v) if v.iter().all(|b| *b) => Ok(()),
            Ok(v) => Err(unmet(name, format!("per-channel verdicts {v:?}"))),
            Err(e) => Err(unmet(name, e.to_string())),
        }
    };
    for h in required {
        match h {
            Hypothesis::EtaBelowOne => {
                if let Some(k) = spec.fp.channels.iter().position(|p| !(p.eta < 1.0)) {
                    return Err(unmet("eta < 1", format!("channel {k}")));
                }
            }
            Hypothesis::H1 => {
                if !check_h1(&spec.law) {
                    return Err(unmet("H1", "feedback law parameters out of order".into()));
                }
            }
            Hypothesis::H2 => {
                if !check_h2(&spec.nd, DEFAULT_RANK_TOL).map_err(|e| unmet("H2", e.to_string()))? {
                    return Err(unmet("H2", "a control block is rank deficient".into()));
                }
            }
            Hypothesis::A1 => all(Ok(check_a1(&spec.nd)), "A1")?,
            Hypothesis::A2 => {
                let (holds, _) =
                    check_a2(&spec.nd, spec.nd.dim(), DEFAULT_RANK_TOL).map_err(|e| unmet("A2", e.to_string()))?;
                if !holds {
                    return Err(unmet("A2", "controllability rank not reached".into()));
                }
            }
            Hypothesis::C1 => all(check_c1(&fc), "C1")?,
            Hypothesis::C2 => all(check_c2(&fc), "C2")?,
            Hypothesis::C2Prime => all(check_c2_prime(&fc), "C2'")?,
            Hypothesis::ArPrime => {
                let r = check_condition_ar_prime(&spec.pert, &spec.nd.split());
                if !r.holds {
                    return Err(unmet("AR'", format!("failing clauses {:?}", r.failing())));
                }
            }
        }
    }
    Ok(fc)
}

const EXPONENT_HYPOTHESES: [Hypothesis; 9] = [
    Hypothesis::EtaBelowOne,
    Hypothesis::H1,
    Hypothesis::H2,
    Hypothesis::A1,
    Hypothesis::A2,
    Hypothesis::C1,
    Hypothesis::C2,
    Hypothesis::ArPrime,
    Hypothesis::C2Prime,
];

/// Compares a fitted slope against `−(𝖢 + 𝖪)(1 − slope_slack)`.
pub fn verify_feedback_exponent(spec: &CoupledSpec, fit: &LyapunovFit, slack: &SlackRules) -> Result<BoundReport> {
    let fc = check_hypotheses(spec, &EXPONENT_HYPOTHESES[..8])?;
    let rate = fc.rate()?;
    if !(rate > 0.0) {
        return Err(Error::HypothesisUnmet(format!("C2: decay rate {rate} is not positive")));
    }
    let bound = -rate * (1.0 - slack.slope_slack);
    let p = params(&[
        ("c_thm", fc.c_thm.unwrap_or(f64::NAN)),
        ("k_thm", fc.k_thm.unwrap_or(f64::NAN)),
        ("rate", rate),
        ("slope", fit.slope),
        ("ci", fit.ci),
        ("window_lo", fit.window.0),
        ("window_hi", fit.window.1),
        ("n_traj", fit.per_trajectory.len() as f64),
    ]);
    let point = BoundPoint {
        t: fit.window.1,
        empirical: fit.slope,
        bound,
        margin: bound - fit.slope,
    };
    Ok(BoundReport::new(BoundName::LyapExponent, slack, p, vec![point]))
}

fn with_intensities(spec: &CoupledSpec, alpha: f64, gamma: f64) -> Result<CoupledSpec> {
    let mut s = spec.clone();
    s.pert = spec.pert.with_intensities(alpha, 0.0, gamma)?;
    Ok(s)
}

/// First time the pair leaves `B_l × B_l` (`None` if it stays until the end).
fn exit_times(
    spec: &CoupledSpec,
    sigma0: &DensityMatrix,
    sigmahat0: &DensityMatrix,
    l: f64,
    cfg: &EnsembleConfig,
) -> Result<Vec<Option<f64>>> {
    let scenario = Scenario::Coupled {
        spec: spec.clone(),
        sigma0: sigma0.clone(),
        sigmahat0: sigmahat0.clone(),
    };
    scenario.validate()?;
    let ds = scenario.dim_s();
    par_trajectories(cfg.n_traj, |i| {
        let mut hit = None;
        scenario.run(&cfg.traj_opts(i), |v| {
            let f = v.filter.expect("coupled run");
            if d0_raw(v.state, ds) >= l || d0_raw(f, ds) >= l {
                hit = Some(v.t);
                return false;
            }
            true
        })?;
        Ok(hit)
    })
}

fn exit_frequency(times: &[Option<f64>]) -> f64 {
    times.iter().filter(|t| t.is_some()).count() as f64 / times.len() as f64
}

/// Exit statistics from `B_l × B_l` for one perturbation level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitReport {
    pub report: BoundReport,
    pub exit_probability: f64,
    pub calibration_probability: f64,
    /// `E[τ_l ∧ T_max]`; truncated at the run horizon.
    pub truncated_mean_exit_time: f64,
}

fn check_start(sigma0: &DensityMatrix, sigmahat0: &DensityMatrix, l: f64, ds: usize) -> Result<()> {
    if d0_raw(sigma0.matrix(), ds) >= l || d0_raw(sigmahat0.matrix(), ds) >= l {
        return Err(Error::InvalidArgument(
            "initial pair must start inside the exit neighborhood".into(),
        ));
    }
    Ok(())
}

/// Compares the exit frequency from `B_l × B_l` by `T_max` with the
/// calibration frequency at zero intensity plus `2(|α| + γ)E[τ_l ∧ T_max]/l`.
pub fn exit_time_experiment(
    spec: &CoupledSpec,
    sigma0: &DensityMatrix,
    sigmahat0: &DensityMatrix,
    l: f64,
    cfg: &EnsembleConfig,
    slack: &SlackRules,
) -> Result<ExitReport> {
    cfg.validate()?;
    check_hypotheses(spec, &[Hypothesis::C2Prime])?;
    check_start(sigma0, sigmahat0, l, spec.nd.projector_dims()[0])?;
    let t_max = cfg.opts.n_steps() as f64 * cfg.opts.dt;
    let taus = exit_times(spec, sigma0, sigmahat0, l, cfg)?;
    let cal = exit_times(&with_intensities(spec, 0.0, 0.0)?, sigma0, sigmahat0, l, cfg)?;
    let p = exit_frequency(&taus);
    let p_cal = exit_frequency(&cal);
    let mean_tau = taus.iter().map(|t| t.unwrap_or(t_max)).sum::<f64>() / taus.len() as f64;
    let intensity = spec.pert.alpha.abs() + spec.pert.gamma;
    let bound = p_cal + 2.0 * intensity * mean_tau / l;
    let tol = slack.binomial(p, cfg.n_traj);
    let point = BoundPoint {
        t: t_max,
        empirical: p,
        bound,
        margin: bound + tol - p,
    };
    let report = BoundReport::new(
        BoundName::ExitTime,
        slack,
        params(&[
            ("l", l),
            ("alpha", spec.pert.alpha),
            ("gamma", spec.pert.gamma),
            ("t_max", t_max),
            ("n_traj", cfg.n_traj as f64),
            ("exit_probability", p),
            ("calibration_probability", p_cal),
            ("truncated_mean_exit_time", mean_tau),
        ]),
        vec![point],
    );
    Ok(ExitReport {
        report,
        exit_probability: p,
        calibration_probability: p_cal,
        truncated_mean_exit_time: mean_tau,
    })
}

/// Exit frequencies down a ladder of dissipative intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub gammas: Vec<f64>,
    pub exit_frequencies: Vec<f64>,
    pub calibration_probability: f64,
    /// Each step down the ladder compared with the previous rung
    /// (`t` holds the rung's `γ`); a `γ = 0` rung at `α = 0` must also
    /// reproduce the calibration frequency exactly.
    pub report: BoundReport,
}

/// Restoration check: exit frequencies are non-increasing as `γ` steps
/// down `gammas` (given in decreasing order), within binomial slack.
pub fn restoration_ladder(
    spec: &CoupledSpec,
    sigma0: &DensityMatrix,
    sigmahat0: &DensityMatrix,
    l: f64,
    gammas: &[f64],
    cfg: &EnsembleConfig,
    slack: &SlackRules,
) -> Result<LadderReport> {
    cfg.validate()?;
    if gammas.is_empty() || gammas.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::InvalidArgument(
            "gamma ladder must be strictly decreasing".into(),
        ));
    }
    check_start(sigma0, sigmahat0, l, spec.nd.projector_dims()[0])?;
    let alpha = spec.pert.alpha;
    let mut freqs = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let s = with_intensities(spec, alpha, g)?;
        check_hypotheses(&s, &[Hypothesis::C2Prime])?;
        freqs.push(exit_frequency(&exit_times(&s, sigma0, sigmahat0, l, cfg)?));
    }
    let p_cal = exit_frequency(&exit_times(
        &with_intensities(spec, 0.0, 0.0)?,
        sigma0,
        sigmahat0,
        l,
        cfg,
    )?);
    let n = cfg.n_traj as f64;
    let mut series = Vec::new();
    for i in 1..gammas.len() {
        let (hi, lo) = (freqs[i - 1], freqs[i]);
        let sd = ((hi * (1.0 - hi) + lo * (1.0 - lo)) / n).sqrt();
        series.push(BoundPoint {
            t: gammas[i],
            empirical: lo,
            bound: hi,
            margin: hi + slack.binomial_sigma * sd - lo,
        });
    }
    if let Some(i) = gammas.iter().position(|g| *g == 0.0) {
        if alpha == 0.0 {
            series.push(BoundPoint {
                t: 0.0,
                empirical: freqs[i],
                bound: p_cal,
                margin: if freqs[i] == p_cal {
                    0.0
                } else {
                    -(freqs[i] - p_cal).abs()
                },
            });
        }
    }
    let report = BoundReport::new(
        BoundName::ExitTime,
        slack,
        params(&[
            ("l", l),
            ("alpha", alpha),
            ("calibration_probability", p_cal),
            ("n_traj", n),
        ]),
        series,
    );
    Ok(LadderReport {
        gammas: gammas.to_vec(),
        exit_frequencies: freqs,
        calibration_probability: p_cal,
        report,
    })
}

/// Hitting times of `B_ζ × B_ζ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceReport {
    pub zeta: f64,
    pub t_max: f64,
    pub hitting_times: Vec<Option<f64>>,
    pub fraction: f64,
}

impl RecurrenceReport {
    /// Fraction of trajectories that hit by time `t`.
    pub fn fraction_by(&self, t: f64) -> f64 {
        let hits = self.hitting_times.iter().filter(|h| h.is_some_and(|h| h <= t)).count();
        hits as f64 / self.hitting_times.len() as f64
    }
}

/// Fraction of trajectories whose pair enters `B_ζ × B_ζ` before `T_max`.
pub fn recurrence_smoke(
    spec: &CoupledSpec,
    sigma0: &DensityMatrix,
    sigmahat0: &DensityMatrix,
    zeta: f64,
    cfg: &EnsembleConfig,
) -> Result<RecurrenceReport> {
    cfg.validate()?;
    check_hypotheses(
        spec,
        &[
            Hypothesis::ArPrime,
            Hypothesis::A1,
            Hypothesis::A2,
            Hypothesis::H1,
            Hypothesis::H2,
            Hypothesis::C1,
        ],
    )?;
    let scenario = Scenario::Coupled {
        spec: spec.clone(),
        sigma0: sigma0.clone(),
        sigmahat0: sigmahat0.clone(),
    };
    scenario.validate()?;
    let ds = scenario.dim_s();
    let hitting_times = par_trajectories(cfg.n_traj, |i| {
        let mut hit = None;
        scenario.run(&cfg.traj_opts(i), |v| {
            let f = v.filter.expect("coupled run");
            if d0_raw(v.state, ds) < zeta && d0_raw(f, ds) < zeta {
                hit = Some(v.t);
                return false;
            }
            true
        })?;
        Ok(hit)
    })?;
    let fraction = hitting_times.iter().filter(|h| h.is_some()).count() as f64 / hitting_times.len() as f64;
    Ok(RecurrenceReport {
        zeta,
        t_max: cfg.opts.n_steps() as f64 * cfg.opts.dt,
        hitting_times,
        fraction,
    })
}

/// Fitted constants and verdicts of the finite-time error check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteTimeReport {
    /// Coupling envelope `(|α| + γ)A(e^{Bt} − 1)`.
    pub a: f64,
    pub b: f64,
    /// Constant calibrated on the half-intensity run.
    pub c: f64,
    pub horizon: f64,
    pub horizon_half: f64,
    pub times: Vec<f64>,
    /// `√E‖ρ_t − σ_t‖²` at full and half intensity.
    pub coupling_full: Vec<f64>,
    pub coupling_half: Vec<f64>,
    /// The displayed inequality on `E[d₀(σ_t)²]`.
    pub report: BoundReport,
    /// Halving the intensity shrinks the coupling by at least `2^δ/2`.
    pub scaling: BoundReport,
}

struct CouplingSample {
    d0_sq: [Vec<f64>; 2],
    delta_sq: [Vec<f64>; 2],
}

fn grid_states(scenario: &Scenario, cfg: &EnsembleConfig, i: usize) -> Result<Vec<CMatrix>> {
    let stride = cfg.grid_stride;
    let mut out = Vec::new();
    scenario.run(&cfg.traj_opts(i), |v| {
        if v.step % stride == 0 {
            out.push(v.state.clone());
        }
        true
    })?;
    Ok(out)
}

/// Least-squares fit of `log y = log A + log(e^{Bt} − 1)` with `A` in
/// closed form and `B` by golden-section search on `log B`.
fn fit_growth(ts: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(ys)
        .filter(|(t, y)| **t > 0.0 && **y > 0.0)
        .map(|(t, y)| (*t, y.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::WindowDegenerate { usable: pts.len() });
    }
    let log_a = |b: f64| pts.iter().map(|(t, ly)| ly - (b * t).exp_m1().ln()).sum::<f64>() / pts.len() as f64;
    let cost = |lb: f64| {
        let b = lb.exp();
        let la = log_a(b);
        pts.iter()
            .map(|(t, ly)| (ly - la - (b * t).exp_m1().ln()).powi(2))
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (-8.0f64, 4.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let x1 = hi - g * (hi - lo);
        let x2 = lo + g * (hi - lo);
        if cost(x1) < cost(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let b = (0.5 * (lo + hi)).exp();
    Ok((log_a(b).exp(), b))
}

/// `(1/B) log(1 + 1/(A s^{1−δ}))`, infinite at zero intensity.
pub fn finite_time_horizon(a: f64, b: f64, intensity: f64, delta: f64) -> f64 {
    if intensity == 0.0 || a == 0.0 || b == 0.0 {
        return f64::INFINITY;
    }
    (1.0 / (a * intensity.powf(1.0 - delta))).ln_1p() / b
}

/// Power-rate finite-time bound: couples nominal, full-intensity, and
/// half-intensity runs on shared noise, fits the coupling envelope, and
/// checks `E[d₀(σ_t)²] ≤ c((|α|+γ)^δ + R e^{−(𝖢+𝖪)t})` up to the horizon.
pub fn verify_finite_time(
    spec: &CoupledSpec,
    sigma0: &DensityMatrix,
    sigmahat0: &DensityMatrix,
    delta: f64,
    cfg: &EnsembleConfig,
    slack: &SlackRules,
) -> Result<FiniteTimeReport> {
    cfg.validate()?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("delta must lie in (0, 1)".into()));
    }
    let fc = check_hypotheses(spec, &[Hypothesis::A1])?;
    let rate = fc.rate()?;
    let (alpha, gamma) = (spec.pert.alpha, spec.pert.gamma);
    let scenario = |a: f64, g: f64| -> Result<Scenario> {
        let s = Scenario::Coupled {
            spec: with_intensities(spec, a, g)?,
            sigma0: sigma0.clone(),
            sigmahat0: sigmahat0.clone(),
        };
        s.validate()?;
        Ok(s)
    };
    let base = scenario(0.0, 0.0)?;
    let runs = [scenario(alpha, gamma)?, scenario(0.5 * alpha, 0.5 * gamma)?];
    let ds = spec.nd.projector_dims()[0];
    let samples = par_trajectories(cfg.n_traj, |i| {
        let nominal = grid_states(&base, cfg, i)?;
        let mut d0_sq: [Vec<f64>; 2] = Default::default();
        let mut delta_sq: [Vec<f64>; 2] = Default::default();
        for (r, sc) in runs.iter().enumerate() {
            let states = grid_states(sc, cfg, i)?;
            d0_sq[r] = states.iter().map(|s| d0_raw(s, ds).powi(2)).collect();
            delta_sq[r] = states
                .iter()
                .zip(&nominal)
                .map(|(s, n)| (n - s).norm_squared())
                .collect();
        }
        Ok(CouplingSample { d0_sq, delta_sq })
    })?;
    let times = cfg.grid_times();
    let m = times.len();
    let moments = |f: &dyn Fn(&CouplingSample) -> &Vec<f64>| {
        let rows: Vec<&[f64]> = samples.iter().map(|s| &f(s)[..m]).collect();
        column_moments(&rows, m)
    };
    let (d0_full, d0_full_se) = moments(&|s| &s.d0_sq[0]);
    let (d0_half, _) = moments(&|s| &s.d0_sq[1]);
    let (cp_full, cp_full_se) = moments(&|s| &s.delta_sq[0]);
    let (cp_half, cp_half_se) = moments(&|s| &s.delta_sq[1]);
    let intensity = alpha.abs() + gamma;
    let half = 0.5 * intensity;
    let coupling_full: Vec<f64> = cp_full.iter().map(|x| x.sqrt()).collect();
    let coupling_half: Vec<f64> = cp_half.iter().map(|x| x.sqrt()).collect();
    let (a, b) = if intensity == 0.0 {
        (0.0, 0.0)
    } else {
        let ys: Vec<f64> = coupling_full.iter().map(|y| y / intensity).collect();
        fit_growth(&times, &ys)?
    };
    let horizon = finite_time_horizon(a, b, intensity, delta);
    let horizon_half = finite_time_horizon(a, b, half, delta);
    let r0 = d0_raw(sigma0.matrix(), ds).powi(2) + d0_raw(sigmahat0.matrix(), ds).powi(2);
    let shape = |s: f64, t: f64| s.powf(delta) + r0 * (-rate * t).exp();
    let c = times
        .iter()
        .zip(&d0_half)
        .filter(|(t, _)| **t <= horizon_half)
        .map(|(t, e)| e / shape(half, *t))
        .fold(0.0f64, f64::max);
    let series = times
        .iter()
        .enumerate()
        .filter(|(_, t)| **t <= horizon)
        .map(|(j, &t)| {
            let bound = c * shape(intensity, t);
            BoundPoint {
                t,
                empirical: d0_full[j],
                bound,
                margin: bound + slack.stderr_mult * d0_full_se[j] - d0_full[j],
            }
        })
        .collect();
    let p = params(&[
        ("alpha", alpha),
        ("gamma", gamma),
        ("delta", delta),
        ("rate", rate),
        ("a", a),
        ("b", b),
        ("c", c),
        ("horizon", horizon),
        ("n_traj", cfg.n_traj as f64),
    ]);
    let report = BoundReport::new(BoundName::FiniteTime, slack, p.clone(), series);
    let factor = (2f64.powf(delta) / 2.0).powi(2);
    let scaling_series = if intensity == 0.0 {
        Vec::new()
    } else {
        times
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, &t)| {
                let need = factor * (cp_half[j] - slack.stderr_mult * cp_half_se[j]);
                BoundPoint {
                    t,
                    empirical: cp_full[j],
                    bound: need,
                    margin: cp_full[j] + slack.stderr_mult * cp_full_se[j] - need,
                }
            })
            .collect()
    };
    let scaling = BoundReport::new(BoundName::FiniteTime, slack, p, scaling_series);
    Ok(FiniteTimeReport {
        a,
        b,
        c,
        horizon,
        horizon_half,
        times,
        coupling_full,
        coupling_half,
        report,
        scaling,
    })
}
