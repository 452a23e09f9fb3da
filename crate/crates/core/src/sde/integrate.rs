//! Euler–Maruyama integration with post-step positivity repair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NominalModel, PerturbationSpec, PerturbedModel};
use crate::qcore::{
    d0_raw, hermitian_eigenvalues, hermitian_part, outside_population_raw, repair_with_report, CMatrix, DensityMatrix,
    Tolerances, C64, I,
};
use crate::sde::noise::{GaussianIncrements, IncrementSource};
use crate::sde::nondemolition::{check_h1, FeedbackLaw, FilterParams, NonDemolitionModel};

/// Fraction of repaired steps above which a record is flagged.
pub const REPAIR_FLAG_FRACTION: f64 = 0.01;

/// Run parameters shared by every simulation entry point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    /// Stream index within the seed; ensembles use the trajectory number.
    pub trajectory: u64,
    /// Keep every `thin`-th state.
    pub thin: usize,
    pub tol: Tolerances,
}

impl SimOptions {
    pub fn new(dt: f64, t_final: f64, seed: u64) -> Self {
        Self {
            dt,
            t_final,
            seed,
            trajectory: 0,
            thin: 1,
            tol: Tolerances::default(),
        }
    }

    pub fn with_trajectory(mut self, trajectory: u64) -> Self {
        self.trajectory = trajectory;
        self
    }

    pub fn with_thin(mut self, thin: usize) -> Self {
        self.thin = thin;
        self
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if !(self.t_final >= self.dt) {
            return Err(Error::InvalidArgument("t_final must be at least dt".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidArgument("thin must be at least 1".into()));
        }
        Ok(())
    }

    fn repair_tol(&self) -> f64 {
        self.tol.herm.max(self.tol.trace)
    }

    pub(crate) fn increments(&self) -> GaussianIncrements {
        GaussianIncrements::new(self.seed, self.trajectory, self.dt)
    }
}

/// Precomputed Euler–Maruyama vector field
/// `ρ ↦ Aρ + ρA† + Σ MρM†` (drift) and `Σ g_k(L_kρ + ρL_k† − Tr((L_k + L_k†)ρ)ρ)dW_k`.
#[derive(Debug, Clone)]
pub(crate) struct Propagator {
    a0: CMatrix,
    minus_i_h1: CMatrix,
    sandwich: Vec<(CMatrix, CMatrix)>,
    meas: Vec<(CMatrix, f64)>,
}

impl Propagator {
    fn build(h0: &CMatrix, h1: &CMatrix, sandwich: Vec<CMatrix>, meas: Vec<(CMatrix, f64)>) -> Self {
        let mut a0 = h0 * (-I);
        for m in &sandwich {
            a0 -= m.adjoint() * m * C64::new(0.5, 0.0);
        }
        Self {
            a0,
            minus_i_h1: h1 * (-I),
            sandwich: sandwich
                .into_iter()
                .map(|m| {
                    let d = m.adjoint();
                    (m, d)
                })
                .collect(),
            meas,
        }
    }

    pub(crate) fn nominal(model: &NominalModel) -> Self {
        let sandwich = model.channels().iter().map(|c| c.l.matrix().clone()).collect();
        let meas = model
            .channels()
            .iter()
            .map(|c| (c.l.matrix().clone(), c.eta.sqrt()))
            .collect();
        Self::build(model.h0().matrix(), model.h1().matrix(), sandwich, meas)
    }

    pub(crate) fn perturbed(pm: &PerturbedModel) -> Self {
        let pert = pm.pert();
        let mut sandwich: Vec<CMatrix> = pm.lbar().iter().map(|l| l.matrix().clone()).collect();
        if pert.gamma != 0.0 {
            let g = C64::new(pert.gamma.sqrt(), 0.0);
            sandwich.extend(pert.c.iter().map(|c| c.matrix() * g));
        }
        let meas = pm
            .lbar()
            .iter()
            .zip(pm.nominal().channels())
            .map(|(l, ch)| (l.matrix().clone(), ch.eta.sqrt()))
            .collect();
        Self::build(pm.hbar0().matrix(), pm.nominal().h1().matrix(), sandwich, meas)
    }

    /// True-state field of the feedback loop: `L̄_k = √θ_k L_k`, Hamiltonian
    /// and dissipative perturbations only.
    pub(crate) fn coupled_truth(nd: &NonDemolitionModel, fp: &FilterParams, pert: &PerturbationSpec) -> Result<Self> {
        check_proportional(nd, fp, pert)?;
        let h0 = nd.h0().matrix() + pert.htilde.matrix() * C64::new(pert.alpha, 0.0);
        let mut sandwich = Vec::new();
        let mut meas = Vec::new();
        for (k, p) in fp.channels.iter().enumerate() {
            let l = nd.jump(k).into_matrix();
            sandwich.push(&l * C64::new(p.theta.sqrt(), 0.0));
            meas.push((l, (p.eta * p.theta).sqrt()));
        }
        if pert.gamma != 0.0 {
            let g = C64::new(pert.gamma.sqrt(), 0.0);
            sandwich.extend(pert.c.iter().map(|c| c.matrix() * g));
        }
        Ok(Self::build(&h0, nd.h1().matrix(), sandwich, meas))
    }

    pub(crate) fn filter(nd: &NonDemolitionModel, fp: &FilterParams) -> Self {
        let mut sandwich = Vec::new();
        let mut meas = Vec::new();
        for (k, p) in fp.channels.iter().enumerate() {
            let l = nd.jump(k).into_matrix();
            sandwich.push(&l * C64::new(p.thetahat.sqrt(), 0.0));
            meas.push((l, (p.etahat * p.thetahat).sqrt()));
        }
        Self::build(nd.h0().matrix(), nd.h1().matrix(), sandwich, meas)
    }

    pub(crate) fn n_channels(&self) -> usize {
        self.meas.len()
    }

    pub(crate) fn gain(&self, k: usize) -> f64 {
        self.meas[k].1
    }

    /// `Tr((L_k + L_k†)ρ)` for each channel.
    pub(crate) fn expectations(&self, rho: &CMatrix, out: &mut [f64]) {
        for ((l, _), o) in self.meas.iter().zip(out.iter_mut()) {
            *o = 2.0 * (l * rho).trace().re;
        }
    }

    /// One Euler–Maruyama step driven by `dw` (Wiener increments or innovations).
    pub(crate) fn step(&self, rho: &CMatrix, u: f64, dt: f64, dw: &[f64]) -> CMatrix {
        let x = if u == 0.0 {
            &self.a0 * rho
        } else {
            (&self.a0 + &self.minus_i_h1 * C64::new(u, 0.0)) * rho
        };
        let dtc = C64::new(dt, 0.0);
        let mut drift = &x + x.adjoint();
        for (m, md) in &self.sandwich {
            drift += m * rho * md;
        }
        let mut out = rho + drift * dtc;
        for ((l, g), w) in self.meas.iter().zip(dw) {
            if *w == 0.0 {
                continue;
            }
            let y = l * rho;
            let tr = 2.0 * y.trace().re;
            out += (&y + y.adjoint() - rho * C64::new(tr, 0.0)) * C64::new(g * w, 0.0);
        }
        out
    }
}

fn check_proportional(nd: &NonDemolitionModel, fp: &FilterParams, pert: &PerturbationSpec) -> Result<()> {
    if fp.channels.len() != nd.n_channels() {
        return Err(Error::ChannelCountMismatch {
            nominal: nd.n_channels(),
            perturbation: fp.channels.len(),
        });
    }
    crate::qcore::check_dim(nd.dim(), pert.dim())?;
    if pert.beta != 0.0 || pert.ltilde.iter().any(|l| !l.is_zero()) {
        return Err(Error::UnsupportedPerturbation(
            "jump-operator perturbations enter the feedback loop only through theta".into(),
        ));
    }
    Ok(())
}

/// What an observer sees after each step (and once at `t = 0`).
#[derive(Debug)]
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub state: &'a CMatrix,
    pub filter: Option<&'a CMatrix>,
    pub u: f64,
    /// Measurement increments of the step just taken (empty at step 0).
    pub dy: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunStats {
    pub steps: usize,
    pub repair_count: usize,
    pub stopped_early: bool,
}

fn repair_step(m: &CMatrix, opts: &SimOptions, step: usize, repairs: &mut usize) -> Result<CMatrix> {
    match repair_with_report(m, opts.repair_tol()) {
        Ok(o) => {
            if o.clipped > opts.tol.psd {
                *repairs += 1;
            }
            Ok(o.state.matrix().clone())
        }
        Err(Error::RepairOutOfBudget {
            herm_residual,
            trace_error,
            ..
        }) => Err(Error::RepairOutOfBudget {
            herm_residual,
            trace_error,
            step: Some(step),
        }),
        Err(e) => Err(e),
    }
}

/// Single-state loop. `law` closes the loop on the simulated state itself.
pub(crate) fn run_single<S, F>(
    prop: &Propagator,
    law: Option<(&FeedbackLaw, usize)>,
    rho0: &CMatrix,
    opts: &SimOptions,
    source: &mut S,
    mut observe: F,
) -> Result<RunStats>
where
    S: IncrementSource,
    F: FnMut(&StepView) -> bool,
{
    opts.validate()?;
    let n = prop.n_channels();
    let dt = opts.dt;
    let control = |r: &CMatrix| law.map_or(0.0, |(l, ds)| l.eval_population(outside_population_raw(r, ds)));
    let mut rho = rho0.clone();
    let mut u = control(&rho);
    let mut dw = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut repairs = 0;
    let n_steps = opts.n_steps();
    if !observe(&StepView {
        step: 0,
        t: 0.0,
        state: &rho,
        filter: None,
        u,
        dy: &[],
    }) {
        return Ok(RunStats {
            steps: 0,
            repair_count: 0,
            stopped_early: true,
        });
    }
    for step in 1..=n_steps {
        source.next_step(&mut dw);
        prop.expectations(&rho, &mut m);
        for k in 0..n {
            dy[k] = dw[k] + prop.gain(k) * m[k] * dt;
        }
        let next = prop.step(&rho, u, dt, &dw);
        rho = repair_step(&next, opts, step, &mut repairs)?;
        u = control(&rho);
        let view = StepView {
            step,
            t: step as f64 * dt,
            state: &rho,
            filter: None,
            u,
            dy: &dy,
        };
        if !observe(&view) {
            return Ok(RunStats {
                steps: step,
                repair_count: repairs,
                stopped_early: true,
            });
        }
    }
    Ok(RunStats {
        steps: n_steps,
        repair_count: repairs,
        stopped_early: false,
    })
}

/// The filter update from a measurement increment; shared by the coupled
/// loop and by record replay so both produce identical bits.
pub(crate) fn filter_update(
    filter: &Propagator,
    sigma_hat: &CMatrix,
    u: f64,
    dt: f64,
    dy: &[f64],
    innov: &mut [f64],
) -> CMatrix {
    filter.expectations(sigma_hat, innov);
    for k in 0..innov.len() {
        innov[k] = dy[k] - filter.gain(k) * innov[k] * dt;
    }
    filter.step(sigma_hat, u, dt, innov)
}

fn repair_filter(m: &CMatrix, opts: &SimOptions, step: usize, repairs: &mut usize) -> Result<CMatrix> {
    let before = *repairs;
    let out = repair_step(m, opts, step, repairs)?;
    if *repairs > before {
        let min = hermitian_eigenvalues(&hermitian_part(m))[0];
        if min < -10.0 * opts.tol.psd {
            return Err(Error::FilterSingular { step, min_eig: min });
        }
    }
    Ok(out)
}

/// Coupled true-state / filter loop with `u = law(σ̂)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_coupled<S, F>(
    truth: &Propagator,
    filter: &Propagator,
    law: &FeedbackLaw,
    ds: usize,
    sigma0: &CMatrix,
    sigmahat0: &CMatrix,
    opts: &SimOptions,
    source: &mut S,
    mut observe: F,
) -> Result<RunStats>
where
    S: IncrementSource,
    F: FnMut(&StepView) -> bool,
{
    opts.validate()?;
    let n = truth.n_channels();
    let dt = opts.dt;
    let mut sigma = sigma0.clone();
    let mut sigma_hat = sigmahat0.clone();
    let mut u = law.eval_population(outside_population_raw(&sigma_hat, ds));
    let mut dw = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut innov = vec![0.0; n];
    let mut repairs = 0;
    let n_steps = opts.n_steps();
    if !observe(&StepView {
        step: 0,
        t: 0.0,
        state: &sigma,
        filter: Some(&sigma_hat),
        u,
        dy: &[],
    }) {
        return Ok(RunStats {
            steps: 0,
            repair_count: 0,
            stopped_early: true,
        });
    }
    for step in 1..=n_steps {
        source.next_step(&mut dw);
        truth.expectations(&sigma, &mut m);
        for k in 0..n {
            dy[k] = dw[k] + truth.gain(k) * m[k] * dt;
        }
        let next = truth.step(&sigma, u, dt, &dw);
        let next_hat = filter_update(filter, &sigma_hat, u, dt, &dy, &mut innov);
        sigma = repair_step(&next, opts, step, &mut repairs)?;
        sigma_hat = repair_filter(&next_hat, opts, step, &mut repairs)?;
        u = law.eval_population(outside_population_raw(&sigma_hat, ds));
        let view = StepView {
            step,
            t: step as f64 * dt,
            state: &sigma,
            filter: Some(&sigma_hat),
            u,
            dy: &dy,
        };
        if !observe(&view) {
            return Ok(RunStats {
                steps: step,
                repair_count: repairs,
                stopped_early: true,
            });
        }
    }
    Ok(RunStats {
        steps: n_steps,
        repair_count: repairs,
        stopped_early: false,
    })
}

/// Output of a single-state simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// `(step index, state)` for every `thin`-th step.
    pub states: Vec<(usize, DensityMatrix)>,
    pub d0_series: Vec<f64>,
    pub u_series: Vec<f64>,
    /// `dY_k` of each step (`times.len() − 1` rows).
    pub dy_increments: Vec<Vec<f64>>,
    pub seed: u64,
    pub trajectory: u64,
    pub repair_count: usize,
    /// More than 1% of steps needed a positivity repair.
    pub flagged: bool,
}

struct Recorder {
    ds: usize,
    thin: usize,
    rec: TrajectoryRecord,
    filter: Option<TrajectoryRecord>,
}

impl Recorder {
    fn new(ds: usize, opts: &SimOptions, coupled: bool) -> Self {
        let empty = TrajectoryRecord {
            times: Vec::new(),
            states: Vec::new(),
            d0_series: Vec::new(),
            u_series: Vec::new(),
            dy_increments: Vec::new(),
            seed: opts.seed,
            trajectory: opts.trajectory,
            repair_count: 0,
            flagged: false,
        };
        Self {
            ds,
            thin: opts.thin,
            filter: coupled.then(|| empty.clone()),
            rec: empty,
        }
    }

    fn push(rec: &mut TrajectoryRecord, v: &StepView, state: &CMatrix, ds: usize, thin: usize) {
        rec.times.push(v.t);
        rec.d0_series.push(d0_raw(state, ds));
        rec.u_series.push(v.u);
        if v.step > 0 {
            rec.dy_increments.push(v.dy.to_vec());
        }
        if v.step.is_multiple_of(thin) {
            rec.states
                .push((v.step, DensityMatrix::from_matrix_unchecked(state.clone())));
        }
    }

    fn observe(&mut self, v: &StepView) -> bool {
        Self::push(&mut self.rec, v, v.state, self.ds, self.thin);
        if let (Some(f), Some(s)) = (self.filter.as_mut(), v.filter) {
            Self::push(f, v, s, self.ds, self.thin);
        }
        true
    }

    fn finish(mut self, stats: RunStats) -> (TrajectoryRecord, Option<TrajectoryRecord>) {
        let flagged = stats.repair_count as f64 > REPAIR_FLAG_FRACTION * stats.steps.max(1) as f64;
        for r in std::iter::once(&mut self.rec).chain(self.filter.iter_mut()) {
            r.repair_count = stats.repair_count;
            r.flagged = flagged;
        }
        (self.rec, self.filter)
    }
}

/// Nominal stochastic master equation, optionally under full-state feedback.
pub fn simulate_nominal(
    model: &NominalModel,
    law: Option<&FeedbackLaw>,
    rho0: &DensityMatrix,
    opts: &SimOptions,
) -> Result<TrajectoryRecord> {
    crate::qcore::check_dim(model.dim(), rho0.dim())?;
    let prop = Propagator::nominal(model);
    let ds = model.split().dim_s();
    let mut rec = Recorder::new(ds, opts, false);
    let stats = run_single(
        &prop,
        law.map(|l| (l, ds)),
        rho0.matrix(),
        opts,
        &mut opts.increments(),
        |v| rec.observe(v),
    )?;
    Ok(rec.finish(stats).0)
}

/// Perturbed stochastic master equation driven by `W̄` at `u = 0`.
pub fn simulate_perturbed(pm: &PerturbedModel, rho0: &DensityMatrix, opts: &SimOptions) -> Result<TrajectoryRecord> {
    simulate_perturbed_with(pm, rho0, opts, &mut opts.increments())
}

/// As [`simulate_perturbed`] with an explicit increment source.
pub fn simulate_perturbed_with<S: IncrementSource>(
    pm: &PerturbedModel,
    rho0: &DensityMatrix,
    opts: &SimOptions,
    source: &mut S,
) -> Result<TrajectoryRecord> {
    crate::qcore::check_dim(pm.nominal().dim(), rho0.dim())?;
    let prop = Propagator::perturbed(pm);
    let mut rec = Recorder::new(pm.nominal().split().dim_s(), opts, false);
    let stats = run_single(&prop, None, rho0.matrix(), opts, source, |v| rec.observe(v))?;
    Ok(rec.finish(stats).0)
}

/// Paired true-state and filter records sharing one measurement record.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTrajectoryRecord {
    pub truth: TrajectoryRecord,
    pub filter: TrajectoryRecord,
}

/// Everything that defines a feedback-loop scenario apart from its initial
/// states and run options.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSpec {
    pub nd: NonDemolitionModel,
    pub fp: FilterParams,
    pub pert: PerturbationSpec,
    pub law: FeedbackLaw,
}

impl CoupledSpec {
    pub(crate) fn propagators(&self) -> Result<(Propagator, Propagator)> {
        if !check_h1(&self.law) {
            return Err(Error::InvalidArgument(
                "feedback law violates a > 0, b >= 1, 0 < eps1 < eps2 < 1".into(),
            ));
        }
        Ok((
            Propagator::coupled_truth(&self.nd, &self.fp, &self.pert)?,
            Propagator::filter(&self.nd, &self.fp),
        ))
    }

    pub(crate) fn check_states(&self, sigma0: &DensityMatrix, sigmahat0: &DensityMatrix) -> Result<()> {
        crate::qcore::check_dim(self.nd.dim(), sigma0.dim())?;
        crate::qcore::check_dim(self.nd.dim(), sigmahat0.dim())?;
        if !sigmahat0.is_positive_definite() {
            return Err(Error::InvalidState(
                "filter initial state must be positive definite".into(),
            ));
        }
        Ok(())
    }
}

pub fn simulate_coupled(
    spec: &CoupledSpec,
    sigma0: &DensityMatrix,
    sigmahat0: &DensityMatrix,
    opts: &SimOptions,
) -> Result<CoupledTrajectoryRecord> {
    simulate_coupled_with(spec, sigma0, sigmahat0, opts, &mut opts.increments())
}

pub fn simulate_coupled_with<S: IncrementSource>(
    spec: &CoupledSpec,
    sigma0: &DensityMatrix,
    sigmahat0: &DensityMatrix,
    opts: &SimOptions,
    source: &mut S,
) -> Result<CoupledTrajectoryRecord> {
    spec.check_states(sigma0, sigmahat0)?;
    let (truth, filter) = spec.propagators()?;
    let ds = spec.nd.projector_dims()[0];
    let mut rec = Recorder::new(ds, opts, true);
    let stats = run_coupled(
        &truth,
        &filter,
        &spec.law,
        ds,
        sigma0.matrix(),
        sigmahat0.matrix(),
        opts,
        source,
        |v| rec.observe(v),
    )?;
    let (truth, filter) = rec.finish(stats);
    Ok(CoupledTrajectoryRecord {
        truth,
        filter: filter.expect("coupled recorder keeps a filter record"),
    })
}

/// Recomputes the filter trajectory from `σ̂₀` and the recorded `dY` alone.
pub fn reconstruct_filter(
    spec: &CoupledSpec,
    sigmahat0: &DensityMatrix,
    dy_increments: &[Vec<f64>],
    opts: &SimOptions,
) -> Result<Vec<DensityMatrix>> {
    let filter = Propagator::filter(&spec.nd, &spec.fp);
    let ds = spec.nd.projector_dims()[0];
    let mut sigma_hat = sigmahat0.matrix().clone();
    let mut innov = vec![0.0; filter.n_channels()];
    let mut repairs = 0;
    let mut out = vec![DensityMatrix::from_matrix_unchecked(sigma_hat.clone())];
    for (i, dy) in dy_increments.iter().enumerate() {
        let u = spec.law.eval_population(outside_population_raw(&sigma_hat, ds));
        let next = filter_update(&filter, &sigma_hat, u, opts.dt, dy, &mut innov);
        sigma_hat = repair_filter(&next, opts, i + 1, &mut repairs)?;
        out.push(DensityMatrix::from_matrix_unchecked(sigma_hat.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Channel;
    use crate::qcore::{QOperator, SubspaceSplit};
    use crate::sde::nondemolition::ChannelParams;

    fn decay(eta: f64) -> NominalModel {
        NominalModel::new(
            QOperator::zeros(2),
            QOperator::zeros(2),
            vec![Channel::new(QOperator::ket_bra(2, 0, 1), eta)],
            SubspaceSplit::new(1, 1).unwrap(),
        )
        .unwrap()
    }

    fn qubit_feedback(theta: f64, thetahat: f64, pert: PerturbationSpec) -> CoupledSpec {
        let nd = NonDemolitionModel::new(
            vec![1, 1],
            vec![0.0, 0.0],
            vec![vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)]],
            QOperator::pauli_y(),
        )
        .unwrap();
        CoupledSpec {
            nd,
            fp: FilterParams::new(vec![ChannelParams {
                eta: 0.5,
                theta,
                etahat: 0.5,
                thetahat,
            }])
            .unwrap(),
            pert,
            law: FeedbackLaw::new(5.0, 1.0, 0.05, 0.2).unwrap(),
        }
    }

    #[test]
    fn decay_mean_follows_lindblad() {
        let model = decay(0.5);
        let rho0 = DensityMatrix::basis(2, 1);
        let n = 200;
        let mut acc = 0.0;
        for traj in 0..n {
            let opts = SimOptions::new(1e-3, 1.0, 11).with_trajectory(traj).with_thin(1000);
            let rec = simulate_nominal(&model, None, &rho0, &opts).unwrap();
            let last = &rec.states.last().unwrap().1;
            assert_eq!(rec.states.last().unwrap().0, 1000);
            acc += last.matrix()[(1, 1)].re;
        }
        let mean = acc / n as f64;
        assert!((mean - (-1.0f64).exp()).abs() < 0.02, "{mean}");
    }

    #[test]
    fn target_states_stay_put() {
        let model = decay(1.0);
        let opts = SimOptions::new(1e-3, 0.5, 3);
        let rec = simulate_nominal(&model, None, &DensityMatrix::basis(2, 0), &opts).unwrap();
        assert!(rec.d0_series.iter().all(|&d| d < 1e-12));
        assert_eq!(rec.times.len(), 501);
        assert_eq!(rec.dy_increments.len(), 500);
        assert_eq!(rec.repair_count, 0);
        assert!(!rec.flagged);
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let model = decay(0.7);
        let rho0 = DensityMatrix::maximally_mixed(2);
        let opts = SimOptions::new(1e-3, 0.2, 5);
        let a = simulate_nominal(&model, None, &rho0, &opts).unwrap();
        let b = simulate_nominal(&model, None, &rho0, &opts).unwrap();
        assert_eq!(a, b);
        let c = simulate_nominal(&model, None, &rho0, &opts.with_trajectory(1)).unwrap();
        assert_ne!(a.dy_increments, c.dy_increments);
    }

    #[test]
    fn perturbed_matches_nominal_at_zero_intensity() {
        let model = decay(0.7);
        let pm = PerturbedModel::new(model.clone(), PerturbationSpec::zero(2, 1)).unwrap();
        let rho0 = DensityMatrix::maximally_mixed(2);
        let opts = SimOptions::new(1e-3, 0.2, 5);
        let a = simulate_nominal(&model, None, &rho0, &opts).unwrap();
        let b = simulate_perturbed(&pm, &rho0, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn filter_tracks_truth_under_perfect_knowledge() {
        let spec = qubit_feedback(1.0, 1.0, PerturbationSpec::zero(2, 0));
        let s0 = DensityMatrix::diagonal(&[0.3, 0.7]).unwrap();
        let opts = SimOptions::new(1e-4, 0.5, 9);
        let rec = simulate_coupled(&spec, &s0, &s0, &opts).unwrap();
        for ((_, a), (_, b)) in rec.truth.states.iter().zip(&rec.filter.states) {
            assert!((a.matrix() - b.matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn filter_is_rebuilt_from_the_record() {
        let pert = PerturbationSpec::new(0.2, 0.0, 0.0, QOperator::pauli_z().scale(0.5), vec![], vec![]).unwrap();
        let spec = qubit_feedback(1.1, 0.9, pert);
        let s0 = DensityMatrix::basis(2, 1);
        let sh0 = DensityMatrix::diagonal(&[0.5, 0.5]).unwrap();
        let opts = SimOptions::new(1e-3, 0.5, 21);
        let rec = simulate_coupled(&spec, &s0, &sh0, &opts).unwrap();
        let rebuilt = reconstruct_filter(&spec, &sh0, &rec.filter.dy_increments, &opts).unwrap();
        assert_eq!(rebuilt.len(), rec.filter.times.len());
        for (step, s) in &rec.filter.states {
            assert_eq!(s.matrix(), rebuilt[*step].matrix());
        }
    }

    #[test]
    fn coupled_rejects_unsupported_input() {
        let jump = PerturbationSpec::new(
            0.0,
            0.1,
            0.0,
            QOperator::zeros(2),
            vec![QOperator::pauli_z().scale(0.5)],
            vec![],
        )
        .unwrap();
        let spec = qubit_feedback(1.0, 1.0, jump);
        let s0 = DensityMatrix::diagonal(&[0.5, 0.5]).unwrap();
        let opts = SimOptions::new(1e-3, 0.1, 1);
        assert!(matches!(
            simulate_coupled(&spec, &s0, &s0, &opts),
            Err(Error::UnsupportedPerturbation(_))
        ));
        let spec = qubit_feedback(1.0, 1.0, PerturbationSpec::zero(2, 0));
        let pure = DensityMatrix::basis(2, 0);
        assert!(matches!(
            simulate_coupled(&spec, &s0, &pure, &opts),
            Err(Error::InvalidState(_))
        ));
        assert!(simulate_coupled(&spec, &s0, &s0, &SimOptions::new(0.0, 0.1, 1)).is_err());
    }
}
