//! Scenario files: TOML with complex numbers written as `[re, im]` pairs.

use serde::{Deserialize, Serialize};

use crate::did::DEFAULT_RANK_TOL;
use crate::error::{Error, Result};
use crate::experiment::{EnsembleConfig, SlackRules};
use crate::model::{Channel, NominalModel, PerturbationSpec};
use crate::qcore::{hs_norm, CMatrix, DensityMatrix, QOperator, SubspaceSplit, Tolerances, C64};
use crate::sde::{ChannelParams, CoupledSpec, FeedbackLaw, FilterParams, NonDemolitionModel, SimOptions};

/// Rows of `[re, im]` entries.
pub type MatrixConfig = Vec<Vec<[f64; 2]>>;

/// Slack on the perturbation norm caps.
const NORM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackConfig>,
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<OutputsConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim_s: usize,
    pub dim_r: usize,
    pub h0: MatrixConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h1: Option<MatrixConfig>,
    pub channels: Vec<ChannelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub l: MatrixConfig,
    pub eta: f64,
    /// Proportional perturbation `L̄ = √θ L` in the feedback loop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub htilde: Option<MatrixConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ltilde: Vec<MatrixConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub c: Vec<MatrixConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    pub a: f64,
    pub b: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// Diagonal blocks of the measurement structure, target block first.
    pub projector_dims: Vec<usize>,
    /// Filter estimates of `η_k` and `θ_k`; default to the true values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub etahat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thetahat: Option<Vec<f64>>,
    /// Initial filter state; defaults to the maximally mixed state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_state: Option<MatrixConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dt: f64,
    pub t_final: f64,
    pub master_seed: u64,
    #[serde(default = "one")]
    pub n_traj: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default = "one")]
    pub grid_stride: usize,
    /// Constant control used by the static analyses.
    #[serde(default)]
    pub u: f64,
    pub initial_state: MatrixConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub slack: SlackRules,
    /// Bounds checked by `verify-bounds`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bounds: Vec<String>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finite_time_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recurrence_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Box for `(α, β, γ)`.
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub n_samples: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

fn one() -> usize {
    1
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

fn default_deltas() -> Vec<f64> {
    vec![2.0, 5.0, 10.0]
}

fn default_threshold() -> f64 {
    0.99
}

fn invalid(field: &str, constraint: &str) -> Error {
    Error::ValidationError {
        field: field.into(),
        constraint: constraint.into(),
    }
}

fn matrix(field: &str, m: &MatrixConfig, dim: usize) -> Result<QOperator> {
    if m.len() != dim || m.iter().any(|r| r.len() != dim) {
        return Err(invalid(field, &format!("{dim}x{dim} matrix of [re, im] pairs")));
    }
    let rows: Vec<Vec<C64>> = m
        .iter()
        .map(|r| r.iter().map(|[re, im]| C64::new(*re, *im)).collect())
        .collect();
    QOperator::from_rows(&rows).map_err(|e| invalid(field, &e.to_string()))
}

fn state(field: &str, m: &MatrixConfig, dim: usize, tol: &Tolerances) -> Result<DensityMatrix> {
    DensityMatrix::new(matrix(field, m, dim)?, tol).map_err(|e| invalid(field, &e.to_string()))
}

/// Writes a matrix as rows of `[re, im]` pairs.
pub fn matrix_config(m: &CMatrix) -> MatrixConfig {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| [m[(i, j)].re + 0.0, m[(i, j)].im + 0.0])
                .collect()
        })
        .collect()
}

fn toml_field(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into())
}

/// Parses and validates a scenario file.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::ParseError {
        field: toml_field(e.message()),
        reason: e.to_string().trim().to_string(),
    })?;
    cfg.build()?;
    Ok(cfg)
}

pub fn render_scenario(cfg: &ScenarioConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Domain objects described by a scenario.
#[derive(Debug, Clone)]
pub struct Built {
    pub nominal: NominalModel,
    pub pert: Option<PerturbationSpec>,
    pub coupled: Option<CoupledSpec>,
    pub initial: DensityMatrix,
    pub filter_initial: Option<DensityMatrix>,
}

impl ScenarioConfig {
    pub fn build(&self) -> Result<Built> {
        let m = &self.model;
        let split = SubspaceSplit::new(m.dim_s, m.dim_r).map_err(|_| invalid("dim_s", "dim_s >= 1 and dim_r >= 1"))?;
        let n = split.dim();
        let h0 = matrix("h0", &m.h0, n)?;
        let h1 = match &m.h1 {
            Some(h) => matrix("h1", h, n)?,
            None => QOperator::zeros(n),
        };
        if m.channels.is_empty() {
            return Err(invalid("channels", "at least one channel"));
        }
        let mut channels = Vec::new();
        for ch in &m.channels {
            if !(ch.eta > 0.0 && ch.eta <= 1.0) {
                return Err(invalid("eta", "in (0,1]"));
            }
            if let Some(t) = ch.theta {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(invalid("theta", "> 0"));
                }
            }
            channels.push(Channel::new(matrix("l", &ch.l, n)?, ch.eta));
        }
        let nominal = NominalModel::new(h0, h1, channels, split).map_err(|e| invalid("model", &e.to_string()))?;
        let pert = self
            .perturbation
            .as_ref()
            .map(|p| build_pert(p, n, m.channels.len()))
            .transpose()?;
        let r = &self.run;
        if !(r.dt > 0.0 && r.dt.is_finite()) {
            return Err(invalid("dt", "> 0"));
        }
        if !(r.t_final >= r.dt) {
            return Err(invalid("t_final", ">= dt"));
        }
        if r.thin == 0 || r.grid_stride == 0 || r.n_traj == 0 {
            return Err(invalid("run", "thin, grid_stride and n_traj >= 1"));
        }
        if !(r.rank_tol > 0.0) {
            return Err(invalid("rank_tol", "> 0"));
        }
        if r.deltas.iter().any(|d| !(*d >= 1.0)) {
            return Err(invalid("deltas", ">= 1"));
        }
        let initial = state("initial_state", &r.initial_state, n, &r.tolerances)?;
        let (coupled, filter_initial) = match &self.feedback {
            Some(f) => {
                let (spec, sh0) = build_feedback(f, &nominal, &m.channels, pert.as_ref(), &r.tolerances)?;
                (Some(spec), Some(sh0))
            }
            None => (None, None),
        };
        if let Some(s) = &self.scan {
            if s.lo.iter().zip(&s.hi).any(|(a, b)| !(a <= b)) || s.lo.iter().any(|x| *x < 0.0) {
                return Err(invalid("scan", "0 <= lo <= hi"));
            }
            if self.perturbation.is_none() {
                return Err(invalid("scan", "requires a perturbation section"));
            }
        }
        Ok(Built {
            nominal,
            pert,
            coupled,
            initial,
            filter_initial,
        })
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            dt: self.run.dt,
            t_final: self.run.t_final,
            seed: self.run.master_seed,
            trajectory: 0,
            thin: self.run.thin,
            tol: self.run.tolerances,
        }
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig::new(self.sim_options(), self.run.n_traj, self.run.grid_stride)
    }
}

fn build_pert(p: &PerturbationConfig, n: usize, n_channels: usize) -> Result<PerturbationSpec> {
    let htilde = match &p.htilde {
        Some(h) => matrix("Htilde", h, n)?,
        None => QOperator::zeros(n),
    };
    if hs_norm(&htilde) > 1.0 + NORM_SLACK {
        return Err(invalid("Htilde", "norm ≤ 1"));
    }
    let ltilde = if p.ltilde.is_empty() {
        vec![QOperator::zeros(n); n_channels]
    } else {
        p.ltilde
            .iter()
            .map(|l| matrix("Ltilde", l, n))
            .collect::<Result<Vec<_>>>()?
    };
    if ltilde.len() != n_channels {
        return Err(invalid("Ltilde", "one matrix per channel"));
    }
    if ltilde.iter().any(|l| hs_norm(l) > 1.0 + NORM_SLACK) {
        return Err(invalid("Ltilde", "norm ≤ 1"));
    }
    let c = p.c.iter().map(|c| matrix("C", c, n)).collect::<Result<Vec<_>>>()?;
    if c.iter().map(hs_norm).sum::<f64>() > 1.0 + NORM_SLACK {
        return Err(invalid("C", "sum of norms ≤ 1"));
    }
    if !(p.gamma >= 0.0) {
        return Err(invalid("gamma", ">= 0"));
    }
    PerturbationSpec::new(p.alpha, p.beta, p.gamma, htilde, ltilde, c)
        .map_err(|e| invalid("perturbation", &e.to_string()))
}

fn build_feedback(
    f: &FeedbackConfig,
    nominal: &NominalModel,
    channels: &[ChannelConfig],
    pert: Option<&PerturbationSpec>,
    tol: &Tolerances,
) -> Result<(CoupledSpec, DensityMatrix)> {
    let law = FeedbackLaw::new(f.a, f.b, f.eps1, f.eps2)
        .map_err(|_| invalid("feedback", "a > 0, b >= 1, 0 < eps1 < eps2 < 1"))?;
    let nd = NonDemolitionModel::from_nominal(nominal, f.projector_dims.clone())
        .map_err(|e| invalid("projector_dims", &e.to_string()))?;
    let n = channels.len();
    let pick = |v: &Option<Vec<f64>>, name: &str, default: &dyn Fn(usize) -> f64| -> Result<Vec<f64>> {
        match v {
            Some(v) if v.len() == n => Ok(v.clone()),
            Some(_) => Err(invalid(name, "one value per channel")),
            None => Ok((0..n).map(default).collect()),
        }
    };
    let etahat = pick(&f.etahat, "etahat", &|k| channels[k].eta)?;
    let thetahat = pick(&f.thetahat, "thetahat", &|k| channels[k].theta.unwrap_or(1.0))?;
    let params: Vec<ChannelParams> = (0..n)
        .map(|k| ChannelParams {
            eta: channels[k].eta,
            theta: channels[k].theta.unwrap_or(1.0),
            etahat: etahat[k],
            thetahat: thetahat[k],
        })
        .collect();
    let fp = FilterParams::new(params).map_err(|e| invalid("etahat", &e.to_string()))?;
    let dim = nominal.dim();
    let pert = match pert {
        Some(p) => p.clone(),
        None => PerturbationSpec::zero(dim, n),
    };
    let sh0 = match &f.filter_state {
        Some(m) => state("filter_state", m, dim, tol)?,
        None => DensityMatrix::maximally_mixed(dim),
    };
    if !sh0.is_positive_definite() {
        return Err(invalid("filter_state", "positive definite"));
    }
    Ok((CoupledSpec { nd, fp, pert, law }, sh0))
}
