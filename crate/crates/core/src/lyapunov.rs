//! Reduced generators on the complement block, spectral abscissas, Lyapunov
//! certificates, and closed-form robustness constants.

use nalgebra::linalg::{Schur, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invariance::{check_condition_ar, invariance_residuals};
use crate::model::{unvec, vectorize, vectorize_generator, NominalModel, PerturbationSpec, PerturbedModel};
use crate::qcore::{
    blocks, hermitian_eigenvalues, hermitian_part, hs_norm, CMatrix, DensityMatrix, QOperator, SubspaceSplit, C64, I,
};
use crate::sde::nondemolition::{channel_spreads, FilterParams, NonDemolitionModel};

/// Upper bound on `λ_max(𝓛_R*(K_R) + cK_R)` accepted for a certificate.
pub const CERTIFICATE_TOL: f64 = 1e-8;

/// Relative tolerance on the invariance precondition of a reduction.
const INVARIANCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Nominal,
    Perturbed { alpha: f64, beta: f64, gamma: f64 },
}

/// A linear map on `𝓑(𝓗_R)` as a column-stacked `dim_R² × dim_R²` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedGenerator {
    pub matrix: CMatrix,
    pub dim_r: usize,
    pub provenance: Provenance,
}

impl ReducedGenerator {
    /// Applies the map to `X ∈ 𝓑(𝓗_R)`.
    pub fn apply(&self, x: &CMatrix) -> CMatrix {
        unvec(&(&self.matrix * vectorize(x)), self.dim_r)
    }

    /// Applies the Hilbert–Schmidt adjoint map.
    pub fn apply_adjoint(&self, x: &CMatrix) -> CMatrix {
        unvec(&(self.matrix.adjoint() * vectorize(x)), self.dim_r)
    }
}

/// `𝔇_A(ρ_R) = A_R ρ_R A_R* − ½{A_P*A_P + A_R*A_R, ρ_R}`.
fn reduced_dissipator(a: &CMatrix, ds: usize, rho_r: &CMatrix) -> CMatrix {
    let b = blocks(a, ds);
    let g = b.p.adjoint() * &b.p + b.r.adjoint() * &b.r;
    &b.r * rho_r * b.r.adjoint() - (&g * rho_r + rho_r * &g) * C64::new(0.5, 0.0)
}

/// `ρ_R ↦ −i[H_R, ρ_R] + Σ𝔇_{L_k}(ρ_R) + Σ w_j 𝔇_{C_j}(ρ_R)`.
pub fn reduced_generator(
    h: &QOperator,
    ls: &[QOperator],
    extra_dissipators: &[(f64, QOperator)],
    split: &SubspaceSplit,
) -> Result<ReducedGenerator> {
    let ds = split.dim_s();
    let dr = split.dim_r();
    let mut ops: Vec<CMatrix> = ls.iter().map(|l| l.matrix().clone()).collect();
    for (w, c) in extra_dissipators {
        if *w < 0.0 {
            return Err(Error::InvalidArgument("dissipator weights must be nonnegative".into()));
        }
        ops.push(c.matrix() * C64::new(w.sqrt(), 0.0));
    }
    for m in std::iter::once(h.matrix()).chain(ops.iter()) {
        crate::qcore::check_dim(split.dim(), m.nrows())?;
    }
    let refs: Vec<&CMatrix> = ops.iter().collect();
    let scale = 1.0 + h.matrix().norm() + ops.iter().map(|l| l.norm_squared()).sum::<f64>();
    let report = invariance_residuals(h.matrix(), &refs, split).with_tolerance(INVARIANCE_TOL * scale);
    if !report.holds {
        return Err(Error::NotInvariant(format!("failing clauses {:?}", report.failing())));
    }
    let hr = blocks(h.matrix(), ds).r;
    let matrix = vectorize_generator(
        |x| {
            let mut out = (&hr * x - x * &hr) * (-I);
            for a in &ops {
                out += reduced_dissipator(a, ds, x);
            }
            out
        },
        dr,
    )?;
    Ok(ReducedGenerator {
        matrix,
        dim_r: dr,
        provenance: Provenance::Nominal,
    })
}

/// `𝓛_R` of a nominal model at constant control `u`.
pub fn nominal_reduced_generator(model: &NominalModel, u: f64) -> Result<ReducedGenerator> {
    reduced_generator(&model.hamiltonian(u), &model.jump_operators(), &[], model.split())
}

/// `𝓛̄_R` of a perturbed model at constant control `u`.
pub fn perturbed_reduced_generator(pm: &PerturbedModel, u: f64) -> Result<ReducedGenerator> {
    let pert = pm.pert();
    let h = QOperator::from_matrix_unchecked(pm.hbar0().matrix() + pm.nominal().h1().matrix() * C64::new(u, 0.0));
    let extra: Vec<(f64, QOperator)> = pert.c.iter().map(|c| (pert.gamma, c.clone())).collect();
    let mut g = reduced_generator(&h, pm.lbar(), &extra, pm.nominal().split())?;
    g.provenance = Provenance::Perturbed {
        alpha: pert.alpha,
        beta: pert.beta,
        gamma: pert.gamma,
    };
    Ok(g)
}

/// `min{−Re x : x ∈ sp(𝓛_R)}`.
pub fn spectral_abscissa(gen: &ReducedGenerator) -> Result<f64> {
    let schur = Schur::try_new(gen.matrix.clone(), f64::EPSILON, 0).ok_or(Error::EigenSolverFailure)?;
    let eig = schur.eigenvalues().ok_or(Error::EigenSolverFailure)?;
    let lambda = eig.iter().map(|z| -z.re).fold(f64::INFINITY, f64::min);
    if lambda.is_finite() {
        Ok(lambda)
    } else {
        Err(Error::EigenSolverFailure)
    }
}

/// `K_R ≻ 0` with `𝓛_R*(K_R) ⪯ −cK_R`.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub k_r: QOperator,
    pub c: f64,
    pub epsilon: f64,
    pub lambda: f64,
}

impl Certificate {
    pub fn k_min_eig(&self) -> f64 {
        hermitian_eigenvalues(self.k_r.matrix())[0]
    }

    pub fn k_norm(&self) -> f64 {
        hs_norm(&self.k_r)
    }

    /// `λ_max(𝓛_R*(K_R) + cK_R)` for the generator the certificate was built from.
    pub fn replay(&self, gen: &ReducedGenerator) -> f64 {
        let lhs = gen.apply_adjoint(self.k_r.matrix()) + self.k_r.matrix() * C64::new(self.c, 0.0);
        *hermitian_eigenvalues(&hermitian_part(&lhs)).last().expect("nonempty")
    }
}

fn solve_shifted(gen: &ReducedGenerator, c: f64) -> Result<CMatrix> {
    let n = gen.dim_r * gen.dim_r;
    let a = gen.matrix.adjoint() + CMatrix::identity(n, n) * C64::new(c, 0.0);
    let rhs = -vectorize(&CMatrix::identity(gen.dim_r, gen.dim_r));
    let x = LU::new(a.clone()).solve(&rhs).ok_or(Error::SingularSystem)?;
    let residual = (&a * &x - &rhs).norm();
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) || residual > 1e-8 * (1.0 + x.norm()) || x.norm() > 1e12
    {
        return Err(Error::SingularSystem);
    }
    Ok(hermitian_part(&unvec(&x, gen.dim_r)))
}

/// Solves `(𝓛_R* + (λ − ε))K_R = −I`, retrying with `ε(1 + 10⁻³)` up to
/// three times if the shifted map is singular. `epsilon` defaults to `λ/10`.
pub fn synthesize_certificate(gen: &ReducedGenerator, epsilon: Option<f64>) -> Result<Certificate> {
    let lambda = spectral_abscissa(gen)?;
    let mut eps = epsilon.unwrap_or(lambda / 10.0);
    if !(lambda > 0.0) || !(eps > 0.0) || lambda <= eps {
        return Err(Error::NotStable { lambda, epsilon: eps });
    }
    let mut attempt = 0;
    let k = loop {
        match solve_shifted(gen, lambda - eps) {
            Ok(k) => break k,
            Err(Error::SingularSystem) if attempt < 3 => {
                attempt += 1;
                eps *= 1.0 + 1e-3;
                if lambda <= eps {
                    return Err(Error::NotStable { lambda, epsilon: eps });
                }
            }
            Err(e) => return Err(e),
        }
    };
    let cert = Certificate {
        k_r: QOperator::from_matrix_unchecked(k),
        c: lambda - eps,
        epsilon: eps,
        lambda,
    };
    let kmin = cert.k_min_eig();
    if !(kmin > 0.0) {
        return Err(Error::CertificateInvalid(format!("K_R minimum eigenvalue {kmin:.3e}")));
    }
    let top = cert.replay(gen);
    if top > CERTIFICATE_TOL {
        return Err(Error::CertificateInvalid(format!(
            "replay maximum eigenvalue {top:.3e}"
        )));
    }
    Ok(cert)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub r_const: f64,
    /// `R‖K_R‖/λ_min(K_R)`.
    pub threshold: f64,
    pub preserved: bool,
}

/// `R = 2(|α| + |β|Σ(2‖L_{k,R}‖ + ‖L_{k,P}‖) + nβ² + γ)`; exponential
/// stability survives when `c > R‖K_R‖/λ_min(K_R)`.
pub fn perturbation_margin(cert: &Certificate, nominal: &NominalModel, pert: &PerturbationSpec) -> Result<Margin> {
    pert.check_against(nominal)?;
    let ar = check_condition_ar(nominal, pert);
    if !ar.holds {
        return Err(Error::ConditionARViolated(format!(
            "failing clauses {:?}",
            ar.failing()
        )));
    }
    let ds = nominal.split().dim_s();
    let sum: f64 = nominal
        .channels()
        .iter()
        .map(|ch| {
            let b = blocks(ch.l.matrix(), ds);
            2.0 * b.r.norm() + b.p.norm()
        })
        .sum();
    let n = nominal.n_channels() as f64;
    let r_const = 2.0 * (pert.alpha.abs() + pert.beta.abs() * sum + n * pert.beta * pert.beta + pert.gamma);
    let threshold = r_const * cert.k_norm() / cert.k_min_eig();
    Ok(Margin {
        r_const,
        threshold,
        preserved: cert.c > threshold,
    })
}

/// Mean and probability envelopes for `d₀(σ_t)` under a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IssEnvelope {
    /// `D = 2‖K_R‖(|α| + n|β|² + 2|β|𝔏 + γ)`.
    pub d_const: f64,
    pub c: f64,
    pub k_min_eig: f64,
    /// `Tr(Kσ₀)` with `K = diag(0, K_R)`.
    pub tr_k_sigma0: f64,
}

impl IssEnvelope {
    pub fn mean_bound(&self, t: f64) -> f64 {
        let e = (-self.c * t).exp();
        ((3.0 / self.k_min_eig) * (self.tr_k_sigma0 * e + self.d_const * (1.0 - e) / self.c)).sqrt()
    }

    /// `t → ∞` limit of [`Self::mean_bound`].
    pub fn stationary_bound(&self) -> f64 {
        (3.0 * self.d_const / (self.c * self.k_min_eig)).sqrt()
    }

    /// Lower bound on `ℙ(d₀(σ_t) < δ·mean_bound(t))`.
    pub fn prob_bound(&self, delta: f64) -> f64 {
        1.0 - 1.0 / delta
    }
}

pub fn iss_envelope(
    cert: &Certificate,
    nominal: &NominalModel,
    pert: &PerturbationSpec,
    sigma0: &DensityMatrix,
) -> Result<IssEnvelope> {
    pert.check_against(nominal)?;
    crate::qcore::check_dim(nominal.dim(), sigma0.dim())?;
    let ds = nominal.split().dim_s();
    let l_sum: f64 = nominal.channels().iter().map(|c| hs_norm(&c.l)).sum();
    let n = nominal.n_channels() as f64;
    let b = pert.beta.abs();
    let d_const = 2.0 * cert.k_norm() * (pert.alpha.abs() + n * b * b + 2.0 * b * l_sum + pert.gamma);
    let sigma_r = blocks(sigma0.matrix(), ds).r;
    let tr_k_sigma0 = (cert.k_r.matrix() * sigma_r).trace().re;
    Ok(IssEnvelope {
        d_const,
        c: cert.c,
        k_min_eig: cert.k_min_eig(),
        tr_k_sigma0,
    })
}

/// Per-channel constants of the feedback stabilization bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConstants {
    pub cbar: f64,
    pub cunder: f64,
    /// Defined only when the channel satisfies A1.
    pub chat: Option<f64>,
    pub cbreve: f64,
    /// Defined when `Ĉ` exists and `Re l₀ ≠ 0`.
    pub upsilon: Option<f64>,
    pub chi: f64,
    pub re_l0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConstants {
    pub channels: Vec<ChannelConstants>,
    /// `𝖢`, defined when every channel satisfies A1.
    pub c_thm: Option<f64>,
    /// `𝖪`, defined when every channel satisfies A1.
    pub k_thm: Option<f64>,
}

impl FeedbackConstants {
    fn chat(&self, k: usize) -> Result<f64> {
        self.channels[k].chat.ok_or(Error::A1Violated { channel: k })
    }

    fn upsilon(&self, k: usize) -> Result<f64> {
        self.chat(k)?;
        self.channels[k].upsilon.ok_or(Error::ZeroL0 { channel: k })
    }

    /// `𝖢 + 𝖪`, the decay rate bound.
    pub fn rate(&self) -> Result<f64> {
        for k in 0..self.channels.len() {
            self.chat(k)?;
        }
        Ok(self.c_thm.unwrap_or(0.0) + self.k_thm.unwrap_or(0.0))
    }
}

pub fn feedback_constants(nd: &NonDemolitionModel, fp: &FilterParams) -> Result<FeedbackConstants> {
    if fp.channels.len() != nd.n_channels() {
        return Err(Error::ChannelCountMismatch {
            nominal: nd.n_channels(),
            perturbation: fp.channels.len(),
        });
    }
    let mut channels = Vec::new();
    let mut c_sum = 0.0;
    let mut k_sum = 0.0;
    let mut all = true;
    for (k, p) in fp.channels.iter().enumerate() {
        let (cbar, cunder) = channel_spreads(nd, k);
        let re_l0 = nd.l()[k][0].re;
        let chat = if cbar < 0.0 {
            Some(cbar.abs())
        } else if cunder > 0.0 {
            Some(cunder.abs())
        } else {
            None
        };
        let cbreve = cbar.abs().max(cunder.abs());
        let chi = p.chi();
        let upsilon = match chat {
            Some(ch) if re_l0 != 0.0 => Some(ch * ch / (2.0 * cbreve * re_l0.abs())),
            _ => None,
        };
        match chat {
            Some(ch) => {
                let est = p.etahat * p.thetahat;
                k_sum += 4.0 * ch * ch * (p.eta * p.theta).min(est);
                c_sum += 4.0 * est * (ch * ch * (chi * chi).min(1.0) - 2.0 * cbreve * (re_l0 * (chi - 1.0)).abs());
            }
            None => all = false,
        }
        channels.push(ChannelConstants {
            cbar,
            cunder,
            chat,
            cbreve,
            upsilon,
            chi,
            re_l0,
        });
    }
    Ok(FeedbackConstants {
        channels,
        c_thm: all.then_some(c_sum),
        k_thm: all.then_some(k_sum),
    })
}

/// `χ > ½` and the sign-dependent inequality on `Re l₀`.
pub fn check_c1(fc: &FeedbackConstants) -> Result<Vec<bool>> {
    (0..fc.channels.len())
        .map(|k| {
            fc.chat(k)?;
            let ch = &fc.channels[k];
            let scale = 2.0 * ch.chi - 1.0;
            let ok = ch.chi > 0.5
                && if ch.cbar < 0.0 {
                    ch.re_l0 < scale * (ch.re_l0 - ch.cbar)
                } else {
                    ch.re_l0 > scale * (ch.re_l0 - ch.cunder)
                };
            Ok(ok)
        })
        .collect()
}

fn c2_family(fc: &FeedbackConstants, factor: f64) -> Result<Vec<bool>> {
    (0..fc.channels.len())
        .map(|k| {
            let ups = factor * fc.upsilon(k)?;
            let chi = fc.channels[k].chi;
            Ok((1.0 <= chi && chi <= 1.0 + ups) || (chi < 1.0 && ups * chi * chi + chi <= 1.0))
        })
        .collect()
}

/// `1 ≤ χ ≤ 1 + Υ` or `χ < 1` with `Υχ² + χ ≤ 1`.
pub fn check_c2(fc: &FeedbackConstants) -> Result<Vec<bool>> {
    c2_family(fc, 1.0)
}

/// As [`check_c2`] with `2Υ` in place of `Υ`.
pub fn check_c2_prime(fc: &FeedbackConstants) -> Result<Vec<bool>> {
    c2_family(fc, 2.0)
}

/// Everything the `certify` subcommand reports.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub lambda: f64,
    pub lambda_bar: f64,
    pub certificate: Certificate,
    pub k_spectrum: Vec<f64>,
    pub margin: Option<Margin>,
    pub envelope: IssEnvelope,
}

pub fn certificate_report(
    nominal: &NominalModel,
    pert: &PerturbationSpec,
    sigma0: &DensityMatrix,
    epsilon: Option<f64>,
) -> Result<CertificateReport> {
    let gen = nominal_reduced_generator(nominal, 0.0)?;
    let certificate = synthesize_certificate(&gen, epsilon)?;
    let pm = PerturbedModel::new(nominal.clone(), pert.clone())?;
    let lambda_bar = match perturbed_reduced_generator(&pm, 0.0) {
        Ok(g) => spectral_abscissa(&g)?,
        Err(Error::NotInvariant(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    let margin = match perturbation_margin(&certificate, nominal, pert) {
        Ok(m) => Some(m),
        Err(Error::ConditionARViolated(_)) => None,
        Err(e) => return Err(e),
    };
    let envelope = iss_envelope(&certificate, nominal, pert, sigma0)?;
    Ok(CertificateReport {
        lambda: certificate.lambda,
        lambda_bar,
        k_spectrum: hermitian_eigenvalues(certificate.k_r.matrix()),
        certificate,
        margin,
        envelope,
    })
}
