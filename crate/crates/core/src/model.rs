//! Nominal and perturbed stochastic master equation models and their vector
//! fields.
//!
//! Vectorization is column-stacking throughout: `vec(X)[i + j·d] = X[i, j]`.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::qcore::{check_dim, hs_norm, CMatrix, DensityMatrix, QOperator, SubspaceSplit, C64, I, ONE, ZERO};

/// Slack on the unit-norm caps of a perturbation.
const NORM_CAP_TOL: f64 = 1e-9;
const HERM_TOL: f64 = 1e-9;

/// A measured dissipation channel `(L_k, η_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub l: QOperator,
    pub eta: f64,
}

impl Channel {
    pub fn new(l: QOperator, eta: f64) -> Self {
        Self { l, eta }
    }
}

/// `dρ = 𝓛_u(ρ)dt + Σ √η_k 𝓖_{L_k}(ρ) dW_k` with control Hamiltonian `H₀ + uH₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalModel {
    h0: QOperator,
    h1: QOperator,
    channels: Vec<Channel>,
    split: SubspaceSplit,
}

impl NominalModel {
    pub fn new(h0: QOperator, h1: QOperator, channels: Vec<Channel>, split: SubspaceSplit) -> Result<Self> {
        let d = split.dim();
        check_dim(d, h0.dim())?;
        check_dim(d, h1.dim())?;
        if h0.hermiticity_residual() > HERM_TOL {
            return Err(Error::ValidationError {
                field: "h0".into(),
                constraint: "Hermitian".into(),
            });
        }
        if h1.hermiticity_residual() > HERM_TOL {
            return Err(Error::ValidationError {
                field: "h1".into(),
                constraint: "Hermitian".into(),
            });
        }
        if channels.is_empty() {
            return Err(Error::ValidationError {
                field: "channels".into(),
                constraint: "at least one channel".into(),
            });
        }
        for ch in &channels {
            check_dim(d, ch.l.dim())?;
            if !(ch.eta > 0.0 && ch.eta <= 1.0) {
                return Err(Error::ValidationError {
                    field: "eta".into(),
                    constraint: "in (0,1]".into(),
                });
            }
        }
        Ok(Self {
            h0,
            h1,
            channels,
            split,
        })
    }

    pub fn h0(&self) -> &QOperator {
        &self.h0
    }

    pub fn h1(&self) -> &QOperator {
        &self.h1
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn split(&self) -> &SubspaceSplit {
        &self.split
    }

    pub fn dim(&self) -> usize {
        self.split.dim()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn jump_operators(&self) -> Vec<QOperator> {
        self.channels.iter().map(|c| c.l.clone()).collect()
    }

    /// `H₀ + uH₁`.
    pub fn hamiltonian(&self, u: f64) -> QOperator {
        QOperator::from_matrix_unchecked(self.h0.matrix() + self.h1.matrix() * C64::new(u, 0.0))
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"nominal");
        h.update((self.split.dim_s() as u64).to_le_bytes());
        h.update((self.split.dim_r() as u64).to_le_bytes());
        hash_matrix(&mut h, self.h0.matrix());
        hash_matrix(&mut h, self.h1.matrix());
        for ch in &self.channels {
            hash_matrix(&mut h, ch.l.matrix());
            h.update(ch.eta.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn hash_matrix(h: &mut Sha256, m: &CMatrix) {
    h.update((m.nrows() as u64).to_le_bytes());
    for z in m.iter() {
        h.update(z.re.to_bits().to_le_bytes());
        h.update(z.im.to_bits().to_le_bytes());
    }
}

/// Perturbation `(α, β, γ, H̃₀, L̃_k, C_j)` with `‖H̃₀‖ ≤ 1`, `‖L̃_k‖ ≤ 1`, `Σ‖C_j‖ ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub htilde: QOperator,
    pub ltilde: Vec<QOperator>,
    pub c: Vec<QOperator>,
}

impl PerturbationSpec {
    pub fn new(
        alpha: f64,
        beta: f64,
        gamma: f64,
        htilde: QOperator,
        ltilde: Vec<QOperator>,
        c: Vec<QOperator>,
    ) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !v.is_finite() {
                return Err(Error::ValidationError {
                    field: name.into(),
                    constraint: "finite".into(),
                });
            }
        }
        if gamma < 0.0 {
            return Err(Error::ValidationError {
                field: "gamma".into(),
                constraint: ">= 0".into(),
            });
        }
        let d = htilde.dim();
        if htilde.hermiticity_residual() > HERM_TOL {
            return Err(Error::ValidationError {
                field: "Htilde".into(),
                constraint: "Hermitian".into(),
            });
        }
        if hs_norm(&htilde) > 1.0 + NORM_CAP_TOL {
            return Err(Error::ValidationError {
                field: "Htilde".into(),
                constraint: "norm <= 1".into(),
            });
        }
        for l in &ltilde {
            check_dim(d, l.dim())?;
            if hs_norm(l) > 1.0 + NORM_CAP_TOL {
                return Err(Error::ValidationError {
                    field: "Ltilde".into(),
                    constraint: "norm <= 1".into(),
                });
            }
        }
        for cj in &c {
            check_dim(d, cj.dim())?;
        }
        if c.iter().map(hs_norm).sum::<f64>() > 1.0 + NORM_CAP_TOL {
            return Err(Error::ValidationError {
                field: "C".into(),
                constraint: "sum of norms <= 1".into(),
            });
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            htilde,
            ltilde,
            c,
        })
    }

    /// The vanishing perturbation for a model of dimension `dim` with `n` channels.
    pub fn zero(dim: usize, n: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            htilde: QOperator::zeros(dim),
            ltilde: vec![QOperator::zeros(dim); n],
            c: Vec::new(),
        }
    }

    /// Same operators with new intensities.
    pub fn with_intensities(&self, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        Self::new(
            alpha,
            beta,
            gamma,
            self.htilde.clone(),
            self.ltilde.clone(),
            self.c.clone(),
        )
    }

    pub fn dim(&self) -> usize {
        self.htilde.dim()
    }

    pub(crate) fn check_against(&self, nominal: &NominalModel) -> Result<()> {
        check_dim(nominal.dim(), self.dim())?;
        if self.ltilde.len() != nominal.n_channels() {
            return Err(Error::ChannelCountMismatch {
                nominal: nominal.n_channels(),
                perturbation: self.ltilde.len(),
            });
        }
        Ok(())
    }

    /// `L̄_k = L_k + βL̃_k`.
    pub fn perturbed_jumps(&self, nominal: &NominalModel) -> Result<Vec<QOperator>> {
        self.check_against(nominal)?;
        let b = C64::new(self.beta, 0.0);
        Ok(nominal
            .channels()
            .iter()
            .zip(&self.ltilde)
            .map(|(ch, lt)| QOperator::from_matrix_unchecked(ch.l.matrix() + lt.matrix() * b))
            .collect())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"perturbation");
        for v in [self.alpha, self.beta, self.gamma] {
            h.update(v.to_bits().to_le_bytes());
        }
        hash_matrix(&mut h, self.htilde.matrix());
        h.update((self.ltilde.len() as u64).to_le_bytes());
        for l in &self.ltilde {
            hash_matrix(&mut h, l.matrix());
        }
        h.update((self.c.len() as u64).to_le_bytes());
        for c in &self.c {
            hash_matrix(&mut h, c.matrix());
        }
        hex::encode(h.finalize())
    }
}

/// Nominal model composed with a perturbation: `H̄₀ = H₀ + αH̃₀`, `L̄_k = L_k + βL̃_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedModel {
    nominal: NominalModel,
    pert: PerturbationSpec,
    hbar0: QOperator,
    lbar: Vec<QOperator>,
}

impl PerturbedModel {
    pub fn new(nominal: NominalModel, pert: PerturbationSpec) -> Result<Self> {
        let lbar = pert.perturbed_jumps(&nominal)?;
        let hbar0 =
            QOperator::from_matrix_unchecked(nominal.h0().matrix() + pert.htilde.matrix() * C64::new(pert.alpha, 0.0));
        Ok(Self {
            nominal,
            pert,
            hbar0,
            lbar,
        })
    }

    pub fn nominal(&self) -> &NominalModel {
        &self.nominal
    }

    pub fn pert(&self) -> &PerturbationSpec {
        &self.pert
    }

    pub fn hbar0(&self) -> &QOperator {
        &self.hbar0
    }

    pub fn lbar(&self) -> &[QOperator] {
        &self.lbar
    }

    /// `𝓛_u(ρ) + F_{α,β,γ}(ρ)`.
    pub fn drift_apply(&self, u: f64, rho: &QOperator) -> Result<QOperator> {
        let a = lindblad_apply(&self.nominal, u, rho)?;
        let f = perturbation_apply(&self.pert, &self.nominal, rho)?;
        Ok(QOperator::from_matrix_unchecked(a.matrix() + f.matrix()))
    }
}

pub(crate) fn commutator_term(h: &CMatrix, rho: &CMatrix) -> CMatrix {
    (h * rho - rho * h) * (-I)
}

pub(crate) fn dissipator_raw(l: &CMatrix, rho: &CMatrix) -> CMatrix {
    let ld = l.adjoint();
    let ldl = &ld * l;
    l * rho * &ld - (&ldl * rho + rho * &ldl) * C64::new(0.5, 0.0)
}

pub(crate) fn innovation_raw(l: &CMatrix, rho: &CMatrix) -> CMatrix {
    let lr = l * rho;
    let rl = rho * l.adjoint();
    let s = lr.trace() + (l.adjoint() * rho).trace();
    lr + rl - rho * s
}

/// `𝓓_L(ρ) = LρL* − ½L*Lρ − ½ρL*L`.
pub fn dissipator(l: &QOperator, rho: &QOperator) -> Result<QOperator> {
    check_dim(l.dim(), rho.dim())?;
    Ok(QOperator::from_matrix_unchecked(dissipator_raw(
        l.matrix(),
        rho.matrix(),
    )))
}

/// `𝓛_u(ρ) = −i[H₀ + uH₁, ρ] + Σ𝓓_{L_k}(ρ)`.
pub fn lindblad_apply(model: &NominalModel, u: f64, rho: &QOperator) -> Result<QOperator> {
    check_dim(model.dim(), rho.dim())?;
    let h = model.hamiltonian(u);
    let mut out = commutator_term(h.matrix(), rho.matrix());
    for ch in model.channels() {
        out += dissipator_raw(ch.l.matrix(), rho.matrix());
    }
    Ok(QOperator::from_matrix_unchecked(out))
}

/// `𝓖_L(ρ) = Lρ + ρL* − Tr((L + L*)ρ)ρ`.
pub fn innovation_gain(l: &QOperator, rho: &DensityMatrix) -> Result<QOperator> {
    check_dim(l.dim(), rho.dim())?;
    Ok(QOperator::from_matrix_unchecked(innovation_raw(
        l.matrix(),
        rho.matrix(),
    )))
}

/// `F_{α,β,γ}(ρ) = −i[αH̃₀, ρ] + Σ(𝓓_{L̄_k} − 𝓓_{L_k})(ρ) + γΣ𝓓_{C_j}(ρ)`.
pub fn perturbation_apply(pert: &PerturbationSpec, nominal: &NominalModel, rho: &QOperator) -> Result<QOperator> {
    pert.check_against(nominal)?;
    check_dim(nominal.dim(), rho.dim())?;
    let r = rho.matrix();
    let mut out = commutator_term(pert.htilde.matrix(), r) * C64::new(pert.alpha, 0.0);
    if pert.beta != 0.0 {
        for (lbar, ch) in pert.perturbed_jumps(nominal)?.iter().zip(nominal.channels()) {
            out += dissipator_raw(lbar.matrix(), r) - dissipator_raw(ch.l.matrix(), r);
        }
    }
    if pert.gamma != 0.0 {
        let g = C64::new(pert.gamma, 0.0);
        for c in &pert.c {
            out += dissipator_raw(c.matrix(), r) * g;
        }
    }
    Ok(QOperator::from_matrix_unchecked(out))
}

pub(crate) fn vec_index(i: usize, j: usize, d: usize) -> usize {
    i + j * d
}

/// Column-stacked matrix of a linear map on `d × d` matrices.
///
/// The map is sampled on the canonical basis, then replayed on a dense probe;
/// a mismatch beyond `1e-10` (relative) means the map is not linear.
pub fn vectorize_generator<F>(apply_fn: F, dim: usize) -> Result<CMatrix>
where
    F: Fn(&CMatrix) -> CMatrix,
{
    let n = dim * dim;
    let mut m = CMatrix::zeros(n, n);
    let mut e = CMatrix::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..dim {
            e[(i, j)] = ONE;
            let img = apply_fn(&e);
            e[(i, j)] = ZERO;
            if img.nrows() != dim || img.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: img.nrows(),
                });
            }
            let col = vec_index(i, j, dim);
            for q in 0..dim {
                for p in 0..dim {
                    m[(vec_index(p, q, dim), col)] = img[(p, q)];
                }
            }
        }
    }
    let at_zero = apply_fn(&CMatrix::zeros(dim, dim)).norm();
    if at_zero > 1e-10 {
        return Err(Error::NonLinearityDetected(at_zero));
    }
    for shift in [0.0, 1.7] {
        let probe = CMatrix::from_fn(dim, dim, |i, j| {
            let k = (i * dim + j) as f64;
            C64::new((1.3 * k + 0.7 + shift).sin(), (2.1 * k + 0.2 - shift).cos())
        });
        let direct = apply_fn(&probe);
        let via = unvec(&(&m * vectorize(&probe)), dim);
        let err = (&direct - &via).norm();
        if !(err <= 1e-10 * (1.0 + direct.norm())) {
            return Err(Error::NonLinearityDetected(err));
        }
    }
    Ok(m)
}

pub fn vectorize(x: &CMatrix) -> nalgebra::DVector<C64> {
    nalgebra::DVector::from_column_slice(x.as_slice())
}

pub fn unvec(v: &nalgebra::DVector<C64>, dim: usize) -> CMatrix {
    CMatrix::from_column_slice(dim, dim, v.as_slice())
}
