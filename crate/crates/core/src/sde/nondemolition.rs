//! Block-diagonal (non-demolition) models, filter parameters, the feedback
//! law, and the structural assumption checks used by the feedback results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Channel, NominalModel};
use crate::qcore::{numerical_rank, CMatrix, DensityMatrix, QOperator, SubspaceSplit, C64};

/// Residual allowed when extracting block scalars from a nominal model.
const EXTRACTION_TOL: f64 = 1e-12;

/// `H₀ = Σ_j h_j Π_j`, `L_k = Σ_j l_{k,j} Π_j` for consecutive coordinate
/// blocks `Π₀ (= 𝓗_S), Π₁, …, Π_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonDemolitionModel {
    projector_dims: Vec<usize>,
    h: Vec<f64>,
    l: Vec<Vec<C64>>,
    h1: QOperator,
}

impl NonDemolitionModel {
    pub fn new(projector_dims: Vec<usize>, h: Vec<f64>, l: Vec<Vec<C64>>, h1: QOperator) -> Result<Self> {
        if projector_dims.len() < 2 || projector_dims.contains(&0) {
            return Err(Error::ValidationError {
                field: "projector_dims".into(),
                constraint: "at least two positive block sizes".into(),
            });
        }
        let blocks = projector_dims.len();
        if h.len() != blocks {
            return Err(Error::ValidationError {
                field: "h".into(),
                constraint: format!("{blocks} entries"),
            });
        }
        if l.is_empty() || l.iter().any(|row| row.len() != blocks) {
            return Err(Error::ValidationError {
                field: "l".into(),
                constraint: format!("at least one channel with {blocks} entries"),
            });
        }
        let dim: usize = projector_dims.iter().sum();
        if h1.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: h1.dim(),
            });
        }
        if h1.hermiticity_residual() > 1e-9 {
            return Err(Error::ValidationError {
                field: "h1".into(),
                constraint: "Hermitian".into(),
            });
        }
        if h.iter().any(|x| !x.is_finite()) || l.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            projector_dims,
            h,
            l,
            h1,
        })
    }

    /// Reads `h_j` and `l_{k,j}` off a nominal model whose operators are
    /// block-scalar in the given projector chain.
    pub fn from_nominal(nominal: &NominalModel, projector_dims: Vec<usize>) -> Result<Self> {
        let dim: usize = projector_dims.iter().sum();
        if dim != nominal.dim() {
            return Err(Error::DimensionMismatch {
                expected: nominal.dim(),
                got: dim,
            });
        }
        if projector_dims[0] != nominal.split().dim_s() {
            return Err(Error::ValidationError {
                field: "projector_dims".into(),
                constraint: "first block equals dim_S".into(),
            });
        }
        let offsets = offsets(&projector_dims);
        let scalars = |m: &CMatrix, name: &str| -> Result<Vec<C64>> {
            let vals: Vec<C64> = offsets.iter().map(|&o| m[(o, o)]).collect();
            let rebuilt = block_scalar(&projector_dims, &vals);
            let res = (&rebuilt - m).norm();
            if res > EXTRACTION_TOL * (1.0 + m.norm()) {
                return Err(Error::ValidationError {
                    field: name.into(),
                    constraint: format!("block-scalar in the projector chain (residual {res:.3e})"),
                });
            }
            Ok(vals)
        };
        let h: Vec<f64> = scalars(nominal.h0().matrix(), "h0")?.iter().map(|z| z.re).collect();
        let mut l = Vec::new();
        for ch in nominal.channels() {
            l.push(scalars(ch.l.matrix(), "l")?);
        }
        Self::new(projector_dims, h, l, nominal.h1().clone())
    }

    pub fn projector_dims(&self) -> &[usize] {
        &self.projector_dims
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    /// `l_{k,j}`, channel-major.
    pub fn l(&self) -> &[Vec<C64>] {
        &self.l
    }

    pub fn h1(&self) -> &QOperator {
        &self.h1
    }

    pub fn dim(&self) -> usize {
        self.projector_dims.iter().sum()
    }

    pub fn n_channels(&self) -> usize {
        self.l.len()
    }

    pub fn split(&self) -> SubspaceSplit {
        let ds = self.projector_dims[0];
        SubspaceSplit::new(ds, self.dim() - ds).expect("validated block sizes")
    }

    pub fn h0(&self) -> QOperator {
        let vals: Vec<C64> = self.h.iter().map(|&x| C64::new(x, 0.0)).collect();
        QOperator::from_matrix_unchecked(block_scalar(&self.projector_dims, &vals))
    }

    pub fn jump(&self, k: usize) -> QOperator {
        QOperator::from_matrix_unchecked(block_scalar(&self.projector_dims, &self.l[k]))
    }

    /// Projector onto the `j`-th block.
    pub fn projector(&self, j: usize) -> QOperator {
        let mut vals = vec![C64::new(0.0, 0.0); self.projector_dims.len()];
        vals[j] = C64::new(1.0, 0.0);
        QOperator::from_matrix_unchecked(block_scalar(&self.projector_dims, &vals))
    }

    /// The nominal model with efficiencies `etas`.
    pub fn to_nominal(&self, etas: &[f64]) -> Result<NominalModel> {
        if etas.len() != self.n_channels() {
            return Err(Error::ChannelCountMismatch {
                nominal: self.n_channels(),
                perturbation: etas.len(),
            });
        }
        let channels = (0..self.n_channels())
            .map(|k| Channel::new(self.jump(k), etas[k]))
            .collect();
        NominalModel::new(self.h0(), self.h1.clone(), channels, self.split())
    }
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    dims.iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect()
}

fn block_scalar(dims: &[usize], vals: &[C64]) -> CMatrix {
    let n: usize = dims.iter().sum();
    let mut m = CMatrix::zeros(n, n);
    let mut o = 0;
    for (d, v) in dims.iter().zip(vals) {
        for i in o..o + d {
            m[(i, i)] = *v;
        }
        o += d;
    }
    m
}

/// True and estimated measurement parameters of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub eta: f64,
    pub theta: f64,
    pub etahat: f64,
    pub thetahat: f64,
}

impl ChannelParams {
    /// `χ = √(ηθ / η̂θ̂)`.
    pub fn chi(&self) -> f64 {
        (self.eta * self.theta / (self.etahat * self.thetahat)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub channels: Vec<ChannelParams>,
}

impl FilterParams {
    pub fn new(channels: Vec<ChannelParams>) -> Result<Self> {
        for c in &channels {
            for (name, v) in [("eta", c.eta), ("etahat", c.etahat)] {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::ValidationError {
                        field: name.into(),
                        constraint: "in (0,1]".into(),
                    });
                }
            }
            for (name, v) in [("theta", c.theta), ("thetahat", c.thetahat)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::ValidationError {
                        field: name.into(),
                        constraint: "> 0".into(),
                    });
                }
            }
        }
        Ok(Self { channels })
    }

    /// The same `(η, θ, η̂, θ̂)` for every channel.
    pub fn uniform(n: usize, eta: f64, theta: f64, etahat: f64, thetahat: f64) -> Result<Self> {
        Self::new(vec![
            ChannelParams {
                eta,
                theta,
                etahat,
                thetahat
            };
            n
        ])
    }

    pub fn chi(&self) -> Vec<f64> {
        self.channels.iter().map(ChannelParams::chi).collect()
    }
}

/// `u(σ̂) = a·x^b·f(x)` with `x = 1 − Tr(Π₀σ̂)` and a sine smoothstep `f`
/// rising from 0 at `ε₁` to 1 at `ε₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLaw {
    pub a: f64,
    pub b: f64,
    pub eps1: f64,
    pub eps2: f64,
}

impl FeedbackLaw {
    pub fn new(a: f64, b: f64, eps1: f64, eps2: f64) -> Result<Self> {
        let law = Self { a, b, eps1, eps2 };
        if check_h1(&law) {
            Ok(law)
        } else {
            Err(Error::ValidationError {
                field: "feedback".into(),
                constraint: "a > 0, b >= 1, 0 < eps1 < eps2 < 1".into(),
            })
        }
    }

    pub fn smoothstep(&self, x: f64) -> f64 {
        if x < self.eps1 {
            0.0
        } else if x < self.eps2 {
            let arg = std::f64::consts::PI * (2.0 * x - self.eps1 - self.eps2) / (2.0 * (self.eps2 - self.eps1));
            0.5 * arg.sin() + 0.5
        } else {
            1.0
        }
    }

    /// Control value at outside population `x`.
    pub fn eval_population(&self, x: f64) -> f64 {
        let f = self.smoothstep(x);
        if f == 0.0 {
            0.0
        } else {
            self.a * x.max(0.0).powf(self.b) * f
        }
    }
}

pub fn feedback_law_eval(law: &FeedbackLaw, sigma_hat: &DensityMatrix, split: &SubspaceSplit) -> Result<f64> {
    crate::qcore::check_dim(split.dim(), sigma_hat.dim())?;
    let x = crate::qcore::outside_population_raw(sigma_hat.matrix(), split.dim_s());
    Ok(law.eval_population(x))
}

/// The law is continuously differentiable, vanishes on `B_{ε₁}`, and equals
/// `a ≠ 0` on states supported outside `𝓗_S`, whenever its parameters are
/// ordered.
pub fn check_h1(law: &FeedbackLaw) -> bool {
    law.a > 0.0 && law.b >= 1.0 && 0.0 < law.eps1 && law.eps1 < law.eps2 && law.eps2 < 1.0 && law.a.is_finite()
}

/// Every super-diagonal block of `H₁` in the projector chain has full rank.
pub fn check_h2(nd: &NonDemolitionModel, rank_tol: f64) -> Result<bool> {
    let dims = nd.projector_dims();
    let offs = offsets(dims);
    let m = nd.h1().matrix();
    for j in 1..dims.len() {
        let block = m.view((offs[j - 1], offs[j]), (dims[j - 1], dims[j])).into_owned();
        if numerical_rank(&block, rank_tol)? < dims[j - 1].min(dims[j]) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `(C̄_k, C̲_k)` for channel `k`.
pub fn channel_spreads(nd: &NonDemolitionModel, k: usize) -> (f64, f64) {
    let row = &nd.l()[k];
    let l0 = row[0].re;
    let rest = row[1..].iter().map(|z| z.re);
    let min = rest.clone().fold(f64::INFINITY, f64::min);
    let max = rest.fold(f64::NEG_INFINITY, f64::max);
    (l0 - min, l0 - max)
}

pub fn check_a1(nd: &NonDemolitionModel) -> Vec<bool> {
    (0..nd.n_channels())
        .map(|k| {
            let (cbar, cunder) = channel_spreads(nd, k);
            cbar < 0.0 || cunder > 0.0
        })
        .collect()
}

/// Smallest `l ≤ l_max` at which `M_{l,ξ}` has full rank for every basis
/// vector `ξ` of `𝓗_S`.
pub fn check_a2(nd: &NonDemolitionModel, l_max: usize, rank_tol: f64) -> Result<(bool, Option<usize>)> {
    if l_max == 0 {
        return Err(Error::InvalidArgument("l_max must be at least 1".into()));
    }
    let n = nd.dim();
    let h1 = nd.h1().matrix();
    let ls_adj: Vec<CMatrix> = (0..nd.n_channels()).map(|k| nd.jump(k).matrix().adjoint()).collect();
    let per_power = 1 + ls_adj.len();
    'levels: for l in 1..=l_max {
        for s in 0..nd.projector_dims()[0] {
            let mut cols = CMatrix::zeros(n, 1 + l * per_power);
            let mut v = CMatrix::zeros(n, 1);
            v[(s, 0)] = C64::new(1.0, 0.0);
            cols.set_column(0, &v.column(0));
            let mut c = 1;
            for _ in 0..l {
                v = h1 * &v;
                cols.set_column(c, &v.column(0));
                c += 1;
                for la in &ls_adj {
                    cols.set_column(c, &(la * &v).column(0));
                    c += 1;
                }
            }
            if numerical_rank(&cols, rank_tol)? < n {
                continue 'levels;
            }
        }
        return Ok((true, Some(l)));
    }
    Ok((false, None))
}
