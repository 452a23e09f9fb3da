//! Dissipation-induced decomposition of the complement of an invariant
//! subspace, the global asymptotic stability verdict it yields, and a
//! sampled genericity scan over parametric model families.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invariance::invariance_residuals;
use crate::qcore::{kernel_split, CMatrix, QOperator, SubspaceSplit, C64, I};
use crate::sde::noise::NoiseStream;

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Relative tolerance on the invariance precondition.
const INVARIANCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DidDecomposition {
    /// `[dim 𝓗_S, dim 𝓗_T¹, …]`.
    pub basin_dims: Vec<usize>,
    /// Unitary `B` with `B·x` the DID coordinates of `x`.
    pub basis_change: QOperator,
    pub gas: bool,
    /// Iteration at which an invariant remainder was found.
    pub failure_stage: Option<usize>,
    /// Dimension of that invariant remainder (0 when `gas`).
    pub invariant_dim: usize,
    /// How each basin was split off: 'a', 'b', or 'c'.
    pub stage_cases: Vec<char>,
}

impl DidDecomposition {
    /// `B X B†`.
    pub fn transform(&self, x: &QOperator) -> QOperator {
        let b = self.basis_change.matrix();
        QOperator::from_matrix_unchecked(b * x.matrix() * b.adjoint())
    }
}

fn precondition(h: &QOperator, ls: &[QOperator], split: &SubspaceSplit) -> Result<()> {
    let refs: Vec<&CMatrix> = ls.iter().map(|l| l.matrix()).collect();
    let scale = 1.0 + h.matrix().norm() + ls.iter().map(|l| l.matrix().norm_squared()).sum::<f64>();
    let report = invariance_residuals(h.matrix(), &refs, split).with_tolerance(INVARIANCE_TOL * scale);
    if report.holds {
        Ok(())
    } else {
        Err(Error::NotInvariant(format!("failing clauses {:?}", report.failing())))
    }
}

/// Builds the decomposition for `(H, {L_k})` with target `𝓗_S`.
pub fn construct_did(
    h: &QOperator,
    ls: &[QOperator],
    split: &SubspaceSplit,
    rank_tol: f64,
) -> Result<DidDecomposition> {
    let n = split.dim();
    if h.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: h.dim(),
        });
    }
    for l in ls {
        if l.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: l.dim(),
            });
        }
    }
    precondition(h, ls, split)?;

    let mut u = CMatrix::identity(n, n);
    let mut s = split.dim_s();
    let mut basin_dims = vec![s];
    let mut stage_cases = Vec::new();
    let mut j = 0usize;
    loop {
        let r = n - s;
        let ut = u.adjoint();
        let hj = &ut * h.matrix() * &u;
        let lj: Vec<CMatrix> = ls.iter().map(|l| &ut * l.matrix() * &u).collect();

        let mut stacked = CMatrix::zeros(ls.len().max(1) * s, r);
        for (k, l) in lj.iter().enumerate() {
            stacked.view_mut((k * s, 0), (s, r)).copy_from(&l.view((0, s), (s, r)));
        }
        let split_p = kernel_split(&stacked, rank_tol)?;
        let kept = split_p.kernel.ncols();

        let (t_basis, r_basis, case) = if kept == 0 {
            (CMatrix::identity(r, r), CMatrix::zeros(r, 0), 'a')
        } else if kept < r {
            (split_p.complement, split_p.kernel, 'b')
        } else {
            let mut lt = hj.view((0, s), (s, r)) * (-I);
            for l in &lj {
                let lq = l.view((s, 0), (r, s));
                let lr = l.view((s, s), (r, r));
                lt -= lq.adjoint() * lr * C64::new(0.5, 0.0);
            }
            let split_c = kernel_split(&lt, rank_tol)?;
            if split_c.kernel.ncols() == r {
                let b = QOperator::from_matrix_unchecked(u.adjoint());
                return Ok(DidDecomposition {
                    basin_dims,
                    basis_change: b,
                    gas: false,
                    failure_stage: Some(j),
                    invariant_dim: r,
                    stage_cases,
                });
            }
            if split_c.kernel.ncols() == 0 {
                (CMatrix::identity(r, r), CMatrix::zeros(r, 0), 'c')
            } else {
                (split_c.complement, split_c.kernel, 'c')
            }
        };

        let t = t_basis.ncols();
        let ur = u.columns(s, r).into_owned();
        let mut next = CMatrix::zeros(n, n);
        next.columns_mut(0, s).copy_from(&u.columns(0, s));
        next.columns_mut(s, t).copy_from(&(&ur * &t_basis));
        if r_basis.ncols() > 0 {
            next.columns_mut(s + t, r - t).copy_from(&(&ur * &r_basis));
        }
        u = next;
        s += t;
        basin_dims.push(t);
        stage_cases.push(case);
        if s == n {
            return Ok(DidDecomposition {
                basin_dims,
                basis_change: QOperator::from_matrix_unchecked(u.adjoint()),
                gas: true,
                failure_stage: None,
                invariant_dim: 0,
                stage_cases,
            });
        }
        j += 1;
    }
}

/// Axis-aligned box `[lo_i, hi_i]` sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument(
                "parameter box needs lo <= hi componentwise".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    /// The `index`-th sample of the stream keyed by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> Vec<f64> {
        let mut s = NoiseStream::new(seed, index);
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| a + (b - a) * s.uniform())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub fraction: f64,
    pub n_samples: usize,
    pub gas_count: usize,
    /// Samples whose rank decisions fell in the ambiguity band; counted as not GAS.
    pub ambiguous: usize,
    /// Failure stage → number of samples.
    pub failure_histogram: BTreeMap<usize, usize>,
}

enum Outcome {
    Gas,
    Failed(usize),
    Ambiguous,
}

/// Fraction of sampled parameters whose model is globally asymptotically
/// stable toward `𝓗_S`.
pub fn genericity_scan<F>(
    family: F,
    split: &SubspaceSplit,
    sampler: &ParamBox,
    n_samples: usize,
    seed: u64,
    rank_tol: f64,
) -> Result<ScanResult>
where
    F: Fn(&[f64]) -> Result<(QOperator, Vec<QOperator>)> + Sync,
{
    let outcomes: Vec<Result<Outcome>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let x = sampler.sample(seed, i as u64);
            let wrap = |e: Error| Error::Sample {
                x: x.clone(),
                source: Box::new(e),
            };
            let (h, ls) = family(&x).map_err(wrap)?;
            match construct_did(&h, &ls, split, rank_tol) {
                Ok(d) if d.gas => Ok(Outcome::Gas),
                Ok(d) => Ok(Outcome::Failed(d.failure_stage.unwrap_or(0))),
                Err(Error::RankAmbiguous { .. }) => Ok(Outcome::Ambiguous),
                Err(e) => Err(wrap(e)),
            }
        })
        .collect();
    let mut gas_count = 0;
    let mut ambiguous = 0;
    let mut failure_histogram = BTreeMap::new();
    for o in outcomes {
        match o? {
            Outcome::Gas => gas_count += 1,
            Outcome::Failed(j) => *failure_histogram.entry(j).or_insert(0) += 1,
            Outcome::Ambiguous => ambiguous += 1,
        }
    }
    let fraction = if n_samples == 0 {
        0.0
    } else {
        gas_count as f64 / n_samples as f64
    };
    Ok(ScanResult {
        fraction,
        n_samples,
        gas_count,
        ambiguous,
        failure_histogram,
    })
}
