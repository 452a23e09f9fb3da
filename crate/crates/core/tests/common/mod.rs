//! Shared scenario builders for the integration tests.
#![allow(dead_code)]

use qsme_robust::model::{Channel, NominalModel, PerturbationSpec};
use qsme_robust::qcore::{CMatrix, DensityMatrix, QOperator, SubspaceSplit, C64};
use qsme_robust::sde::{CoupledSpec, FeedbackLaw, FilterParams, NonDemolitionModel};
use rand::rngs::StdRng;
use rand::Rng;

pub struct RandomModel {
    pub h: QOperator,
    pub ls: Vec<QOperator>,
    pub split: SubspaceSplit,
}

fn entry(rng: &mut StdRng) -> C64 {
    C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

/// Random `(H, {L_k})` leaving `𝓗_S` invariant. Roughly a third of the
/// models decouple `𝓗_R` from `𝓗_S` entirely and another third keep a
/// stationary pure state inside `𝓗_R`, so both verdicts occur.
pub fn random_invariant_model(rng: &mut StdRng) -> RandomModel {
    let n = rng.random_range(2..=4usize);
    let ds = rng.random_range(1..n);
    let mode = rng.random_range(0..3u8);
    let last = n - 1;
    let n_ch = rng.random_range(1..=2usize);
    let mut ls = Vec::new();
    for _ in 0..n_ch {
        let mut l = CMatrix::from_fn(n, n, |_, _| entry(rng));
        for i in ds..n {
            for j in 0..ds {
                l[(i, j)] = C64::new(0.0, 0.0);
            }
        }
        if mode == 1 {
            for i in 0..ds {
                for j in ds..n {
                    l[(i, j)] = C64::new(0.0, 0.0);
                }
            }
        }
        if mode == 2 {
            for k in 0..last {
                l[(k, last)] = C64::new(0.0, 0.0);
                l[(last, k)] = C64::new(0.0, 0.0);
            }
        }
        ls.push(l);
    }
    let a = CMatrix::from_fn(n, n, |_, _| entry(rng));
    let mut h = (&a + a.adjoint()) * C64::new(0.5, 0.0);
    let mut hp = CMatrix::zeros(ds, n - ds);
    for l in &ls {
        hp += l.view((0, 0), (ds, ds)).adjoint() * l.view((0, ds), (ds, n - ds));
    }
    hp *= C64::new(0.0, -0.5);
    for i in 0..ds {
        for j in ds..n {
            h[(i, j)] = hp[(i, j - ds)];
            h[(j, i)] = hp[(i, j - ds)].conj();
        }
    }
    if mode == 2 {
        for k in 0..last {
            if k >= ds {
                h[(k, last)] = C64::new(0.0, 0.0);
                h[(last, k)] = C64::new(0.0, 0.0);
            }
        }
    }
    RandomModel {
        h: QOperator::new(h).unwrap(),
        ls: ls.into_iter().map(|l| QOperator::new(l).unwrap()).collect(),
        split: SubspaceSplit::new(ds, n - ds).unwrap(),
    }
}

/// Qubit with `L = |0⟩⟨1|`, `H = 0`, target `|0⟩`.
pub fn qubit_decay(eta: f64) -> NominalModel {
    NominalModel::new(
        QOperator::zeros(2),
        QOperator::zeros(2),
        vec![Channel::new(QOperator::ket_bra(2, 0, 1), eta)],
        SubspaceSplit::new(1, 1).unwrap(),
    )
    .unwrap()
}

/// Measured qubit with `l = (1, −1)`, `H₁ = σ_y`, and a dephasing
/// perturbation `C = σ_z/√2` at intensity `gamma`.
pub fn feedback_qubit(gamma: f64) -> CoupledSpec {
    let nd = NonDemolitionModel::new(
        vec![1, 1],
        vec![0.0, 0.0],
        vec![vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)]],
        QOperator::pauli_y(),
    )
    .unwrap();
    let c = QOperator::pauli_z().scale(std::f64::consts::FRAC_1_SQRT_2);
    CoupledSpec {
        nd,
        fp: FilterParams::uniform(1, 0.5, 1.0, 0.5, 1.0).unwrap(),
        pert: PerturbationSpec::new(0.0, 0.0, gamma, QOperator::zeros(2), vec![], vec![c]).unwrap(),
        law: FeedbackLaw::new(1.0, 1.0, 0.1, 0.3).unwrap(),
    }
}

pub fn diag_state(p: &[f64]) -> DensityMatrix {
    DensityMatrix::diagonal(p).unwrap()
}

/// Zero Hamiltonian, one jump operator `l`, unit efficiency.
pub fn cascade(l: &QOperator, split: &SubspaceSplit) -> NominalModel {
    let n = l.dim();
    NominalModel::new(
        QOperator::zeros(n),
        QOperator::zeros(n),
        vec![Channel::new(l.clone(), 1.0)],
        *split,
    )
    .unwrap()
}
