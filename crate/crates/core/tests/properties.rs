mod common;

use common::{qubit_decay, random_invariant_model};
use nalgebra::DMatrix;
use proptest::prelude::*;
use qsme_robust::did::{construct_did, DEFAULT_RANK_TOL};
use qsme_robust::invariance::{check_condition_a, check_condition_ar, check_invariance_nominal};
use qsme_robust::model::{Channel, NominalModel, PerturbationSpec, PerturbedModel};
use qsme_robust::qcore::{hs_norm, CMatrix, DensityMatrix, QOperator, SubspaceSplit, C64};
use qsme_robust::sde::{
    simulate_perturbed, simulate_perturbed_with, CoarsenedIncrements, GaussianIncrements, SimOptions,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn nominal_of(m: &common::RandomModel) -> NominalModel {
    let n = m.split.dim();
    let channels = m.ls.iter().map(|l| Channel::new(l.clone(), 1.0)).collect();
    NominalModel::new(m.h.clone(), QOperator::zeros(n), channels, m.split).unwrap()
}

fn random_entry(rng: &mut StdRng) -> C64 {
    C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

fn normalized(m: CMatrix, to: f64) -> QOperator {
    let q = QOperator::new(m).unwrap();
    let n = hs_norm(&q);
    if n == 0.0 {
        q
    } else {
        q.scale(to / n)
    }
}

/// Block-diagonal `[S 0; 0 R]` random matrix.
fn block_diagonal(rng: &mut StdRng, split: &SubspaceSplit, hermitian: bool) -> CMatrix {
    let (n, ds) = (split.dim(), split.dim_s());
    let mut m = CMatrix::from_fn(n, n, |i, j| {
        if (i < ds) == (j < ds) {
            random_entry(rng)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    if hermitian {
        m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    }
    m
}

/// Perturbation satisfying AR: block-diagonal `H̃` and `C`, and `L̃`
/// supported on the `R` block.
fn random_ar_perturbation(
    rng: &mut StdRng,
    split: &SubspaceSplit,
    n_ch: usize,
    a: f64,
    b: f64,
    g: f64,
) -> PerturbationSpec {
    let (n, ds) = (split.dim(), split.dim_s());
    let htilde = normalized(block_diagonal(rng, split, true), 0.9);
    let ltilde = (0..n_ch)
        .map(|_| {
            normalized(
                CMatrix::from_fn(n, n, |i, j| {
                    if i >= ds && j >= ds {
                        random_entry(rng)
                    } else {
                        C64::new(0.0, 0.0)
                    }
                }),
                0.9,
            )
        })
        .collect();
    let c = vec![
        normalized(block_diagonal(rng, split, false), 0.45),
        normalized(block_diagonal(rng, split, false), 0.45),
    ];
    PerturbationSpec::new(a, b, g, htilde, ltilde, c).unwrap()
}

fn random_unitary(rng: &mut StdRng, n: usize) -> CMatrix {
    let a = CMatrix::from_fn(n, n, |_, _| random_entry(rng));
    a.qr().q()
}

fn conjugate(u: &CMatrix, x: &QOperator) -> QOperator {
    QOperator::new(u * x.matrix() * u.adjoint()).unwrap()
}

/// Superoperator of `ρ ↦ −i[H, ρ] + Σ LρL* − ½{L*L, ρ}` on column-stacked `ρ`.
fn kron_generator(h: &CMatrix, ls: &[CMatrix]) -> CMatrix {
    let n = h.nrows();
    let id = CMatrix::identity(n, n);
    let i = C64::new(0.0, 1.0);
    let mut g = (id.kronecker(h) - h.transpose().kronecker(&id)) * (-i);
    for l in ls {
        let ldl = l.adjoint() * l;
        g += l.conjugate().kronecker(l) - (id.kronecker(&ldl) + ldl.transpose().kronecker(&id)) * C64::new(0.5, 0.0);
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ar_implies_a_for_all_intensities(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64, g in 0.0..2.0f64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let m = random_invariant_model(&mut rng);
        let nominal = nominal_of(&m);
        prop_assert!(check_invariance_nominal(&nominal, 0.0).holds);
        let pert = random_ar_perturbation(&mut rng, &m.split, m.ls.len(), a, b, g);
        prop_assert!(check_condition_ar(&nominal, &pert).holds);
        prop_assert!(check_condition_a(&nominal, &pert).holds);
    }

    #[test]
    fn ar_keeps_target_states_stationary_in_support(seed in any::<u64>(), a in -1.0..1.0f64, b in -1.0..1.0f64, g in 0.0..1.0f64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let m = random_invariant_model(&mut rng);
        let nominal = nominal_of(&m);
        let pert = random_ar_perturbation(&mut rng, &m.split, m.ls.len(), a, b, g);
        let pm = PerturbedModel::new(nominal, pert).unwrap();
        let (n, ds) = (m.split.dim(), m.split.dim_s());
        let psi: Vec<C64> = (0..n).map(|k| if k < ds { random_entry(&mut rng) } else { C64::new(0.0, 0.0) }).collect();
        let rho = DensityMatrix::pure(&psi).unwrap();
        let d = pm.drift_apply(0.0, rho.op()).unwrap();
        let outside = d.matrix().view((0, ds), (n, n - ds)).norm();
        prop_assert!(outside < 1e-10, "drift leaks {outside}");
    }

    #[test]
    fn did_basis_and_dimensions(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let m = random_invariant_model(&mut rng);
        let d = construct_did(&m.h, &m.ls, &m.split, DEFAULT_RANK_TOL).unwrap();
        let n = m.split.dim();
        prop_assert_eq!(d.basin_dims[0], m.split.dim_s());
        prop_assert_eq!(d.basin_dims.iter().sum::<usize>() + d.invariant_dim, n);
        prop_assert_eq!(d.gas, d.failure_stage.is_none());
        prop_assert_eq!(d.gas, d.invariant_dim == 0);
        let b = d.basis_change.matrix();
        prop_assert!((b * b.adjoint() - CMatrix::identity(n, n)).norm() < 1e-10);
    }

    #[test]
    fn did_verdict_ignores_channel_order_and_block_unitaries(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let m = random_invariant_model(&mut rng);
        let base = construct_did(&m.h, &m.ls, &m.split, DEFAULT_RANK_TOL).unwrap();
        let mut reversed = m.ls.clone();
        reversed.reverse();
        let r = construct_did(&m.h, &reversed, &m.split, DEFAULT_RANK_TOL).unwrap();
        prop_assert_eq!(r.gas, base.gas);
        prop_assert_eq!(&r.basin_dims, &base.basin_dims);

        let (n, ds) = (m.split.dim(), m.split.dim_s());
        let mut u = CMatrix::zeros(n, n);
        u.view_mut((0, 0), (ds, ds)).copy_from(&random_unitary(&mut rng, ds));
        u.view_mut((ds, ds), (n - ds, n - ds)).copy_from(&random_unitary(&mut rng, n - ds));
        let ls: Vec<_> = m.ls.iter().map(|l| conjugate(&u, l)).collect();
        let c = construct_did(&conjugate(&u, &m.h), &ls, &m.split, DEFAULT_RANK_TOL).unwrap();
        prop_assert_eq!(c.gas, base.gas);
        prop_assert_eq!(&c.basin_dims, &base.basin_dims);
    }
}

fn driven_decay() -> NominalModel {
    NominalModel::new(
        QOperator::pauli_x().scale(0.5),
        QOperator::zeros(2),
        vec![Channel::new(QOperator::ket_bra(2, 0, 1), 0.7)],
        SubspaceSplit::new(1, 1).unwrap(),
    )
    .unwrap()
}

#[test]
fn ensemble_mean_follows_the_lindblad_flow() {
    let nominal = qubit_decay(0.6);
    let pert = PerturbationSpec::new(
        0.3,
        0.0,
        0.4,
        QOperator::pauli_z().scale(0.5),
        vec![QOperator::zeros(2)],
        vec![QOperator::pauli_x().scale(0.5)],
    )
    .unwrap();
    let pm = PerturbedModel::new(nominal, pert).unwrap();
    let h = (QOperator::pauli_z().scale(0.5 * 0.3)).into_matrix();
    let ls = [
        QOperator::ket_bra(2, 0, 1).into_matrix(),
        QOperator::pauli_x().scale(0.5 * 0.4f64.sqrt()).into_matrix(),
    ];
    let t = 1.5;
    let rho0 = DensityMatrix::pure(&[C64::new(0.6, 0.0), C64::new(0.0, 0.8)]).unwrap();
    let flow = (kron_generator(&h, &ls) * C64::new(t, 0.0)).exp();
    let expected = CMatrix::from_column_slice(
        2,
        2,
        (flow * DMatrix::from_column_slice(4, 1, rho0.matrix().as_slice())).as_slice(),
    );

    let n = 2000;
    let finals: Vec<CMatrix> = (0..n)
        .map(|i| {
            let opts = SimOptions::new(1e-3, t, 21).with_trajectory(i).with_thin(1500);
            simulate_perturbed(&pm, &rho0, &opts)
                .unwrap()
                .states
                .last()
                .unwrap()
                .1
                .matrix()
                .clone()
        })
        .collect();
    for (p, q) in [(0, 0), (0, 1)] {
        for part in [|z: C64| z.re, |z: C64| z.im] {
            let xs: Vec<f64> = finals.iter().map(|m| part(m[(p, q)])).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let target = part(expected[(p, q)]);
            // 2e-3 covers the O(dt) Euler bias
            assert!(
                (mean - target).abs() <= 4.0 * se + 2e-3,
                "({p},{q}): {mean} vs {target} (se {se})"
            );
        }
    }
}

#[test]
fn strong_error_shrinks_with_dt() {
    let pm = PerturbedModel::new(driven_decay(), PerturbationSpec::zero(2, 1)).unwrap();
    let rho0 = DensityMatrix::basis(2, 1);
    let (t, fine) = (1.0, 1.0 / 4096.0);
    let mut errs = Vec::new();
    for factor in [64usize, 16, 4] {
        let mut total = 0.0;
        for i in 0..100 {
            let reference = simulate_perturbed_with(
                &pm,
                &rho0,
                &SimOptions::new(fine, t, 3).with_trajectory(i).with_thin(4096),
                &mut GaussianIncrements::new(3, i, fine),
            )
            .unwrap();
            let coarse = simulate_perturbed_with(
                &pm,
                &rho0,
                &SimOptions::new(fine * factor as f64, t, 3)
                    .with_trajectory(i)
                    .with_thin(4096 / factor),
                &mut CoarsenedIncrements::new(GaussianIncrements::new(3, i, fine), factor),
            )
            .unwrap();
            let a = reference.states.last().unwrap().1.matrix();
            let b = coarse.states.last().unwrap().1.matrix();
            total += (a - b).norm_squared();
        }
        errs.push((total / 100.0).sqrt());
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    // a 16x reduction in dt buys at least the square-root rate
    let order = (errs[0] / errs[2]).ln() / 16f64.ln();
    assert!(order > 0.4, "observed strong order {order} from {errs:?}");
}
