//! Invariance of the target subspace under nominal and perturbed dynamics.
//!
//! Every check reports one residual per algebraic clause, so a failed check
//! says which clause broke and by how much.

use serde::{Deserialize, Serialize};

use crate::model::{NominalModel, PerturbationSpec};
use crate::qcore::{blocks, BlockView, CMatrix, SubspaceSplit, C64, I};

/// Default tolerance for the algebraic invariance clauses.
pub const DEFAULT_CONDITION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub holds: bool,
    /// Clause name and residual norm, in clause order.
    pub residuals: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl InvarianceReport {
    fn from_residuals(residuals: Vec<(String, f64)>, tolerance: f64) -> Self {
        let holds = residuals.iter().all(|(_, r)| *r <= tolerance);
        Self {
            holds,
            residuals,
            tolerance,
        }
    }

    /// Re-evaluates the verdict at a different tolerance.
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self.holds = self.residuals.iter().all(|(_, r)| *r <= tolerance);
        self
    }

    pub fn residual(&self, clause: &str) -> Option<f64> {
        self.residuals.iter().find(|(n, _)| n == clause).map(|(_, r)| *r)
    }

    /// Clauses whose residual exceeds the tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.residuals
            .iter()
            .filter(|(_, r)| *r > self.tolerance)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

fn split_blocks(m: &CMatrix, split: &SubspaceSplit) -> BlockView {
    blocks(m, split.dim_s())
}

/// `L_{k,Q} = 0` for every channel and `i(H_{0,P} + uH_{1,P}) = ½ΣL*_{k,S}L_{k,P}`.
pub fn check_invariance_nominal(model: &NominalModel, u: f64) -> InvarianceReport {
    let ls: Vec<&CMatrix> = model.channels().iter().map(|c| c.l.matrix()).collect();
    invariance_residuals(model.hamiltonian(u).matrix(), &ls, model.split())
}

/// The nominal invariance clauses for a bare Hamiltonian and jump-operator list.
pub fn invariance_residuals(h: &CMatrix, ls: &[&CMatrix], split: &SubspaceSplit) -> InvarianceReport {
    let mut residuals = Vec::new();
    let mut rhs = CMatrix::zeros(split.dim_s(), split.dim_r());
    for (k, l) in ls.iter().enumerate() {
        let b = split_blocks(l, split);
        residuals.push((format!("L_Q[{k}]"), b.q.norm()));
        rhs += b.s.adjoint() * &b.p;
    }
    let h = split_blocks(h, split);
    let clause = h.p * I - rhs * C64::new(0.5, 0.0);
    residuals.push(("P".into(), clause.norm()));
    InvarianceReport::from_residuals(residuals, DEFAULT_CONDITION_TOL)
}

/// Invariance of the target subspace for the perturbed model at the given
/// intensities, assuming the nominal model already keeps it invariant.
pub fn check_condition_a(nominal: &NominalModel, pert: &PerturbationSpec) -> InvarianceReport {
    let split = nominal.split();
    let mut residuals = Vec::new();
    let mut cross = CMatrix::zeros(split.dim_s(), split.dim_r());
    for (k, (ch, lt)) in nominal.channels().iter().zip(&pert.ltilde).enumerate() {
        let l = split_blocks(ch.l.matrix(), split);
        let t = split_blocks(lt.matrix(), split);
        residuals.push((format!("Ltilde_Q[{k}]"), t.q.norm()));
        cross += l.s.adjoint() * &t.p + t.s.adjoint() * &l.p + t.s.adjoint() * &t.p * C64::new(pert.beta, 0.0);
    }
    let mut c_sp = CMatrix::zeros(split.dim_s(), split.dim_r());
    for (j, c) in pert.c.iter().enumerate() {
        let b = split_blocks(c.matrix(), split);
        residuals.push((format!("C_Q[{j}]"), b.q.norm()));
        c_sp += b.s.adjoint() * &b.p;
    }
    let h = split_blocks(pert.htilde.matrix(), split);
    let clause = h.p * (I * (2.0 * pert.alpha)) - cross * C64::new(pert.beta, 0.0) - c_sp * C64::new(pert.gamma, 0.0);
    residuals.push(("P".into(), clause.norm()));
    InvarianceReport::from_residuals(residuals, DEFAULT_CONDITION_TOL)
}

/// Invariance of the target subspace for every choice of intensities.
pub fn check_condition_ar(nominal: &NominalModel, pert: &PerturbationSpec) -> InvarianceReport {
    let split = nominal.split();
    let mut residuals = Vec::new();
    let mut cross = CMatrix::zeros(split.dim_s(), split.dim_r());
    let mut quad = CMatrix::zeros(split.dim_s(), split.dim_r());
    for (k, (ch, lt)) in nominal.channels().iter().zip(&pert.ltilde).enumerate() {
        let l = split_blocks(ch.l.matrix(), split);
        let t = split_blocks(lt.matrix(), split);
        residuals.push((format!("Ltilde_Q[{k}]"), t.q.norm()));
        cross += l.s.adjoint() * &t.p + t.s.adjoint() * &l.p;
        quad += t.s.adjoint() * &t.p;
    }
    let (c_q, c_sp) = c_clauses(pert, split);
    residuals.extend(c_q);
    let h = split_blocks(pert.htilde.matrix(), split);
    residuals.push(("Htilde_P".into(), h.p.norm()));
    residuals.push(("cross".into(), cross.norm()));
    residuals.push(("Ltilde_SP".into(), quad.norm()));
    residuals.push(("C_SP".into(), c_sp));
    InvarianceReport::from_residuals(residuals, DEFAULT_CONDITION_TOL)
}

/// The intensity-independent clauses that remain when the jump-operator
/// perturbation is proportional (`L̄_k = √θ_k L_k`).
pub fn check_condition_ar_prime(pert: &PerturbationSpec, split: &SubspaceSplit) -> InvarianceReport {
    let (mut residuals, c_sp) = c_clauses(pert, split);
    let h = split_blocks(pert.htilde.matrix(), split);
    residuals.push(("Htilde_P".into(), h.p.norm()));
    residuals.push(("C_SP".into(), c_sp));
    InvarianceReport::from_residuals(residuals, DEFAULT_CONDITION_TOL)
}

fn c_clauses(pert: &PerturbationSpec, split: &SubspaceSplit) -> (Vec<(String, f64)>, f64) {
    let mut out = Vec::new();
    let mut c_sp = CMatrix::zeros(split.dim_s(), split.dim_r());
    for (j, c) in pert.c.iter().enumerate() {
        let b = split_blocks(c.matrix(), split);
        out.push((format!("C_Q[{j}]"), b.q.norm()));
        c_sp += b.s.adjoint() * &b.p;
    }
    (out, c_sp.norm())
}
