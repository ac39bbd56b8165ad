//! Cost functional, Hamiltonian and its `x`-gradient.
//!
//! The `z` slot of the Hamiltonian always carries the composite `z Q^{1/2}`,
//! written `z_q` below. The running-cost pairing is the plain bilinear form,
//! so `∇ₓH` is the literal gradient of `H`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::Result;
use crate::forward::{CoefficientSet, CoefficientTable, ForwardEnsemble};
use crate::hilbert::{hs_inner_unchecked, Omega};
use crate::linalg::dot;
use crate::stats::{Estimate, MeanAccumulator};

/// Per-path realised cost `Σ_k Δt⟨ℓ(t_k, u_k), x_k⟩ + ⟨G, x_L⟩`.
pub fn path_costs(ens: &ForwardEnsemble, coeffs: &CoefficientSet) -> Result<Vec<f64>> {
    crate::error::check_dim(coeffs.dim(), ens.dim())?;
    let grid = ens.grid();
    let table = CoefficientTable::new(coeffs, grid, ens.control().set());
    Ok((0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let running: f64 = (0..grid.steps())
                .map(|k| grid.dt(k) * dot(table.ell(k, ens.control_index(p, k)), ens.state(p, k)))
                .sum();
            running + dot(&coeffs.terminal, ens.state(p, grid.steps()))
        })
        .collect())
}

/// Monte Carlo estimate of `J(u) = E[∫⟨ℓ(t,u), x⟩dt + ⟨G, x(T)⟩]` with its
/// standard error.
pub fn cost_estimate(ens: &ForwardEnsemble, coeffs: &CoefficientSet) -> Result<Estimate> {
    Ok(path_costs(ens, coeffs)?.into_iter().collect::<MeanAccumulator>().estimate())
}

pub fn cost(ens: &ForwardEnsemble, coeffs: &CoefficientSet) -> Result<f64> {
    cost_estimate(ens, coeffs).map(|e| e.mean)
}

/// `σ̃ = ⟨σ(t,v), x⟩_K I + g(t,v)`.
pub fn sigma_tilde(t: f64, omega: &Omega, x: &[f64], v: &[f64], coeffs: &CoefficientSet) -> DMatrix<f64> {
    let s = dot(&coeffs.sigma.at(t, omega, v), x);
    let mut m = coeffs.g.at(t, omega, v);
    for i in 0..m.nrows() {
        m[(i, i)] += s;
    }
    m
}

/// `B(t,v) z_q = ⟨Q^{1/2}(t), z_q⟩₂ σ(t,v)`.
pub fn b_operator(t: f64, omega: &Omega, v: &[f64], z_q: &DMatrix<f64>, root: &DMatrix<f64>, coeffs: &CoefficientSet) -> Vec<f64> {
    let s = hs_inner_unchecked(root, z_q);
    coeffs.sigma.at(t, omega, v).into_iter().map(|c| s * c).collect()
}

/// Arguments `(t, ω, x, v, y, z Q^{1/2})` of the Hamiltonian.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianArgs {
    pub t: f64,
    pub omega: Omega,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub y: Vec<f64>,
    pub z_q: DMatrix<f64>,
}

/// `H = −⟨ℓ,x⟩ − a⟨x,y⟩ − ⟨b,y⟩ − ⟨σ̃ Q^{1/2}, z_q⟩₂`.
pub fn hamiltonian(args: &HamiltonianArgs, coeffs: &CoefficientSet, root: &DMatrix<f64>) -> f64 {
    let HamiltonianArgs { t, omega, x, v, y, z_q } = args;
    let ell = coeffs.ell(*t, v);
    let a = coeffs.a.at(*t, omega, v);
    let b = coeffs.b.at(*t, omega, v);
    let st = sigma_tilde(*t, omega, x, v, coeffs) * root;
    -dot(&ell, x) - a * dot(x, y) - dot(&b, y) - hs_inner_unchecked(&st, z_q)
}

/// Same value through `⟨σ̃Q^{1/2}, z_q⟩₂ = ⟨B z_q, x⟩ + ⟨g Q^{1/2}, z_q⟩₂`.
pub fn hamiltonian_expanded(args: &HamiltonianArgs, coeffs: &CoefficientSet, root: &DMatrix<f64>) -> f64 {
    let HamiltonianArgs { t, omega, x, v, y, z_q } = args;
    let ell = coeffs.ell(*t, v);
    let a = coeffs.a.at(*t, omega, v);
    let b = coeffs.b.at(*t, omega, v);
    let bz = b_operator(*t, omega, v, z_q, root, coeffs);
    let gq = coeffs.g.at(*t, omega, v) * root;
    -dot(&ell, x) - a * dot(x, y) - dot(&b, y) - dot(&bz, x) - hs_inner_unchecked(&gq, z_q)
}

/// `∇ₓH = −ℓ − a y − B z_q`; independent of `x`.
pub fn grad_x_hamiltonian(
    t: f64,
    omega: &Omega,
    v: &[f64],
    y: &[f64],
    z_q: &DMatrix<f64>,
    coeffs: &CoefficientSet,
    root: &DMatrix<f64>,
) -> Vec<f64> {
    let ell = coeffs.ell(t, v);
    let a = coeffs.a.at(t, omega, v);
    let bz = b_operator(t, omega, v, z_q, root, coeffs);
    (0..y.len()).map(|i| -ell[i] - a * y[i] - bz[i]).collect()
}
