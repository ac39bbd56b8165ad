//! Backward solver for the adjoint equation
//!
//! ```text
//! dy = −[A*y + ℓ + a y + B(z Q^{1/2})] dt + z dM + dN,   y(T) = G
//! ```
//!
//! by least-squares Monte Carlo on a forward ensemble.
//!
//! The recursion is the exact transpose of the forward step. With
//! `R_{k+1} = (I − Δt A(t_{k+1}))^{-1}` and `ỹ = R_{k+1}ᵀ y_{k+1}`,
//!
//! ```text
//! y_k = (1 + Δt a_k) E_k[ỹ] + Δt (ℓ_k + B_k z_k),   z_k = E_k[(ỹ − E_k ỹ) ΔW_kᵀ] / Δt
//! ```
//!
//! where `z_k` already carries the factor `Q^{1/2}` (it is the integrand of
//! `dW`). This makes the discrete duality between `y` and forward variations
//! hold step by step, up to regression error. Coefficient integrands in the
//! duality and maximum-principle checks read `E_k[ỹ]`, exposed as
//! [`AdjointTriple::y_ahead`].

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::forward::{CoefficientSet, CoefficientTable, ForwardEnsemble, OperatorTable, Scheme};
use crate::hilbert::{hs_inner_unchecked, OperatorFamily};
use crate::linalg::{dot, matvec_add, matvec_t, norm_sq};
use crate::regression::{fit_matrix, BasisSpec, Design};
use crate::stats::{Estimate, MeanAccumulator};

/// Regression of `z` on one time slice.
#[derive(Clone, Debug)]
struct ZSlice {
    design: Design,
    beta: DMatrix<f64>,
    projector: Option<DMatrix<f64>>,
}

/// Discrete solution `(y, z Q^{1/2}, N-increments)` of the adjoint equation.
#[derive(Clone, Debug)]
pub struct AdjointTriple {
    forward: ForwardEnsemble,
    terminal: Vec<f64>,
    basis: BasisSpec,
    y: Vec<f64>,
    y_ahead: Vec<f64>,
    n_residual: Vec<f64>,
    slices: Vec<ZSlice>,
    ridge_steps: Vec<usize>,
}

impl AdjointTriple {
    pub fn forward(&self) -> &ForwardEnsemble {
        &self.forward
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    pub fn basis(&self) -> BasisSpec {
        self.basis
    }

    pub fn dim(&self) -> usize {
        self.forward.dim()
    }

    pub fn steps(&self) -> usize {
        self.forward.steps()
    }

    pub fn n_paths(&self) -> usize {
        self.forward.n_paths()
    }

    /// `y(t_k)` on path `p`, `k = 0..=L`.
    pub fn y(&self, p: usize, k: usize) -> &[f64] {
        let n = self.dim();
        let off = (p * (self.steps() + 1) + k) * n;
        &self.y[off..off + n]
    }

    /// `E_k[ỹ_{k+1}]` on path `p`, `k = 0..L`.
    pub fn y_ahead(&self, p: usize, k: usize) -> &[f64] {
        let n = self.dim();
        let off = (p * self.steps() + k) * n;
        &self.y_ahead[off..off + n]
    }

    /// Orthogonal remainder `ỹ_{k+1} − E_k[ỹ_{k+1}] − z_k ΔW_k`.
    pub fn n_residual(&self, p: usize, k: usize) -> &[f64] {
        let n = self.dim();
        let off = (p * self.steps() + k) * n;
        &self.n_residual[off..off + n]
    }

    /// `z(t_k) Q^{1/2}(t_k)` on path `p`.
    pub fn z_q(&self, p: usize, k: usize) -> DMatrix<f64> {
        let n = self.dim();
        let slice = &self.slices[k];
        let row = feature_row(&self.forward, p, k);
        let mut phi = vec![0.0; slice.design.len()];
        slice.design.eval(&row, &mut phi);
        let mut z = DMatrix::<f64>::zeros(n, n);
        for (c, v) in z.as_mut_slice().iter_mut().enumerate() {
            *v = (0..phi.len()).map(|i| phi[i] * slice.beta[(i, c)]).sum();
        }
        let projector = match &slice.projector {
            Some(pr) => pr.clone(),
            None => {
                let omega = self.forward.noise().path(p).omega(k);
                self.forward.noise().covariance().range_projector(self.forward.grid().time(k), &omega)
            }
        };
        z * projector
    }

    /// `Q^{1/2}(t_k)` on path `p`.
    pub fn root(&self, p: usize, k: usize) -> DMatrix<f64> {
        self.forward.noise().root(k, p)
    }

    /// Steps on which the regression needed the ridge fallback.
    pub fn ridge_steps(&self) -> &[usize] {
        &self.ridge_steps
    }

    /// Rows `(t, E|y|², E‖zQ^{1/2}‖₂², E|N-residual|²)`; the last row (at `T`)
    /// carries zeros for the two increment-based columns.
    pub fn summary(&self) -> Vec<[f64; 4]> {
        let grid = self.forward.grid();
        let n_paths = self.n_paths() as f64;
        (0..=self.steps())
            .map(|k| {
                let ey = (0..self.n_paths()).map(|p| norm_sq(self.y(p, k))).sum::<f64>() / n_paths;
                let (ez, en) = if k < self.steps() {
                    (
                        (0..self.n_paths()).map(|p| self.z_q(p, k).norm_squared()).sum::<f64>() / n_paths,
                        (0..self.n_paths()).map(|p| norm_sq(self.n_residual(p, k))).sum::<f64>() / n_paths,
                    )
                } else {
                    (0.0, 0.0)
                };
                [grid.time(k), ey, ez, en]
            })
            .collect()
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mean_sq_y", "mean_sq_zq", "mean_sq_n_residual"])?;
        for row in self.summary() {
            w.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn feature_row(ens: &ForwardEnsemble, p: usize, k: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(ens.dim() + 1);
    row.push(ens.noise().path(p).factor(k));
    row.extend_from_slice(ens.state(p, k));
    row
}

/// Solves the adjoint equation backward along `forward`.
pub fn solve_bspde(
    coeffs: &CoefficientSet,
    family: &OperatorFamily,
    forward: &ForwardEnsemble,
    basis: BasisSpec,
) -> Result<AdjointTriple> {
    coeffs.validate()?;
    check_dim(coeffs.dim(), forward.dim())?;
    check_dim(coeffs.dim(), family.dim())?;
    let n = forward.dim();
    let n_paths = forward.n_paths();
    let steps = forward.steps();
    let grid = forward.grid().clone();
    let noise = forward.noise();
    let table = CoefficientTable::new(coeffs, &grid, forward.control().set());
    let ops = OperatorTable::new(family, &grid, forward.scheme())?;
    let cov = noise.covariance();
    let deterministic_cov = !cov.is_random();

    let mut y = vec![0.0; n_paths * (steps + 1) * n];
    let mut y_ahead = vec![0.0; n_paths * steps * n];
    let mut n_residual = vec![0.0; n_paths * steps * n];
    let mut slices: Vec<Option<ZSlice>> = vec![None; steps];
    let mut ridge_steps = Vec::new();
    for p in 0..n_paths {
        let off = (p * (steps + 1) + steps) * n;
        y[off..off + n].copy_from_slice(&coeffs.terminal);
    }

    let n_vars = n + 1;
    for k in (0..steps).rev() {
        let dt = grid.dt(k);
        // ỹ = R_{k+1}ᵀ y_{k+1} (semi-implicit) or y_{k+1} (explicit)
        let ytil: Vec<Vec<f64>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let next = &y[(p * (steps + 1) + k + 1) * n..(p * (steps + 1) + k + 2) * n];
                match forward.scheme() {
                    Scheme::SemiImplicit => {
                        let path = noise.path(p);
                        let r = ops.step_operator(k, &path.omega(k), &path.omega(k + 1), p)?;
                        let mut out = vec![0.0; n];
                        matvec_t(&r, next, &mut out);
                        Ok(out)
                    }
                    Scheme::Explicit => Ok(next.to_vec()),
                }
            })
            .collect::<Result<_>>()?;

        let rows: Vec<f64> = (0..n_paths).flat_map(|p| feature_row(forward, p, k)).collect();
        let design = Design::fit(&rows, n_vars, basis);
        let m = design.len();
        let mut phi = DMatrix::zeros(n_paths, m);
        let mut buf = vec![0.0; m];
        for p in 0..n_paths {
            design.eval(&rows[p * n_vars..(p + 1) * n_vars], &mut buf);
            for (i, v) in buf.iter().enumerate() {
                phi[(p, i)] = *v;
            }
        }
        let targets = DMatrix::from_fn(n_paths, n, |p, i| ytil[p][i]);
        let (beta_y, ridge_y) = fit_matrix(&phi, &targets)?;
        let fitted = &phi * &beta_y;
        let z_targets = DMatrix::from_fn(n_paths, n * n, |p, c| {
            // column-major (i, j) ↦ c = j·n + i
            let (i, j) = (c % n, c / n);
            (ytil[p][i] - fitted[(p, i)]) * noise.path(p).dw(k)[j] / dt
        });
        let (mut beta_z, ridge_z) = fit_matrix(&phi, &z_targets)?;
        if ridge_y || ridge_z {
            ridge_steps.push(k);
        }
        let projector = deterministic_cov.then(|| cov.range_projector(grid.time(k), &Default::default()));
        let z_fit = &phi * &beta_z;
        let projected: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let pr = match &projector {
                    Some(pr) => pr.clone(),
                    None => cov.range_projector(grid.time(k), &noise.path(p).omega(k)),
                };
                (DMatrix::from_fn(n, n, |i, jj| z_fit[(p, jj * n + i)]) * &pr, pr)
            })
            .collect();
        // Intercept correction C: the slice residual is exactly orthogonal to ΔW,
        // mean((r − zΔW − CPΔW)ΔWᵀ) = 0.
        let mut cross = DMatrix::<f64>::zeros(n, n);
        let mut gram = DMatrix::<f64>::zeros(n, n);
        for (p, (z, pr)) in projected.iter().enumerate() {
            let dw = nalgebra::DVector::from_column_slice(noise.path(p).dw(k));
            let r = nalgebra::DVector::from_fn(n, |i, _| ytil[p][i] - fitted[(p, i)]) - z * &dw;
            cross += r * dw.transpose();
            gram += pr * &dw * dw.transpose();
        }
        let correction = match gram.clone().pseudo_inverse(1e-12 * gram.norm().max(f64::MIN_POSITIVE)) {
            Ok(inv) => cross * inv,
            Err(_) => DMatrix::zeros(n, n),
        };
        for (c, v) in correction.iter().enumerate() {
            beta_z[(0, c)] += v;
        }
        let zs: Vec<DMatrix<f64>> = projected.into_iter().map(|(z, pr)| z + &correction * pr).collect();

        let explicit_ops = match forward.scheme() {
            Scheme::Explicit => Some(&ops),
            Scheme::SemiImplicit => None,
        };
        let updates: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let path = noise.path(p);
                let omega = path.omega(k);
                let j = forward.control_index(p, k);
                let ahead: Vec<f64> = (0..n).map(|i| fitted[(p, i)]).collect();
                let z = &zs[p];
                let root = noise.root(k, p);
                let s = hs_inner_unchecked(&root, z);
                let a = table.a(k, j, &omega);
                let sigma = table.sigma(k, j, &omega);
                let ell = table.ell(k, j);
                let mut yk: Vec<f64> = (0..n).map(|i| (1.0 + dt * a) * ahead[i] + dt * (ell[i] + s * sigma[i])).collect();
                if let Some(ops) = explicit_ops {
                    let op = ops.step_operator(k, &omega, &path.omega(k + 1), p)?;
                    let scaled: Vec<f64> = ahead.iter().map(|v| dt * v).collect();
                    let mut at = vec![0.0; n];
                    matvec_t(&op, &scaled, &mut at);
                    yk.iter_mut().zip(&at).for_each(|(a, b)| *a += b);
                }
                let mut resid: Vec<f64> = (0..n).map(|i| ytil[p][i] - ahead[i]).collect();
                let neg_z = -z;
                matvec_add(&neg_z, path.dw(k), &mut resid);
                Ok((yk, ahead, resid))
            })
            .collect::<Result<_>>()?;
        for (p, (yk, ahead, resid)) in updates.into_iter().enumerate() {
            let off = (p * (steps + 1) + k) * n;
            y[off..off + n].copy_from_slice(&yk);
            let off = (p * steps + k) * n;
            y_ahead[off..off + n].copy_from_slice(&ahead);
            n_residual[off..off + n].copy_from_slice(&resid);
        }
        slices[k] = Some(ZSlice { design, beta: beta_z, projector });
    }
    ridge_steps.reverse();
    Ok(AdjointTriple {
        forward: forward.clone(),
        terminal: coeffs.terminal.clone(),
        basis,
        y,
        y_ahead,
        n_residual,
        slices: slices.into_iter().map(|s| s.expect("every slice solved")).collect(),
        ridge_steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
    /// Standard error of the per-path difference `lhs − rhs`.
    pub diff_stderr: f64,
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
}

fn report(lhs: MeanAccumulator, rhs: MeanAccumulator, diff: MeanAccumulator) -> DualityReport {
    let (l, r) = (lhs.mean(), rhs.mean());
    DualityReport {
        lhs: l,
        rhs: r,
        rel_err: (l - r).abs() / r.abs().max(1e-12),
        diff_stderr: diff.stderr(),
        lhs_stderr: lhs.stderr(),
        rhs_stderr: rhs.stderr(),
    }
}

fn check_alignment(adj: &AdjointTriple, perturbed: &ForwardEnsemble) -> Result<()> {
    if !adj.forward.noise().same_noise(perturbed.noise()) {
        return Err(Error::Mismatch("variation and adjoint use different noise".into()));
    }
    if adj.forward.control().set() != perturbed.control().set() {
        return Err(Error::Mismatch("variation and adjoint use different control sets".into()));
    }
    Ok(())
}

fn step_window(adj: &AdjointTriple, t0: f64, eps: f64) -> Result<(usize, usize)> {
    let grid = adj.forward.grid();
    let k0 = grid.index_of(t0).ok_or_else(|| Error::InvalidGrid(format!("t0 = {t0} is not a grid point")))?;
    let k1 = grid
        .index_of(t0 + eps)
        .ok_or_else(|| Error::InvalidGrid(format!("t0 + eps = {} is not a grid point", t0 + eps)))?;
    if k1 <= k0 {
        return Err(Error::InvalidGrid("spike window is empty".into()));
    }
    Ok((k0, k1))
}

/// Per-path increments of the spike-window duality: `(lhs, rhs)` with
///
/// ```text
/// lhs = ⟨y(t₀+ε), ξ(t₀+ε)⟩ + Σ Δt⟨ℓ(t,u*), ξ⟩
/// rhs = Σ Δt [⟨y, Δa x_ε⟩ + ⟨y, Δb⟩ + ⟨Δσ, x_ε⟩⟨Q^{1/2}, zQ^{1/2}⟩₂ + ⟨Δg Q^{1/2}, zQ^{1/2}⟩₂]
/// ```
fn inner_terms(adj: &AdjointTriple, perturbed: &ForwardEnsemble, coeffs: &CoefficientSet, k0: usize, k1: usize) -> Vec<(f64, f64)> {
    let base = &adj.forward;
    let grid = base.grid();
    let n = adj.dim();
    let table = CoefficientTable::new(coeffs, grid, base.control().set());
    (0..adj.n_paths())
        .into_par_iter()
        .map(|p| {
            let path = base.noise().path(p);
            let xi = |k: usize| -> Vec<f64> { (0..n).map(|i| perturbed.state(p, k)[i] - base.state(p, k)[i]).collect() };
            let mut lhs = dot(adj.y(p, k1), &xi(k1));
            let mut rhs = 0.0;
            for k in k0..k1 {
                let dt = grid.dt(k);
                let omega = path.omega(k);
                let (js, je) = (base.control_index(p, k), perturbed.control_index(p, k));
                lhs += dt * dot(table.ell(k, js), &xi(k));
                if js == je {
                    continue;
                }
                let x_eps = perturbed.state(p, k);
                let ya = adj.y_ahead(p, k);
                let da = table.a(k, je, &omega) - table.a(k, js, &omega);
                let (be, bs) = (table.b(k, je, &omega), table.b(k, js, &omega));
                let (se, ss) = (table.sigma(k, je, &omega), table.sigma(k, js, &omega));
                let dg = table.g(k, je, &omega).into_owned() - table.g(k, js, &omega).into_owned();
                let root = adj.root(p, k);
                let zq = adj.z_q(p, k);
                let ds_x: f64 = (0..n).map(|i| (se[i] - ss[i]) * x_eps[i]).sum();
                let db_y: f64 = (0..n).map(|i| (be[i] - bs[i]) * ya[i]).sum();
                rhs += dt
                    * (da * dot(ya, x_eps) + db_y + ds_x * hs_inner_unchecked(&root, &zq) + hs_inner_unchecked(&(dg * &root), &zq));
            }
            (lhs, rhs)
        })
        .collect()
}

fn accumulate(pairs: Vec<(f64, f64)>) -> DualityReport {
    let mut lhs = MeanAccumulator::default();
    let mut rhs = MeanAccumulator::default();
    let mut diff = MeanAccumulator::default();
    for (l, r) in pairs {
        lhs.push(l);
        rhs.push(r);
        diff.push(l - r);
    }
    report(lhs, rhs, diff)
}

/// Duality on the spike window `[t₀, t₀+ε]` between the adjoint under `u*`
/// and the variation `ξ = x_ε − x*`.
pub fn duality_check_inner(
    adj: &AdjointTriple,
    perturbed: &ForwardEnsemble,
    coeffs: &CoefficientSet,
    t0: f64,
    eps: f64,
) -> Result<DualityReport> {
    check_alignment(adj, perturbed)?;
    let (k0, k1) = step_window(adj, t0, eps)?;
    Ok(accumulate(inner_terms(adj, perturbed, coeffs, k0, k1)))
}

/// Tail duality `E⟨y(t₀+ε), ξ(t₀+ε)⟩ = E[Σ_{t ≥ t₀+ε} Δt⟨ℓ(t,u*), ξ⟩ + ⟨G, ξ(T)⟩]`.
pub fn duality_check_tail(
    adj: &AdjointTriple,
    perturbed: &ForwardEnsemble,
    coeffs: &CoefficientSet,
    t0: f64,
    eps: f64,
) -> Result<DualityReport> {
    check_alignment(adj, perturbed)?;
    let (_, k1) = step_window(adj, t0, eps)?;
    let base = &adj.forward;
    let grid = base.grid();
    let n = adj.dim();
    let steps = adj.steps();
    let table = CoefficientTable::new(coeffs, grid, base.control().set());
    let pairs: Vec<(f64, f64)> = (0..adj.n_paths())
        .into_par_iter()
        .map(|p| {
            let xi = |k: usize| -> Vec<f64> { (0..n).map(|i| perturbed.state(p, k)[i] - base.state(p, k)[i]).collect() };
            let lhs = dot(adj.y(p, k1), &xi(k1));
            let mut rhs = dot(&coeffs.terminal, &xi(steps));
            for k in k1..steps {
                rhs += grid.dt(k) * dot(table.ell(k, base.control_index(p, k)), &xi(k));
            }
            (lhs, rhs)
        })
        .collect();
    Ok(accumulate(pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrthogonalityReport {
    /// Entrywise means of `Σ_k n_residual_k ΔW_kᵀ` (column-major).
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Largest `|mean| / stderr` over entries with non-zero spread.
    pub max_t_stat: f64,
    /// `max_k` of the same statistic for the running cross-covariation `N(t_k) W(t_k)ᵀ`.
    pub max_t_stat_grid: f64,
    pub pass: bool,
}

/// Grid-time orthogonality diagnostic between the residual martingale and
/// the Brownian driver (3-standard-error rule).
pub fn orthogonality_diagnostic(adj: &AdjointTriple) -> OrthogonalityReport {
    let n = adj.dim();
    let steps = adj.steps();
    let noise = adj.forward.noise();
    // per path: running N(t_k) ⊗ W(t_k) at each k and the terminal Σ n ΔWᵀ
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..adj.n_paths())
        .into_par_iter()
        .map(|p| {
            let path = noise.path(p);
            let mut cross = vec![0.0; n * n];
            let mut n_run = vec![0.0; n];
            let mut w_run = vec![0.0; n];
            let mut grid_prod = Vec::with_capacity(steps * n * n);
            for k in 0..steps {
                let r = adj.n_residual(p, k);
                let dw = path.dw(k);
                for (j, wj) in dw.iter().enumerate() {
                    for (i, ri) in r.iter().enumerate() {
                        cross[j * n + i] += ri * wj;
                    }
                }
                n_run.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                w_run.iter_mut().zip(dw).for_each(|(a, b)| *a += b);
                for wj in &w_run {
                    grid_prod.extend(n_run.iter().map(|ni| ni * wj));
                }
            }
            (cross, grid_prod)
        })
        .collect();
    let t_stat = |acc: &MeanAccumulator| {
        let se = acc.stderr();
        if se > 0.0 {
            acc.mean().abs() / se
        } else if acc.mean().abs() > 1e-14 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    let mut entries = vec![MeanAccumulator::default(); n * n];
    let mut grid_entries = vec![MeanAccumulator::default(); steps * n * n];
    for (cross, grid_prod) in &per_path {
        entries.iter_mut().zip(cross).for_each(|(a, v)| a.push(*v));
        grid_entries.iter_mut().zip(grid_prod).for_each(|(a, v)| a.push(*v));
    }
    let max_t_stat = entries.iter().map(t_stat).fold(0.0, f64::max);
    let max_t_stat_grid = grid_entries.iter().map(t_stat).fold(0.0, f64::max);
    OrthogonalityReport {
        means: entries.iter().map(|a| a.mean()).collect(),
        stderrs: entries.iter().map(|a| a.stderr()).collect(),
        max_t_stat,
        max_t_stat_grid,
        pass: max_t_stat <= 3.0,
    }
}

/// Mean squared residual `E Σ_k |n_residual_k|²`.
pub fn residual_energy(adj: &AdjointTriple) -> Estimate {
    (0..adj.n_paths())
        .map(|p| (0..adj.steps()).map(|k| norm_sq(adj.n_residual(p, k))).sum::<f64>())
        .collect::<MeanAccumulator>()
        .estimate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControlProcess, ControlSet};
    use crate::forward::{integrate, Coef};
    use crate::grid::TimeGrid;
    use crate::hilbert::{NuclearCovariance, OperatorConstants};
    use crate::noise::{sample_paths, CovarianceProcess, MartingaleEnsemble};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use std::sync::Arc;

    fn consts() -> OperatorConstants {
        OperatorConstants { alpha: 1.0, lambda: 1.0, k1: 4.0 }
    }

    fn ctrl(steps: usize) -> ControlProcess {
        ControlProcess::constant(ControlSet::scalar(&[0.0]).unwrap(), steps, 0).unwrap()
    }

    fn noise(n: usize, steps: usize, paths: usize, seed: u64) -> Arc<MartingaleEnsemble> {
        let cov = CovarianceProcess::default_modulated(NuclearCovariance::dyadic(n));
        Arc::new(sample_paths(&cov, &TimeGrid::uniform(1.0, steps).unwrap(), paths, seed).unwrap())
    }

    #[test]
    fn zero_terminal_and_cost_give_zero_triple() {
        let n = 3;
        let coeffs = CoefficientSet::zero(n)
            .with_sigma(Coef::constant(vec![0.3; n]))
            .with_a(Coef::random(|_, w, _| w.factor.tanh()))
            .with_x0(vec![1.0; n]);
        let family = OperatorFamily::constant(-DMatrix::identity(n, n), 1.0, consts()).unwrap();
        let fwd = integrate(&coeffs, &family, &ctrl(16), &noise(n, 16, 200, 1), Scheme::SemiImplicit).unwrap();
        let adj = solve_bspde(&coeffs, &family, &fwd, BasisSpec::default()).unwrap();
        assert!(adj.y.iter().chain(&adj.y_ahead).chain(&adj.n_residual).all(|v| *v == 0.0));
        assert!((0..16).all(|k| adj.z_q(3, k).iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn terminal_condition_is_exact() {
        let n = 2;
        let coeffs = CoefficientSet::zero(n).with_terminal(vec![0.7, -1.3]).with_ell(|t, _| vec![t, 1.0]);
        let family = OperatorFamily::constant(-DMatrix::identity(n, n), 1.0, consts()).unwrap();
        let fwd = integrate(&coeffs, &family, &ctrl(8), &noise(n, 8, 100, 2), Scheme::SemiImplicit).unwrap();
        let adj = solve_bspde(&coeffs, &family, &fwd, BasisSpec::default()).unwrap();
        for p in 0..100 {
            assert_eq!(adj.y(p, 8), &[0.7, -1.3]);
        }
    }

    #[test]
    fn homogeneous_linear_ode_oracle() {
        // ℓ = a = σ = 0: y(t) = e^{A*(T−t)} G
        let n = 3;
        let diag = [-1.0, -0.5, -2.0];
        let family = OperatorFamily::constant(DMatrix::from_diagonal(&DVector::from_row_slice(&diag)), 1.0, consts()).unwrap();
        let coeffs = CoefficientSet::zero(n).with_terminal(vec![1.0, 2.0, -1.0]).with_g(Coef::constant(DMatrix::identity(n, n) * 0.3));
        let err = |steps: usize| {
            let fwd = integrate(&coeffs, &family, &ctrl(steps), &noise(n, steps, 100, 3), Scheme::SemiImplicit).unwrap();
            let adj = solve_bspde(&coeffs, &family, &fwd, BasisSpec::default()).unwrap();
            (0..n).map(|i| (adj.y(0, 0)[i] - (diag[i]).exp() * coeffs.terminal[i]).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(32), err(64));
        assert!(e1 < 0.05);
        assert!((e1 / e2 - 2.0).abs() < 0.2, "{e1} {e2}");
    }

    #[test]
    fn y_is_linear_in_terminal_data() {
        let n = 3;
        let coeffs = CoefficientSet::zero(n)
            .with_a(Coef::random(|_, w, _| 0.5 * w.factor.tanh()))
            .with_sigma(Coef::constant(vec![0.2, 0.1, 0.0]))
            .with_x0(vec![1.0, 0.0, -1.0]);
        let family = OperatorFamily::constant(-DMatrix::identity(n, n), 1.0, consts()).unwrap();
        let fwd = integrate(&coeffs, &family, &ctrl(16), &noise(n, 16, 300, 4), Scheme::SemiImplicit).unwrap();
        let solve = |g: Vec<f64>| solve_bspde(&coeffs.clone().with_terminal(g), &family, &fwd, BasisSpec::default()).unwrap();
        let a1 = solve(vec![1.0, 0.0, 2.0]);
        let a2 = solve(vec![-3.0, 0.0, -6.0]);
        for p in 0..300 {
            for k in 0..=16 {
                for i in 0..n {
                    assert_abs_diff_eq!(a2.y(p, k)[i], -3.0 * a1.y(p, k)[i], epsilon = 1e-9 * (1.0 + a2.y(p, k)[i].abs()));
                }
            }
        }
    }

    #[test]
    fn scalar_random_drift_closed_form() {
        // a = κ W(t): y = G exp(κW(t)(T−t) + κ²(T−t)³/6), zQ^{1/2} = κ(T−t) y
        let kappa = 0.5;
        let steps = 64;
        let cov = CovarianceProcess::constant(NuclearCovariance::diagonal(&[1.0]).unwrap());
        let nz = Arc::new(sample_paths(&cov, &TimeGrid::uniform(1.0, steps).unwrap(), 10_000, 5).unwrap());
        let coeffs = CoefficientSet::zero(1).with_a(Coef::random(move |_, w, _| kappa * w.factor)).with_terminal(vec![1.0]).with_x0(vec![1.0]);
        let family = OperatorFamily::zero(1, 1.0, consts());
        let fwd = integrate(&coeffs, &family, &ctrl(steps), &nz, Scheme::SemiImplicit).unwrap();
        let adj = solve_bspde(&coeffs, &family, &fwd, BasisSpec::default()).unwrap();
        let k = steps / 2;
        let t = 0.5;
        let mut y_err = MeanAccumulator::default();
        let mut z_err = MeanAccumulator::default();
        for p in 0..nz.len() {
            let w = nz.path(p).factor(k);
            let y = (kappa * w * (1.0 - t) + kappa * kappa * (1.0 - t).powi(3) / 6.0).exp();
            y_err.push((adj.y(p, k)[0] - y).abs() / y);
            z_err.push((adj.z_q(p, k)[(0, 0)] - kappa * (1.0 - t) * y).abs() / (kappa * (1.0 - t) * y));
        }
        assert!(y_err.mean() < 0.02, "y {}", y_err.mean());
        assert!(z_err.mean() < 0.1, "z {}", z_err.mean());
    }

    #[test]
    fn residual_orthogonal_to_driver() {
        let n = 3;
        let coeffs = CoefficientSet::zero(n)
            .with_a(Coef::random(|_, w, _| 0.5 * w.factor.tanh()))
            .with_sigma(Coef::constant(vec![0.3, 0.2, 0.1]))
            .with_ell(|_, _| vec![1.0, 0.0, 0.5])
            .with_terminal(vec![1.0, -1.0, 0.5])
            .with_x0(vec![1.0, 0.5, 0.0]);
        let family = OperatorFamily::constant(-DMatrix::identity(n, n), 1.0, consts()).unwrap();
        let fwd = integrate(&coeffs, &family, &ctrl(16), &noise(n, 16, 4000, 6), Scheme::SemiImplicit).unwrap();
        let adj = solve_bspde(&coeffs, &family, &fwd, BasisSpec::default()).unwrap();
        let r = orthogonality_diagnostic(&adj);
        assert!(r.pass, "{r:?}");
        // x₁ is affine in ΔW₀ and so is the factor, hence collinear features at step 1
        assert!(adj.ridge_steps().iter().all(|k| *k <= 1), "{:?}", adj.ridge_steps());
    }

    fn busy_adjoint(degree: usize, paths: usize) -> AdjointTriple {
        let n = 3;
        let coeffs = CoefficientSet::zero(n)
            .with_a(Coef::random(|_, w, _| 0.5 * w.factor.tanh()))
            .with_sigma(Coef::constant(vec![0.3, 0.2, 0.1]))
            .with_terminal(vec![1.0, -1.0, 0.5])
            .with_x0(vec![1.0, 0.5, 0.0]);
        let family = OperatorFamily::constant(-DMatrix::identity(n, n), 1.0, consts()).unwrap();
        let fwd = integrate(&coeffs, &family, &ctrl(16), &noise(n, 16, paths, 9), Scheme::SemiImplicit).unwrap();
        solve_bspde(&coeffs, &family, &fwd, BasisSpec { degree }).unwrap()
    }

    #[test]
    fn conditional_mean_satisfies_normal_equations() {
        let adj = busy_adjoint(2, 2000);
        for k in [4, 9, 15] {
            let design = &adj.slices[k].design;
            let mut phi = vec![0.0; design.len()];
            let mut normal = vec![0.0; design.len() * 3];
            for p in 0..adj.n_paths() {
                design.eval(&feature_row(adj.forward(), p, k), &mut phi);
                // ỹ − E_k ỹ = zΔW + n
                let mut r = adj.n_residual(p, k).to_vec();
                matvec_add(&adj.z_q(p, k), adj.forward().noise().path(p).dw(k), &mut r);
                for (l, f) in phi.iter().enumerate() {
                    for i in 0..3 {
                        normal[l * 3 + i] += f * r[i] / adj.n_paths() as f64;
                    }
                }
            }
            assert!(normal.iter().all(|v| v.abs() < 1e-10), "{normal:?}");
        }
    }

    #[test]
    fn residual_shrinks_with_richer_basis() {
        // estimation noise grows with the basis size, so paths grow with it
        let e: Vec<f64> = [(0, 1000), (1, 2000), (2, 8000)].iter().map(|(d, n)| residual_energy(&busy_adjoint(*d, *n)).mean).collect();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    }

    #[test]
    fn explicit_scheme_adjoint_matches_ode() {
        let n = 2;
        let diag = [-1.0, -0.5];
        let family = OperatorFamily::constant(DMatrix::from_diagonal(&DVector::from_row_slice(&diag)), 1.0, consts()).unwrap();
        let coeffs = CoefficientSet::zero(n).with_terminal(vec![1.0, 1.0]);
        let fwd = integrate(&coeffs, &family, &ctrl(128), &noise(n, 128, 50, 7), Scheme::Explicit).unwrap();
        let adj = solve_bspde(&coeffs, &family, &fwd, BasisSpec::default()).unwrap();
        for i in 0..n {
            assert!((adj.y(0, 0)[i] - diag[i].exp()).abs() < 0.01);
        }
    }

    #[test]
    fn summary_csv_has_one_row_per_time() {
        let n = 2;
        let coeffs = CoefficientSet::zero(n).with_terminal(vec![1.0, 0.0]);
        let family = OperatorFamily::zero(n, 1.0, consts());
        let fwd = integrate(&coeffs, &family, &ctrl(4), &noise(n, 4, 100, 8), Scheme::SemiImplicit).unwrap();
        let adj = solve_bspde(&coeffs, &family, &fwd, BasisSpec::default()).unwrap();
        let mut buf = Vec::new();
        adj.write_summary_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
    }
}
