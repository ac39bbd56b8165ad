//! Polynomial least-squares regression for conditional expectations.
//!
//! Variables are standardised per time slice; variables with no spread on
//! the slice are dropped. The normal equations are solved by Cholesky and a
//! small ridge is added only when the Gram matrix is numerically singular.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to the normalised Gram matrix when the plain solve fails.
pub const FALLBACK_RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Total polynomial degree (0, 1 or 2 are typical).
    pub degree: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { degree: 2 }
    }
}

/// Monomial basis over standardised variables.
#[derive(Clone, Debug)]
pub struct Design {
    active: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    terms: Vec<Vec<usize>>,
}

impl Design {
    /// Fits the standardisation on `rows` (`n_rows × n_vars`, row-major).
    pub fn fit(rows: &[f64], n_vars: usize, spec: BasisSpec) -> Self {
        let n_rows = rows.len().checked_div(n_vars).unwrap_or(0);
        let mut active = Vec::new();
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        for v in 0..n_vars {
            let m = (0..n_rows).map(|r| rows[r * n_vars + v]).sum::<f64>() / n_rows.max(1) as f64;
            let var = (0..n_rows).map(|r| (rows[r * n_vars + v] - m).powi(2)).sum::<f64>() / n_rows.max(1) as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                active.push(v);
                mean.push(m);
                scale.push(sd);
            }
        }
        let mut terms = vec![Vec::new()];
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..spec.degree {
            let mut next = Vec::new();
            for t in &frontier {
                let from = t.last().copied().unwrap_or(0);
                for v in from..active.len() {
                    let mut m = t.clone();
                    m.push(v);
                    next.push(m);
                }
            }
            terms.extend(next.iter().cloned());
            frontier = next;
        }
        Self { active, mean, scale, terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn active_vars(&self) -> &[usize] {
        &self.active
    }

    /// Basis functions at one row of raw variables.
    pub fn eval(&self, row: &[f64], out: &mut [f64]) {
        let z: Vec<f64> = self.active.iter().enumerate().map(|(i, &v)| (row[v] - self.mean[i]) / self.scale[i]).collect();
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.iter().map(|&i| z[i]).product();
        }
    }
}

/// Cholesky factor of the normalised Gram matrix `ΦᵀΦ / N`.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    chol: Cholesky<f64, Dyn>,
    ridge_used: bool,
}

impl NormalEquations {
    pub fn new(gram: DMatrix<f64>) -> Result<Self> {
        if let Some(chol) = Cholesky::new(gram.clone()) {
            let d = chol.l_dirty().diagonal();
            let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
            if lo * lo > 1e-13 * hi * hi {
                return Ok(Self { chol, ridge_used: false });
            }
        }
        let m = gram.nrows();
        let scale = (gram.trace() / m.max(1) as f64).max(1.0);
        let ridged = gram + DMatrix::identity(m, m) * (FALLBACK_RIDGE * scale);
        let chol = Cholesky::new(ridged).ok_or_else(|| Error::InvalidInput("regression Gram matrix is not positive".into()))?;
        Ok(Self { chol, ridge_used: true })
    }

    pub fn ridge_used(&self) -> bool {
        self.ridge_used
    }

    /// Solves `G β = rhs` for a block of right-hand sides.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }
}

/// Fits `targets ≈ Φ β` in least squares; returns `β` (`basis × n_targets`)
/// and whether the ridge fallback was used.
pub fn least_squares(design: &Design, rows: &[f64], n_vars: usize, targets: &[f64], n_targets: usize) -> Result<(DMatrix<f64>, bool)> {
    let n_rows = rows.len() / n_vars.max(1);
    let m = design.len();
    let mut gram = DMatrix::zeros(m, m);
    let mut rhs = DMatrix::zeros(m, n_targets);
    let mut phi = vec![0.0; m];
    for r in 0..n_rows {
        design.eval(&rows[r * n_vars..(r + 1) * n_vars], &mut phi);
        accumulate(&mut gram, &mut rhs, &phi, &targets[r * n_targets..(r + 1) * n_targets]);
    }
    finish(gram, rhs, n_rows)
}

/// Least squares with a prebuilt design matrix `phi` (`rows × basis`) and a
/// block of targets (`rows × outputs`).
pub fn fit_matrix(phi: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let inv_n = 1.0 / phi.nrows().max(1) as f64;
    let gram = phi.tr_mul(phi) * inv_n;
    let gram = (&gram + gram.transpose()) * 0.5;
    let ne = NormalEquations::new(gram)?;
    Ok((ne.solve(&(phi.tr_mul(targets) * inv_n)), ne.ridge_used()))
}

pub(crate) fn accumulate(gram: &mut DMatrix<f64>, rhs: &mut DMatrix<f64>, phi: &[f64], y: &[f64]) {
    let m = phi.len();
    for j in 0..m {
        for i in j..m {
            gram[(i, j)] += phi[i] * phi[j];
        }
        for (c, yc) in y.iter().enumerate() {
            rhs[(j, c)] += phi[j] * yc;
        }
    }
}

pub(crate) fn finish(mut gram: DMatrix<f64>, mut rhs: DMatrix<f64>, n_rows: usize) -> Result<(DMatrix<f64>, bool)> {
    let m = gram.nrows();
    let inv_n = 1.0 / n_rows.max(1) as f64;
    for j in 0..m {
        for i in j..m {
            gram[(i, j)] *= inv_n;
            gram[(j, i)] = gram[(i, j)];
        }
    }
    rhs *= inv_n;
    let ne = NormalEquations::new(gram)?;
    Ok((ne.solve(&rhs), ne.ridge_used()))
}
