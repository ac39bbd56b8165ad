//! Continuous `K`-valued martingale noise with covariance process `Q(t) ⪯ Q`.
//!
//! The martingale is realised as `M(t) = ∫₀ᵗ Q^{1/2}(s) dW(s)` for an
//! `n`-dimensional Brownian driver `W`, which has angle process
//! `⟨⟨M⟩⟩_t = ∫₀ᵗ Q(s) ds` and quadratic variation `⟨M⟩_t = ∫₀ᵗ tr Q(s) ds`.
//! Increments are evaluated at the left endpoint of each step.
//!
//! Every path owns a ChaCha stream selected by its index, so a path can be
//! regenerated on demand from `(seed, path)` without storing the ensemble.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::grid::TimeGrid;
use crate::hilbert::{hs_inner_unchecked, NuclearCovariance, Omega};
use crate::linalg::{matvec, norm_sq};
use crate::stats::MeanAccumulator;

/// Scalar time modulation `s(t) = base + amplitude·e^{−t}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modulation {
    pub base: f64,
    pub amplitude: f64,
}

impl Modulation {
    pub const DEFAULT: Modulation = Modulation { base: 0.6, amplitude: 0.4 };

    pub fn constant(level: f64) -> Self {
        Self { base: level, amplitude: 0.0 }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.base + self.amplitude * (-t).exp()
    }

    /// `∫₀ᵀ s(t) dt`.
    pub fn integral(&self, horizon: f64) -> f64 {
        self.base * horizon + self.amplitude * (1.0 - (-horizon).exp())
    }
}

pub type CovarianceFn = dyn Fn(f64, &Omega) -> DMatrix<f64> + Send + Sync;

/// Covariance process `(t, ω) ↦ Q(t, ω)` with its dominating operator `Q`.
#[derive(Clone)]
pub enum CovarianceProcess {
    /// `Q(t) = s(t)·Q`.
    Modulated { bound: NuclearCovariance, modulation: Modulation },
    /// Arbitrary (possibly random) process; roots are computed by eigendecomposition.
    General { bound: NuclearCovariance, eval: Arc<CovarianceFn>, random: bool },
}

impl fmt::Debug for CovarianceProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Modulated { bound, modulation } => f
                .debug_struct("Modulated")
                .field("trace", &bound.trace())
                .field("modulation", modulation)
                .finish(),
            Self::General { bound, random, .. } => f
                .debug_struct("General")
                .field("trace", &bound.trace())
                .field("random", random)
                .finish(),
        }
    }
}

impl CovarianceProcess {
    pub fn constant(bound: NuclearCovariance) -> Self {
        Self::Modulated { bound, modulation: Modulation::constant(1.0) }
    }

    /// Default process `(0.6 + 0.4 e^{−t}) Q`.
    pub fn default_modulated(bound: NuclearCovariance) -> Self {
        Self::Modulated { bound, modulation: Modulation::DEFAULT }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(NuclearCovariance::diagonal(&vec![0.0; dim]).expect("zero spectrum"))
    }

    pub fn bound(&self) -> &NuclearCovariance {
        match self {
            Self::Modulated { bound, .. } | Self::General { bound, .. } => bound,
        }
    }

    pub fn dim(&self) -> usize {
        self.bound().dim()
    }

    pub fn is_random(&self) -> bool {
        matches!(self, Self::General { random: true, .. })
    }

    pub fn matrix(&self, t: f64, omega: &Omega) -> DMatrix<f64> {
        match self {
            Self::Modulated { bound, modulation } => bound.matrix() * modulation.at(t),
            Self::General { eval, .. } => eval(t, omega),
        }
    }

    pub fn sqrt(&self, t: f64, omega: &Omega) -> DMatrix<f64> {
        match self {
            Self::Modulated { bound, modulation } => bound.sqrt() * modulation.at(t).max(0.0).sqrt(),
            Self::General { eval, .. } => psd_sqrt(&eval(t, omega)),
        }
    }

    /// `q(t) = tr Q(t)`.
    pub fn trace(&self, t: f64, omega: &Omega) -> f64 {
        match self {
            Self::Modulated { bound, modulation } => bound.trace() * modulation.at(t),
            Self::General { eval, .. } => eval(t, omega).trace(),
        }
    }

    /// Orthogonal projector onto the range of `Q^{1/2}(t, ω)`.
    pub fn range_projector(&self, t: f64, omega: &Omega) -> DMatrix<f64> {
        let m = self.matrix(t, omega);
        let n = m.nrows();
        let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
        let scale = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let mut p = DMatrix::zeros(n, n);
        if scale <= 0.0 {
            return p;
        }
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l > 1e-12 * scale {
                let v = eig.eigenvectors.column(i);
                p += v * v.transpose();
            }
        }
        p
    }

    /// Smallest eigenvalue of `Q − Q(t, ω)`; non-negative iff `Q(t, ω) ⪯ Q`.
    pub fn domination_gap(&self, t: f64, omega: &Omega) -> f64 {
        let diff = self.bound().matrix() - self.matrix(t, omega);
        let diff = (&diff + diff.transpose()) * 0.5;
        SymmetricEigen::new(diff).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Checks `Q(t,ω) ⪯ Q` (to 1e-10) and `tr Q(t,ω) > 0` at the given points.
    pub fn check_invariants(&self, points: &[(f64, Omega)]) -> Result<()> {
        for (t, omega) in points {
            let gap = self.domination_gap(*t, omega);
            if gap < -1e-10 {
                return Err(Error::InvalidInput(format!(
                    "Q(t) is not dominated by Q at t = {t}: gap {gap:e}"
                )));
            }
            if !(self.trace(*t, omega) > 0.0) {
                return Err(Error::InvalidInput(format!("tr Q(t) vanishes at t = {t}")));
            }
        }
        Ok(())
    }

    /// Discrete angle process `Σ_k Q(t_k) Δt_k` at the horizon (left-point rule).
    pub fn discrete_angle(&self, grid: &TimeGrid, omega: &Omega) -> DMatrix<f64> {
        let n = self.dim();
        (0..grid.steps()).fold(DMatrix::zeros(n, n), |acc, k| {
            acc + self.matrix(grid.time(k), omega) * grid.dt(k)
        })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = DVector::from_iterator(m.nrows(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (&s + s.transpose()) * 0.5
}

/// One simulated path: Brownian increments, martingale increments and the
/// coefficient-driving factor `W₁(t_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MartingalePath {
    dim: usize,
    dw: Vec<f64>,
    dm: Vec<f64>,
    factor: Vec<f64>,
}

impl MartingalePath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.factor.len() - 1
    }

    pub fn dw(&self, k: usize) -> &[f64] {
        &self.dw[k * self.dim..(k + 1) * self.dim]
    }

    pub fn dm(&self, k: usize) -> &[f64] {
        &self.dm[k * self.dim..(k + 1) * self.dim]
    }

    pub fn omega(&self, k: usize) -> Omega {
        Omega::new(self.factor[k])
    }

    pub fn factor(&self, k: usize) -> f64 {
        self.factor[k]
    }

    /// `M(t_k) = Σ_{j<k} ΔM_j`.
    pub fn value(&self, k: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for j in 0..k {
            m.iter_mut().zip(self.dm(j)).for_each(|(a, b)| *a += b);
        }
        m
    }

    /// Realised quadratic variation `Σ_k |ΔM_k|²`.
    pub fn quadratic_variation(&self) -> f64 {
        norm_sq(&self.dm)
    }

    /// Replaces the Brownian increments from step `from` on and recomputes the
    /// dependent fields. Used to probe adaptedness.
    pub fn with_tail_replaced(&self, source: &NoiseSource, from: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dw = self.dw.clone();
        for k in from..self.steps() {
            let sd = source.grid.dt(k).sqrt();
            for v in &mut dw[k * self.dim..(k + 1) * self.dim] {
                *v = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        source.assemble(dw)
    }
}

/// Deterministic generator of martingale paths indexed by `(seed, path)`.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    grid: TimeGrid,
    cov: CovarianceProcess,
    seed: u64,
    roots: Option<Vec<DMatrix<f64>>>,
}

impl NoiseSource {
    pub fn new(cov: CovarianceProcess, grid: TimeGrid, seed: u64) -> Self {
        let roots = (!cov.is_random()).then(|| {
            (0..grid.steps())
                .map(|k| cov.sqrt(grid.time(k), &Omega::default()))
                .collect()
        });
        Self { grid, cov, seed, roots }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn covariance(&self) -> &CovarianceProcess {
        &self.cov
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    /// `Q^{1/2}(t_k, ω)`.
    pub fn root(&self, k: usize, omega: &Omega) -> DMatrix<f64> {
        match &self.roots {
            Some(r) => r[k].clone(),
            None => self.cov.sqrt(self.grid.time(k), omega),
        }
    }

    pub fn path(&self, index: usize) -> MartingalePath {
        let n = self.dim();
        let steps = self.grid.steps();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let mut dw = vec![0.0; steps * n];
        for k in 0..steps {
            let sd = self.grid.dt(k).sqrt();
            for v in &mut dw[k * n..(k + 1) * n] {
                *v = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        self.assemble(dw)
    }

    /// Builds a path from explicit driver increments `ΔW` (step-major).
    pub fn path_from_increments(&self, dw: Vec<f64>) -> Result<MartingalePath> {
        check_dim(self.grid.steps() * self.dim(), dw.len())?;
        Ok(self.assemble(dw))
    }

    fn assemble(&self, dw: Vec<f64>) -> MartingalePath {
        let n = self.dim();
        let steps = self.grid.steps();
        let mut factor = vec![0.0; steps + 1];
        for k in 0..steps {
            factor[k + 1] = factor[k] + if n > 0 { dw[k * n] } else { 0.0 };
        }
        let mut dm = vec![0.0; steps * n];
        for k in 0..steps {
            let omega = Omega::new(factor[k]);
            let out = &mut dm[k * n..(k + 1) * n];
            match &self.roots {
                Some(r) => matvec(&r[k], &dw[k * n..(k + 1) * n], out),
                None => matvec(&self.cov.sqrt(self.grid.time(k), &omega), &dw[k * n..(k + 1) * n], out),
            }
        }
        MartingalePath { dim: n, dw, dm, factor }
    }
}

/// A stored ensemble of martingale paths sharing grid and covariance.
#[derive(Clone, Debug)]
pub struct MartingaleEnsemble {
    source: NoiseSource,
    paths: Vec<MartingalePath>,
}

impl MartingaleEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.source.grid
    }

    pub fn covariance(&self) -> &CovarianceProcess {
        &self.source.cov
    }

    pub fn source(&self) -> &NoiseSource {
        &self.source
    }

    pub fn paths(&self) -> &[MartingalePath] {
        &self.paths
    }

    pub fn path(&self, p: usize) -> &MartingalePath {
        &self.paths[p]
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn seed(&self) -> u64 {
        self.source.seed
    }

    /// `Q^{1/2}(t_k)` on path `p`.
    pub fn root(&self, k: usize, p: usize) -> DMatrix<f64> {
        self.source.root(k, &self.paths[p].omega(k))
    }

    /// Builds an ensemble from explicit paths (used by perturbation studies).
    pub fn from_paths(source: NoiseSource, paths: Vec<MartingalePath>) -> Result<Self> {
        for p in &paths {
            check_dim(source.grid.steps(), p.steps())?;
            check_dim(source.dim(), p.dim())?;
        }
        Ok(Self { source, paths })
    }

    /// Whether two ensembles carry bit-identical noise.
    pub fn same_noise(&self, other: &Self) -> bool {
        self.source.seed == other.source.seed
            && self.grid() == other.grid()
            && self.paths.len() == other.paths.len()
            && self.paths.iter().zip(&other.paths).all(|(a, b)| a.dw == b.dw)
    }

    /// CSV dump with columns `path, k, t_k, dW_0.., dM_0..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "k".into(), "t_k".into()];
        header.extend((0..n).map(|i| format!("dW_{i}")));
        header.extend((0..n).map(|i| format!("dM_{i}")));
        w.write_record(&header)?;
        for (p, path) in self.paths.iter().enumerate() {
            for k in 0..path.steps() {
                let mut rec = vec![p.to_string(), k.to_string(), format!("{:.17e}", self.grid().time(k))];
                rec.extend(path.dw(k).iter().map(|v| format!("{v:.17e}")));
                rec.extend(path.dm(k).iter().map(|v| format!("{v:.17e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws `n_paths` independent martingale paths; reproducible from `seed`.
pub fn sample_paths(
    cov: &CovarianceProcess,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<MartingaleEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be >= 1".into()));
    }
    // re-validate in case the grid was built by hand
    let grid = TimeGrid::from_times(grid.times().to_vec())?;
    let source = NoiseSource::new(cov.clone(), grid, seed);
    let paths = (0..n_paths).into_par_iter().map(|p| source.path(p)).collect();
    Ok(MartingaleEnsemble { source, paths })
}

pub type IntegrandFn = dyn Fn(f64, &Omega, &[f64]) -> DMatrix<f64> + Send + Sync;

/// Predictable integrand `Φ(t, ω, M(t))` with values in `n × n` matrices.
#[derive(Clone)]
pub struct IntegrandProcess {
    dim: usize,
    eval: Arc<IntegrandFn>,
}

impl fmt::Debug for IntegrandProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegrandProcess").field("dim", &self.dim).finish()
    }
}

impl IntegrandProcess {
    pub fn new<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64, &Omega, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self { dim, eval: Arc::new(f) }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, move |_, _, _| DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, move |_, _, _| DMatrix::identity(dim, dim))
    }

    pub fn deterministic<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::new(dim, move |t, _, _| f(t))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, t: f64, omega: &Omega, state: &[f64]) -> DMatrix<f64> {
        (self.eval)(t, omega, state)
    }
}

/// `Σ_k Φ(t_k, ω, M(t_k)) ΔM_k` with left-endpoint (predictable) evaluation.
pub fn stochastic_integral(phi: &IntegrandProcess, path: &MartingalePath, grid: &TimeGrid) -> Result<DVector<f64>> {
    check_dim(path.dim(), phi.dim())?;
    check_dim(grid.steps(), path.steps())?;
    let n = path.dim();
    let mut state = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for k in 0..path.steps() {
        let m = phi.at(grid.time(k), &path.omega(k), &state);
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: m.nrows() });
        }
        crate::linalg::matvec_add(&m, path.dm(k), &mut acc);
        state.iter_mut().zip(path.dm(k)).for_each(|(s, d)| *s += d);
    }
    Ok(DVector::from_vec(acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IsometryReport {
    /// Monte Carlo `E|∫Φ dM|²`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Quadrature of `E ∫‖Φ Q^{1/2}‖₂² ds`.
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub rel_err: f64,
    pub paths: usize,
}

/// Compares both sides of the Itô isometry on freshly simulated paths.
pub fn ito_isometry_check(
    phi: &IntegrandProcess,
    cov: &CovarianceProcess,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<IsometryReport> {
    if n_paths < 100 {
        return Err(Error::InvalidInput(format!("isometry check needs >= 100 paths, got {n_paths}")));
    }
    check_dim(cov.dim(), phi.dim())?;
    let source = NoiseSource::new(cov.clone(), TimeGrid::from_times(grid.times().to_vec())?, seed);
    let n = cov.dim();
    let per_path: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let path = source.path(p);
            let mut state = vec![0.0; n];
            let mut acc = vec![0.0; n];
            let mut quad = 0.0;
            for k in 0..grid.steps() {
                let omega = path.omega(k);
                let m = phi.at(grid.time(k), &omega, &state);
                crate::linalg::matvec_add(&m, path.dm(k), &mut acc);
                let mq = &m * source.root(k, &omega);
                quad += grid.dt(k) * hs_inner_unchecked(&mq, &mq);
                state.iter_mut().zip(path.dm(k)).for_each(|(s, d)| *s += d);
            }
            (norm_sq(&acc), quad)
        })
        .collect();
    let mut lhs = MeanAccumulator::default();
    let mut rhs = MeanAccumulator::default();
    for (l, r) in per_path {
        lhs.push(l);
        rhs.push(r);
    }
    let (l, r) = (lhs.mean(), rhs.mean());
    Ok(IsometryReport {
        lhs: l,
        lhs_stderr: lhs.stderr(),
        rhs: r,
        rhs_stderr: rhs.stderr(),
        rel_err: (l - r).abs() / r.max(1e-12),
        paths: n_paths,
    })
}
