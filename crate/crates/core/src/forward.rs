//! Path-wise integration of the controlled linear SPDE
//!
//! ```text
//! dx = (A(t)x + a(t,u)x + b(t,u)) dt + [⟨σ(t,u), x⟩_K I + g(t,u)] dM(t)
//! ```
//!
//! on a truncated Gelfand triple, together with the weak-form residual and
//! the Gronwall-type second-moment envelopes.

use std::borrow::Cow;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlProcess, ControlSet};
use crate::error::{check_dim, Error, Result};
use crate::grid::TimeGrid;
use crate::hilbert::{AssumptionReport, GelfandTriple, Omega, OperatorFamily};
use crate::linalg::{dot, matvec, matvec_add, norm_sq};
use crate::noise::{MartingaleEnsemble, MartingalePath};
use crate::stats::{Estimate, MeanAccumulator};

/// A coefficient `(t, ω, v) ↦ T`, flagged when it actually reads `ω`.
pub struct Coef<T> {
    eval: Arc<dyn Fn(f64, &Omega, &[f64]) -> T + Send + Sync>,
    random: bool,
}

impl<T> Clone for Coef<T> {
    fn clone(&self) -> Self {
        Self { eval: Arc::clone(&self.eval), random: self.random }
    }
}

impl<T> fmt::Debug for Coef<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coef").field("random", &self.random).finish()
    }
}

impl<T: Clone + Send + Sync + 'static> Coef<T> {
    pub fn constant(value: T) -> Self {
        Self { eval: Arc::new(move |_, _, _| value.clone()), random: false }
    }

    pub fn deterministic<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> T + Send + Sync + 'static,
    {
        Self { eval: Arc::new(move |t, _, v| f(t, v)), random: false }
    }

    pub fn random<F>(f: F) -> Self
    where
        F: Fn(f64, &Omega, &[f64]) -> T + Send + Sync + 'static,
    {
        Self { eval: Arc::new(f), random: true }
    }

    pub fn at(&self, t: f64, omega: &Omega, v: &[f64]) -> T {
        (self.eval)(t, omega, v)
    }

    pub fn is_random(&self) -> bool {
        self.random
    }
}

pub type RunningCost = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;

/// Declared uniform bounds on the lower-order coefficients.
///
/// `k_g` bounds the operator norm of `g`, so `‖g Q^{1/2}‖₂² ≤ k_g² tr Q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub k_a: f64,
    pub k_b: f64,
    pub k_sigma: f64,
    pub k_g: f64,
}

/// Coefficients, cost data and initial state of the controlled equation.
#[derive(Clone)]
pub struct CoefficientSet {
    dim: usize,
    pub a: Coef<f64>,
    pub b: Coef<Vec<f64>>,
    pub sigma: Coef<Vec<f64>>,
    pub g: Coef<DMatrix<f64>>,
    ell: Arc<RunningCost>,
    pub terminal: Vec<f64>,
    pub x0: Vec<f64>,
    pub bounds: CoefficientBounds,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim", &self.dim)
            .field("terminal", &self.terminal)
            .field("x0", &self.x0)
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl CoefficientSet {
    /// All coefficients and cost data zero, `x₀ = 0`.
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            a: Coef::constant(0.0),
            b: Coef::constant(vec![0.0; dim]),
            sigma: Coef::constant(vec![0.0; dim]),
            g: Coef::constant(DMatrix::zeros(dim, dim)),
            ell: Arc::new(move |_, _| vec![0.0; dim]),
            terminal: vec![0.0; dim],
            x0: vec![0.0; dim],
            bounds: CoefficientBounds::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_a(mut self, a: Coef<f64>) -> Self {
        self.a = a;
        self
    }

    pub fn with_b(mut self, b: Coef<Vec<f64>>) -> Self {
        self.b = b;
        self
    }

    pub fn with_sigma(mut self, sigma: Coef<Vec<f64>>) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_g(mut self, g: Coef<DMatrix<f64>>) -> Self {
        self.g = g;
        self
    }

    pub fn with_ell<F>(mut self, ell: F) -> Self
    where
        F: Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        self.ell = Arc::new(ell);
        self
    }

    pub fn with_terminal(mut self, terminal: Vec<f64>) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = x0;
        self
    }

    pub fn with_bounds(mut self, bounds: CoefficientBounds) -> Self {
        self.bounds = bounds;
        self
    }

    /// Running cost density `ℓ(t, v)`.
    pub fn ell(&self, t: f64, v: &[f64]) -> Vec<f64> {
        (self.ell)(t, v)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim, self.terminal.len())?;
        check_dim(self.dim, self.x0.len())
    }

    /// Samples `(t, ω, v ∈ U)` and checks `|a| ≤ k_a`, `|b|_K ≤ k_b`,
    /// `|σ|_K ≤ k_σ` and `‖g‖ ≤ k_g` up to 1e-9.
    pub fn check_bounds(&self, set: &ControlSet, horizon: f64, samples: usize, seed: u64) -> AssumptionReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = self.bounds;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..samples {
            let t = rng.random::<f64>() * horizon;
            let omega = Omega::new(2.0 * horizon.sqrt() * rng.sample::<f64, _>(StandardNormal));
            let v = set.value(rng.random_range(0..set.len()));
            let g = self.g.at(t, &omega, v);
            let g_norm = g.singular_values().iter().copied().fold(0.0, f64::max);
            worst = worst
                .max(self.a.at(t, &omega, v).abs() - b.k_a)
                .max(norm_sq(&self.b.at(t, &omega, v)).sqrt() - b.k_b)
                .max(norm_sq(&self.sigma.at(t, &omega, v)).sqrt() - b.k_sigma)
                .max(g_norm - b.k_g);
        }
        AssumptionReport { pass: worst <= 1e-9, worst_margin: worst, samples }
    }
}

/// Coefficients tabulated per `(step, U-index)` for the deterministic parts;
/// random parts are evaluated on demand.
pub struct CoefficientTable<'c> {
    coeffs: &'c CoefficientSet,
    times: Vec<f64>,
    set: ControlSet,
    a: Option<Vec<f64>>,
    b: Option<Vec<Vec<f64>>>,
    sigma: Option<Vec<Vec<f64>>>,
    g: Option<Vec<DMatrix<f64>>>,
    ell: Vec<Vec<f64>>,
}

impl<'c> CoefficientTable<'c> {
    pub fn new(coeffs: &'c CoefficientSet, grid: &TimeGrid, set: &ControlSet) -> Self {
        let times: Vec<f64> = grid.times()[..grid.steps()].to_vec();
        let nu = set.len();
        let omega = Omega::default();
        let cells: Vec<(f64, &[f64])> =
            times.iter().flat_map(|&t| (0..nu).map(move |j| (t, j))).map(|(t, j)| (t, set.value(j))).collect();
        let a = (!coeffs.a.is_random()).then(|| cells.iter().map(|(t, v)| coeffs.a.at(*t, &omega, v)).collect());
        let b = (!coeffs.b.is_random()).then(|| cells.iter().map(|(t, v)| coeffs.b.at(*t, &omega, v)).collect());
        let sigma =
            (!coeffs.sigma.is_random()).then(|| cells.iter().map(|(t, v)| coeffs.sigma.at(*t, &omega, v)).collect());
        let g = (!coeffs.g.is_random()).then(|| cells.iter().map(|(t, v)| coeffs.g.at(*t, &omega, v)).collect());
        let ell = cells.iter().map(|(t, v)| coeffs.ell(*t, v)).collect();
        Self { coeffs, times, set: set.clone(), a, b, sigma, g, ell }
    }

    fn cell(&self, k: usize, j: usize) -> usize {
        k * self.set.len() + j
    }

    pub fn set(&self) -> &ControlSet {
        &self.set
    }

    pub fn a(&self, k: usize, j: usize, omega: &Omega) -> f64 {
        match &self.a {
            Some(tab) => tab[self.cell(k, j)],
            None => self.coeffs.a.at(self.times[k], omega, self.set.value(j)),
        }
    }

    pub fn b(&self, k: usize, j: usize, omega: &Omega) -> Cow<'_, [f64]> {
        match &self.b {
            Some(tab) => Cow::Borrowed(&tab[self.cell(k, j)]),
            None => Cow::Owned(self.coeffs.b.at(self.times[k], omega, self.set.value(j))),
        }
    }

    pub fn sigma(&self, k: usize, j: usize, omega: &Omega) -> Cow<'_, [f64]> {
        match &self.sigma {
            Some(tab) => Cow::Borrowed(&tab[self.cell(k, j)]),
            None => Cow::Owned(self.coeffs.sigma.at(self.times[k], omega, self.set.value(j))),
        }
    }

    pub fn g(&self, k: usize, j: usize, omega: &Omega) -> Cow<'_, DMatrix<f64>> {
        match &self.g {
            Some(tab) => Cow::Borrowed(&tab[self.cell(k, j)]),
            None => Cow::Owned(self.coeffs.g.at(self.times[k], omega, self.set.value(j))),
        }
    }

    pub fn ell(&self, k: usize, j: usize) -> &[f64] {
        &self.ell[self.cell(k, j)]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `(I − Δt A(t_{k+1})) x_{k+1} = x_k + Δt(a x_k + b) + σ̃ ΔM_k`.
    #[default]
    SemiImplicit,
    /// `x_{k+1} = x_k + Δt(A(t_k) x_k + a x_k + b) + σ̃ ΔM_k`.
    Explicit,
}

/// Per-step drift operators: the resolvent `(I − Δt_k A(t_{k+1}))^{-1}` for
/// the semi-implicit scheme, `A(t_k)` for the explicit one.
pub struct OperatorTable<'f> {
    family: &'f OperatorFamily,
    grid: TimeGrid,
    scheme: Scheme,
    cached: Option<Vec<DMatrix<f64>>>,
}

impl<'f> OperatorTable<'f> {
    pub fn new(family: &'f OperatorFamily, grid: &TimeGrid, scheme: Scheme) -> Result<Self> {
        let omega = Omega::default();
        let cached = if family.is_random() {
            None
        } else {
            let mut out = Vec::with_capacity(grid.steps());
            for k in 0..grid.steps() {
                out.push(match scheme {
                    Scheme::SemiImplicit => resolvent(family, grid, k, &omega).ok_or(Error::SingularSystem { step: k, path: 0 })?,
                    Scheme::Explicit => family.at(grid.time(k), &omega),
                });
            }
            Some(out)
        };
        Ok(Self { family, grid: grid.clone(), scheme, cached })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Operator for step `k`; `omega_next` is `ω` at `t_{k+1}`, `omega_now` at `t_k`.
    pub fn step_operator(&self, k: usize, omega_now: &Omega, omega_next: &Omega, path: usize) -> Result<Cow<'_, DMatrix<f64>>> {
        if let Some(c) = &self.cached {
            return Ok(Cow::Borrowed(&c[k]));
        }
        Ok(Cow::Owned(match self.scheme {
            Scheme::SemiImplicit => {
                resolvent(self.family, &self.grid, k, omega_next).ok_or(Error::SingularSystem { step: k, path })?
            }
            Scheme::Explicit => self.family.at(self.grid.time(k), omega_now),
        }))
    }
}

fn resolvent(family: &OperatorFamily, grid: &TimeGrid, k: usize, omega: &Omega) -> Option<DMatrix<f64>> {
    let m = crate::linalg::identity_minus_scaled(&family.at(grid.time(k + 1), omega), grid.dt(k));
    let lu = m.lu();
    if lu.determinant().abs() < 1e-300 {
        return None;
    }
    lu.try_inverse()
}

/// Monte Carlo ensemble of forward states under one control.
#[derive(Clone, Debug)]
pub struct ForwardEnsemble {
    noise: Arc<MartingaleEnsemble>,
    control: ControlProcess,
    scheme: Scheme,
    dim: usize,
    states: Arc<[f64]>,
    indices: Option<Arc<[u16]>>,
}

impl ForwardEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        self.noise.grid()
    }

    pub fn noise(&self) -> &Arc<MartingaleEnsemble> {
        &self.noise
    }

    pub fn control(&self) -> &ControlProcess {
        &self.control
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.noise.len()
    }

    pub fn steps(&self) -> usize {
        self.grid().steps()
    }

    fn stride(&self) -> usize {
        (self.steps() + 1) * self.dim
    }

    pub fn state(&self, p: usize, k: usize) -> &[f64] {
        let off = p * self.stride() + k * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn path_states(&self, p: usize) -> &[f64] {
        &self.states[p * self.stride()..(p + 1) * self.stride()]
    }

    /// `U`-index used on path `p` at step `k`.
    pub fn control_index(&self, p: usize, k: usize) -> usize {
        match &self.indices {
            Some(ix) => ix[p * self.steps() + k] as usize,
            None => self.control.scheduled_index(k),
        }
    }

    /// `E|x(t_k)|²_K` with its standard error.
    pub fn second_moment(&self, k: usize) -> Estimate {
        (0..self.n_paths()).map(|p| norm_sq(self.state(p, k))).collect::<MeanAccumulator>().estimate()
    }

    pub fn mean_state(&self, k: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in 0..self.n_paths() {
            m.iter_mut().zip(self.state(p, k)).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= self.n_paths() as f64);
        m
    }

    /// CSV with columns `t, mean_sq_norm, stderr`.
    pub fn write_stats_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mean_sq_norm", "stderr"])?;
        for k in 0..=self.steps() {
            let e = self.second_moment(k);
            w.write_record([
                format!("{:.17e}", self.grid().time(k)),
                format!("{:.17e}", e.mean),
                format!("{:.17e}", e.stderr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integrates a single path; shared by [`integrate`] and the adaptedness tests.
pub struct PathIntegrator<'a> {
    coeffs: &'a CoefficientSet,
    control: &'a ControlProcess,
    grid: TimeGrid,
    table: CoefficientTable<'a>,
    ops: OperatorTable<'a>,
}

impl<'a> PathIntegrator<'a> {
    pub fn new(
        coeffs: &'a CoefficientSet,
        family: &'a OperatorFamily,
        control: &'a ControlProcess,
        grid: &TimeGrid,
        scheme: Scheme,
    ) -> Result<Self> {
        coeffs.validate()?;
        check_dim(coeffs.dim(), family.dim())?;
        control.validate(grid.steps())?;
        Ok(Self {
            coeffs,
            control,
            grid: grid.clone(),
            table: CoefficientTable::new(coeffs, grid, control.set()),
            ops: OperatorTable::new(family, grid, scheme)?,
        })
    }

    pub fn table(&self) -> &CoefficientTable<'a> {
        &self.table
    }

    pub fn ops(&self) -> &OperatorTable<'a> {
        &self.ops
    }

    /// Returns the `(L+1)·n` states and the `U`-index used at each step.
    pub fn run(&self, path: &MartingalePath, p: usize) -> Result<(Vec<f64>, Vec<u16>)> {
        let n = self.coeffs.dim();
        let steps = self.grid.steps();
        check_dim(n, path.dim())?;
        check_dim(steps, path.steps())?;
        let mut states = vec![0.0; (steps + 1) * n];
        states[..n].copy_from_slice(&self.coeffs.x0);
        let mut used = vec![0u16; steps];
        let mut rhs = vec![0.0; n];
        let mut ax = vec![0.0; n];
        let decision = self.control.feedback().map(|f| f.decision_step);
        let mut decision_state: Option<Vec<f64>> = None;
        for k in 0..steps {
            let (head, tail) = states.split_at_mut((k + 1) * n);
            let x = &head[k * n..];
            if decision == Some(k) {
                decision_state = Some(x.to_vec());
            }
            let j = self.control.index_at(k, decision_state.as_deref());
            used[k] = j as u16;
            let omega = path.omega(k);
            let dt = self.grid.dt(k);
            let a = self.table.a(k, j, &omega);
            let b = self.table.b(k, j, &omega);
            let sigma = self.table.sigma(k, j, &omega);
            let g = self.table.g(k, j, &omega);
            let dm = path.dm(k);
            let sx = dot(&sigma, x);
            for i in 0..n {
                rhs[i] = (1.0 + dt * a) * x[i] + dt * b[i] + sx * dm[i];
            }
            matvec_add(&g, dm, &mut rhs);
            let op = self.ops.step_operator(k, &omega, &path.omega(k + 1), p)?;
            let next = &mut tail[..n];
            match self.ops.scheme() {
                Scheme::SemiImplicit => matvec(&op, &rhs, next),
                Scheme::Explicit => {
                    matvec(&op, x, &mut ax);
                    for i in 0..n {
                        next[i] = rhs[i] + dt * ax[i];
                    }
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite state at step {k} on path {p}")));
            }
        }
        Ok((states, used))
    }
}

/// Integrates every path of `noise` under `control`.
pub fn integrate(
    coeffs: &CoefficientSet,
    family: &OperatorFamily,
    control: &ControlProcess,
    noise: &Arc<MartingaleEnsemble>,
    scheme: Scheme,
) -> Result<ForwardEnsemble> {
    check_dim(coeffs.dim(), noise.dim())?;
    let integrator = PathIntegrator::new(coeffs, family, control, noise.grid(), scheme)?;
    let runs: Vec<(Vec<f64>, Vec<u16>)> = noise
        .paths()
        .par_iter()
        .enumerate()
        .map(|(p, path)| integrator.run(path, p))
        .collect::<Result<_>>()?;
    let n_paths = runs.len();
    let stride = (noise.grid().steps() + 1) * coeffs.dim();
    let mut states = Vec::with_capacity(n_paths * stride);
    let mut indices = control.feedback().map(|_| Vec::with_capacity(n_paths * noise.grid().steps()));
    for (s, used) in runs {
        states.extend_from_slice(&s);
        if let Some(ix) = indices.as_mut() {
            ix.extend_from_slice(&used);
        }
    }
    Ok(ForwardEnsemble {
        noise: Arc::clone(noise),
        control: control.clone(),
        scheme,
        dim: coeffs.dim(),
        states: states.into(),
        indices: indices.map(Into::into),
    })
}

/// Maximum over paths and grid times of the discrete weak-form residual
///
/// ```text
/// ⟨x(t_k) − x₀, η⟩ − Σ_{j<k} Δt⟨A x + a x_j + b, η⟩ − Σ_{j<k} ⟨η, σ̃_j ΔM_j⟩
/// ```
///
/// with `A x` read at `t_{j+1}` (semi-implicit) or `t_j` (explicit), one
/// value per test vector.
pub fn weak_residual(
    ens: &ForwardEnsemble,
    coeffs: &CoefficientSet,
    family: &OperatorFamily,
    test_vectors: &[Vec<f64>],
    scheme: Scheme,
) -> Result<Vec<f64>> {
    if test_vectors.is_empty() {
        return Err(Error::InvalidInput("at least one test vector required".into()));
    }
    let n = ens.dim();
    for eta in test_vectors {
        check_dim(n, eta.len())?;
    }
    let grid = ens.grid().clone();
    let table = CoefficientTable::new(coeffs, &grid, ens.control().set());
    let per_path: Vec<Vec<f64>> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let path = ens.noise().path(p);
            let mut acc = vec![0.0; test_vectors.len()];
            let mut worst = vec![0.0f64; test_vectors.len()];
            let mut ax = vec![0.0; n];
            let mut drift = vec![0.0; n];
            let mut diff = vec![0.0; n];
            for k in 0..grid.steps() {
                let j = ens.control_index(p, k);
                let omega = path.omega(k);
                let dt = grid.dt(k);
                let x = ens.state(p, k);
                let x_next = ens.state(p, k + 1);
                let (a_x, om) = match scheme {
                    Scheme::SemiImplicit => (x_next, path.omega(k + 1)),
                    Scheme::Explicit => (x, omega),
                };
                let t_a = match scheme {
                    Scheme::SemiImplicit => grid.time(k + 1),
                    Scheme::Explicit => grid.time(k),
                };
                matvec(&family.at(t_a, &om), a_x, &mut ax);
                let a = table.a(k, j, &omega);
                let b = table.b(k, j, &omega);
                let sigma = table.sigma(k, j, &omega);
                let g = table.g(k, j, &omega);
                let sx = dot(&sigma, x);
                for i in 0..n {
                    drift[i] = dt * (ax[i] + a * x[i] + b[i]) + sx * path.dm(k)[i];
                }
                matvec_add(&g, path.dm(k), &mut drift);
                for i in 0..n {
                    diff[i] = x_next[i] - x[i] - drift[i];
                }
                for (e, eta) in test_vectors.iter().enumerate() {
                    acc[e] += dot(&diff, eta);
                    worst[e] = worst[e].max(acc[e].abs());
                }
            }
            worst
        })
        .collect();
    let mut out = vec![0.0f64; test_vectors.len()];
    for w in per_path {
        out.iter_mut().zip(w).for_each(|(o, v)| *o = o.max(v));
    }
    Ok(out)
}

/// Constants of the short-window second-moment envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnvelopeConstants {
    /// `λ + 2k_a + k₂² + 2k₃² tr Q`.
    pub rate: f64,
    pub c1: f64,
    pub c2: f64,
}

/// `C₁ = exp(ε(λ + 2k_a + k₂² + 2k₃² tr Q (1+ε)))`, `C₂ = 1 + 2k₄² tr Q`,
/// where `tr Q = ‖Q^{1/2}‖₂²`.
pub fn envelope_constants(lambda: f64, bounds: &CoefficientBounds, trace_q: f64, eps: f64) -> EnvelopeConstants {
    let CoefficientBounds { k_a, k_b, k_sigma, k_g } = *bounds;
    let rate = lambda + 2.0 * k_a + k_b * k_b + 2.0 * k_sigma * k_sigma * trace_q;
    let c1 = (eps * (lambda + 2.0 * k_a + k_b * k_b + 2.0 * k_sigma * k_sigma * trace_q * (1.0 + eps))).exp();
    let c2 = 1.0 + 2.0 * k_g * k_g * trace_q;
    EnvelopeConstants { rate, c1, c2 }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub empirical_sup: f64,
    /// Standard error of `empirical_sup` at its argmax time.
    pub stderr: f64,
    pub envelope: f64,
    pub start_moment: f64,
    pub c1: f64,
    pub c2: f64,
    pub pass: bool,
}

fn window(grid: &TimeGrid, from: f64, to: f64) -> Result<(usize, usize)> {
    let k0 = grid
        .index_of(from)
        .ok_or_else(|| Error::InvalidGrid(format!("t = {from} is not a grid point")))?;
    let k1 = grid
        .index_of(to)
        .ok_or_else(|| Error::InvalidGrid(format!("t = {to} is not a grid point")))?;
    if k1 < k0 {
        return Err(Error::InvalidGrid(format!("empty window [{from}, {to}]")));
    }
    Ok((k0, k1))
}

fn sup_moment(ens: &ForwardEnsemble, k0: usize, k1: usize) -> Estimate {
    (k0..=k1)
        .map(|k| ens.second_moment(k))
        .fold(Estimate { mean: f64::NEG_INFINITY, stderr: 0.0 }, |best, e| if e.mean > best.mean { e } else { best })
}

fn within(sup: Estimate, envelope: f64) -> bool {
    sup.mean <= envelope * (1.0 + 3.0 * sup.relative_stderr())
}

/// Checks `sup_{[t₀, t₀+ε]} E|x(t)|²_K ≤ C₁(E|x(t₀)|²_K + C₂ε)`.
pub fn moment_bound_check(
    ens: &ForwardEnsemble,
    coeffs: &CoefficientSet,
    family: &OperatorFamily,
    t0: f64,
    eps: f64,
) -> Result<MomentReport> {
    let (k0, k1) = window(ens.grid(), t0, t0 + eps)?;
    let trace_q = ens.noise().covariance().bound().trace();
    let c = envelope_constants(family.constants.lambda, &coeffs.bounds, trace_q, eps);
    let start = ens.second_moment(k0).mean;
    let sup = sup_moment(ens, k0, k1);
    let envelope = c.c1 * (start + c.c2 * eps);
    Ok(MomentReport {
        empirical_sup: sup.mean,
        stderr: sup.stderr,
        envelope,
        start_moment: start,
        c1: c.c1,
        c2: c.c2,
        pass: within(sup, envelope),
    })
}

/// Checks `sup_{[t₀+ε, T]} E|x(t)|²_K ≤ e^{cτ}(C₁(E|x(t₀)|²_K + C₂ε) + C₂τ)`,
/// `τ = T − t₀ − ε`, `c` the envelope rate.
pub fn tail_moment_check(
    ens: &ForwardEnsemble,
    coeffs: &CoefficientSet,
    family: &OperatorFamily,
    t0: f64,
    eps: f64,
) -> Result<MomentReport> {
    let horizon = ens.grid().horizon();
    let (k0, _) = window(ens.grid(), t0, t0 + eps)?;
    let (k1, kt) = window(ens.grid(), t0 + eps, horizon)?;
    let trace_q = ens.noise().covariance().bound().trace();
    let c = envelope_constants(family.constants.lambda, &coeffs.bounds, trace_q, eps);
    let tau = horizon - t0 - eps;
    let start = ens.second_moment(k0).mean;
    let envelope = (c.rate * tau).exp() * (c.c1 * (start + c.c2 * eps) + c.c2 * tau);
    let sup = sup_moment(ens, k1, kt);
    Ok(MomentReport {
        empirical_sup: sup.mean,
        stderr: sup.stderr,
        envelope,
        start_moment: start,
        c1: c.c1,
        c2: c.c2,
        pass: within(sup, envelope),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    /// `E|x(t)|²_K + α Σ Δt E|x|²_V` per grid time of the window.
    pub lhs: Vec<f64>,
    /// `E|x(t₀)|²_K + c Σ Δt E|x|²_K + C₂(t − t₀)` per grid time.
    pub rhs: Vec<f64>,
    pub worst_ratio: f64,
    pub pass: bool,
}

/// Discrete energy inequality on `[t₀, t₀+ε]`; the `V`-norm sum is taken at
/// the implicit (right) endpoint, the `K`-norm sum at the left.
pub fn energy_check(
    ens: &ForwardEnsemble,
    coeffs: &CoefficientSet,
    family: &OperatorFamily,
    triple: &GelfandTriple,
    t0: f64,
    eps: f64,
) -> Result<EnergyReport> {
    check_dim(triple.dim(), ens.dim())?;
    let grid = ens.grid();
    let (k0, k1) = window(grid, t0, t0 + eps)?;
    let trace_q = ens.noise().covariance().bound().trace();
    let c = envelope_constants(family.constants.lambda, &coeffs.bounds, trace_q, eps);
    let alpha = family.constants.alpha;
    let n_paths = ens.n_paths() as f64;
    let mean_v = |k: usize| (0..ens.n_paths()).map(|p| triple.norm_v_sq(ens.state(p, k))).sum::<f64>() / n_paths;
    let start = ens.second_moment(k0).mean;
    let (mut lhs, mut rhs) = (vec![start], vec![start]);
    let (mut v_sum, mut k_sum) = (0.0, 0.0);
    let mut worst = if start > 0.0 { 1.0 } else { 0.0 };
    let mut pass = true;
    for k in k0..k1 {
        let dt = grid.dt(k);
        v_sum += dt * mean_v(k + 1);
        k_sum += dt * ens.second_moment(k).mean;
        let m = ens.second_moment(k + 1);
        let l = m.mean + alpha * v_sum;
        let r = start + c.rate * k_sum + c.c2 * (grid.time(k + 1) - t0);
        pass &= l <= r * (1.0 + 3.0 * m.relative_stderr());
        if r > 0.0 {
            worst = f64::max(worst, l / r);
        }
        lhs.push(l);
        rhs.push(r);
    }
    Ok(EnergyReport { lhs, rhs, worst_ratio: worst, pass })
}

/// Matrix-exponential oracle helper: `e^{D T} x₀` for diagonal `D`.
pub fn diagonal_flow(diag: &[f64], horizon: f64, x0: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x0.len(), diag.iter().zip(x0).map(|(d, x)| (d * horizon).exp() * x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlSet;
    use crate::hilbert::{NuclearCovariance, OperatorConstants};
    use crate::noise::{sample_paths, CovarianceProcess};
    use approx::assert_abs_diff_eq;

    fn consts() -> OperatorConstants {
        OperatorConstants { alpha: 1.0, lambda: 1.0, k1: 4.0 }
    }

    fn single_control(steps: usize) -> ControlProcess {
        ControlProcess::constant(ControlSet::scalar(&[0.0]).unwrap(), steps, 0).unwrap()
    }

    fn noise(n: usize, horizon: f64, steps: usize, paths: usize, seed: u64) -> Arc<MartingaleEnsemble> {
        let cov = CovarianceProcess::default_modulated(NuclearCovariance::dyadic(n));
        Arc::new(sample_paths(&cov, &TimeGrid::uniform(horizon, steps).unwrap(), paths, seed).unwrap())
    }

    fn busy_coeffs(n: usize) -> CoefficientSet {
        CoefficientSet::zero(n)
            .with_a(Coef::random(|t, w, v| 0.3 * (w.factor).tanh() - 0.2 * t + 0.1 * v[0]))
            .with_b(Coef::deterministic(move |t, v| (0..n).map(|i| (t + i as f64).sin() + v[0]).collect()))
            .with_sigma(Coef::constant((0..n).map(|i| 0.4 / (i + 1) as f64).collect()))
            .with_g(Coef::deterministic(move |t, _| DMatrix::from_fn(n, n, |i, j| 0.1 * ((i + j) as f64 + t).cos())))
            .with_x0((0..n).map(|i| 1.0 - 0.1 * i as f64).collect())
    }

    fn diffusive_family(n: usize) -> OperatorFamily {
        let d = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| -((i + 1) as f64)));
        OperatorFamily::constant(d, 1.0, consts()).unwrap()
    }

    #[test]
    fn deterministic_linear_ode_matches_resolvent_power() {
        let n = 3;
        let diag = [-1.0, -2.0, -0.5];
        let family = OperatorFamily::constant(DMatrix::from_diagonal(&DVector::from_row_slice(&diag)), 1.0, consts()).unwrap();
        let coeffs = CoefficientSet::zero(n).with_x0(vec![1.0, 2.0, -1.0]);
        let steps = 64;
        let ens = integrate(&coeffs, &family, &single_control(steps), &noise(n, 1.0, steps, 2, 1), Scheme::SemiImplicit).unwrap();
        let dt = 1.0 / steps as f64;
        for i in 0..n {
            let expect = coeffs.x0[i] / (1.0 - dt * diag[i]).powi(steps as i32);
            assert_abs_diff_eq!(ens.state(0, steps)[i], expect, epsilon = 1e-12);
        }
        let exact = diagonal_flow(&diag, 1.0, &coeffs.x0);
        assert!((DVector::from_row_slice(ens.state(1, steps)) - exact).norm() < 0.05);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let n = 4;
        let coeffs = CoefficientSet::zero(n).with_sigma(Coef::constant(vec![0.5; n])).with_a(Coef::constant(0.3));
        let ens = integrate(&coeffs, &diffusive_family(n), &single_control(16), &noise(n, 1.0, 16, 50, 2), Scheme::SemiImplicit).unwrap();
        assert!(ens.states.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_geometric_mean() {
        let (a, x0, steps) = (0.5, 1.0, 128);
        let cov = CovarianceProcess::constant(NuclearCovariance::diagonal(&[0.5]).unwrap());
        let noise = Arc::new(sample_paths(&cov, &TimeGrid::uniform(1.0, steps).unwrap(), 10_000, 3).unwrap());
        let coeffs = CoefficientSet::zero(1)
            .with_a(Coef::constant(a))
            .with_sigma(Coef::constant(vec![0.6]))
            .with_x0(vec![x0]);
        let family = OperatorFamily::zero(1, 1.0, consts());
        let ens = integrate(&coeffs, &family, &single_control(steps), &noise, Scheme::SemiImplicit).unwrap();
        let acc: MeanAccumulator = (0..ens.n_paths()).map(|p| ens.state(p, steps)[0]).collect();
        let expect = x0 * f64::exp(a);
        assert!((acc.mean() - expect).abs() <= 3.0 * acc.stderr(), "{} vs {expect} ± {}", acc.mean(), acc.stderr());
    }

    #[test]
    fn initial_state_is_x0_everywhere() {
        let n = 3;
        let coeffs = busy_coeffs(n);
        let ens = integrate(&coeffs, &diffusive_family(n), &single_control(8), &noise(n, 1.0, 8, 20, 4), Scheme::SemiImplicit).unwrap();
        for p in 0..20 {
            assert_eq!(ens.state(p, 0), coeffs.x0.as_slice());
        }
    }

    #[test]
    fn scheme_consistent_residual_is_roundoff() {
        let n = 4;
        let coeffs = busy_coeffs(n);
        let family = diffusive_family(n);
        let nz = noise(n, 1.0, 32, 50, 5);
        let etas = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.3, -1.0, 2.0, 0.5], vec![0.0; 4]];
        for scheme in [Scheme::SemiImplicit, Scheme::Explicit] {
            let ens = integrate(&coeffs, &family, &single_control(32), &nz, scheme).unwrap();
            let r = weak_residual(&ens, &coeffs, &family, &etas, scheme).unwrap();
            assert!(r[0] <= 1e-9 && r[1] <= 1e-9, "{scheme:?}: {r:?}");
            assert_eq!(r[2], 0.0);
        }
    }

    #[test]
    fn mismatched_scheme_residual_is_first_order() {
        let n = 3;
        let coeffs = CoefficientSet::zero(n).with_x0(vec![1.0, -1.0, 0.5]).with_b(Coef::constant(vec![0.2, 0.1, 0.0]));
        let family = diffusive_family(n);
        let eta = vec![vec![1.0, 1.0, 1.0]];
        let residual = |steps: usize| {
            let ens = integrate(&coeffs, &family, &single_control(steps), &noise(n, 1.0, steps, 4, 6), Scheme::Explicit).unwrap();
            weak_residual(&ens, &coeffs, &family, &eta, Scheme::SemiImplicit).unwrap()[0]
        };
        let (r1, r2) = (residual(64), residual(128));
        assert!((r1 / r2 - 2.0).abs() <= 0.3, "{r1} / {r2}");
        assert!(weak_residual(&integrate(&coeffs, &family, &single_control(8), &noise(n, 1.0, 8, 2, 6), Scheme::Explicit).unwrap(), &coeffs, &family, &[], Scheme::Explicit).is_err());
    }

    #[test]
    fn solution_map_is_affine_in_x0() {
        let n = 3;
        let base = busy_coeffs(n);
        let family = diffusive_family(n);
        let nz = noise(n, 1.0, 16, 10, 7);
        let ctrl = single_control(16);
        let run = |x0: Vec<f64>| integrate(&base.clone().with_x0(x0), &family, &ctrl, &nz, Scheme::SemiImplicit).unwrap();
        let e0 = run(vec![0.0; n]);
        let e1 = run(vec![1.0, 0.0, 2.0]);
        let e2 = run(vec![2.0, 0.0, 4.0]);
        for p in 0..10 {
            for k in 0..=16 {
                for i in 0..n {
                    let d1 = e1.state(p, k)[i] - e0.state(p, k)[i];
                    let d2 = e2.state(p, k)[i] - e0.state(p, k)[i];
                    assert_abs_diff_eq!(d2, 2.0 * d1, epsilon = 1e-10 * (1.0 + d2.abs()));
                }
            }
        }
    }

    #[test]
    fn future_noise_does_not_affect_past_states() {
        let n = 3;
        let coeffs = busy_coeffs(n);
        let family = diffusive_family(n);
        let nz = noise(n, 1.0, 32, 1, 8);
        let ctrl = single_control(32);
        let integrator = PathIntegrator::new(&coeffs, &family, &ctrl, nz.grid(), Scheme::SemiImplicit).unwrap();
        let original = nz.path(0);
        let altered = original.with_tail_replaced(nz.source(), 20, 77);
        let (s1, _) = integrator.run(original, 0).unwrap();
        let (s2, _) = integrator.run(&altered, 0).unwrap();
        assert_eq!(s1[..=20 * n + n - 1], s2[..=20 * n + n - 1]);
        assert_ne!(s1[21 * n..], s2[21 * n..]);
    }

    #[test]
    fn strong_convergence_against_fine_grid() {
        let n = 2;
        let coeffs = CoefficientSet::zero(n)
            .with_a(Coef::deterministic(|t, _| 0.5 * t.cos()))
            .with_b(Coef::deterministic(|t, _| vec![t.sin(), 1.0]))
            .with_sigma(Coef::constant(vec![0.5, 0.3]))
            .with_g(Coef::constant(DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, 0.3])))
            .with_x0(vec![1.0, 0.5]);
        let family = diffusive_family(n);
        let cov = CovarianceProcess::default_modulated(NuclearCovariance::dyadic(n));
        let fine = Arc::new(sample_paths(&cov, &TimeGrid::uniform(1.0, 512).unwrap(), 400, 9).unwrap());
        let reference = integrate(&coeffs, &family, &single_control(512), &fine, Scheme::SemiImplicit).unwrap();
        let errors: Vec<f64> = [16usize, 32, 64]
            .iter()
            .map(|&steps| {
                let r = 512 / steps;
                let grid = TimeGrid::uniform(1.0, steps).unwrap();
                let source = crate::noise::NoiseSource::new(cov.clone(), grid, 9);
                let paths: Vec<MartingalePath> = fine.paths().iter().map(|p| coarsen_path(&source, p, r)).collect();
                let coarse = Arc::new(MartingaleEnsemble::from_paths(source, paths).unwrap());
                let ens = integrate(&coeffs, &family, &single_control(steps), &coarse, Scheme::SemiImplicit).unwrap();
                let mse: f64 = (0..400)
                    .map(|p| {
                        let a = ens.state(p, steps);
                        let b = reference.state(p, 512);
                        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                    })
                    .sum::<f64>()
                    / 400.0;
                mse.sqrt()
            })
            .collect();
        let order = (errors[0] / errors[2]).log2() / 2.0;
        assert!(order >= 0.5, "{errors:?} order {order}");
    }

    fn coarsen_path(source: &crate::noise::NoiseSource, p: &MartingalePath, r: usize) -> MartingalePath {
        // re-sum driver increments; ΔM is recomputed from the coarse left-point root
        let n = p.dim();
        let steps = p.steps() / r;
        let mut dw = vec![0.0; steps * n];
        for k in 0..steps {
            for s in 0..r {
                for i in 0..n {
                    dw[k * n + i] += p.dw(k * r + s)[i];
                }
            }
        }
        source.path_from_increments(dw).unwrap()
    }

    #[test]
    fn envelope_constants_printed_values() {
        let bounds = CoefficientBounds { k_a: 1.0, k_b: 1.0, k_sigma: 1.0, k_g: 1.0 };
        let c = envelope_constants(1.0, &bounds, 1.0, 0.1);
        assert_abs_diff_eq!(c.c1, f64::exp(0.62), epsilon = 1e-14);
        assert_abs_diff_eq!(c.c2, 3.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_problem_moment_check() {
        let n = 2;
        let coeffs = CoefficientSet::zero(n);
        let family = diffusive_family(n);
        let ens = integrate(&coeffs, &family, &single_control(16), &noise(n, 1.0, 16, 100, 10), Scheme::SemiImplicit).unwrap();
        let r = moment_bound_check(&ens, &coeffs, &family, 0.25, 0.25).unwrap();
        assert_eq!(r.empirical_sup, 0.0);
        assert!(r.pass);
        assert!(moment_bound_check(&ens, &coeffs, &family, 0.3, 0.25).is_err());
    }

    #[test]
    fn envelopes_hold_for_bounded_coefficients() {
        let n = 4;
        let coeffs = busy_coeffs(n).with_bounds(CoefficientBounds { k_a: 0.6, k_b: 2.2, k_sigma: 0.5, k_g: 0.5 });
        let set = ControlSet::scalar(&[0.0]).unwrap();
        assert!(coeffs.check_bounds(&set, 1.0, 500, 1).pass);
        let family = diffusive_family(n);
        let ens = integrate(&coeffs, &family, &single_control(64), &noise(n, 1.0, 64, 2000, 11), Scheme::SemiImplicit).unwrap();
        assert!(moment_bound_check(&ens, &coeffs, &family, 0.25, 0.125).unwrap().pass);
        assert!(tail_moment_check(&ens, &coeffs, &family, 0.25, 0.125).unwrap().pass);
        let triple = GelfandTriple::new((1..=n).map(|i| i as f64).collect()).unwrap();
        let e = energy_check(&ens, &coeffs, &family, &triple, 0.25, 0.125).unwrap();
        assert!(e.pass, "{e:?}");
    }

    #[test]
    fn bound_check_detects_violation() {
        let coeffs = CoefficientSet::zero(2).with_a(Coef::constant(2.0)).with_bounds(CoefficientBounds { k_a: 1.0, ..Default::default() });
        let r = coeffs.check_bounds(&ControlSet::scalar(&[0.0]).unwrap(), 1.0, 10, 1);
        assert!(!r.pass);
        assert_abs_diff_eq!(r.worst_margin, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_implicit_matrix_is_reported() {
        // I − Δt·A = 0 for A = I/Δt
        let steps = 4;
        let family = OperatorFamily::constant(DMatrix::identity(2, 2) * steps as f64, 1.0, consts()).unwrap();
        let err = integrate(&CoefficientSet::zero(2), &family, &single_control(steps), &noise(2, 1.0, steps, 2, 1), Scheme::SemiImplicit).unwrap_err();
        assert!(matches!(err, Error::SingularSystem { step: 0, .. }));
    }

    #[test]
    fn control_grid_mismatch_is_rejected() {
        let err = integrate(&CoefficientSet::zero(2), &diffusive_family(2), &single_control(8), &noise(2, 1.0, 16, 2, 1), Scheme::SemiImplicit);
        assert!(err.is_err());
    }

    #[test]
    fn stats_csv_is_deterministic() {
        let n = 3;
        let coeffs = busy_coeffs(n);
        let family = diffusive_family(n);
        let render = || {
            let ens = integrate(&coeffs, &family, &single_control(16), &noise(n, 1.0, 16, 64, 12), Scheme::SemiImplicit).unwrap();
            let mut buf = Vec::new();
            ens.write_stats_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(render(), render());
    }
}
