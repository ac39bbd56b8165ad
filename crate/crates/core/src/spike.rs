//! Spike variations of a control and the experiments built on them: the
//! variation `ξ = x_ε − x*`, its `O(ε)` second moment, the first-order
//! expansion of the cost, brute-force optimisation over piecewise-constant
//! controls and the pointwise Hamiltonian check.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::AdjointTriple;
use crate::control::{ControlProcess, ControlSet, FeedbackRule};
use crate::error::{check_dim, Error, Result};
use crate::forward::{
    envelope_constants, integrate, CoefficientSet, CoefficientTable, ForwardEnsemble, OperatorTable, PathIntegrator, Scheme,
};
use crate::grid::TimeGrid;
use crate::hamiltonian::cost_estimate;
use crate::hilbert::{hs_inner_unchecked, OperatorFamily};
use crate::linalg::{dot, matvec, matvec_add, norm_sq};
use crate::noise::{MartingaleEnsemble, NoiseSource};
use crate::stats::{linear_fit, Estimate, MeanAccumulator};

/// Value used on the spike window.
#[derive(Clone)]
pub enum SpikeValue {
    /// Fixed element of `U`, by index.
    Fixed(usize),
    /// `U`-index chosen from `x*(t₀)`.
    Feedback(Arc<dyn Fn(&[f64]) -> usize + Send + Sync>),
}

impl fmt::Debug for SpikeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(i) => write!(f, "Fixed({i})"),
            Self::Feedback(_) => write!(f, "Feedback(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpikeSpec {
    pub t0: f64,
    pub eps: f64,
    pub value: SpikeValue,
    pub base: ControlProcess,
}

impl SpikeSpec {
    pub fn fixed(base: ControlProcess, t0: f64, eps: f64, index: usize) -> Self {
        Self { t0, eps, value: SpikeValue::Fixed(index), base }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    /// Step window `k₀..k₁` of the spike on `grid`.
    pub fn window(&self, grid: &TimeGrid) -> Result<(usize, usize)> {
        if self.t0 + self.eps > grid.horizon() * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!("spike [{}, {}] leaves [0, {}]", self.t0, self.t0 + self.eps, grid.horizon())));
        }
        let k0 = grid.index_of(self.t0).ok_or_else(|| Error::InvalidGrid(format!("t0 = {} is not a grid point", self.t0)))?;
        let k1 = grid
            .index_of(self.t0 + self.eps)
            .ok_or_else(|| Error::InvalidGrid(format!("t0 + eps = {} is not a grid point", self.t0 + self.eps)))?;
        if k1 <= k0 {
            return Err(Error::InvalidInput(format!("spike width {} is below one step", self.eps)));
        }
        Ok((k0, k1))
    }
}

/// `u_ε`: the base control off the window, the spike value on it.
pub fn spike_control(spec: &SpikeSpec, grid: &TimeGrid) -> Result<ControlProcess> {
    spec.base.validate(grid.steps())?;
    let (k0, k1) = spec.window(grid)?;
    match &spec.value {
        SpikeValue::Fixed(i) => spec.base.with_window(k0, k1, *i),
        SpikeValue::Feedback(f) => {
            let f = Arc::clone(f);
            spec.base.with_feedback(FeedbackRule::new(k0, k1, k0, move |x| f(x)))
        }
    }
}

/// `x*` and `x_ε` on common noise.
#[derive(Clone, Debug)]
pub struct VariationEnsemble {
    base: ForwardEnsemble,
    perturbed: ForwardEnsemble,
    window: (usize, usize),
    eps: f64,
}

impl VariationEnsemble {
    pub fn base(&self) -> &ForwardEnsemble {
        &self.base
    }

    pub fn perturbed(&self) -> &ForwardEnsemble {
        &self.perturbed
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn t0(&self) -> f64 {
        self.base.grid().time(self.window.0)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn xi(&self, p: usize, k: usize) -> Vec<f64> {
        self.perturbed.state(p, k).iter().zip(self.base.state(p, k)).map(|(a, b)| a - b).collect()
    }

    pub fn xi_moment(&self, k: usize) -> Estimate {
        (0..self.base.n_paths()).map(|p| norm_sq(&self.xi(p, k))).collect::<MeanAccumulator>().estimate()
    }

    /// `sup_{t ∈ [from, T]} E|ξ(t)|²` with the standard error at the argmax.
    pub fn sup_moment_from(&self, from: usize) -> Estimate {
        (from..=self.base.steps())
            .map(|k| self.xi_moment(k))
            .fold(Estimate { mean: f64::NEG_INFINITY, stderr: 0.0 }, |best, e| if e.mean > best.mean { e } else { best })
    }

    /// `max_{t ≤ t₀} |ξ(t)|` over all paths.
    pub fn max_before_spike(&self) -> f64 {
        (0..self.base.n_paths())
            .flat_map(|p| (0..=self.window.0).map(move |k| (p, k)))
            .map(|(p, k)| self.xi(p, k).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max)
    }

    /// Largest deviation of `ξ_{k+1}` from its one-step recomputation
    ///
    /// ```text
    /// ξ_{k+1} = R[(1+Δt a*)ξ + Δt(Δa x_ε + Δb) + (⟨σ*, ξ⟩ + ⟨Δσ, x_ε⟩)ΔM + Δg ΔM]
    /// ```
    ///
    /// relative to `1 + |ξ_{k+1}|`; the explicit scheme adds `Δt A ξ` instead.
    pub fn dynamics_residual(&self, coeffs: &CoefficientSet, family: &OperatorFamily) -> Result<f64> {
        let grid = self.base.grid();
        let n = self.base.dim();
        let set = self.base.control().set();
        let table = CoefficientTable::new(coeffs, grid, set);
        let ops = OperatorTable::new(family, grid, self.base.scheme())?;
        let noise = self.base.noise();
        let worst: Vec<f64> = (0..self.base.n_paths())
            .into_par_iter()
            .map(|p| {
                let path = noise.path(p);
                let mut worst = 0.0f64;
                let mut rhs = vec![0.0; n];
                let mut next = vec![0.0; n];
                for k in 0..grid.steps() {
                    let dt = grid.dt(k);
                    let omega = path.omega(k);
                    let (js, je) = (self.base.control_index(p, k), self.perturbed.control_index(p, k));
                    let xi = self.xi(p, k);
                    let xe = self.perturbed.state(p, k);
                    let a = table.a(k, js, &omega);
                    let da = table.a(k, je, &omega) - a;
                    let (bs, be) = (table.b(k, js, &omega), table.b(k, je, &omega));
                    let (ss, se) = (table.sigma(k, js, &omega), table.sigma(k, je, &omega));
                    let dg = table.g(k, je, &omega).into_owned() - table.g(k, js, &omega).into_owned();
                    let dm = path.dm(k);
                    let mult = dot(&ss, &xi) + (0..n).map(|i| (se[i] - ss[i]) * xe[i]).sum::<f64>();
                    for i in 0..n {
                        rhs[i] = (1.0 + dt * a) * xi[i] + dt * (da * xe[i] + be[i] - bs[i]) + mult * dm[i];
                    }
                    matvec_add(&dg, dm, &mut rhs);
                    let op = ops.step_operator(k, &omega, &path.omega(k + 1), p)?;
                    match self.base.scheme() {
                        Scheme::SemiImplicit => matvec(&op, &rhs, &mut next),
                        Scheme::Explicit => {
                            matvec(&op, &xi, &mut next);
                            next.iter_mut().zip(&rhs).for_each(|(v, r)| *v = r + dt * *v);
                        }
                    }
                    let actual = self.xi(p, k + 1);
                    let err = actual.iter().zip(&next).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    worst = worst.max(err / (1.0 + norm_sq(&actual).sqrt()));
                }
                Ok(worst)
            })
            .collect::<Result<_>>()?;
        Ok(worst.into_iter().fold(0.0, f64::max))
    }
}

/// Integrates `x_ε` on the noise of `base` and pairs it with `base`.
pub fn variation_against(spec: &SpikeSpec, coeffs: &CoefficientSet, family: &OperatorFamily, base: &ForwardEnsemble) -> Result<VariationEnsemble> {
    if !spec.base.same_schedule(base.control()) {
        return Err(Error::Mismatch("spike base control differs from the base ensemble's control".into()));
    }
    let window = spec.window(base.grid())?;
    let control = spike_control(spec, base.grid())?;
    let perturbed = integrate(coeffs, family, &control, base.noise(), base.scheme())?;
    Ok(VariationEnsemble { base: base.clone(), perturbed, window, eps: spec.eps })
}

/// Integrates `x*` and `x_ε` on `noise`.
pub fn variation_ensemble(
    spec: &SpikeSpec,
    coeffs: &CoefficientSet,
    family: &OperatorFamily,
    noise: &Arc<MartingaleEnsemble>,
    scheme: Scheme,
) -> Result<VariationEnsemble> {
    let base = integrate(coeffs, family, &spec.base, noise, scheme)?;
    variation_against(spec, coeffs, family, &base)
}

/// Envelope `C₅ C₆(ε) ε` for `sup_{[t₀+ε, T]} E|ξ|²`, with
/// `C₅ = exp((λ + 2k_a + k₃² tr Q)τ)`, `τ = T − t₀ − ε` and
/// `C₆(ε) = e^{(λ + 4k_a² + k₂² + 2k_a + 3k₃² tr Q)ε}[(6k₃² tr Q + 1) C₁(E|x*(t₀)|² + C₂ε) + 1 + 12k₄²]`.
pub fn xi_envelope(lambda: f64, coeffs: &CoefficientSet, trace_q: f64, horizon: f64, t0: f64, eps: f64, start_moment: f64) -> f64 {
    let b = coeffs.bounds;
    let c = envelope_constants(lambda, &b, trace_q, eps);
    let tau = horizon - t0 - eps;
    let c5 = ((lambda + 2.0 * b.k_a + b.k_sigma * b.k_sigma * trace_q) * tau).exp();
    let growth = (lambda + 4.0 * b.k_a * b.k_a + b.k_b * b.k_b + 2.0 * b.k_a + 3.0 * b.k_sigma * b.k_sigma * trace_q) * eps;
    let c6 = growth.exp()
        * ((6.0 * b.k_sigma * b.k_sigma * trace_q + 1.0) * c.c1 * (start_moment + c.c2 * eps) + 1.0 + 12.0 * b.k_g * b.k_g);
    c5 * c6 * eps
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub eps: f64,
    /// `sup_{[t₀+ε, T]} E|ξ_ε|²`.
    pub sup_xi: f64,
    pub stderr: f64,
    pub envelope: f64,
    pub within_envelope: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `log sup E|ξ|²` against `log ε`; NaN when degenerate.
    pub slope: f64,
    pub intercept: f64,
    /// `sup(2ε) / sup(ε)` for every pair of listed widths differing by a factor 2.
    pub doubling_ratios: Vec<f64>,
    /// All sups vanish (no coefficient difference reached the state).
    pub degenerate: bool,
    pub paths: usize,
}

#[derive(Clone)]
struct MomentSums {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl MomentSums {
    fn new(len: usize) -> Self {
        Self { sum: vec![0.0; len], sum_sq: vec![0.0; len] }
    }

    fn push(&mut self, k: usize, v: f64) {
        self.sum[k] += v;
        self.sum_sq[k] += v * v;
    }

    fn merge(&mut self, other: &Self) {
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.sum_sq.iter_mut().zip(&other.sum_sq).for_each(|(a, b)| *a += b);
    }

    fn estimate(&self, k: usize, n: usize) -> Estimate {
        let nf = n as f64;
        let mean = self.sum[k] / nf;
        let var = if n > 1 { ((self.sum_sq[k] - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
        Estimate { mean, stderr: (var / nf).sqrt() }
    }
}

const CHUNK: usize = 64;

/// Measures `sup_{[t₀+ε, T]} E|ξ_ε|²` for every `ε` in `eps_list` on
/// `n_paths` streamed paths of `source` (common noise across widths).
pub fn xi_scaling_study(
    template: &SpikeSpec,
    eps_list: &[f64],
    coeffs: &CoefficientSet,
    family: &OperatorFamily,
    source: &NoiseSource,
    n_paths: usize,
    scheme: Scheme,
) -> Result<ScalingReport> {
    if eps_list.len() < 4 {
        return Err(Error::InvalidInput("scaling study needs at least four widths".into()));
    }
    if n_paths < 2 {
        return Err(Error::InvalidInput("scaling study needs at least two paths".into()));
    }
    let grid = source.grid();
    let steps = grid.steps();
    let n = coeffs.dim();
    check_dim(n, source.dim())?;
    let specs: Vec<SpikeSpec> = eps_list.iter().map(|e| template.with_eps(*e)).collect();
    let windows: Vec<(usize, usize)> = specs.iter().map(|s| s.window(grid)).collect::<Result<_>>()?;
    let controls: Vec<ControlProcess> = specs.iter().map(|s| spike_control(s, grid)).collect::<Result<_>>()?;
    let base = PathIntegrator::new(coeffs, family, &template.base, grid, scheme)?;
    let spiked: Vec<PathIntegrator<'_>> =
        controls.iter().map(|c| PathIntegrator::new(coeffs, family, c, grid, scheme)).collect::<Result<_>>()?;
    let k0 = windows[0].0;

    let n_chunks = n_paths.div_ceil(CHUNK);
    let partial: Vec<(Vec<MomentSums>, MomentSums)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sums = vec![MomentSums::new(steps + 1); specs.len()];
            let mut start = MomentSums::new(1);
            for p in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
                let path = source.path(p);
                let (xs, _) = base.run(&path, p)?;
                start.push(0, norm_sq(&xs[k0 * n..(k0 + 1) * n]));
                for (e, integ) in spiked.iter().enumerate() {
                    let (xe, _) = integ.run(&path, p)?;
                    for k in 0..=steps {
                        let d: f64 = (0..n).map(|i| (xe[k * n + i] - xs[k * n + i]).powi(2)).sum();
                        sums[e].push(k, d);
                    }
                }
            }
            Ok((sums, start))
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![MomentSums::new(steps + 1); specs.len()];
    let mut start = MomentSums::new(1);
    for (s, st) in &partial {
        sums.iter_mut().zip(s).for_each(|(a, b)| a.merge(b));
        start.merge(st);
    }
    let start_moment = start.estimate(0, n_paths).mean;
    let trace_q = source.covariance().bound().trace();
    let lambda = family.constants.lambda;

    let points: Vec<ScalingPoint> = specs
        .iter()
        .zip(&windows)
        .zip(&sums)
        .map(|((spec, &(_, k1)), s)| {
            let sup = (k1..=steps)
                .map(|k| s.estimate(k, n_paths))
                .fold(Estimate { mean: f64::NEG_INFINITY, stderr: 0.0 }, |b, e| if e.mean > b.mean { e } else { b });
            let envelope = xi_envelope(lambda, coeffs, trace_q, grid.horizon(), spec.t0, spec.eps, start_moment);
            ScalingPoint {
                eps: spec.eps,
                sup_xi: sup.mean,
                stderr: sup.stderr,
                envelope,
                within_envelope: sup.mean <= envelope * (1.0 + 3.0 * sup.relative_stderr()),
            }
        })
        .collect();
    let degenerate = points.iter().all(|p| p.sup_xi <= 0.0);
    let (slope, intercept) = if degenerate || points.iter().any(|p| p.sup_xi <= 0.0) {
        (f64::NAN, f64::NAN)
    } else {
        let lx: Vec<f64> = points.iter().map(|p| p.eps.ln()).collect();
        let ly: Vec<f64> = points.iter().map(|p| p.sup_xi.ln()).collect();
        linear_fit(&lx, &ly)
    };
    let mut doubling_ratios = Vec::new();
    for a in &points {
        if let Some(b) = points.iter().find(|b| (b.eps / a.eps - 2.0).abs() < 1e-9) {
            doubling_ratios.push(b.sup_xi / a.sup_xi);
        }
    }
    Ok(ScalingReport { points, slope, intercept, doubling_ratios, degenerate, paths: n_paths })
}

pub const VARIATIONAL_TERMS: [&str; 5] = ["ell", "a", "sigma", "b", "g"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariationalReport {
    pub eps: f64,
    /// The five first-order terms (`ℓ`, `a`, `σ`, `b`, `g` differences) evaluated at `x*`.
    pub terms: [Estimate; 5],
    pub total: Estimate,
    /// Same sum with `x_ε` in place of `x*`; equals the discrete cost
    /// difference up to regression error.
    pub total_perturbed: Estimate,
    /// `total_perturbed − total`, path by path.
    pub remainder: Estimate,
    /// Direct common-noise estimate of `J(u_ε) − J(u*)`.
    pub cost_difference: Estimate,
}

/// Per-path first-order terms over the spike window with state `x`.
fn first_order_terms(adj: &AdjointTriple, var: &VariationEnsemble, coeffs: &CoefficientSet, p: usize, use_perturbed: bool) -> [f64; 5] {
    let base = var.base();
    let grid = base.grid();
    let table = CoefficientTable::new(coeffs, grid, base.control().set());
    let path = base.noise().path(p);
    let n = base.dim();
    let mut out = [0.0; 5];
    let (k0, k1) = var.window();
    for k in k0..k1 {
        let (js, je) = (base.control_index(p, k), var.perturbed().control_index(p, k));
        if js == je {
            continue;
        }
        let dt = grid.dt(k);
        let omega = path.omega(k);
        let x = if use_perturbed { var.perturbed().state(p, k) } else { base.state(p, k) };
        let y = adj.y_ahead(p, k);
        let zq = adj.z_q(p, k);
        let root = adj.root(p, k);
        let s = hs_inner_unchecked(&root, &zq);
        let (ls, le) = (table.ell(k, js), table.ell(k, je));
        let (ss, se) = (table.sigma(k, js, &omega), table.sigma(k, je, &omega));
        let (bs, be) = (table.b(k, js, &omega), table.b(k, je, &omega));
        let da = table.a(k, je, &omega) - table.a(k, js, &omega);
        let dg = table.g(k, je, &omega).into_owned() - table.g(k, js, &omega).into_owned();
        out[0] += dt * (0..n).map(|i| (le[i] - ls[i]) * x[i]).sum::<f64>();
        out[1] += dt * da * dot(y, x);
        out[2] += dt * s * (0..n).map(|i| (se[i] - ss[i]) * x[i]).sum::<f64>();
        out[3] += dt * (0..n).map(|i| (be[i] - bs[i]) * y[i]).sum::<f64>();
        out[4] += dt * hs_inner_unchecked(&(dg * &root), &zq);
    }
    out
}

/// First-order expansion of `J(u_ε) − J(u*)` around `u*` through the adjoint.
pub fn variational_inequality(
    coeffs: &CoefficientSet,
    adj: &AdjointTriple,
    var: &VariationEnsemble,
) -> Result<VariationalReport> {
    if !adj.forward().noise().same_noise(var.base().noise()) || !adj.forward().control().same_schedule(var.base().control()) {
        return Err(Error::Mismatch("adjoint was not solved on the variation's base ensemble".into()));
    }
    let per_path: Vec<([f64; 5], [f64; 5])> = (0..var.base().n_paths())
        .into_par_iter()
        .map(|p| (first_order_terms(adj, var, coeffs, p, false), first_order_terms(adj, var, coeffs, p, true)))
        .collect();
    let est = |f: &dyn Fn(&([f64; 5], [f64; 5])) -> f64| per_path.iter().map(f).collect::<MeanAccumulator>().estimate();
    let terms = std::array::from_fn(|i| est(&|t| t.0[i]));
    let total = est(&|t| t.0.iter().sum());
    let total_perturbed = est(&|t| t.1.iter().sum());
    let cb = crate::hamiltonian::path_costs(var.base(), coeffs)?;
    let cp = crate::hamiltonian::path_costs(var.perturbed(), coeffs)?;
    let cost_difference = cp.iter().zip(&cb).map(|(a, b)| a - b).collect::<MeanAccumulator>().estimate();
    Ok(VariationalReport {
        eps: var.eps(),
        terms,
        total,
        total_perturbed,
        remainder: est(&|t| t.1.iter().sum::<f64>() - t.0.iter().sum::<f64>()),
        cost_difference,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SearchMode {
    /// Every `|U|^{intervals}` schedule, refused above `budget` evaluations.
    Exhaustive { budget: u128 },
    /// Interval-wise sweeps until no single change improves the cost.
    CoordinateDescent { max_sweeps: usize },
}

impl Default for SearchMode {
    fn default() -> Self {
        Self::Exhaustive { budget: 100_000 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Candidate {
    pub indices: Vec<usize>,
    pub cost: Estimate,
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    pub control: ControlProcess,
    pub indices: Vec<usize>,
    pub cost: Estimate,
    pub mode: SearchMode,
    pub evaluations: usize,
    /// Every evaluated schedule, in evaluation order.
    pub candidates: Vec<Candidate>,
    /// Coordinate descent stopped at a local minimum (always false when exhaustive).
    pub local_only: bool,
}

/// Searches piecewise-constant controls with `n_intervals` equal intervals
/// for the smallest Monte Carlo cost on the common noise `noise`. Ties go to
/// the lexicographically smallest index sequence.
pub fn optimize_control(
    coeffs: &CoefficientSet,
    family: &OperatorFamily,
    noise: &Arc<MartingaleEnsemble>,
    set: &ControlSet,
    n_intervals: usize,
    mode: SearchMode,
    scheme: Scheme,
) -> Result<OptimizationResult> {
    let steps = noise.grid().steps();
    if n_intervals == 0 || !steps.is_multiple_of(n_intervals) {
        return Err(Error::InvalidGrid(format!("{steps} steps cannot be split into {n_intervals} control intervals")));
    }
    let evaluate = |indices: &[usize]| -> Result<Estimate> {
        let control = ControlProcess::piecewise(set.clone(), steps, indices)?;
        cost_estimate(&integrate(coeffs, family, &control, noise, scheme)?, coeffs)
    };
    let better = |a: &Candidate, b: &Candidate| a.cost.mean < b.cost.mean || (a.cost.mean == b.cost.mean && a.indices < b.indices);
    let mut candidates = Vec::new();
    let (best, local_only) = match mode {
        SearchMode::Exhaustive { budget } => {
            let total = (set.len() as u128).checked_pow(n_intervals as u32).unwrap_or(u128::MAX);
            if total > budget {
                return Err(Error::BudgetExceeded { evaluations: total, budget });
            }
            let mut best: Option<Candidate> = None;
            for code in 0..total as usize {
                let mut indices = vec![0; n_intervals];
                let mut c = code;
                for slot in indices.iter_mut().rev() {
                    *slot = c % set.len();
                    c /= set.len();
                }
                let cand = Candidate { cost: evaluate(&indices)?, indices };
                if best.as_ref().is_none_or(|b| better(&cand, b)) {
                    best = Some(cand.clone());
                }
                candidates.push(cand);
            }
            (best.expect("U is non-empty"), false)
        }
        SearchMode::CoordinateDescent { max_sweeps } => {
            let start = vec![0; n_intervals];
            let mut best = Candidate { cost: evaluate(&start)?, indices: start };
            candidates.push(best.clone());
            for _ in 0..max_sweeps {
                let mut improved = false;
                for slot in 0..n_intervals {
                    for u in 0..set.len() {
                        if u == best.indices[slot] {
                            continue;
                        }
                        let mut indices = best.indices.clone();
                        indices[slot] = u;
                        let cand = Candidate { cost: evaluate(&indices)?, indices };
                        candidates.push(cand.clone());
                        if better(&cand, &best) {
                            best = cand;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
            (best, true)
        }
    };
    Ok(OptimizationResult {
        control: ControlProcess::piecewise(set.clone(), steps, &best.indices)?,
        indices: best.indices,
        cost: best.cost,
        mode,
        evaluations: candidates.len(),
        candidates,
        local_only,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Margin {
    pub k: usize,
    pub t: f64,
    pub u: usize,
    /// `E[H(t, x*, u, y, zQ^{1/2}) − H(t, x*, u*, y, zQ^{1/2})]`.
    pub delta: f64,
    pub stderr: f64,
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaximumPrincipleReport {
    pub margins: Vec<Margin>,
    /// `(k, u)` pairs with `Δ > 3·stderr`.
    pub violations: Vec<(usize, usize)>,
}

impl MaximumPrincipleReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "u", "margin", "stderr", "violation"])?;
        for m in &self.margins {
            w.write_record([format!("{:.17e}", m.t), m.u.to_string(), format!("{:.17e}", m.delta), format!("{:.17e}", m.stderr), m.violation.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Absolute floor below which a positive margin is treated as roundoff.
const MARGIN_FLOOR: f64 = 1e-12;

/// `H(u) − H(u*)` from coefficient differences alone; the `x`-pairing with
/// the `u`-independent parts cancels exactly.
#[allow(clippy::too_many_arguments)]
fn hamiltonian_gap(table: &CoefficientTable<'_>, k: usize, js: usize, ju: usize, omega: &crate::hilbert::Omega, x: &[f64], y: &[f64], zq: &DMatrix<f64>, root: &DMatrix<f64>) -> f64 {
    if js == ju {
        return 0.0;
    }
    let n = x.len();
    let (ls, lu) = (table.ell(k, js), table.ell(k, ju));
    let da = table.a(k, ju, omega) - table.a(k, js, omega);
    let (bs, bu) = (table.b(k, js, omega), table.b(k, ju, omega));
    let (ss, su) = (table.sigma(k, js, omega), table.sigma(k, ju, omega));
    let dg = table.g(k, ju, omega).into_owned() - table.g(k, js, omega).into_owned();
    let s = hs_inner_unchecked(root, zq);
    -(0..n).map(|i| (lu[i] - ls[i]) * x[i]).sum::<f64>()
        - da * dot(x, y)
        - (0..n).map(|i| (bu[i] - bs[i]) * y[i]).sum::<f64>()
        - s * (0..n).map(|i| (su[i] - ss[i]) * x[i]).sum::<f64>()
        - hs_inner_unchecked(&(dg * root), zq)
}

/// Pointwise check of `H(t, x*, u, y*, z*Q^{1/2}) ≤ H(t, x*, u*, y*, z*Q^{1/2})`
/// on every grid step and every `u ∈ U`, with `y*` read one step ahead.
pub fn maximum_principle_check(coeffs: &CoefficientSet, adj: &AdjointTriple, set: &ControlSet) -> Result<MaximumPrincipleReport> {
    let fwd = adj.forward();
    if fwd.control().set() != set {
        return Err(Error::InvalidInput("u* does not take values in the given control set".into()));
    }
    let grid = fwd.grid();
    let table = CoefficientTable::new(coeffs, grid, set);
    let steps = grid.steps();
    let margins: Vec<Vec<Margin>> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let mut acc = vec![MeanAccumulator::default(); set.len()];
            for p in 0..fwd.n_paths() {
                let omega = fwd.noise().path(p).omega(k);
                let zq = adj.z_q(p, k);
                let root = adj.root(p, k);
                let js = fwd.control_index(p, k);
                for (u, a) in acc.iter_mut().enumerate() {
                    a.push(hamiltonian_gap(&table, k, js, u, &omega, fwd.state(p, k), adj.y_ahead(p, k), &zq, &root));
                }
            }
            acc.iter()
                .enumerate()
                .map(|(u, a)| {
                    let (delta, stderr) = (a.mean(), a.stderr());
                    Margin { k, t: grid.time(k), u, delta, stderr, violation: delta > 3.0 * stderr && delta > MARGIN_FLOOR }
                })
                .collect()
        })
        .collect();
    let margins: Vec<Margin> = margins.into_iter().flatten().collect();
    let violations = margins.iter().filter(|m| m.violation).map(|m| (m.k, m.u)).collect();
    Ok(MaximumPrincipleReport { margins, violations })
}
