//! Finite-dimensional Gelfand triple `V ⊂ K ⊂ V'`, drift operator families and
//! Hilbert–Schmidt algebra.
//!
//! The triple is realised on `ℝⁿ` with weights `νᵢ ≥ 1`:
//!
//! ```text
//! |y|²_V = Σ νᵢ yᵢ²     |y|²_K = Σ yᵢ²     |y|²_V' = Σ yᵢ² / νᵢ
//! ```
//!
//! so `|y|_V' ≤ |y|_K ≤ |y|_V` holds for every vector. All three norms share
//! the bilinear pairing `Σ yᵢ ηᵢ`, which doubles as the `V`–`V'` duality.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Path-local randomness handed to random coefficients.
///
/// `factor` is the value at the evaluation time of the coefficient-driving
/// scalar process, i.e. the first component `W₁(t)` of the Brownian driver.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Omega {
    pub factor: f64,
}

impl Omega {
    pub fn new(factor: f64) -> Self {
        Self { factor }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GelfandTriple {
    weights: Vec<f64>,
}

impl GelfandTriple {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("triple dimension must be positive".into()));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 1.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!("V-weight {i} must be >= 1, got {w}")));
        }
        Ok(Self { weights })
    }

    /// All weights equal to one: the three norms coincide.
    pub fn flat(dim: usize) -> Result<Self> {
        Self::new(vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn norm_v_sq(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.weights).map(|(v, w)| w * v * v).sum()
    }

    pub fn norm_k_sq(&self, y: &[f64]) -> f64 {
        y.iter().map(|v| v * v).sum()
    }

    pub fn norm_dual_sq(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.weights).map(|(v, w)| v * v / w).sum()
    }

    pub fn norm_v(&self, y: &[f64]) -> f64 {
        self.norm_v_sq(y).sqrt()
    }

    pub fn norm_k(&self, y: &[f64]) -> f64 {
        self.norm_k_sq(y).sqrt()
    }

    pub fn norm_dual(&self, y: &[f64]) -> f64 {
        self.norm_dual_sq(y).sqrt()
    }

    /// Norm of `A` as a map `V → V'`, i.e. the spectral norm of `N^{-1/2} A N^{-1/2}`
    /// with `N = diag(ν)`.
    pub fn operator_norm_v_to_dual(&self, a: &DMatrix<f64>) -> f64 {
        let n = self.dim();
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            a[(i, j)] / (self.weights[i].sqrt() * self.weights[j].sqrt())
        });
        scaled
            .singular_values()
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

pub type OperatorFn = dyn Fn(f64, &Omega) -> DMatrix<f64> + Send + Sync;

/// Constants of the coercivity and boundedness assumptions on `A(t, ω)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorConstants {
    pub alpha: f64,
    pub lambda: f64,
    pub k1: f64,
}

/// Drift operator `A(t, ω)` on `[0, T]` together with its declared constants.
#[derive(Clone)]
pub struct OperatorFamily {
    eval: Arc<OperatorFn>,
    dim: usize,
    horizon: f64,
    random: bool,
    pub constants: OperatorConstants,
}

impl fmt::Debug for OperatorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorFamily")
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("random", &self.random)
            .field("constants", &self.constants)
            .finish()
    }
}

impl OperatorFamily {
    pub fn constant(matrix: DMatrix<f64>, horizon: f64, constants: OperatorConstants) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidInput("operator matrix must be square".into()));
        }
        let dim = matrix.nrows();
        Ok(Self {
            eval: Arc::new(move |_, _| matrix.clone()),
            dim,
            horizon,
            random: false,
            constants,
        })
    }

    /// Deterministic, possibly time-dependent family `t ↦ A(t)`.
    pub fn time_dependent<F>(dim: usize, horizon: f64, constants: OperatorConstants, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(move |t, _| f(t)),
            dim,
            horizon,
            random: false,
            constants,
        }
    }

    /// Random family `(t, ω) ↦ A(t, ω)`.
    pub fn random<F>(dim: usize, horizon: f64, constants: OperatorConstants, f: F) -> Self
    where
        F: Fn(f64, &Omega) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(f),
            dim,
            horizon,
            random: true,
            constants,
        }
    }

    pub fn zero(dim: usize, horizon: f64, constants: OperatorConstants) -> Self {
        Self::time_dependent(dim, horizon, constants, move |_| DMatrix::zeros(dim, dim))
    }

    pub fn at(&self, t: f64, omega: &Omega) -> DMatrix<f64> {
        (self.eval)(t, omega)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_random(&self) -> bool {
        self.random
    }
}

/// Symmetric positive semi-definite trace-class covariance with its principal root.
#[derive(Clone, Debug, PartialEq)]
pub struct NuclearCovariance {
    matrix: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    trace: f64,
}

impl NuclearCovariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidInput("covariance must be square".into()));
        }
        let n = matrix.nrows();
        for i in 0..n {
            for j in 0..i {
                if matrix[(i, j)] != matrix[(j, i)] {
                    return Err(Error::InvalidInput(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let eig = SymmetricEigen::new(matrix.clone());
        if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
            if min < -1e-12 {
                return Err(Error::InvalidInput(format!(
                    "covariance has negative eigenvalue {min:e}"
                )));
            }
        }
        let roots = DVector::from_iterator(n, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
        let v = &eig.eigenvectors;
        let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
        let sqrt = (&s + s.transpose()) * 0.5;
        let trace = matrix.trace();
        let eigenvalues = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        Ok(Self { matrix, sqrt, eigenvalues, trace })
    }

    pub fn diagonal(spectrum: &[f64]) -> Result<Self> {
        if let Some(q) = spectrum.iter().find(|q| !(**q >= 0.0)) {
            return Err(Error::InvalidInput(format!("negative spectrum entry {q}")));
        }
        let n = spectrum.len();
        let matrix = DMatrix::from_diagonal(&DVector::from_row_slice(spectrum));
        let sqrt = DMatrix::from_diagonal(&DVector::from_iterator(n, spectrum.iter().map(|q| q.sqrt())));
        Ok(Self {
            trace: spectrum.iter().sum(),
            eigenvalues: spectrum.to_vec(),
            matrix,
            sqrt,
        })
    }

    /// Default spectrum `qᵢ = 2^{-i}`, `i = 1..n`.
    pub fn dyadic(n: usize) -> Self {
        let spectrum: Vec<f64> = (1..=n).map(|i| 0.5f64.powi(i as i32)).collect();
        Self::diagonal(&spectrum).expect("dyadic spectrum is non-negative")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `‖Q^{1/2}‖₂² = tr Q`.
    pub fn sqrt_hs_norm_sq(&self) -> f64 {
        self.trace
    }
}

/// Hilbert–Schmidt (Frobenius) pairing `⟨Φ₁, Φ₂⟩₂ = Σᵢⱼ (Φ₁)ᵢⱼ (Φ₂)ᵢⱼ`.
pub fn hs_inner(phi1: &DMatrix<f64>, phi2: &DMatrix<f64>) -> Result<f64> {
    check_dim(phi1.nrows(), phi2.nrows())?;
    check_dim(phi1.ncols(), phi2.ncols())?;
    Ok(hs_inner_unchecked(phi1, phi2))
}

#[inline]
pub(crate) fn hs_inner_unchecked(phi1: &DMatrix<f64>, phi2: &DMatrix<f64>) -> f64 {
    phi1.as_slice().iter().zip(phi2.as_slice()).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub pass: bool,
    /// Largest observed value of the left-hand side minus the right-hand side.
    pub worst_margin: f64,
    pub samples: usize,
}

const ASSUMPTION_TOL: f64 = 1e-9;

fn sample_point(rng: &mut ChaCha8Rng, horizon: f64, dim: usize) -> (f64, Omega, Vec<f64>) {
    let t = rng.random::<f64>() * horizon;
    let z: f64 = rng.sample(StandardNormal);
    let omega = Omega::new(2.0 * horizon.sqrt() * z);
    let mut y: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    y.iter_mut().for_each(|v| *v /= norm);
    (t, omega, y)
}

/// Samples `(t, ω, y)` with `|y|_K = 1` and checks
/// `2⟨A(t,ω)y, y⟩ + α|y|²_V − λ|y|²_K ≤ 1e-9`.
pub fn verify_coercivity(
    family: &OperatorFamily,
    triple: &GelfandTriple,
    samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    check_dim(triple.dim(), family.dim())?;
    if samples == 0 {
        return Err(Error::InvalidInput("samples must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let OperatorConstants { alpha, lambda, .. } = family.constants;
    let mut worst = f64::NEG_INFINITY;
    let mut ay = vec![0.0; triple.dim()];
    for _ in 0..samples {
        let (t, omega, y) = sample_point(&mut rng, family.horizon(), triple.dim());
        let a = family.at(t, &omega);
        crate::linalg::matvec(&a, &y, &mut ay);
        let lhs = 2.0 * crate::linalg::dot(&ay, &y) + alpha * triple.norm_v_sq(&y)
            - lambda * triple.norm_k_sq(&y);
        worst = worst.max(lhs);
    }
    Ok(AssumptionReport { pass: worst <= ASSUMPTION_TOL, worst_margin: worst, samples })
}

/// Samples `(t, ω, y)` and checks `|A(t,ω)y|_V' ≤ k₁|y|_V + 1e-9`.
pub fn verify_operator_bound(
    family: &OperatorFamily,
    triple: &GelfandTriple,
    samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    check_dim(triple.dim(), family.dim())?;
    if samples == 0 {
        return Err(Error::InvalidInput("samples must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k1 = family.constants.k1;
    let mut worst = f64::NEG_INFINITY;
    let mut ay = vec![0.0; triple.dim()];
    for _ in 0..samples {
        let (t, omega, y) = sample_point(&mut rng, family.horizon(), triple.dim());
        let a = family.at(t, &omega);
        crate::linalg::matvec(&a, &y, &mut ay);
        let margin = triple.norm_dual(&ay) - k1 * triple.norm_v(&y);
        worst = worst.max(margin);
    }
    Ok(AssumptionReport { pass: worst <= ASSUMPTION_TOL, worst_margin: worst, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn consts(alpha: f64, lambda: f64, k1: f64) -> OperatorConstants {
        OperatorConstants { alpha, lambda, k1 }
    }

    fn random_matrix(seed: u64, n: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, n, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn hs_inner_identity_and_zero() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(hs_inner(&i2, &i2).unwrap(), 2.0);
        let phi = random_matrix(1, 2);
        assert_eq!(hs_inner(&phi, &DMatrix::zeros(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn hs_inner_matches_elementwise_trace_loop() {
        let a = random_matrix(2, 4);
        let b = random_matrix(3, 4);
        // trace(aᵀ b) by an explicit double loop
        let mut oracle = 0.0;
        for i in 0..4 {
            for k in 0..4 {
                oracle += a[(k, i)] * b[(k, i)];
            }
        }
        assert_abs_diff_eq!(hs_inner(&a, &b).unwrap(), oracle, epsilon = 1e-13);
    }

    #[test]
    fn hs_inner_rejects_mismatched_shapes() {
        let a = DMatrix::<f64>::zeros(2, 2);
        let b = DMatrix::<f64>::zeros(3, 3);
        assert!(matches!(hs_inner(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn weights_below_one_are_rejected() {
        assert!(GelfandTriple::new(vec![1.0, 0.5]).is_err());
        assert!(GelfandTriple::new(vec![]).is_err());
    }

    #[test]
    fn weighted_negative_laplacian_is_coercive() {
        let nu: Vec<f64> = (1..=6).map(|i| i as f64).collect();
        let triple = GelfandTriple::new(nu.clone()).unwrap();
        for big_lambda in [1.0, 2.5] {
            let a = DMatrix::from_diagonal(&DVector::from_iterator(6, nu.iter().map(|v| -big_lambda * v)));
            let fam = OperatorFamily::constant(a, 1.0, consts(1.0, 1.0, 0.0)).unwrap();
            let report = verify_coercivity(&fam, &triple, 500, 7).unwrap();
            assert!(report.pass, "{report:?}");
            // per sample: -2Λ|y|²_V + |y|²_V - 1 ≤ -|y|²_V - 1 + ... < 0
            assert!(report.worst_margin < 0.0);
        }
    }

    #[test]
    fn positive_identity_violates_coercivity() {
        let triple = GelfandTriple::flat(3).unwrap();
        let fam = OperatorFamily::constant(DMatrix::identity(3, 3), 1.0, consts(2.0, 0.0, 1.0)).unwrap();
        let report = verify_coercivity(&fam, &triple, 50, 1).unwrap();
        assert!(!report.pass);
        assert_abs_diff_eq!(report.worst_margin, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_operator_sits_on_the_coercivity_boundary() {
        let triple = GelfandTriple::flat(4).unwrap();
        let fam = OperatorFamily::zero(4, 1.0, consts(1.0, 1.0, 0.0));
        let report = verify_coercivity(&fam, &triple, 200, 3).unwrap();
        assert!(report.pass);
        assert!(report.worst_margin.abs() < 1e-12);
    }

    #[test]
    fn operator_bound_trivial_cases() {
        let triple = GelfandTriple::flat(3).unwrap();
        let zero = OperatorFamily::zero(3, 1.0, consts(1.0, 1.0, 0.0));
        assert!(verify_operator_bound(&zero, &triple, 100, 5).unwrap().pass);
        let id = OperatorFamily::constant(DMatrix::identity(3, 3), 1.0, consts(1.0, 1.0, 1.0)).unwrap();
        let report = verify_operator_bound(&id, &triple, 100, 5).unwrap();
        assert!(report.pass);
        assert!(report.worst_margin.abs() < 1e-15);
    }

    /// Weighted operator norm by power iteration on MᵀM, M = N^{-1/2} A N^{-1/2}.
    fn power_iteration_norm(a: &DMatrix<f64>, nu: &[f64]) -> f64 {
        let n = nu.len();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                m[i][j] = a[(i, j)] / (nu[i].sqrt() * nu[j].sqrt());
            }
        }
        let mut v = vec![1.0; n];
        let mut est = 0.0;
        for _ in 0..5000 {
            let mv: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[i][j] * v[j]).sum()).collect();
            let mtmv: Vec<f64> = (0..n).map(|j| (0..n).map(|i| m[i][j] * mv[i]).sum()).collect();
            let norm = mtmv.iter().map(|x| x * x).sum::<f64>().sqrt();
            est = norm.sqrt();
            v = mtmv.iter().map(|x| x / norm).collect();
        }
        est
    }

    #[test]
    fn operator_bound_with_power_iteration_constant() {
        let nu = vec![1.0, 1.5, 2.0, 4.0, 7.0];
        let triple = GelfandTriple::new(nu.clone()).unwrap();
        let a = random_matrix(11, 5);
        let k1 = power_iteration_norm(&a, &nu);
        assert_abs_diff_eq!(triple.operator_norm_v_to_dual(&a), k1, epsilon = 1e-8);
        let fam = OperatorFamily::constant(a, 1.0, consts(1.0, 1.0, k1)).unwrap();
        let report = verify_operator_bound(&fam, &triple, 2000, 9).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.worst_margin > -k1);
    }

    #[test]
    fn covariance_sqrt_reproduces_matrix() {
        let b = random_matrix(4, 5);
        let q = &b * b.transpose() * 0.1;
        let q = (&q + q.transpose()) * 0.5;
        let cov = NuclearCovariance::new(q.clone()).unwrap();
        let s = cov.sqrt();
        assert!((s * s - &q).norm() < 1e-10);
        assert_eq!(s, &s.transpose());
        assert!((s * &q - &q * s).norm() < 1e-10);
        assert!(cov.eigenvalues().iter().all(|&l| l >= 0.0));
        assert_abs_diff_eq!(cov.trace(), q.trace(), epsilon = 1e-15);
    }

    #[test]
    fn covariance_validation() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(NuclearCovariance::new(asym).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(NuclearCovariance::new(indefinite).is_err());
        // rank deficient is fine
        let rank1 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let cov = NuclearCovariance::new(rank1.clone()).unwrap();
        assert!((cov.sqrt() * cov.sqrt() - rank1).norm() < 1e-10);
    }

    #[test]
    fn dyadic_spectrum() {
        let cov = NuclearCovariance::dyadic(8);
        assert_abs_diff_eq!(cov.trace(), 1.0 - 0.5f64.powi(8), epsilon = 1e-15);
        assert_eq!(cov.matrix()[(0, 0)], 0.5);
        assert_eq!(cov.sqrt()[(1, 1)], 0.5);
    }

    proptest! {
        #[test]
        fn norm_chain_holds(
            y in proptest::collection::vec(-10.0f64..10.0, 6),
            w in proptest::collection::vec(1.0f64..50.0, 6),
        ) {
            let triple = GelfandTriple::new(w).unwrap();
            prop_assert!(triple.norm_dual(&y) <= triple.norm_k(&y) * (1.0 + 1e-15));
            prop_assert!(triple.norm_k(&y) <= triple.norm_v(&y) * (1.0 + 1e-15));
        }

        #[test]
        fn hs_inner_is_symmetric_bilinear_and_positive(
            a in proptest::collection::vec(-3.0f64..3.0, 9),
            b in proptest::collection::vec(-3.0f64..3.0, 9),
            c in -2.0f64..2.0,
        ) {
            let a = DMatrix::from_vec(3, 3, a);
            let b = DMatrix::from_vec(3, 3, b);
            let ab = hs_inner(&a, &b).unwrap();
            prop_assert!((ab - hs_inner(&b, &a).unwrap()).abs() < 1e-12);
            let lhs = hs_inner(&(&a * c + &b), &b).unwrap();
            let rhs = c * ab + hs_inner(&b, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
            let aa = hs_inner(&a, &a).unwrap();
            prop_assert!(aa >= 0.0);
            prop_assert_eq!(aa == 0.0, a.iter().all(|v| *v == 0.0));
        }
    }
}
