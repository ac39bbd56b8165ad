//! Named problem presets.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use smp_core::control::ControlSet;
use smp_core::forward::{Coef, CoefficientBounds, CoefficientSet};
use smp_core::{CovarianceProcess, GelfandTriple, NuclearCovariance, OperatorConstants, OperatorFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PresetName {
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "scalar-closed-form")]
    ScalarClosedForm,
    #[serde(rename = "benchmark-n8")]
    BenchmarkN8,
    #[serde(rename = "mp-n4-U3")]
    MpN4U3,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [Self::Zero, Self::ScalarClosedForm, Self::BenchmarkN8, Self::MpN4U3];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::ScalarClosedForm => "scalar-closed-form",
            Self::BenchmarkN8 => "benchmark-n8",
            Self::MpN4U3 => "mp-n4-U3",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| format!("unknown preset '{s}'"))
    }
}

/// Everything needed to run an experiment except the grid and noise.
#[derive(Clone, Debug)]
pub struct Problem {
    pub name: PresetName,
    pub horizon: f64,
    pub coeffs: CoefficientSet,
    pub family: OperatorFamily,
    pub triple: GelfandTriple,
    pub covariance: CovarianceProcess,
    pub set: ControlSet,
    /// `U`-index of the reference control `u*` (constant in time).
    pub base_index: usize,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }
}

pub fn build(name: PresetName) -> Problem {
    match name {
        PresetName::Zero => zero(),
        PresetName::ScalarClosedForm => scalar_closed_form(),
        PresetName::BenchmarkN8 => benchmark_n8(),
        PresetName::MpN4U3 => mp_n4_u3(),
    }
}

fn u3() -> ControlSet {
    ControlSet::scalar(&[-1.0, 0.0, 1.0]).expect("finite values")
}

fn diag_family(weights: &[f64], lambda: f64, horizon: f64) -> OperatorFamily {
    let a = -DMatrix::from_diagonal(&DVector::from_row_slice(weights));
    OperatorFamily::constant(a, horizon, OperatorConstants { alpha: 1.0, lambda, k1: 1.0 }).expect("square matrix")
}

fn zero() -> Problem {
    let n = 2;
    Problem {
        name: PresetName::Zero,
        horizon: 1.0,
        coeffs: CoefficientSet::zero(n),
        family: OperatorFamily::zero(n, 1.0, OperatorConstants { alpha: 0.0, lambda: 0.0, k1: 0.0 }),
        triple: GelfandTriple::flat(n).expect("positive dimension"),
        covariance: CovarianceProcess::default_modulated(NuclearCovariance::dyadic(n)),
        set: ControlSet::scalar(&[0.0]).expect("finite values"),
        base_index: 0,
    }
}

/// `A = −1`, `a = 0.3`, `ℓ = 1`, `G = 1` on `ℝ`; the noise enters through
/// `g` and `σ` only, so `y` is deterministic.
pub const SCALAR_A: f64 = -1.0;
pub const SCALAR_DRIFT: f64 = 0.3;
pub const SCALAR_ELL: f64 = 1.0;
pub const SCALAR_TERMINAL: f64 = 1.0;

fn scalar_closed_form() -> Problem {
    let coeffs = CoefficientSet::zero(1)
        .with_a(Coef::constant(SCALAR_DRIFT))
        .with_b(Coef::constant(vec![0.2]))
        .with_sigma(Coef::constant(vec![0.2]))
        .with_g(Coef::constant(DMatrix::from_element(1, 1, 0.5)))
        .with_ell(|_, _| vec![SCALAR_ELL])
        .with_terminal(vec![SCALAR_TERMINAL])
        .with_x0(vec![1.0])
        .with_bounds(CoefficientBounds { k_a: 0.3, k_b: 0.2, k_sigma: 0.2, k_g: 0.5 });
    Problem {
        name: PresetName::ScalarClosedForm,
        horizon: 1.0,
        coeffs,
        family: diag_family(&[-SCALAR_A], 0.0, 1.0),
        triple: GelfandTriple::flat(1).expect("positive dimension"),
        covariance: CovarianceProcess::constant(NuclearCovariance::diagonal(&[1.0]).expect("non-negative")),
        set: ControlSet::scalar(&[0.0]).expect("finite values"),
        base_index: 0,
    }
}

/// `(y, z Q^{1/2})` of the scalar preset: `y` solves `y′ = −(A + a)y − ℓ`,
/// `y(T) = G`, and `z` vanishes.
pub fn scalar_closed_form_adjoint(t: f64, horizon: f64) -> (f64, f64) {
    let r = SCALAR_A + SCALAR_DRIFT;
    let e = (r * (horizon - t)).exp();
    (e * SCALAR_TERMINAL + SCALAR_ELL * (e - 1.0) / r, 0.0)
}

/// `n = 8`, `A = −diag(1..8)` on weights `ν_i = i`, dyadic modulated noise,
/// `U = {−1, 0, 1}` entering every coefficient; `a` is driven by the noise.
fn benchmark_n8() -> Problem {
    let n = 8;
    let inv: Vec<f64> = (1..=n).map(|i| 1.0 / i as f64).collect();
    let (i1, i2, i3, i4) = (inv.clone(), inv.clone(), inv.clone(), inv.clone());
    let coeffs = CoefficientSet::zero(n)
        .with_a(Coef::random(|_, w, v| 0.2 * w.factor.tanh() - 0.1 * v[0]))
        .with_b(Coef::deterministic(move |_, v| i1.iter().map(|c| 0.1 * v[0] * c).collect()))
        .with_sigma(Coef::deterministic(move |_, v| i2.iter().map(|c| 0.1 * (1.0 + 0.5 * v[0]) * c).collect()))
        .with_g(Coef::deterministic(move |_, v| DMatrix::identity(n, n) * (0.3 + 0.2 * v[0])))
        .with_ell(move |t, v| i3.iter().map(|c| (1.0 + 0.5 * v[0] + 0.5 * t) * c).collect())
        .with_terminal(i4)
        .with_x0(inv.clone())
        .with_bounds(CoefficientBounds {
            k_a: 0.3,
            k_b: 0.1 * norm(&inv),
            k_sigma: 0.15 * norm(&inv),
            k_g: 0.5,
        });
    let weights: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    Problem {
        name: PresetName::BenchmarkN8,
        horizon: 1.0,
        coeffs,
        family: diag_family(&weights, 1.0, 1.0),
        triple: GelfandTriple::new(weights).expect("weights ≥ 1"),
        covariance: CovarianceProcess::default_modulated(NuclearCovariance::dyadic(n)),
        set: u3(),
        base_index: 1,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Interval `j ∈ {0,1,2,3}` of `t` on `[0, T]`; grid points on a boundary
/// belong to the later interval.
fn quarter(t: f64, horizon: f64) -> usize {
    ((4.0 * t / horizon + 1e-9).floor() as usize).min(3)
}

/// Per-interval shape `b = (s_j u + c_j u²)·e` making the pointwise
/// Hamiltonian maximiser `−1, +1, 0, −1` on the four quarters.
pub const MP_SHAPE: [(f64, f64); 4] = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (1.0, 0.2)];

/// `n = 4`, `U = {−1, 0, 1}`, coefficients piecewise constant on the four
/// control intervals; `ℓ`, `G` positive so `y` keeps a sign.
fn mp_n4_u3() -> Problem {
    let n = 4;
    let horizon = 1.0;
    let e = vec![0.5; n];
    let coeffs = CoefficientSet::zero(n)
        .with_a(Coef::random(|_, w, v| 0.1 * w.factor.tanh() - 0.05 * v[0]))
        .with_b(Coef::deterministic(move |t, v| {
            let (s, c) = MP_SHAPE[quarter(t, horizon)];
            e.iter().map(|ei| (s * v[0] + c * v[0] * v[0]) * ei).collect()
        }))
        .with_sigma(Coef::constant(vec![0.1; n]))
        .with_g(Coef::deterministic(move |_, v| DMatrix::identity(n, n) * (0.3 + 0.05 * v[0])))
        .with_ell(|_, _| vec![1.0; 4])
        .with_terminal(vec![1.0; n])
        .with_x0(vec![0.5; n])
        .with_bounds(CoefficientBounds { k_a: 0.15, k_b: 1.2 * norm(&[0.5; 4]), k_sigma: 0.2, k_g: 0.35 });
    let weights: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    Problem {
        name: PresetName::MpN4U3,
        horizon,
        coeffs,
        family: diag_family(&weights, 1.0, horizon),
        triple: GelfandTriple::new(weights).expect("weights ≥ 1"),
        covariance: CovarianceProcess::default_modulated(NuclearCovariance::dyadic(n)),
        set: u3(),
        base_index: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in PresetName::ALL {
            assert_eq!(p.as_str().parse::<PresetName>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
        assert!("nope".parse::<PresetName>().is_err());
    }

    #[test]
    fn declared_bounds_hold() {
        for p in PresetName::ALL {
            let prob = build(p);
            let r = prob.coeffs.check_bounds(&prob.set, prob.horizon, 2000, 1);
            assert!(r.pass, "{p}: {r:?}");
            assert!(smp_core::hilbert::verify_coercivity(&prob.family, &prob.triple, 500, 2).unwrap().pass, "{p}");
            assert!(smp_core::hilbert::verify_operator_bound(&prob.family, &prob.triple, 500, 3).unwrap().pass, "{p}");
        }
    }

    #[test]
    fn quarters_split_grid_points() {
        assert_eq!(quarter(0.0, 1.0), 0);
        assert_eq!(quarter(0.2499, 1.0), 0);
        assert_eq!(quarter(16.0 * (1.0 / 64.0), 1.0), 1);
        assert_eq!(quarter(1.0, 1.0), 3);
    }

    #[test]
    fn scalar_adjoint_terminal_value() {
        assert_eq!(scalar_closed_form_adjoint(1.0, 1.0), (SCALAR_TERMINAL, 0.0));
    }
}
