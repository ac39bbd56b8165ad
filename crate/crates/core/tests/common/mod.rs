#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use smp_core::control::{ControlProcess, ControlSet};
use smp_core::forward::{integrate, Coef, CoefficientBounds, CoefficientSet, ForwardEnsemble, Scheme};
use smp_core::noise::{sample_paths, CovarianceProcess, MartingaleEnsemble};
use smp_core::{NuclearCovariance, OperatorConstants, OperatorFamily, TimeGrid};

pub const N: usize = 4;

pub struct Setup {
    pub coeffs: CoefficientSet,
    pub family: OperatorFamily,
    pub set: ControlSet,
    pub noise: Arc<MartingaleEnsemble>,
}

impl Setup {
    pub fn steps(&self) -> usize {
        self.noise.grid().steps()
    }

    pub fn run(&self, control: &ControlProcess) -> ForwardEnsemble {
        integrate(&self.coeffs, &self.family, control, &self.noise, Scheme::SemiImplicit).unwrap()
    }

    pub fn constant(&self, index: usize) -> ControlProcess {
        ControlProcess::constant(self.set.clone(), self.steps(), index).unwrap()
    }

    pub fn piecewise(&self, indices: &[usize]) -> ControlProcess {
        ControlProcess::piecewise(self.set.clone(), self.steps(), indices).unwrap()
    }
}

pub struct Options {
    pub noisy: bool,
    pub running_cost: bool,
}

/// `b`-sign of `u` per quarter of `[0, 1]`: the pointwise maximiser of the
/// Hamiltonian is `−1, +1, −1, +1` while `y > 0`.
const SIGNS: [f64; 4] = [1.0, -1.0, 1.0, -1.0];

fn quarter(t: f64) -> usize {
    ((4.0 * t + 1e-9).floor() as usize).min(3)
}

/// `n = 4`, `A = −diag(1..4)`, `U = {−1, 0, 1}`, random `a`; `σ`, `g`
/// vanish unless `noisy`, `ℓ` vanishes unless `running_cost`.
pub fn setup(opts: Options, steps: usize, paths: usize, seed: u64) -> Setup {
    let (sig, gain) = if opts.noisy { (0.1, 0.2) } else { (0.0, 0.0) };
    let ell = if opts.running_cost { 1.0 } else { 0.0 };
    let coeffs = CoefficientSet::zero(N)
        .with_a(Coef::random(|_, w, v| 0.1 * w.factor.tanh() - 0.05 * v[0]))
        .with_b(Coef::deterministic(|t, v| vec![0.5 * SIGNS[quarter(t)] * v[0]; N]))
        .with_sigma(Coef::deterministic(move |_, v| vec![sig * (1.0 + 0.5 * v[0]); N]))
        .with_g(Coef::deterministic(move |_, v| DMatrix::identity(N, N) * (gain * (1.0 + v[0]))))
        .with_ell(move |_, _| vec![ell; N])
        .with_terminal(vec![1.0; N])
        .with_x0(vec![0.5; N])
        .with_bounds(CoefficientBounds { k_a: 0.15, k_b: 1.0, k_sigma: 0.3, k_g: 0.4 });
    let diag = DVector::from_iterator(N, (1..=N).map(|i| -(i as f64)));
    let family = OperatorFamily::constant(DMatrix::from_diagonal(&diag), 1.0, OperatorConstants { alpha: 1.0, lambda: 1.0, k1: 1.0 }).unwrap();
    let grid = TimeGrid::uniform(1.0, steps).unwrap();
    let cov = CovarianceProcess::default_modulated(NuclearCovariance::dyadic(N));
    let noise = Arc::new(sample_paths(&cov, &grid, paths, seed).unwrap());
    Setup { coeffs, family, set: ControlSet::scalar(&[-1.0, 0.0, 1.0]).unwrap(), noise }
}
