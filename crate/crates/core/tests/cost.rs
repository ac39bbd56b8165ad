mod common;

use common::{setup, Options, N};
use proptest::prelude::*;
use smp_core::control::ControlSet;
use smp_core::forward::CoefficientSet;
use smp_core::hamiltonian::{cost, path_costs};

#[test]
fn cost_matches_per_path_recomputation() {
    let s = setup(Options { noisy: true, running_cost: true }, 64, 500, 7);
    let ens = s.run(&s.piecewise(&[0, 2, 1, 0]));
    let grid = ens.grid();
    let per_path = path_costs(&ens, &s.coeffs).unwrap();
    let mut total = 0.0;
    for (p, &c) in per_path.iter().enumerate() {
        let mut oracle = 0.0;
        for k in 0..ens.steps() {
            let v = s.set.value(ens.control_index(p, k));
            let ell = s.coeffs.ell(grid.time(k), v);
            oracle += (grid.time(k + 1) - grid.time(k)) * ell.iter().zip(ens.state(p, k)).map(|(l, x)| l * x).sum::<f64>();
        }
        oracle += s.coeffs.terminal.iter().zip(ens.state(p, ens.steps())).map(|(g, x)| g * x).sum::<f64>();
        assert!((c - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "path {p}: {c} vs {oracle}");
        total += oracle;
    }
    let j = cost(&ens, &s.coeffs).unwrap();
    assert!((j - total / per_path.len() as f64).abs() <= 1e-12 * j.abs().max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // zero dynamics keep x ≡ x₀, so J = T⟨ℓ, x₀⟩ + ⟨G, x₀⟩
    #[test]
    fn constant_path_cost(ell in prop::collection::vec(-2.0f64..2.0, N), g in prop::collection::vec(-2.0f64..2.0, N), x0 in prop::collection::vec(-2.0f64..2.0, N)) {
        let s = setup(Options { noisy: false, running_cost: false }, 16, 100, 8);
        let ell_c = ell.clone();
        let coeffs = CoefficientSet::zero(N).with_ell(move |_, _| ell_c.clone()).with_terminal(g.clone()).with_x0(x0.clone());
        let family = smp_core::OperatorFamily::zero(N, 1.0, smp_core::OperatorConstants { alpha: 0.0, lambda: 0.0, k1: 0.0 });
        let control = smp_core::control::ControlProcess::constant(ControlSet::scalar(&[0.0]).unwrap(), 16, 0).unwrap();
        let ens = smp_core::forward::integrate(&coeffs, &family, &control, &s.noise, smp_core::forward::Scheme::SemiImplicit).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let expected = dot(&ell, &x0) + dot(&g, &x0);
        let j = cost(&ens, &coeffs).unwrap();
        prop_assert!((j - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }

    // J is linear in (ℓ, G) on a fixed ensemble
    #[test]
    fn cost_is_linear_in_cost_data(scale in -3.0f64..3.0) {
        let s = setup(Options { noisy: true, running_cost: true }, 16, 100, 9);
        let ens = s.run(&s.constant(2));
        let scaled = s.coeffs.clone().with_ell(move |_, _| vec![scale; N]).with_terminal(vec![scale; N]);
        let (j1, js) = (cost(&ens, &s.coeffs).unwrap(), cost(&ens, &scaled).unwrap());
        prop_assert!((js - scale * j1).abs() <= 1e-12 * (1.0 + j1.abs() * scale.abs()));
    }
}
