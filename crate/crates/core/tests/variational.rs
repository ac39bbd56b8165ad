mod common;

use common::{setup, Options};
use smp_core::adjoint::solve_bspde;
use smp_core::regression::BasisSpec;
use smp_core::spike::{maximum_principle_check, optimize_control, variation_against, variational_inequality, SearchMode, SpikeSpec};
use smp_core::forward::Scheme;

const SPIKES: [(f64, f64); 4] = [(0.0, 0.125), (0.25, 0.125), (0.5, 0.125), (0.75, 0.125)];

#[test]
fn optimal_control_has_nonnegative_first_order_change() {
    let s = setup(Options { noisy: true, running_cost: true }, 64, 2000, 11);
    let opt = optimize_control(&s.coeffs, &s.family, &s.noise, &s.set, 4, SearchMode::default(), Scheme::SemiImplicit).unwrap();
    assert_eq!(opt.evaluations, 81);
    assert_eq!(opt.indices, vec![0, 2, 0, 2]);
    let base = s.run(&opt.control);
    let adj = solve_bspde(&s.coeffs, &s.family, &base, BasisSpec::default()).unwrap();
    assert!(maximum_principle_check(&s.coeffs, &adj, &s.set).unwrap().holds());
    for (t0, eps) in SPIKES {
        for u in 0..s.set.len() {
            let var = variation_against(&SpikeSpec::fixed(opt.control.clone(), t0, eps, u), &s.coeffs, &s.family, &base).unwrap();
            let r = variational_inequality(&s.coeffs, &adj, &var).unwrap();
            assert!(r.total.mean >= -3.0 * r.total.stderr, "t0 = {t0}, u = {u}: {r:?}");
        }
    }
}

#[test]
fn non_optimal_control_admits_an_improving_spike() {
    let s = setup(Options { noisy: true, running_cost: true }, 64, 2000, 12);
    // the third quarter uses +1 where −1 is optimal
    let bad = s.piecewise(&[0, 2, 2, 2]);
    let base = s.run(&bad);
    let adj = solve_bspde(&s.coeffs, &s.family, &base, BasisSpec::default()).unwrap();
    let mut improving = 0;
    for (t0, eps) in SPIKES {
        for u in 0..s.set.len() {
            let var = variation_against(&SpikeSpec::fixed(bad.clone(), t0, eps, u), &s.coeffs, &s.family, &base).unwrap();
            let r = variational_inequality(&s.coeffs, &adj, &var).unwrap();
            if r.total.mean < -3.0 * r.total.stderr {
                assert_eq!(t0, 0.5, "improvement outside the corrupted quarter: u = {u}, {r:?}");
                improving += 1;
                assert!(r.cost_difference.mean < 0.0);
            }
        }
    }
    assert!(improving >= 1);
}
