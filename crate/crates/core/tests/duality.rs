mod common;

use common::{setup, Options};
use smp_core::adjoint::{duality_check_inner, duality_check_tail, solve_bspde};
use smp_core::regression::BasisSpec;
use smp_core::spike::{variation_against, SpikeSpec};

#[test]
fn no_spike_gives_zero_on_both_sides() {
    let s = setup(Options { noisy: true, running_cost: true }, 32, 300, 1);
    let base = s.run(&s.constant(1));
    let adj = solve_bspde(&s.coeffs, &s.family, &base, BasisSpec::default()).unwrap();
    let var = variation_against(&SpikeSpec::fixed(s.constant(1), 0.25, 0.25, 1), &s.coeffs, &s.family, &base).unwrap();
    for r in [
        duality_check_inner(&adj, var.perturbed(), &s.coeffs, 0.25, 0.25).unwrap(),
        duality_check_tail(&adj, var.perturbed(), &s.coeffs, 0.25, 0.25).unwrap(),
    ] {
        assert_eq!((r.lhs, r.rhs, r.rel_err), (0.0, 0.0, 0.0));
    }
}

#[test]
fn drift_only_inner_identity() {
    let s = setup(Options { noisy: false, running_cost: true }, 64, 10_000, 2);
    let base = s.run(&s.constant(1));
    let adj = solve_bspde(&s.coeffs, &s.family, &base, BasisSpec::default()).unwrap();
    let var = variation_against(&SpikeSpec::fixed(s.constant(1), 0.25, 0.25, 2), &s.coeffs, &s.family, &base).unwrap();
    let r = duality_check_inner(&adj, var.perturbed(), &s.coeffs, 0.25, 0.25).unwrap();
    assert!(r.rhs.abs() > 1e-3, "{r:?}");
    assert!(r.rel_err <= 0.05, "{r:?}");
}

#[test]
fn zero_running_cost_tail_identity() {
    let s = setup(Options { noisy: true, running_cost: false }, 64, 10_000, 3);
    let base = s.run(&s.constant(1));
    let adj = solve_bspde(&s.coeffs, &s.family, &base, BasisSpec::default()).unwrap();
    let var = variation_against(&SpikeSpec::fixed(s.constant(1), 0.25, 0.25, 0), &s.coeffs, &s.family, &base).unwrap();
    let r = duality_check_tail(&adj, var.perturbed(), &s.coeffs, 0.25, 0.25).unwrap();
    // with ℓ = 0 the right side is E⟨G, ξ(T)⟩ alone
    let n = base.n_paths() as f64;
    let direct: f64 = (0..base.n_paths())
        .map(|p| var.xi(p, base.steps()).iter().zip(&s.coeffs.terminal).map(|(x, g)| x * g).sum::<f64>())
        .sum::<f64>()
        / n;
    assert!((r.rhs - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    assert!(r.rel_err <= 0.05, "{r:?}");
}

#[test]
fn noise_mismatch_is_rejected() {
    let s = setup(Options { noisy: true, running_cost: true }, 32, 200, 4);
    let other = setup(Options { noisy: true, running_cost: true }, 32, 200, 5);
    let base = s.run(&s.constant(1));
    let adj = solve_bspde(&s.coeffs, &s.family, &base, BasisSpec::default()).unwrap();
    let foreign = other.run(&other.constant(2));
    assert!(duality_check_inner(&adj, &foreign, &s.coeffs, 0.25, 0.25).is_err());
    assert!(duality_check_tail(&adj, &foreign, &s.coeffs, 0.25, 0.25).is_err());
}
