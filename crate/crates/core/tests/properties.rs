//! Randomised invariants: the sine distance is a metric, kernels are Markov
//! and reversible, and Sinkhorn commutes with the gauge shift.

use proptest::prelude::*;
use torus_schrodinger::grid::{flat_distance_raw, sine_distance_raw};
use torus_schrodinger::potential::FourierTerm;
use torus_schrodinger::sinkhorn::{sinkhorn_step, MarginalPair, SinkhornState};
use torus_schrodinger::{
    GridFunction, KernelFactory, KernelMethod, KernelOptions, PotentialSpec, TorusGrid,
};

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, d)
}

fn modes() -> impl Strategy<Value = Vec<(i32, f64, f64)>> {
    prop::collection::vec((1..4i32, -0.5..0.5f64, -0.5..0.5f64), 1..4)
}

fn spec(modes: &[(i32, f64, f64)]) -> PotentialSpec {
    PotentialSpec::fourier(
        modes
            .iter()
            .map(|&(k, cos, sin)| FourierTerm {
                wave: vec![k],
                cos,
                sin,
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sine_distance_is_a_metric(
        side in 0.5..3.0f64,
        x in point(2),
        y in point(2),
        z in point(2),
    ) {
        let d = |a: &[f64], b: &[f64]| sine_distance_raw(a, b, side);
        prop_assert!(d(&x, &x).abs() < 1e-12);
        prop_assert!((d(&x, &y) - d(&y, &x)).abs() < 1e-12);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
        let flat = flat_distance_raw(&x, &y, side);
        prop_assert!(2.0 * flat <= d(&x, &y) + 1e-12);
        prop_assert!(d(&x, &y) <= std::f64::consts::PI * flat + 1e-12);
    }

    #[test]
    fn kernels_are_markov_and_reversible(modes in modes(), t in 0.01..0.5f64) {
        let grid = TorusGrid::new(1, 1.0, 24).unwrap();
        let options = KernelOptions { method: KernelMethod::Dense, ..KernelOptions::default() };
        let k = KernelFactory::new(grid, spec(&modes), options).unwrap().kernel(t).unwrap();
        prop_assert!(k.min_entry() >= 0.0);
        prop_assert!(k.row_sum_defect() <= 1e-10);
        prop_assert!(k.reversibility_defect() <= 1e-8);
    }

    #[test]
    fn sinkhorn_commutes_with_the_gauge(
        mu in modes(),
        nu in modes(),
        c in -20.0..20.0f64,
    ) {
        let grid = TorusGrid::new(1, 1.0, 16).unwrap();
        let k = KernelFactory::new(grid, PotentialSpec::Zero, KernelOptions::default())
            .unwrap()
            .kernel(0.2)
            .unwrap();
        let marginals = MarginalPair::new(
            &spec(&mu).sample(&grid).unwrap(),
            &spec(&nu).sample(&grid).unwrap(),
            k.m_weights(),
        )
        .unwrap();
        let mut a = SinkhornState::new(GridFunction::zeros(grid), false);
        let mut b = SinkhornState::new(GridFunction::constant(grid, c), false);
        for _ in 0..3 {
            sinkhorn_step(&mut a, &k, &marginals).unwrap();
            sinkhorn_step(&mut b, &k, &marginals).unwrap();
            prop_assert!(b.phi.sub(&a.phi.shifted(-c)).unwrap().sup_norm() < 1e-10);
            prop_assert!(b.psi.sub(&a.psi.shifted(c)).unwrap().sup_norm() < 1e-10);
        }
    }
}
