//! Sinkhorn iterates against a plain matrix-scaling implementation, and
//! properties of the limit.

use torus_schrodinger::potential::{FourierTerm, TrigTerm};
use torus_schrodinger::rates::rate_triplet;
use torus_schrodinger::sinkhorn::{
    self, diagnostics, entropic_cost, plan, reference_coupling, reference_potentials,
    symmetric_normalize, MarginalPair, RunOptions, SinkhornState,
};
use torus_schrodinger::{
    GridFunction, KernelFactory, KernelMethod, KernelOptions, Modulus, PotentialSpec, TorusGrid,
};

fn fourier(terms: &[(i32, f64, f64)]) -> PotentialSpec {
    PotentialSpec::fourier(
        terms
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

fn trig() -> PotentialSpec {
    PotentialSpec::trigonometric(vec![TrigTerm {
        alpha: 1.0,
        beta: 0.0,
        omega: 0.0,
    }])
    .unwrap()
}

struct Setup {
    factory: KernelFactory,
    marginals: MarginalPair,
}

fn setup(n: usize, v: PotentialSpec, method: KernelMethod, t: f64) -> Setup {
    let grid = TorusGrid::new(1, 1.0, n).unwrap();
    let options = KernelOptions {
        method,
        ..KernelOptions::default()
    };
    let factory = KernelFactory::new(grid, v, options).unwrap();
    let k = factory.kernel(t).unwrap();
    let u_mu = fourier(&[(1, 0.0, 0.4), (2, 0.1, 0.0)])
        .sample(&grid)
        .unwrap();
    let u_nu = fourier(&[(1, 0.3, -0.2)]).sample(&grid).unwrap();
    let marginals = MarginalPair::new(&u_mu, &u_nu, k.m_weights()).unwrap();
    Setup { factory, marginals }
}

/// Alternating row and column rescaling of a dense plan.
struct MatrixScaling {
    m: usize,
    plan: Vec<f64>,
}

impl MatrixScaling {
    fn new(r: &[f64], psi0: &[f64]) -> Self {
        let m = psi0.len();
        let plan = (0..m * m).map(|i| r[i] * (-psi0[i % m]).exp()).collect();
        Self { m, plan }
    }

    fn fit_rows(&mut self, mu: &[f64]) {
        for (x, row) in self.plan.chunks_mut(self.m).enumerate() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v *= mu[x] / s);
        }
    }

    fn fit_columns(&mut self, nu: &[f64]) {
        for (y, &target) in nu.iter().enumerate() {
            let s: f64 = (0..self.m).map(|x| self.plan[x * self.m + y]).sum();
            for x in 0..self.m {
                self.plan[x * self.m + y] *= target / s;
            }
        }
    }
}

#[test]
fn iterates_match_matrix_scaling_on_four_nodes() {
    for (v, method) in [
        (PotentialSpec::Zero, KernelMethod::Fft),
        (fourier(&[(1, 0.2, 0.1)]), KernelMethod::Dense),
    ] {
        let s = setup(4, v, method, 0.2);
        let k = s.factory.kernel(0.2).unwrap();
        let grid = *k.grid();
        let psi0 = GridFunction::new(grid, vec![0.3, -0.1, 0.0, 0.5]).unwrap();
        let mut oracle = MatrixScaling::new(&reference_coupling(&k).unwrap(), psi0.values());
        let mut state = SinkhornState::new(psi0, false);
        for _ in 0..25 {
            sinkhorn::sinkhorn_step(&mut state, &k, &s.marginals).unwrap();
            oracle.fit_rows(&s.marginals.mu_weights);
            oracle.fit_columns(&s.marginals.nu_weights);
            let p = plan(&state.phi, &state.psi, &k).unwrap();
            let err = p
                .iter()
                .zip(&oracle.plan)
                .map(|(a, b)| (a - b).abs() / b)
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "iteration {}: relative error {err:e}", state.n);
        }
    }
}

#[test]
fn limit_does_not_depend_on_the_initial_potential() {
    let s = setup(32, trig(), KernelMethod::Dense, 0.3);
    let k = s.factory.kernel(0.3).unwrap();
    let grid = *k.grid();
    let opts = RunOptions {
        max_iter: 2000,
        tol: 1e-14,
        keep_iterates: false,
    };
    let starts = [
        GridFunction::zeros(grid),
        fourier(&[(1, 2.0, -1.0), (3, 0.0, 0.7)])
            .sample(&grid)
            .unwrap(),
        GridFunction::constant(grid, 40.0),
    ];
    let limits: Vec<_> = starts
        .iter()
        .map(|psi0| {
            let out = sinkhorn::run(&k, &s.marginals, psi0, &opts).unwrap();
            symmetric_normalize(&out.state.phi, &out.state.psi, &s.marginals).unwrap()
        })
        .collect();
    for (phi, psi, _) in &limits[1..] {
        assert!(phi.sub(&limits[0].0).unwrap().sup_norm() <= 1e-9);
        assert!(psi.sub(&limits[0].1).unwrap().sup_norm() <= 1e-9);
    }
}

#[test]
fn symmetric_normalisation_balances_the_entropies() {
    let s = setup(32, trig(), KernelMethod::Dense, 0.3);
    let k = s.factory.kernel(0.3).unwrap();
    let r = reference_potentials(&k, &s.marginals, 1000).unwrap();
    let mu = &s.marginals.mu_weights;
    let nu = &s.marginals.nu_weights;
    // KL(mu | m) = -int U_mu dmu for the recentred marginal potentials.
    let lhs = r.phi_star.integrate(mu) - s.marginals.u_mu.integrate(mu);
    let rhs = r.psi_star.integrate(nu) - s.marginals.u_nu.integrate(nu);
    assert!((lhs - rhs).abs() < 1e-12);
    assert!(r.residual < 1e-10);
}

/// `pi^{n,n}` matches only the second marginal, so it is not a competitor of
/// the minimiser over couplings; on these instances its cost approaches
/// `KL(pi* | R)` from below.
#[test]
fn entropic_cost_of_iterates_approaches_the_optimum_from_below() {
    for (v, method) in [
        (PotentialSpec::Zero, KernelMethod::Fft),
        (trig(), KernelMethod::Dense),
    ] {
        let s = setup(32, v, method, 0.1);
        let k = s.factory.kernel(0.1).unwrap();
        let grid = *k.grid();
        let out = sinkhorn::run(
            &k,
            &s.marginals,
            &GridFunction::zeros(grid),
            &RunOptions::default(),
        )
        .unwrap();
        let reference = reference_potentials(&k, &s.marginals, 1000).unwrap();
        let triplet = rate_triplet(&Modulus::constant(0.0, 1.0, 1).unwrap(), 256).unwrap();
        let rows =
            diagnostics(&out.state, &reference, &s.marginals, &k, &triplet, &triplet).unwrap();
        let star = entropic_cost(
            &plan(&reference.phi_star, &reference.psi_star, &k).unwrap(),
            &reference_coupling(&k).unwrap(),
        )
        .unwrap();
        let gaps: Vec<f64> = rows[1..].iter().map(|r| r.kl_cost - star).collect();
        assert!(gaps[0] < -1e-4, "first gap {:e}", gaps[0]);
        assert!(gaps.iter().all(|g| g.is_finite() && *g <= 1e-12));
        assert!(gaps.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(gaps.last().unwrap().abs() < 1e-10);
    }
}
