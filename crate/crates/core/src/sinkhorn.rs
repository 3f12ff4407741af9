//! Log-domain Sinkhorn iterations against a reference kernel.
//!
//! With `mu = e^{-U_mu} m` and `nu = e^{-U_nu} m`, one iteration is
//!
//! ```text
//! phi^{n+1} = U_mu + log P_T e^{-psi^n}
//! psi^{n+1} = U_nu + log P_T e^{-phi^{n+1}}
//! ```
//!
//! and the plan `pi(x, y) = m(x) K(x, y) e^{-phi(x) - psi(y)}` has first
//! marginal `mu` after each `phi` update and second marginal `nu` after each
//! `psi` update.

use crate::error::{Error, Result};
use crate::grid::{gradient, GradientMethod, GridFunction};
use crate::kernel::MarkovKernel;
use crate::rates::RateTriplet;

/// Plans are only materialised up to this many nodes.
pub const PLAN_LIMIT: usize = 4096;

/// Marginal potentials re-centred so that `e^{-U} m` sums to one exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPair {
    pub u_mu: GridFunction,
    pub u_nu: GridFunction,
    pub mu_weights: Vec<f64>,
    pub nu_weights: Vec<f64>,
}

impl MarginalPair {
    pub fn new(u_mu: &GridFunction, u_nu: &GridFunction, m_weights: &[f64]) -> Result<Self> {
        u_mu.check_same_grid(u_nu)?;
        if m_weights.len() != u_mu.grid().len() {
            return Err(Error::GridMismatch(
                "stationary weights do not match the grid".into(),
            ));
        }
        let (u_mu, mu_weights) = recenter(u_mu, m_weights);
        let (u_nu, nu_weights) = recenter(u_nu, m_weights);
        Ok(Self {
            u_mu,
            u_nu,
            mu_weights,
            nu_weights,
        })
    }
}

fn recenter(u: &GridFunction, m: &[f64]) -> (GridFunction, Vec<f64>) {
    let shift = u
        .values()
        .iter()
        .map(|v| -v)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = u
        .values()
        .iter()
        .zip(m)
        .map(|(v, w)| w * (-v - shift).exp())
        .sum();
    let c = shift + z.ln();
    let u = u.shifted(c);
    let weights = u
        .values()
        .iter()
        .zip(m)
        .map(|(v, w)| w * (-v).exp())
        .collect();
    (u, weights)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub n: usize,
    /// `sup |psi^n - psi^{n-1}|`.
    pub delta_psi: f64,
    /// `sup |phi^n - phi^{n-1}|` (infinite at `n = 1`).
    pub delta_phi: f64,
    /// Total variation between the first marginal of `pi^{n, n-1}` and `mu`.
    pub half_step_tv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornState {
    pub n: usize,
    pub phi: GridFunction,
    pub psi: GridFunction,
    pub history: Vec<IterationRecord>,
    /// `(phi^n, psi^n)` for `n = 1, 2, ..` when retained.
    pub iterates: Option<Vec<(GridFunction, GridFunction)>>,
    pub psi0: GridFunction,
}

impl SinkhornState {
    pub fn new(psi0: GridFunction, keep_iterates: bool) -> Self {
        let grid = *psi0.grid();
        Self {
            n: 0,
            phi: GridFunction::zeros(grid),
            psi: psi0.clone(),
            history: Vec::new(),
            iterates: keep_iterates.then(Vec::new),
            psi0,
        }
    }
}

/// One full iteration (a `phi` half-step followed by a `psi` half-step).
pub fn sinkhorn_step(
    state: &mut SinkhornState,
    k: &MarkovKernel,
    marginals: &MarginalPair,
) -> Result<()> {
    if k.grid() != state.psi.grid() || k.grid() != marginals.u_mu.grid() {
        return Err(Error::GridMismatch(
            "kernel, marginals and state must share a grid".into(),
        ));
    }
    let log_p_psi = k.apply_log(&state.psi.scaled(-1.0))?;
    let phi = marginals.u_mu.add(&log_p_psi)?;
    let half_step_tv = first_marginal_tv_from(&phi, &log_p_psi, k, &marginals.mu_weights);
    let psi = marginals.u_nu.add(&k.apply_log(&phi.scaled(-1.0))?)?;
    let delta_psi = psi.sub(&state.psi)?.sup_norm();
    let delta_phi = if state.n == 0 {
        f64::INFINITY
    } else {
        phi.sub(&state.phi)?.sup_norm()
    };
    state.n += 1;
    state.phi = phi;
    state.psi = psi;
    state.history.push(IterationRecord {
        n: state.n,
        delta_psi,
        delta_phi,
        half_step_tv,
    });
    if let Some(it) = state.iterates.as_mut() {
        it.push((state.phi.clone(), state.psi.clone()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub keep_iterates: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-12,
            keep_iterates: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub state: SinkhornState,
    pub converged: bool,
    /// Last one-step change of `psi`.
    pub residual: f64,
}

/// Iterates until the sup-norm change of `psi` drops below `tol`.
/// Non-convergence is reported in the outcome, not as an error.
pub fn run(
    k: &MarkovKernel,
    marginals: &MarginalPair,
    psi0: &GridFunction,
    options: &RunOptions,
) -> Result<RunOutcome> {
    if !(options.tol > 0.0) {
        return Err(Error::InvalidParameter {
            name: "solver.tol",
            reason: "must be positive".into(),
        });
    }
    let mut state = SinkhornState::new(psi0.clone(), options.keep_iterates);
    let mut residual = f64::INFINITY;
    while state.n < options.max_iter {
        sinkhorn_step(&mut state, k, marginals)?;
        residual = state.history.last().unwrap().delta_psi;
        if residual < options.tol {
            return Ok(RunOutcome {
                state,
                converged: true,
                residual,
            });
        }
    }
    Ok(RunOutcome {
        state,
        converged: false,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePotentials {
    pub phi_star: GridFunction,
    pub psi_star: GridFunction,
    /// Sup-norm defect of the Schrödinger system.
    pub residual: f64,
    /// Constant `c` of the symmetric normalisation.
    pub shift: f64,
    pub iterations: usize,
}

/// Target step size of the reference solve.
pub const REFERENCE_TOL: f64 = 1e-13;

/// Runs Sinkhorn to `1e-13`, or until the step size stops improving at the
/// rounding floor, then applies the symmetric normalisation.
pub fn reference_potentials(
    k: &MarkovKernel,
    marginals: &MarginalPair,
    max_iter: usize,
) -> Result<ReferencePotentials> {
    let grid = *k.grid();
    let mut state = SinkhornState::new(GridFunction::zeros(grid), false);
    let mut best = f64::INFINITY;
    let mut stall = 0;
    while state.n < max_iter {
        sinkhorn_step(&mut state, k, marginals)?;
        let delta = state.history.last().unwrap().delta_psi;
        let floor = 10.0 * f64::EPSILON * state.psi.sup_norm().max(1.0);
        if delta < REFERENCE_TOL || delta <= floor {
            break;
        }
        if delta < 0.5 * best {
            best = delta;
            stall = 0;
        } else {
            stall += 1;
            if stall >= 10 && best < 1e-10 {
                break;
            }
        }
    }
    let (phi_star, psi_star, shift) = symmetric_normalize(&state.phi, &state.psi, marginals)?;
    let residual = schrodinger_residual(&phi_star, &psi_star, k, marginals)?;
    Ok(ReferencePotentials {
        phi_star,
        psi_star,
        residual,
        shift,
        iterations: state.n,
    })
}

/// `max(sup |phi - U_mu - log P e^{-psi}|, sup |psi - U_nu - log P e^{-phi}|)`.
pub fn schrodinger_residual(
    phi: &GridFunction,
    psi: &GridFunction,
    k: &MarkovKernel,
    marginals: &MarginalPair,
) -> Result<f64> {
    let a = phi
        .sub(&marginals.u_mu)?
        .sub(&k.apply_log(&psi.scaled(-1.0))?)?
        .sup_norm();
    let b = psi
        .sub(&marginals.u_nu)?
        .sub(&k.apply_log(&phi.scaled(-1.0))?)?
        .sup_norm();
    Ok(a.max(b))
}

/// Returns `(phi + c, psi - c, c)` with `c` chosen so that
/// `int phi dmu - int U_mu dmu = int psi dnu - int U_nu dnu`.
pub fn symmetric_normalize(
    phi: &GridFunction,
    psi: &GridFunction,
    marginals: &MarginalPair,
) -> Result<(GridFunction, GridFunction, f64)> {
    phi.check_same_grid(psi)?;
    let a = phi.integrate(&marginals.mu_weights) - marginals.u_mu.integrate(&marginals.mu_weights);
    let b = psi.integrate(&marginals.nu_weights) - marginals.u_nu.integrate(&marginals.nu_weights);
    let c = 0.5 * (b - a);
    Ok((phi.shifted(c), psi.shifted(-c), c))
}

/// `phi - (int phi dmu - int phi* dmu)` and the analogue for `psi` with `nu`.
pub fn normalize_iterates(
    phi: &GridFunction,
    psi: &GridFunction,
    reference: &ReferencePotentials,
    marginals: &MarginalPair,
) -> (GridFunction, GridFunction) {
    let mu = &marginals.mu_weights;
    let nu = &marginals.nu_weights;
    let cphi = phi.integrate(mu) - reference.phi_star.integrate(mu);
    let cpsi = psi.integrate(nu) - reference.psi_star.integrate(nu);
    (phi.shifted(-cphi), psi.shifted(-cpsi))
}

/// `R(x, y) = m(x) K(x, y)`, row-major.
pub fn reference_coupling(k: &MarkovKernel) -> Result<Vec<f64>> {
    check_plan_size(k)?;
    let m = k.len();
    let mut r = k.to_dense();
    for (x, row) in r.chunks_mut(m).enumerate() {
        let w = k.m_weights()[x];
        row.iter_mut().for_each(|v| *v *= w);
    }
    Ok(r)
}

fn check_plan_size(k: &MarkovKernel) -> Result<()> {
    if k.len() > PLAN_LIMIT {
        return Err(Error::InvalidParameter {
            name: "N",
            reason: format!("plans are materialised only up to {PLAN_LIMIT} nodes"),
        });
    }
    Ok(())
}

/// `pi(x, y) = m(x) K(x, y) e^{-phi(x) - psi(y)}`, row-major, unnormalised.
pub fn plan(phi: &GridFunction, psi: &GridFunction, k: &MarkovKernel) -> Result<Vec<f64>> {
    check_plan_size(k)?;
    phi.check_same_grid(psi)?;
    let m = k.len();
    let mut out = k.to_dense();
    let (pv, qv, w) = (phi.values(), psi.values(), k.m_weights());
    for (x, row) in out.chunks_mut(m).enumerate() {
        let lx = w[x].ln() - pv[x];
        for (y, v) in row.iter_mut().enumerate() {
            *v = if *v > 0.0 {
                (lx + v.ln() - qv[y]).exp()
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Both marginals of the plan built from `(phi, psi)`, without forming it.
/// Uses reversibility for the second marginal.
pub fn plan_marginals(
    phi: &GridFunction,
    psi: &GridFunction,
    k: &MarkovKernel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = k.m_weights();
    let a = k.apply_log(&psi.scaled(-1.0))?;
    let b = k.apply_log(&phi.scaled(-1.0))?;
    let first = (0..k.len())
        .map(|x| (w[x].ln() - phi.values()[x] + a.values()[x]).exp())
        .collect();
    let second = (0..k.len())
        .map(|y| (w[y].ln() - psi.values()[y] + b.values()[y]).exp())
        .collect();
    Ok((first, second))
}

fn first_marginal_tv_from(
    phi: &GridFunction,
    log_p_psi: &GridFunction,
    k: &MarkovKernel,
    mu: &[f64],
) -> f64 {
    let w = k.m_weights();
    0.5 * (0..k.len())
        .map(|x| ((w[x].ln() - phi.values()[x] + log_p_psi.values()[x]).exp() - mu[x]).abs())
        .sum::<f64>()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `sum p log(p/q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::GridMismatch(
            "KL between vectors of different length".into(),
        ));
    }
    let mut acc = 0.0;
    for (node, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::NotAbsolutelyContinuous { node });
            }
            acc += a * (a / b).ln();
        }
    }
    Ok(acc)
}

/// `KL(pi | R)` for row-major plans.
pub fn entropic_cost(plan: &[f64], reference: &[f64]) -> Result<f64> {
    kl_divergence(plan, reference)
}

/// Per-iteration errors against the reference potentials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRow {
    pub n: usize,
    pub sup_err_phi: f64,
    pub sup_err_psi: f64,
    pub grad_err_phi: f64,
    pub grad_err_psi: f64,
    /// `||psi^n - psi*||_f` for the supplied triplet.
    pub flip_err_psi: f64,
    /// `||phi^n - phi*||_f`.
    pub flip_err_phi: f64,
    /// `||psi^n||_f` and `||phi^n||_f` for the base triplet.
    pub norm_psi: f64,
    pub norm_phi: f64,
    /// Lipschitz constant of `psi^n`.
    pub lip_psi: f64,
    /// `KL(pi^{n,n} | R)`; NaN when plans are too large to form.
    pub kl_cost: f64,
}

/// Largest pointwise Euclidean norm of `grad a - grad b`.
pub fn gradient_error(a: &GridFunction, b: &GridFunction) -> Result<f64> {
    let diff = a.sub(b)?;
    let g = gradient(&diff, GradientMethod::Spectral);
    Ok((0..a.grid().len())
        .map(|i| g.iter().map(|c| c.values()[i].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

/// Diagnostics for `psi^0` (row `n = 0`, phi columns NaN) and every retained
/// iterate. `f_bar` measures the distance to the reference, `f_v` the
/// iterates themselves.
pub fn diagnostics(
    state: &SinkhornState,
    reference: &ReferencePotentials,
    marginals: &MarginalPair,
    k: &MarkovKernel,
    f_bar: &RateTriplet,
    f_v: &RateTriplet,
) -> Result<Vec<DiagnosticRow>> {
    let iterates = state.iterates.as_ref().ok_or(Error::InvalidParameter {
        name: "solver",
        reason: "diagnostics need the retained iterates".into(),
    })?;
    let r = if k.len() <= PLAN_LIMIT {
        Some(reference_coupling(k)?)
    } else {
        None
    };
    let lip = |f: &GridFunction| crate::grid::lip_norm(f, crate::grid::LipschitzMethod::Spectral);
    let mut rows = Vec::with_capacity(iterates.len() + 1);
    let psi0 = &state.psi0;
    let nu = &marginals.nu_weights;
    let c0 = psi0.integrate(nu) - reference.psi_star.integrate(nu);
    rows.push(DiagnosticRow {
        n: 0,
        sup_err_phi: f64::NAN,
        sup_err_psi: psi0.shifted(-c0).sub(&reference.psi_star)?.sup_norm(),
        grad_err_phi: f64::NAN,
        grad_err_psi: gradient_error(psi0, &reference.psi_star)?,
        flip_err_psi: f_bar.norm(&psi0.sub(&reference.psi_star)?)?,
        flip_err_phi: f64::NAN,
        norm_psi: f_v.norm(psi0)?,
        norm_phi: f64::NAN,
        lip_psi: lip(psi0)?,
        kl_cost: f64::NAN,
    });
    for (i, (phi, psi)) in iterates.iter().enumerate() {
        let (phi_d, psi_d) = normalize_iterates(phi, psi, reference, marginals);
        let kl_cost = match &r {
            Some(r) => entropic_cost(&plan(phi, psi, k)?, r)?,
            None => f64::NAN,
        };
        rows.push(DiagnosticRow {
            n: i + 1,
            sup_err_phi: phi_d.sub(&reference.phi_star)?.sup_norm(),
            sup_err_psi: psi_d.sub(&reference.psi_star)?.sup_norm(),
            grad_err_phi: gradient_error(phi, &reference.phi_star)?,
            grad_err_psi: gradient_error(psi, &reference.psi_star)?,
            flip_err_psi: f_bar.norm(&psi.sub(&reference.psi_star)?)?,
            flip_err_phi: f_bar.norm(&phi.sub(&reference.phi_star)?)?,
            norm_psi: f_v.norm(psi)?,
            norm_phi: f_v.norm(phi)?,
            lip_psi: lip(psi)?,
            kl_cost,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use crate::kernel::heat_kernel_fft;
    use std::f64::consts::PI;

    fn setup(n: usize) -> (MarkovKernel, MarginalPair) {
        let g = TorusGrid::new(1, 1.0, n).unwrap();
        let k = heat_kernel_fft(&g, 0.5).unwrap();
        let u = g.sample(|x| 0.3 * (2.0 * PI * x[0]).sin()).unwrap();
        let v = g.sample(|x| 0.2 * (4.0 * PI * x[0] + 1.0).cos()).unwrap();
        let mp = MarginalPair::new(&u, &v, k.m_weights()).unwrap();
        (k, mp)
    }

    #[test]
    fn marginals_are_probabilities() {
        let (_, mp) = setup(16);
        assert!((mp.mu_weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((mp.nu_weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trivial_marginals_are_a_fixed_point() {
        let g = TorusGrid::new(1, 1.0, 16).unwrap();
        let k = heat_kernel_fft(&g, 0.5).unwrap();
        let z = GridFunction::zeros(g);
        let mp = MarginalPair::new(&z, &z, k.m_weights()).unwrap();
        let out = run(&k, &mp, &z, &RunOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.state.n, 1);
        assert!(out.state.phi.sup_norm() < 1e-15 && out.state.psi.sup_norm() < 1e-15);
    }

    #[test]
    fn symmetric_normalize_examples() {
        let (k, mp) = setup(16);
        let r = reference_potentials(&k, &mp, 1000).unwrap();
        let (_, _, c) = symmetric_normalize(&r.phi_star, &r.psi_star, &mp).unwrap();
        assert!(c.abs() < 1e-14);
        let (p, q, c) =
            symmetric_normalize(&r.phi_star.shifted(5.0), &r.psi_star.shifted(-5.0), &mp).unwrap();
        assert!((c + 5.0).abs() < 1e-13);
        assert!(p.sub(&r.phi_star).unwrap().sup_norm() < 1e-13);
        assert!(q.sub(&r.psi_star).unwrap().sup_norm() < 1e-13);
    }

    #[test]
    fn fixed_point_and_marginals() {
        let (k, mp) = setup(32);
        let r = reference_potentials(&k, &mp, 1000).unwrap();
        assert!(r.residual <= 1e-10);
        let (a, b) = plan_marginals(&r.phi_star, &r.psi_star, &k).unwrap();
        assert!(total_variation(&a, &mp.mu_weights) <= 1e-10);
        assert!(total_variation(&b, &mp.nu_weights) <= 1e-10);
        let mut state = SinkhornState::new(r.psi_star.clone(), false);
        state.phi = r.phi_star.clone();
        sinkhorn_step(&mut state, &k, &mp).unwrap();
        assert!(state.phi.sub(&r.phi_star).unwrap().sup_norm() <= 1e-10);
        assert!(state.psi.sub(&r.psi_star).unwrap().sup_norm() <= 1e-10);
    }

    #[test]
    fn half_step_marginal_is_exact() {
        let (k, mp) = setup(32);
        let out = run(
            &k,
            &mp,
            &GridFunction::zeros(*k.grid()),
            &RunOptions::default(),
        )
        .unwrap();
        for rec in &out.state.history {
            assert!(rec.half_step_tv <= 1e-12, "{rec:?}");
        }
    }

    #[test]
    fn gauge_equivariance() {
        let (k, mp) = setup(16);
        let g = *k.grid();
        let psi = g.sample(|x| (2.0 * PI * x[0]).cos()).unwrap();
        let mut a = SinkhornState::new(psi.clone(), false);
        let mut b = SinkhornState::new(psi.shifted(-2.5), false);
        sinkhorn_step(&mut a, &k, &mp).unwrap();
        sinkhorn_step(&mut b, &k, &mp).unwrap();
        let diff = b.phi.sub(&a.phi).unwrap();
        assert!(diff.values().iter().all(|d| (d - 2.5).abs() < 1e-12));
        let pa = plan(&a.phi, &psi, &k).unwrap();
        let pb = plan(&b.phi, &psi.shifted(-2.5), &k).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn plan_of_zero_potentials_is_reference() {
        let (k, _) = setup(8);
        let z = GridFunction::zeros(*k.grid());
        let p = plan(&z, &z, &k).unwrap();
        let r = reference_coupling(&k).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for (a, b) in p.iter().zip(&r) {
            assert!((a - b).abs() < 1e-16);
        }
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::NotAbsolutelyContinuous { node: 1 })
        ));
    }

    #[test]
    fn normalize_iterates_examples() {
        let (k, mp) = setup(16);
        let r = reference_potentials(&k, &mp, 1000).unwrap();
        let (p, q) = normalize_iterates(&r.phi_star.shifted(3.0), &r.psi_star, &r, &mp);
        assert!(p.sub(&r.phi_star).unwrap().sup_norm() < 1e-13);
        assert!(q.sub(&r.psi_star).unwrap().sup_norm() < 1e-13);
    }
}
