//! Value functions `u_t = -log P_{T-t} e^{-h}` of the control problem
//!
//! ```text
//! u_t(x) = inf_q E[ 1/2 int_t^T |q_s|^2 ds + h(X_T) ],
//! dX_s = (-grad V(X_s) + q_s) ds + dB_s,  X_t = x,
//! ```
//!
//! evaluated through the kernel (Hopf–Cole) rather than by time-stepping the
//! HJB equation, together with Monte Carlo checks of the optimal feedback
//! `q_s = -grad u_s(X_s)`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{gradient, wrap_coord, GradientMethod, GridFunction, TorusGrid};
use crate::interp;
use crate::kernel::KernelFactory;
use crate::potential::PotentialField;
use crate::rates::RateTriplet;
use crate::rng::{mean_and_se, path_rng};

/// `u` and `grad u` on a set of time nodes in `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbEvolution {
    pub grid: TorusGrid,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub values: Vec<GridFunction>,
    pub gradients: Vec<Vec<GridFunction>>,
}

/// `count` equispaced nodes from 0 to `T` inclusive.
pub fn uniform_times(horizon: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count)
        .map(|k| {
            if k + 1 == count {
                horizon
            } else {
                horizon * k as f64 / (count - 1) as f64
            }
        })
        .collect()
}

fn check_times(horizon: f64, times: &[f64]) -> Result<()> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParameter {
            name: "T",
            reason: format!("horizon must be positive, got {horizon}"),
        });
    }
    if times.is_empty()
        || times.iter().any(|&t| !(0.0..=horizon).contains(&t))
        || times.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::InvalidParameter {
            name: "hjb.time_nodes",
            reason: "time nodes must increase strictly within [0, T]".into(),
        });
    }
    Ok(())
}

impl HjbEvolution {
    fn from_values(
        grid: TorusGrid,
        horizon: f64,
        times: Vec<f64>,
        values: Vec<GridFunction>,
    ) -> Self {
        let gradients = values
            .iter()
            .map(|u| gradient(u, GradientMethod::Spectral))
            .collect();
        Self {
            grid,
            horizon,
            times,
            values,
            gradients,
        }
    }

    /// Index of the node governing time `s` (piecewise-constant lookup).
    pub fn time_index(&self, s: f64) -> usize {
        let tol = 1e-12 * self.horizon;
        self.times
            .partition_point(|&t| t <= s + tol)
            .saturating_sub(1)
    }

    /// `grad u_s(x)` with piecewise-constant time and multilinear space
    /// interpolation.
    pub fn gradient_at(&self, s: f64, x: &[f64], out: &mut [f64]) {
        interp::multilinear_field(&self.gradients[self.time_index(s)], x, out);
    }

    pub fn value_at(&self, k: usize, x: &[f64]) -> f64 {
        interp::multilinear(&self.values[k], x)
    }

    /// Largest gap between consecutive time nodes.
    pub fn max_time_step(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// `u(t_k) = -log P_{T - t_k} e^{-h}` for every time node.
pub fn evolve(
    h: &GridFunction,
    horizon: f64,
    times: &[f64],
    factory: &KernelFactory,
) -> Result<HjbEvolution> {
    check_times(horizon, times)?;
    if h.grid() != factory.grid() {
        return Err(Error::GridMismatch(
            "terminal function and kernels differ in grid".into(),
        ));
    }
    let minus_h = h.scaled(-1.0);
    let values = times
        .iter()
        .map(|&t| {
            if t == horizon {
                Ok(h.clone())
            } else {
                Ok(factory
                    .kernel(horizon - t)?
                    .apply_log(&minus_h)?
                    .scaled(-1.0))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HjbEvolution::from_values(
        *h.grid(),
        horizon,
        times.to_vec(),
        values,
    ))
}

/// `r(t) = ||u_t||_f / ||h||_f` where `h = u_T` is the last node's value.
pub fn contraction_ratio(evolution: &HjbEvolution, fb: &RateTriplet) -> Result<Vec<f64>> {
    let last = evolution.values.len() - 1;
    if evolution.times[last] != evolution.horizon {
        return Err(Error::InvalidParameter {
            name: "hjb.time_nodes",
            reason: "the last time node must be T".into(),
        });
    }
    let h_norm = fb.norm(&evolution.values[last])?;
    if h_norm <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "h",
            reason: "terminal function has zero f-Lipschitz norm".into(),
        });
    }
    evolution
        .values
        .iter()
        .map(|u| Ok(fb.norm(u)? / h_norm))
        .collect()
}

/// Evolution of `U^{psi_n} - U^{psi*}`.
pub fn difference_evolution(
    psi_n: &GridFunction,
    psi_star: &GridFunction,
    horizon: f64,
    times: &[f64],
    factory: &KernelFactory,
) -> Result<HjbEvolution> {
    psi_n.check_same_grid(psi_star)?;
    let a = evolve(psi_n, horizon, times, factory)?;
    let b = evolve(psi_star, horizon, times, factory)?;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x.sub(y))
        .collect::<Result<Vec<_>>>()?;
    Ok(HjbEvolution::from_values(
        a.grid,
        horizon,
        times.to_vec(),
        values,
    ))
}

/// Max over interior time nodes of the HJB residual
/// `d_t u + 1/2 Lap u - grad V . grad u - 1/2 |grad u|^2`, with a centred
/// difference in time and spectral derivatives in space.
pub fn pde_residual(evolution: &HjbEvolution, potential: &PotentialField) -> f64 {
    let grid = evolution.grid;
    let d = grid.dim();
    let drift: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| {
            let mut b = vec![0.0; d];
            potential.drift(&grid.node(i), &mut b);
            b
        })
        .collect();
    let mut worst: f64 = 0.0;
    for k in 1..evolution.times.len().saturating_sub(1) {
        let dt = evolution.times[k + 1] - evolution.times[k - 1];
        let grads = &evolution.gradients[k];
        let lap: Vec<f64> = (0..d)
            .map(|a| gradient(&grads[a], GradientMethod::Spectral).swap_remove(a))
            .fold(vec![0.0; grid.len()], |mut acc, g| {
                acc.iter_mut().zip(g.values()).for_each(|(s, v)| *s += v);
                acc
            });
        for i in 0..grid.len() {
            let ut =
                (evolution.values[k + 1].values()[i] - evolution.values[k - 1].values()[i]) / dt;
            let mut adv = 0.0;
            let mut sq = 0.0;
            for a in 0..d {
                let g = grads[a].values()[i];
                adv += drift[i][a] * g;
                sq += g * g;
            }
            worst = worst.max((ut + 0.5 * lap[i] + adv - 0.5 * sq).abs());
        }
    }
    worst
}

/// Control used in the Monte Carlo objective.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    /// `q_s = -grad u_s(X_s)` from the evolution.
    Feedback,
    /// A constant vector.
    Constant(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// Time discretisation of the controlled diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// Left-point drift and running cost; weak order 1.
    #[default]
    EulerMaruyama,
    /// Predictor-corrector drift with trapezoidal running cost; weak order 2
    /// for the additive noise used here.
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub scheme: Scheme,
}

fn control_at(control: &Control, evolution: &HjbEvolution, s: f64, pos: &[f64], out: &mut [f64]) {
    match control {
        Control::Feedback => {
            evolution.gradient_at(s, pos, out);
            out.iter_mut().for_each(|v| *v = -*v);
        }
        Control::Constant(c) => out.copy_from_slice(c),
    }
}

/// Monte Carlo estimate of `E[1/2 int_t^T |q|^2 ds + h(X_T)]` under the given
/// control, with step `dt` and continuous (wrapped) states.
pub fn soc_value_mc(
    h: &GridFunction,
    x: &[f64],
    t: f64,
    evolution: &HjbEvolution,
    potential: &PotentialField,
    control: &Control,
    opts: &McOptions,
) -> Result<McEstimate> {
    let McOptions {
        n_paths,
        dt,
        seed,
        scheme,
    } = *opts;
    let grid = evolution.grid;
    let horizon = evolution.horizon;
    if !(dt > 0.0 && dt <= grid.spacing()) {
        return Err(Error::InvalidParameter {
            name: "mc.dt",
            reason: format!("need 0 < dt <= h = {}, got {dt}", grid.spacing()),
        });
    }
    if matches!(control, Control::Feedback) && evolution.max_time_step() > dt * (1.0 + 1e-9) {
        return Err(Error::InvalidParameter {
            name: "hjb.time_nodes",
            reason: "evolution time grid must be at least as fine as dt".into(),
        });
    }
    if !(0.0..horizon).contains(&t) || x.len() != grid.dim() || n_paths == 0 {
        return Err(Error::InvalidParameter {
            name: "soc",
            reason: "need 0 <= t < T, a start point of dimension d and n_paths >= 1".into(),
        });
    }
    if let Control::Constant(q) = control {
        if q.len() != grid.dim() {
            return Err(Error::InvalidParameter {
                name: "soc",
                reason: "constant control must have d components".into(),
            });
        }
    }
    let steps = ((horizon - t) / dt - 1e-9).ceil().max(1.0) as usize;
    let step = (horizon - t) / steps as f64;
    let sqrt_step = step.sqrt();
    let d = grid.dim();
    let side = grid.side();
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut pos = x.to_vec();
            let mut pred = vec![0.0; d];
            let (mut b, mut q) = (vec![0.0; d], vec![0.0; d]);
            let (mut b1, mut q1) = (vec![0.0; d], vec![0.0; d]);
            let mut noise = vec![0.0; d];
            let mut cost = 0.0;
            for j in 0..steps {
                let s = t + j as f64 * step;
                control_at(control, evolution, s, &pos, &mut q);
                potential.drift(&pos, &mut b);
                for z in noise.iter_mut() {
                    *z = sqrt_step * rng.sample::<f64, _>(StandardNormal);
                }
                let q2 = q.iter().map(|v| v * v).sum::<f64>();
                match scheme {
                    Scheme::EulerMaruyama => {
                        cost += 0.5 * q2 * step;
                        for a in 0..d {
                            pos[a] = wrap_coord(pos[a] + (b[a] + q[a]) * step + noise[a], side);
                        }
                    }
                    Scheme::Heun => {
                        for a in 0..d {
                            pred[a] = wrap_coord(pos[a] + (b[a] + q[a]) * step + noise[a], side);
                        }
                        control_at(control, evolution, s + step, &pred, &mut q1);
                        potential.drift(&pred, &mut b1);
                        let q12 = q1.iter().map(|v| v * v).sum::<f64>();
                        cost += 0.25 * (q2 + q12) * step;
                        for a in 0..d {
                            let drift = 0.5 * (b[a] + q[a] + b1[a] + q1[a]);
                            pos[a] = wrap_coord(pos[a] + drift * step + noise[a], side);
                        }
                    }
                }
            }
            cost + interp::multilinear(h, &pos)
        })
        .collect();
    let (mean, std_error) = mean_and_se(&samples);
    Ok(McEstimate {
        mean,
        std_error,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelOptions;
    use crate::potential::PotentialSpec;
    use crate::rates::{rate_triplet, Modulus};
    use std::f64::consts::PI;

    fn mc(n_paths: usize, dt: f64) -> McOptions {
        McOptions {
            n_paths,
            dt,
            seed: 1,
            scheme: Scheme::EulerMaruyama,
        }
    }

    fn brownian(n: usize) -> KernelFactory {
        let g = TorusGrid::new(1, 1.0, n).unwrap();
        KernelFactory::new(g, PotentialSpec::Zero, KernelOptions::default()).unwrap()
    }

    #[test]
    fn constant_terminal_stays_constant() {
        let f = brownian(32);
        let h = GridFunction::constant(*f.grid(), 1.5);
        let e = evolve(&h, 0.5, &uniform_times(0.5, 5), &f).unwrap();
        for u in &e.values {
            assert!(u.values().iter().all(|v| (v - 1.5).abs() < 1e-14));
        }
        assert_eq!(e.values.last().unwrap(), &h);
    }

    #[test]
    fn gauge_shift_passes_through() {
        let f = brownian(32);
        let h = f.grid().sample(|x| (2.0 * PI * x[0]).sin()).unwrap();
        let times = uniform_times(0.5, 4);
        let a = evolve(&h, 0.5, &times, &f).unwrap();
        let b = evolve(&h.shifted(2.0), 0.5, &times, &f).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!(v
                .sub(u)
                .unwrap()
                .values()
                .iter()
                .all(|d| (d - 2.0).abs() < 1e-12));
        }
    }

    #[test]
    fn semigroup_consistency_through_log_transform() {
        let f = brownian(64);
        let h = f
            .grid()
            .sample(|x| (2.0 * PI * x[0]).sin() + 0.3 * (6.0 * PI * x[0]).cos())
            .unwrap();
        let full = evolve(&h, 0.5, &[0.1, 0.3, 0.5], &f).unwrap();
        // u(0.3) as terminal data over a horizon of length 0.2
        let restart = evolve(&full.values[1], 0.2, &[0.0, 0.2], &f).unwrap();
        assert!(restart.values[0].sub(&full.values[0]).unwrap().sup_norm() < 1e-9);
    }

    #[test]
    fn contraction_for_sine_terminal() {
        let f = brownian(128);
        let h = f.grid().sample(|x| (2.0 * PI * x[0]).sin()).unwrap();
        let times = uniform_times(0.5, 16);
        let e = evolve(&h, 0.5, &times, &f).unwrap();
        let fb = rate_triplet(&Modulus::constant(0.0, 1.0, 1).unwrap(), 1024).unwrap();
        let r = contraction_ratio(&e, &fb).unwrap();
        assert!((r.last().unwrap() - 1.0).abs() < 1e-15);
        assert!(r[0] <= (-PI * PI).exp());
        for (k, w) in r.windows(2).enumerate() {
            assert!(w[0] <= w[1] * (1.0 + 1e-12));
            assert!(w[0] <= (-2.0 * PI * PI * (0.5 - times[k])).exp() * (1.0 + 1e-6));
        }
    }

    #[test]
    fn difference_evolution_examples() {
        let f = brownian(32);
        let p = f.grid().sample(|x| (2.0 * PI * x[0]).cos()).unwrap();
        let times = uniform_times(0.5, 4);
        let zero = difference_evolution(&p, &p, 0.5, &times, &f).unwrap();
        assert!(zero.values.iter().all(|u| u.sup_norm() == 0.0));
        let c = difference_evolution(&p.shifted(0.7), &p, 0.5, &times, &f).unwrap();
        for u in &c.values {
            assert!(u.values().iter().all(|d| (d - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn pde_residual_is_small() {
        let f = brownian(128);
        let h = f.grid().sample(|x| (2.0 * PI * x[0]).sin()).unwrap();
        let coarse = evolve(&h, 0.5, &uniform_times(0.5, 501), &f).unwrap();
        let fine = evolve(&h, 0.5, &uniform_times(0.5, 1001), &f).unwrap();
        let field = PotentialField::new(&PotentialSpec::Zero, 1.0);
        let (a, b) = (pde_residual(&coarse, &field), pde_residual(&fine, &field));
        assert!(b < 0.05, "{b}");
        // second order in time
        assert!(a / b > 3.0, "{a} {b}");
    }

    #[test]
    fn zero_terminal_has_zero_value() {
        let f = brownian(32);
        let h = GridFunction::zeros(*f.grid());
        let e = evolve(&h, 0.5, &uniform_times(0.5, 17), &f).unwrap();
        let field = PotentialField::new(&PotentialSpec::Zero, 1.0);
        let est = soc_value_mc(
            &h,
            &[0.3],
            0.0,
            &e,
            &field,
            &Control::Constant(vec![0.0]),
            &mc(50, 0.03),
        )
        .unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn heun_matches_closed_form_for_constant_control() {
        // E sin(2 pi (x + q T + B_T)) = sin(2 pi (x + q T)) exp(-2 pi^2 T).
        let f = brownian(128);
        let h = f.grid().sample(|x| (2.0 * PI * x[0]).sin()).unwrap();
        let e = evolve(&h, 0.5, &uniform_times(0.5, 3), &f).unwrap();
        let field = PotentialField::new(&PotentialSpec::Zero, 1.0);
        let (x, q, t) = (0.2, 0.7, 0.5);
        let exact = 0.5 * q * q * t + (2.0 * PI * (x + q * t)).sin() * (-2.0 * PI * PI * t).exp();
        let opts = McOptions {
            scheme: Scheme::Heun,
            ..mc(20_000, 2e-3)
        };
        let est = soc_value_mc(
            &h,
            &[x],
            0.0,
            &e,
            &field,
            &Control::Constant(vec![q]),
            &opts,
        )
        .unwrap();
        // Multilinear interpolation of h costs at most (2 pi h)^2 / 8.
        let interp = (2.0 * PI / 128.0).powi(2) / 8.0;
        assert!((est.mean - exact).abs() <= 4.0 * est.std_error + interp);
    }

    #[test]
    fn rejects_coarse_time_grid_and_large_dt() {
        let f = brownian(32);
        let h = f.grid().sample(|x| (2.0 * PI * x[0]).sin()).unwrap();
        let e = evolve(&h, 0.5, &uniform_times(0.5, 5), &f).unwrap();
        let field = PotentialField::new(&PotentialSpec::Zero, 1.0);
        assert!(soc_value_mc(
            &h,
            &[0.0],
            0.0,
            &e,
            &field,
            &Control::Feedback,
            &mc(10, 0.01)
        )
        .is_err());
        assert!(soc_value_mc(
            &h,
            &[0.0],
            0.0,
            &e,
            &field,
            &Control::Feedback,
            &mc(10, 0.1)
        )
        .is_err());
    }
}
