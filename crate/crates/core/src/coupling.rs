//! Reflection coupling of two diffusions on the torus.
//!
//! Both processes share the Brownian increment up to the mirror
//! `I - 2 e e^T`, where `e` is the normalised sine of the separation. An
//! optional control field is evaluated at the first process only and applied
//! to both, so the drift difference is that of the base fields. Once the
//! pair meets it moves synchronously.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{signed_difference, sine_distance_raw, wrap_coord};
use crate::hjb::HjbEvolution;
use crate::potential::PotentialField;
use crate::rates::RateTriplet;
use crate::rng::path_rng;

/// Drift of the coupled pair: `b(s, .)` at each process's own state minus a
/// control `u(s, X)` evaluated at the first process.
#[derive(Debug, Clone)]
pub struct DriftSpec {
    pub potential: PotentialField,
    /// Adds `-grad U_s` to the own-state drift.
    pub base_field: Option<HjbEvolution>,
    /// Subtracts `grad D_s(X)` from both drifts.
    pub control: Option<HjbEvolution>,
}

impl DriftSpec {
    pub fn langevin(potential: PotentialField) -> Self {
        Self {
            potential,
            base_field: None,
            control: None,
        }
    }

    fn base(&self, s: f64, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        self.potential.drift(x, out);
        if let Some(field) = &self.base_field {
            field.gradient_at(s, x, scratch);
            out.iter_mut()
                .zip(scratch.iter())
                .for_each(|(o, g)| *o -= g);
        }
    }

    fn control(&self, s: f64, x: &[f64], out: &mut [f64]) -> bool {
        match &self.control {
            Some(field) => {
                field.gradient_at(s, x, out);
                true
            }
            None => false,
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        for field in self.base_field.iter().chain(&self.control) {
            if field.grid.dim() != dim {
                return Err(Error::GridMismatch(
                    "drift field dimension differs from start points".into(),
                ));
            }
            if field
                .gradients
                .iter()
                .flatten()
                .any(|g| g.values().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite { node: 0 });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingOptions {
    /// Pairs closer than this in sine distance are merged; `None` means
    /// `1e-4 L`.
    pub coalesce_tol: Option<f64>,
    /// Also merge with the Brownian-bridge probability of having crossed
    /// within the step.
    pub bridge_crossing: bool,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        Self {
            coalesce_tol: None,
            bridge_crossing: true,
        }
    }
}

/// State of one coupled pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub tau: Option<f64>,
}

/// Recorded trajectory of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPath {
    pub dt: f64,
    pub seed: u64,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub tau: Option<f64>,
}

/// `e = sin(pi z / L) / |sin(pi z / L)|` for the representative
/// `z = x - y` in `[-L/2, L/2)^d`; `None` when the points coincide.
pub fn reflection_direction(x: &[f64], y: &[f64], side: f64) -> Option<Vec<f64>> {
    let e: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| (std::f64::consts::PI * signed_difference(*a, *b, side) / side).sin())
        .collect();
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| e.into_iter().map(|v| v / norm).collect())
}

/// `(I - 2 e e^T) v`.
pub fn reflect(e: &[f64], v: &[f64]) -> Vec<f64> {
    let p: f64 = e.iter().zip(v).map(|(a, b)| a * b).sum();
    v.iter().zip(e).map(|(b, a)| b - 2.0 * p * a).collect()
}

/// One Euler–Maruyama step of the coupled pair.
///
/// `db` is the Brownian increment (variance `dt` per component) and `uniform`
/// a U(0,1) draw used for the bridge-crossing test.
#[allow(clippy::too_many_arguments)]
pub fn step_pair(
    state: &mut PairState,
    s: f64,
    dt: f64,
    drift: &DriftSpec,
    db: &[f64],
    uniform: f64,
    side: f64,
    options: &CouplingOptions,
) {
    let d = state.x.len();
    let mut bx = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    drift.base(s, &state.x, &mut bx, &mut scratch);
    let mut q = vec![0.0; d];
    let controlled = drift.control(s, &state.x, &mut q);
    if controlled {
        bx.iter_mut().zip(&q).for_each(|(b, u)| *b -= u);
    }
    let step_x = |b: &[f64], noise: &[f64], x: &mut [f64]| {
        for a in 0..d {
            x[a] = wrap_coord(x[a] + b[a] * dt + noise[a], side);
        }
    };

    let e = if state.tau.is_none() {
        let e = reflection_direction(&state.x, &state.y, side);
        if e.is_none() {
            state.tau = Some(s);
        }
        e
    } else {
        None
    };
    let Some(e) = e else {
        step_x(&bx, db, &mut state.x);
        state.y.clone_from(&state.x);
        return;
    };

    let mut by = vec![0.0; d];
    drift.base(s, &state.y, &mut by, &mut scratch);
    if controlled {
        by.iter_mut().zip(&q).for_each(|(b, u)| *b -= u);
    }
    let z: Vec<f64> = state
        .x
        .iter()
        .zip(&state.y)
        .map(|(a, b)| signed_difference(*a, *b, side))
        .collect();
    let proj = |v: &[f64]| e.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let along = proj(db);
    // unwrapped separation after the step: z + (bx - by) dt + 2 e (e . dB)
    let z_new: Vec<f64> = (0..d)
        .map(|a| z[a] + (bx[a] - by[a]) * dt + 2.0 * e[a] * along)
        .collect();
    let (before, after) = (proj(&z), proj(&z_new));

    let reflected = reflect(&e, db);
    step_x(&bx, db, &mut state.x);
    let mut y_new = state.y.clone();
    step_x(&by, &reflected, &mut y_new);
    state.y = y_new;

    let tol = options.coalesce_tol.unwrap_or(1e-4 * side);
    let crossed = after <= 0.0
        || sine_distance_raw(&state.x, &state.y, side) <= tol
        || (options.bridge_crossing && uniform < (-before * after / (2.0 * dt)).exp());
    if crossed {
        state.y.clone_from(&state.x);
        state.tau = Some(s + dt);
    }
}

fn step_count(span: f64, dt: f64) -> usize {
    ((span / dt - 1e-9).ceil() as usize).max(1)
}

fn draw(rng: &mut impl Rng, db: &mut [f64], sqrt_dt: f64) -> f64 {
    db.iter_mut()
        .for_each(|v| *v = sqrt_dt * rng.sample::<f64, _>(StandardNormal));
    rng.random::<f64>()
}

/// Simulates and records one pair; path `index` selects the random stream.
#[allow(clippy::too_many_arguments)]
pub fn simulate_path(
    x: &[f64],
    y: &[f64],
    t: f64,
    horizon: f64,
    dt: f64,
    drift: &DriftSpec,
    side: f64,
    options: &CouplingOptions,
    seed: u64,
    index: u64,
) -> CouplingPath {
    let steps = step_count(horizon - t, dt);
    let h = (horizon - t) / steps as f64;
    let mut rng = path_rng(seed, index);
    let mut state = PairState {
        x: x.iter().map(|v| wrap_coord(*v, side)).collect(),
        y: y.iter().map(|v| wrap_coord(*v, side)).collect(),
        tau: None,
    };
    let mut db = vec![0.0; x.len()];
    let mut xs = vec![state.x.clone()];
    let mut ys = vec![state.y.clone()];
    for k in 0..steps {
        let u = draw(&mut rng, &mut db, h.sqrt());
        step_pair(
            &mut state,
            t + k as f64 * h,
            h,
            drift,
            &db,
            u,
            side,
            options,
        );
        xs.push(state.x.clone());
        ys.push(state.y.clone());
    }
    CouplingPath {
        dt: h,
        seed,
        xs,
        ys,
        tau: state.tau,
    }
}

/// Moments of `f(delta_s)` across paths at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checkpoint {
    pub time: f64,
    pub mean: f64,
    pub variance: f64,
    /// Sample covariance with the previous checkpoint (0 for the first).
    pub covariance_prev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingEstimate {
    pub n_paths: usize,
    pub start: f64,
    pub horizon: f64,
    pub start_distance: f64,
    /// Mean of `f(delta(X_T, Y_T))`.
    pub mean: f64,
    pub std_error: f64,
    pub coalescence_fraction: f64,
    pub lambda: f64,
    /// `exp(-lambda pi^2 (T - t)) delta(x, y)`.
    pub bound: f64,
    pub checkpoints: Vec<Checkpoint>,
}

impl CouplingEstimate {
    /// `mean <= bound + 2 SE`.
    pub fn passes(&self) -> bool {
        self.mean <= self.bound + 2.0 * self.std_error
    }
}

/// Monte Carlo estimate of `E f(delta(X_T, Y_T))` for the coupled pair
/// started at `(x, y)` at time `t`, with `checkpoints >= 2` equispaced
/// records of `f(delta_s)` (the first at `s = t`, the last at `T`).
#[allow(clippy::too_many_arguments)]
pub fn contraction_estimate(
    x: &[f64],
    y: &[f64],
    t: f64,
    horizon: f64,
    dt: f64,
    drift: &DriftSpec,
    fb: &RateTriplet,
    side: f64,
    n_paths: usize,
    seed: u64,
    checkpoints: usize,
    options: &CouplingOptions,
) -> Result<CouplingEstimate> {
    if n_paths < 100 {
        return Err(Error::InvalidParameter {
            name: "mc.n_paths",
            reason: format!("need at least 100 paths, got {n_paths}"),
        });
    }
    if !(dt > 0.0 && dt <= 1e-2) {
        return Err(Error::InvalidParameter {
            name: "mc.dt",
            reason: format!("need 0 < dt <= 1e-2, got {dt}"),
        });
    }
    if !(t >= 0.0 && t < horizon) || x.len() != y.len() || x.is_empty() || checkpoints < 2 {
        return Err(Error::InvalidParameter {
            name: "coupling",
            reason: "need 0 <= t < T, start points of equal dimension and >= 2 checkpoints".into(),
        });
    }
    drift.check(x.len())?;
    let steps = step_count(horizon - t, dt);
    let h = (horizon - t) / steps as f64;
    let marks: Vec<usize> = (0..checkpoints)
        .map(|j| (j * steps + (checkpoints - 1) / 2) / (checkpoints - 1))
        .collect();
    let d = x.len();

    let per_path: Vec<(Vec<f64>, bool)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut state = PairState {
                x: x.iter().map(|v| wrap_coord(*v, side)).collect(),
                y: y.iter().map(|v| wrap_coord(*v, side)).collect(),
                tau: None,
            };
            let mut db = vec![0.0; d];
            let mut record = Vec::with_capacity(checkpoints);
            let mut next = 0;
            for k in 0..=steps {
                while next < marks.len() && marks[next] == k {
                    record.push(fb.f_at(sine_distance_raw(&state.x, &state.y, side)));
                    next += 1;
                }
                if k == steps {
                    break;
                }
                let u = draw(&mut rng, &mut db, h.sqrt());
                step_pair(
                    &mut state,
                    t + k as f64 * h,
                    h,
                    drift,
                    &db,
                    u,
                    side,
                    options,
                );
            }
            let met = state.tau.is_some() || state.x == state.y;
            (record, met)
        })
        .collect();

    let n = n_paths as f64;
    let mut out = Vec::with_capacity(checkpoints);
    let mut prev_mean = 0.0;
    for j in 0..checkpoints {
        let mean = per_path.iter().map(|(r, _)| r[j]).sum::<f64>() / n;
        let variance = per_path
            .iter()
            .map(|(r, _)| (r[j] - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        let covariance_prev = if j == 0 {
            0.0
        } else {
            per_path
                .iter()
                .map(|(r, _)| (r[j] - mean) * (r[j - 1] - prev_mean))
                .sum::<f64>()
                / (n - 1.0)
        };
        out.push(Checkpoint {
            time: t + marks[j] as f64 * h,
            mean,
            variance,
            covariance_prev,
        });
        prev_mean = mean;
    }
    let last = out[checkpoints - 1];
    let start_distance = sine_distance_raw(x, y, side);
    let coalesced = per_path.iter().filter(|(_, met)| *met).count();
    Ok(CouplingEstimate {
        n_paths,
        start: t,
        horizon,
        start_distance,
        mean: last.mean,
        std_error: (last.variance / n).sqrt(),
        coalescence_fraction: coalesced as f64 / n,
        lambda: fb.lambda,
        bound: (-fb.lambda * std::f64::consts::PI.powi(2) * (horizon - t)).exp() * start_distance,
        checkpoints: out,
    })
}

/// One increment of the weighted checkpoint sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupermartingaleStep {
    pub time: f64,
    /// `E[w_k F_k] - E[w_{k-1} F_{k-1}]` with `w = exp(lambda pi^2 s)`.
    pub increment: f64,
    pub std_error: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingaleReport {
    pub lambda: f64,
    pub steps: Vec<SupermartingaleStep>,
}

impl SupermartingaleReport {
    pub fn passes(&self) -> bool {
        self.steps.iter().all(|s| s.passes)
    }

    /// Largest increment in units of its standard error (0 when exact).
    pub fn worst_z(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| {
                if s.std_error > 0.0 {
                    s.increment / s.std_error
                } else if s.increment > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Checks that `exp(lambda pi^2 s) E f(delta_s)` is nonincreasing along the
/// checkpoints, each increment within two standard errors (paired, using the
/// stored covariances).
pub fn supermartingale_check(estimate: &CouplingEstimate, lambda: f64) -> SupermartingaleReport {
    let pi2 = std::f64::consts::PI.powi(2);
    let n = estimate.n_paths as f64;
    let steps = estimate
        .checkpoints
        .windows(2)
        .map(|w| {
            let a = (lambda * pi2 * w[0].time).exp();
            let b = (lambda * pi2 * w[1].time).exp();
            let increment = b * w[1].mean - a * w[0].mean;
            let var =
                b * b * w[1].variance + a * a * w[0].variance - 2.0 * a * b * w[1].covariance_prev;
            let std_error = (var.max(0.0) / n).sqrt();
            SupermartingaleStep {
                time: w[1].time,
                increment,
                std_error,
                passes: increment <= 2.0 * std_error,
            }
        })
        .collect();
    SupermartingaleReport { lambda, steps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::PotentialSpec;
    use crate::rates::{rate_triplet, Modulus};
    use crate::rng::mean_and_se;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brownian() -> DriftSpec {
        DriftSpec::langevin(PotentialField::new(&PotentialSpec::Zero, 1.0))
    }

    fn f0() -> RateTriplet {
        rate_triplet(&Modulus::constant(0.0, 1.0, 1).unwrap(), 1024).unwrap()
    }

    #[test]
    fn householder_is_orthogonal_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let e: Vec<f64> = raw.iter().map(|v| v / n).collect();
            let cols: Vec<Vec<f64>> = (0..3)
                .map(|j| {
                    reflect(
                        &e,
                        &(0..3).map(|i| (i == j) as u8 as f64).collect::<Vec<_>>(),
                    )
                })
                .collect();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((cols[i][j] - cols[j][i]).abs() < 1e-15);
                    let dot: f64 = (0..3).map(|k| cols[i][k] * cols[j][k]).sum();
                    assert!((dot - (i == j) as u8 as f64).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn reflected_increments_keep_their_covariance() {
        let e = [0.6, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut prods = [
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        ];
        for _ in 0..n {
            let v: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let r = reflect(&e, &v);
            prods[0].push(r[0] * r[0]);
            prods[1].push(r[1] * r[1]);
            prods[2].push(r[0] * r[1]);
        }
        for (k, target) in [1.0, 1.0, 0.0].into_iter().enumerate() {
            let (m, se) = mean_and_se(&prods[k]);
            assert!((m - target).abs() <= 3.0 * se, "{k}: {m} +- {se}");
        }
    }

    #[test]
    fn one_dimensional_reflection_negates() {
        let e = reflection_direction(&[0.1], &[0.3], 1.0).unwrap();
        assert_eq!(e, vec![-1.0]);
        assert_eq!(reflect(&e, &[0.25]), vec![-0.25]);
    }

    #[test]
    fn coincident_points_move_synchronously() {
        let mut s = PairState {
            x: vec![0.2, 0.4],
            y: vec![0.2, 0.4],
            tau: None,
        };
        let drift = DriftSpec::langevin(PotentialField::new(&PotentialSpec::Zero, 1.0));
        step_pair(
            &mut s,
            0.0,
            1e-3,
            &drift,
            &[0.01, -0.02],
            0.5,
            1.0,
            &CouplingOptions::default(),
        );
        assert_eq!(s.x, s.y);
        assert_eq!(s.tau, Some(0.0));
    }

    #[test]
    fn coalescence_is_absorbing() {
        let drift = brownian();
        let opts = CouplingOptions::default();
        let mut met = 0;
        for i in 0..50 {
            let p = simulate_path(&[0.0], &[0.1], 0.0, 0.5, 1e-3, &drift, 1.0, &opts, 3, i);
            if let Some(tau) = p.tau {
                met += 1;
                let k = (tau / p.dt).round() as usize;
                assert!(p.xs[k..].iter().zip(&p.ys[k..]).all(|(a, b)| a == b));
            }
            for (a, b) in p.xs.iter().zip(&p.ys) {
                assert!(sine_distance_raw(a, b, 1.0) <= 1.0 + 1e-12);
            }
        }
        assert!(met > 25);
    }

    #[test]
    fn equal_starts_give_zero() {
        let est = contraction_estimate(
            &[0.3],
            &[0.3],
            0.0,
            0.2,
            1e-2,
            &brownian(),
            &f0(),
            1.0,
            100,
            1,
            3,
            &CouplingOptions::default(),
        )
        .unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.coalescence_fraction, 1.0);
        assert!(est.checkpoints.iter().all(|c| c.mean == 0.0));
        assert!(supermartingale_check(&est, 2.0).passes());
    }

    #[test]
    fn estimates_are_reproducible() {
        let run = || {
            contraction_estimate(
                &[0.0],
                &[0.25],
                0.0,
                0.1,
                1e-3,
                &brownian(),
                &f0(),
                1.0,
                200,
                9,
                4,
                &CouplingOptions::default(),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.mean > 0.0 && a.std_error > 0.0);
    }

    #[test]
    fn coalescence_fraction_grows_with_horizon() {
        let mut prev = 0.0;
        for horizon in [0.05, 0.1, 0.2] {
            let est = contraction_estimate(
                &[0.0],
                &[0.3],
                0.0,
                horizon,
                1e-3,
                &brownian(),
                &f0(),
                1.0,
                400,
                5,
                2,
                &CouplingOptions::default(),
            )
            .unwrap();
            assert!(est.coalescence_fraction >= prev);
            prev = est.coalescence_fraction;
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let f = f0();
        let o = CouplingOptions::default();
        assert!(contraction_estimate(
            &[0.0],
            &[0.1],
            0.0,
            0.5,
            1e-3,
            &brownian(),
            &f,
            1.0,
            10,
            1,
            2,
            &o
        )
        .is_err());
        assert!(contraction_estimate(
            &[0.0],
            &[0.1],
            0.0,
            0.5,
            0.1,
            &brownian(),
            &f,
            1.0,
            100,
            1,
            2,
            &o
        )
        .is_err());
    }
}
