//! The acceptance suite behind `verify`: thirteen property and oracle checks
//! on the pinned benchmark instance (d = 1, L = 1, N = 128, T = 0.5) and a
//! few auxiliary grids.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use torus_schrodinger::grid::{flat_distance, lip_norm, sine_distance, LipschitzMethod};
use torus_schrodinger::hjb::{evolve, soc_value_mc, uniform_times, Control, McOptions, Scheme};
use torus_schrodinger::kernel::{heat_kernel_fft, kernel_general, MarkovKernel};
use torus_schrodinger::potential::{FourierTerm, PotentialSpec, TrigTerm};
use torus_schrodinger::rates::{brownian_perturbed_lambda, rate_triplet};
use torus_schrodinger::{
    GridFunction, KernelMethod, KernelOptions, Modulus, RateTriplet, Stencil, TorusGrid,
};

use crate::config::{ExperimentConfig, PotentialConfig};
use crate::experiment::{self, Instance, SolveResult};
use crate::report::Json;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    /// The headline measured quantity and the bound it is held to.
    pub measured: f64,
    pub bound: f64,
    /// Numerical verdict (independent of wall-clock).
    pub pass: bool,
    pub detail: String,
    /// Wall-clock budget, if the criterion has one.
    pub budget: Option<Duration>,
    pub elapsed: Duration,
}

impl Criterion {
    pub fn within_budget(&self) -> bool {
        self.budget.is_none_or(|b| self.elapsed <= b)
    }

    pub fn passes(&self) -> bool {
        self.pass && self.within_budget()
    }

    pub fn line(&self) -> String {
        let time = match self.budget {
            Some(b) => format!("{:.1}s/{:.0}s", self.elapsed.as_secs_f64(), b.as_secs_f64()),
            None => format!("{:.1}s", self.elapsed.as_secs_f64()),
        };
        format!(
            "[{}] criterion {:>2} {:<34} measured {:<12.5e} bound {:<12.5e} {:>10}  {}",
            if self.passes() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.measured,
            self.bound,
            time,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Reduced path counts for a fast smoke run.
    pub quick: bool,
}

struct Ctx {
    opts: SuiteOptions,
    brownian: Instance,
    trig: Instance,
    solve_b: SolveResult,
    solve_t: SolveResult,
}

fn trig_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::benchmark();
    c.potential = PotentialConfig::Trigonometric(vec![TrigTerm {
        alpha: 1.0,
        beta: 0.0,
        omega: 0.0,
    }]);
    c
}

fn criterion(
    id: u8,
    name: &'static str,
    measured: f64,
    bound: f64,
    pass: bool,
    detail: String,
    budget: Option<u64>,
) -> Criterion {
    Criterion {
        id,
        name,
        measured,
        bound,
        pass,
        detail,
        budget: budget.map(Duration::from_secs),
        elapsed: Duration::ZERO,
    }
}

fn timed(f: impl FnOnce() -> Result<Criterion, CliError>) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let mut c = f()?;
    c.elapsed = start.elapsed();
    Ok(c)
}

fn dense(stencil: Stencil) -> KernelOptions {
    KernelOptions {
        method: KernelMethod::Dense,
        stencil,
        ..KernelOptions::default()
    }
}

/// A random band-limited function with Fourier modes `1..=modes` per axis.
fn random_band_limited(
    grid: &TorusGrid,
    modes: i32,
    rng: &mut ChaCha8Rng,
) -> Result<GridFunction, CliError> {
    let terms: Vec<FourierTerm> = (1..=modes)
        .flat_map(|k| {
            (0..grid.dim()).map(move |a| {
                let mut wave = vec![0; grid.dim()];
                wave[a] = k;
                wave
            })
        })
        .map(|wave| FourierTerm {
            wave,
            cos: rng.sample::<f64, _>(StandardNormal) * 0.1,
            sin: rng.sample::<f64, _>(StandardNormal) * 0.1,
        })
        .collect();
    Ok(PotentialSpec::fourier(terms)?.sample(grid)?)
}

fn c1_kernel_oracles() -> Result<Criterion, CliError> {
    let g = TorusGrid::new(1, 1.0, 32)?;
    let fft = heat_kernel_fft(&g, 0.5)?;
    let exp = kernel_general(&g, &PotentialSpec::Zero, 0.5, &dense(Stencil::Fourth))?;
    let oracle = fft.max_abs_diff(&exp)?;
    let half_fft = heat_kernel_fft(&g, 0.25)?;
    let half_exp = kernel_general(&g, &PotentialSpec::Zero, 0.25, &dense(Stencil::Fourth))?;
    let ck_fft = half_fft.compose(&half_fft)?.max_abs_diff(&fft)?;
    let ck_exp = half_exp.compose(&half_exp)?.max_abs_diff(&exp)?;
    let worst = oracle.max(ck_fft).max(ck_exp);
    Ok(criterion(
        1,
        "kernel oracle equivalence",
        worst,
        1e-8,
        worst <= 1e-8,
        format!("fft-vs-exp {oracle:.2e}, CK fft {ck_fft:.2e}, CK exp {ck_exp:.2e}"),
        Some(5),
    ))
}

fn c2_kernel_invariants(ctx: &Ctx) -> Result<Criterion, CliError> {
    let mut kernels: Vec<(String, MarkovKernel)> = Vec::new();
    let g32 = TorusGrid::new(1, 1.0, 32)?;
    let trig1 = PotentialSpec::Trigonometric(vec![TrigTerm {
        alpha: 1.0,
        beta: 0.0,
        omega: 0.0,
    }]);
    kernels.push(("fft N=32".into(), heat_kernel_fft(&g32, 0.5)?));
    kernels.push((
        "exp trig N=32".into(),
        kernel_general(&g32, &trig1, 0.5, &dense(Stencil::Fourth))?,
    ));
    kernels.push((
        "exp second-order trig N=32".into(),
        kernel_general(&g32, &trig1, 0.5, &dense(Stencil::Second))?,
    ));
    kernels.push((
        "crank-nicolson trig N=32".into(),
        kernel_general(
            &g32,
            &trig1,
            0.5,
            &KernelOptions {
                method: KernelMethod::CrankNicolson,
                ..KernelOptions::default()
            },
        )?,
    ));
    let g2 = TorusGrid::new(2, 1.0, 12)?;
    let trig2 = PotentialSpec::Trigonometric(vec![
        TrigTerm {
            alpha: 1.0,
            beta: 0.0,
            omega: 0.0,
        },
        TrigTerm {
            alpha: 0.3,
            beta: 0.4,
            omega: 0.5,
        },
    ]);
    kernels.push((
        "exp trig d=2 N=12".into(),
        kernel_general(&g2, &trig2, 0.5, &dense(Stencil::Fourth))?,
    ));
    let mut count = kernels.len();
    let (mut rows, mut rev): (f64, f64) = (0.0, 0.0);
    for (_, k) in &kernels {
        rows = rows.max(k.row_sum_defect());
        rev = rev.max(k.reversibility_defect());
    }
    for inst in [&ctx.brownian, &ctx.trig] {
        for k in inst.factory.built() {
            rows = rows.max(k.row_sum_defect());
            rev = rev.max(k.reversibility_defect());
            count += 1;
        }
    }
    let pass = rows <= 1e-10 && rev <= 1e-8;
    Ok(criterion(
        2,
        "stochasticity and reversibility",
        rows,
        1e-10,
        pass,
        format!("{count} kernels; row-sum {rows:.2e} (<=1e-10), reversibility {rev:.2e} (<=1e-8)"),
        None,
    ))
}

fn c3_half_step(ctx: &Ctx) -> Result<Criterion, CliError> {
    let tv = ctx
        .solve_b
        .max_half_step_tv
        .max(ctx.solve_t.max_half_step_tv);
    let n = ctx.solve_b.outcome.state.n + ctx.solve_t.outcome.state.n;
    Ok(criterion(
        3,
        "half-step marginal exactness",
        tv,
        1e-12,
        tv <= 1e-12,
        format!("max TV over {n} phi-updates (V=0 and trigonometric V)"),
        None,
    ))
}

fn c4_closed_forms() -> Result<Criterion, CliError> {
    let mut worst_base: f64 = 0.0;
    for (side, dim) in [(1.0, 1), (1.5, 2)] {
        let t = rate_triplet(&Modulus::constant(0.0, side, dim)?, 1024)?;
        let lam = 2.0 / (side * side * dim as f64);
        worst_base = worst_base
            .max(((t.lambda - lam) / lam).abs())
            .max(((t.c - 0.5) / 0.5).abs());
    }
    let mut worst_pert: f64 = 0.0;
    for m in [0.1, 1.0, 5.0] {
        let t = rate_triplet(
            &Modulus::perturbed(Modulus::constant(0.0, 1.0, 1)?, m)?,
            1024,
        )?;
        let exact = brownian_perturbed_lambda(m, 1.0);
        worst_pert = worst_pert.max(((t.lambda - exact) / exact).abs());
    }
    let pass = worst_base <= 1e-10 && worst_pert <= 1e-8;
    Ok(criterion(
        4,
        "closed-form rates",
        worst_base,
        1e-10,
        pass,
        format!("lambda_0, C_0 rel {worst_base:.2e} (<=1e-10); perturbed lambda rel {worst_pert:.2e} (<=1e-8)"),
        Some(2),
    ))
}

fn c5_triplet_properties() -> Result<Criterion, CliError> {
    let base = Modulus::constant(0.0, 1.0, 1)?;
    let moduli = [
        ("alpha=0", base.clone()),
        ("alpha=-2", Modulus::constant(-2.0, 1.0, 1)?),
        ("trig sigma=1", Modulus::trigonometric(&[1.0], 1.0, 1)?),
        ("bar M=0.5", Modulus::perturbed(base.clone(), 0.5)?),
        ("bar M=2", Modulus::perturbed(base, 2.0)?),
    ];
    let mut worst_diff = f64::INFINITY;
    let mut failed = Vec::new();
    for (name, m) in &moduli {
        let c = rate_triplet(m, 1024)?.check();
        worst_diff = worst_diff.min(c.differential);
        if !c.passes() {
            failed.push(format!("{name}: {c:?}"));
        }
    }
    Ok(criterion(
        5,
        "rate triplet inequalities",
        worst_diff,
        -1e-8,
        failed.is_empty(),
        if failed.is_empty() {
            "5 moduli, all node-wise inequalities hold; measured = min differential slack".into()
        } else {
            failed.join("; ")
        },
        None,
    ))
}

fn c6_hjb_contraction(ctx: &Ctx) -> Result<Criterion, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.opts.seed ^ 0x6a6a);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (label, inst, solve) in [
        ("V=0", &ctx.brownian, &ctx.solve_b),
        ("trig", &ctx.trig, &ctx.solve_t),
    ] {
        let g = inst.grid;
        let fv = &solve.bundle.f_v;
        let terminals = [
            ("sin", g.sample(|x| (2.0 * PI * x[0]).sin())?),
            ("random", random_band_limited(&g, 3, &mut rng)?),
            ("psi*", solve.reference.psi_star.clone()),
        ];
        for (name, h) in terminals {
            let check = experiment::hjb_check(&h, &inst.factory, inst.config.horizon, 16, fv)?;
            worst = worst.max(check.worst());
            parts.push(format!("{label}/{name} {:.4}", check.worst()));
        }
    }
    Ok(criterion(
        6,
        "HJB f-norm contraction",
        worst,
        1.0 + 1e-6,
        worst <= 1.0 + 1e-6,
        format!("max ratio/bound: {}", parts.join(", ")),
        None,
    ))
}

fn c7_lipschitz_propagation(ctx: &Ctx) -> Result<Criterion, CliError> {
    let mut worst: f64 = 0.0;
    for solve in [&ctx.solve_b, &ctx.solve_t] {
        let b = &solve.bundle;
        let g = (-b.lambda_v * PI * PI * b.horizon).exp();
        let bound_psi = (b.norm_u_nu + g * b.norm_u_mu) / (1.0 - g * g);
        let bound_phi = (b.norm_u_mu + g * b.norm_u_nu) / (1.0 - g * g);
        for r in solve.rows.iter().filter(|r| r.n >= 1) {
            worst = worst
                .max(r.norm_psi / bound_psi)
                .max(r.norm_phi / bound_phi);
        }
        worst = worst
            .max(b.f_v.norm(&solve.reference.psi_star)? / bound_psi)
            .max(b.f_v.norm(&solve.reference.phi_star)? / bound_phi);
    }
    Ok(criterion(
        7,
        "Lipschitz propagation bounds",
        worst,
        1.0,
        worst <= 1.0,
        "max f_V-norm / bound over iterates and (phi*, psi*), V=0 and trig".into(),
        None,
    ))
}

/// Iterations with a sup error below this carry no contraction signal.
const STEP_FLOOR: f64 = 1e-9;

fn c8_one_step_contraction(ctx: &Ctx) -> Result<Criterion, CliError> {
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for solve in [&ctx.solve_b, &ctx.solve_t] {
        let b = &solve.bundle;
        let factor = (-2.0 * b.lambda_bar * PI * PI * b.horizon).exp();
        for w in solve.rows.windows(2) {
            if w[0].sup_err_psi < STEP_FLOOR {
                break;
            }
            worst = worst.max(w[1].flip_err_psi / (factor * w[0].flip_err_psi));
            steps += 1;
        }
    }
    Ok(criterion(
        8,
        "per-iteration f-bar contraction",
        worst,
        1.0 + 1e-8,
        steps > 0 && worst <= 1.0 + 1e-8,
        format!("{steps} steps with sup error >= {STEP_FLOOR:e}; measured = max ratio to exp(-2 lambda_bar pi^2 T)"),
        None,
    ))
}

fn c9_geometric_decay(ctx: &Ctx) -> Result<Criterion, CliError> {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let mut pass = true;
    for (label, solve) in [("V=0", &ctx.solve_b), ("trig", &ctx.solve_t)] {
        let b = &solve.bundle;
        let rate = -2.0 * b.lambda_bar * PI * PI * b.horizon;
        let e0 = solve.rows[0].flip_err_psi;
        let scale = b.side * (b.dim as f64).sqrt();
        for r in solve
            .rows
            .iter()
            .filter(|r| r.sup_err_psi >= experiment::FIT_FLOOR)
        {
            let decay = (r.n as f64 * rate).exp() * e0;
            worst = worst
                .max(r.sup_err_psi / (scale * decay))
                .max(r.grad_err_psi / (PI * decay));
        }
        match solve.fitted_slope {
            Some(s) => {
                pass &= s <= rate;
                parts.push(format!("{label} slope {s:.3} vs {rate:.3}"));
            }
            None => {
                pass = false;
                parts.push(format!(
                    "{label} slope n/a (fewer than two iterates above the floor)"
                ));
            }
        }
    }
    pass &= worst <= 1.0;
    Ok(criterion(
        9,
        "geometric decay of the iterates",
        worst,
        1.0,
        pass,
        format!(
            "max error/bound over iterates above {:e}; {}",
            experiment::FIT_FLOOR,
            parts.join(", ")
        ),
        None,
    ))
}

fn c10_control_value(ctx: &Ctx) -> Result<Criterion, CliError> {
    let inst = &ctx.brownian;
    let horizon = inst.config.horizon;
    let dt = 1e-3;
    let n_paths = if ctx.opts.quick { 4000 } else { 20_000 };
    let h = inst.grid.sample(|x| (2.0 * PI * x[0]).sin())?;
    let evolution = evolve(&h, horizon, &uniform_times(horizon, 501), &inst.factory)?;
    let fine = evolve(&h, horizon, &uniform_times(horizon, 1001), &inst.factory)?;
    let field = inst.field();
    let mut worst_z: f64 = 0.0;
    let mut pass = true;
    let mut em_z = Vec::new();
    for (i, x) in [0.1, 0.35, 0.8].into_iter().enumerate() {
        let value = evolution.value_at(0, &[x]);
        let seed = ctx.opts.seed.wrapping_add(100 + 10 * i as u64);
        let opts = |dt: f64, seed: u64, scheme: Scheme| McOptions {
            n_paths,
            dt,
            seed,
            scheme,
        };
        let fb = soc_value_mc(
            &h,
            &[x],
            0.0,
            &evolution,
            &field,
            &Control::Feedback,
            &opts(dt, seed, Scheme::Heun),
        )?;
        let z = (fb.mean - value).abs() / fb.std_error;
        worst_z = worst_z.max(z);
        pass &= z <= 3.0;
        for (j, q) in [-1.0, 0.0, 1.0].into_iter().enumerate() {
            let control = Control::Constant(vec![q]);
            let c = soc_value_mc(
                &h,
                &[x],
                0.0,
                &evolution,
                &field,
                &control,
                &opts(dt, seed + 1 + j as u64, Scheme::Heun),
            )?;
            pass &= c.mean >= value - 3.0 * c.std_error;
        }
        // Informational: first-order scheme at dt and dt/2 on the same seed.
        for (evo, step) in [(&evolution, dt), (&fine, dt / 2.0)] {
            let em = soc_value_mc(
                &h,
                &[x],
                0.0,
                evo,
                &field,
                &Control::Feedback,
                &opts(step, seed, Scheme::EulerMaruyama),
            )?;
            em_z.push((em.mean - value) / em.std_error);
        }
    }
    let em: Vec<String> = em_z
        .chunks(2)
        .map(|p| format!("{:.2}/{:.2}", p[0], p[1]))
        .collect();
    Ok(criterion(
        10,
        "control value equality",
        worst_z,
        3.0,
        pass,
        format!(
            "{n_paths} paths, Heun dt {dt:e}; measured = max |MC - value| / SE; constant controls never beat the value; Euler-Maruyama z at dt/dt2: {}",
            em.join(", ")
        ),
        Some(60),
    ))
}

fn c11_coupling(ctx: &Ctx) -> Result<Criterion, CliError> {
    let n_paths = if ctx.opts.quick { 2000 } else { 10_000 };
    let seed = ctx.opts.seed.wrapping_add(1000);
    let mut pass = true;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();

    let f0 = rate_triplet(&ctx.brownian.modulus()?, 1024)?;
    let ft = rate_triplet(&ctx.trig.modulus()?, 1024)?;
    let controlled = experiment::coupling_drift(
        &ctx.brownian,
        Some((&ctx.brownian.psi0, &ctx.solve_b.reference.psi_star)),
        ctx.brownian.config.dt,
    )?;
    let cases: [(
        &str,
        &Instance,
        torus_schrodinger::coupling::DriftSpec,
        &RateTriplet,
    ); 3] = [
        (
            "a",
            &ctx.brownian,
            experiment::coupling_drift(&ctx.brownian, None, 1e-3)?,
            &f0,
        ),
        (
            "b",
            &ctx.trig,
            experiment::coupling_drift(&ctx.trig, None, 1e-3)?,
            &ft,
        ),
        ("c", &ctx.brownian, controlled, &ctx.solve_b.bundle.f_bar),
    ];
    for (k, (label, inst, drift, triplet)) in cases.iter().enumerate() {
        let s = seed + 10 * k as u64;
        let far = experiment::couple(inst, drift, triplet, &[0.0], &[0.5], n_paths, s)?;
        let e = &far.estimate;
        let ok = e.passes();
        pass &= ok;
        worst = worst.max(e.mean / (e.bound + 2.0 * e.std_error));
        let near = experiment::couple(inst, drift, triplet, &[0.0], &[0.25], n_paths, s + 1)?;
        let sm = near.supermartingale.passes();
        pass &= sm;
        parts.push(format!(
            "({label}) mean {:.2e}+-{:.1e} <= {:.2e}: {}, supermartingale: {}",
            e.mean, e.std_error, e.bound, ok, sm
        ));
        if *label == "a" {
            let wrong = torus_schrodinger::coupling::supermartingale_check(
                &near.estimate,
                10.0 * triplet.lambda,
            );
            let rejected = !wrong.passes();
            pass &= rejected;
            parts.push(format!("10x lambda rejected: {rejected}"));
        }
    }
    Ok(criterion(
        11,
        "reflection coupling contraction",
        worst,
        1.0,
        pass,
        format!(
            "{n_paths} paths; measured = max mean/(bound + 2 SE); {}",
            parts.join("; ")
        ),
        Some(180),
    ))
}

fn c12_equivalences(ctx: &Ctx) -> Result<Criterion, CliError> {
    let mut worst_dist: f64 = 0.0;
    let mut pairs = 0usize;
    for (dim, n) in [(1, 64), (2, 16), (3, 6)] {
        let g = TorusGrid::new(dim, 1.0, n)?;
        let nodes: Vec<Vec<f64>> = (0..g.len()).map(|i| g.node(i)).collect();
        for a in &nodes {
            for b in &nodes {
                let d = flat_distance(a, b, &g);
                let s = sine_distance(a, b, &g);
                // positive when violated
                worst_dist = worst_dist.max(2.0 * d - s).max(s - PI * d);
                pairs += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.opts.seed ^ 0x1212);
    let fv = &ctx.solve_b.bundle.f_v;
    let g = ctx.brownian.grid;
    let mut worst_norm: f64 = 0.0;
    for _ in 0..20 {
        let u = random_band_limited(&g, 4, &mut rng)?;
        let lip = lip_norm(&u, LipschitzMethod::AllPairs)?;
        let fl = fv.norm(&u)?;
        worst_norm = worst_norm
            .max((lip / PI - fl) / lip)
            .max((fl - lip / (2.0 * fv.c)) / lip);
    }
    let pass = worst_dist <= 1e-15 && worst_norm <= 1e-12;
    Ok(criterion(
        12,
        "distance and norm equivalence",
        worst_dist.max(worst_norm),
        0.0,
        pass,
        format!("{pairs} node pairs, worst distance violation {worst_dist:.1e}; 20 functions, worst relative norm violation {worst_norm:.1e}"),
        None,
    ))
}

fn build_context(opts: SuiteOptions) -> Result<Ctx, CliError> {
    let mut b = ExperimentConfig::benchmark();
    b.seed = opts.seed;
    let mut t = trig_config();
    t.seed = opts.seed;
    let brownian = Instance::build(&b)?;
    let trig = Instance::build(&t)?;
    let solve_b = experiment::solve(&brownian)?;
    let solve_t = experiment::solve(&trig)?;
    Ok(Ctx {
        opts,
        brownian,
        trig,
        solve_b,
        solve_t,
    })
}

/// Criteria 1–12, in order.
pub fn run_criteria(opts: SuiteOptions) -> Result<Vec<Criterion>, CliError> {
    let c1 = timed(c1_kernel_oracles)?;
    let c4 = timed(c4_closed_forms)?;
    let c5 = timed(c5_triplet_properties)?;
    let ctx = build_context(opts)?;
    let c3 = timed(|| c3_half_step(&ctx))?;
    let c6 = timed(|| c6_hjb_contraction(&ctx))?;
    let c7 = timed(|| c7_lipschitz_propagation(&ctx))?;
    let c8 = timed(|| c8_one_step_contraction(&ctx))?;
    let c9 = timed(|| c9_geometric_decay(&ctx))?;
    let c10 = timed(|| c10_control_value(&ctx))?;
    let c11 = timed(|| c11_coupling(&ctx))?;
    let c12 = timed(|| c12_equivalences(&ctx))?;
    // last, so that every kernel built above is inspected
    let c2 = timed(|| c2_kernel_invariants(&ctx))?;
    Ok(vec![c1, c2, c3, c4, c5, c6, c7, c8, c9, c10, c11, c12])
}

/// Deterministic JSON of the numerical results (no timings).
pub fn results_json(criteria: &[Criterion], opts: SuiteOptions) -> Json {
    let mut j = Json::new("verify", None, opts.seed);
    j.flag("quick", opts.quick);
    for c in criteria {
        j.num(&format!("c{:02}_measured", c.id), c.measured)
            .num(&format!("c{:02}_bound", c.id), c.bound)
            .flag(&format!("c{:02}_pass", c.id), c.pass)
            .text(&format!("c{:02}_detail", c.id), &c.detail);
    }
    j
}

/// The full suite; criterion 13 repeats criteria 1–12 on a thread pool of a
/// different size and compares the serialised results byte for byte.
pub fn run_suite(opts: SuiteOptions) -> Result<(Vec<Criterion>, Json), CliError> {
    let mut criteria = run_criteria(opts)?;
    let first = results_json(&criteria, opts).to_string_pretty();
    let start = Instant::now();
    let threads = (rayon::current_num_threads() / 2).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let again = pool.install(|| run_criteria(opts))?;
    let second = results_json(&again, opts).to_string_pretty();
    let same = first == second;
    let mut c13 = criterion(
        13,
        "determinism",
        if same { 0.0 } else { 1.0 },
        0.0,
        same,
        format!("second run on {threads} threads; outputs bit-identical: {same}"),
        None,
    );
    c13.elapsed = start.elapsed();
    criteria.push(c13);
    let json = results_json(&criteria, opts);
    Ok((criteria, json))
}
