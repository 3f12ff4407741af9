//! The `solve`, `rates`, `hjb-check` and `couple` subcommands. Each writes
//! its artifacts under the output directory and reports whether the
//! in-run contracts held.

use std::f64::consts::PI;
use std::path::Path;

use torus_schrodinger::rates::RateBundle;

use crate::config::{emit_config, ExperimentConfig};
use crate::experiment::{self, Instance};
use crate::report::{write_csv, write_text, Json};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub summary: String,
}

fn echo_config(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    write_text(&out.join("config.echo"), &emit_config(config))
}

pub fn cmd_solve(config: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    echo_config(config, out)?;
    let inst = Instance::build(config)?;
    let res = experiment::solve(&inst)?;
    let rows: Vec<Vec<f64>> = res
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n as f64,
                r.sup_err_phi,
                r.sup_err_psi,
                r.grad_err_phi,
                r.grad_err_psi,
                r.flip_err_psi,
                r.lip_psi,
                r.kl_cost,
            ]
        })
        .collect();
    write_csv(
        &out.join("history.csv"),
        &[
            "n",
            "sup_err_phi",
            "sup_err_psi",
            "grad_err_phi",
            "grad_err_psi",
            "flip_err_psi",
            "lip_psi",
            "kl_cost",
        ],
        &rows,
    )?;
    let grid = inst.grid;
    let mut header = vec!["node".to_string()];
    header.extend((0..grid.dim()).map(|a| format!("x{}", a + 1)));
    header.extend(["phi_star".into(), "psi_star".into()]);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let pot_rows: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| {
            let mut row = vec![i as f64];
            row.extend(grid.node(i));
            row.push(res.reference.phi_star.values()[i]);
            row.push(res.reference.psi_star.values()[i]);
            row
        })
        .collect();
    write_csv(&out.join("potentials.csv"), &header, &pot_rows)?;

    let residual_ok = res.reference.residual <= 1e-10;
    let tv_ok = res.max_half_step_tv <= 1e-12;
    let slope_ok = res.fitted_slope.is_none_or(|s| s <= res.theoretical_slope);
    let pass = res.outcome.converged && residual_ok && tv_ok && slope_ok;
    let mut j = Json::new("solve", Some(config), config.seed);
    j.int("iterations", res.outcome.state.n as u64)
        .flag("converged", res.outcome.converged)
        .num("final_residual", res.outcome.residual)
        .num("reference_residual", res.reference.residual)
        .int("reference_iterations", res.reference.iterations as u64)
        .num("reference_shift", res.reference.shift)
        .num("max_half_step_tv", res.max_half_step_tv)
        .opt("fitted_slope", res.fitted_slope)
        .num("theoretical_slope", res.theoretical_slope)
        .num("lambda_v", res.bundle.lambda_v)
        .num("lambda_bar", res.bundle.lambda_bar)
        .num("gamma", res.bundle.gamma)
        .flag("pass", pass);
    j.write(&out.join("solve.json"))?;
    Ok(Outcome {
        pass,
        summary: format!(
            "solve: {} iterations, residual {:e}, fitted slope {}, theory {:.6}",
            res.outcome.state.n,
            res.outcome.residual,
            res.fitted_slope.map_or("n/a".into(), |s| format!("{s:.6}")),
            res.theoretical_slope
        ),
    })
}

/// Flat JSON rendering of the rate constants, with both flavours of the
/// prefactors that are printed in two inconsistent forms.
pub fn bundle_json(j: &mut Json, b: &RateBundle) {
    let d2 = b.diameter * b.diameter;
    j.num("L", b.side)
        .int("d", b.dim as u64)
        .num("T", b.horizon)
        .num("diameter", b.diameter)
        .num("lambda_v", b.lambda_v)
        .num("c_v", b.c_v)
        .num("norm_u_mu", b.norm_u_mu)
        .num("norm_u_nu", b.norm_u_nu)
        .num("m", b.m)
        .num("lambda_bar", b.lambda_bar)
        .num("c_bar", b.c_bar)
        .num("gamma", b.gamma)
        .num("log_gamma", -b.lambda_bar * PI * PI * b.horizon)
        .num("c_s_printed", b.c_s_printed)
        .num("c_s_verified", b.c_s_verified)
        .opt("eta_d", b.eta_d)
        .num("brownian_lambda_closed_form", 2.0 / d2)
        .num(
            "f0_cubic_coefficient_printed",
            b.side * b.side * b.dim as f64 / 6.0,
        )
        .num("f0_cubic_coefficient_computed", 1.0 / (6.0 * d2))
        .num("d_mu_nu", b.asymptotics.d_mu_nu)
        .num("log_gamma0_asymptotic", b.asymptotics.log_gamma0)
        .num("c_s_asymptotic", b.asymptotics.c_s)
        .num("log_gamma0_bound", b.asymptotics.log_gamma0_bound);
    if let Some(e) = &b.explicit {
        j.num("explicit_rate_lower_bound", e.rate_lower_bound)
            .num("explicit_m_upper_bound", e.m_upper_bound)
            .num("explicit_lambda_bar_lower_bound", e.lambda_bar_lower_bound)
            .num("explicit_log_gamma_bound", e.log_gamma_bound)
            .num("explicit_c_s_bound_printed", e.c_s_bound_printed)
            .num("explicit_c_s_bound_verified", e.c_s_bound_verified);
    }
}

pub fn cmd_rates(config: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    echo_config(config, out)?;
    let inst = Instance::build(config)?;
    let b = inst.rates()?;
    let pass = b.f_v.check().passes() && b.f_bar.check().passes();
    let mut j = Json::new("rates", Some(config), config.seed);
    bundle_json(&mut j, &b);
    j.flag("pass", pass);
    j.write(&out.join("rates.json"))?;
    let fp = b.f_v.f_prime();
    let rows: Vec<Vec<f64>> = (0..b.f_v.nodes.len())
        .map(|i| vec![b.f_v.nodes[i], b.f_v.f[i], fp[i], b.f_bar.f[i]])
        .collect();
    write_csv(
        &out.join("rate_profile.csv"),
        &["r", "f_v", "f_v_prime", "f_bar"],
        &rows,
    )?;
    Ok(Outcome {
        pass,
        summary: format!(
            "rates: lambda_V {:.12}, lambda_bar {:.12}, gamma {:e}",
            b.lambda_v, b.lambda_bar, b.gamma
        ),
    })
}

pub fn cmd_hjb_check(config: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    echo_config(config, out)?;
    let inst = Instance::build(config)?;
    let psi_star = if config.terminal.is_none() {
        let r = torus_schrodinger::sinkhorn::reference_potentials(
            &inst.kernel,
            &inst.marginals,
            config.max_iter.max(1000),
        )?;
        Some(r.psi_star)
    } else {
        None
    };
    let h = experiment::terminal_function(&inst, psi_star.as_ref())?;
    let fv = torus_schrodinger::rates::rate_triplet(&inst.modulus()?, config.quad_nodes)?;
    let check = experiment::hjb_check(&h, &inst.factory, config.horizon, config.time_nodes, &fv)?;
    let pass = check.passes(1e-6);
    let mut j = Json::new("hjb-check", Some(config), config.seed);
    j.num("lambda_v", check.lambda)
        .nums("times", &check.evolution.times)
        .nums("ratios", &check.ratios)
        .nums("bounds", &check.bounds)
        .num("worst_ratio_over_bound", check.worst())
        .flag("pass", pass);
    j.write(&out.join("hjb.json"))?;
    let rows: Vec<Vec<f64>> = (0..check.ratios.len())
        .map(|k| vec![check.evolution.times[k], check.ratios[k], check.bounds[k]])
        .collect();
    write_csv(&out.join("hjb.csv"), &["t", "ratio", "bound"], &rows)?;
    Ok(Outcome {
        pass,
        summary: format!("hjb-check: worst ratio/bound {:.6}", check.worst()),
    })
}

pub fn cmd_couple(config: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    echo_config(config, out)?;
    let inst = Instance::build(config)?;
    let (drift, bundle) = if config.controlled {
        let reference = torus_schrodinger::sinkhorn::reference_potentials(
            &inst.kernel,
            &inst.marginals,
            config.max_iter.max(1000),
        )?;
        let drift =
            experiment::coupling_drift(&inst, Some((&inst.psi0, &reference.psi_star)), config.dt)?;
        (drift, Some(inst.rates()?))
    } else {
        (experiment::coupling_drift(&inst, None, config.dt)?, None)
    };
    let triplet = experiment::coupling_triplet(&inst, bundle.as_ref())?;
    let run = experiment::couple(
        &inst,
        &drift,
        &triplet,
        &config.start_x,
        &config.start_y,
        config.n_paths,
        config.seed,
    )?;
    let e = &run.estimate;
    let pass = e.passes();
    let mut j = Json::new("couple", Some(config), config.seed);
    j.int("n_paths", e.n_paths as u64)
        .num("start_distance", e.start_distance)
        .num("lambda", e.lambda)
        .num("mean", e.mean)
        .num("std_error", e.std_error)
        .num("bound", e.bound)
        .num("coalescence_fraction", e.coalescence_fraction)
        .flag("supermartingale_pass", run.supermartingale.passes())
        .num("supermartingale_worst_z", run.supermartingale.worst_z())
        .flag("pass", pass);
    j.write(&out.join("couple.json"))?;
    let rows: Vec<Vec<f64>> = e
        .checkpoints
        .iter()
        .map(|c| vec![c.time, c.mean, c.variance, c.covariance_prev])
        .collect();
    write_csv(
        &out.join("checkpoints.csv"),
        &["s", "mean_f", "var_f", "cov_prev"],
        &rows,
    )?;
    Ok(Outcome {
        pass,
        summary: format!(
            "couple: mean {:e} +- {:e}, bound {:e}, coalesced {:.4}",
            e.mean, e.std_error, e.bound, e.coalescence_fraction
        ),
    })
}
