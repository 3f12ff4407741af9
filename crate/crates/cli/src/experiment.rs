//! Builds a numerical instance from a configuration and runs the individual
//! experiments. Each experiment returns a plain result struct; writing files
//! is left to [`crate::commands`].

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

use torus_schrodinger::coupling::{
    contraction_estimate, supermartingale_check, CouplingEstimate, CouplingOptions, DriftSpec,
    SupermartingaleReport,
};
use torus_schrodinger::hjb::{self, difference_evolution, evolve, uniform_times, HjbEvolution};
use torus_schrodinger::potential::{PotentialField, PotentialSpec};
use torus_schrodinger::rates::{rate_triplet, sinkhorn_constants, RateBundle};
use torus_schrodinger::sinkhorn::{
    self, diagnostics, reference_potentials, DiagnosticRow, MarginalPair, ReferencePotentials,
    RunOptions, RunOutcome,
};
use torus_schrodinger::{
    GridFunction, KernelFactory, KernelOptions, MarkovKernel, Modulus, RateTriplet, TorusGrid,
};

use crate::config::{ExperimentConfig, FunctionSpec, PotentialConfig};
use crate::CliError;

/// Environment variable naming the kernel cache directory.
pub const CACHE_ENV: &str = "TS_CACHE_DIR";

pub struct Instance {
    pub config: ExperimentConfig,
    pub grid: TorusGrid,
    pub potential: PotentialSpec,
    pub factory: KernelFactory,
    pub kernel: Arc<MarkovKernel>,
    pub marginals: MarginalPair,
    pub psi0: GridFunction,
}

fn read_table(path: &PathBuf, grid: &TorusGrid, column: &str) -> Result<GridFunction, CliError> {
    let mut reader = csv::Reader::from_path(path)?;
    let idx = reader
        .headers()?
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| CliError::Input(format!("{}: no column `{column}`", path.display())))?;
    let mut values = Vec::with_capacity(grid.len());
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = record.get(idx).unwrap_or("").trim();
        values.push(cell.parse::<f64>().map_err(|_| {
            CliError::Input(format!(
                "{}: row {}: cannot parse `{cell}`",
                path.display(),
                row + 2
            ))
        })?);
    }
    if values.len() != grid.len() {
        return Err(CliError::Input(format!(
            "{}: column `{column}` has {} rows, the grid has {} nodes",
            path.display(),
            values.len(),
            grid.len()
        )));
    }
    Ok(GridFunction::new(*grid, values)?)
}

fn sample(
    spec: &FunctionSpec,
    config: &ExperimentConfig,
    grid: &TorusGrid,
    column: &str,
) -> Result<GridFunction, CliError> {
    match spec {
        FunctionSpec::Fourier(terms) => Ok(PotentialSpec::fourier(terms.clone())?.sample(grid)?),
        FunctionSpec::Table => read_table(config.table.as_ref().unwrap(), grid, column),
    }
}

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

impl Instance {
    pub fn build(config: &ExperimentConfig) -> Result<Self, CliError> {
        let grid = TorusGrid::new(config.dim, config.side, config.points_per_axis)?;
        let potential = match config.potential_spec() {
            Some(v) => v,
            None => {
                PotentialSpec::Tabulated(read_table(config.table.as_ref().unwrap(), &grid, "V")?)
            }
        };
        let options = KernelOptions {
            method: config.kernel_method,
            stencil: config.stencil,
            substeps: config.substeps,
            cache_dir: cache_dir(),
        };
        let factory = KernelFactory::new(grid, potential.clone(), options)?;
        let kernel = factory.kernel(config.horizon)?;
        let u_mu = sample(&config.u_mu, config, &grid, "U_mu")?;
        let u_nu = sample(&config.u_nu, config, &grid, "U_nu")?;
        let marginals = MarginalPair::new(&u_mu, &u_nu, kernel.m_weights())?;
        let psi0 = sample(&config.psi0, config, &grid, "psi0")?;
        Ok(Self {
            config: config.clone(),
            grid,
            potential,
            factory,
            kernel,
            marginals,
            psi0,
        })
    }

    /// Modulus of the confining potential; a configured constant `alpha`
    /// takes precedence.
    pub fn modulus(&self) -> Result<Modulus, CliError> {
        let (side, dim) = (self.grid.side(), self.grid.dim());
        Ok(match self.config.alpha {
            Some(a) => Modulus::constant(a, side, dim)?,
            None => Modulus::for_potential(&self.potential, side, dim)?,
        })
    }

    pub fn rates(&self) -> Result<RateBundle, CliError> {
        let alpha = match (&self.config.alpha, &self.config.potential) {
            (Some(a), _) => Some(*a),
            (None, PotentialConfig::Zero) => Some(0.0),
            _ => None,
        };
        Ok(sinkhorn_constants(
            &self.modulus()?,
            &self.marginals.u_mu,
            &self.marginals.u_nu,
            self.config.horizon,
            self.config.quad_nodes,
            alpha,
        )?)
    }

    pub fn field(&self) -> PotentialField {
        PotentialField::new(&self.potential, self.grid.side())
    }
}

pub struct SolveResult {
    pub outcome: RunOutcome,
    pub reference: ReferencePotentials,
    pub bundle: RateBundle,
    pub rows: Vec<DiagnosticRow>,
    pub max_half_step_tv: f64,
    /// Least-squares slope of `log sup_err_psi` against `n`.
    pub fitted_slope: Option<f64>,
    /// `-2 lambda_bar pi^2 T`.
    pub theoretical_slope: f64,
}

/// Sup errors below this are treated as rounding noise when fitting rates.
pub const FIT_FLOOR: f64 = 1e-11;

/// Least-squares slope of `log e_n` against `n` over the rows (including
/// `psi^0`) with `e_n >= floor`; `None` with fewer than two such rows.
pub fn fitted_slope(rows: &[DiagnosticRow], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.sup_err_psi >= floor)
        .map(|r| (r.n as f64, r.sup_err_psi.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

pub fn solve(inst: &Instance) -> Result<SolveResult, CliError> {
    let c = &inst.config;
    let outcome = sinkhorn::run(
        &inst.kernel,
        &inst.marginals,
        &inst.psi0,
        &RunOptions {
            max_iter: c.max_iter,
            tol: c.tol,
            keep_iterates: true,
        },
    )?;
    let reference = reference_potentials(&inst.kernel, &inst.marginals, c.max_iter.max(1000))?;
    let bundle = inst.rates()?;
    let rows = diagnostics(
        &outcome.state,
        &reference,
        &inst.marginals,
        &inst.kernel,
        &bundle.f_bar,
        &bundle.f_v,
    )?;
    let max_half_step_tv = outcome
        .state
        .history
        .iter()
        .map(|r| r.half_step_tv)
        .fold(0.0, f64::max);
    Ok(SolveResult {
        fitted_slope: fitted_slope(&rows, FIT_FLOOR),
        theoretical_slope: -2.0 * bundle.lambda_bar * PI * PI * c.horizon,
        outcome,
        reference,
        bundle,
        rows,
        max_half_step_tv,
    })
}

pub struct HjbCheck {
    pub evolution: HjbEvolution,
    pub ratios: Vec<f64>,
    pub bounds: Vec<f64>,
    pub lambda: f64,
}

impl HjbCheck {
    /// Worst `ratio / bound` over the time nodes before `T` (at `T` both are 1).
    pub fn worst(&self) -> f64 {
        let k = self.ratios.len() - 1;
        self.ratios[..k]
            .iter()
            .zip(&self.bounds[..k])
            .map(|(r, b)| r / b)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, slack: f64) -> bool {
        self.worst() <= 1.0 + slack
    }
}

/// Contraction ratios `||U_t||_f / ||h||_f` against `exp(-lambda pi^2 (T-t))`.
pub fn hjb_check(
    h: &GridFunction,
    factory: &KernelFactory,
    horizon: f64,
    time_nodes: usize,
    fv: &RateTriplet,
) -> Result<HjbCheck, CliError> {
    let times = uniform_times(horizon, time_nodes);
    let evolution = evolve(h, horizon, &times, factory)?;
    let ratios = hjb::contraction_ratio(&evolution, fv)?;
    let bounds = times
        .iter()
        .map(|t| (-fv.lambda * PI * PI * (horizon - t)).exp())
        .collect();
    Ok(HjbCheck {
        evolution,
        ratios,
        bounds,
        lambda: fv.lambda,
    })
}

pub fn terminal_function(
    inst: &Instance,
    psi_star: Option<&GridFunction>,
) -> Result<GridFunction, CliError> {
    match (&inst.config.terminal, psi_star) {
        (Some(spec), _) => sample(spec, &inst.config, &inst.grid, "h"),
        (None, Some(p)) => Ok(p.clone()),
        (None, None) => Err(CliError::Input(
            "terminal psi* requested without a solve".into(),
        )),
    }
}

pub struct CouplingRun {
    pub estimate: CouplingEstimate,
    pub supermartingale: SupermartingaleReport,
    pub triplet: RateTriplet,
}

/// Drift for the coupling: plain Langevin, or with the control fields of a
/// Sinkhorn step (`-grad U^{psi*}` at each state and `grad D` from
/// `psi_n - psi*` at the first).
pub fn coupling_drift(
    inst: &Instance,
    control: Option<(&GridFunction, &GridFunction)>,
    dt: f64,
) -> Result<DriftSpec, CliError> {
    let mut drift = DriftSpec::langevin(inst.field());
    if let Some((psi_n, psi_star)) = control {
        let horizon = inst.config.horizon;
        let count = (horizon / dt).round() as usize + 1;
        let times = uniform_times(horizon, count);
        drift.base_field = Some(evolve(psi_star, horizon, &times, &inst.factory)?);
        drift.control = Some(difference_evolution(
            psi_n,
            psi_star,
            horizon,
            &times,
            &inst.factory,
        )?);
    }
    Ok(drift)
}

#[allow(clippy::too_many_arguments)]
pub fn couple(
    inst: &Instance,
    drift: &DriftSpec,
    triplet: &RateTriplet,
    x: &[f64],
    y: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<CouplingRun, CliError> {
    let c = &inst.config;
    let estimate = contraction_estimate(
        x,
        y,
        0.0,
        c.horizon,
        c.dt,
        drift,
        triplet,
        inst.grid.side(),
        n_paths,
        seed,
        c.checkpoints,
        &CouplingOptions {
            coalesce_tol: c.coalesce_tol,
            bridge_crossing: c.bridge_crossing,
        },
    )?;
    let supermartingale = supermartingale_check(&estimate, triplet.lambda);
    Ok(CouplingRun {
        estimate,
        supermartingale,
        triplet: triplet.clone(),
    })
}

/// Rate triplet of the uncontrolled or the perturbed modulus.
pub fn coupling_triplet(
    inst: &Instance,
    bundle: Option<&RateBundle>,
) -> Result<RateTriplet, CliError> {
    match bundle {
        Some(b) => Ok(b.f_bar.clone()),
        None => Ok(rate_triplet(&inst.modulus()?, inst.config.quad_nodes)?),
    }
}
