//! Experiment configuration.
//!
//! The format is line oriented: `section.key = value`, blank lines and `#`
//! comments ignored, every key at most once. See the README for the full key
//! table. Fourier series are written as `;`-separated terms
//! `k1[,k2,k3]: a b`, meaning `a cos(2 pi k.x / L) + b sin(2 pi k.x / L)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;
use torus_schrodinger::kernel::{KernelMethod, Stencil};
use torus_schrodinger::potential::{FourierTerm, PotentialSpec, TrigTerm};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("line {line}: `{key}`: {reason}")]
    Invalid {
        line: usize,
        key: String,
        reason: String,
    },
}

/// A function on the torus given by a Fourier series or a column of the
/// input table.
#[derive(Debug, Clone, PartialEq)]
pub enum FunctionSpec {
    Fourier(Vec<FourierTerm>),
    Table,
}

impl FunctionSpec {
    pub fn zero() -> Self {
        Self::Fourier(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialConfig {
    Zero,
    Trigonometric(Vec<TrigTerm>),
    Fourier(Vec<FourierTerm>),
    Table,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub side: f64,
    pub points_per_axis: usize,
    pub horizon: f64,
    pub potential: PotentialConfig,
    pub u_mu: FunctionSpec,
    pub u_nu: FunctionSpec,
    /// CSV with columns named `U_mu`, `U_nu` and/or `V`, one row per node.
    pub table: Option<PathBuf>,
    pub max_iter: usize,
    pub tol: f64,
    pub psi0: FunctionSpec,
    pub kernel_method: KernelMethod,
    pub stencil: Stencil,
    pub substeps: Option<usize>,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub checkpoints: usize,
    pub coalesce_tol: Option<f64>,
    pub bridge_crossing: bool,
    pub start_x: Vec<f64>,
    pub start_y: Vec<f64>,
    /// Couple with the Schrödinger control fields instead of plain Langevin.
    pub controlled: bool,
    pub quad_nodes: usize,
    /// Constant modulus `kappa = alpha` for the explicit bounds (`alpha <= 0`).
    pub alpha: Option<f64>,
    pub time_nodes: usize,
    /// Terminal function of `hjb-check`; `None` uses `psi*`.
    pub terminal: Option<FunctionSpec>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for everything but the grid.
    pub fn with_grid(dim: usize, side: f64, points_per_axis: usize, horizon: f64) -> Self {
        Self {
            dim,
            side,
            points_per_axis,
            horizon,
            potential: PotentialConfig::Zero,
            u_mu: FunctionSpec::zero(),
            u_nu: FunctionSpec::zero(),
            table: None,
            max_iter: 500,
            tol: 1e-12,
            psi0: FunctionSpec::zero(),
            kernel_method: KernelMethod::Auto,
            stencil: Stencil::Fourth,
            substeps: None,
            n_paths: 10_000,
            dt: 1e-3,
            seed: 0,
            checkpoints: 11,
            coalesce_tol: None,
            bridge_crossing: true,
            start_x: vec![0.0; dim],
            start_y: vec![0.5 * side; dim],
            controlled: false,
            quad_nodes: 1024,
            alpha: None,
            time_nodes: 16,
            terminal: None,
            out_dir: PathBuf::from("out"),
        }
    }

    /// The pinned benchmark instance: d = 1, L = 1, N = 128, T = 0.5, V = 0.
    pub fn benchmark() -> Self {
        let mut c = Self::with_grid(1, 1.0, 128, 0.5);
        c.u_mu = FunctionSpec::Fourier(vec![term(&[1], 0.0, 0.1), term(&[2], 0.025, 0.0)]);
        c.u_nu = FunctionSpec::Fourier(vec![
            term(&[1], 0.1 * 0.7f64.cos(), -0.1 * 0.7f64.sin()),
            term(&[3], 0.0, 0.015),
        ]);
        c
    }

    pub fn potential_spec(&self) -> Option<PotentialSpec> {
        match &self.potential {
            PotentialConfig::Zero => Some(PotentialSpec::Zero),
            PotentialConfig::Trigonometric(t) => Some(PotentialSpec::Trigonometric(t.clone())),
            PotentialConfig::Fourier(t) => Some(PotentialSpec::Fourier(t.clone())),
            PotentialConfig::Table => None,
        }
    }
}

fn term(wave: &[i32], cos: f64, sin: f64) -> FourierTerm {
    FourierTerm {
        wave: wave.to_vec(),
        cos,
        sin,
    }
}

const KEYS: &[&str] = &[
    "grid.d",
    "grid.L",
    "grid.N",
    "grid.T",
    "potential.kind",
    "potential.alpha",
    "potential.beta",
    "potential.omega",
    "potential.fourier",
    "marginals.u_mu",
    "marginals.u_nu",
    "input.table",
    "solver.max_iter",
    "solver.tol",
    "solver.psi0",
    "kernel.method",
    "kernel.stencil",
    "kernel.substeps",
    "mc.n_paths",
    "mc.dt",
    "mc.seed",
    "mc.checkpoints",
    "mc.coalesce_tol",
    "mc.bridge",
    "couple.x",
    "couple.y",
    "couple.controlled",
    "rates.quad_nodes",
    "rates.alpha",
    "hjb.time_nodes",
    "hjb.terminal",
    "output.dir",
];

struct Entries(BTreeMap<&'static str, (usize, String)>);

impl Entries {
    fn take(&mut self, key: &'static str) -> Option<(usize, String)> {
        self.0.remove(key)
    }

    fn parsed<T>(
        &mut self,
        key: &'static str,
        f: impl FnOnce(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => f(&v).map(Some).map_err(|reason| ConfigError::Invalid {
                line,
                key: key.into(),
                reason,
            }),
        }
    }

    fn line(&self, key: &str) -> usize {
        self.0.get(key).map_or(0, |e| e.0)
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}`"))
}

fn list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|v| num(v.trim())).collect()
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{s}`")),
    }
}

fn fourier(s: &str) -> Result<Vec<FourierTerm>, String> {
    if s.trim().is_empty() || s.trim() == "zero" {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|t| {
            let (wave, coef) = t
                .split_once(':')
                .ok_or_else(|| format!("term `{}` lacks `:`", t.trim()))?;
            let wave = wave
                .split(',')
                .map(|k| num::<i32>(k.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            let c: Vec<f64> = coef.split_whitespace().map(num).collect::<Result<_, _>>()?;
            if c.len() != 2 || c.iter().any(|v| !v.is_finite()) {
                return Err(format!("term `{}` needs two finite coefficients", t.trim()));
            }
            Ok(term(&wave, c[0], c[1]))
        })
        .collect()
}

fn function(s: &str) -> Result<FunctionSpec, String> {
    if s == "table" {
        Ok(FunctionSpec::Table)
    } else {
        fourier(s).map(FunctionSpec::Fourier)
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or(ConfigError::Syntax { line })?;
        let key = key.trim();
        if !key.contains('.') {
            return Err(ConfigError::Syntax { line });
        }
        let known = KEYS
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| ConfigError::UnknownKey {
                line,
                key: key.into(),
            })?;
        if map
            .insert(*known, (line, value.trim().to_string()))
            .is_some()
        {
            return Err(ConfigError::Duplicate {
                line,
                key: key.into(),
            });
        }
    }
    let mut e = Entries(map);
    let invalid = |line: usize, key: &str, reason: String| ConfigError::Invalid {
        line,
        key: key.into(),
        reason,
    };

    let d_line = e.line("grid.d");
    let dim: usize = e
        .parsed("grid.d", num)?
        .ok_or(ConfigError::Missing("grid.d"))?;
    if !(1..=3).contains(&dim) {
        return Err(invalid(
            d_line,
            "grid.d",
            format!("dimension must be 1, 2 or 3, got {dim}"),
        ));
    }
    let l_line = e.line("grid.L");
    let side: f64 = e
        .parsed("grid.L", num)?
        .ok_or(ConfigError::Missing("grid.L"))?;
    if !(side.is_finite() && side > 0.0) {
        return Err(invalid(
            l_line,
            "grid.L",
            "side length must be positive".into(),
        ));
    }
    let n_line = e.line("grid.N");
    let n: usize = e
        .parsed("grid.N", num)?
        .ok_or(ConfigError::Missing("grid.N"))?;
    if n < 4 {
        return Err(invalid(
            n_line,
            "grid.N",
            "need at least 4 points per axis".into(),
        ));
    }
    let t_line = e.line("grid.T");
    let horizon: f64 = e
        .parsed("grid.T", num)?
        .ok_or(ConfigError::Missing("grid.T"))?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(invalid(t_line, "grid.T", "horizon must be positive".into()));
    }
    let mut c = ExperimentConfig::with_grid(dim, side, n, horizon);

    let kind_line = e.line("potential.kind");
    let kind = e.take("potential.kind").map(|(_, v)| v);
    let axis_list = |e: &mut Entries, key: &'static str| -> Result<Vec<f64>, ConfigError> {
        let line = e.line(key);
        let v = e.parsed(key, list)?.unwrap_or_else(|| vec![0.0; dim]);
        if v.len() != dim {
            return Err(invalid(
                line,
                key,
                format!("need {dim} comma-separated values"),
            ));
        }
        Ok(v)
    };
    let alpha = axis_list(&mut e, "potential.alpha")?;
    let beta = axis_list(&mut e, "potential.beta")?;
    let omega = axis_list(&mut e, "potential.omega")?;
    let vf = e.parsed("potential.fourier", fourier)?;
    c.potential = match kind.as_deref() {
        None | Some("zero") => PotentialConfig::Zero,
        Some("trigonometric") => PotentialConfig::Trigonometric(
            (0..dim)
                .map(|i| TrigTerm {
                    alpha: alpha[i],
                    beta: beta[i],
                    omega: omega[i],
                })
                .collect(),
        ),
        Some("fourier") => PotentialConfig::Fourier(vf.unwrap_or_default()),
        Some("table") => PotentialConfig::Table,
        Some(other) => {
            return Err(invalid(
                kind_line,
                "potential.kind",
                format!("expected zero, trigonometric, fourier or table, got `{other}`"),
            ))
        }
    };
    let check_waves = |terms: &[FourierTerm], line: usize, key: &str| {
        if terms.iter().any(|t| t.wave.len() != dim) {
            Err(invalid(
                line,
                key,
                format!("wave vectors must have {dim} components"),
            ))
        } else {
            Ok(())
        }
    };
    if let PotentialConfig::Fourier(t) = &c.potential {
        check_waves(t, kind_line, "potential.fourier")?;
    }
    for (key, slot) in [
        ("marginals.u_mu", &mut c.u_mu),
        ("marginals.u_nu", &mut c.u_nu),
        ("solver.psi0", &mut c.psi0),
    ] {
        let line = e.line(key);
        if let Some(f) = e.parsed(key, function)? {
            if let FunctionSpec::Fourier(t) = &f {
                check_waves(t, line, key)?;
            }
            *slot = f;
        }
    }
    let term_line = e.line("hjb.terminal");
    c.terminal = e
        .parsed("hjb.terminal", |s| {
            if s == "psi_star" {
                Ok(None)
            } else {
                function(s).map(Some)
            }
        })?
        .flatten();
    if let Some(FunctionSpec::Fourier(t)) = &c.terminal {
        check_waves(t, term_line, "hjb.terminal")?;
    }
    c.table = e.parsed("input.table", |s| Ok(PathBuf::from(s)))?;
    let uses_table = c.potential == PotentialConfig::Table
        || [&c.u_mu, &c.u_nu, &c.psi0].contains(&&FunctionSpec::Table)
        || c.terminal == Some(FunctionSpec::Table);
    if uses_table && c.table.is_none() {
        return Err(ConfigError::Missing("input.table"));
    }

    if let Some(v) = e.parsed("solver.max_iter", num)? {
        c.max_iter = v;
    }
    if let Some(v) = e.parsed("solver.tol", |s| {
        let t: f64 = num(s)?;
        if t > 0.0 {
            Ok(t)
        } else {
            Err("tolerance must be positive".into())
        }
    })? {
        c.tol = v;
    }
    if let Some(v) = e.parsed("kernel.method", |s| match s {
        "auto" => Ok(KernelMethod::Auto),
        "fft" => Ok(KernelMethod::Fft),
        "dense" => Ok(KernelMethod::Dense),
        "crank-nicolson" => Ok(KernelMethod::CrankNicolson),
        _ => Err(format!(
            "expected auto, fft, dense or crank-nicolson, got `{s}`"
        )),
    })? {
        c.kernel_method = v;
    }
    if let Some(v) = e.parsed("kernel.stencil", |s| match s {
        "second" => Ok(Stencil::Second),
        "fourth" => Ok(Stencil::Fourth),
        _ => Err(format!("expected second or fourth, got `{s}`")),
    })? {
        c.stencil = v;
    }
    c.substeps = e.parsed("kernel.substeps", |s| {
        let k: usize = num(s)?;
        if k > 0 {
            Ok(k)
        } else {
            Err("need at least one substep".into())
        }
    })?;
    if let Some(v) = e.parsed("mc.n_paths", |s| {
        let k: usize = num(s)?;
        if k >= 100 {
            Ok(k)
        } else {
            Err("need at least 100 paths".into())
        }
    })? {
        c.n_paths = v;
    }
    if let Some(v) = e.parsed("mc.dt", |s| {
        let t: f64 = num(s)?;
        if t > 0.0 && t <= 1e-2 {
            Ok(t)
        } else {
            Err("need 0 < dt <= 1e-2".into())
        }
    })? {
        c.dt = v;
    }
    if let Some(v) = e.parsed("mc.seed", num)? {
        c.seed = v;
    }
    if let Some(v) = e.parsed("mc.checkpoints", |s| {
        let k: usize = num(s)?;
        if k >= 2 {
            Ok(k)
        } else {
            Err("need at least 2 checkpoints".into())
        }
    })? {
        c.checkpoints = v;
    }
    c.coalesce_tol = e.parsed("mc.coalesce_tol", |s| {
        let t: f64 = num(s)?;
        if t > 0.0 {
            Ok(t)
        } else {
            Err("tolerance must be positive".into())
        }
    })?;
    if let Some(v) = e.parsed("mc.bridge", boolean)? {
        c.bridge_crossing = v;
    }
    for (key, slot) in [("couple.x", &mut c.start_x), ("couple.y", &mut c.start_y)] {
        if let Some(v) = e.parsed(key, |s| {
            let v = list(s)?;
            if v.len() == dim {
                Ok(v)
            } else {
                Err(format!("need {dim} coordinates"))
            }
        })? {
            *slot = v;
        }
    }
    if let Some(v) = e.parsed("couple.controlled", boolean)? {
        c.controlled = v;
    }
    if let Some(v) = e.parsed("rates.quad_nodes", |s| {
        let k: usize = num(s)?;
        if k >= 256 {
            Ok(k)
        } else {
            Err("need at least 256 quadrature nodes".into())
        }
    })? {
        c.quad_nodes = v;
    }
    c.alpha = e.parsed("rates.alpha", |s| {
        let a: f64 = num(s)?;
        if a > 0.0 {
            Err("a constant modulus must be nonpositive (alpha > 0 would make the drift expansive everywhere)".into())
        } else if !a.is_finite() {
            Err("must be finite".into())
        } else {
            Ok(a)
        }
    })?;
    if let Some(v) = e.parsed("hjb.time_nodes", |s| {
        let k: usize = num(s)?;
        if k >= 2 {
            Ok(k)
        } else {
            Err("need at least 2 time nodes".into())
        }
    })? {
        c.time_nodes = v;
    }
    if let Some(v) = e.parsed("output.dir", |s| Ok(PathBuf::from(s)))? {
        c.out_dir = v;
    }
    debug_assert!(e.0.is_empty(), "unconsumed keys {:?}", e.0.keys());
    Ok(c)
}

fn emit_fourier(terms: &[FourierTerm]) -> String {
    if terms.is_empty() {
        return "zero".into();
    }
    terms
        .iter()
        .map(|t| {
            let wave: Vec<String> = t.wave.iter().map(|k| k.to_string()).collect();
            format!("{}: {:?} {:?}", wave.join(","), t.cos, t.sin)
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn emit_function(f: &FunctionSpec) -> String {
    match f {
        FunctionSpec::Fourier(t) => emit_fourier(t),
        FunctionSpec::Table => "table".into(),
    }
}

fn emit_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Canonical text form; `parse_config(&emit_config(c)) == c`.
pub fn emit_config(c: &ExperimentConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
    put("grid.d", c.dim.to_string());
    put("grid.L", format!("{:?}", c.side));
    put("grid.N", c.points_per_axis.to_string());
    put("grid.T", format!("{:?}", c.horizon));
    match &c.potential {
        PotentialConfig::Zero => put("potential.kind", "zero".into()),
        PotentialConfig::Trigonometric(t) => {
            put("potential.kind", "trigonometric".into());
            put(
                "potential.alpha",
                emit_list(&t.iter().map(|t| t.alpha).collect::<Vec<_>>()),
            );
            put(
                "potential.beta",
                emit_list(&t.iter().map(|t| t.beta).collect::<Vec<_>>()),
            );
            put(
                "potential.omega",
                emit_list(&t.iter().map(|t| t.omega).collect::<Vec<_>>()),
            );
        }
        PotentialConfig::Fourier(t) => {
            put("potential.kind", "fourier".into());
            put("potential.fourier", emit_fourier(t));
        }
        PotentialConfig::Table => put("potential.kind", "table".into()),
    }
    put("marginals.u_mu", emit_function(&c.u_mu));
    put("marginals.u_nu", emit_function(&c.u_nu));
    if let Some(p) = &c.table {
        put("input.table", p.display().to_string());
    }
    put("solver.max_iter", c.max_iter.to_string());
    put("solver.tol", format!("{:?}", c.tol));
    put("solver.psi0", emit_function(&c.psi0));
    put(
        "kernel.method",
        match c.kernel_method {
            KernelMethod::Auto => "auto",
            KernelMethod::Fft => "fft",
            KernelMethod::Dense => "dense",
            KernelMethod::CrankNicolson => "crank-nicolson",
        }
        .into(),
    );
    put(
        "kernel.stencil",
        match c.stencil {
            Stencil::Second => "second",
            Stencil::Fourth => "fourth",
        }
        .into(),
    );
    if let Some(k) = c.substeps {
        put("kernel.substeps", k.to_string());
    }
    put("mc.n_paths", c.n_paths.to_string());
    put("mc.dt", format!("{:?}", c.dt));
    put("mc.seed", c.seed.to_string());
    put("mc.checkpoints", c.checkpoints.to_string());
    if let Some(t) = c.coalesce_tol {
        put("mc.coalesce_tol", format!("{t:?}"));
    }
    put("mc.bridge", c.bridge_crossing.to_string());
    put("couple.x", emit_list(&c.start_x));
    put("couple.y", emit_list(&c.start_y));
    put("couple.controlled", c.controlled.to_string());
    put("rates.quad_nodes", c.quad_nodes.to_string());
    if let Some(a) = c.alpha {
        put("rates.alpha", format!("{a:?}"));
    }
    put("hjb.time_nodes", c.time_nodes.to_string());
    put(
        "hjb.terminal",
        c.terminal.as_ref().map_or("psi_star".into(), emit_function),
    );
    put("output.dir", c.out_dir.display().to_string());
    s
}
