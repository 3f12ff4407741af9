//! Stationary measure and discrete transition operators of the Langevin
//! diffusion `dX = -grad V(X) dt + dB` on the torus.
//!
//! Two independent constructions are provided:
//!
//! * [`heat_kernel_fft`]: for `V = 0`, the operator diagonal in the discrete
//!   Fourier basis with symbol `exp(-t |2 pi k / L|^2 / 2)`; stored as a
//!   circulant (one row), so it scales to any grid.
//! * [`kernel_general`]: exponential of a finite-difference generator. The
//!   generator is written in flux form,
//!   `G = -1/2 M^{-1} sum_a D_a^T W_a D_a`, with `M = diag(e^{-2V})` at nodes,
//!   `W_a = diag(e^{-2V})` at the staggered midpoints and `D_a` a staggered
//!   difference. This makes `G` exactly `m`-reversible with zero row sums, so
//!   the symmetric conjugate `M^{1/2} G M^{-1/2}` can be exponentiated and
//!   mapped back without losing either invariant.

pub mod cache;

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::{centered_wavenumber, GridFunction, TorusGrid};
use crate::potential::PotentialSpec;

/// Row sums must be within this distance of 1.
pub const ROW_SUM_TOL: f64 = 1e-10;
/// Bound on `|m_x K[x,y] - m_y K[y,x]|`.
pub const REVERSIBILITY_TOL: f64 = 1e-8;
/// Negative entries above this threshold are rounding noise and are clamped.
pub const NEGATIVE_CLAMP: f64 = 1e-12;
/// Largest node count for which the dense exponential is used by default.
pub const DENSE_LIMIT: usize = 4096;

/// Staggered first-difference stencil of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f_{i+1} - f_i) / h`; the Laplacian part is the classic 3-point one.
    Second,
    /// `(f_{i-1} - 27 f_i + 27 f_{i+1} - f_{i+2}) / (24 h)`.
    #[default]
    Fourth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMethod {
    /// FFT for `V = 0`, dense exponential up to [`DENSE_LIMIT`] nodes,
    /// Crank–Nicolson beyond.
    #[default]
    Auto,
    Fft,
    Dense,
    CrankNicolson,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KernelOptions {
    pub method: KernelMethod,
    pub stencil: Stencil,
    /// Crank–Nicolson steps; defaults to `ceil(2 t / h^2)`.
    pub substeps: Option<usize>,
    /// Directory of the on-disk kernel cache, if any.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    /// Row-major `M x M`.
    Dense(Vec<f64>),
    /// `K[x, y] = row[offset(y - x)]`.
    Circulant(Vec<f64>),
}

/// Transition matrix of `P_t` on a grid together with its stationary weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovKernel {
    grid: TorusGrid,
    time: f64,
    storage: Storage,
    m_weights: Vec<f64>,
}

impl MarkovKernel {
    /// `P_0`.
    pub fn identity(grid: TorusGrid, m_weights: Vec<f64>) -> Self {
        let mut row = vec![0.0; grid.len()];
        row[0] = 1.0;
        Self {
            grid,
            time: 0.0,
            storage: Storage::Circulant(row),
            m_weights,
        }
    }

    /// Wraps a dense row-major matrix, enforcing all invariants.
    pub fn from_dense(
        grid: TorusGrid,
        time: f64,
        entries: Vec<f64>,
        m_weights: Vec<f64>,
    ) -> Result<Self> {
        let m = grid.len();
        if entries.len() != m * m || m_weights.len() != m {
            return Err(Error::GridMismatch(format!(
                "kernel of size {} / weights of size {} on a grid of {m} nodes",
                entries.len(),
                m_weights.len()
            )));
        }
        let mut k = Self {
            grid,
            time,
            storage: Storage::Dense(entries),
            m_weights,
        };
        k.clamp_and_validate()?;
        Ok(k)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn m_weights(&self) -> &[f64] {
        &self.m_weights
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_circulant(&self) -> bool {
        matches!(self.storage, Storage::Circulant(_))
    }

    pub fn entry(&self, x: usize, y: usize) -> f64 {
        match &self.storage {
            Storage::Dense(k) => k[x * self.len() + y],
            Storage::Circulant(c) => c[offset_index(&self.grid, x, y)],
        }
    }

    /// Writes row `x` into `out`.
    pub fn row_into(&self, x: usize, out: &mut [f64]) {
        let m = self.len();
        match &self.storage {
            Storage::Dense(k) => out.copy_from_slice(&k[x * m..(x + 1) * m]),
            Storage::Circulant(c) => {
                for (y, o) in out.iter_mut().enumerate() {
                    *o = c[offset_index(&self.grid, x, y)];
                }
            }
        }
    }

    /// Row-major dense copy of the matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        match &self.storage {
            Storage::Dense(k) => k.clone(),
            Storage::Circulant(_) => {
                let m = self.len();
                let mut out = vec![0.0; m * m];
                out.par_chunks_mut(m)
                    .enumerate()
                    .for_each(|(x, row)| self.row_into(x, row));
                out
            }
        }
    }

    fn for_each_row<R: Send>(&self, f: impl Fn(usize, &[f64]) -> R + Sync) -> Vec<R> {
        let m = self.len();
        match &self.storage {
            Storage::Dense(k) => k.par_chunks(m).enumerate().map(|(x, r)| f(x, r)).collect(),
            Storage::Circulant(_) => (0..m)
                .into_par_iter()
                .map_init(
                    || vec![0.0; m],
                    |buf, x| {
                        self.row_into(x, buf);
                        f(x, buf)
                    },
                )
                .collect(),
        }
    }

    /// `(K f)(x) = sum_y K[x,y] f(y)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.for_each_row(|_, row| row.iter().zip(f).map(|(k, v)| k * v).sum())
    }

    /// `x -> log sum_y K[x,y] e^{g(y)}`, evaluated with a max shift. Rows whose
    /// shifted sum underflows are recomputed with a row-wise shift.
    pub fn apply_log(&self, g: &GridFunction) -> Result<GridFunction> {
        if g.grid() != &self.grid {
            return Err(Error::GridMismatch(format!(
                "function on {:?}, kernel on {:?}",
                g.grid(),
                self.grid
            )));
        }
        let gv = g.values();
        let gmax = gv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let eg: Vec<f64> = gv.iter().map(|v| (v - gmax).exp()).collect();
        let out: Vec<Result<f64>> = self.for_each_row(|x, row| {
            let s: f64 = row.iter().zip(&eg).map(|(k, e)| k * e).sum();
            if s >= f64::MIN_POSITIVE {
                return Ok(gmax + s.ln());
            }
            // underflow: shift by the row's own maximum of g + log K
            let a = row
                .iter()
                .zip(gv)
                .filter(|(k, _)| **k > 0.0)
                .map(|(k, v)| v + k.ln())
                .fold(f64::NEG_INFINITY, f64::max);
            if a == f64::NEG_INFINITY {
                return Err(Error::ZeroRow { row: x });
            }
            let s: f64 = row
                .iter()
                .zip(gv)
                .filter(|(k, _)| **k > 0.0)
                .map(|(k, v)| (v + k.ln() - a).exp())
                .sum();
            Ok(a + s.ln())
        });
        let values = out.into_iter().collect::<Result<Vec<f64>>>()?;
        GridFunction::new(self.grid, values)
    }

    /// Matrix product `self * other` (Chapman–Kolmogorov composition).
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(
                "composing kernels on different grids".into(),
            ));
        }
        let time = self.time + other.time;
        if let (Storage::Circulant(a), Storage::Circulant(b)) = (&self.storage, &other.storage) {
            // circulants compose by cyclic convolution of their first rows
            let m = self.len();
            let c: Vec<f64> = (0..m)
                .into_par_iter()
                .map(|z| {
                    (0..m)
                        .map(|y| a[y] * b[offset_index(&self.grid, y, z)])
                        .sum()
                })
                .collect();
            let mut k = Self {
                grid: self.grid,
                time,
                storage: Storage::Circulant(c),
                m_weights: self.m_weights.clone(),
            };
            k.clamp_and_validate()?;
            return Ok(k);
        }
        let m = self.len();
        let a = DMatrix::from_row_slice(m, m, &self.to_dense());
        let b = DMatrix::from_row_slice(m, m, &other.to_dense());
        let p = a * b;
        Self::from_dense(self.grid, time, row_major(&p), self.m_weights.clone())
    }

    pub fn min_entry(&self) -> f64 {
        match &self.storage {
            Storage::Dense(k) | Storage::Circulant(k) => {
                k.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// `max_x |sum_y K[x,y] - 1|`.
    pub fn row_sum_defect(&self) -> f64 {
        self.for_each_row(|_, row| (row.iter().sum::<f64>() - 1.0).abs())
            .into_iter()
            .fold(0.0, f64::max)
    }

    /// `max_{x,y} |m_x K[x,y] - m_y K[y,x]|`.
    pub fn reversibility_defect(&self) -> f64 {
        let m = self.len();
        let w = &self.m_weights;
        (0..m)
            .into_par_iter()
            .map(|x| {
                (x + 1..m)
                    .map(|y| (w[x] * self.entry(x, y) - w[y] * self.entry(y, x)).abs())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Entrywise max-abs difference to another kernel on the same grid.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(
                "comparing kernels on different grids".into(),
            ));
        }
        let m = self.len();
        Ok((0..m)
            .into_par_iter()
            .map(|x| {
                (0..m)
                    .map(|y| (self.entry(x, y) - other.entry(x, y)).abs())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max))
    }

    /// Clamps rounding-level negatives, renormalises affected rows and checks
    /// positivity, stochasticity and reversibility.
    fn clamp_and_validate(&mut self) -> Result<()> {
        let m = self.len();
        match &mut self.storage {
            Storage::Dense(k) => {
                for (x, row) in k.chunks_mut(m).enumerate() {
                    clamp_row(row, x)?;
                }
            }
            Storage::Circulant(c) => clamp_row(c, 0)?,
        }
        let defect = self.row_sum_defect();
        if defect > ROW_SUM_TOL {
            return Err(Error::KernelInvariant {
                what: "row sum",
                defect,
                tolerance: ROW_SUM_TOL,
            });
        }
        let defect = self.reversibility_defect();
        if defect > REVERSIBILITY_TOL {
            return Err(Error::KernelInvariant {
                what: "reversibility",
                defect,
                tolerance: REVERSIBILITY_TOL,
            });
        }
        Ok(())
    }
}

fn clamp_row(row: &mut [f64], x: usize) -> Result<()> {
    let mut clamped = false;
    for (y, v) in row.iter_mut().enumerate() {
        if *v < -NEGATIVE_CLAMP || !v.is_finite() {
            return Err(Error::NegativeEntry {
                row: x,
                col: y,
                value: *v,
            });
        }
        if *v < 0.0 {
            *v = 0.0;
            clamped = true;
        }
    }
    if clamped {
        let s: f64 = row.iter().sum();
        if s <= 0.0 {
            return Err(Error::ZeroRow { row: x });
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(())
}

/// Flat index of the per-axis offset `y - x (mod N)`.
fn offset_index(grid: &TorusGrid, x: usize, y: usize) -> usize {
    let n = grid.points_per_axis();
    let (mut x, mut y) = (x, y);
    let mut out = 0;
    let mut stride = 1;
    for _ in 0..grid.dim() {
        let (xi, yi) = (x % n, y % n);
        out += ((yi + n - xi) % n) * stride;
        x /= n;
        y /= n;
        stride *= n;
    }
    out
}

fn row_major(a: &DMatrix<f64>) -> Vec<f64> {
    a.transpose().as_slice().to_vec()
}

/// Probability weights proportional to `e^{-2V}` at the nodes.
pub fn stationary_measure(grid: &TorusGrid, v: &PotentialSpec) -> Result<Vec<f64>> {
    let vals = v.sample(grid)?;
    let shift = vals
        .values()
        .iter()
        .map(|v| -2.0 * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = vals
        .values()
        .iter()
        .map(|v| (-2.0 * v - shift).exp())
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Kernel of `e^{t Delta / 2}` on the periodic grid via its Fourier symbol.
pub fn heat_kernel_fft(grid: &TorusGrid, t: f64) -> Result<MarkovKernel> {
    check_time(t)?;
    let m = grid.len();
    let uniform = vec![1.0 / m as f64; m];
    if t == 0.0 {
        return Ok(MarkovKernel::identity(*grid, uniform));
    }
    let n = grid.points_per_axis();
    let scale = 2.0 * std::f64::consts::PI / grid.side();
    let mut line: Vec<Complex<f64>> = (0..n)
        .map(|k| {
            let w = scale * centered_wavenumber(k, n);
            Complex::new((-0.5 * t * w * w).exp(), 0.0)
        })
        .collect();
    FftPlanner::<f64>::new()
        .plan_fft_inverse(n)
        .process(&mut line);
    let c1: Vec<f64> = line.iter().map(|c| c.re / n as f64).collect();
    let row: Vec<f64> = (0..m)
        .map(|flat| {
            let idx = grid.multi_index(flat);
            idx[..grid.dim()].iter().map(|&i| c1[i]).product()
        })
        .collect();
    let mut k = MarkovKernel {
        grid: *grid,
        time: t,
        storage: Storage::Circulant(row),
        m_weights: uniform,
    };
    k.clamp_and_validate()?;
    Ok(k)
}

fn check_time(t: f64) -> Result<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "t",
            reason: format!("time must be finite and non-negative, got {t}"),
        });
    }
    Ok(())
}

/// Symmetrised generator `M^{1/2} G M^{-1/2}` and the (unnormalised) node
/// weights `e^{-2V - s}`.
pub fn symmetric_generator(
    grid: &TorusGrid,
    v: &PotentialSpec,
    stencil: Stencil,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let nodes = v.sample(grid)?;
    let m = grid.len();
    let d = grid.dim();
    let h = grid.spacing();
    let side = grid.side();

    // potential at the midpoint x + h/2 e_a, for every node x and axis a
    let mid: Vec<Vec<f64>> = (0..d)
        .map(|a| match v {
            PotentialSpec::Tabulated(f) => {
                let vals = f.values();
                (0..m)
                    .map(|x| {
                        let at = |s: isize| vals[step(grid, x, a, s)];
                        (-at(-1) + 9.0 * at(0) + 9.0 * at(1) - at(2)) / 16.0
                    })
                    .collect()
            }
            _ => (0..m)
                .map(|x| {
                    let mut p = grid.node(x);
                    p[a] += 0.5 * h;
                    v.value(&p, side)
                })
                .collect(),
        })
        .collect();

    let shift = nodes
        .values()
        .iter()
        .chain(mid.iter().flatten())
        .map(|v| -2.0 * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = nodes
        .values()
        .iter()
        .map(|v| (-2.0 * v - shift).exp())
        .collect();

    let taps: &[(isize, f64)] = match stencil {
        Stencil::Second => &[(0, -1.0), (1, 1.0)],
        Stencil::Fourth => &[
            (-1, 1.0 / 24.0),
            (0, -27.0 / 24.0),
            (1, 27.0 / 24.0),
            (2, -1.0 / 24.0),
        ],
    };
    let mut a_mat = DMatrix::<f64>::zeros(m, m);
    for (axis, mid_axis) in mid.iter().enumerate() {
        for (p, vm) in mid_axis.iter().enumerate() {
            let w = (-2.0 * vm - shift).exp() / (h * h);
            for &(s1, c1) in taps {
                let i = step(grid, p, axis, s1);
                for &(s2, c2) in taps {
                    let j = step(grid, p, axis, s2);
                    a_mat[(i, j)] += w * c1 * c2;
                }
            }
        }
    }
    let inv_sqrt: Vec<f64> = weights.iter().map(|w| 1.0 / w.sqrt()).collect();
    let g = DMatrix::from_fn(m, m, |i, j| {
        -0.5 * a_mat[(i, j)] * inv_sqrt[i] * inv_sqrt[j]
    });
    Ok((symmetrize(g), weights))
}

fn step(grid: &TorusGrid, flat: usize, axis: usize, s: isize) -> usize {
    let n = grid.points_per_axis();
    let stride = n.pow(axis as u32);
    let i = (flat / stride) % n;
    let j = (i as isize + s).rem_euclid(n as isize) as usize;
    flat - i * stride + j * stride
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    let t = a.transpose();
    (a + t) * 0.5
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(B)` for symmetric `B` by Taylor scaling and squaring.
pub fn expm_symmetric(b: &DMatrix<f64>) -> DMatrix<f64> {
    let m = b.nrows();
    let norm = one_norm(b);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = b / 2f64.powi(squarings as i32);
    let mut e = DMatrix::<f64>::identity(m, m);
    let mut term = DMatrix::<f64>::identity(m, m);
    for k in 1..64 {
        term = (&term * &scaled) / k as f64;
        e += &term;
        if one_norm(&term) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        e = symmetrize(&e * &e);
    }
    e
}

/// `R^n` for symmetric `R` by binary powering.
fn power_symmetric(r: DMatrix<f64>, mut n: usize) -> DMatrix<f64> {
    let m = r.nrows();
    let mut acc = DMatrix::<f64>::identity(m, m);
    let mut base = r;
    while n > 0 {
        if n & 1 == 1 {
            acc = symmetrize(&acc * &base);
        }
        n >>= 1;
        if n > 0 {
            base = symmetrize(&base * &base);
        }
    }
    acc
}

/// One Crank–Nicolson step `(I - dt G/2)^{-1} (I + dt G/2)` in symmetric form.
fn crank_nicolson_step(g: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let m = g.nrows();
    let id = DMatrix::<f64>::identity(m, m);
    let lhs = &id - g * (0.5 * dt);
    let rhs = &id + g * (0.5 * dt);
    let chol = lhs.cholesky().ok_or(Error::KernelInvariant {
        what: "Crank-Nicolson positivity",
        defect: f64::NAN,
        tolerance: 0.0,
    })?;
    Ok(symmetrize(chol.solve(&rhs)))
}

pub fn default_substeps(grid: &TorusGrid, t: f64) -> usize {
    let h = grid.spacing();
    ((2.0 * t / (h * h)).ceil() as usize).max(1)
}

/// Transition matrix of the discretised generator at time `t`.
pub fn kernel_general(
    grid: &TorusGrid,
    v: &PotentialSpec,
    t: f64,
    options: &KernelOptions,
) -> Result<MarkovKernel> {
    check_time(t)?;
    let method = resolve_method(grid, v, options.method);
    if method == KernelMethod::Fft {
        if !v.is_zero() {
            return Err(Error::InvalidParameter {
                name: "kernel.method",
                reason: "the FFT kernel requires V = 0".into(),
            });
        }
        return heat_kernel_fft(grid, t);
    }
    if t == 0.0 {
        return Ok(MarkovKernel::identity(*grid, stationary_measure(grid, v)?));
    }
    let substeps = match method {
        KernelMethod::CrankNicolson => options
            .substeps
            .unwrap_or_else(|| default_substeps(grid, t)),
        _ => 0,
    };
    if method == KernelMethod::CrankNicolson && substeps == 0 {
        return Err(Error::InvalidParameter {
            name: "kernel.substeps",
            reason: "must be positive".into(),
        });
    }

    let key = cache::CacheKey::new(grid, v, t, substeps, options.stencil, method);
    if let Some(dir) = &options.cache_dir {
        if let Some((entries, weights)) = cache::load(dir, &key)? {
            if let Ok(k) = MarkovKernel::from_dense(*grid, t, entries, weights) {
                return Ok(k);
            }
        }
    }

    let (g, raw) = symmetric_generator(grid, v, options.stencil)?;
    let e = match method {
        KernelMethod::CrankNicolson => {
            let step = crank_nicolson_step(&g, t / substeps as f64)?;
            power_symmetric(step, substeps)
        }
        _ => expm_symmetric(&(g * t)),
    };
    let m = grid.len();
    let sqrt_w: Vec<f64> = raw.iter().map(|w| w.sqrt()).collect();
    let mut entries = row_major(&e);
    entries.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= sqrt_w[j] / sqrt_w[i];
        }
    });
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let k = MarkovKernel::from_dense(*grid, t, entries, weights)?;
    if let Some(dir) = &options.cache_dir {
        if let Storage::Dense(entries) = &k.storage {
            cache::store(dir, &key, entries, &k.m_weights)?;
        }
    }
    Ok(k)
}

fn resolve_method(grid: &TorusGrid, v: &PotentialSpec, method: KernelMethod) -> KernelMethod {
    match method {
        KernelMethod::Auto if v.is_zero() => KernelMethod::Fft,
        KernelMethod::Auto if grid.len() <= DENSE_LIMIT => KernelMethod::Dense,
        KernelMethod::Auto => KernelMethod::CrankNicolson,
        other => other,
    }
}

/// Builds and memoises kernels `P_t` for one grid and potential.
#[derive(Debug)]
pub struct KernelFactory {
    grid: TorusGrid,
    potential: PotentialSpec,
    options: KernelOptions,
    memo: Mutex<Vec<(u64, Arc<MarkovKernel>)>>,
}

impl KernelFactory {
    pub fn new(grid: TorusGrid, potential: PotentialSpec, options: KernelOptions) -> Result<Self> {
        potential.validate_for(&grid)?;
        Ok(Self {
            grid,
            potential,
            options,
            memo: Mutex::new(Vec::new()),
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn potential(&self) -> &PotentialSpec {
        &self.potential
    }

    pub fn options(&self) -> &KernelOptions {
        &self.options
    }

    pub fn kernel(&self, t: f64) -> Result<Arc<MarkovKernel>> {
        let key = t.to_bits();
        if let Some((_, k)) = self.memo.lock().unwrap().iter().find(|(b, _)| *b == key) {
            return Ok(Arc::clone(k));
        }
        let k = Arc::new(kernel_general(
            &self.grid,
            &self.potential,
            t,
            &self.options,
        )?);
        self.memo.lock().unwrap().push((key, Arc::clone(&k)));
        Ok(k)
    }

    /// Every kernel built so far, in construction order.
    pub fn built(&self) -> Vec<Arc<MarkovKernel>> {
        self.memo
            .lock()
            .unwrap()
            .iter()
            .map(|(_, k)| Arc::clone(k))
            .collect()
    }

    pub fn stationary_measure(&self) -> Result<Vec<f64>> {
        stationary_measure(&self.grid, &self.potential)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::TrigTerm;
    use std::f64::consts::PI;

    fn trig_v() -> PotentialSpec {
        PotentialSpec::trigonometric(vec![TrigTerm {
            alpha: 1.0,
            beta: 0.0,
            omega: 0.0,
        }])
        .unwrap()
    }

    fn dense_opts(stencil: Stencil) -> KernelOptions {
        KernelOptions {
            method: KernelMethod::Dense,
            stencil,
            ..Default::default()
        }
    }

    #[test]
    fn stationary_measure_examples() {
        let g = TorusGrid::new(1, 1.0, 16).unwrap();
        let w = stationary_measure(&g, &PotentialSpec::Zero).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 16.0).abs() < 1e-16));
        let c = PotentialSpec::fourier(vec![crate::potential::FourierTerm {
            wave: vec![0],
            cos: 3.0,
            sin: 0.0,
        }])
        .unwrap();
        let w = stationary_measure(&g, &c).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 16.0).abs() < 1e-16));
        let w = stationary_measure(&g, &trig_v()).unwrap();
        let raw: Vec<f64> = (0..16)
            .map(|i| (-0.25 * (2.0 * PI * i as f64 / 16.0).sin()).exp() / 16.0)
            .collect();
        let z: f64 = raw.iter().sum();
        for (a, b) in w.iter().zip(&raw) {
            assert!((a - b / z).abs() < 1e-15);
        }
    }

    #[test]
    fn fft_kernel_examples() {
        let g = TorusGrid::new(1, 1.0, 32).unwrap();
        let k = heat_kernel_fft(&g, 0.05).unwrap();
        let ones = k.apply(&[1.0; 32]);
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let f: Vec<f64> = (0..32)
            .map(|i| (2.0 * PI * i as f64 / 32.0).cos())
            .collect();
        let kf = k.apply(&f);
        let decay = (-0.05 * (2.0 * PI).powi(2) / 2.0).exp();
        for (a, b) in kf.iter().zip(&f) {
            assert!((a - decay * b).abs() < 1e-12);
        }
        let k10 = heat_kernel_fft(&g, 10.0).unwrap();
        for x in 0..32 {
            for y in 0..32 {
                assert!((k10.entry(x, y) - 1.0 / 32.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fft_and_generator_kernels_agree() {
        let g = TorusGrid::new(1, 1.0, 32).unwrap();
        let fft = heat_kernel_fft(&g, 0.5).unwrap();
        let gen =
            kernel_general(&g, &PotentialSpec::Zero, 0.5, &dense_opts(Stencil::Fourth)).unwrap();
        assert!(fft.max_abs_diff(&gen).unwrap() <= 1e-8);
    }

    #[test]
    fn chapman_kolmogorov_dense_and_fft() {
        let g = TorusGrid::new(1, 1.0, 32).unwrap();
        let opts = dense_opts(Stencil::Fourth);
        let half = kernel_general(&g, &trig_v(), 0.25, &opts).unwrap();
        let full = kernel_general(&g, &trig_v(), 0.5, &opts).unwrap();
        assert!(half.compose(&half).unwrap().max_abs_diff(&full).unwrap() <= 1e-8);
        let h = heat_kernel_fft(&g, 0.1).unwrap();
        let f = heat_kernel_fft(&g, 0.2).unwrap();
        assert!(h.compose(&h).unwrap().max_abs_diff(&f).unwrap() <= 1e-12);
    }

    #[test]
    fn tiny_time_crank_nicolson_is_near_identity() {
        let g = TorusGrid::new(1, 1.0, 32).unwrap();
        let opts = KernelOptions {
            method: KernelMethod::CrankNicolson,
            stencil: Stencil::Second,
            ..Default::default()
        };
        let k = kernel_general(&g, &trig_v(), 1e-8, &opts).unwrap();
        for x in 0..32 {
            let off: f64 = (0..32).filter(|&y| y != x).map(|y| k.entry(x, y)).sum();
            assert!(off <= 1e-3);
        }
    }

    #[test]
    fn crank_nicolson_close_to_dense() {
        let g = TorusGrid::new(1, 1.0, 32).unwrap();
        let dense = kernel_general(&g, &trig_v(), 0.3, &dense_opts(Stencil::Second)).unwrap();
        let cn = kernel_general(
            &g,
            &trig_v(),
            0.3,
            &KernelOptions {
                method: KernelMethod::CrankNicolson,
                stencil: Stencil::Second,
                substeps: Some(4096),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(dense.max_abs_diff(&cn).unwrap() < 1e-7);
    }

    #[test]
    fn invariants_hold_for_generator_kernels_in_2d() {
        let g = TorusGrid::new(2, 1.0, 8).unwrap();
        let v = PotentialSpec::trigonometric(vec![
            TrigTerm {
                alpha: 1.0,
                beta: 0.5,
                omega: 0.2,
            },
            TrigTerm {
                alpha: -0.3,
                beta: 0.0,
                omega: 0.0,
            },
        ])
        .unwrap();
        let k = kernel_general(&g, &v, 0.2, &dense_opts(Stencil::Second)).unwrap();
        assert!(k.row_sum_defect() <= ROW_SUM_TOL);
        assert!(k.reversibility_defect() <= REVERSIBILITY_TOL);
        assert!(k.min_entry() >= 0.0);
    }

    #[test]
    fn under_resolved_fourth_order_kernel_is_rejected() {
        // short times expose the negative taps of the wide stencil
        let g = TorusGrid::new(1, 1.0, 16).unwrap();
        let err = kernel_general(&g, &PotentialSpec::Zero, 1e-4, &dense_opts(Stencil::Fourth));
        assert!(matches!(err, Err(Error::NegativeEntry { .. })));
    }

    #[test]
    fn apply_log_examples() {
        let g = TorusGrid::new(1, 1.0, 16).unwrap();
        let k = kernel_general(&g, &trig_v(), 0.1, &dense_opts(Stencil::Second)).unwrap();
        let zero = k.apply_log(&GridFunction::zeros(g)).unwrap();
        // exact up to the row-sum rounding of the dense exponential
        assert!(zero.sup_norm() < 1e-12);
        let c = k.apply_log(&GridFunction::constant(g, -4.25)).unwrap();
        assert!(c.values().iter().all(|v| (v + 4.25).abs() < 1e-12));
    }

    #[test]
    fn apply_log_survives_extreme_ranges() {
        let g = TorusGrid::new(1, 1.0, 16).unwrap();
        let k = MarkovKernel::identity(g, vec![1.0 / 16.0; 16]);
        let vals: Vec<f64> = (0..16)
            .map(|i| if i == 3 { 700.0 } else { -700.0 })
            .collect();
        let f = GridFunction::new(g, vals.clone()).unwrap();
        let out = k.apply_log(&f).unwrap();
        for (a, b) in out.values().iter().zip(&vals) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_row_is_an_error() {
        let g = TorusGrid::new(1, 1.0, 4).unwrap();
        let k = MarkovKernel {
            grid: g,
            time: 1.0,
            storage: Storage::Dense(vec![0.0; 16]),
            m_weights: vec![0.25; 4],
        };
        assert!(matches!(
            k.apply_log(&GridFunction::zeros(g)),
            Err(Error::ZeroRow { .. })
        ));
    }

    #[test]
    fn factory_memoises() {
        let g = TorusGrid::new(1, 1.0, 16).unwrap();
        let f = KernelFactory::new(g, PotentialSpec::Zero, KernelOptions::default()).unwrap();
        let a = f.kernel(0.1).unwrap();
        let b = f.kernel(0.1).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert!(a.is_circulant());
    }
}
