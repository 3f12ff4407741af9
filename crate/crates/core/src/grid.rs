//! Periodic grids on the flat torus `[0, L)^d`, the sine and flat distances,
//! discrete gradients, and the sup / Lipschitz / f-Lipschitz norms.
//!
//! Nodes are stored with axis 0 varying fastest: the flat index of the
//! multi-index `(i_0, .., i_{d-1})` is `sum_a i_a * N^a`.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Largest supported dimension.
pub const MAX_DIM: usize = 3;

/// Uniform periodic discretization of the torus of side `L` in `d` dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusGrid {
    dim: usize,
    side: f64,
    points_per_axis: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, side: f64, points_per_axis: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidGrid(format!(
                "dimension must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        if !(side.is_finite() && side > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "side length must be positive, got {side}"
            )));
        }
        if points_per_axis < 4 {
            return Err(Error::InvalidGrid(format!(
                "need at least 4 points per axis, got {points_per_axis}"
            )));
        }
        Ok(Self {
            dim,
            side,
            points_per_axis,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn spacing(&self) -> f64 {
        self.side / self.points_per_axis as f64
    }

    /// Quadrature weight `h^d` carried by every node.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `L * sqrt(d)`, the maximal sine distance.
    pub fn diameter(&self) -> f64 {
        self.side * (self.dim as f64).sqrt()
    }

    pub fn multi_index(&self, flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        let mut rest = flat;
        for slot in idx.iter_mut().take(self.dim) {
            *slot = rest % self.points_per_axis;
            rest /= self.points_per_axis;
        }
        idx
    }

    /// Flat index of a multi-index; components are reduced modulo `N`, so
    /// `i` and `i + N` address the same node.
    pub fn flat_index(&self, idx: &[isize]) -> usize {
        let n = self.points_per_axis as isize;
        let mut flat = 0usize;
        let mut stride = 1usize;
        for &i in idx.iter().take(self.dim) {
            flat += i.rem_euclid(n) as usize * stride;
            stride *= self.points_per_axis;
        }
        flat
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi_index(flat);
        let h = self.spacing();
        idx[..self.dim].iter().map(|&i| i as f64 * h).collect()
    }

    /// Flat index of `flat + offset` where both are flat indices.
    pub fn shifted(&self, flat: usize, offset: usize) -> usize {
        let a = self.multi_index(flat);
        let b = self.multi_index(offset);
        let n = self.points_per_axis;
        let mut out = 0;
        let mut stride = 1;
        for axis in 0..self.dim {
            out += ((a[axis] + b[axis]) % n) * stride;
            stride *= n;
        }
        out
    }

    /// Samples `f` at every node.
    pub fn sample<F: Fn(&[f64]) -> f64>(&self, f: F) -> Result<GridFunction> {
        let values = (0..self.len()).map(|i| f(&self.node(i))).collect();
        GridFunction::new(*self, values)
    }
}

/// Reduces every coordinate into `[0, L)`.
pub fn wrap(x: &[f64], grid: &TorusGrid) -> Vec<f64> {
    x.iter().map(|&xi| wrap_coord(xi, grid.side())).collect()
}

#[inline]
pub fn wrap_coord(x: f64, side: f64) -> f64 {
    let r = x.rem_euclid(side);
    // rem_euclid can round up to `side` for tiny negative inputs
    if r >= side {
        0.0
    } else {
        r
    }
}

/// Representative of `x - y` in `[-L/2, L/2)`.
#[inline]
pub fn signed_difference(x: f64, y: f64, side: f64) -> f64 {
    (x - y + 0.5 * side).rem_euclid(side) - 0.5 * side
}

/// `L * sqrt(sum_i sin^2((pi/L)(x_i - y_i)))`.
pub fn sine_distance(x: &[f64], y: &[f64], grid: &TorusGrid) -> f64 {
    sine_distance_raw(x, y, grid.side())
}

#[inline]
pub fn sine_distance_raw(x: &[f64], y: &[f64], side: f64) -> f64 {
    let k = PI / side;
    let s: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let v = (k * signed_difference(a, b, side)).sin();
            v * v
        })
        .sum();
    side * s.sqrt()
}

/// Geodesic distance on the flat torus.
pub fn flat_distance(x: &[f64], y: &[f64], grid: &TorusGrid) -> f64 {
    flat_distance_raw(x, y, grid.side())
}

#[inline]
pub fn flat_distance_raw(x: &[f64], y: &[f64], side: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let v = signed_difference(a, b, side);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Real function sampled at every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn shifted(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_grid(other)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!(
                "{:?} vs {:?}",
                self.grid, other.grid
            )));
        }
        Ok(())
    }

    /// `sum_x f(x) w(x)` for probability weights `w`.
    pub fn integrate(&self, weights: &[f64]) -> f64 {
        self.values.iter().zip(weights).map(|(f, w)| f * w).sum()
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(self)
    }
}

pub fn sup_norm(f: &GridFunction) -> f64 {
    f.values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMethod {
    Spectral,
    CentralDifference,
}

/// Partial derivatives along each axis.
pub fn gradient(f: &GridFunction, method: GradientMethod) -> Vec<GridFunction> {
    let grid = *f.grid();
    (0..grid.dim())
        .map(|axis| {
            let values = match method {
                GradientMethod::Spectral => spectral_derivative(f.values(), &grid, axis),
                GradientMethod::CentralDifference => central_derivative(f.values(), &grid, axis),
            };
            GridFunction { grid, values }
        })
        .collect()
}

fn central_derivative(values: &[f64], grid: &TorusGrid, axis: usize) -> Vec<f64> {
    let n = grid.points_per_axis();
    let stride = n.pow(axis as u32);
    let inv = 1.0 / (2.0 * grid.spacing());
    (0..values.len())
        .map(|flat| {
            let i = (flat / stride) % n;
            let base = flat - i * stride;
            let up = base + ((i + 1) % n) * stride;
            let down = base + ((i + n - 1) % n) * stride;
            (values[up] - values[down]) * inv
        })
        .collect()
}

/// Runs `op` over every 1-D line of `data` along `axis`.
pub(crate) fn for_each_line(
    data: &mut [Complex<f64>],
    grid: &TorusGrid,
    axis: usize,
    mut op: impl FnMut(&mut [Complex<f64>]),
) {
    let n = grid.points_per_axis();
    let stride = n.pow(axis as u32);
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for flat in 0..data.len() {
        if !(flat / stride).is_multiple_of(n) {
            continue;
        }
        for (k, slot) in line.iter_mut().enumerate() {
            *slot = data[flat + k * stride];
        }
        op(&mut line);
        for (k, v) in line.iter().enumerate() {
            data[flat + k * stride] = *v;
        }
    }
}

/// Signed wavenumber of DFT bin `k` in the centered range `[-N/2, N/2)`.
#[inline]
pub fn centered_wavenumber(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

fn spectral_derivative(values: &[f64], grid: &TorusGrid, axis: usize) -> Vec<f64> {
    let n = grid.points_per_axis();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let scale = 2.0 * PI / grid.side();
    let mut data: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for_each_line(&mut data, grid, axis, |line| {
        fwd.process(line);
        for (k, c) in line.iter_mut().enumerate() {
            // the Nyquist bin has no odd-derivative partner
            if n.is_multiple_of(2) && k == n / 2 {
                *c = Complex::new(0.0, 0.0);
            } else {
                *c *= Complex::new(0.0, scale * centered_wavenumber(k, n));
            }
        }
        inv.process(line);
    });
    data.iter().map(|c| c.re / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LipschitzMethod {
    /// `max_x |grad f(x)|` from the spectral gradient.
    #[default]
    Spectral,
    /// `max |f(x) - f(y)| / d(x, y)` over all distinct node pairs.
    AllPairs,
}

pub fn lip_norm(f: &GridFunction, method: LipschitzMethod) -> Result<f64> {
    check_pairs(f.grid())?;
    Ok(match method {
        LipschitzMethod::Spectral => {
            let grads = gradient(f, GradientMethod::Spectral);
            (0..f.grid().len())
                .map(|i| {
                    grads
                        .iter()
                        .map(|g| g.values[i].powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max)
        }
        LipschitzMethod::AllPairs => {
            let grid = *f.grid();
            let weights = offset_table(&grid, |o| {
                flat_distance_raw(o, &vec![0.0; o.len()], grid.side())
            });
            pair_sup(f, &weights)
        }
    })
}

/// `max |f(x) - f(y)| / profile(delta(x, y))` over node pairs with
/// `delta >= h/2`.
pub fn f_lip_norm(f: &GridFunction, profile: impl Fn(f64) -> f64) -> Result<f64> {
    let grid = *f.grid();
    check_pairs(&grid)?;
    let cutoff = 0.5 * grid.spacing();
    let zero = vec![0.0; grid.dim()];
    let weights = offset_table(&grid, |o| {
        let delta = sine_distance_raw(o, &zero, grid.side());
        if delta < cutoff {
            0.0
        } else {
            profile(delta)
        }
    });
    Ok(pair_sup(f, &weights))
}

fn check_pairs(grid: &TorusGrid) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::InvalidGrid("norms need at least 2 nodes".into()));
    }
    Ok(())
}

/// Distances on the grid depend only on the offset between nodes, so the
/// denominator is tabulated once per offset.
fn offset_table(grid: &TorusGrid, weight: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..grid.len()).map(|o| weight(&grid.node(o))).collect()
}

/// Max over pairs (x, x + o) of |f(x) - f(x+o)| / w(o), skipping offsets with
/// a non-positive weight.
fn pair_sup(f: &GridFunction, weights: &[f64]) -> f64 {
    let grid = *f.grid();
    let vals = f.values();
    let active: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &w)| w > 0.0)
        .map(|(o, &w)| (o, 1.0 / w))
        .collect();
    let shifts: Vec<Vec<usize>> = active
        .iter()
        .map(|&(o, _)| (0..grid.len()).map(|x| grid.shifted(x, o)).collect())
        .collect();
    active
        .par_iter()
        .zip(shifts.par_iter())
        .map(|(&(_, inv), shift)| {
            vals.iter()
                .zip(shift)
                .map(|(&a, &j)| (a - vals[j]).abs() * inv)
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(n: usize, side: f64) -> TorusGrid {
        TorusGrid::new(1, side, n).unwrap()
    }

    #[test]
    fn wrap_examples() {
        let g = grid1(8, 1.0);
        assert_eq!(wrap(&[0.3], &g), vec![0.3]);
        assert_eq!(wrap(&[-0.25], &g), vec![0.75]);
        let g2 = TorusGrid::new(2, 2.0, 8).unwrap();
        assert_eq!(wrap(&[2.5, -1.0], &g2), vec![0.5, 1.0]);
        assert_eq!(wrap_coord(-1e-18, 1.0), 0.0);
    }

    #[test]
    fn sine_distance_examples() {
        let g = grid1(8, 1.0);
        assert_eq!(sine_distance(&[0.4], &[0.4], &g), 0.0);
        assert!((sine_distance(&[0.0], &[0.5], &g) - 1.0).abs() < 1e-15);
        let g2 = TorusGrid::new(2, 2.0, 8).unwrap();
        let d = sine_distance(&[0.0, 0.0], &[0.5, 0.5], &g2);
        assert!((d - 2.0 * (2.0 * (PI / 4.0).sin().powi(2)).sqrt()).abs() < 1e-15);
        assert!((d - 2.0).abs() < 1e-14);
    }

    #[test]
    fn flat_distance_takes_shorter_arc() {
        let g = grid1(8, 1.0);
        assert_eq!(flat_distance(&[0.2], &[0.2], &g), 0.0);
        assert!((flat_distance(&[0.0], &[0.75], &g) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sine_and_flat_distances_are_equivalent() {
        for &(d, n) in &[(1usize, 32usize), (2, 16)] {
            let g = TorusGrid::new(d, 1.3, n).unwrap();
            for i in 0..g.len() {
                for j in 0..g.len() {
                    let (x, y) = (g.node(i), g.node(j));
                    let flat = flat_distance(&x, &y, &g);
                    let sine = sine_distance(&x, &y, &g);
                    assert!(2.0 * flat <= sine + 1e-12);
                    assert!(sine <= PI * flat + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sine_distance_is_a_metric_on_nodes() {
        for &(d, n) in &[(1usize, 32usize), (2, 8)] {
            let g = TorusGrid::new(d, 1.0, n).unwrap();
            let m = g.len();
            let dist: Vec<Vec<f64>> = (0..m)
                .map(|i| {
                    (0..m)
                        .map(|j| sine_distance(&g.node(i), &g.node(j), &g))
                        .collect()
                })
                .collect();
            for i in 0..m {
                assert_eq!(dist[i][i], 0.0);
                for j in 0..m {
                    assert!((dist[i][j] - dist[j][i]).abs() < 1e-14);
                    if i != j {
                        assert!(dist[i][j] > 0.0);
                    }
                    for k in 0..m {
                        assert!(dist[i][k] <= dist[i][j] + dist[j][k] + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sine_distance_max_is_at_antipodes() {
        let g = TorusGrid::new(2, 1.5, 8).unwrap();
        let mut best = (0.0, 0);
        for j in 0..g.len() {
            let d = sine_distance(&g.node(0), &g.node(j), &g);
            assert!(d <= g.diameter() + 1e-12);
            if d > best.0 + 1e-12 {
                best = (d, j);
            }
        }
        assert!((best.0 - g.diameter()).abs() < 1e-12);
        assert_eq!(g.node(best.1), vec![0.75, 0.75]);
    }

    #[test]
    fn periodic_indexing() {
        let g = TorusGrid::new(2, 1.0, 4).unwrap();
        assert_eq!(g.flat_index(&[1, 2]), g.flat_index(&[5, -2]));
        assert_eq!(g.flat_index(&[3, 1]), 3 + 4);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = TorusGrid::new(2, 1.0, 8).unwrap();
        let f = GridFunction::constant(g, 3.5);
        for method in [GradientMethod::Spectral, GradientMethod::CentralDifference] {
            for comp in gradient(&f, method) {
                assert!(comp.sup_norm() < 1e-13);
            }
        }
    }

    #[test]
    fn spectral_gradient_of_fourier_mode_is_exact() {
        let side = 2.0;
        let g = grid1(32, side);
        let f = g.sample(|x| (2.0 * PI * x[0] / side).sin()).unwrap();
        let df = &gradient(&f, GradientMethod::Spectral)[0];
        let k = 2.0 * PI / side;
        for i in 0..g.len() {
            let exact = k * (k * g.node(i)[0]).cos();
            assert!((df.values()[i] - exact).abs() < 1e-12 * k);
        }
    }

    #[test]
    fn central_difference_is_second_order() {
        // Richardson check: halving h shrinks the gap to the spectral gradient by ~4.
        let gap = |n: usize| {
            let g = grid1(n, 1.0);
            let f = g
                .sample(|x| (2.0 * PI * x[0]).sin() + 0.3 * (6.0 * PI * x[0] + 0.4).cos())
                .unwrap();
            let s = &gradient(&f, GradientMethod::Spectral)[0];
            let c = &gradient(&f, GradientMethod::CentralDifference)[0];
            c.sub(s).unwrap().sup_norm()
        };
        let ratio = gap(64) / gap(128);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn norms_of_constant_vanish() {
        let g = grid1(16, 1.0);
        let f = GridFunction::constant(g, -2.0);
        assert_eq!(lip_norm(&f, LipschitzMethod::Spectral).unwrap(), 0.0);
        assert_eq!(lip_norm(&f, LipschitzMethod::AllPairs).unwrap(), 0.0);
        assert_eq!(f_lip_norm(&f, |r| r).unwrap(), 0.0);
    }

    #[test]
    fn lip_norm_of_sine() {
        let g = grid1(256, 1.0);
        let f = g.sample(|x| (2.0 * PI * x[0]).sin()).unwrap();
        for method in [LipschitzMethod::Spectral, LipschitzMethod::AllPairs] {
            let l = lip_norm(&f, method).unwrap();
            assert!((l - 2.0 * PI).abs() < 0.01 * 2.0 * PI, "{method:?}: {l}");
        }
    }

    #[test]
    fn identity_profile_matches_brute_force_sine_lipschitz() {
        let g = TorusGrid::new(2, 1.0, 8).unwrap();
        let f = g
            .sample(|x| (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1] + 0.3).cos())
            .unwrap();
        let mut brute: f64 = 0.0;
        for i in 0..g.len() {
            for j in 0..g.len() {
                if i != j {
                    let d = sine_distance(&g.node(i), &g.node(j), &g);
                    brute = brute.max((f.values()[i] - f.values()[j]).abs() / d);
                }
            }
        }
        let fast = f_lip_norm(&f, |r| r).unwrap();
        assert!((fast - brute).abs() < 1e-14 * brute);
    }

    #[test]
    fn rejects_bad_grids_and_values() {
        assert!(TorusGrid::new(0, 1.0, 8).is_err());
        assert!(TorusGrid::new(1, -1.0, 8).is_err());
        assert!(TorusGrid::new(1, 1.0, 3).is_err());
        let g = grid1(4, 1.0);
        assert!(GridFunction::new(g, vec![0.0; 3]).is_err());
        assert!(GridFunction::new(g, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }
}
