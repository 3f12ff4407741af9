//! Periodic multilinear interpolation of grid functions at off-grid points.

use crate::grid::{wrap_coord, GridFunction, MAX_DIM};

/// Value of the multilinear interpolant of `f` at `x` (any real coordinates;
/// periodicity is applied).
pub fn multilinear(f: &GridFunction, x: &[f64]) -> f64 {
    let grid = f.grid();
    let n = grid.points_per_axis();
    let h = grid.spacing();
    let d = grid.dim();
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0; MAX_DIM];
    for a in 0..d {
        let u = wrap_coord(x[a], grid.side()) / h;
        let i = (u.floor() as usize).min(n - 1);
        base[a] = i;
        frac[a] = (u - i as f64).clamp(0.0, 1.0);
    }
    let vals = f.values();
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0;
        let mut stride = 1;
        for a in 0..d {
            let bit = (corner >> a) & 1;
            let i = (base[a] + bit) % n;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            flat += i * stride;
            stride *= n;
        }
        if w != 0.0 {
            acc += w * vals[flat];
        }
    }
    acc
}

/// Interpolates every component of a vector field.
pub fn multilinear_field(field: &[GridFunction], x: &[f64], out: &mut [f64]) {
    for (o, comp) in out.iter_mut().zip(field) {
        *o = multilinear(comp, x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use std::f64::consts::PI;

    #[test]
    fn reproduces_nodes_and_affine_pieces() {
        let g = TorusGrid::new(2, 1.0, 8).unwrap();
        let f = g.sample(|x| (2.0 * PI * x[0]).sin() + x[1] * x[1]).unwrap();
        for i in 0..g.len() {
            assert!((multilinear(&f, &g.node(i)) - f.values()[i]).abs() < 1e-14);
        }
        let g1 = TorusGrid::new(1, 2.0, 4).unwrap();
        let f1 = GridFunction::new(g1, vec![0.0, 1.0, 3.0, 2.0]).unwrap();
        assert!((multilinear(&f1, &[0.25]) - 0.5).abs() < 1e-15);
        // wraps between the last node and the first
        assert!((multilinear(&f1, &[1.75]) - 1.0).abs() < 1e-15);
        assert!((multilinear(&f1, &[-0.25]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn second_order_accuracy() {
        let err = |n: usize| {
            let g = TorusGrid::new(1, 1.0, n).unwrap();
            let f = g.sample(|x| (2.0 * PI * x[0]).cos()).unwrap();
            (0..200)
                .map(|k| {
                    let x = k as f64 / 200.0 + 0.0013;
                    (multilinear(&f, &[x]) - (2.0 * PI * x).cos()).abs()
                })
                .fold(0.0, f64::max)
        };
        let ratio = err(32) / err(64);
        assert!(ratio > 3.5 && ratio < 4.5, "{ratio}");
    }
}
