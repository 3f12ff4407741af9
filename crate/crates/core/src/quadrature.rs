//! Cumulative composite Simpson quadrature on uniform grids.

/// `out[j] ~ int_0^{x_j} f` for samples `f[j] = f(j h)`.
///
/// Even indices are composite Simpson sums; an odd index adds the
/// third-order partial-panel rule `h (5 f_0 + 8 f_1 - f_2) / 12` to the
/// preceding even value (or its mirror image at the right end).
pub fn cumulative_simpson(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = 0.5 * h * (f[0] + f[1]);
        return out;
    }
    let mut j = 2;
    while j < n {
        out[j] = out[j - 2] + h / 3.0 * (f[j - 2] + 4.0 * f[j - 1] + f[j]);
        j += 2;
    }
    let mut j = 1;
    while j < n {
        out[j] = if j + 1 < n {
            out[j - 1] + h / 12.0 * (5.0 * f[j - 1] + 8.0 * f[j] - f[j + 1])
        } else {
            out[j - 1] + h / 12.0 * (-f[j - 2] + 8.0 * f[j - 1] + 5.0 * f[j])
        };
        j += 2;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratics() {
        let h = 0.1;
        for n in [3usize, 4, 7, 10] {
            let f: Vec<f64> = (0..n)
                .map(|j| {
                    let x = j as f64 * h;
                    1.0 - 2.0 * x + 3.0 * x * x
                })
                .collect();
            let out = cumulative_simpson(&f, h);
            for (j, v) in out.iter().enumerate() {
                let x = j as f64 * h;
                assert!((v - (x - x * x + x * x * x)).abs() < 1e-14, "n={n} j={j}");
            }
        }
    }

    #[test]
    fn fourth_order_at_even_nodes() {
        let err = |n: usize| {
            let h = 1.0 / n as f64;
            let f: Vec<f64> = (0..=n).map(|j| (j as f64 * h).exp()).collect();
            (cumulative_simpson(&f, h)[n] - (1f64.exp() - 1.0)).abs()
        };
        let ratio = err(32) / err(64);
        assert!(ratio > 15.0 && ratio < 17.0, "{ratio}");
    }
}
