//! Potentials on the torus: the confining potential `V` and the marginal
//! potentials `U_mu`, `U_nu` all use this representation.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{gradient, GradientMethod, GridFunction, TorusGrid};
use crate::interp;

/// One axis of the trigonometric family
/// `V(x) = (L/8) sum_i alpha_i sin(2 pi x_i / L + omega_i) + beta_i cos(2 pi x_i / L + omega_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrigTerm {
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
}

impl TrigTerm {
    pub fn sigma(&self) -> f64 {
        self.alpha.hypot(self.beta)
    }
}

/// `a cos(2 pi k.x / L) + b sin(2 pi k.x / L)` for an integer wave vector `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierTerm {
    pub wave: Vec<i32>,
    pub cos: f64,
    pub sin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialSpec {
    Zero,
    /// One term per axis; axis `i` carries `terms[i]`.
    Trigonometric(Vec<TrigTerm>),
    /// Finite Fourier series, convenient for band-limited marginal potentials.
    Fourier(Vec<FourierTerm>),
    /// Node values on a fixed grid; off-grid evaluation is multilinear.
    Tabulated(GridFunction),
}

impl PotentialSpec {
    pub fn trigonometric(terms: Vec<TrigTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidParameter {
                name: "V",
                reason: "trigonometric potential needs one term per axis".into(),
            });
        }
        if terms
            .iter()
            .any(|t| !(t.alpha.is_finite() && t.beta.is_finite() && t.omega.is_finite()))
        {
            return Err(Error::InvalidParameter {
                name: "V",
                reason: "non-finite trigonometric coefficient".into(),
            });
        }
        Ok(Self::Trigonometric(terms))
    }

    pub fn fourier(terms: Vec<FourierTerm>) -> Result<Self> {
        if terms
            .iter()
            .any(|t| !(t.cos.is_finite() && t.sin.is_finite()))
        {
            return Err(Error::InvalidParameter {
                name: "fourier",
                reason: "non-finite Fourier coefficient".into(),
            });
        }
        Ok(Self::Fourier(terms))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Trigonometric(t) => t.iter().all(|t| t.sigma() == 0.0),
            Self::Fourier(t) => t.iter().all(|t| t.cos == 0.0 && t.sin == 0.0),
            Self::Tabulated(f) => {
                let v = f.values();
                v.iter().all(|&x| x == v[0])
            }
        }
    }

    /// `sigma_i = |(alpha_i, beta_i)|`, sorted in decreasing order. Empty for
    /// non-trigonometric variants.
    pub fn sigmas(&self) -> Vec<f64> {
        match self {
            Self::Trigonometric(terms) => {
                let mut s: Vec<f64> = terms.iter().map(TrigTerm::sigma).collect();
                s.sort_by(|a, b| b.total_cmp(a));
                s
            }
            _ => Vec::new(),
        }
    }

    pub fn validate_for(&self, grid: &TorusGrid) -> Result<()> {
        match self {
            Self::Trigonometric(terms) if terms.len() != grid.dim() => {
                Err(Error::InvalidParameter {
                    name: "V",
                    reason: format!(
                        "trigonometric potential has {} terms but the torus has dimension {}",
                        terms.len(),
                        grid.dim()
                    ),
                })
            }
            Self::Fourier(terms) => match terms.iter().find(|t| t.wave.len() != grid.dim()) {
                Some(t) => Err(Error::InvalidParameter {
                    name: "fourier",
                    reason: format!(
                        "wave vector {:?} does not match dimension {}",
                        t.wave,
                        grid.dim()
                    ),
                }),
                None => Ok(()),
            },
            Self::Tabulated(f) if f.grid() != grid => Err(Error::GridMismatch(format!(
                "tabulated potential lives on {:?}, requested {:?}",
                f.grid(),
                grid
            ))),
            _ => Ok(()),
        }
    }

    /// Value at an arbitrary point of a torus of side `side`.
    pub fn value(&self, x: &[f64], side: f64) -> f64 {
        let k = 2.0 * PI / side;
        match self {
            Self::Zero => 0.0,
            Self::Trigonometric(terms) => {
                side / 8.0
                    * terms
                        .iter()
                        .zip(x)
                        .map(|(t, &xi)| {
                            let a = k * xi + t.omega;
                            t.alpha * a.sin() + t.beta * a.cos()
                        })
                        .sum::<f64>()
            }
            Self::Fourier(terms) => terms
                .iter()
                .map(|t| {
                    let a = k * dot(&t.wave, x);
                    t.cos * a.cos() + t.sin * a.sin()
                })
                .sum(),
            Self::Tabulated(f) => interp::multilinear(f, x),
        }
    }

    /// Gradient at an arbitrary point, written into `out`. Tabulated
    /// potentials should go through [`PotentialField`], which caches the
    /// gridded gradient.
    pub fn gradient_at(&self, x: &[f64], side: f64, out: &mut [f64]) {
        let k = 2.0 * PI / side;
        out.iter_mut().for_each(|o| *o = 0.0);
        match self {
            Self::Zero => {}
            Self::Trigonometric(terms) => {
                for ((o, t), &xi) in out.iter_mut().zip(terms).zip(x) {
                    let a = k * xi + t.omega;
                    *o = side / 8.0 * k * (t.alpha * a.cos() - t.beta * a.sin());
                }
            }
            Self::Fourier(terms) => {
                for t in terms {
                    let a = k * dot(&t.wave, x);
                    let c = k * (t.sin * a.cos() - t.cos * a.sin());
                    for (o, &w) in out.iter_mut().zip(&t.wave) {
                        *o += c * w as f64;
                    }
                }
            }
            Self::Tabulated(f) => {
                let grads = gradient(f, GradientMethod::Spectral);
                interp::multilinear_field(&grads, x, out);
            }
        }
    }

    /// Samples the potential at every node of `grid`.
    pub fn sample(&self, grid: &TorusGrid) -> Result<GridFunction> {
        self.validate_for(grid)?;
        match self {
            Self::Tabulated(f) => Ok(f.clone()),
            _ => grid.sample(|x| self.value(x, grid.side())),
        }
    }

    /// FNV-1a hash of a canonical encoding, used as part of kernel cache keys.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        match self {
            Self::Zero => h.write(&[0]),
            Self::Trigonometric(terms) => {
                h.write(&[1]);
                for t in terms {
                    for v in [t.alpha, t.beta, t.omega] {
                        h.write(&v.to_bits().to_le_bytes());
                    }
                }
            }
            Self::Fourier(terms) => {
                h.write(&[2]);
                for t in terms {
                    for &w in &t.wave {
                        h.write(&w.to_le_bytes());
                    }
                    h.write(&t.cos.to_bits().to_le_bytes());
                    h.write(&t.sin.to_bits().to_le_bytes());
                }
            }
            Self::Tabulated(f) => {
                h.write(&[3]);
                for v in f.values() {
                    h.write(&v.to_bits().to_le_bytes());
                }
            }
        }
        h.finish()
    }
}

fn dot(wave: &[i32], x: &[f64]) -> f64 {
    wave.iter().zip(x).map(|(&w, &xi)| w as f64 * xi).sum()
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// `-grad V` ready for repeated pointwise evaluation. Analytic families are
/// evaluated exactly; tabulated ones through a precomputed spectral gradient.
#[derive(Debug, Clone)]
pub struct PotentialField {
    spec: PotentialSpec,
    side: f64,
    gridded: Option<Vec<GridFunction>>,
}

impl PotentialField {
    pub fn new(spec: &PotentialSpec, side: f64) -> Self {
        let gridded = match spec {
            PotentialSpec::Tabulated(f) => Some(gradient(f, GradientMethod::Spectral)),
            _ => None,
        };
        Self {
            spec: spec.clone(),
            side,
            gridded,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.spec.is_zero()
    }

    /// Writes `-grad V(x)` into `out`.
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        match &self.gridded {
            Some(g) => interp::multilinear_field(g, x, out),
            None => self.spec.gradient_at(x, self.side, out),
        }
        out.iter_mut().for_each(|o| *o = -*o);
    }
}
