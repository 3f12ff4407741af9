//! Moduli of weak semiconvexity and the contraction constants built from
//! them.
//!
//! For a modulus `kappa` on `(0, D]` the triplet is
//!
//! ```text
//! phi(r) = exp(1/4 int_0^r s kappa(s) ds)      Phi(r) = int_0^r phi
//! g(r)   = 1 - int_0^r Phi/phi / (2 int_0^D Phi/phi)
//! f(r)   = int_0^r phi g                        C = phi(D) / 2
//! lambda = (int_0^D Phi/phi)^{-1}
//! ```
//!
//! and `exp(lambda pi^2 s) f(delta_s)` contracts along reflection couplings.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{f_lip_norm, GridFunction};
use crate::potential::PotentialSpec;
use crate::quadrature::cumulative_simpson;

/// Default number of quadrature intervals on `[0, D]`.
pub const DEFAULT_QUAD_NODES: usize = 1024;
/// Minimum accepted number of quadrature intervals.
pub const MIN_QUAD_NODES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum Modulus {
    Constant {
        alpha: f64,
        diameter: f64,
    },
    /// Trigonometric potential family: `sigmas` sorted in decreasing order.
    Trigonometric {
        sigmas: Vec<f64>,
        side: f64,
        diameter: f64,
    },
    /// `base(r) - 4 m / r`.
    Perturbed {
        base: Box<Modulus>,
        m: f64,
    },
    /// Piecewise-linear interpolation of `(nodes, values)`; `nodes` start at 0
    /// and end at the diameter.
    Tabulated {
        nodes: Vec<f64>,
        values: Vec<f64>,
    },
}

fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

fn check_torus(side: f64, dim: usize) -> Result<f64> {
    if !(side.is_finite() && side > 0.0) || dim == 0 {
        return Err(invalid(
            "L",
            format!("need L > 0 and d >= 1, got L={side}, d={dim}"),
        ));
    }
    Ok(side * (dim as f64).sqrt())
}

impl Modulus {
    /// `kappa = alpha`; a positive `alpha` cannot occur on a compact manifold.
    pub fn constant(alpha: f64, side: f64, dim: usize) -> Result<Self> {
        let diameter = check_torus(side, dim)?;
        if !alpha.is_finite() || alpha > 0.0 {
            return Err(invalid(
                "alpha",
                format!("semiconvexity constant must be <= 0 on a compact torus, got {alpha}"),
            ));
        }
        Ok(Self::Constant { alpha, diameter })
    }

    /// Modulus of the trigonometric potential family, from its coefficients.
    pub fn trigonometric(sigmas: &[f64], side: f64, dim: usize) -> Result<Self> {
        let diameter = check_torus(side, dim)?;
        if sigmas.len() != dim || sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(invalid("sigma", "need d finite non-negative amplitudes"));
        }
        let mut sigmas = sigmas.to_vec();
        sigmas.sort_by(|a, b| b.total_cmp(a));
        Ok(Self::Trigonometric {
            sigmas,
            side,
            diameter,
        })
    }

    /// Modulus for a potential: trigonometric family or `V = 0`.
    pub fn for_potential(v: &PotentialSpec, side: f64, dim: usize) -> Result<Self> {
        match v {
            PotentialSpec::Trigonometric(_) => Self::trigonometric(&v.sigmas(), side, dim),
            _ if v.is_zero() => Self::constant(0.0, side, dim),
            _ => Err(invalid(
                "V",
                "no closed-form modulus for this potential; supply a constant alpha or a table",
            )),
        }
    }

    pub fn perturbed(base: Modulus, m: f64) -> Result<Self> {
        if !(m.is_finite() && m >= 0.0) {
            return Err(invalid(
                "M",
                format!("perturbation must be finite and >= 0, got {m}"),
            ));
        }
        Ok(Self::Perturbed {
            base: Box::new(base),
            m,
        })
    }

    pub fn tabulated(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes.len() != values.len() {
            return Err(invalid("kappa", "need at least two (node, value) pairs"));
        }
        if nodes[0] != 0.0 || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("kappa", "nodes must increase strictly from 0"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v <= 0.0)) {
            return Err(invalid("kappa", "modulus values must be finite and <= 0"));
        }
        Ok(Self::Tabulated { nodes, values })
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Self::Constant { diameter, .. } | Self::Trigonometric { diameter, .. } => *diameter,
            Self::Perturbed { base, .. } => base.diameter(),
            Self::Tabulated { nodes, .. } => *nodes.last().unwrap(),
        }
    }

    /// Coefficient `M` of the singular `-4M/r` part (0 unless perturbed).
    pub fn singular_weight(&self) -> f64 {
        match self {
            Self::Perturbed { base, m } => m + base.singular_weight(),
            _ => 0.0,
        }
    }

    /// `kappa(r)`; `-inf` at `r = 0` for perturbed moduli with `M > 0`.
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Self::Constant { alpha, .. } => *alpha,
            Self::Trigonometric { sigmas, side, .. } => {
                if r <= 0.0 {
                    -sigmas[0] / side
                } else {
                    -side / (r * r) * trig_sum(sigmas, r / side)
                }
            }
            Self::Perturbed { base, m } => {
                if *m == 0.0 {
                    base.eval(r)
                } else {
                    base.eval(r) - 4.0 * m / r
                }
            }
            Self::Tabulated { nodes, values } => interpolate(nodes, values, r),
        }
    }

    /// `s kappa(s)` without the singular `-4M` contribution.
    pub fn regular_s_kappa(&self, s: f64) -> f64 {
        match self {
            Self::Trigonometric { sigmas, side, .. } => {
                if s <= 0.0 {
                    0.0
                } else {
                    -side / s * trig_sum(sigmas, s / side)
                }
            }
            Self::Perturbed { base, .. } => base.regular_s_kappa(s),
            _ => s * self.eval(s),
        }
    }

    /// `r kappa(r)`, finite at 0 for every variant.
    pub fn r_kappa(&self, r: f64) -> f64 {
        self.regular_s_kappa(r) - 4.0 * self.singular_weight()
    }
}

/// `sum_i sigma_i min(1, (u^2 - i + 1)^+)` with `i` starting at 1.
fn trig_sum(sigmas: &[f64], u: f64) -> f64 {
    sigmas
        .iter()
        .enumerate()
        .map(|(i, s)| s * (u * u - i as f64).clamp(0.0, 1.0))
        .sum()
}

fn interpolate(nodes: &[f64], values: &[f64], r: f64) -> f64 {
    if r <= nodes[0] {
        return values[0];
    }
    let last = nodes.len() - 1;
    if r >= nodes[last] {
        return values[last];
    }
    let j = nodes.partition_point(|&x| x <= r) - 1;
    let w = (r - nodes[j]) / (nodes[j + 1] - nodes[j]);
    values[j] * (1.0 - w) + values[j + 1] * w
}

/// Tabulated `(C, lambda, f)` together with the intermediates `phi`, `Phi`,
/// `g` on `quad_nodes + 1` equispaced nodes of `[0, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTriplet {
    pub modulus: Modulus,
    pub nodes: Vec<f64>,
    pub phi: Vec<f64>,
    pub big_phi: Vec<f64>,
    pub g: Vec<f64>,
    pub f: Vec<f64>,
    pub c: f64,
    pub lambda: f64,
}

pub fn rate_triplet(modulus: &Modulus, quad_nodes: usize) -> Result<RateTriplet> {
    if quad_nodes < MIN_QUAD_NODES {
        return Err(invalid(
            "rates.quad_nodes",
            format!("need at least {MIN_QUAD_NODES} quadrature nodes, got {quad_nodes}"),
        ));
    }
    let d = modulus.diameter();
    // every output interval is split in two so the cumulative rule is
    // Simpson-exact at the output nodes
    let fine = 2 * quad_nodes;
    let h = d / fine as f64;
    let r: Vec<f64> = (0..=fine).map(|j| j as f64 * h).collect();
    let m = modulus.singular_weight();

    let s_kappa: Vec<f64> = r.iter().map(|&s| modulus.regular_s_kappa(s)).collect();
    let int_s_kappa = cumulative_simpson(&s_kappa, h);
    let phi: Vec<f64> = int_s_kappa
        .iter()
        .zip(&r)
        .map(|(i, &x)| (0.25 * i - m * x).exp())
        .collect();
    let big_phi = cumulative_simpson(&phi, h);
    let ratio: Vec<f64> = big_phi.iter().zip(&phi).map(|(a, b)| a / b).collect();
    let int_ratio = cumulative_simpson(&ratio, h);
    let total = int_ratio[fine];
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Quadrature("int_0^D Phi/phi"));
    }
    let lambda = 1.0 / total;
    let g: Vec<f64> = int_ratio.iter().map(|v| 1.0 - v / (2.0 * total)).collect();
    let phi_g: Vec<f64> = phi.iter().zip(&g).map(|(a, b)| a * b).collect();
    let f = cumulative_simpson(&phi_g, h);
    let c = phi[fine] / 2.0;
    for (name, v) in [("phi", &phi), ("Phi", &big_phi), ("g", &g), ("f", &f)] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Quadrature(name));
        }
    }
    if !(lambda.is_finite() && c.is_finite()) {
        return Err(Error::Quadrature("constants"));
    }
    let coarse = |v: &[f64]| v.iter().step_by(2).copied().collect::<Vec<f64>>();
    Ok(RateTriplet {
        modulus: modulus.clone(),
        nodes: coarse(&r),
        phi: coarse(&phi),
        big_phi: coarse(&big_phi),
        g: coarse(&g),
        f: coarse(&f),
        c,
        lambda,
    })
}

/// Node-wise verification of the properties of a rate triplet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletCheck {
    /// `min (f(r) - C r)`.
    pub lower: f64,
    /// `min (r - f(r))`.
    pub upper: f64,
    /// `min (f'(r) - C)`.
    pub slope_lower: f64,
    /// `min (1 - f'(r))`.
    pub slope_upper: f64,
    /// `min (-(lambda/2) f - f'' + (kappa/4) r f')`.
    pub differential: f64,
    /// Largest increase between consecutive increments `f(r_{j+1}) - f(r_j)`.
    pub concavity: f64,
}

impl TripletCheck {
    /// Every inequality holds up to the stated slack.
    pub fn passes(&self) -> bool {
        const ROUND: f64 = 1e-12;
        self.lower >= -ROUND
            && self.upper >= -ROUND
            && self.slope_lower >= -ROUND
            && self.slope_upper >= -ROUND
            && self.differential >= -1e-8
            && self.concavity <= ROUND
    }
}

impl RateTriplet {
    pub fn diameter(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    fn spacing(&self) -> f64 {
        self.nodes[1] - self.nodes[0]
    }

    /// `f'(r_j) = phi g`.
    pub fn f_prime(&self) -> Vec<f64> {
        self.phi.iter().zip(&self.g).map(|(a, b)| a * b).collect()
    }

    /// `f''(r_j) = (r kappa / 4) phi g + phi g'` with `g' = -(lambda/2) Phi / phi`.
    pub fn f_second(&self) -> Vec<f64> {
        (0..self.nodes.len())
            .map(|j| {
                let rk = self.modulus.r_kappa(self.nodes[j]);
                let gp = -0.5 * self.lambda * self.big_phi[j] / self.phi[j];
                0.25 * rk * self.phi[j] * self.g[j] + self.phi[j] * gp
            })
            .collect()
    }

    /// `f(r)` by cubic Hermite interpolation with the exact node slopes;
    /// arguments beyond `D` are clamped.
    pub fn f_at(&self, r: f64) -> f64 {
        let d = self.diameter();
        let r = r.clamp(0.0, d);
        let h = self.spacing();
        let j = ((r / h).floor() as usize).min(self.nodes.len() - 2);
        let t = (r - self.nodes[j]) / h;
        let (f0, f1) = (self.f[j], self.f[j + 1]);
        let (m0, m1) = (
            self.phi[j] * self.g[j] * h,
            self.phi[j + 1] * self.g[j + 1] * h,
        );
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * f0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * f1
            + (t3 - t2) * m1
    }

    pub fn check(&self) -> TripletCheck {
        let fp = self.f_prime();
        let fpp = self.f_second();
        let mut c = TripletCheck {
            lower: f64::INFINITY,
            upper: f64::INFINITY,
            slope_lower: f64::INFINITY,
            slope_upper: f64::INFINITY,
            differential: f64::INFINITY,
            concavity: f64::NEG_INFINITY,
        };
        for (j, &r) in self.nodes.iter().enumerate() {
            c.lower = c.lower.min(self.f[j] - self.c * r);
            c.upper = c.upper.min(r - self.f[j]);
            c.slope_lower = c.slope_lower.min(fp[j] - self.c);
            c.slope_upper = c.slope_upper.min(1.0 - fp[j]);
            let lhs = fpp[j] - 0.25 * self.modulus.r_kappa(r) * fp[j];
            c.differential = c.differential.min(-0.5 * self.lambda * self.f[j] - lhs);
        }
        let slopes: Vec<f64> = self.f.windows(2).map(|w| w[1] - w[0]).collect();
        for w in slopes.windows(2) {
            c.concavity = c.concavity.max(w[1] - w[0]);
        }
        c
    }

    /// `||u||_f`, the f-Lipschitz norm of a grid function.
    pub fn norm(&self, u: &GridFunction) -> Result<f64> {
        f_lip_norm(u, |r| self.f_at(r))
    }
}

/// `M = max(||U_mu||_f, ||U_nu||_f) / (1 - exp(-lambda pi^2 T))`.
pub fn perturbation_m(
    u_mu: &GridFunction,
    u_nu: &GridFunction,
    f_v: &RateTriplet,
    horizon: f64,
) -> Result<f64> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(invalid(
            "T",
            format!("horizon must be positive, got {horizon}"),
        ));
    }
    let norm = f_v.norm(u_mu)?.max(f_v.norm(u_nu)?);
    Ok(norm / -(-f_v.lambda * PI * PI * horizon).exp_m1())
}

/// `lambda` of the Brownian modulus perturbed by `M`, in closed form.
pub fn brownian_perturbed_lambda(m: f64, diameter: f64) -> f64 {
    if m == 0.0 {
        return 2.0 / (diameter * diameter);
    }
    let x = m * diameter;
    // e^x - 1 - x without cancellation for small x
    let denom = if x < 1e-3 {
        x * x / 2.0 * (1.0 + x / 3.0 * (1.0 + x / 4.0 * (1.0 + x / 5.0)))
    } else {
        x.exp_m1() - x
    };
    m * m / denom
}

/// Constant-modulus closed forms: `eta_D = exp(D^2 |alpha| / 8)` and the
/// lower bound `(|alpha|/4) / (eta_D - 1)` on `lambda` (limit `2/D^2` at 0).
pub fn constant_rate_lower_bound(alpha: f64, diameter: f64) -> (f64, f64) {
    let a = alpha.abs();
    let eta = (diameter * diameter * a / 8.0).exp();
    let lb = if a == 0.0 {
        2.0 / (diameter * diameter)
    } else {
        (a / 4.0) / (diameter * diameter * a / 8.0).exp_m1()
    };
    (eta, lb)
}

/// Closed-form bounds on `log gamma` and `c_S` for an `alpha`-semiconvex `V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplicitBounds {
    pub eta_d: f64,
    /// Lower bound on the unperturbed rate.
    pub rate_lower_bound: f64,
    /// Upper bound on the perturbation `M`.
    pub m_upper_bound: f64,
    /// Lower bound on the perturbed rate; `log gamma <= -pi^2 T` times this.
    pub lambda_bar_lower_bound: f64,
    pub log_gamma_bound: f64,
    /// `c_S` bound with the `2 eta_D / sqrt(L pi)` prefactor as printed.
    pub c_s_bound_printed: f64,
    /// `c_S` bound from the verified norm equivalence, `eta_D e^{D M}`.
    pub c_s_bound_verified: f64,
}

pub fn explicit_bounds(
    alpha: f64,
    side: f64,
    dim: usize,
    horizon: f64,
    norm_max: f64,
) -> Result<ExplicitBounds> {
    let d = check_torus(side, dim)?;
    if alpha > 0.0 {
        return Err(invalid("alpha", "must be <= 0"));
    }
    let (eta_d, rate_lb) = constant_rate_lower_bound(alpha, d);
    let m_ub = norm_max / -(-rate_lb * PI * PI * horizon).exp_m1();
    let lambda_bar_lb = rate_lb * (-d * m_ub).exp();
    Ok(ExplicitBounds {
        eta_d,
        rate_lower_bound: rate_lb,
        m_upper_bound: m_ub,
        lambda_bar_lower_bound: lambda_bar_lb,
        log_gamma_bound: -PI * PI * horizon * lambda_bar_lb,
        c_s_bound_printed: 2.0 * eta_d / (side * PI).sqrt() * (d * m_ub).exp(),
        c_s_bound_verified: eta_d * (d * m_ub).exp(),
    })
}

/// Leading-order small-horizon expressions of the Brownian case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallTimeAsymptotics {
    pub d_mu_nu: f64,
    pub log_gamma0: f64,
    pub c_s: f64,
    /// Non-asymptotic Brownian bound `-pi^2 T M0^2 exp(-D M0)`.
    pub log_gamma0_bound: f64,
}

/// `norm_f0_max` is `max(||U_mu||_{f_0}, ||U_nu||_{f_0})`.
pub fn small_time_asymptotics(
    norm_f0_max: f64,
    side: f64,
    dim: usize,
    horizon: f64,
) -> Result<SmallTimeAsymptotics> {
    let d = check_torus(side, dim)?;
    let dmn = norm_f0_max / (2.0 * PI * PI);
    let m0 = norm_f0_max / -(-2.0 * PI * PI * horizon / (d * d)).exp_m1();
    Ok(SmallTimeAsymptotics {
        d_mu_nu: dmn,
        log_gamma0: -PI * PI * dmn * dmn * d.powi(4) / horizon * (-dmn * d.powi(3) / horizon).exp(),
        c_s: (dmn * d.powi(3) / horizon).exp(),
        log_gamma0_bound: -PI * PI * horizon * m0 * m0 * (-d * m0).exp(),
    })
}

/// Every constant entering the convergence statement for one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RateBundle {
    pub side: f64,
    pub dim: usize,
    pub horizon: f64,
    pub diameter: f64,
    pub f_v: RateTriplet,
    pub lambda_v: f64,
    pub c_v: f64,
    pub norm_u_mu: f64,
    pub norm_u_nu: f64,
    pub m: f64,
    pub f_bar: RateTriplet,
    pub lambda_bar: f64,
    pub c_bar: f64,
    pub gamma: f64,
    /// `1 / (C_bar sqrt(L) pi)`.
    pub c_s_printed: f64,
    /// `1 / (2 C_bar)`, from `2 d <= delta`.
    pub c_s_verified: f64,
    pub eta_d: Option<f64>,
    pub explicit: Option<ExplicitBounds>,
    pub asymptotics: SmallTimeAsymptotics,
}

/// Builds the perturbed modulus from the marginal potentials and evaluates
/// every derived constant. `alpha` enables the closed-form bounds and must
/// be a valid semiconvexity constant of `V`.
pub fn sinkhorn_constants(
    base: &Modulus,
    u_mu: &GridFunction,
    u_nu: &GridFunction,
    horizon: f64,
    quad_nodes: usize,
    alpha: Option<f64>,
) -> Result<RateBundle> {
    let grid = *u_mu.grid();
    u_mu.check_same_grid(u_nu)?;
    let (side, dim) = (grid.side(), grid.dim());
    let diameter = grid.diameter();
    if (base.diameter() - diameter).abs() > 1e-12 * diameter {
        return Err(invalid(
            "kappa",
            "modulus domain does not match the grid diameter",
        ));
    }
    let f_v = rate_triplet(base, quad_nodes)?;
    let norm_u_mu = f_v.norm(u_mu)?;
    let norm_u_nu = f_v.norm(u_nu)?;
    let m = perturbation_m(u_mu, u_nu, &f_v, horizon)?;
    let f_bar = rate_triplet(&Modulus::perturbed(base.clone(), m)?, quad_nodes)?;
    let lambda_bar = f_bar.lambda;
    let c_bar = f_bar.c;

    let explicit = match alpha {
        Some(a) => Some(explicit_bounds(
            a,
            side,
            dim,
            horizon,
            norm_u_mu.max(norm_u_nu),
        )?),
        None => None,
    };
    let f0 = if matches!(base, Modulus::Constant { alpha, .. } if *alpha == 0.0) {
        f_v.clone()
    } else {
        rate_triplet(&Modulus::constant(0.0, side, dim)?, quad_nodes)?
    };
    let norm_f0 = f0.norm(u_mu)?.max(f0.norm(u_nu)?);
    Ok(RateBundle {
        side,
        dim,
        horizon,
        diameter,
        lambda_v: f_v.lambda,
        c_v: f_v.c,
        f_v,
        norm_u_mu,
        norm_u_nu,
        m,
        f_bar,
        lambda_bar,
        c_bar,
        gamma: (-lambda_bar * PI * PI * horizon).exp(),
        c_s_printed: 1.0 / (c_bar * side.sqrt() * PI),
        c_s_verified: 1.0 / (2.0 * c_bar),
        eta_d: explicit.map(|e| e.eta_d),
        explicit,
        asymptotics: small_time_asymptotics(norm_f0, side, dim, horizon)?,
    })
}
