//! Entropic optimal transport on the flat torus with a Langevin reference
//! process.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] — periodic grids, sine/flat distances, gradients and norms;
//! * [`potential`] — potentials `V`, `U_mu`, `U_nu` as analytic or tabulated
//!   functions;
//! * [`kernel`] — the stationary measure and discrete transition operators
//!   `P_t`, with a log-domain application primitive and an on-disk cache;
//! * [`sinkhorn`] — log-domain Sinkhorn iterations, normalisations, plans and
//!   reference Schrödinger potentials;
//! * [`hjb`] — value functions `-log P_{T-t} e^{-h}` and Monte Carlo checks of
//!   the associated control problem;
//! * [`rates`] — semiconvexity moduli and the explicit contraction constants;
//! * [`coupling`] — reflection-coupled diffusions and their contraction
//!   statistics.

pub mod coupling;
pub mod error;
pub mod grid;
pub mod hjb;
pub mod interp;
pub mod kernel;
pub mod potential;
pub mod quadrature;
pub mod rates;
pub mod rng;
pub mod sinkhorn;

pub use error::{Error, Result};
pub use grid::{GridFunction, TorusGrid};
pub use kernel::{KernelFactory, KernelMethod, KernelOptions, MarkovKernel, Stencil};
pub use potential::PotentialSpec;
pub use rates::{Modulus, RateTriplet};
