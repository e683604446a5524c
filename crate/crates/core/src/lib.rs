//! Numerical laboratory for the Vlasov-Fokker-Planck equation with a
//! non-symmetric interaction potential.
//!
//! * [`model`]: parameters, kernels, smallness predicate, coupling constants.
//! * [`particles`]: the N-particle non-equilibrium Langevin system and the
//!   synchronous-coupling contraction experiment.
//! * [`pde`]: finite-volume solver for the nonlinear kinetic equation and the
//!   stationary fixed-point iteration.
//! * [`functionals`]: entropy, free energies, local equilibrium, twisted
//!   Fisher information, relative entropy, L1 and Wasserstein distances.
//! * [`gaussian`]: closed-form oracles for the quadratic kernel `a x^2 + b x`.
//! * [`experiments`]: the Lyapunov, witness-search and Fisher-decay drivers
//!   used by the command-line runner.

pub mod error;
pub mod experiments;
pub mod functionals;
pub mod gaussian;
pub mod model;
pub mod particles;
pub mod pde;

mod assignment;
mod ode;

pub use error::{Error, Result};
pub use model::{
    builtin_kernel, coupling_constants, mean_field_force, smallness_holds, CouplingConstants, InteractionKernel,
    KernelSpec, Marginal, ModelParams,
};
