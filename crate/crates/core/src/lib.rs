//! Solvers and diagnostics for nonlinear Fokker-Planck equations of the form
//! `∂t p = div(∇Φ b(p) p) + Δ f(p)` and the associated McKean-Vlasov particle
//! system.

pub mod error;
pub mod fpe;
pub mod functionals;
pub mod grid;
pub mod models;
pub mod particles;
pub mod perturbation;
pub mod quadrature;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{DensityField, Grid};
pub use models::{MobilityModel, Potential};
