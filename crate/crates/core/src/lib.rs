//! Monte Carlo solvers for controlled forward-backward SDEs with generators
//! of quadratic growth in `z`, together with the first-order adjoint
//! machinery needed to check a stochastic maximum principle numerically.

pub mod adjoint;
pub mod bmo;
pub mod bsde;
pub mod error;
pub mod families;
pub mod io;
pub mod model;
pub mod paths;
pub mod quadrature;
pub mod regression;
pub mod smp;
pub mod stats;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
