//! Numerical toolkit for diffusions with locally irregular coefficients:
//! closed-form coefficient expressions, drift decomposition with respect to an
//! infinitesimally invariant density, a finite-volume density solver,
//! sampled-grid checks of Lyapunov-type criteria and an Euler–Maruyama
//! simulator with localization.

pub mod calculus;
pub mod criteria;
pub mod density;
pub mod expr;
pub mod mesh;
pub mod montecarlo;
