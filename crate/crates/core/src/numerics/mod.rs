//! Special functions, quadrature and interpolation shared by the modules.

pub mod bessel;
pub mod interp;
pub mod quad;

pub use bessel::{j0, j01, j1};
pub use interp::{CubicTable, HermiteTable};
pub use quad::{gauss_legendre, integrate, GaussLegendre, QuadResult};
