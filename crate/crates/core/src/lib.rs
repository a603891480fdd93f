//! Numerical laboratory for holomorphic vector bundles on quasi-regular
//! Sasakian manifolds.

pub mod bundle;
pub mod cli;
pub mod dual;
pub mod error;
pub mod family;
pub mod flow;
pub mod forms;
pub mod grid;
pub mod slicemat;
pub mod stencil;
pub mod structure;
pub mod torus;

pub use error::{Error, Result};
pub use num_complex::Complex64;
