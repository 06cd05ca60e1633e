//! Numerical core for correspondence-free statistical shape modelling of
//! triangulated surfaces.
//!
//! Everything here is `no_std` (with `alloc`): mesh primitives, the
//! varifold fidelity metric, similarity alignment and cup extraction,
//! control-point flows, the sparse-GP momentum model and its variational
//! training, the geodesic-shooting baseline, latent-space classifiers and
//! the evaluation statistics. File formats, configuration and the command
//! line live in the companion `gpdssm` crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod exec;
pub mod mesh;
pub mod cup;
pub mod varifold;
pub mod optim;
pub mod preprocess;
pub mod flow;
pub mod gp;
pub mod gpdssm;
pub mod lddmm;
pub mod classify;
pub mod eval;
mod linalg;
mod ode;

pub use error::{Error, Result};
pub use mesh::{TriMesh, Vec3};
