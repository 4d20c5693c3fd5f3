//! Respiratory motion modelling on voxel grids: deformable registration,
//! a per-voxel surrogate model, and transfer of a model from one patient
//! to another.

pub mod error;
pub mod evaluation;
pub mod field;
pub mod grid;
pub mod io;
pub mod model;
pub mod par;
pub mod phantom;
pub mod pyramid;
pub mod registration;
pub mod signal;
pub mod transfer;

pub use error::{Error, ErrorKind, Result};
pub use grid::{DisplacementField, GridDomain, ScalarVolume, Vec3};
