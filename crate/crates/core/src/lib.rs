//! Interactive PolyCube hexahedral meshing.
//!
//! The pipeline turns a tetrahedral mesh into a boundary-conforming hex mesh in
//! four stages:
//!
//! 1. [`deform`]: deform the input into a near-PolyCube with a barrier
//!    distortion energy plus an axis-alignment energy.
//! 2. [`polycube`]: approximate the deformed shape by a union of axis-aligned
//!    cuboids fitted against its signed distance field.
//! 3. [`voxel`]: snap the cuboids to a lattice, edit voxels, pad.
//! 4. [`pullback`] and [`quality`]: map the voxel hex mesh back onto the input
//!    without inverting any element, then trade off element quality against
//!    surface fidelity.
//!
//! Every stage is driven by the first-order optimizer in [`optim`]. Stage
//! state lives in a [`session::Session`], which [`io`] persists.

pub mod deform;
pub mod distortion;
pub mod fixtures;
pub mod geom;
pub mod io;
pub mod mesh;
pub mod optim;
pub mod pipeline;
pub mod polycube;
pub mod pullback;
pub mod quality;
pub mod session;
pub mod voxel;

mod error;

pub use error::{Error, Result};

/// Point or vector in model space.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3×3 matrix, column-major.
pub type Mat3 = nalgebra::Matrix3<f64>;
