//! Projection, inclusion, signed-distance and sampling kernels.
//!
//! All proximity energies in the pipeline use squared distances, so
//! [`ProjectionResult::sq_distance`] and its gradients are reported for
//! `‖p − q‖²`.

mod bvh;
mod sampling;
mod tet;
mod triangle;

use thiserror::Error;

pub use bvh::{Aabb, Bvh, BRUTE_FORCE_LIMIT};
pub use sampling::{sample_surface, SurfaceSample, SurfaceSampler};
pub use tet::{SignedDistanceSample, TetIndex};
pub use triangle::{
    project_point_triangle, projection_gradients, ProjectionGradients, Region, Triangle, TriangleIndex,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("surface has no non-degenerate triangles")]
    AllDegenerate,
    #[error("surface is empty")]
    EmptySurface,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("tetrahedron {0} is degenerate")]
    DegenerateTet(usize),
}

/// Closest point `q` on a triangle or tet mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionResult {
    pub point: crate::Vec3,
    /// Triangle or tet id.
    pub element: usize,
    /// Barycentric weights; only the first 3 are used for triangles.
    pub weights: [f64; 4],
    pub sq_distance: f64,
    pub region: Region,
}

/// Closest point on a triangle surface.
pub fn project_to_triangle_mesh(p: &crate::Vec3, surface: &crate::mesh::TriSurface) -> Result<ProjectionResult, GeomError> {
    Ok(TriangleIndex::new(surface)?.project(p))
}

/// Closest point on a tet mesh; `d = 0` inside.
pub fn project_to_tet_mesh(p: &crate::Vec3, mesh: &crate::mesh::TetMesh) -> crate::Result<ProjectionResult> {
    Ok(TetIndex::new(mesh)?.project(p))
}

pub fn point_in_mesh(p: &crate::Vec3, mesh: &crate::mesh::TetMesh) -> crate::Result<bool> {
    Ok(TetIndex::new(mesh)?.contains(p))
}

pub fn signed_distance_tet_mesh(p: &crate::Vec3, mesh: &crate::mesh::TetMesh) -> crate::Result<SignedDistanceSample> {
    Ok(TetIndex::new(mesh)?.signed_distance(p))
}
