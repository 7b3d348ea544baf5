//! Indexed tetrahedral and hexahedral meshes.
//!
//! Hexahedra use the VTK corner order: the bottom quad `0 1 2 3` runs
//! counter-clockwise when seen from the top quad `4 5 6 7`, and corner `i + 4`
//! sits above corner `i`. Tetrahedra are positively oriented when
//! `det[v1 - v0, v2 - v0, v3 - v0] > 0`.

mod boundary;
mod corner;
mod jacobian;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

pub use boundary::{QuadSurface, SurfaceMesh, TriSurface, HEX_FACES, TET_FACES};
pub use corner::{CornerTet, CornerTetSet, HEX_CORNER_NEIGHBORS, HEX_EDGES};
pub(crate) use corner::CORNER_LOCAL;
pub use jacobian::{edge_matrix, JacobianField, TetFrames};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("cell {cell} references vertex {index}, but the mesh has {count} vertices")]
    IndexOutOfRange { cell: usize, index: usize, count: usize },
    #[error("cell {cell} repeats vertex {index}")]
    RepeatedVertex { cell: usize, index: usize },
    #[error("tetrahedron {tet} is degenerate (signed volume {volume:e})")]
    DegenerateTet { tet: usize, volume: f64 },
    #[error("tetrahedron {tet} is inverted (signed volume {volume:e})")]
    InvertedTet { tet: usize, volume: f64 },
    #[error("face {face:?} is shared by {count} cells")]
    NonManifoldFace { face: Vec<usize>, count: usize },
    #[error("boundary edge ({a}, {b}) has {count} incident boundary faces, expected 2")]
    NonManifoldEdge { a: usize, b: usize, count: usize },
    #[error("mesh has no cells")]
    Empty,
}

/// Signed volume of the tetrahedron `(a, b, c, d)`.
#[inline]
pub fn tet_signed_volume(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (b - a).dot(&(c - a).cross(&(d - a))) / 6.0
}

#[inline]
pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

fn check_indices<const N: usize>(cells: &[[usize; N]], count: usize) -> Result<(), MeshError> {
    for (cell, ids) in cells.iter().enumerate() {
        for (k, &index) in ids.iter().enumerate() {
            if index >= count {
                return Err(MeshError::IndexOutOfRange { cell, index, count });
            }
            if ids[..k].contains(&index) {
                return Err(MeshError::RepeatedVertex { cell, index });
            }
        }
    }
    Ok(())
}

/// Per-element measures of a volume mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Measures {
    pub cell_volumes: Vec<f64>,
    pub face_areas: Vec<f64>,
    pub total_volume: f64,
    pub total_area: f64,
}

/// Tetrahedral mesh `(V, T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TetMeshData", into = "TetMeshData")]
pub struct TetMesh {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
}

impl TetMesh {
    /// Builds a mesh, rejecting out-of-range indices and tets whose signed
    /// volume is not positive.
    pub fn new(vertices: Vec<Vec3>, tets: Vec<[usize; 4]>) -> Result<Self, MeshError> {
        let mesh = Self::checked_connectivity(vertices, tets)?;
        for t in 0..mesh.tets.len() {
            let volume = mesh.signed_volume(t);
            if volume == 0.0 || !volume.is_finite() {
                return Err(MeshError::DegenerateTet { tet: t, volume });
            }
            if volume < 0.0 {
                return Err(MeshError::InvertedTet { tet: t, volume });
            }
        }
        Ok(mesh)
    }

    /// Like [`TetMesh::new`], but flips negatively oriented tets instead of
    /// rejecting them. Returns the ids of the flipped tets.
    pub fn new_reoriented(
        vertices: Vec<Vec3>,
        tets: Vec<[usize; 4]>,
    ) -> Result<(Self, Vec<usize>), MeshError> {
        let mut mesh = Self::checked_connectivity(vertices, tets)?;
        let mut flipped = Vec::new();
        for t in 0..mesh.tets.len() {
            let volume = mesh.signed_volume(t);
            if volume == 0.0 || !volume.is_finite() {
                return Err(MeshError::DegenerateTet { tet: t, volume });
            }
            if volume < 0.0 {
                mesh.tets[t].swap(2, 3);
                flipped.push(t);
            }
        }
        Ok((mesh, flipped))
    }

    fn checked_connectivity(vertices: Vec<Vec3>, tets: Vec<[usize; 4]>) -> Result<Self, MeshError> {
        if tets.is_empty() {
            return Err(MeshError::Empty);
        }
        check_indices(&tets, vertices.len())?;
        Ok(Self { vertices, tets })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    /// Same connectivity, new vertex positions. Orientation is not re-checked;
    /// deformed copies are produced by inversion-free maps.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Self {
        assert_eq!(positions.len(), self.vertices.len(), "position count mismatch");
        Self { vertices: positions, tets: self.tets.clone() }
    }

    pub fn signed_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tets[t];
        let v = &self.vertices;
        tet_signed_volume(&v[a], &v[b], &v[c], &v[d])
    }

    pub fn boundary(&self) -> Result<TriSurface, MeshError> {
        boundary::extract(&self.vertices, &self.tets, &TET_FACES)
    }

    /// Cell volumes (signed, not clamped) and boundary face areas.
    pub fn measures(&self) -> Result<Measures, MeshError> {
        let cell_volumes: Vec<f64> = (0..self.tets.len()).map(|t| self.signed_volume(t)).collect();
        let face_areas = self.boundary()?.face_areas();
        Ok(Measures {
            total_volume: cell_volumes.iter().sum(),
            total_area: face_areas.iter().sum(),
            cell_volumes,
            face_areas,
        })
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.vertices)
    }
}

/// Hexahedral mesh `(V, H)` with VTK corner order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HexMeshData", into = "HexMeshData")]
pub struct HexMesh {
    vertices: Vec<Vec3>,
    hexes: Vec<[usize; 8]>,
}

impl HexMesh {
    pub fn new(vertices: Vec<Vec3>, hexes: Vec<[usize; 8]>) -> Result<Self, MeshError> {
        if hexes.is_empty() {
            return Err(MeshError::Empty);
        }
        check_indices(&hexes, vertices.len())?;
        Ok(Self { vertices, hexes })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn hexes(&self) -> &[[usize; 8]] {
        &self.hexes
    }

    pub fn with_positions(&self, positions: Vec<Vec3>) -> Self {
        assert_eq!(positions.len(), self.vertices.len(), "position count mismatch");
        Self { vertices: positions, hexes: self.hexes.clone() }
    }

    pub fn boundary(&self) -> Result<QuadSurface, MeshError> {
        boundary::extract(&self.vertices, &self.hexes, &HEX_FACES)
    }

    /// Volume of hex `h` under the trilinear map through its corners.
    /// 2×2×2 Gauss quadrature integrates the trilinear Jacobian determinant
    /// exactly.
    pub fn volume(&self, h: usize) -> f64 {
        let p: Vec<Vec3> = self.hexes[h].iter().map(|&i| self.vertices[i]).collect();
        let g = 0.5 / 3f64.sqrt();
        let nodes = [0.5 - g, 0.5 + g];
        let mut total = 0.0;
        for &u in &nodes {
            for &v in &nodes {
                for &w in &nodes {
                    total += 0.125 * trilinear_jacobian(&p, u, v, w).determinant();
                }
            }
        }
        total
    }

    pub fn centroid(&self, h: usize) -> Vec3 {
        self.hexes[h].iter().map(|&i| self.vertices[i]).sum::<Vec3>() / 8.0
    }

    pub fn measures(&self) -> Result<Measures, MeshError> {
        let cell_volumes: Vec<f64> = (0..self.hexes.len()).map(|h| self.volume(h)).collect();
        let face_areas = self.boundary()?.face_areas();
        Ok(Measures {
            total_volume: cell_volumes.iter().sum(),
            total_area: face_areas.iter().sum(),
            cell_volumes,
            face_areas,
        })
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.vertices)
    }

    /// Mean length over the 12 edges of every hex (shared edges counted once
    /// per incident hex).
    pub fn mean_edge_length(&self) -> f64 {
        let mut sum = 0.0;
        for hex in &self.hexes {
            for &[a, b] in HEX_EDGES.iter() {
                sum += (self.vertices[hex[a]] - self.vertices[hex[b]]).norm();
            }
        }
        sum / (12 * self.hexes.len()) as f64
    }
}

/// Jacobian of the trilinear map of a hex at local coordinates `(u, v, w)`.
fn trilinear_jacobian(p: &[Vec3], u: f64, v: f64, w: f64) -> crate::Mat3 {
    // corner i has local coordinates (x, y, z) given by CORNER_LOCAL[i]
    let mut j = crate::Mat3::zeros();
    for (i, c) in corner::CORNER_LOCAL.iter().enumerate() {
        let bx = if c[0] == 1 { u } else { 1.0 - u };
        let by = if c[1] == 1 { v } else { 1.0 - v };
        let bz = if c[2] == 1 { w } else { 1.0 - w };
        let sx = if c[0] == 1 { 1.0 } else { -1.0 };
        let sy = if c[1] == 1 { 1.0 } else { -1.0 };
        let sz = if c[2] == 1 { 1.0 } else { -1.0 };
        let grad = [sx * by * bz, bx * sy * bz, bx * by * sz];
        for col in 0..3 {
            for row in 0..3 {
                j[(row, col)] += p[i][row] * grad[col];
            }
        }
    }
    j
}

#[derive(Serialize, Deserialize)]
struct TetMeshData {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
}

impl From<TetMesh> for TetMeshData {
    fn from(m: TetMesh) -> Self {
        Self { vertices: m.vertices, tets: m.tets }
    }
}

impl TryFrom<TetMeshData> for TetMesh {
    type Error = MeshError;
    fn try_from(d: TetMeshData) -> Result<Self, MeshError> {
        TetMesh::new(d.vertices, d.tets)
    }
}

#[derive(Serialize, Deserialize)]
struct HexMeshData {
    vertices: Vec<Vec3>,
    hexes: Vec<[usize; 8]>,
}

impl From<HexMesh> for HexMeshData {
    fn from(m: HexMesh) -> Self {
        Self { vertices: m.vertices, hexes: m.hexes }
    }
}

impl TryFrom<HexMeshData> for HexMesh {
    type Error = MeshError;
    fn try_from(d: HexMeshData) -> Result<Self, MeshError> {
        HexMesh::new(d.vertices, d.hexes)
    }
}

pub fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

pub fn bbox_diagonal(points: &[Vec3]) -> f64 {
    let (lo, hi) = bounding_box(points);
    (hi - lo).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn unit_tet() -> TetMesh {
        TetMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn unit_tet_volume_is_one_sixth() {
        let m = unit_tet().measures().unwrap();
        assert!((m.total_volume - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn unit_cube_hex_measures() {
        let hex = fixtures::hex_block(1, 1, 1, 1.0);
        let m = hex.measures().unwrap();
        assert!((m.total_volume - 1.0).abs() < 1e-14);
        assert!((m.total_area - 6.0).abs() < 1e-14);
    }

    #[test]
    fn random_tet_volume_matches_determinant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: Vec<Vec3> = (0..4)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let e = nalgebra::Matrix3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
            let expected = e.determinant().abs() / 6.0;
            let (mesh, _) = TetMesh::new_reoriented(p, vec![[0, 1, 2, 3]]).unwrap();
            assert!((mesh.signed_volume(0) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn hex_volume_exact_for_trilinear_element() {
        // A sheared, tapered hex: compare Gauss volume with a dense midpoint sum.
        let mut hex = fixtures::hex_block(1, 1, 1, 1.0);
        let mut v = hex.vertices().to_vec();
        v[6] += Vec3::new(0.3, 0.2, 0.4);
        v[4] += Vec3::new(0.1, 0.0, -0.2);
        hex = hex.with_positions(v);
        let corners: Vec<Vec3> = hex.hexes()[0].iter().map(|&i| hex.vertices()[i]).collect();
        let n = 60;
        let mut dense = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let (u, w, s) = (
                        (i as f64 + 0.5) / n as f64,
                        (j as f64 + 0.5) / n as f64,
                        (k as f64 + 0.5) / n as f64,
                    );
                    dense += trilinear_jacobian(&corners, u, w, s).determinant();
                }
            }
        }
        dense /= (n * n * n) as f64;
        assert!((hex.volume(0) - dense).abs() < 1e-4, "{} {}", hex.volume(0), dense);
    }

    #[test]
    fn rejects_bad_indices_and_degenerate_tets() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        assert!(matches!(
            TetMesh::new(v.clone(), vec![[0, 1, 2, 4]]),
            Err(MeshError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            TetMesh::new(v.clone(), vec![[0, 1, 1, 3]]),
            Err(MeshError::RepeatedVertex { .. })
        ));
        assert!(matches!(TetMesh::new(v.clone(), vec![[0, 2, 1, 3]]), Err(MeshError::InvertedTet { .. })));
        let flat = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(1.0, 1.0, 0.0)];
        assert!(matches!(TetMesh::new(flat, vec![[0, 1, 2, 3]]), Err(MeshError::DegenerateTet { .. })));
        let (m, flipped) = TetMesh::new_reoriented(v, vec![[0, 2, 1, 3]]).unwrap();
        assert_eq!(flipped, vec![0]);
        assert!(m.signed_volume(0) > 0.0);
    }
}
