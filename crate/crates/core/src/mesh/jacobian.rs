use super::MeshError;
use crate::{Mat3, Vec3};

/// Edge matrix `[v1 - v0, v2 - v0, v3 - v0]` (columns) of a tet.
#[inline]
pub fn edge_matrix(positions: &[Vec3], tet: &[usize; 4]) -> Mat3 {
    let o = positions[tet[0]];
    Mat3::from_columns(&[positions[tet[1]] - o, positions[tet[2]] - o, positions[tet[3]] - o])
}

/// Rest-shape data for a set of tetrahedra: the inverse rest edge matrix of
/// each tet, so that `J_t = D_t(f) · D_t(rest)⁻¹`.
#[derive(Clone, Debug)]
pub struct TetFrames {
    pub tets: Vec<[usize; 4]>,
    rest_inv: Vec<Mat3>,
    rest_volumes: Vec<f64>,
}

impl TetFrames {
    pub fn new(rest: &[Vec3], tets: Vec<[usize; 4]>) -> Result<Self, MeshError> {
        let mut rest_inv = Vec::with_capacity(tets.len());
        let mut rest_volumes = Vec::with_capacity(tets.len());
        for (t, tet) in tets.iter().enumerate() {
            let d = edge_matrix(rest, tet);
            let det = d.determinant();
            let scale = d.column_iter().map(|c| c.norm()).product::<f64>();
            if !(det.abs() > 1e-14 * scale) {
                return Err(MeshError::DegenerateTet { tet: t, volume: det / 6.0 });
            }
            rest_inv.push(d.try_inverse().ok_or(MeshError::DegenerateTet { tet: t, volume: det / 6.0 })?);
            rest_volumes.push(det / 6.0);
        }
        Ok(Self { tets, rest_inv, rest_volumes })
    }

    pub fn len(&self) -> usize {
        self.tets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tets.is_empty()
    }

    pub fn rest_inverse(&self, t: usize) -> &Mat3 {
        &self.rest_inv[t]
    }

    pub fn rest_volumes(&self) -> &[f64] {
        &self.rest_volumes
    }

    #[inline]
    pub fn jacobian(&self, t: usize, positions: &[Vec3]) -> Mat3 {
        edge_matrix(positions, &self.tets[t]) * self.rest_inv[t]
    }

    pub fn jacobians(&self, positions: &[Vec3]) -> JacobianField {
        JacobianField { matrices: (0..self.len()).map(|t| self.jacobian(t, positions)).collect() }
    }

    /// Smallest `det J_t` over all tets.
    pub fn min_determinant(&self, positions: &[Vec3]) -> f64 {
        (0..self.len())
            .map(|t| self.jacobian(t, positions).determinant())
            .fold(f64::INFINITY, f64::min)
    }

    /// Ids of tets with `det J_t ≤ 0`.
    pub fn inverted(&self, positions: &[Vec3]) -> Vec<usize> {
        (0..self.len()).filter(|&t| !(self.jacobian(t, positions).determinant() > 0.0)).collect()
    }

    /// Scatter a gradient with respect to `J_t` onto the tet's 4 vertices.
    #[inline]
    pub fn scatter(&self, t: usize, d_j: &Mat3) -> [Vec3; 4] {
        // J = D R⁻¹  ⇒  ∂E/∂D = ∂E/∂J · R⁻ᵀ ; column k of ∂E/∂D belongs to vertex k+1
        let d_d = d_j * self.rest_inv[t].transpose();
        let g1 = d_d.column(0).into_owned();
        let g2 = d_d.column(1).into_owned();
        let g3 = d_d.column(2).into_owned();
        [-(g1 + g2 + g3), g1, g2, g3]
    }
}

/// Per-tet Jacobians of a piecewise-linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianField {
    pub matrices: Vec<Mat3>,
}
