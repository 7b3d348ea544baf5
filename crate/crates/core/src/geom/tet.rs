use std::collections::HashMap;

use super::bvh::{Aabb, Bvh};
use super::triangle::{Region, TriangleIndex};
use super::{GeomError, ProjectionResult};
use crate::mesh::{edge_matrix, TetMesh, TriSurface, TET_FACES};
use crate::{Mat3, Vec3};

/// Barycentric coordinates within this much below zero still count as inside.
const INSIDE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignedDistanceSample {
    /// Negative inside.
    pub value: f64,
    /// Gradient of `value` with respect to the query; `None` on the boundary.
    pub gradient: Option<Vec3>,
}

/// Point location, closest-point projection and signed distance against a
/// tetrahedral mesh.
#[derive(Clone, Debug)]
pub struct TetIndex {
    positions: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    edges: Vec<Mat3>,
    /// Inverse of the Gram matrix `EᵀE` of each tet's edge matrix.
    gram_inv: Vec<Mat3>,
    bvh: Bvh,
    boundary: TriSurface,
    surface: TriangleIndex,
    /// Owning tet of each boundary triangle.
    face_owner: Vec<usize>,
}

impl TetIndex {
    pub fn new(mesh: &TetMesh) -> Result<Self, crate::Error> {
        let positions = mesh.vertices().to_vec();
        let tets = mesh.tets().to_vec();
        let mut edges = Vec::with_capacity(tets.len());
        let mut gram_inv = Vec::with_capacity(tets.len());
        for (t, tet) in tets.iter().enumerate() {
            let e = edge_matrix(&positions, tet);
            let inv = (e.transpose() * e).try_inverse().ok_or(GeomError::DegenerateTet(t))?;
            edges.push(e);
            gram_inv.push(inv);
        }
        let boxes: Vec<Aabb> = tets.iter().map(|t| Aabb::from_points(t.iter().map(|&v| &positions[v]))).collect();
        let boundary = mesh.boundary()?;
        let surface = TriangleIndex::new(&boundary)?;
        let mut owner_of: HashMap<[usize; 3], usize> = HashMap::new();
        for (t, tet) in tets.iter().enumerate() {
            for f in TET_FACES {
                let mut key = [tet[f[0]], tet[f[1]], tet[f[2]]];
                key.sort_unstable();
                owner_of.entry(key).or_insert(t);
            }
        }
        let face_owner = boundary
            .faces
            .iter()
            .map(|f| {
                let mut key = f.map(|i| boundary.volume_index[i]);
                key.sort_unstable();
                owner_of[&key]
            })
            .collect();
        Ok(Self { positions, tets, edges, gram_inv, bvh: Bvh::build(&boxes), boundary, surface, face_owner })
    }

    pub fn boundary(&self) -> &TriSurface {
        &self.boundary
    }

    pub fn surface_index(&self) -> &TriangleIndex {
        &self.surface
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    /// Barycentric coordinates of `p` in tet `t` (they sum to 1).
    pub fn barycentric(&self, t: usize, p: &Vec3) -> [f64; 4] {
        let e = &self.edges[t];
        let w = self.gram_inv[t] * (e.transpose() * (p - self.positions[self.tets[t][0]]));
        [1.0 - w.sum(), w[0], w[1], w[2]]
    }

    /// Lowest-index tet containing `p` (boundary inclusive).
    pub fn locate(&self, p: &Vec3) -> Option<(usize, [f64; 4])> {
        let mut found = None;
        self.bvh.find_containing(p, INSIDE_TOL, |t| {
            let w = self.barycentric(t, p);
            if w.iter().all(|&x| x >= -INSIDE_TOL) {
                found = Some((t, w));
                true
            } else {
                false
            }
        });
        found
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.locate(p).is_some()
    }

    /// Closest point on the tet mesh. Inside points return their containing
    /// tet with `d = 0`; outside points land on the boundary.
    pub fn project(&self, p: &Vec3) -> ProjectionResult {
        if let Some((t, w)) = self.locate(p) {
            return ProjectionResult { point: *p, element: t, weights: w, sq_distance: 0.0, region: Region::Inside };
        }
        let r = self.surface.project(p);
        let t = self.face_owner[r.element];
        let w = self.barycentric(t, &r.point);
        // snap away round-off so weights are exact on the face
        let w = w.map(|x| if x.abs() < 1e-14 { 0.0 } else { x });
        ProjectionResult { point: r.point, element: t, weights: w, sq_distance: r.sq_distance, region: r.region }
    }

    /// Signed distance to the boundary, negative inside.
    pub fn signed_distance(&self, p: &Vec3) -> SignedDistanceSample {
        let r = self.surface.project(p);
        let d = r.sq_distance.sqrt();
        let sign = if self.contains(p) { -1.0 } else { 1.0 };
        let gradient = (d > 0.0).then(|| sign * (p - r.point) / d);
        SignedDistanceSample { value: sign * d, gradient }
    }

    /// Evaluate barycentric `weights` in tet `t` on other vertex positions
    /// sharing this mesh's connectivity.
    pub fn interpolate(&self, t: usize, weights: &[f64; 4], positions: &[Vec3]) -> Vec3 {
        self.tets[t].iter().zip(weights).map(|(&v, &w)| positions[v] * w).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::{Rng, SeedableRng};

    fn cube_index() -> TetIndex {
        let mesh = fixtures::cube_tet_mesh(2, 1.0);
        let v: Vec<Vec3> = mesh.vertices().iter().map(|p| p + Vec3::repeat(0.5)).collect();
        TetIndex::new(&mesh.with_positions(v)).unwrap()
    }

    #[test]
    fn centroid_weights() {
        let mesh = fixtures::cube_tet_mesh(1, 1.0);
        let index = TetIndex::new(&mesh).unwrap();
        for (t, tet) in mesh.tets().iter().enumerate() {
            let c: Vec3 = tet.iter().map(|&v| mesh.vertices()[v]).sum::<Vec3>() / 4.0;
            let w = index.barycentric(t, &c);
            assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-14));
            let r = index.project(&c);
            assert_eq!(r.sq_distance, 0.0);
            assert_eq!(r.element, t);
        }
    }

    #[test]
    fn cube_signed_distances() {
        let index = cube_index();
        assert!((index.signed_distance(&Vec3::repeat(0.5)).value + 0.5).abs() < 1e-12);
        assert!((index.signed_distance(&Vec3::new(2.0, 0.5, 0.5)).value - 1.0).abs() < 1e-12);
        assert_eq!(index.signed_distance(&Vec3::zeros()).value, 0.0);
        assert!(!index.contains(&Vec3::repeat(4.0)));
    }

    #[test]
    fn shared_face_is_inside() {
        let index = cube_index();
        // lies on interior faces of several tets
        let r = index.project(&Vec3::new(0.5, 0.5, 0.25));
        assert_eq!(r.sq_distance, 0.0);
    }

    #[test]
    fn outside_matches_boundary_projection() {
        let index = cube_index();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = Vec3::from_fn(|_, _| rng.random_range(-1.0..2.0));
            let r = index.project(&p);
            let clamped = p.map(|x| x.clamp(0.0, 1.0));
            assert!((r.sq_distance - (p - clamped).norm_squared()).abs() < 1e-12);
            assert!((index.interpolate(r.element, &r.weights, &index.positions) - r.point).norm() < 1e-12);
            let s: f64 = r.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
