use super::bvh::{Aabb, Bvh};
use super::{GeomError, ProjectionResult};
use crate::mesh::TriSurface;
use crate::{Mat3, Vec3};

/// Which part of the triangle the closest point lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Region {
    Interior,
    /// Edge `k` runs from local vertex `k` to `k + 1 mod 3`.
    Edge(u8),
    Vertex(u8),
    /// Strictly inside a tetrahedron.
    Inside,
}

/// Per-triangle data for the closed-form projection. `g1`, `g2` are the
/// constant gradients `∂w_1/∂p`, `∂w_2/∂p` of the plane solve.
#[derive(Clone, Copy, Debug)]
pub struct Triangle {
    pub vertices: [Vec3; 3],
    e1: Vec3,
    e2: Vec3,
    g1: Vec3,
    g2: Vec3,
    pub normal: Vec3,
}

impl Triangle {
    /// `None` for zero-area triangles.
    pub fn new(a: Vec3, b: Vec3, c: Vec3) -> Option<Self> {
        let (e1, e2) = (b - a, c - a);
        let cross = e1.cross(&e2);
        let (l1, l2) = (e1.norm_squared(), e2.norm_squared());
        if !(cross.norm_squared() > 1e-28 * l1 * l2) {
            return None;
        }
        let d12 = e1.dot(&e2);
        let g1 = (e1 - e2 * (d12 / l2)) / (l1 - d12 * d12 / l2);
        let g2 = (e2 - e1 * (d12 / l1)) / (l2 - d12 * d12 / l1);
        Some(Self { vertices: [a, b, c], e1, e2, g1, g2, normal: cross.normalize() })
    }

    fn bounds(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter())
    }

    /// Closest point, barycentric weights and region.
    pub fn project(&self, p: &Vec3) -> (Vec3, [f64; 3], Region) {
        let r = p - self.vertices[0];
        let w1 = r.dot(&self.g1);
        let w2 = r.dot(&self.g2);
        let w0 = 1.0 - w1 - w2;
        if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
            let q = self.vertices[0] + self.e1 * w1 + self.e2 * w2;
            return (q, [w0, w1, w2], Region::Interior);
        }
        let mut best: Option<(f64, Vec3, [f64; 3], Region)> = None;
        for k in 0..3 {
            let (a, b) = (self.vertices[k], self.vertices[(k + 1) % 3]);
            let ab = b - a;
            let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let q = a + ab * t;
            let d = (p - q).norm_squared();
            if best.as_ref().is_none_or(|b| d < b.0) {
                let mut w = [0.0; 3];
                w[k] = 1.0 - t;
                w[(k + 1) % 3] = t;
                let region = if t <= 0.0 {
                    Region::Vertex(k as u8)
                } else if t >= 1.0 {
                    Region::Vertex(((k + 1) % 3) as u8)
                } else {
                    Region::Edge(k as u8)
                };
                best = Some((d, q, w, region));
            }
        }
        let (_, q, w, region) = best.expect("three edges");
        (q, w, region)
    }

    /// Exact `∂q/∂p` for a projection landing in `region`.
    pub fn dq_dp(&self, region: Region) -> Mat3 {
        match region {
            Region::Interior | Region::Inside => {
                // q = v0 + e1 (g1·r) + e2 (g2·r)
                self.e1 * self.g1.transpose() + self.e2 * self.g2.transpose()
            }
            Region::Edge(k) => {
                let k = k as usize;
                let u = (self.vertices[(k + 1) % 3] - self.vertices[k]).normalize();
                u * u.transpose()
            }
            Region::Vertex(_) => Mat3::zeros(),
        }
    }

    /// Projector onto the supporting plane, `I − n nᵀ`.
    pub fn plane_projector(&self) -> Mat3 {
        Mat3::identity() - self.normal * self.normal.transpose()
    }
}

/// Project onto a single triangle given by its corners.
pub fn project_point_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<ProjectionResult> {
    let tri = Triangle::new(*a, *b, *c)?;
    let (q, w, region) = tri.project(p);
    Some(ProjectionResult {
        point: q,
        element: 0,
        weights: [w[0], w[1], w[2], 0.0],
        sq_distance: (p - q).norm_squared(),
        region,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionGradients {
    /// Exact Jacobian of the closest point with respect to the query.
    pub dq_dp: Mat3,
    /// Supporting-plane projector of the closest triangle; used in place of
    /// `dq_dp` where the exact one degenerates on ridges.
    pub plane_dq_dp: Mat3,
    /// `∂‖p − q‖²/∂p`.
    pub dd_dp: Vec3,
    /// `∂‖p − q‖²/∂v_i` for the three triangle corners.
    pub dd_dv: [Vec3; 3],
}

/// Gradients of a projection `result` of `p` onto `index`.
pub fn projection_gradients(p: &Vec3, index: &TriangleIndex, result: &ProjectionResult) -> ProjectionGradients {
    let tri = index.triangle(result.element).expect("result refers to a valid triangle");
    let diff = result.point - p;
    let w = result.weights;
    ProjectionGradients {
        dq_dp: tri.dq_dp(result.region),
        plane_dq_dp: tri.plane_projector(),
        dd_dp: -2.0 * diff,
        dd_dv: [2.0 * w[0] * diff, 2.0 * w[1] * diff, 2.0 * w[2] * diff],
    }
}

/// Closest-point structure over a triangle surface. Degenerate triangles are
/// skipped. Call [`TriangleIndex::update`] after moving vertices.
#[derive(Clone, Debug)]
pub struct TriangleIndex {
    faces: Vec<[usize; 3]>,
    tris: Vec<Option<Triangle>>,
    bvh: Bvh,
    built_from: Vec<Vec3>,
    rebuild_threshold: f64,
}

impl TriangleIndex {
    pub fn new(surface: &TriSurface) -> Result<Self, GeomError> {
        Self::from_parts(&surface.vertices, &surface.faces)
    }

    pub fn from_parts(vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<Self, GeomError> {
        if faces.is_empty() {
            return Err(GeomError::EmptySurface);
        }
        let tris = Self::triangles(vertices, faces)?;
        let boxes = Self::boxes(&tris);
        let mean_edge = faces
            .iter()
            .map(|f| (0..3).map(|k| (vertices[f[(k + 1) % 3]] - vertices[f[k]]).norm()).sum::<f64>() / 3.0)
            .sum::<f64>()
            / faces.len() as f64;
        Ok(Self {
            faces: faces.to_vec(),
            tris,
            bvh: Bvh::build(&boxes),
            built_from: vertices.to_vec(),
            rebuild_threshold: 0.1 * mean_edge,
        })
    }

    fn triangles(vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<Vec<Option<Triangle>>, GeomError> {
        let mut skipped = 0;
        let tris: Vec<Option<Triangle>> = faces
            .iter()
            .map(|f| {
                let t = Triangle::new(vertices[f[0]], vertices[f[1]], vertices[f[2]]);
                skipped += t.is_none() as usize;
                t
            })
            .collect();
        if skipped == faces.len() {
            return Err(GeomError::AllDegenerate);
        }
        if skipped > 0 {
            log::warn!("skipping {skipped} degenerate triangles");
        }
        Ok(tris)
    }

    fn boxes(tris: &[Option<Triangle>]) -> Vec<Aabb> {
        tris.iter()
            .map(|t| match t {
                Some(t) => t.bounds(),
                None => Aabb::empty(),
            })
            .collect()
    }

    /// Move the surface vertices. Refits the hierarchy, or rebuilds it when
    /// some vertex moved more than 10% of the mean edge length since the last
    /// build.
    pub fn update(&mut self, vertices: &[Vec3]) -> Result<(), GeomError> {
        self.tris = Self::triangles(vertices, &self.faces)?;
        let boxes = Self::boxes(&self.tris);
        let moved = vertices
            .iter()
            .zip(&self.built_from)
            .any(|(a, b)| (a - b).norm() > self.rebuild_threshold);
        if moved {
            self.bvh = Bvh::build(&boxes);
            self.built_from = vertices.to_vec();
        } else {
            self.bvh.refit(&boxes);
        }
        Ok(())
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn triangle(&self, f: usize) -> Option<&Triangle> {
        self.tris[f].as_ref()
    }

    /// Global closest point over all non-degenerate triangles.
    pub fn project(&self, p: &Vec3) -> ProjectionResult {
        let (element, sq_distance, (point, w, region)) = self
            .bvh
            .nearest(p, |f| {
                let tri = self.tris[f].as_ref()?;
                let (q, w, region) = tri.project(p);
                Some(((p - q).norm_squared(), (q, w, region)))
            })
            .expect("index has at least one valid triangle");
        ProjectionResult { point, element, weights: [w[0], w[1], w[2], 0.0], sq_distance, region }
    }

    /// Squared distance, gradient with respect to `p` and the projection.
    pub fn sq_distance(&self, p: &Vec3) -> (f64, Vec3, ProjectionResult) {
        let r = self.project(p);
        (r.sq_distance, 2.0 * (p - r.point), r)
    }
}
