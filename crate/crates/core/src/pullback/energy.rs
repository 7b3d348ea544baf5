//! Energies on hex meshes shared by the pullback and quality stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::PullbackError;
use crate::distortion::{barrier_energy, BarrierWeights};
use crate::geom::{GeomError, SurfaceSampler, TriangleIndex};
use crate::mesh::{CornerTetSet, HexMesh, QuadSurface, TetFrames, TriSurface};
use crate::Vec3;

/// Fixed structure of a hex mesh under deformation: connectivity, corner-tet
/// rest frames, and the boundary quads with their triangulation and 1-rings.
#[derive(Clone, Debug)]
pub struct HexProblem {
    pub hexes: Vec<[usize; 8]>,
    pub corners: CornerTetSet,
    /// Boundary quads indexing surface-local vertices.
    pub surface: QuadSurface,
    /// Each boundary quad split along its `0–2` diagonal.
    pub tri_faces: Vec<[usize; 3]>,
    /// Quad-edge 1-ring of each surface vertex.
    pub neighbors: Vec<Vec<usize>>,
    pub n_vertices: usize,
}

impl HexProblem {
    /// Rest shape is the current geometry of `mesh`.
    pub fn new(mesh: &HexMesh) -> crate::Result<Self> {
        let surface = mesh.boundary()?;
        let corners = CornerTetSet::new(mesh)?;
        let tri_faces = surface.triangulate().faces;
        let neighbors = surface.vertex_neighbors();
        Ok(Self { hexes: mesh.hexes().to_vec(), corners, surface, tri_faces, neighbors, n_vertices: mesh.vertices().len() })
    }

    pub fn frames(&self) -> &TetFrames {
        &self.corners.frames
    }

    pub fn is_surface(&self) -> Vec<bool> {
        let mut s = vec![false; self.n_vertices];
        for &v in &self.surface.volume_index {
            s[v] = true;
        }
        s
    }

    pub fn surface_positions(&self, positions: &[Vec3]) -> Vec<Vec3> {
        self.surface.volume_index.iter().map(|&v| positions[v]).collect()
    }

    /// Add surface-local gradients into a volume gradient.
    pub fn scatter_surface(&self, grad: &mut [Vec3], surface_grad: &[Vec3]) {
        for (&v, g) in self.surface.volume_index.iter().zip(surface_grad) {
            grad[v] += g;
        }
    }

    pub fn min_det(&self, positions: &[Vec3]) -> f64 {
        self.frames().min_determinant(positions)
    }

    pub fn mesh(&self, positions: Vec<Vec3>) -> HexMesh {
        HexMesh::new(positions, self.hexes.clone()).expect("connectivity was validated at construction")
    }
}

/// Barrier distortion summed with unit weight over the corner tets.
pub fn energy_hex_iso(frames: &TetFrames, positions: &[Vec3], w: &BarrierWeights) -> (f64, Vec<Vec3>) {
    barrier_energy(frames, positions, None, w)
}

/// A fixed triangle surface to be approached: closest-point index plus an
/// area-uniform sampler.
#[derive(Clone, Debug)]
pub struct TargetSurface {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub index: TriangleIndex,
    sampler: SurfaceSampler,
}

impl TargetSurface {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, GeomError> {
        let index = TriangleIndex::from_parts(&vertices, &faces)?;
        let sampler = SurfaceSampler::new(&vertices, &faces)?;
        Ok(Self { vertices, faces, index, sampler })
    }

    pub fn from_surface(s: &TriSurface) -> Result<Self, GeomError> {
        Self::new(s.vertices.clone(), s.faces.clone())
    }

    /// `n` area-uniform samples from stream `stream` of `seed`.
    pub fn sample(&self, n: usize, seed: u64, stream: u64) -> Vec<Vec3> {
        if n == 0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        self.sampler.sample(&self.vertices, n, &mut rng).expect("n > 0").into_iter().map(|s| s.point).collect()
    }
}

/// Raw proximity terms and the weighted gradient on the moving surface.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxEnergy {
    /// `Σ_v ‖v − proj(v, target)‖²` over moving vertices.
    pub to_target: f64,
    /// `Σ_s ‖s − proj(s, moving)‖²` over target samples.
    pub from_target: f64,
    pub grad: Vec<Vec3>,
}

/// Bidirectional squared-distance energy between a moving triangle surface
/// `(positions, faces)` and a fixed `target`, with `samples` drawn on the
/// target for the reverse direction. Reverse-direction gradients reach the
/// moving vertices through the barycentric weights of each closest point.
pub fn energy_prox(
    positions: &[Vec3],
    faces: &[[usize; 3]],
    target: &TargetSurface,
    samples: &[Vec3],
    w_to: f64,
    w_from: f64,
) -> Result<ProxEnergy, GeomError> {
    let to: Vec<(f64, Vec3)> = positions
        .par_iter()
        .map(|v| {
            let (d, g, _) = target.index.sq_distance(v);
            (d, g)
        })
        .collect();
    let mut grad: Vec<Vec3> = to.iter().map(|t| t.1 * w_to).collect();
    let to_target = to.iter().map(|t| t.0).sum();

    let mut from_target = 0.0;
    if !samples.is_empty() && w_from != 0.0 {
        let moving = TriangleIndex::from_parts(positions, faces)?;
        let from: Vec<(f64, [usize; 3], [Vec3; 3])> = samples
            .par_iter()
            .map(|s| {
                let r = moving.project(s);
                let diff = r.point - s;
                let w = r.weights;
                (r.sq_distance, faces[r.element], [diff * (2.0 * w[0]), diff * (2.0 * w[1]), diff * (2.0 * w[2])])
            })
            .collect();
        for (d, f, g) in from {
            from_target += d;
            for k in 0..3 {
                grad[f[k]] += g[k] * w_from;
            }
        }
    }
    Ok(ProxEnergy { to_target, from_target, grad })
}

/// `λ Σ_v ‖v − mean_{u ∈ N(v)} u‖²`.
pub fn energy_lap(positions: &[Vec3], neighbors: &[Vec<usize>], lambda: f64) -> Result<(f64, Vec<Vec3>), PullbackError> {
    let mut grad = vec![Vec3::zeros(); positions.len()];
    let mut value = 0.0;
    for (v, ring) in neighbors.iter().enumerate() {
        if ring.is_empty() {
            return Err(PullbackError::IsolatedVertex(v));
        }
        let inv = 1.0 / ring.len() as f64;
        let r = positions[v] - ring.iter().map(|&u| positions[u]).sum::<Vec3>() * inv;
        value += r.norm_squared();
        let g = r * (2.0 * lambda);
        grad[v] += g;
        for &u in ring {
            grad[u] -= g * inv;
        }
    }
    Ok((lambda * value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::optim::{check_gradient, flatten, unflatten};
    use rand::{Rng, SeedableRng};

    fn jitter(p: &[Vec3], amount: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.iter().map(|v| v + Vec3::from_fn(|_, _| rng.random_range(-amount..amount))).collect()
    }

    #[test]
    fn hex_iso_identity_and_gradient() {
        let block = fixtures::hex_block(2, 2, 2, 0.5);
        let problem = HexProblem::new(&block).unwrap();
        let w = BarrierWeights { angle: 1.0, vol: 1.0, eps: 1e-12 };
        let (e, _) = energy_hex_iso(problem.frames(), block.vertices(), &w);
        assert!((e - 5.0 * problem.corners.len() as f64).abs() < 1e-9);
        let w = BarrierWeights { angle: 0.8, vol: 1.2, eps: 1e-4 };
        let x0 = flatten(&jitter(block.vertices(), 0.05, 1));
        let c = check_gradient(|x| {
            let (e, g) = energy_hex_iso(problem.frames(), &unflatten(x), &w);
            (e, flatten(&g))
        }, &x0, x0.len(), 1e-5, 0);
        assert!(c.max_rel_error <= 1e-4, "{}", c.max_rel_error);
    }

    #[test]
    fn prox_identical_and_translated() {
        let block = fixtures::hex_block(2, 2, 2, 0.5);
        let problem = HexProblem::new(&block).unwrap();
        let surf = problem.surface.triangulate();
        let target = TargetSurface::from_surface(&surf).unwrap();
        let samples = target.sample(surf.vertices.len(), 3, 0);
        let e = energy_prox(&surf.vertices, &surf.faces, &target, &samples, 1.0, 1.0).unwrap();
        assert!(e.to_target <= 1e-12 && e.from_target <= 1e-12);
        // parallel planes: a grid patch and its copy translated along the normal
        let n = 4;
        let verts: Vec<Vec3> = (0..=n).flat_map(|j| (0..=n).map(move |i| Vec3::new(i as f64, j as f64, 0.0))).collect();
        let id = |i: usize, j: usize| i + (n + 1) * j;
        let faces: Vec<[usize; 3]> = (0..n)
            .flat_map(|j| (0..n).flat_map(move |i| [[id(i, j), id(i + 1, j), id(i + 1, j + 1)], [id(i, j), id(i + 1, j + 1), id(i, j + 1)]]))
            .collect();
        let t = Vec3::new(0.0, 0.0, 0.3);
        let target = TargetSurface::new(verts.iter().map(|v| v + t).collect(), faces.clone()).unwrap();
        let e = energy_prox(&verts, &faces, &target, &[], 1.0, 0.0).unwrap();
        assert!((e.to_target - verts.len() as f64 * t.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn prox_gradient_fixed_batch() {
        let block = fixtures::hex_block(2, 2, 1, 0.5);
        let problem = HexProblem::new(&block).unwrap();
        let surf = problem.surface.triangulate();
        let target = TargetSurface::from_surface(&surf).unwrap();
        let samples = target.sample(40, 5, 0);
        let moving = jitter(&surf.vertices, 0.08, 2);
        let x0 = flatten(&moving);
        let c = check_gradient(
            |x| {
                let e = energy_prox(&unflatten(x), &surf.faces, &target, &samples, 0.7, 1.3).unwrap();
                (0.7 * e.to_target + 1.3 * e.from_target, flatten(&e.grad))
            },
            &x0,
            x0.len(),
            1e-5,
            0,
        );
        assert!(c.max_rel_error <= 1e-4, "{}", c.max_rel_error);
    }

    #[test]
    fn laplacian_cases() {
        let patch = fixtures::hex_block(4, 4, 1, 1.0);
        let problem = HexProblem::new(&patch).unwrap();
        let s = &problem.surface;
        let pos = s.vertices.clone();
        let (e0, _) = energy_lap(&pos, &problem.neighbors, 1.0).unwrap();
        // displace an interior vertex of the top face
        let v = (0..pos.len()).find(|&v| pos[v] == Vec3::new(2.0, 2.0, 1.0)).unwrap();
        let mut moved = pos.clone();
        let delta = Vec3::new(0.0, 0.0, 0.1);
        moved[v] += delta;
        let (e1, _) = energy_lap(&moved, &problem.neighbors, 2.0).unwrap();
        let mut expect = 1.0;
        for &u in &problem.neighbors[v] {
            expect += 1.0 / (problem.neighbors[u].len() as f64).powi(2);
        }
        assert!((e1 - 2.0 * e0 - 2.0 * delta.norm_squared() * expect).abs() < 1e-12, "{e1} {e0}");
        let shifted: Vec<Vec3> = moved.iter().map(|p| p + Vec3::new(3.0, -1.0, 2.0)).collect();
        assert!((energy_lap(&shifted, &problem.neighbors, 2.0).unwrap().0 - e1).abs() < 1e-10);
        let x0 = flatten(&jitter(&pos, 0.1, 3));
        let c = check_gradient(|x| {
            let (e, g) = energy_lap(&unflatten(x), &problem.neighbors, 1.5).unwrap();
            (e, flatten(&g))
        }, &x0, x0.len(), 1e-5, 0);
        assert!(c.max_rel_error <= 1e-4);
        assert_eq!(energy_lap(&pos[..1], &[vec![]], 1.0), Err(PullbackError::IsolatedVertex(0)));
    }
}
