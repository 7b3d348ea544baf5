//! Stage 1: deform the input tet mesh into a near-PolyCube.
//!
//! Minimizes the volume-weighted barrier distortion plus an alignment energy
//! that pulls boundary normals toward the coordinate axes.

use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};

use crate::distortion::{barrier_energy, BarrierWeights};
use crate::mesh::{TetFrames, TetMesh, TriSurface};
use crate::optim::{self, AdamConfig, AdamState, Control, EnergyReport, LoopOutcome, StepInfo};
use crate::{Mat3, Vec3};

/// Below this length a face normal is not differentiated.
pub const NORMAL_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformWeights {
    pub angle: f64,
    pub vol: f64,
    pub cube: f64,
    pub smooth: f64,
    pub eps: f64,
}

impl Default for DeformWeights {
    fn default() -> Self {
        Self { angle: 1.0, vol: 1.0, cube: 1.0, smooth: 1.0, eps: 1e-3 }
    }
}

impl DeformWeights {
    fn barrier(&self) -> BarrierWeights {
        BarrierWeights { angle: self.angle, vol: self.vol, eps: self.eps }
    }
}

/// Cubeness `Φ(n) = nx²ny² + ny²nz² + nz²nx²`.
#[inline]
pub fn phi(n: &Vec3) -> f64 {
    let (x, y, z) = (n.x * n.x, n.y * n.y, n.z * n.z);
    x * y + y * z + z * x
}

#[inline]
pub fn phi_gradient(n: &Vec3) -> Vec3 {
    let (x, y, z) = (n.x * n.x, n.y * n.y, n.z * n.z);
    Vec3::new(2.0 * n.x * (y + z), 2.0 * n.y * (x + z), 2.0 * n.z * (x + y))
}

/// Unit normal of a triangle and the map from `∂E/∂n̂` to the gradients on
/// its three corners.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FaceNormal {
    pub unit: Vec3,
    e1: Vec3,
    e2: Vec3,
    /// `(I − n̂n̂ᵀ)/‖n‖`, zero inside the guard.
    dn: Mat3,
}

impl FaceNormal {
    pub fn new(a: &Vec3, b: &Vec3, c: &Vec3) -> Self {
        let (e1, e2) = (b - a, c - a);
        let n = e1.cross(&e2);
        let len = n.norm();
        if len > NORMAL_GUARD {
            let unit = n / len;
            Self { unit, e1, e2, dn: (Mat3::identity() - unit * unit.transpose()) / len }
        } else {
            Self { unit: n / NORMAL_GUARD, e1, e2, dn: Mat3::zeros() }
        }
    }

    /// Corner gradients for an upstream gradient `g` on the unit normal.
    pub fn backprop(&self, g: &Vec3) -> [Vec3; 3] {
        let gn = self.dn * g;
        let g1 = self.e2.cross(&gn);
        let g2 = gn.cross(&self.e1);
        [-(g1 + g2), g1, g2]
    }
}

/// Static data for the deformation energies of one input mesh.
#[derive(Clone, Debug)]
pub struct DeformProblem {
    pub frames: TetFrames,
    /// `vol(V₀, t) / vol(M)`.
    pub coeffs: Vec<f64>,
    pub boundary: TriSurface,
    /// `area(V₀, f) / area(∂M₀)`.
    face_coeffs: Vec<f64>,
    /// Adjacent face pairs with `(a_i + a_j) / (3 A)`.
    pairs: Vec<(usize, usize, f64)>,
}

impl DeformProblem {
    pub fn new(mesh: &TetMesh) -> crate::Result<Self> {
        let frames = TetFrames::new(mesh.vertices(), mesh.tets().to_vec())?;
        let total: f64 = frames.rest_volumes().iter().sum();
        let coeffs = frames.rest_volumes().iter().map(|v| v / total).collect();
        let boundary = mesh.boundary()?;
        let areas = boundary.face_areas();
        let area: f64 = areas.iter().sum();
        let face_coeffs = areas.iter().map(|a| a / area).collect();
        let pairs = boundary
            .adjacent_face_pairs()
            .into_iter()
            .map(|(i, j)| (i, j, (areas[i] + areas[j]) / (3.0 * area)))
            .collect();
        Ok(Self { frames, coeffs, boundary, face_coeffs, pairs })
    }

    pub fn vertex_count(&self) -> usize {
        self.frames.tets.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn energy_iso(&self, positions: &[Vec3], w: &DeformWeights) -> (f64, Vec<Vec3>) {
        barrier_energy(&self.frames, positions, Some(&self.coeffs), &w.barrier())
    }

    fn normals(&self, positions: &[Vec3]) -> Vec<FaceNormal> {
        let vi = &self.boundary.volume_index;
        self.boundary
            .faces
            .iter()
            .map(|f| FaceNormal::new(&positions[vi[f[0]]], &positions[vi[f[1]]], &positions[vi[f[2]]]))
            .collect()
    }

    /// `(E_cube, E_smooth)` and the gradient of `λ_cube E_cube + λ_smooth E_smooth`.
    pub fn energy_align(&self, positions: &[Vec3], w: &DeformWeights) -> (f64, f64, Vec<Vec3>) {
        let normals = self.normals(positions);
        let mut g_unit = vec![Vec3::zeros(); normals.len()];
        let mut cube = 0.0;
        for (f, n) in normals.iter().enumerate() {
            cube += self.face_coeffs[f] * phi(&n.unit);
            g_unit[f] += w.cube * self.face_coeffs[f] * phi_gradient(&n.unit);
        }
        let mut smooth = 0.0;
        for &(i, j, c) in &self.pairs {
            let d = normals[i].unit - normals[j].unit;
            smooth += c * d.norm_squared();
            g_unit[i] += 2.0 * w.smooth * c * d;
            g_unit[j] -= 2.0 * w.smooth * c * d;
        }
        let mut grad = vec![Vec3::zeros(); positions.len()];
        let vi = &self.boundary.volume_index;
        for (f, face) in self.boundary.faces.iter().enumerate() {
            let g = normals[f].backprop(&g_unit[f]);
            for k in 0..3 {
                grad[vi[face[k]]] += g[k];
            }
        }
        (cube, smooth, grad)
    }

    /// Total energy with breakdown `iso`, `cube`, `smooth` (weighted).
    pub fn energy(&self, positions: &[Vec3], w: &DeformWeights) -> (EnergyReport, Vec<Vec3>) {
        let (iso, mut grad) = self.energy_iso(positions, w);
        let (cube, smooth, g_align) = self.energy_align(positions, w);
        for (g, a) in grad.iter_mut().zip(&g_align) {
            *g += a;
        }
        (EnergyReport::from_terms(0, [("iso", iso), ("cube", w.cube * cube), ("smooth", w.smooth * smooth)]), grad)
    }
}

/// Deformation stage state: the map `f_d` as vertex positions plus optimizer
/// moments so runs can be resumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationState {
    pub positions: Vec<Vec3>,
    pub weights: DeformWeights,
    pub adam: AdamState,
    pub steps_done: usize,
}

impl DeformationState {
    /// Identity map.
    pub fn new(mesh: &TetMesh, weights: DeformWeights) -> Self {
        let n = mesh.vertices().len();
        Self { positions: mesh.vertices().to_vec(), weights, adam: AdamState::new(3 * n, AdamConfig::default()), steps_done: 0 }
    }
}

/// Admissibility test for a deformation of `frames`: every `det J > 0`, or,
/// when the start is already inverted, no more inverted tets than at start.
pub fn inversion_guard<'a>(frames: &'a TetFrames, start: &[Vec3]) -> impl FnMut(&mut [f64]) -> bool + 'a {
    let initial = frames.inverted(start).len();
    move |x: &mut [f64]| {
        let pos = optim::unflatten(x);
        if initial == 0 {
            (0..frames.len()).all(|t| frames.jacobian(t, &pos).determinant() > 0.0)
        } else {
            frames.inverted(&pos).len() <= initial
        }
    }
}

/// Run `n_steps` of the deformation optimizer. `weights` is read at every
/// step so callers may change it between steps through the callback.
pub fn deform_step_run<C>(
    state: &mut DeformationState,
    problem: &DeformProblem,
    n_steps: usize,
    cancel: Option<&AtomicBool>,
    mut callback: C,
) -> crate::Result<LoopOutcome>
where
    C: FnMut(&StepInfo, &mut DeformWeights) -> Control,
{
    let mut x = optim::flatten(&state.positions);
    let weights = std::cell::Cell::new(state.weights);
    let start = state.positions.clone();
    let out = optim::run_loop(
        &mut state.adam,
        &mut x,
        n_steps,
        |x| {
            let (report, g) = problem.energy(&optim::unflatten(x), &weights.get());
            Ok((report, optim::flatten(&g)))
        },
        inversion_guard(&problem.frames, &start),
        cancel,
        |info| {
            let mut w = weights.get();
            let c = callback(info, &mut w);
            weights.set(w);
            c
        },
    )?;
    state.positions = optim::unflatten(&x);
    state.weights = weights.get();
    state.steps_done += out.history.len();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::{Rng, SeedableRng};

    #[test]
    fn phi_values() {
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = 1.0;
            assert_eq!(phi(&e), 0.0);
            assert_eq!(phi(&-e), 0.0);
        }
        assert!((phi(&Vec3::repeat(1.0).normalize()) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn axis_cube_has_zero_cubeness() {
        let mesh = fixtures::cube_tet_mesh(2, 1.0);
        let p = DeformProblem::new(&mesh).unwrap();
        let (cube, smooth, _) = p.energy_align(mesh.vertices(), &DeformWeights::default());
        assert!(cube.abs() < 1e-30);
        // normals differ only across cube edges
        assert!(smooth > 0.0);
    }

    #[test]
    fn identity_iso_energy_is_five() {
        let mesh = fixtures::cube_tet_mesh(2, 1.0);
        let p = DeformProblem::new(&mesh).unwrap();
        let w = DeformWeights { eps: 1e-12, ..Default::default() };
        let (e, g) = p.energy_iso(mesh.vertices(), &w);
        assert!((e - 5.0).abs() < 1e-9);
        assert!(g.iter().all(|v| v.norm() < 1e-9));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mesh = fixtures::cube_tet_mesh(2, 1.0);
        let p = DeformProblem::new(&mesh).unwrap();
        let w = DeformWeights { angle: 0.8, vol: 1.2, cube: 2.0, smooth: 0.7, eps: 1e-2 };
        let x0: Vec<f64> = optim::flatten(mesh.vertices()).iter().map(|v| v + rng.random_range(-0.03..0.03)).collect();
        let check = optim::check_gradient(
            |x| {
                let (r, g) = p.energy(&optim::unflatten(x), &w);
                (r.total, optim::flatten(&g))
            },
            &x0,
            200,
            1e-5,
            1,
        );
        assert!(check.max_rel_error <= 1e-4, "{}", check.max_rel_error);
    }

    #[test]
    fn translation_invariance() {
        let mesh = fixtures::l_shape_tet_mesh(1, 1.0);
        let p = DeformProblem::new(&mesh).unwrap();
        let w = DeformWeights::default();
        let moved: Vec<Vec3> = mesh.vertices().iter().map(|v| v + Vec3::new(3.0, -1.0, 0.5)).collect();
        let (a, _) = p.energy(mesh.vertices(), &w);
        let (b, _) = p.energy(&moved, &w);
        assert!((a.total - b.total).abs() < 1e-10);
    }

    #[test]
    fn no_cubeness_identity_is_stationary() {
        let mesh = fixtures::cube_tet_mesh(2, 1.0);
        let p = DeformProblem::new(&mesh).unwrap();
        // with ε > 0 the identity is only stationary up to O(ε²), which Adam's
        // normalized steps would amplify
        let mut s = DeformationState::new(&mesh, DeformWeights { cube: 0.0, smooth: 0.0, eps: 1e-12, ..Default::default() });
        deform_step_run(&mut s, &p, 100, None, |_, _| Control::Continue).unwrap();
        let moved = s.positions.iter().zip(mesh.vertices()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(moved < 1e-6, "{moved}");
    }

    #[test]
    fn smooth_weight_on_single_tet() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(0.2, 0.3, 0.9)];
        let mesh = TetMesh::new(v.clone(), vec![[0, 1, 2, 3]]).unwrap();
        let p = DeformProblem::new(&mesh).unwrap();
        let (_, smooth, _) = p.energy_align(&v, &DeformWeights::default());
        // brute force over face pairs sharing two vertices
        let faces: Vec<[usize; 3]> = crate::mesh::TET_FACES.to_vec();
        let area = |f: &[usize; 3]| crate::mesh::triangle_area(&v[f[0]], &v[f[1]], &v[f[2]]);
        let normal = |f: &[usize; 3]| (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]])).normalize();
        let total: f64 = faces.iter().map(area).sum();
        let mut expect = 0.0;
        for i in 0..4 {
            for j in i + 1..4 {
                let shared = faces[i].iter().filter(|a| faces[j].contains(a)).count();
                if shared == 2 {
                    expect += (area(&faces[i]) + area(&faces[j])) / (3.0 * total) * (normal(&faces[i]) - normal(&faces[j])).norm_squared();
                }
            }
        }
        assert!((smooth - expect).abs() < 1e-14);
    }
}
