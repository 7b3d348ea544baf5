//! Stage 4a: two-phase inversion-free pullback of the voxel hex mesh.
//!
//! Phase 1 deforms the voxel mesh onto the deformed near-PolyCube surface.
//! Phase 2 pulls it back toward the input shape, guided by the barycentric
//! pullback of each vertex through the deformation map.

mod energy;

use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deform::inversion_guard;
use crate::distortion::BarrierWeights;
use crate::geom::TetIndex;
use crate::optim::{self, AdamConfig, AdamState, Control, EnergyReport, LoopOutcome, StepInfo};
use crate::Vec3;

pub use energy::{energy_hex_iso, energy_lap, energy_prox, HexProblem, ProxEnergy, TargetSurface};

/// Default learning rate in the hexahedralization stage.
pub const HEX_LR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PullbackError {
    #[error("surface vertex {0} has no neighbors")]
    IsolatedVertex(usize),
    #[error("phase 2 needs pull targets; run phase 1 first")]
    MissingTargets,
    #[error("expected {expected} vertices, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error("the starting hex mesh has an inverted corner tet (min det {0:e})")]
    InvertedStart(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PullbackWeights {
    pub angle: f64,
    pub vol: f64,
    /// Moving surface vertices toward the target surface.
    pub to_target: f64,
    /// Target surface samples toward the moving surface.
    pub from_target: f64,
    pub lap: f64,
    pub pullback: f64,
    pub eps: f64,
}

impl Default for PullbackWeights {
    fn default() -> Self {
        Self { angle: 1.0, vol: 1.0, to_target: 1.0, from_target: 1.0, lap: 1.0, pullback: 1.0, eps: 1e-4 }
    }
}

impl PullbackWeights {
    pub fn barrier(&self) -> BarrierWeights {
        BarrierWeights { angle: self.angle, vol: self.vol, eps: self.eps }
    }
}

/// Both phases' positions, targets and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackState {
    pub weights: PullbackWeights,
    /// Seed of the per-step target resampling stream.
    pub seed: u64,
    /// Phase 1 result, starting at the voxel positions.
    pub dprime: Vec<Vec3>,
    pub phase1_adam: AdamState,
    pub phase1_steps: usize,
    /// Cached once when phase 2 starts.
    pub targets: Option<Vec<Vec3>>,
    /// Phase 2 result.
    pub positions: Option<Vec<Vec3>>,
    pub phase2_adam: AdamState,
    pub phase2_steps: usize,
}

impl PullbackState {
    pub fn new(voxel_positions: Vec<Vec3>, weights: PullbackWeights, seed: u64) -> Self {
        let n = 3 * voxel_positions.len();
        Self {
            weights,
            seed,
            dprime: voxel_positions,
            phase1_adam: AdamState::new(n, AdamConfig::with_lr(HEX_LR)),
            phase1_steps: 0,
            targets: None,
            positions: None,
            phase2_adam: AdamState::new(n, AdamConfig::with_lr(HEX_LR)),
            phase2_steps: 0,
        }
    }

    /// Latest positions: phase 2 if started, else phase 1.
    pub fn current(&self) -> &[Vec3] {
        self.positions.as_deref().unwrap_or(&self.dprime)
    }
}

fn check_start(problem: &HexProblem, x: &[Vec3]) -> crate::Result<()> {
    if x.len() != problem.n_vertices {
        return Err(PullbackError::VertexCount { expected: problem.n_vertices, got: x.len() }.into());
    }
    let m = problem.min_det(x);
    if !(m > 0.0) {
        return Err(PullbackError::InvertedStart(m).into());
    }
    Ok(())
}

/// Phase 1 energy at `positions`: distortion, proximity to `target` with
/// `stream` selecting the target sample batch, and surface smoothness.
pub fn phase1_energy(
    problem: &HexProblem,
    target: &TargetSurface,
    w: &PullbackWeights,
    positions: &[Vec3],
    seed: u64,
    stream: u64,
) -> crate::Result<(EnergyReport, Vec<Vec3>)> {
    let (iso, mut grad) = energy_hex_iso(problem.frames(), positions, &w.barrier());
    let surf = problem.surface_positions(positions);
    let samples = target.sample(surf.len(), seed, stream);
    let prox = energy_prox(&surf, &problem.tri_faces, target, &samples, w.to_target, w.from_target)?;
    let (lap, lap_grad) = energy_lap(&surf, &problem.neighbors, w.lap)?;
    let surface_grad: Vec<Vec3> = prox.grad.iter().zip(&lap_grad).map(|(a, b)| a + b).collect();
    problem.scatter_surface(&mut grad, &surface_grad);
    let report = EnergyReport::from_terms(
        0,
        [
            ("iso", iso),
            ("to_target", w.to_target * prox.to_target),
            ("from_target", w.from_target * prox.from_target),
            ("lap", lap),
        ],
    );
    Ok((report, grad))
}

/// Deform the voxel mesh toward the deformed surface `target`. Every accepted
/// iterate keeps all corner tets positive.
pub fn phase1_deform_to_md<C>(
    state: &mut PullbackState,
    problem: &HexProblem,
    target: &TargetSurface,
    n_steps: usize,
    cancel: Option<&AtomicBool>,
    mut callback: C,
) -> crate::Result<LoopOutcome>
where
    C: FnMut(&StepInfo, &mut PullbackWeights) -> Control,
{
    check_start(problem, &state.dprime)?;
    let mut x = optim::flatten(&state.dprime);
    let weights = std::cell::Cell::new(state.weights);
    let start = state.dprime.clone();
    let stream = std::cell::Cell::new(state.phase1_steps as u64);
    let seed = state.seed;
    let out = optim::run_loop(
        &mut state.phase1_adam,
        &mut x,
        n_steps,
        |x| {
            let s = stream.get();
            stream.set(s + 1);
            let (report, g) = phase1_energy(problem, target, &weights.get(), &optim::unflatten(x), seed, s)?;
            Ok((report, optim::flatten(&g)))
        },
        inversion_guard(problem.frames(), &start),
        cancel,
        |info| {
            let mut w = weights.get();
            let c = callback(info, &mut w);
            weights.set(w);
            c
        },
    )?;
    state.dprime = optim::unflatten(&x);
    state.weights = weights.get();
    state.phase1_steps += out.history.len();
    Ok(out)
}

/// Project each point to the closest tet of the deformed mesh and map its
/// barycentric coordinates onto the same tet of the input mesh.
pub fn compute_pull_targets(points: &[Vec3], deformed: &TetIndex, input_positions: &[Vec3]) -> Vec<Vec3> {
    use rayon::prelude::*;
    points
        .par_iter()
        .map(|p| {
            let r = deformed.project(p);
            deformed.interpolate(r.element, &r.weights, input_positions)
        })
        .collect()
}

/// Phase 2 energy: distortion, distance to the fixed pull targets, and
/// surface smoothness.
pub fn phase2_energy(
    problem: &HexProblem,
    targets: &[Vec3],
    w: &PullbackWeights,
    positions: &[Vec3],
) -> crate::Result<(EnergyReport, Vec<Vec3>)> {
    let (iso, mut grad) = energy_hex_iso(problem.frames(), positions, &w.barrier());
    let mut pull = 0.0;
    for ((g, p), t) in grad.iter_mut().zip(positions).zip(targets) {
        let d = p - t;
        pull += d.norm_squared();
        *g += d * (2.0 * w.pullback);
    }
    let surf = problem.surface_positions(positions);
    let (lap, lap_grad) = energy_lap(&surf, &problem.neighbors, w.lap)?;
    problem.scatter_surface(&mut grad, &lap_grad);
    let report = EnergyReport::from_terms(0, [("iso", iso), ("pullback", w.pullback * pull), ("lap", lap)]);
    Ok((report, grad))
}

/// Start phase 2 from the phase 1 result with targets computed from it once.
pub fn start_phase2(state: &mut PullbackState, deformed: &TetIndex, input_positions: &[Vec3]) {
    state.targets = Some(compute_pull_targets(&state.dprime, deformed, input_positions));
    state.positions = Some(state.dprime.clone());
    state.phase2_adam = AdamState::new(3 * state.dprime.len(), AdamConfig::with_lr(HEX_LR));
    state.phase2_steps = 0;
}

/// Deform toward the cached pull targets. Requires [`start_phase2`].
pub fn phase2_deform_to_m0<C>(
    state: &mut PullbackState,
    problem: &HexProblem,
    n_steps: usize,
    cancel: Option<&AtomicBool>,
    mut callback: C,
) -> crate::Result<LoopOutcome>
where
    C: FnMut(&StepInfo, &mut PullbackWeights) -> Control,
{
    let (Some(targets), Some(start)) = (state.targets.as_ref(), state.positions.as_ref()) else {
        return Err(PullbackError::MissingTargets.into());
    };
    check_start(problem, start)?;
    let mut x = optim::flatten(start);
    let weights = std::cell::Cell::new(state.weights);
    let out = optim::run_loop(
        &mut state.phase2_adam,
        &mut x,
        n_steps,
        |x| {
            let (report, g) = phase2_energy(problem, targets, &weights.get(), &optim::unflatten(x))?;
            Ok((report, optim::flatten(&g)))
        },
        inversion_guard(problem.frames(), start),
        cancel,
        |info| {
            let mut w = weights.get();
            let c = callback(info, &mut w);
            weights.set(w);
            c
        },
    )?;
    state.positions = Some(optim::unflatten(&x));
    state.weights = weights.get();
    state.phase2_steps += out.history.len();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::mesh::TetMesh;
    use rand::{Rng, SeedableRng};

    fn cube_setup() -> (HexProblem, TargetSurface, Vec<Vec3>) {
        let hex = fixtures::hex_block(4, 4, 4, 0.25);
        let shift = Vec3::repeat(0.5);
        let hex = hex.with_positions(hex.vertices().iter().map(|p| p - shift).collect());
        let problem = HexProblem::new(&hex).unwrap();
        let tets = fixtures::cube_tet_mesh(2, 1.0);
        let target = TargetSurface::from_surface(&tets.boundary().unwrap()).unwrap();
        (problem, target, hex.vertices().to_vec())
    }

    #[test]
    fn phase1_identity_is_nearly_stationary_without_smoothing() {
        let (problem, target, pos) = cube_setup();
        let exact = PullbackWeights { lap: 0.0, eps: 1e-12, ..Default::default() };
        let (_, g) = phase1_energy(&problem, &target, &exact, &pos, 0, 0).unwrap();
        let gmax = g.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(gmax < 1e-6 * 0.25, "{gmax}");
        let w = PullbackWeights { lap: 0.0, ..Default::default() };
        let mut state = PullbackState::new(pos.clone(), w, 0);
        phase1_deform_to_md(&mut state, &problem, &target, 100, None, |_, _| Control::Continue).unwrap();
        let moved = state.dprime.iter().zip(&pos).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(moved < 1e-3 * 0.25, "{moved}");
    }

    #[test]
    fn phase1_reaches_larger_cube_without_inversion() {
        let (problem, _, pos) = cube_setup();
        let big = fixtures::cube_tet_mesh(2, 1.04);
        let target = TargetSurface::from_surface(&big.boundary().unwrap()).unwrap();
        let mut state = PullbackState::new(pos, PullbackWeights::default(), 1);
        let mut min_det = f64::INFINITY;
        let out = phase1_deform_to_md(&mut state, &problem, &target, 800, None, |info, _| {
            min_det = min_det.min(problem.min_det(&optim::unflatten(info.params)));
            Control::Continue
        })
        .unwrap();
        assert!(min_det > 0.0);
        assert_eq!(out.history.len(), 800);
        let dist = state.dprime.iter().map(|p| (p.amax() - 0.52).abs()).fold(f64::INFINITY, f64::min);
        // the barrier resists the uniform stretch, so the gap only partly closes
        assert!(dist < 0.015, "{dist}");
        let reach = state.dprime.iter().map(|p| p.amax()).fold(0.0, f64::max);
        assert!(reach > 0.5 + 1e-3, "{reach}");
        let first = out.history[0].term("to_target");
        let last = out.history[799].term("to_target");
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn pull_targets_match_reference() {
        let input = fixtures::l_shape_tet_mesh(2, 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let deformed_pos: Vec<Vec3> = input.vertices().iter().map(|p| p * 1.3 + Vec3::new(0.1, 0.0, -0.2)).collect();
        let deformed = TetMesh::new(deformed_pos.clone(), input.tets().to_vec()).unwrap();
        let index = TetIndex::new(&deformed).unwrap();
        // vertices map to input vertices
        let t = compute_pull_targets(&deformed_pos, &index, input.vertices());
        for (a, b) in t.iter().zip(input.vertices()) {
            assert!((a - b).norm() < 1e-12);
        }
        // interior points: brute-force locate
        for _ in 0..200 {
            let p = Vec3::from_fn(|_, _| rng.random_range(-0.6..0.6));
            let got = compute_pull_targets(&[p], &index, input.vertices())[0];
            let expect = (0..input.tets().len()).find_map(|k| {
                let w = index.barycentric(k, &p);
                w.iter().all(|&x| x >= -1e-12).then(|| index.interpolate(k, &w, input.vertices()))
            });
            match expect {
                Some(e) => assert!((got - e).norm() < 1e-9),
                None => assert!(!index.contains(&p)),
            }
        }
        // identity deformation: pull = projection
        let same = TetIndex::new(&input).unwrap();
        let q = Vec3::new(2.0, 0.1, 0.0);
        let got = compute_pull_targets(&[q], &same, input.vertices())[0];
        assert!((got - same.project(&q).point).norm() < 1e-12);
    }

    #[test]
    fn phase2_targets_at_current_positions_are_stable() {
        let (problem, _, pos) = cube_setup();
        let mut state = PullbackState::new(pos.clone(), PullbackWeights { lap: 0.0, eps: 1e-12, ..Default::default() }, 0);
        state.targets = Some(pos.clone());
        state.positions = Some(pos.clone());
        let (_, g) = phase2_energy(&problem, &pos, &state.weights, &pos).unwrap();
        assert!(g.iter().all(|v| v.norm() < 1e-9));
        phase2_deform_to_m0(&mut state, &problem, 50, None, |_, _| Control::Continue).unwrap();
        let moved = state.positions.unwrap().iter().zip(&pos).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(moved < 1e-6, "{moved}");
        let mut empty = PullbackState::new(pos, PullbackWeights::default(), 0);
        assert!(phase2_deform_to_m0(&mut empty, &problem, 1, None, |_, _| Control::Continue).is_err());
    }

    #[test]
    fn phase_energy_gradients() {
        let (problem, target, pos) = cube_setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pos: Vec<Vec3> = pos.iter().map(|p| p + Vec3::from_fn(|_, _| rng.random_range(-0.02..0.02))).collect();
        let w = PullbackWeights { angle: 0.9, vol: 1.1, to_target: 0.8, from_target: 1.2, lap: 0.5, pullback: 1.3, eps: 1e-4 };
        let x0 = optim::flatten(&pos);
        let c = optim::check_gradient(
            |x| {
                let (r, g) = phase1_energy(&problem, &target, &w, &optim::unflatten(x), 3, 7).unwrap();
                (r.total, optim::flatten(&g))
            },
            &x0,
            200,
            1e-5,
            1,
        );
        assert!(c.max_rel_error <= 1e-4, "{}", c.max_rel_error);
        let targets: Vec<Vec3> = pos.iter().map(|p| p * 1.1).collect();
        let c = optim::check_gradient(
            |x| {
                let (r, g) = phase2_energy(&problem, &targets, &w, &optim::unflatten(x)).unwrap();
                (r.total, optim::flatten(&g))
            },
            &x0,
            200,
            1e-5,
            2,
        );
        assert!(c.max_rel_error <= 1e-4, "{}", c.max_rel_error);
    }
}
