//! Stage 4b: element quality against surface fidelity.
//!
//! The final energy is distortion (average or worst-element), proximity to
//! the input surface in both directions, surface smoothness and an optional
//! scaled-Jacobian term. Surface vertices are free, constrained to the input
//! surface through latent points, or fixed; landmarks are pinned in every
//! mode.

mod metrics;

use std::collections::BTreeMap;
use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distortion::BarrierWeights;
use crate::optim::{self, AdamConfig, AdamState, Control, EnergyReport, LoopOutcome, StepInfo};
use crate::pullback::{energy_hex_iso, energy_lap, energy_prox, HexProblem, TargetSurface, HEX_LR};
use crate::{Mat3, Vec3};

pub use metrics::{
    corner_scaled_jacobians, corner_tets, energy_custom_scaled_jacobian, energy_hex_lse, filter_elements, hausdorff,
    hex_scaled_jacobians, report_quality, scaled_jacobian, scaled_jacobian_grad, ElementFilter, Hausdorff, QualityReport,
    COLUMN_GUARD, DEFAULT_REPORT_SAMPLES,
};

pub const DEFAULT_QUALITY_STEPS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("{0} inverted corner tets; the worst-element energy needs an inversion-free mesh, optimize in average mode first")]
    InvertedElements(usize),
    #[error("the starting hex mesh has an inverted corner tet (min det {0:e})")]
    InvertedStart(f64),
    #[error("vertex {0} is not a surface vertex")]
    NotSurfaceVertex(usize),
    #[error("expected {expected} vertices, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error("weight `{0}` must be finite and non-negative")]
    NegativeWeight(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityWeights {
    /// Smoothness.
    pub lap: f64,
    /// Projection: hex surface toward the input surface.
    pub to_input: f64,
    /// Details: input surface samples toward the hex surface.
    pub from_input: f64,
    /// Conformal.
    pub angle: f64,
    /// Authalic.
    pub vol: f64,
    pub custom: f64,
    pub eps: f64,
    /// Smooth maximum instead of the sum for the distortion term.
    pub worst_distortion: bool,
    /// Smooth maximum instead of the sum for the custom term.
    pub worst_custom: bool,
}

impl Default for QualityWeights {
    fn default() -> Self {
        Self {
            lap: 1.0,
            to_input: 1.0,
            from_input: 1.0,
            angle: 1.0,
            vol: 1.0,
            custom: 0.0,
            eps: 1e-4,
            worst_distortion: false,
            worst_custom: false,
        }
    }
}

impl QualityWeights {
    pub fn barrier(&self) -> BarrierWeights {
        BarrierWeights { angle: self.angle, vol: self.vol, eps: self.eps }
    }

    pub fn validate(&self) -> Result<(), QualityError> {
        for (name, v) in [
            ("lap", self.lap),
            ("to_input", self.to_input),
            ("from_input", self.from_input),
            ("angle", self.angle),
            ("vol", self.vol),
            ("custom", self.custom),
            ("eps", self.eps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(QualityError::NegativeWeight(name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceMode {
    #[default]
    Free,
    /// Surface vertices are the closest points on the input surface of
    /// latent points.
    Constrained,
    Fixed,
}

/// Pinned positions of surface vertices, keyed by volume vertex id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet(pub BTreeMap<usize, Vec3>);

impl LandmarkSet {
    pub fn pin(&mut self, vertex: usize, position: Vec3) {
        self.0.insert(vertex, position);
    }

    pub fn unpin(&mut self, vertex: usize) -> Option<Vec3> {
        self.0.remove(&vertex)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, problem: &HexProblem) -> Result<(), QualityError> {
        let surface = problem.is_surface();
        match self.0.keys().find(|&&v| !surface.get(v).copied().unwrap_or(false)) {
            Some(&v) => Err(QualityError::NotSurfaceVertex(v)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityState {
    pub weights: QualityWeights,
    pub mode: SurfaceMode,
    pub landmarks: LandmarkSet,
    pub positions: Vec<Vec3>,
    /// Latent points of the surface vertices (surface order), constrained
    /// mode only.
    pub latents: Option<Vec<Vec3>>,
    pub adam: AdamState,
    /// Mode the optimizer moments belong to.
    pub adam_mode: SurfaceMode,
    pub steps: usize,
    /// Seed of the per-step input surface samples.
    pub seed: u64,
}

impl QualityState {
    pub fn new(positions: Vec<Vec3>, weights: QualityWeights, seed: u64) -> Self {
        let n = 3 * positions.len();
        Self {
            weights,
            mode: SurfaceMode::Free,
            landmarks: LandmarkSet::default(),
            positions,
            latents: None,
            adam: AdamState::new(n, AdamConfig::with_lr(HEX_LR)),
            adam_mode: SurfaceMode::Free,
            steps: 0,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QualityOutcome {
    pub run: LoopOutcome,
    /// Landmarks incident to a corner tet that was inverted at the start.
    pub landmark_inversions: Vec<usize>,
}

/// How parameters map to vertex positions.
struct Parameterization<'a> {
    problem: &'a HexProblem,
    input: &'a TargetSurface,
    mode: SurfaceMode,
    landmarks: &'a LandmarkSet,
    /// Surface positions at the start, kept in fixed mode.
    start_surface: Vec<Vec3>,
}

/// Closest point of a latent on the input and the supporting-plane
/// projector used as its Jacobian.
struct Latent {
    q: Vec3,
    projector: Mat3,
}

impl Parameterization<'_> {
    fn realize(&self, x: &[f64]) -> (Vec<Vec3>, Vec<Option<Latent>>) {
        let mut pos = optim::unflatten(x);
        let mut latents = Vec::new();
        if self.mode == SurfaceMode::Constrained {
            latents = self
                .problem
                .surface
                .volume_index
                .iter()
                .map(|&v| {
                    if self.landmarks.0.contains_key(&v) {
                        return None;
                    }
                    let r = self.input.index.project(&pos[v]);
                    let tri = self.input.index.triangle(r.element).expect("projection hits a valid triangle");
                    Some(Latent { q: r.point, projector: tri.plane_projector() })
                })
                .collect();
            for (s, &v) in self.problem.surface.volume_index.iter().enumerate() {
                if let Some(l) = &latents[s] {
                    pos[v] = l.q;
                }
            }
        }
        for (&v, p) in &self.landmarks.0 {
            pos[v] = *p;
        }
        (pos, latents)
    }

    /// Reset frozen parameters in place.
    fn freeze(&self, x: &mut [f64]) {
        let mut set = |v: usize, p: &Vec3| x[3 * v..3 * v + 3].copy_from_slice(p.as_slice());
        if self.mode == SurfaceMode::Fixed {
            for (&v, p) in self.problem.surface.volume_index.iter().zip(&self.start_surface) {
                set(v, p);
            }
        }
        for (&v, p) in &self.landmarks.0 {
            set(v, p);
        }
    }
}

/// Final energy at realized `positions`, with the gradient with respect to
/// the positions. `latent_x` holds the raw latent points in constrained
/// mode.
fn quality_energy(
    problem: &HexProblem,
    input: &TargetSurface,
    w: &QualityWeights,
    positions: &[Vec3],
    constrained: Option<(&[Vec3], &[Option<Latent>])>,
    samples: &[Vec3],
) -> crate::Result<(EnergyReport, Vec<Vec3>)> {
    let (iso, mut grad) = if w.worst_distortion {
        energy_hex_lse(problem.frames(), positions, &w.barrier())?
    } else {
        energy_hex_iso(problem.frames(), positions, &w.barrier())
    };
    let surf = problem.surface_positions(positions);
    let w_to = if constrained.is_some() { 0.0 } else { w.to_input };
    let prox = energy_prox(&surf, &problem.tri_faces, input, samples, w_to, w.from_input)?;
    let (lap, lap_grad) = energy_lap(&surf, &problem.neighbors, w.lap)?;
    let surface_grad: Vec<Vec3> = prox.grad.iter().zip(&lap_grad).map(|(a, b)| a + b).collect();
    problem.scatter_surface(&mut grad, &surface_grad);
    let mut custom = 0.0;
    if w.custom != 0.0 {
        let tets = &problem.frames().tets;
        let (e, g) = energy_custom_scaled_jacobian(positions, tets, w.custom, w.worst_custom);
        custom = e;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let to_input = match constrained {
        None => w.to_input * prox.to_target,
        Some((z, latents)) => {
            let mut anchor = 0.0;
            for (s, l) in latents.iter().enumerate() {
                if let Some(l) = l {
                    let v = problem.surface.volume_index[s];
                    let r = z[s] - l.q;
                    anchor += r.norm_squared();
                    grad[v] = l.projector * grad[v] + r * (2.0 * w.to_input);
                }
            }
            w.to_input * anchor
        }
    };
    let report = EnergyReport::from_terms(
        0,
        [("iso", iso), ("to_input", to_input), ("from_input", w.from_input * prox.from_target), ("lap", lap), ("custom", custom)],
    );
    Ok((report, grad))
}

/// Run `n_steps` of quality optimization from `state.positions`. Every
/// accepted iterate keeps all corner tets positive (or, when pinned
/// landmarks invert some at the start, never increases their number).
pub fn optimize_quality<C>(
    state: &mut QualityState,
    problem: &HexProblem,
    input: &TargetSurface,
    n_steps: usize,
    cancel: Option<&AtomicBool>,
    mut callback: C,
) -> crate::Result<QualityOutcome>
where
    C: FnMut(&StepInfo, &mut QualityWeights) -> Control,
{
    if state.positions.len() != problem.n_vertices {
        return Err(QualityError::VertexCount { expected: problem.n_vertices, got: state.positions.len() }.into());
    }
    state.weights.validate()?;
    state.landmarks.validate(problem)?;
    let n_surface = problem.surface.volume_index.len();
    if state.mode == SurfaceMode::Constrained && state.latents.as_ref().is_none_or(|z| z.len() != n_surface) {
        state.latents = Some(problem.surface_positions(&state.positions));
    }
    if state.adam_mode != state.mode || state.adam.len() != 3 * problem.n_vertices {
        state.adam = AdamState::new(3 * problem.n_vertices, AdamConfig::with_lr(HEX_LR));
        state.adam_mode = state.mode;
    }

    let param = Parameterization {
        problem,
        input,
        mode: state.mode,
        landmarks: &state.landmarks,
        start_surface: problem.surface_positions(&state.positions),
    };
    let mut start = state.positions.clone();
    if let Some(z) = &state.latents {
        if state.mode == SurfaceMode::Constrained {
            for (&v, p) in problem.surface.volume_index.iter().zip(z) {
                start[v] = *p;
            }
        }
    }
    let mut x = optim::flatten(&start);
    param.freeze(&mut x);

    let frames = problem.frames();
    let (realized, _) = param.realize(&x);
    let inverted = frames.inverted(&realized);
    let mut landmark_inversions = Vec::new();
    if !inverted.is_empty() {
        let pinned: std::collections::BTreeSet<usize> = inverted
            .iter()
            .flat_map(|&t| frames.tets[t])
            .filter(|v| state.landmarks.0.contains_key(v))
            .collect();
        if pinned.is_empty() {
            return Err(QualityError::InvertedStart(frames.min_determinant(&realized)).into());
        }
        landmark_inversions = pinned.into_iter().collect();
        log::warn!("landmarks {landmark_inversions:?} invert {} corner tets", inverted.len());
    }
    let allowed = inverted.len();

    let weights = std::cell::Cell::new(state.weights);
    let stream = std::cell::Cell::new(state.steps as u64);
    let seed = state.seed;
    let run = optim::run_loop(
        &mut state.adam,
        &mut x,
        n_steps,
        |x| {
            let w = weights.get();
            let s = stream.get();
            stream.set(s + 1);
            let (pos, latents) = param.realize(x);
            let samples = input.sample(n_surface, seed, s);
            let z;
            let constrained = if param.mode == SurfaceMode::Constrained {
                z = problem.surface_positions(&optim::unflatten(x));
                Some((&z[..], &latents[..]))
            } else {
                None
            };
            let (report, mut g) = quality_energy(problem, input, &w, &pos, constrained, &samples)?;
            if param.mode == SurfaceMode::Fixed {
                for &v in &problem.surface.volume_index {
                    g[v] = Vec3::zeros();
                }
            }
            for &v in param.landmarks.0.keys() {
                g[v] = Vec3::zeros();
            }
            Ok((report, optim::flatten(&g)))
        },
        |x: &mut [f64]| {
            param.freeze(x);
            let (pos, _) = param.realize(x);
            if allowed == 0 {
                (0..frames.len()).all(|t| frames.jacobian(t, &pos).determinant() > 0.0)
            } else {
                frames.inverted(&pos).len() <= allowed
            }
        },
        cancel,
        |info| {
            let mut w = weights.get();
            let c = callback(info, &mut w);
            weights.set(w);
            c
        },
    )?;
    let (pos, _) = param.realize(&x);
    state.positions = pos;
    if state.mode == SurfaceMode::Constrained {
        state.latents = Some(problem.surface_positions(&optim::unflatten(&x)));
    }
    state.weights = weights.get();
    state.steps += run.history.len();
    Ok(QualityOutcome { run, landmark_inversions })
}
