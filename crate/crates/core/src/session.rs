//! Full pipeline state and the stage operations that advance it.
//!
//! A [`Session`] owns the normalized input and every stage artifact. Running
//! a stage discards the artifacts downstream of it, so the cursor only ever
//! points past completed upstream work.

use std::path::Path;
use std::sync::atomic::AtomicBool;

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::deform::{deform_step_run, DeformProblem, DeformWeights, DeformationState};
use crate::geom::TetIndex;
use crate::io::{self, IoError, Normalization};
use crate::mesh::{bbox_diagonal, HexMesh, TetMesh};
use crate::optim::{Control, LoopOutcome, StepInfo};
use crate::polycube::{self, AddMode, Cuboid, FitOptions, PolyCube};
use crate::pullback::{self, HexProblem, PullbackState, PullbackWeights, TargetSurface};
use crate::quality::{self, LandmarkSet, QualityOutcome, QualityReport, QualityState, QualityWeights, SurfaceMode};
use crate::voxel::{self, EditOp, EditOutcome, EditTarget, VoxelGrid};
use crate::Vec3;

pub const SESSION_KIND: &str = "session";

/// Minimum side, in occupancy cells, of an automatically added cuboid.
pub const AUTO_MIN_CELLS: usize = 2;
/// Minimum share of the mesh cells an automatically added cuboid covers.
pub const AUTO_MIN_FRACTION: f64 = 0.005;

/// Pipeline progress, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Deformed,
    Decomposed,
    Voxelized,
    Phase1,
    Phase2,
    Optimized,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Deformed => "deformed",
            Self::Decomposed => "decomposed",
            Self::Voxelized => "voxelized",
            Self::Phase1 => "phase1",
            Self::Phase2 => "phase2",
            Self::Optimized => "optimized",
        }
    }
}

/// Per-stage random seeds derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub anchors: u64,
    pub pullback: u64,
    pub quality: u64,
    pub report: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master);
        Self { master, anchors: rng.next_u64(), pullback: rng.next_u64(), quality: rng.next_u64(), report: rng.next_u64() }
    }
}

/// Anchor sampling for PolyCube fitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorParams {
    pub grid: usize,
    pub surface: usize,
    /// Noise on surface anchors as a fraction of the bounding-box diagonal.
    pub sigma: f64,
}

impl Default for AnchorParams {
    fn default() -> Self {
        Self { grid: 24, surface: 4000, sigma: 0.01 }
    }
}

/// The voxel hex mesh that the pullback and quality stages deform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexStage {
    /// Rest shape: lattice positions (plus padding layer).
    pub rest: HexMesh,
    pub padded: bool,
    pub topology_overridden: bool,
}

/// Every user-tunable weight, grouped by stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageWeights {
    pub deform: DeformWeights,
    pub polycube: FitOptions,
    pub pullback: PullbackWeights,
    pub quality: QualityWeights,
    pub mode: SurfaceMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    /// Normalized input.
    pub input: TetMesh,
    pub normalization: Normalization,
    pub seeds: Seeds,
    pub cursor: Stage,
    pub deformation: DeformationState,
    pub polycube: PolyCube,
    pub fit: FitOptions,
    pub anchors: AnchorParams,
    pub voxels: Option<VoxelGrid>,
    pub hex: Option<HexStage>,
    pub pullback: Option<PullbackState>,
    pub quality: Option<QualityState>,
    /// Weights used when the pullback and quality states are created.
    pub pullback_weights: PullbackWeights,
    pub quality_weights: QualityWeights,
    pub quality_mode: SurfaceMode,
    /// Pinned hex surface vertices for quality optimization.
    pub landmarks: LandmarkSet,
}

fn stage_error(stage: &'static str, reason: impl Into<String>) -> crate::Error {
    crate::Error::Stage { stage, reason: reason.into() }
}

impl Session {
    /// Start from an already normalized input mesh.
    pub fn new(input: TetMesh, normalization: Normalization, seed: u64) -> Self {
        let deformation = DeformationState::new(&input, DeformWeights::default());
        Self {
            input,
            normalization,
            seeds: Seeds::from_master(seed),
            cursor: Stage::Input,
            deformation,
            polycube: PolyCube::default(),
            fit: FitOptions::default(),
            anchors: AnchorParams::default(),
            voxels: None,
            hex: None,
            pullback: None,
            quality: None,
            pullback_weights: PullbackWeights::default(),
            quality_weights: QualityWeights::default(),
            quality_mode: SurfaceMode::Free,
            landmarks: LandmarkSet::default(),
        }
    }

    /// Load and normalize a tet mesh file.
    pub fn from_mesh_file(path: &Path, seed: u64) -> crate::Result<Self> {
        let loaded = io::load_tet_mesh(path)?;
        Ok(Self::new(loaded.mesh, loaded.normalization, seed))
    }

    pub fn weights(&self) -> StageWeights {
        StageWeights {
            deform: self.deformation.weights,
            polycube: self.fit,
            pullback: self.pullback_weights,
            quality: self.quality_weights,
            mode: self.quality_mode,
        }
    }

    /// Set the weights for subsequent runs, including the stored state of
    /// stages that already ran.
    pub fn set_weights(&mut self, w: StageWeights) -> crate::Result<()> {
        w.quality.validate()?;
        self.deformation.weights = w.deform;
        self.fit = w.polycube;
        self.pullback_weights = w.pullback;
        if let Some(p) = self.pullback.as_mut() {
            p.weights = w.pullback;
        }
        self.quality_weights = w.quality;
        self.quality_mode = w.mode;
        if let Some(q) = self.quality.as_mut() {
            q.weights = w.quality;
            q.mode = w.mode;
        }
        Ok(())
    }

    /// Pin hex vertex `vertex` at `position` for the next quality run.
    pub fn set_landmark(&mut self, vertex: usize, position: Vec3) -> crate::Result<()> {
        let hex = self.hex.as_ref().ok_or_else(|| stage_error("optimize", "no hex mesh; landmarks pin hex vertices"))?;
        if vertex >= hex.rest.vertices().len() {
            return Err(crate::Error::InvalidArgument(format!("vertex {vertex} out of range")));
        }
        if !position.iter().all(|x| x.is_finite()) {
            return Err(crate::Error::InvalidArgument("landmark position must be finite".into()));
        }
        self.landmarks.pin(vertex, position);
        Ok(())
    }

    pub fn remove_landmark(&mut self, vertex: usize) -> bool {
        self.landmarks.unpin(vertex).is_some()
    }

    /// Check that the cursor only references present, consistent artifacts.
    pub fn validate(&self) -> crate::Result<()> {
        let n = self.input.vertices().len();
        if self.deformation.positions.len() != n {
            return Err(stage_error("deform", "vertex count differs from the input"));
        }
        let need = |ok: bool, stage: &'static str, what: &str| if ok { Ok(()) } else { Err(stage_error(stage, format!("cursor past {what}, which is missing"))) };
        need(self.cursor < Stage::Decomposed || !self.polycube.is_empty(), "polycube", "the decomposition")?;
        need(self.cursor < Stage::Voxelized || self.voxels.is_some(), "voxelize", "the voxel grid")?;
        need(self.cursor < Stage::Phase1 || (self.hex.is_some() && self.pullback.is_some()), "pullback", "phase 1")?;
        need(self.cursor < Stage::Phase2 || self.pullback.as_ref().is_some_and(|p| p.positions.is_some()), "pullback", "phase 2")?;
        need(self.cursor < Stage::Optimized || self.quality.is_some(), "optimize", "quality optimization")?;
        if let Some(h) = &self.hex {
            let m = h.rest.vertices().len();
            if self.pullback.as_ref().is_some_and(|p| p.dprime.len() != m) || self.quality.as_ref().is_some_and(|q| q.positions.len() != m) {
                return Err(stage_error("pullback", "hex vertex count mismatch"));
            }
        }
        Ok(())
    }

    fn reset_after(&mut self, stage: Stage) {
        if stage < Stage::Voxelized {
            self.voxels = None;
        }
        if stage < Stage::Phase1 {
            self.hex = None;
            self.pullback = None;
            self.landmarks = LandmarkSet::default();
        }
        if stage < Stage::Optimized {
            self.quality = None;
        }
        self.cursor = stage;
    }

    pub fn deformed_mesh(&self) -> TetMesh {
        self.input.with_positions(self.deformation.positions.clone())
    }

    pub fn deform<C>(&mut self, steps: usize, cancel: Option<&AtomicBool>, callback: C) -> crate::Result<LoopOutcome>
    where
        C: FnMut(&StepInfo, &mut DeformWeights) -> Control,
    {
        let problem = DeformProblem::new(&self.input)?;
        let out = deform_step_run(&mut self.deformation, &problem, steps, cancel, callback)?;
        self.reset_after(Stage::Deformed);
        Ok(out)
    }

    fn deformed_index(&self) -> crate::Result<TetIndex> {
        TetIndex::new(&self.deformed_mesh())
    }

    /// Apply a cuboid edit; discards voxel and later artifacts.
    pub fn edit_polycube<T>(&mut self, edit: impl FnOnce(&mut PolyCube) -> Result<T, polycube::PolycubeError>) -> crate::Result<T> {
        let mut pc = self.polycube.clone();
        let out = edit(&mut pc)?;
        self.polycube = pc;
        self.reset_after(if self.polycube.is_empty() { Stage::Deformed } else { Stage::Decomposed });
        Ok(out)
    }

    /// Add the suggested cuboid; returns its id.
    pub fn polycube_add(&mut self, mode: AddMode) -> crate::Result<usize> {
        let c = polycube::suggest_add(&self.polycube, &self.deformed_index()?, mode, polycube::DEFAULT_GRID)?;
        self.edit_polycube(|pc| pc.add(c))
    }

    /// Subtract the suggested over-covered region.
    pub fn polycube_subtract(&mut self) -> crate::Result<Cuboid> {
        let region = polycube::suggest_subtract(&self.polycube, &self.deformed_index()?, polycube::DEFAULT_GRID)?;
        self.edit_polycube(|pc| {
            *pc = pc.apply_subtract(&region);
            Ok(region)
        })
    }

    /// Alternate volume-mode Add and Reoptimize until the deformed mesh is
    /// covered or `max_cuboids` is reached. Boxes thinner than
    /// [`AUTO_MIN_CELLS`] occupancy cells on any side, or holding less than
    /// [`AUTO_MIN_FRACTION`] of the mesh cells, end the loop: at the grid
    /// resolution they are classification noise along the boundary. Returns
    /// the number of cuboids added.
    pub fn polycube_auto<C>(&mut self, max_cuboids: usize, cancel: Option<&AtomicBool>, mut callback: C) -> crate::Result<usize>
    where
        C: FnMut(&StepInfo) -> Control,
    {
        let index = self.deformed_index()?;
        let mut added = 0;
        while self.polycube.len() < max_cuboids {
            let grid = polycube::OccupancyGrid::new(&self.polycube, &index, polycube::DEFAULT_GRID);
            let inside = grid.in_mesh.iter().filter(|&&m| m).count();
            let Some(b) = polycube::largest_box(&grid.uncovered(), grid.dims) else { break };
            let thin = (0..3).any(|k| b.hi[k] + 1 - b.lo[k] < AUTO_MIN_CELLS);
            if thin || (b.cells() as f64) < AUTO_MIN_FRACTION * inside as f64 {
                break;
            }
            self.edit_polycube(|pc| pc.add(grid.to_cuboid(&b)))?;
            added += 1;
            let out = self.polycube_fit(self.fit.steps, cancel, &mut callback)?;
            if out.cancelled {
                break;
            }
        }
        Ok(added)
    }

    /// Reoptimize the unlocked cuboids against freshly sampled anchors.
    pub fn polycube_fit<C>(&mut self, steps: usize, cancel: Option<&AtomicBool>, callback: C) -> crate::Result<LoopOutcome>
    where
        C: FnMut(&StepInfo) -> Control,
    {
        let index = self.deformed_index()?;
        let diag = bbox_diagonal(&self.deformation.positions);
        let a = self.anchors;
        let anchors = polycube::make_anchors(&index, a.grid, a.surface, a.sigma * diag, self.seeds.anchors)?;
        let opts = FitOptions { steps, ..self.fit };
        let mut pc = self.polycube.clone();
        let out = polycube::fit_polycube(&mut pc, &anchors, diag, &opts, cancel, callback)?;
        self.edit_polycube(|p| {
            *p = pc;
            Ok(out)
        })
    }

    /// Snap the PolyCube to a lattice of `cell_size` (default: bounding-box
    /// diagonal / 40 of the deformed mesh).
    pub fn voxelize(&mut self, cell_size: Option<f64>) -> crate::Result<&VoxelGrid> {
        if self.polycube.is_empty() {
            return Err(stage_error("voxelize", "the PolyCube has no cuboids"));
        }
        let cell = cell_size.unwrap_or_else(|| voxel::default_cell_size(bbox_diagonal(&self.deformation.positions)));
        let grid = voxel::snap_and_voxelize(&self.polycube, cell)?;
        self.reset_after(Stage::Voxelized);
        self.voxels = Some(grid);
        Ok(self.voxels.as_ref().expect("just set"))
    }

    fn voxels_mut(&mut self) -> crate::Result<&mut VoxelGrid> {
        self.voxels.as_mut().ok_or_else(|| stage_error("voxelize", "no voxel grid; run voxelize first"))
    }

    pub fn edit_voxels(&mut self, op: EditOp, target: EditTarget) -> crate::Result<EditOutcome> {
        let out = self.voxels_mut()?.edit(op, target)?;
        if out.changed > 0 {
            self.reset_after(Stage::Voxelized);
        }
        Ok(out)
    }

    pub fn undo_voxel_edit(&mut self) -> crate::Result<bool> {
        let undone = self.voxels_mut()?.undo().is_some();
        if undone {
            self.reset_after(Stage::Voxelized);
        }
        Ok(undone)
    }

    /// Build the voxel hex mesh (optionally padded) and a fresh pullback
    /// state on it.
    pub fn build_hex(&mut self, pad: bool, allow_invalid_topology: bool) -> crate::Result<&HexStage> {
        let grid = self.voxels.as_ref().ok_or_else(|| stage_error("pullback", "no voxel grid; run voxelize first"))?;
        let vm = grid.to_hex_mesh(allow_invalid_topology)?;
        let rest = if pad { voxel::global_pad(&vm.mesh, grid.cell_size)?.mesh } else { vm.mesh };
        self.reset_after(Stage::Voxelized);
        self.pullback = Some(PullbackState::new(rest.vertices().to_vec(), self.pullback_weights, self.seeds.pullback));
        self.hex = Some(HexStage { rest, padded: pad, topology_overridden: vm.topology_overridden });
        Ok(self.hex.as_ref().expect("just set"))
    }

    fn hex_problem(&self) -> crate::Result<HexProblem> {
        let hex = self.hex.as_ref().ok_or_else(|| stage_error("pullback", "no hex mesh; run voxelize and build the hex mesh first"))?;
        HexProblem::new(&hex.rest)
    }

    /// Phase 1: deform the voxel mesh onto the deformed input surface.
    pub fn pullback_phase1<C>(&mut self, steps: usize, cancel: Option<&AtomicBool>, callback: C) -> crate::Result<LoopOutcome>
    where
        C: FnMut(&StepInfo, &mut PullbackWeights) -> Control,
    {
        let problem = self.hex_problem()?;
        let target = TargetSurface::from_surface(&self.deformed_mesh().boundary()?)?;
        let state = self.pullback.as_mut().expect("hex stage always has a pullback state");
        state.targets = None;
        state.positions = None;
        let out = pullback::phase1_deform_to_md(state, &problem, &target, steps, cancel, callback)?;
        self.quality = None;
        self.cursor = Stage::Phase1;
        Ok(out)
    }

    /// Phase 2: pull the mesh back toward the input. Pull targets are
    /// computed when phase 2 first runs after phase 1.
    pub fn pullback_phase2<C>(&mut self, steps: usize, cancel: Option<&AtomicBool>, callback: C) -> crate::Result<LoopOutcome>
    where
        C: FnMut(&StepInfo, &mut PullbackWeights) -> Control,
    {
        if self.cursor < Stage::Phase1 {
            return Err(stage_error("pullback", "phase 1 has not run"));
        }
        let problem = self.hex_problem()?;
        let state = self.pullback.as_mut().expect("hex stage always has a pullback state");
        if state.targets.is_none() {
            let index = TetIndex::new(&self.input.with_positions(self.deformation.positions.clone()))?;
            pullback::start_phase2(state, &index, self.input.vertices());
        }
        let out = pullback::phase2_deform_to_m0(state, &problem, steps, cancel, callback)?;
        self.quality = None;
        self.cursor = Stage::Phase2;
        Ok(out)
    }

    pub fn input_target(&self) -> crate::Result<TargetSurface> {
        Ok(TargetSurface::from_surface(&self.input.boundary()?)?)
    }

    /// Quality optimization from the pullback result (or the previous
    /// quality run).
    pub fn optimize<C>(&mut self, steps: usize, cancel: Option<&AtomicBool>, callback: C) -> crate::Result<QualityOutcome>
    where
        C: FnMut(&StepInfo, &mut QualityWeights) -> Control,
    {
        if self.cursor < Stage::Phase2 {
            return Err(stage_error("optimize", "the pullback has not finished"));
        }
        let problem = self.hex_problem()?;
        let target = self.input_target()?;
        if self.quality.is_none() {
            let start = self.pullback.as_ref().expect("checked by cursor").current().to_vec();
            let mut q = QualityState::new(start, self.quality_weights, self.seeds.quality);
            q.mode = self.quality_mode;
            self.quality = Some(q);
        }
        if let Some(q) = self.quality.as_mut() {
            q.landmarks = self.landmarks.clone();
        }
        let state = self.quality.as_mut().expect("just set");
        let out = quality::optimize_quality(state, &problem, &target, steps, cancel, callback)?;
        self.cursor = Stage::Optimized;
        Ok(out)
    }

    /// Latest hex mesh: quality result, else pullback, else the voxel mesh.
    pub fn current_hex(&self) -> Option<HexMesh> {
        let hex = self.hex.as_ref()?;
        let pos = match (&self.quality, &self.pullback) {
            (Some(q), _) => q.positions.clone(),
            (None, Some(p)) => p.current().to_vec(),
            (None, None) => return Some(hex.rest.clone()),
        };
        Some(hex.rest.with_positions(pos))
    }

    /// Quality report of the current hex mesh against the input.
    pub fn report(&self, n_samples: usize) -> crate::Result<QualityReport> {
        let hex = self.current_hex().ok_or_else(|| stage_error("report", "no hex mesh yet"))?;
        quality::report_quality(&hex, &self.input.boundary()?, n_samples, self.seeds.report)
    }

    pub fn to_bytes(&self) -> crate::Result<Vec<u8>> {
        self.validate()?;
        Ok(io::write_archive(SESSION_KIND, self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> crate::Result<Self> {
        let s: Self = io::read_archive(bytes, SESSION_KIND)?;
        s.validate()?;
        Ok(s)
    }
}

/// Write `session` to `path` atomically (temporary file plus rename).
pub fn save_session(path: &Path, session: &Session) -> crate::Result<()> {
    let bytes = session.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| IoError::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| IoError::file(path, e))?;
    Ok(())
}

pub fn load_session(path: &Path) -> crate::Result<Session> {
    let bytes = std::fs::read(path).map_err(|e| IoError::file(path, e))?;
    Session::from_bytes(&bytes)
}
