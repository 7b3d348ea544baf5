//! Stage 3: lattice snapping, voxel edits, topology checks and padding.

mod pad;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{HexMesh, MeshError};
use crate::polycube::PolyCube;
use crate::Vec3;

pub use pad::{global_pad, Padding, MAX_PAD_HALVINGS};

pub type Cell = [i64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("cell size must be positive and finite, got {0}")]
    CellSize(f64),
    #[error("every cuboid collapsed to zero width when snapped")]
    AllCollapsed,
    #[error("the voxel grid is empty")]
    Empty,
    #[error("axis must be 0, 1 or 2, got {0}")]
    InvalidAxis(usize),
    #[error("layer region has lo > hi: {0:?}")]
    InvalidRegion([[i64; 2]; 2]),
    #[error("voxel topology is not a single manifold solid: {0}")]
    Topology(TopologyReport),
    #[error("padding inverts elements even after {0} offset halvings")]
    PaddingInverted(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Add,
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditTarget {
    Cell(Cell),
    /// All cells with `cell[axis] == index`. `region` gives inclusive ranges
    /// on the two other axes in increasing axis order; when absent, a removal
    /// takes the whole layer and an addition spans the occupancy's bounding
    /// range.
    Layer { axis: usize, index: i64, region: Option<[[i64; 2]; 2]> },
}

/// One applied edit with the cells it actually changed, for undo.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelEdit {
    pub op: EditOp,
    pub target: EditTarget,
    pub changed: Vec<Cell>,
}

/// Occupied cells `[i, j, k]` covering `origin + cell · [i, i+1] × …`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub cell_size: f64,
    pub origin: Vec3,
    pub occupied: BTreeSet<Cell>,
    #[serde(default)]
    pub log: Vec<VoxelEdit>,
}

/// Default lattice spacing for a mesh with the given bounding box diagonal.
pub fn default_cell_size(diagonal: f64) -> f64 {
    diagonal / 40.0
}

/// Snap every cuboid corner to the nearest lattice plane (halves round away
/// from zero) and occupy the cells of the snapped boxes. Cuboids that snap to
/// zero width are dropped.
pub fn snap_and_voxelize(pc: &PolyCube, cell_size: f64) -> Result<VoxelGrid, VoxelError> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(VoxelError::CellSize(cell_size));
    }
    let mut occupied = BTreeSet::new();
    let mut kept = 0;
    for (id, c) in pc.cuboids.iter().enumerate() {
        let lo = c.min().map(|x| (x / cell_size).round() as i64);
        let hi = c.max().map(|x| (x / cell_size).round() as i64);
        if (0..3).any(|k| hi[k] <= lo[k]) {
            log::warn!("cuboid {id} snaps to zero width at cell size {cell_size}; dropped");
            continue;
        }
        kept += 1;
        for i in lo.x..hi.x {
            for j in lo.y..hi.y {
                for k in lo.z..hi.z {
                    occupied.insert([i, j, k]);
                }
            }
        }
    }
    if kept == 0 {
        return Err(VoxelError::AllCollapsed);
    }
    Ok(VoxelGrid { cell_size, origin: Vec3::zeros(), occupied, log: Vec::new() })
}

/// Outcome of one edit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditOutcome {
    pub changed: usize,
    /// Set when the edit was a no-op.
    pub notice: Option<String>,
}

/// Free-function form of [`VoxelGrid::edit`].
pub fn edit_voxels(grid: &mut VoxelGrid, op: EditOp, target: EditTarget) -> Result<EditOutcome, VoxelError> {
    grid.edit(op, target)
}

/// Face-connected components and non-manifold contacts of a voxel set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub components: usize,
    /// Lattice edges (as endpoint pairs) whose four incident cells are two
    /// diagonally opposite occupied cells.
    pub non_manifold_edges: Vec<(Cell, Cell)>,
    /// Lattice vertices where the occupied or the empty incident cells are
    /// not face-connected, excluding endpoints of non-manifold edges.
    pub non_manifold_vertices: Vec<Cell>,
}

impl TopologyReport {
    pub fn is_clean(&self) -> bool {
        self.components == 1 && self.non_manifold_edges.is_empty() && self.non_manifold_vertices.is_empty()
    }
}

impl std::fmt::Display for TopologyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} component(s), {} non-manifold edge(s), {} non-manifold vertex(es)",
            self.components,
            self.non_manifold_edges.len(),
            self.non_manifold_vertices.len()
        )
    }
}

/// Hex mesh of a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMesh {
    pub mesh: HexMesh,
    /// Voxel behind each hex.
    pub cells: Vec<Cell>,
    /// Lattice coordinates of each vertex.
    pub lattice: Vec<Cell>,
    /// Set when the mesh was built despite a failed topology check.
    pub topology_overridden: bool,
}

const FACE_NEIGHBORS: [Cell; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

fn add(a: Cell, b: Cell) -> Cell {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

impl VoxelGrid {
    pub fn new(cell_size: f64, occupied: impl IntoIterator<Item = Cell>) -> Result<Self, VoxelError> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(VoxelError::CellSize(cell_size));
        }
        Ok(Self { cell_size, origin: Vec3::zeros(), occupied: occupied.into_iter().collect(), log: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn contains(&self, c: &Cell) -> bool {
        self.occupied.contains(c)
    }

    /// Inclusive lattice bounds of the occupied cells.
    pub fn bounds(&self) -> Option<(Cell, Cell)> {
        let mut it = self.occupied.iter();
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), c| {
            (std::array::from_fn(|k| lo[k].min(c[k])), std::array::from_fn(|k| hi[k].max(c[k])))
        }))
    }

    fn layer_cells(&self, op: EditOp, axis: usize, index: i64, region: Option<[[i64; 2]; 2]>) -> Result<Vec<Cell>, VoxelError> {
        if axis > 2 {
            return Err(VoxelError::InvalidAxis(axis));
        }
        let others = [(axis + 1) % 3, (axis + 2) % 3];
        let others = [others[0].min(others[1]), others[0].max(others[1])];
        let region = match region {
            Some(r) => {
                if r.iter().any(|r| r[0] > r[1]) {
                    return Err(VoxelError::InvalidRegion(r));
                }
                r
            }
            None if op == EditOp::Remove => {
                return Ok(self.occupied.iter().filter(|c| c[axis] == index).copied().collect());
            }
            None => {
                let Some((lo, hi)) = self.bounds() else { return Ok(Vec::new()) };
                [[lo[others[0]], hi[others[0]]], [lo[others[1]], hi[others[1]]]]
            }
        };
        let mut cells = Vec::new();
        for a in region[0][0]..=region[0][1] {
            for b in region[1][0]..=region[1][1] {
                let mut c = [0; 3];
                c[axis] = index;
                c[others[0]] = a;
                c[others[1]] = b;
                cells.push(c);
            }
        }
        Ok(cells)
    }

    /// Add or remove cells and record the change for [`undo`](Self::undo).
    pub fn edit(&mut self, op: EditOp, target: EditTarget) -> Result<EditOutcome, VoxelError> {
        let candidates = match target {
            EditTarget::Cell(c) => vec![c],
            EditTarget::Layer { axis, index, region } => self.layer_cells(op, axis, index, region)?,
        };
        let mut changed = Vec::new();
        for c in candidates {
            let did = match op {
                EditOp::Add => self.occupied.insert(c),
                EditOp::Remove => self.occupied.remove(&c),
            };
            if did {
                changed.push(c);
            }
        }
        if changed.is_empty() {
            let notice = match op {
                EditOp::Add => format!("{target:?}: already occupied, nothing added"),
                EditOp::Remove => format!("{target:?}: not occupied, nothing removed"),
            };
            log::info!("{notice}");
            return Ok(EditOutcome { changed: 0, notice: Some(notice) });
        }
        let n = changed.len();
        self.log.push(VoxelEdit { op, target, changed });
        Ok(EditOutcome { changed: n, notice: None })
    }

    /// Revert the most recent edit.
    pub fn undo(&mut self) -> Option<VoxelEdit> {
        let edit = self.log.pop()?;
        for c in &edit.changed {
            match edit.op {
                EditOp::Add => self.occupied.remove(c),
                EditOp::Remove => self.occupied.insert(*c),
            };
        }
        Some(edit)
    }

    pub fn validate_topology(&self) -> Result<TopologyReport, VoxelError> {
        if self.is_empty() {
            return Err(VoxelError::Empty);
        }
        Ok(TopologyReport {
            components: self.components(),
            non_manifold_edges: self.non_manifold_edges(),
            non_manifold_vertices: self.non_manifold_vertices(),
        })
    }

    fn components(&self) -> usize {
        let mut seen = BTreeSet::new();
        let mut count = 0;
        for &start in &self.occupied {
            if !seen.insert(start) {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([start]);
            while let Some(c) = queue.pop_front() {
                for d in FACE_NEIGHBORS {
                    let n = add(c, d);
                    if self.occupied.contains(&n) && seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
        }
        count
    }

    fn non_manifold_edges(&self) -> Vec<(Cell, Cell)> {
        // lattice edge (start point, axis)
        let mut edges = BTreeSet::new();
        for c in &self.occupied {
            for axis in 0..3 {
                let (b, d) = ((axis + 1) % 3, (axis + 2) % 3);
                for ob in 0..2 {
                    for od in 0..2 {
                        let mut p = *c;
                        p[b] += ob;
                        p[d] += od;
                        edges.insert((p, axis));
                    }
                }
            }
        }
        let mut out = Vec::new();
        for (p, axis) in edges {
            let (b, d) = ((axis + 1) % 3, (axis + 2) % 3);
            let cell = |ob: i64, od: i64| {
                let mut c = p;
                c[b] += ob;
                c[d] += od;
                self.occupied.contains(&c)
            };
            let (a00, a10, a01, a11) = (cell(-1, -1), cell(0, -1), cell(-1, 0), cell(0, 0));
            if (a00 && a11 && !a10 && !a01) || (a10 && a01 && !a00 && !a11) {
                let mut q = p;
                q[axis] += 1;
                out.push((p, q));
            }
        }
        out
    }

    fn non_manifold_vertices(&self) -> Vec<Cell> {
        let edge_ends: BTreeSet<Cell> = self.non_manifold_edges().iter().flat_map(|&(a, b)| [a, b]).collect();
        let mut vertices = BTreeSet::new();
        for c in &self.occupied {
            for bits in 0..8 {
                vertices.insert(add(*c, [bits & 1, (bits >> 1) & 1, (bits >> 2) & 1]));
            }
        }
        vertices
            .into_iter()
            .filter(|v| !edge_ends.contains(v))
            .filter(|v| {
                // bit b of the mask: cell v + offset(b) - 1 is occupied
                let mask: u8 = (0..8u8)
                    .filter(|&b| self.occupied.contains(&add(*v, [(b & 1) as i64 - 1, ((b >> 1) & 1) as i64 - 1, ((b >> 2) & 1) as i64 - 1])))
                    .fold(0, |m, b| m | (1 << b));
                mask != 0xff && (!block_connected(mask) || !block_connected(!mask))
            })
            .collect()
    }

    /// Build the hex mesh with welded lattice vertices. Fails unless the
    /// topology check is clean or `allow_invalid` is set.
    pub fn to_hex_mesh(&self, allow_invalid: bool) -> Result<VoxelMesh, VoxelError> {
        let report = self.validate_topology()?;
        let overridden = !report.is_clean();
        if overridden {
            if !allow_invalid {
                return Err(VoxelError::Topology(report));
            }
            log::warn!("building hex mesh despite topology issues: {report}");
        }
        let mut index: BTreeMap<Cell, usize> = BTreeMap::new();
        for c in &self.occupied {
            for bits in 0..8 {
                index.insert(add(*c, [bits & 1, (bits >> 1) & 1, (bits >> 2) & 1]), 0);
            }
        }
        let mut lattice = Vec::with_capacity(index.len());
        for (i, (p, id)) in index.iter_mut().enumerate() {
            *id = i;
            lattice.push(*p);
        }
        let vertices =
            lattice.iter().map(|p| self.origin + Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64) * self.cell_size).collect();
        let cells: Vec<Cell> = self.occupied.iter().copied().collect();
        let hexes = cells
            .iter()
            .map(|c| {
                std::array::from_fn(|k| {
                    let l = crate::mesh::CORNER_LOCAL[k];
                    index[&add(*c, [l[0] as i64, l[1] as i64, l[2] as i64])]
                })
            })
            .collect();
        Ok(VoxelMesh { mesh: HexMesh::new(vertices, hexes)?, cells, lattice, topology_overridden: overridden })
    }
}

/// Whether the set bits of a 2×2×2 block mask are face-connected.
fn block_connected(mask: u8) -> bool {
    if mask == 0 {
        return true;
    }
    let start = mask.trailing_zeros() as u8;
    let mut seen = 1u8 << start;
    let mut stack = vec![start];
    while let Some(b) = stack.pop() {
        for flip in [1u8, 2, 4] {
            let n = b ^ flip;
            if mask & (1 << n) != 0 && seen & (1 << n) == 0 {
                seen |= 1 << n;
                stack.push(n);
            }
        }
    }
    seen == mask
}
