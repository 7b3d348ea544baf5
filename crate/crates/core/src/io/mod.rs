//! Mesh file formats, input normalization and the session archive.
//!
//! Volume meshes are read from MEDIT `.mesh` and legacy ASCII VTK `.vtk`;
//! they are written to the same two formats, and boundary surfaces to OBJ.

mod archive;
mod medit;
mod obj;
mod vtk;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{bounding_box, HexMesh, MeshError, TetMesh};
use crate::Vec3;

pub use archive::{read_archive, write_archive, ARCHIVE_MAGIC, ARCHIVE_VERSION, BLOB_MIN_LEN};
pub use obj::{write_obj_quads, write_obj_triangles};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("file mixes tetrahedra and hexahedra")]
    MixedElements,
    #[error("expected a {expected} mesh, found a {found} mesh")]
    WrongElementType { expected: &'static str, found: &'static str },
    #[error("unsupported file extension `{0}` (use .mesh, .vtk or .obj)")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("not a session archive")]
    BadMagic,
    #[error("archive format version {found} is newer than the supported version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("archive checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("corrupt archive: {0}")]
    Corrupt(String),
}

impl IoError {
    pub(crate) fn file(path: &Path, source: std::io::Error) -> Self {
        Self::File { path: path.to_path_buf(), source }
    }
}

/// Either kind of volume mesh as read from a file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeMesh {
    Tet(TetMesh),
    Hex(HexMesh),
}

impl VolumeMesh {
    fn kind(&self) -> &'static str {
        match self {
            Self::Tet(_) => "tetrahedral",
            Self::Hex(_) => "hexahedral",
        }
    }
}

/// Raw cells of one kind read from a file, before mesh validation.
pub(crate) enum RawCells {
    Tet(Vec<[usize; 4]>),
    Hex(Vec<[usize; 8]>),
}

/// Map `p ↦ (p − center) · scale` that centers a mesh and fits its bounding
/// box in the unit cube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec3,
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { center: Vec3::zeros(), scale: 1.0 }
    }
}

impl Normalization {
    /// Bounding-box center and `1 / longest side`.
    pub fn fit(points: &[Vec3]) -> Self {
        let (lo, hi) = bounding_box(points);
        let extent = (hi - lo).max();
        let scale = if extent > 0.0 && extent.is_finite() { 1.0 / extent } else { 1.0 };
        Self { center: (lo + hi) * 0.5, scale }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p / self.scale + self.center
    }

    pub fn apply_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    pub fn invert_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.invert(p)).collect()
    }
}

/// A loaded, oriented and normalized input tet mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedTetMesh {
    pub mesh: TetMesh,
    pub normalization: Normalization,
    /// Tets whose orientation was flipped on load.
    pub flipped: Vec<usize>,
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|e| IoError::file(path, e))
}

/// Parse a volume mesh from `text` in the given format (`mesh` or `vtk`).
/// Negatively oriented tets are flipped; their ids are returned.
pub fn parse_volume_mesh(text: &str, format: &str) -> Result<(VolumeMesh, Vec<usize>), IoError> {
    let (vertices, cells) = match format {
        "mesh" => medit::parse(text)?,
        "vtk" => vtk::parse(text)?,
        other => return Err(IoError::UnsupportedFormat(other.to_string())),
    };
    match cells {
        RawCells::Tet(tets) => {
            let (mesh, flipped) = TetMesh::new_reoriented(vertices, tets)?;
            Ok((VolumeMesh::Tet(mesh), flipped))
        }
        RawCells::Hex(hexes) => Ok((VolumeMesh::Hex(HexMesh::new(vertices, hexes)?), Vec::new())),
    }
}

pub fn load_volume_mesh(path: &Path) -> Result<(VolumeMesh, Vec<usize>), IoError> {
    let ext = extension(path);
    if ext != "mesh" && ext != "vtk" {
        return Err(IoError::UnsupportedFormat(ext));
    }
    parse_volume_mesh(&read_text(path)?, &ext)
}

/// Load a tet mesh, flip inverted tets (logging a notice) and normalize it
/// into the unit box.
pub fn load_tet_mesh(path: &Path) -> Result<LoadedTetMesh, IoError> {
    let (mesh, flipped) = load_volume_mesh(path)?;
    let VolumeMesh::Tet(mesh) = mesh else {
        return Err(IoError::WrongElementType { expected: "tetrahedral", found: mesh.kind() });
    };
    if !flipped.is_empty() {
        log::warn!("{}: reoriented {} negatively oriented tetrahedra", path.display(), flipped.len());
    }
    Ok(normalize_tet_mesh(mesh, flipped))
}

pub fn normalize_tet_mesh(mesh: TetMesh, flipped: Vec<usize>) -> LoadedTetMesh {
    let normalization = Normalization::fit(mesh.vertices());
    let mesh = mesh.with_positions(normalization.apply_all(mesh.vertices()));
    LoadedTetMesh { mesh, normalization, flipped }
}

pub fn load_hex_mesh(path: &Path) -> Result<HexMesh, IoError> {
    match load_volume_mesh(path)?.0 {
        VolumeMesh::Hex(m) => Ok(m),
        other => Err(IoError::WrongElementType { expected: "hexahedral", found: other.kind() }),
    }
}

/// Serialize `mesh` for `format` (`mesh`, `vtk` or `obj`).
pub fn format_volume_mesh(mesh: &VolumeMesh, format: &str) -> Result<String, IoError> {
    match (format, mesh) {
        ("mesh", VolumeMesh::Tet(m)) => Ok(medit::write_tets(m.vertices(), m.tets())),
        ("mesh", VolumeMesh::Hex(m)) => Ok(medit::write_hexes(m.vertices(), m.hexes())),
        ("vtk", VolumeMesh::Tet(m)) => Ok(vtk::write(m.vertices(), m.tets(), vtk::VTK_TETRA)),
        ("vtk", VolumeMesh::Hex(m)) => Ok(vtk::write(m.vertices(), m.hexes(), vtk::VTK_HEXAHEDRON)),
        ("obj", VolumeMesh::Tet(m)) => {
            let b = m.boundary()?;
            Ok(write_obj_triangles(&b.vertices, &b.faces))
        }
        ("obj", VolumeMesh::Hex(m)) => {
            let b = m.boundary()?;
            Ok(write_obj_quads(&b.vertices, &b.faces))
        }
        (other, _) => Err(IoError::UnsupportedFormat(other.to_string())),
    }
}

/// Write a hex mesh, mapping positions back through `normalization` when
/// given. The format follows the extension; `.obj` writes the boundary.
pub fn save_hex_mesh(path: &Path, mesh: &HexMesh, normalization: Option<&Normalization>) -> Result<(), IoError> {
    let mesh = match normalization {
        Some(n) => mesh.with_positions(n.invert_all(mesh.vertices())),
        None => mesh.clone(),
    };
    write_text(path, &format_volume_mesh(&VolumeMesh::Hex(mesh), &extension(path))?)
}

pub fn save_tet_mesh(path: &Path, mesh: &TetMesh, normalization: Option<&Normalization>) -> Result<(), IoError> {
    let mesh = match normalization {
        Some(n) => mesh.with_positions(n.invert_all(mesh.vertices())),
        None => mesh.clone(),
    };
    write_text(path, &format_volume_mesh(&VolumeMesh::Tet(mesh), &extension(path))?)
}

#[cfg(test)]
mod tests;
