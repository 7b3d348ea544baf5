//! Legacy ASCII VTK unstructured grids.

use std::fmt::Write;

use super::{IoError, RawCells};
use crate::Vec3;

pub(super) const VTK_TETRA: u8 = 10;
pub(super) const VTK_HEXAHEDRON: u8 = 12;

fn err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { line, message: message.into() }
}

pub(super) fn parse(text: &str) -> Result<(Vec<Vec3>, RawCells), IoError> {
    let lines: Vec<&str> = text.lines().collect();
    if !lines.first().is_some_and(|l| l.starts_with("# vtk DataFile")) {
        return Err(err(1, "missing `# vtk DataFile` header"));
    }
    if lines.get(2).map(|l| l.trim()) != Some("ASCII") {
        return Err(err(3, "only ASCII VTK files are supported"));
    }
    // tokens after the three header lines, with line numbers
    let tokens: Vec<(&str, usize)> =
        lines.iter().enumerate().skip(3).flat_map(|(i, l)| l.split_whitespace().map(move |t| (t, i + 1))).collect();
    let mut pos = 0;
    let last_line = lines.len();
    let mut next = |what: &str| -> Result<(&str, usize), IoError> {
        let t = tokens.get(pos).copied().ok_or_else(|| err(last_line, format!("unexpected end of file, expected {what}")))?;
        pos += 1;
        Ok(t)
    };
    fn num<T: std::str::FromStr>(t: (&str, usize), what: &str) -> Result<T, IoError> {
        t.0.parse().map_err(|_| err(t.1, format!("expected {what}, found `{}`", t.0)))
    }

    let mut vertices = Vec::new();
    let mut cells: Vec<Vec<usize>> = Vec::new();
    let mut cell_lines = Vec::new();
    let mut types: Vec<(u8, usize)> = Vec::new();
    loop {
        let Ok((kw, line)) = next("section keyword") else { break };
        match kw {
            "DATASET" => {
                let (kind, l) = next("dataset type")?;
                if kind != "UNSTRUCTURED_GRID" {
                    return Err(err(l, format!("dataset `{kind}` is not supported")));
                }
            }
            "POINTS" => {
                let n: usize = num(next("point count")?, "point count")?;
                next("point type")?;
                for _ in 0..n {
                    let x = num(next("coordinate")?, "coordinate")?;
                    let y = num(next("coordinate")?, "coordinate")?;
                    let z = num(next("coordinate")?, "coordinate")?;
                    vertices.push(Vec3::new(x, y, z));
                }
            }
            "CELLS" => {
                let n: usize = num(next("cell count")?, "cell count")?;
                next("cell list size")?;
                for _ in 0..n {
                    let t = next("cell size")?;
                    let k: usize = num(t, "cell size")?;
                    let mut c = Vec::with_capacity(k);
                    for _ in 0..k {
                        let t = next("vertex index")?;
                        let i: usize = num(t, "vertex index")?;
                        if i >= vertices.len() {
                            return Err(err(t.1, format!("vertex index {i} out of range 0..{}", vertices.len())));
                        }
                        c.push(i);
                    }
                    cells.push(c);
                    cell_lines.push(t.1);
                }
            }
            "CELL_TYPES" => {
                let n: usize = num(next("cell type count")?, "cell type count")?;
                for _ in 0..n {
                    let t = next("cell type")?;
                    types.push((num(t, "cell type")?, t.1));
                }
            }
            "CELL_DATA" | "POINT_DATA" | "METADATA" => break,
            other => return Err(err(line, format!("unknown keyword `{other}`"))),
        }
    }
    if types.len() != cells.len() {
        return Err(err(last_line, format!("{} cells but {} cell types", cells.len(), types.len())));
    }
    let has = |ty: u8| types.iter().any(|t| t.0 == ty);
    if let Some(&(ty, l)) = types.iter().find(|t| t.0 != VTK_TETRA && t.0 != VTK_HEXAHEDRON) {
        return Err(err(l, format!("cell type {ty} is not supported")));
    }
    if has(VTK_TETRA) && has(VTK_HEXAHEDRON) {
        return Err(IoError::MixedElements);
    }
    if cells.is_empty() {
        return Err(err(last_line, "no cells"));
    }
    let width = if has(VTK_TETRA) { 4 } else { 8 };
    if let Some(i) = cells.iter().position(|c| c.len() != width) {
        return Err(err(cell_lines[i], format!("cell has {} vertices, expected {width}", cells[i].len())));
    }
    let raw = if width == 4 {
        RawCells::Tet(cells.iter().map(|c| [c[0], c[1], c[2], c[3]]).collect())
    } else {
        RawCells::Hex(cells.iter().map(|c| std::array::from_fn(|k| c[k])).collect())
    };
    Ok((vertices, raw))
}

pub(super) fn write<const N: usize>(vertices: &[Vec3], cells: &[[usize; N]], cell_type: u8) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0\npolyhex\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", vertices.len());
    for p in vertices {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    let _ = writeln!(s, "CELLS {} {}", cells.len(), cells.len() * (N + 1));
    for c in cells {
        let _ = write!(s, "{N}");
        for v in c {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "CELL_TYPES {}", cells.len());
    for _ in cells {
        let _ = writeln!(s, "{cell_type}");
    }
    s
}
