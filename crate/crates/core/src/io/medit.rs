//! MEDIT `.mesh` (ASCII), tetrahedra or hexahedra, 1-based indices.

use std::fmt::Write;

use super::{IoError, RawCells};
use crate::Vec3;

struct Tokens<'a> {
    items: Vec<(&'a str, usize)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .flat_map(|(i, l)| l.split('#').next().unwrap_or("").split_whitespace().map(move |t| (t, i + 1)))
            .collect();
        Self { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items.get(self.pos).or(self.items.last()).map_or(1, |t| t.1)
    }

    fn next(&mut self) -> Option<(&'a str, usize)> {
        let t = self.items.get(self.pos).copied();
        self.pos += 1;
        t
    }

    fn expect(&mut self, what: &str) -> Result<(&'a str, usize), IoError> {
        let line = self.line();
        self.next().ok_or_else(|| IoError::Parse { line, message: format!("unexpected end of file, expected {what}") })
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, IoError> {
        let (tok, line) = self.expect(what)?;
        tok.parse().map_err(|_| IoError::Parse { line, message: format!("expected {what}, found `{tok}`") })
    }

    fn index(&mut self, n_vertices: usize) -> Result<usize, IoError> {
        let line = self.line();
        let i: usize = self.number("vertex index")?;
        if i == 0 || i > n_vertices {
            return Err(IoError::Parse { line, message: format!("vertex index {i} out of range 1..={n_vertices}") });
        }
        Ok(i - 1)
    }
}

/// Tokens per entry of sections that are skipped.
fn skipped_width(keyword: &str) -> Option<usize> {
    Some(match keyword {
        "Edges" => 3,
        "Triangles" => 4,
        "Quadrilaterals" => 5,
        "Prisms" => 7,
        "Pyramids" => 6,
        "Corners" | "RequiredVertices" | "Ridges" | "RequiredEdges" => 1,
        "Normals" | "Tangents" => 3,
        "NormalAtVertices" | "TangentAtVertices" => 2,
        _ => return None,
    })
}

fn cells<const N: usize>(t: &mut Tokens, n_vertices: usize) -> Result<Vec<[usize; N]>, IoError> {
    let n: usize = t.number("element count")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut c = [0; N];
        for k in c.iter_mut() {
            *k = t.index(n_vertices)?;
        }
        let _: i64 = t.number("element reference")?;
        out.push(c);
    }
    Ok(out)
}

pub(super) fn parse(text: &str) -> Result<(Vec<Vec3>, RawCells), IoError> {
    let mut t = Tokens::new(text);
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut tets = Vec::new();
    let mut hexes = Vec::new();
    let mut tet_line = None;
    while let Some((kw, line)) = t.next() {
        match kw {
            "MeshVersionFormatted" => {
                let _: u32 = t.number("version")?;
            }
            "Dimension" => {
                let d: u32 = t.number("dimension")?;
                if d != 3 {
                    return Err(IoError::Parse { line, message: format!("dimension {d} is not supported") });
                }
            }
            "Vertices" => {
                let n: usize = t.number("vertex count")?;
                vertices.reserve(n);
                for _ in 0..n {
                    let p = Vec3::new(t.number("coordinate")?, t.number("coordinate")?, t.number("coordinate")?);
                    let _: i64 = t.number("vertex reference")?;
                    vertices.push(p);
                }
            }
            "Tetrahedra" => {
                tet_line = Some(line);
                tets.extend(cells::<4>(&mut t, vertices.len())?);
            }
            "Hexahedra" => {
                hexes.extend(cells::<8>(&mut t, vertices.len())?);
            }
            "End" => break,
            other => match skipped_width(other) {
                Some(w) => {
                    let n: usize = t.number("entry count")?;
                    for _ in 0..n * w {
                        t.expect("entry value")?;
                    }
                }
                None => return Err(IoError::Parse { line, message: format!("unknown keyword `{other}`") }),
            },
        }
    }
    match (tets.is_empty(), hexes.is_empty()) {
        (false, false) => Err(IoError::MixedElements),
        (false, true) => Ok((vertices, RawCells::Tet(tets))),
        (true, false) => Ok((vertices, RawCells::Hex(hexes))),
        (true, true) => Err(IoError::Parse {
            line: tet_line.unwrap_or_else(|| t.line()),
            message: "no tetrahedra or hexahedra".into(),
        }),
    }
}

fn write<const N: usize>(vertices: &[Vec3], cells: &[[usize; N]], keyword: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "MeshVersionFormatted 2\nDimension 3\nVertices\n{}", vertices.len());
    for p in vertices {
        let _ = writeln!(s, "{} {} {} 0", p.x, p.y, p.z);
    }
    let _ = writeln!(s, "{keyword}\n{}", cells.len());
    for c in cells {
        for v in c {
            let _ = write!(s, "{} ", v + 1);
        }
        s.push_str("0\n");
    }
    s.push_str("End\n");
    s
}

pub(super) fn write_tets(vertices: &[Vec3], tets: &[[usize; 4]]) -> String {
    write(vertices, tets, "Tetrahedra")
}

pub(super) fn write_hexes(vertices: &[Vec3], hexes: &[[usize; 8]]) -> String {
    write(vertices, hexes, "Hexahedra")
}
