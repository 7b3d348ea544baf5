//! Wavefront OBJ surface export.

use std::fmt::Write;

use crate::Vec3;

fn write<const N: usize>(vertices: &[Vec3], faces: &[[usize; N]]) -> String {
    let mut s = String::new();
    for p in vertices {
        let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
    }
    for f in faces {
        s.push('f');
        for v in f {
            let _ = write!(s, " {}", v + 1);
        }
        s.push('\n');
    }
    s
}

pub fn write_obj_triangles(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    write(vertices, faces)
}

pub fn write_obj_quads(vertices: &[Vec3], faces: &[[usize; 4]]) -> String {
    write(vertices, faces)
}
