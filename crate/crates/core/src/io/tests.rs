use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::*;
use crate::fixtures;

fn jittered_block(seed: u64) -> HexMesh {
    let block = fixtures::hex_block(3, 2, 2, 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = block.vertices().iter().map(|p| p + Vec3::from_fn(|_, _| rng.random_range(-0.05..0.05))).collect();
    block.with_positions(pos)
}

#[test]
fn hex_round_trip_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = jittered_block(3);
    for ext in ["mesh", "vtk"] {
        let path = dir.path().join(format!("out.{ext}"));
        save_hex_mesh(&path, &mesh, None).unwrap();
        let back = load_hex_mesh(&path).unwrap();
        assert_eq!(back.hexes(), mesh.hexes());
        let err = back.vertices().iter().zip(mesh.vertices()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "{ext}: {err}");
    }
}

#[test]
fn normalization_and_export_scale() {
    let big = fixtures::cube_tet_mesh(2, 1.0);
    let big = big.with_positions(big.vertices().iter().map(|p| p * 1000.0 + Vec3::new(5.0, -3.0, 2.0)).collect());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.mesh");
    save_tet_mesh(&path, &big, None).unwrap();
    let loaded = load_tet_mesh(&path).unwrap();
    let (lo, hi) = loaded.mesh.bounding_box();
    assert!(lo.iter().all(|x| *x >= -0.5 - 1e-12) && hi.iter().all(|x| *x <= 0.5 + 1e-12));
    assert!(((hi - lo).max() - 1.0).abs() < 1e-12);

    let hex = fixtures::hex_block(1, 1, 1, 1.0);
    let hex = hex.with_positions(hex.vertices().iter().map(|p| p - Vec3::repeat(0.5)).collect());
    let out = dir.path().join("hex.vtk");
    save_hex_mesh(&out, &hex, Some(&loaded.normalization)).unwrap();
    let (elo, ehi) = load_hex_mesh(&out).unwrap().bounding_box();
    assert!((elo - Vec3::new(-495.0, -503.0, -498.0)).norm() < 1e-9, "{elo}");
    assert!((ehi - Vec3::new(505.0, 497.0, 502.0)).norm() < 1e-9, "{ehi}");
}

#[test]
fn negative_tets_are_reoriented() {
    let text = "MeshVersionFormatted 2\nDimension 3\nVertices\n4\n0 0 0 0\n1 0 0 0\n0 1 0 0\n0 0 1 0\nTetrahedra\n1\n1 3 2 4 0\nEnd\n";
    let (mesh, flipped) = parse_volume_mesh(text, "mesh").unwrap();
    assert_eq!(flipped, vec![0]);
    let VolumeMesh::Tet(m) = mesh else { panic!("expected tets") };
    assert!(m.signed_volume(0) > 0.0);
}

#[test]
fn malformed_input_reports_line() {
    let text = "MeshVersionFormatted 2\nDimension 3\nVertices\n2\n0 0 0 0\n1 0 zero 0\nEnd\n";
    match parse_volume_mesh(text, "mesh") {
        Err(IoError::Parse { line, .. }) => assert_eq!(line, 6),
        other => panic!("{other:?}"),
    }
    let vtk = "# vtk DataFile Version 3.0\nx\nASCII\nDATASET UNSTRUCTURED_GRID\nPOINTS 4 double\n0 0 0\n1 0 0\n0 1 0\n0 0 1\nCELLS 1 5\n4 0 1 2 3\nCELL_TYPES 1\n5\n";
    match parse_volume_mesh(vtk, "vtk") {
        Err(IoError::Parse { line, .. }) => assert_eq!(line, 13),
        other => panic!("{other:?}"),
    }
    let oob = "Vertices\n1\n0 0 0 0\nTetrahedra\n1\n1 2 3 4 0\n";
    assert!(matches!(parse_volume_mesh(oob, "mesh"), Err(IoError::Parse { line: 6, .. })));
}

#[test]
fn mixed_elements_rejected() {
    let mut text = String::from("Vertices\n8\n");
    for k in 0..8 {
        text += &format!("{} {} {} 0\n", k & 1, (k >> 1) & 1, (k >> 2) & 1);
    }
    text += "Tetrahedra\n1\n1 2 3 5 0\nHexahedra\n1\n1 2 4 3 5 6 8 7 0\nEnd\n";
    assert!(matches!(parse_volume_mesh(&text, "mesh"), Err(IoError::MixedElements)));
}

#[test]
fn wrong_kind_and_extension() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.mesh");
    save_tet_mesh(&path, &fixtures::cube_tet_mesh(1, 1.0), None).unwrap();
    assert!(matches!(load_hex_mesh(&path), Err(IoError::WrongElementType { .. })));
    assert!(matches!(load_volume_mesh(&dir.path().join("t.stl")), Err(IoError::UnsupportedFormat(_))));
    assert!(matches!(load_volume_mesh(&dir.path().join("missing.mesh")), Err(IoError::File { .. })));
}

#[test]
fn obj_boundary_export() {
    let text = format_volume_mesh(&VolumeMesh::Hex(fixtures::hex_block(2, 1, 1, 1.0)), "obj").unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 10);
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 12);
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Sample {
    name: String,
    points: Vec<Vec3>,
    ids: Vec<usize>,
    short: Vec<f64>,
    signed: Vec<i64>,
    nested: Option<Vec<[usize; 8]>>,
}

fn sample() -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    Sample {
        name: "x".into(),
        points: (0..50).map(|_| Vec3::from_fn(|_, _| rng.random::<f64>() - 0.5)).collect(),
        ids: (0..20).collect(),
        short: vec![0.1, 0.2],
        signed: vec![-3, 4, -5, 6, 7, 8, 9, 10, 11],
        nested: Some(vec![[0, 1, 2, 3, 4, 5, 6, 7]; 9]),
    }
}

#[test]
fn archive_round_trip_is_bitwise() {
    let s = sample();
    let bytes = write_archive("test", &s).unwrap();
    assert_eq!(&bytes[..8], ARCHIVE_MAGIC);
    let back: Sample = read_archive(&bytes, "test").unwrap();
    assert_eq!(back, s);
    assert!(matches!(read_archive::<Sample>(&bytes, "other"), Err(IoError::Corrupt(_))));
}

#[test]
fn archive_rejects_damage() {
    let bytes = write_archive("test", &sample()).unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
        assert!(matches!(read_archive::<Sample>(&bytes[..cut], "test"), Err(IoError::Checksum)), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(read_archive::<Sample>(&flipped, "test"), Err(IoError::Checksum)));

    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&(ARCHIVE_VERSION + 1).to_le_bytes());
    match read_archive::<Sample>(&newer, "test") {
        Err(IoError::Version { found, supported }) => assert_eq!((found, supported), (ARCHIVE_VERSION + 1, ARCHIVE_VERSION)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(read_archive::<Sample>(b"not an archive at all", "test"), Err(IoError::BadMagic)));
}
