use std::path::Path;
use std::process::{Command, Output};

use polyhex::{fixtures, io};

fn polyhex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyhex")).args(args).env("POLYHEX_THREADS", "1").output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn write_cube(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("cube.mesh");
    io::save_tet_mesh(&path, &fixtures::cube_tet_mesh(4, 1.0), None).unwrap();
    path
}

#[test]
fn run_all_on_cube() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_cube(dir.path());
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "[voxel]\ncell_size = 0.25\n").unwrap();
    let out_mesh = dir.path().join("hex.vtk");
    let session = dir.path().join("s.polyhex");
    let out = polyhex(&["run-all", "--input", arg(&input), "--config", arg(&config), "--seed", "3", "--out", arg(&out_mesh), "--session", arg(&session), "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["j_min"].as_f64().unwrap() >= 0.99, "{report}");
    assert!(report["d_max"].as_f64().unwrap() <= 1e-2, "{report}");
    let hex = io::load_hex_mesh(&out_mesh).unwrap();
    assert_eq!(hex.hexes().len(), 64);

    let a = polyhex(&["report", "--session", arg(&session)]);
    let b = polyhex(&["report", "--session", arg(&session)]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("hexes"));
}

#[test]
fn staged_commands() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_cube(dir.path());
    let s = dir.path().join("s.polyhex");
    let steps = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd, "--session", arg(&s)];
        args.extend_from_slice(extra);
        let out = polyhex(&args);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    };
    steps("deform", &["--input", arg(&input), "--steps", "20"]);
    steps("polycube-fit", &["--steps", "50"]);
    steps("voxelize", &["--cell-size", "0.25"]);
    steps("pullback", &["--steps", "20"]);
    steps("optimize", &["--steps", "20"]);
    let out_obj = dir.path().join("hex.obj");
    steps("export", &["--out", arg(&out_obj)]);
    let text = std::fs::read_to_string(&out_obj).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 6 * 16);
}

#[test]
fn missing_session_is_io_error() {
    let out = polyhex(&["report", "--session", "/nonexistent/none.polyhex"]);
    assert_eq!(out.status.code(), Some(3));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["kind"], "io");
    assert_eq!(rec["error"]["code"], 3);
}

#[test]
fn config_and_stage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_cube(dir.path());
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[quality.weights]\nlamda = 1.0\n").unwrap();
    let out = polyhex(&["run-all", "--input", arg(&input), "--config", arg(&bad), "--out", arg(&dir.path().join("x.vtk"))]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_record(&out)["error"]["kind"], "config");

    let s = dir.path().join("s.polyhex");
    assert!(polyhex(&["deform", "--input", arg(&input), "--session", arg(&s), "--steps", "1"]).status.success());
    let out = polyhex(&["pullback", "--session", arg(&s)]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_record(&out)["error"]["kind"], "stage");

    let garbage = dir.path().join("g.polyhex");
    std::fs::write(&garbage, b"POLYHEX\0garbage").unwrap();
    let out = polyhex(&["report", "--session", arg(&garbage)]);
    assert_eq!(out.status.code(), Some(3));
}
