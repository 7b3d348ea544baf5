use polyhex::fixtures;
use polyhex::io::normalize_tet_mesh;
use polyhex::optim::Control;
use polyhex::session::Session;
use polyhex::Vec3;
use polyhex_studio::protocol::{Command, EventKind, RunStage, Status};
use polyhex_studio::state::{PART_HEX_POSITIONS, PART_POLYCUBE, PART_WEIGHTS};
use polyhex_studio::{serve, serve_with, Client, ServeOptions, StudioError};
use serde_json::{json, Value};

fn cube_session() -> Session {
    let loaded = normalize_tet_mesh(fixtures::cube_tet_mesh(4, 1.0), Vec::new());
    Session::new(loaded.mesh, loaded.normalization, 3)
}

/// Cube session with one fitted cuboid.
fn decomposed() -> Session {
    let mut s = cube_session();
    s.deform(5, None, |_, _| Control::Continue).unwrap();
    s.fit.steps = 20;
    assert_eq!(s.polycube_auto(4, None, |_| Control::Continue).unwrap(), 1);
    s
}

/// Cube session ready for phase 1.
fn with_hex() -> Session {
    let mut s = decomposed();
    s.voxelize(Some(0.25)).unwrap();
    s.build_hex(false, false).unwrap();
    s
}

fn mutate(c: &mut Client, payload: Value) -> polyhex_studio::protocol::Response {
    c.call(Command::Mutate, None, payload).unwrap()
}

fn start(c: &mut Client, stage: RunStage, steps: usize) {
    let r = c.call(Command::OptimizeStart, Some(stage), json!({ "steps": steps })).unwrap();
    assert_eq!(r.status, Status::Ok, "{:?}", r.payload);
}

#[test]
fn get_state_after_load_lists_cuboids() {
    let s = decomposed();
    let expect = serde_json::to_value(&s.polycube.cuboids).unwrap();
    let server = serve(s, "127.0.0.1:0").unwrap();
    let mut c = Client::connect(server.addr()).unwrap();
    let checksum = c.get_state().unwrap();
    assert_eq!(c.view.checksum(), checksum);
    assert_eq!(c.view.parts[PART_POLYCUBE].meta["cuboids"], expect);
    let input = &c.view.parts["input"];
    assert_eq!(input.buffer("triangles").unwrap().len(), 3 * input.meta["triangles"].as_u64().unwrap() as usize);
    drop(c);
    server.stop();
}

#[test]
fn handshake_and_single_client() {
    let server = serve(cube_session(), "127.0.0.1:0").unwrap();
    assert!(matches!(Client::connect_with_version(server.addr(), 99), Err(StudioError::Rejected(_))));
    let mut first = Client::connect(server.addr()).unwrap();
    let second = Client::connect(server.addr());
    assert!(matches!(second, Err(StudioError::Rejected(_))), "{:?}", second.err());
    first.get_state().unwrap();
    drop(first);
    // the slot frees once the first client disconnects
    let mut again = None;
    for _ in 0..50 {
        match Client::connect(server.addr()) {
            Ok(c) => {
                again = Some(c);
                break;
            }
            Err(_) => std::thread::sleep(std::time::Duration::from_millis(20)),
        }
    }
    again.expect("reconnect").get_state().unwrap();
    server.stop();
}

#[test]
fn refuses_non_loopback() {
    assert!(matches!(serve(cube_session(), "0.0.0.0:0"), Err(StudioError::NotLoopback(_))));
}

#[test]
fn cancel_gives_terminal_event_and_matching_state() {
    let server = serve(with_hex(), "127.0.0.1:0").unwrap();
    let mut c = Client::connect(server.addr()).unwrap();
    c.get_state().unwrap();
    start(&mut c, RunStage::Phase1, 100_000);
    let mut progress = 0;
    while progress < 3 {
        if c.next_event().unwrap().event == EventKind::Progress {
            progress += 1;
        }
    }
    assert_eq!(c.call(Command::Cancel, None, Value::Null).unwrap().status, Status::Ok);
    let done = c.wait_done().unwrap();
    assert_eq!(done.payload["cancelled"], true);
    assert!(done.payload["steps"].as_u64().unwrap() < 100_000);
    let streamed = c.view.clone();
    let checksum = c.get_state().unwrap();
    assert_eq!(streamed.checksum(), checksum);
    assert_eq!(streamed, c.view);
    assert_eq!(c.checksum_mismatches, 0);
    drop(c);
    let s = server.stop();
    let last = c_positions(&streamed);
    let kept: Vec<f32> = s.current_hex().unwrap().vertices().iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    assert_eq!(last, kept);
}

fn c_positions(view: &polyhex_studio::StateView) -> Vec<f32> {
    view.parts[PART_HEX_POSITIONS].buffer("positions").unwrap().as_f32().unwrap().to_vec()
}

#[test]
fn busy_rejection_except_weights_and_cancel() {
    let server = serve(with_hex(), "127.0.0.1:0").unwrap();
    let mut c = Client::connect(server.addr()).unwrap();
    start(&mut c, RunStage::Phase1, 100_000);
    let r = mutate(&mut c, json!({ "op": "voxel_undo" }));
    assert_eq!(r.status, Status::Busy);
    let r = c.call(Command::OptimizeStart, Some(RunStage::Phase1), Value::Null).unwrap();
    assert_eq!(r.status, Status::Busy);
    let r = c.call(Command::Query, None, json!({ "query": "topology" })).unwrap();
    assert_eq!(r.status, Status::Busy);
    let r = mutate(&mut c, json!({ "op": "set_weights", "weights": { "pullback": { "lap": 2.0 } } }));
    assert_eq!(r.status, Status::Ok, "{:?}", r.payload);
    assert_eq!(c.view.parts[PART_WEIGHTS].meta["pullback"]["lap"], 2.0);
    assert_eq!(c.call(Command::Cancel, None, Value::Null).unwrap().status, Status::Ok);
    c.wait_done().unwrap();
    assert_eq!(c.call(Command::Query, None, json!({ "query": "topology" })).unwrap().status, Status::Ok);
    drop(c);
    let s = server.stop();
    assert_eq!(s.pullback_weights.lap, 2.0);
    assert_eq!(s.pullback.as_ref().unwrap().weights.lap, 2.0);
}

#[test]
fn weight_update_mid_run_changes_energy_terms() {
    let server = serve(with_hex(), "127.0.0.1:0").unwrap();
    let mut c = Client::connect(server.addr()).unwrap();
    c.get_state().unwrap();
    let lap0 = c.view.parts[PART_WEIGHTS].meta["pullback"]["lap"].as_f64().unwrap();
    start(&mut c, RunStage::Phase1, 100_000);
    let mut before = Vec::new();
    while before.len() < 3 {
        let e = c.next_event().unwrap();
        if e.event == EventKind::Progress {
            before.push(e.payload["terms"]["lap"].as_f64().unwrap());
        }
    }
    let scale = 1000.0;
    let r = mutate(&mut c, json!({ "op": "set_weights", "weights": { "pullback": { "lap": lap0 * scale } } }));
    assert_eq!(r.status, Status::Ok);
    // a few steps later the lap term carries the new weight
    let mut after = Vec::new();
    while after.len() < 5 {
        let e = c.next_event().unwrap();
        if e.event == EventKind::Progress {
            after.push(e.payload["terms"]["lap"].as_f64().unwrap());
        }
    }
    c.call(Command::Cancel, None, Value::Null).unwrap();
    c.wait_done().unwrap();
    let b = before.last().unwrap();
    let a = after.last().unwrap();
    assert!(*a > 50.0 * b, "lap term before {b}, after {a}");
    drop(c);
    server.stop();
}

#[test]
fn scripted_session_checksums_match() {
    let options = ServeOptions { snapshot_interval: std::time::Duration::ZERO };
    let server = serve_with(cube_session(), "127.0.0.1:0", options).unwrap();
    let mut c = Client::connect(server.addr()).unwrap();
    c.get_state().unwrap();
    let run = |c: &mut Client, stage: RunStage, steps: usize| {
        start(c, stage, steps);
        let done = c.wait_done().unwrap();
        assert_eq!(done.payload["error"], Value::Null, "{stage:?}: {:?}", done.payload);
        assert_eq!(done.payload["steps"], steps);
    };
    let script = [
        json!({ "op": "add_cuboid", "center": [0.0, 0.0, 0.0], "half": [0.4, 0.4, 0.4] }),
        json!({ "op": "duplicate_cuboid", "id": 0 }),
        json!({ "op": "translate_cuboid", "id": 1, "delta": [0.05, 0.0, 0.0] }),
        json!({ "op": "remove_cuboid", "id": 1 }),
        json!({ "op": "resize_cuboid", "id": 0, "half": [0.5, 0.5, 0.5] }),
        json!({ "op": "sticky_snap", "id": 0, "tolerance": 0.01 }),
    ];
    run(&mut c, RunStage::Deform, 5);
    for m in &script {
        let r = mutate(&mut c, m.clone());
        assert_eq!(r.status, Status::Ok, "{m}: {:?}", r.payload);
    }
    run(&mut c, RunStage::Polycube, 10);
    for m in [
        json!({ "op": "voxelize", "cell_size": 0.25 }),
        json!({ "op": "voxel_edit", "edit": "remove", "target": { "cell": [0, 0, 0] } }),
        json!({ "op": "voxel_undo" }),
        json!({ "op": "build_hex" }),
    ] {
        let r = mutate(&mut c, m.clone());
        assert_eq!(r.status, Status::Ok, "{m}: {:?}", r.payload);
    }
    run(&mut c, RunStage::Phase1, 10);
    run(&mut c, RunStage::Phase2, 10);
    let r = mutate(&mut c, json!({ "op": "set_weights", "weights": { "quality": { "custom": 0.5 } } }));
    assert_eq!(r.status, Status::Ok, "{:?}", r.payload);
    run(&mut c, RunStage::Quality, 10);
    let r = mutate(&mut c, json!({ "op": "set_weights", "weights": { "quality": { "custom": -1.0 } } }));
    assert_eq!(r.status, Status::Error);
    let r = mutate(&mut c, json!({ "op": "no_such_op" }));
    assert_eq!(r.status, Status::Error);

    let r = c.call(Command::Query, None, json!({ "query": "report", "samples": 2000 })).unwrap();
    assert_eq!(r.status, Status::Ok);
    assert_eq!(r.payload["hexes"], 64);
    let r = c.call(Command::Query, None, json!({ "query": "filter", "filter": { "quality": { "threshold": 2.0 } } })).unwrap();
    assert_eq!(r.status, Status::Ok, "{:?}", r.payload);
    assert_eq!(r.payload["elements"].as_array().unwrap().len(), 64);

    let accumulated = c.view.checksum();
    assert_eq!(c.checksum_mismatches, 0);
    assert_eq!(c.get_state().unwrap(), accumulated);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.phx");
    let r = c.call(Command::Save, None, json!({ "path": path })).unwrap();
    assert_eq!(r.status, Status::Ok, "{:?}", r.payload);
    drop(c);
    let s = server.stop();
    let saved = polyhex::session::load_session(&path).unwrap();
    assert_eq!(saved, s);
    assert_eq!(s.quality_weights.custom, 0.5);
}

#[test]
fn pinned_landmark_streams_at_its_position() {
    let mut s = with_hex();
    s.pullback_phase1(5, None, |_, _| Control::Continue).unwrap();
    s.pullback_phase2(5, None, |_, _| Control::Continue).unwrap();
    let hex = s.current_hex().unwrap();
    let v = hex.boundary().unwrap().volume_index[0];
    let target = hex.vertices()[v] + Vec3::new(0.0, 0.0, 1e-3);
    let options = ServeOptions { snapshot_interval: std::time::Duration::ZERO };
    let server = serve_with(s, "127.0.0.1:0", options).unwrap();
    let mut c = Client::connect(server.addr()).unwrap();
    c.get_state().unwrap();
    let r = mutate(&mut c, json!({ "op": "set_landmark", "vertex": v, "position": target }));
    assert_eq!(r.status, Status::Ok, "{:?}", r.payload);
    start(&mut c, RunStage::Quality, 3);
    let mut seen = 0;
    loop {
        let e = c.next_event().unwrap();
        if e.event == EventKind::StateDelta && e.payload["parts"].get(PART_HEX_POSITIONS).is_some() {
            let p = c_positions(&c.view);
            assert_eq!(&p[3 * v..3 * v + 3], &[target.x as f32, target.y as f32, target.z as f32]);
            seen += 1;
        }
        if e.event == EventKind::Progress && e.payload["done"] == true {
            break;
        }
    }
    assert!(seen >= 1);
    drop(c);
    server.stop();
}
