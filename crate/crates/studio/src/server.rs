//! Session server: an acceptor thread, one session owner thread and at most
//! one optimizer worker.
//!
//! The owner holds the [`Session`] and is the only writer on the client
//! connection, so responses and events leave in one order. During a run the
//! session moves to the worker, which reports progress and geometry
//! snapshots to the owner over a channel; the owner keeps a cached
//! [`StateView`] to answer `get-state` meanwhile.

use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use polyhex::optim::{self, Control, EnergyReport, LoopOutcome, StepInfo};
use polyhex::pipeline::{DEFAULT_DEFORM_STEPS, DEFAULT_POLYCUBE_STEPS, DEFAULT_PULLBACK_STEPS};
use polyhex::polycube::{self, PolyCube};
use polyhex::pullback::TargetSurface;
use polyhex::quality::{self, SurfaceMode, DEFAULT_QUALITY_STEPS, DEFAULT_REPORT_SAMPLES};
use polyhex::session::{Session, StageWeights};
use polyhex::{Vec3, mesh::TriSurface};
use serde_json::{json, Value};

use crate::frame::{read_frame, write_frame, BufferData, Frame};
use crate::protocol::{
    merge_patch, Command, Event, EventKind, Message, Mutation, Query, Request, Response, RunStage, StartPayload, Status,
    PROTOCOL_VERSION,
};
use crate::state::{self, StateDelta, StateView, PART_DEFORMED, PART_HEX_POSITIONS, PART_POLYCUBE, PART_WEIGHTS};
use crate::StudioError;

/// Minimum interval between geometry snapshots during a run (10 per second).
pub const SNAPSHOT_INTERVAL: Duration = Duration::from_millis(100);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Copy, Debug)]
pub struct ServeOptions {
    pub snapshot_interval: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { snapshot_interval: SNAPSHOT_INTERVAL }
    }
}

enum OwnerMsg {
    Connected { conn: u64, stream: TcpStream },
    Frame { conn: u64, frame: Frame },
    Disconnected { conn: u64 },
    Worker(WorkerMsg),
    Shutdown,
}

enum WorkerMsg {
    Progress { stage: RunStage, step: usize, report: EnergyReport, lr_used: Option<f64> },
    Snapshot(StateDelta),
    Done { session: Box<Session>, stage: RunStage, weights: StageWeights, result: Result<RunSummary, String> },
}

struct RunSummary {
    outcome: LoopOutcome,
    landmark_inversions: Vec<usize>,
}

struct Run {
    stage: RunStage,
    cancel: Arc<AtomicBool>,
    pending: Arc<Mutex<Option<StageWeights>>>,
    worker: JoinHandle<()>,
}

/// A running server. Dropping the handle leaves it running; call
/// [`ServerHandle::stop`] to shut it down and get the session back.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    tx: Sender<OwnerMsg>,
    acceptor: JoinHandle<()>,
    owner: JoinHandle<Session>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Cancel any run, close the connection and return the session.
    pub fn stop(self) -> Session {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        let _ = self.tx.send(OwnerMsg::Shutdown);
        let _ = self.acceptor.join();
        self.owner.join().expect("owner thread panicked")
    }

    /// Block until the server stops (it only stops through [`Self::stop`]).
    pub fn wait(self) -> Session {
        let _ = self.acceptor.join();
        self.owner.join().expect("owner thread panicked")
    }
}

/// Serve `session` on a loopback address. Port 0 picks a free port.
pub fn serve(session: Session, addr: impl ToSocketAddrs) -> Result<ServerHandle, StudioError> {
    serve_with(session, addr, ServeOptions::default())
}

pub fn serve_with(session: Session, addr: impl ToSocketAddrs, options: ServeOptions) -> Result<ServerHandle, StudioError> {
    session.validate()?;
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    if !addr.ip().is_loopback() {
        return Err(StudioError::NotLoopback(addr));
    }
    let view = StateView::from_session(&session)?;
    let (tx, rx) = mpsc::channel();
    let shutdown = Arc::new(AtomicBool::new(false));
    let active = Arc::new(AtomicBool::new(false));

    let acceptor = {
        let (tx, shutdown, active) = (tx.clone(), shutdown.clone(), active.clone());
        std::thread::Builder::new().name("studio-accept".into()).spawn(move || accept_loop(listener, tx, shutdown, active))?
    };
    let owner = {
        let owner = Owner { session: Some(session), view, conn: None, seq: 0, run: None, tx: tx.clone(), active, options };
        std::thread::Builder::new().name("studio-owner".into()).spawn(move || owner.run(rx))?
    };
    log::info!("studio listening on {addr}");
    Ok(ServerHandle { addr, shutdown, tx, acceptor, owner })
}

fn send_message(stream: &mut TcpStream, m: &Message) -> Result<(), StudioError> {
    write_frame(stream, &Frame::json(serde_json::to_value(m)?))
}

/// Reads the client hello before any reply, so a rejection is not lost to a
/// reset caused by unread data.
fn handshake(stream: &mut TcpStream, busy: bool) -> Result<(), StudioError> {
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let frame = read_frame(stream)?.ok_or_else(|| StudioError::Protocol("closed before hello".into()))?;
    match serde_json::from_value::<Message>(frame.header) {
        Ok(Message::Hello { protocol, .. }) if protocol == PROTOCOL_VERSION => {}
        Ok(Message::Hello { protocol, .. }) => {
            let message = format!("protocol version {protocol} is not supported (server speaks {PROTOCOL_VERSION})");
            send_message(stream, &Message::Error { message: message.clone() })?;
            return Err(StudioError::Rejected(message));
        }
        _ => {
            send_message(stream, &Message::Error { message: "expected hello".into() })?;
            return Err(StudioError::Protocol("expected hello".into()));
        }
    }
    if busy {
        let message = "busy: another client is connected".to_string();
        send_message(stream, &Message::Error { message: message.clone() })?;
        return Err(StudioError::Rejected(message));
    }
    stream.set_read_timeout(None)?;
    send_message(stream, &Message::Hello { protocol: PROTOCOL_VERSION, role: "server".into() })
}

fn accept_loop(listener: TcpListener, tx: Sender<OwnerMsg>, shutdown: Arc<AtomicBool>, active: Arc<AtomicBool>) {
    let mut next_conn = 0u64;
    for stream in listener.incoming() {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        let Ok(mut stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        if let Err(e) = handshake(&mut stream, active.load(Ordering::SeqCst)) {
            log::warn!("handshake failed: {e}");
            continue;
        }
        let Ok(mut reader) = stream.try_clone() else { continue };
        active.store(true, Ordering::SeqCst);
        let conn = next_conn;
        next_conn += 1;
        if tx.send(OwnerMsg::Connected { conn, stream }).is_err() {
            break;
        }
        let tx = tx.clone();
        std::thread::spawn(move || {
            loop {
                match read_frame(&mut reader) {
                    Ok(Some(frame)) => {
                        if tx.send(OwnerMsg::Frame { conn, frame }).is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        log::warn!("connection {conn}: {e}");
                        break;
                    }
                }
            }
            let _ = tx.send(OwnerMsg::Disconnected { conn });
        });
    }
}

struct Owner {
    session: Option<Session>,
    view: StateView,
    conn: Option<(u64, TcpStream)>,
    seq: u64,
    run: Option<Run>,
    tx: Sender<OwnerMsg>,
    active: Arc<AtomicBool>,
    options: ServeOptions,
}

type Reply = (Status, Value, Vec<BufferData>);

fn ok(payload: Value) -> Reply {
    (Status::Ok, payload, Vec::new())
}

fn error(message: impl std::fmt::Display) -> Reply {
    (Status::Error, json!({ "message": message.to_string() }), Vec::new())
}

fn busy(stage: RunStage) -> Reply {
    (Status::Busy, json!({ "message": format!("an optimization of stage `{}` is running", stage.name()), "stage": stage }), Vec::new())
}

impl Owner {
    fn run(mut self, rx: Receiver<OwnerMsg>) -> Session {
        while let Ok(msg) = rx.recv() {
            match msg {
                OwnerMsg::Connected { conn, stream } => {
                    // the accept loop has already marked the slot taken
                    if let Some((_, old)) = self.conn.replace((conn, stream)) {
                        let _ = old.shutdown(Shutdown::Both);
                    }
                }
                OwnerMsg::Frame { conn, frame } => {
                    if self.conn.as_ref().is_some_and(|(c, _)| *c == conn) {
                        self.handle_frame(frame);
                    }
                }
                OwnerMsg::Disconnected { conn } => {
                    if self.conn.as_ref().is_some_and(|(c, _)| *c == conn) {
                        self.drop_connection();
                    }
                }
                OwnerMsg::Worker(w) => self.handle_worker(w),
                OwnerMsg::Shutdown => break,
            }
        }
        self.drop_connection();
        if let Some(run) = self.run.take() {
            run.cancel.store(true, Ordering::SeqCst);
            let _ = run.worker.join();
            // the worker's final message is still queued
            while let Ok(msg) = rx.try_recv() {
                if let OwnerMsg::Worker(WorkerMsg::Done { session, .. }) = msg {
                    self.session = Some(*session);
                }
            }
        }
        self.session.expect("session returned by the worker")
    }

    fn drop_connection(&mut self) {
        if let Some((_, stream)) = self.conn.take() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        if let Some(run) = &self.run {
            run.cancel.store(true, Ordering::SeqCst);
        }
        self.active.store(false, Ordering::SeqCst);
    }

    fn write(&mut self, frame: &Frame) {
        let Some((_, stream)) = self.conn.as_mut() else { return };
        let bytes = match frame.encode() {
            Ok(b) => b,
            Err(e) => {
                log::error!("encoding frame: {e}");
                return;
            }
        };
        if let Err(e) = stream.write_all(&bytes).and_then(|_| stream.flush()) {
            log::warn!("client write failed: {e}");
            self.drop_connection();
        }
    }

    fn event(&mut self, event: EventKind, payload: Value, buffers: Vec<BufferData>) {
        let m = Message::Event(Event { seq: self.seq, event, payload });
        self.seq += 1;
        let header = serde_json::to_value(&m).expect("event serializes");
        self.write(&Frame { header, buffers });
    }

    fn warning(&mut self, message: impl Into<String>) {
        self.event(EventKind::Warning, json!({ "message": message.into() }), Vec::new());
    }

    fn emit_delta(&mut self, delta: StateDelta) {
        if delta.is_empty() {
            return;
        }
        self.view.apply(&delta);
        let mut table = Vec::new();
        let payload = state::encode_delta(&delta, &self.view.checksum(), &mut table);
        self.event(EventKind::StateDelta, payload, table);
    }

    /// Rebuild the view from the session and stream what changed.
    fn refresh(&mut self) {
        let Some(s) = &self.session else { return };
        match StateView::from_session(s) {
            Ok(v) => {
                let d = self.view.diff(&v);
                self.emit_delta(d);
            }
            Err(e) => self.warning(format!("state snapshot failed: {e}")),
        }
    }

    fn respond(&mut self, id: u64, (status, payload, buffers): Reply) {
        let header = serde_json::to_value(Message::Response(Response { id, status, payload })).expect("response serializes");
        self.write(&Frame { header, buffers });
    }

    fn handle_frame(&mut self, frame: Frame) {
        let id = frame.header.get("id").and_then(Value::as_u64);
        match serde_json::from_value::<Message>(frame.header) {
            Ok(Message::Request(r)) => {
                let id = r.id;
                let reply = self.handle_request(r);
                self.respond(id, reply);
            }
            Ok(_) => self.warning("only requests are accepted after the handshake"),
            Err(e) => match id {
                Some(id) => self.respond(id, error(format!("malformed request: {e}"))),
                None => self.warning(format!("malformed frame without a request id: {e}")),
            },
        }
    }

    fn handle_request(&mut self, r: Request) -> Reply {
        let running = self.run.as_ref().map(|run| run.stage);
        match r.command {
            Command::GetState => {
                let mut table = Vec::new();
                let parts = state::encode_parts(&self.view.parts, &mut table);
                (Status::Ok, json!({ "parts": parts, "checksum": self.view.checksum(), "running": running }), table)
            }
            Command::Cancel => {
                if let Some(run) = &self.run {
                    run.cancel.store(true, Ordering::SeqCst);
                }
                ok(json!({ "running": running }))
            }
            Command::Mutate => {
                let m: Mutation = match serde_json::from_value(r.payload) {
                    Ok(m) => m,
                    Err(e) => return error(format!("bad mutation: {e}")),
                };
                if let Mutation::SetWeights { weights } = &m {
                    return self.update_weights(weights);
                }
                if let Some(stage) = running {
                    return busy(stage);
                }
                let s = self.session.as_mut().expect("idle owner holds the session");
                match apply_mutation(s, m) {
                    Ok(v) => {
                        self.refresh();
                        ok(v)
                    }
                    Err(e) => error(e),
                }
            }
            Command::OptimizeStart => {
                if let Some(stage) = running {
                    return busy(stage);
                }
                let Some(stage) = r.stage else { return error("optimize-start needs a stage") };
                let start: StartPayload = match r.payload {
                    Value::Null => StartPayload::default(),
                    p => match serde_json::from_value(p) {
                        Ok(s) => s,
                        Err(e) => return error(format!("bad optimize-start payload: {e}")),
                    },
                };
                let s = self.session.as_ref().expect("idle owner holds the session");
                if let Err(e) = preflight(s, stage) {
                    return error(e);
                }
                let steps = start.steps.unwrap_or(default_steps(stage));
                self.start_run(stage, steps);
                ok(json!({ "started": true, "stage": stage, "steps": steps }))
            }
            Command::Query => {
                if let Some(stage) = running {
                    return busy(stage);
                }
                let q: Query = match serde_json::from_value(r.payload) {
                    Ok(q) => q,
                    Err(e) => return error(format!("bad query: {e}")),
                };
                match run_query(self.session.as_ref().expect("idle owner holds the session"), q) {
                    Ok(v) => ok(v),
                    Err(e) => error(e),
                }
            }
            Command::Save => {
                if let Some(stage) = running {
                    return busy(stage);
                }
                let Some(path) = r.payload.get("path").and_then(Value::as_str) else { return error("save needs a `path`") };
                match polyhex::session::save_session(std::path::Path::new(path), self.session.as_ref().expect("idle")) {
                    Ok(()) => ok(json!({ "path": path })),
                    Err(e) => error(e),
                }
            }
        }
    }

    fn update_weights(&mut self, patch: &Value) -> Reply {
        let mut current = self.view.parts.get(PART_WEIGHTS).map(|p| p.meta.clone()).unwrap_or(Value::Null);
        merge_patch(&mut current, patch);
        let w: StageWeights = match serde_json::from_value(current) {
            Ok(w) => w,
            Err(e) => return error(format!("bad weights: {e}")),
        };
        if let Err(e) = w.quality.validate() {
            return error(e);
        }
        match &self.run {
            Some(run) => {
                *run.pending.lock().expect("weights lock") = Some(w);
                let part = state::Part::meta(serde_json::to_value(w).expect("weights serialize"));
                self.emit_delta(StateDelta::single(PART_WEIGHTS, part));
            }
            None => {
                if let Err(e) = self.session.as_mut().expect("idle owner holds the session").set_weights(w) {
                    return error(e);
                }
                self.refresh();
            }
        }
        ok(json!({ "applied": true, "live": self.run.is_some() }))
    }

    fn start_run(&mut self, stage: RunStage, steps: usize) {
        let session = self.session.take().expect("idle owner holds the session");
        let cancel = Arc::new(AtomicBool::new(false));
        let pending = Arc::new(Mutex::new(None));
        let worker = {
            let (cancel, pending, tx, interval) = (cancel.clone(), pending.clone(), self.tx.clone(), self.options.snapshot_interval);
            std::thread::Builder::new()
                .name("studio-worker".into())
                .spawn(move || run_worker(session, stage, steps, &cancel, &pending, &tx, interval))
                .expect("spawning the worker thread")
        };
        self.run = Some(Run { stage, cancel, pending, worker });
    }

    fn handle_worker(&mut self, msg: WorkerMsg) {
        match msg {
            WorkerMsg::Progress { stage, step, report, lr_used } => {
                let payload = json!({
                    "stage": stage,
                    "step": step,
                    "total": report.total,
                    "terms": report.terms,
                    "lr_used": lr_used,
                    "done": false,
                });
                self.event(EventKind::Progress, payload, Vec::new());
            }
            WorkerMsg::Snapshot(delta) => self.emit_delta(delta),
            WorkerMsg::Done { session, stage, weights, result } => {
                let mut session = *session;
                let run = self.run.take();
                let late = run.as_ref().and_then(|r| r.pending.lock().expect("weights lock").take());
                if let Err(e) = session.set_weights(late.unwrap_or(weights)) {
                    self.warning(format!("weights not applied: {e}"));
                }
                if let Some(r) = run {
                    let _ = r.worker.join();
                }
                self.session = Some(session);
                self.refresh();
                let payload = match result {
                    Ok(summary) => {
                        if summary.outcome.rejected_steps > 0 {
                            self.warning(format!("{}: {} steps rejected by the inversion guard", stage.name(), summary.outcome.rejected_steps));
                        }
                        if !summary.landmark_inversions.is_empty() {
                            self.warning(format!("landmarks {:?} invert elements", summary.landmark_inversions));
                        }
                        json!({
                            "stage": stage,
                            "done": true,
                            "steps": summary.outcome.history.len(),
                            "cancelled": summary.outcome.cancelled,
                            "rejected_steps": summary.outcome.rejected_steps,
                            "error": null,
                        })
                    }
                    Err(e) => json!({ "stage": stage, "done": true, "steps": 0, "cancelled": false, "error": e }),
                };
                self.event(EventKind::Progress, payload, Vec::new());
            }
        }
    }
}

fn default_steps(stage: RunStage) -> usize {
    match stage {
        RunStage::Deform => DEFAULT_DEFORM_STEPS,
        RunStage::Polycube => DEFAULT_POLYCUBE_STEPS,
        RunStage::Phase1 | RunStage::Phase2 => DEFAULT_PULLBACK_STEPS,
        RunStage::Quality => DEFAULT_QUALITY_STEPS,
    }
}

fn preflight(s: &Session, stage: RunStage) -> Result<(), String> {
    use polyhex::session::Stage;
    match stage {
        RunStage::Deform => Ok(()),
        RunStage::Polycube if s.polycube.is_empty() => Err("the PolyCube has no cuboids; add one first".into()),
        RunStage::Phase1 if s.hex.is_none() => Err("no hex mesh; voxelize and build it first".into()),
        RunStage::Phase2 if s.cursor < Stage::Phase1 => Err("phase 1 has not run".into()),
        RunStage::Quality if s.cursor < Stage::Phase2 => Err("the pullback has not finished".into()),
        _ => Ok(()),
    }
}

fn apply_mutation(s: &mut Session, m: Mutation) -> polyhex::Result<Value> {
    Ok(match m {
        Mutation::AddCuboid { center, half } => {
            json!({ "id": s.edit_polycube(|pc| pc.add(polycube::Cuboid::new(center, half)))? })
        }
        Mutation::SuggestAdd { mode } => json!({ "id": s.polycube_add(mode)? }),
        Mutation::Subtract => json!({ "region": s.polycube_subtract()? }),
        Mutation::RemoveCuboid { id } => json!({ "removed": s.edit_polycube(|pc| pc.remove(id))? }),
        Mutation::DuplicateCuboid { id } => json!({ "id": s.edit_polycube(|pc| pc.duplicate(id))? }),
        Mutation::TranslateCuboid { id, delta } => {
            s.edit_polycube(|pc| pc.translate(id, delta))?;
            json!({})
        }
        Mutation::SetCuboidCenter { id, center } => {
            s.edit_polycube(|pc| pc.set_center(id, center))?;
            json!({})
        }
        Mutation::ResizeCuboid { id, half } => {
            s.edit_polycube(|pc| pc.resize(id, half))?;
            json!({})
        }
        Mutation::LockCuboid { id, locked } => {
            s.edit_polycube(|pc| pc.set_locked(id, locked))?;
            json!({})
        }
        Mutation::StickySnap { id, tolerance } => json!({ "moved": s.edit_polycube(|pc| pc.sticky_snap(id, tolerance))? }),
        Mutation::Voxelize { cell_size } => {
            let g = s.voxelize(cell_size)?;
            json!({ "cells": g.len(), "cell_size": g.cell_size })
        }
        Mutation::VoxelEdit { edit, target } => {
            let out = s.edit_voxels(edit, target)?;
            json!({ "changed": out.changed, "notice": out.notice })
        }
        Mutation::VoxelUndo => json!({ "undone": s.undo_voxel_edit()? }),
        Mutation::BuildHex { pad, allow_invalid_topology } => {
            let h = s.build_hex(pad, allow_invalid_topology)?;
            json!({ "hexes": h.rest.hexes().len(), "vertices": h.rest.vertices().len() })
        }
        Mutation::SetLandmark { vertex, position } => {
            s.set_landmark(vertex, position)?;
            json!({})
        }
        Mutation::RemoveLandmark { vertex } => json!({ "removed": s.remove_landmark(vertex) }),
        Mutation::SetWeights { .. } => unreachable!("handled by the owner"),
    })
}

fn run_query(s: &Session, q: Query) -> Result<Value, String> {
    let e = |e: polyhex::Error| e.to_string();
    match q {
        Query::Filter { filter } => {
            let hex = s.current_hex().ok_or("no hex mesh yet")?;
            Ok(json!({ "elements": quality::filter_elements(&hex, &filter) }))
        }
        Query::Report { samples } => {
            let r = s.report(samples.unwrap_or(DEFAULT_REPORT_SAMPLES)).map_err(e)?;
            serde_json::to_value(r).map_err(|e| e.to_string())
        }
        Query::Topology => {
            let g = s.voxels.as_ref().ok_or("no voxel grid yet")?;
            let t = g.validate_topology().map_err(|x| x.to_string())?;
            serde_json::to_value(t).map_err(|e| e.to_string())
        }
    }
}

/// Streams snapshots at most once per `interval`, always on the first step.
struct Throttle {
    interval: Duration,
    last: Option<Instant>,
}

impl Throttle {
    fn due(&mut self) -> bool {
        let now = Instant::now();
        if self.last.is_none_or(|t| now.duration_since(t) >= self.interval) {
            self.last = Some(now);
            true
        } else {
            false
        }
    }
}

fn unpack_polycube(pc: &PolyCube, x: &[f64]) -> PolyCube {
    let mut out = pc.clone();
    for (c, p) in out.cuboids.iter_mut().filter(|c| !c.locked).zip(x.chunks_exact(6)) {
        c.center = Vec3::new(p[0], p[1], p[2]);
        c.half = Vec3::new(p[3], p[4], p[5]);
    }
    out
}

/// Hex positions for the streamed parameters: in constrained mode surface
/// vertices sit at the closest input point of their latent.
fn realize_quality(x: &[f64], surface: &[usize], input: Option<&TargetSurface>, pinned: &dyn Fn(usize) -> bool) -> Vec<Vec3> {
    let mut pos = optim::unflatten(x);
    if let Some(t) = input {
        for &v in surface {
            if !pinned(v) {
                pos[v] = t.index.project(&pos[v]).point;
            }
        }
    }
    pos
}

fn run_worker(
    mut session: Session,
    stage: RunStage,
    steps: usize,
    cancel: &AtomicBool,
    pending: &Mutex<Option<StageWeights>>,
    tx: &Sender<OwnerMsg>,
    interval: Duration,
) {
    let mut weights = session.weights();
    let mut throttle = Throttle { interval, last: None };
    let send = |m: WorkerMsg| {
        let _ = tx.send(OwnerMsg::Worker(m));
    };
    let progress = |info: &StepInfo| {
        send(WorkerMsg::Progress { stage, step: info.step, report: info.report.clone(), lr_used: info.lr_used });
    };
    let take_pending = |weights: &mut StageWeights| -> bool {
        match pending.lock().expect("weights lock").take() {
            Some(w) => {
                *weights = w;
                true
            }
            None => false,
        }
    };

    let result: polyhex::Result<RunSummary> = (|| {
        let summary = |outcome| RunSummary { outcome, landmark_inversions: Vec::new() };
        match stage {
            RunStage::Deform => {
                let surface: TriSurface = session.input.boundary()?;
                let out = session.deform(steps, Some(cancel), |info, w| {
                    if take_pending(&mut weights) {
                        *w = weights.deform;
                    }
                    progress(info);
                    if throttle.due() {
                        send(WorkerMsg::Snapshot(StateDelta::single(PART_DEFORMED, state::deformed_part(&surface, &optim::unflatten(info.params)))));
                    }
                    Control::Continue
                })?;
                Ok(summary(out))
            }
            RunStage::Polycube => {
                let start = session.polycube.clone();
                let out = session.polycube_fit(steps, Some(cancel), |info| {
                    take_pending(&mut weights);
                    progress(info);
                    if throttle.due() {
                        if let Ok(part) = state::polycube_part(&unpack_polycube(&start, info.params)) {
                            send(WorkerMsg::Snapshot(StateDelta::single(PART_POLYCUBE, part)));
                        }
                    }
                    Control::Continue
                })?;
                Ok(summary(out))
            }
            RunStage::Phase1 | RunStage::Phase2 => {
                let mut cb = |info: &StepInfo, w: &mut polyhex::pullback::PullbackWeights| {
                    if take_pending(&mut weights) {
                        *w = weights.pullback;
                    }
                    progress(info);
                    if throttle.due() {
                        send(WorkerMsg::Snapshot(StateDelta::single(PART_HEX_POSITIONS, state::positions_part(&optim::unflatten(info.params)))));
                    }
                    Control::Continue
                };
                let out = if stage == RunStage::Phase1 {
                    session.pullback_phase1(steps, Some(cancel), &mut cb)?
                } else {
                    session.pullback_phase2(steps, Some(cancel), &mut cb)?
                };
                Ok(summary(out))
            }
            RunStage::Quality => {
                let hex = session.hex.as_ref().expect("checked by preflight").rest.boundary()?;
                let target = session.input_target()?;
                let constrained = session.quality_mode == SurfaceMode::Constrained;
                let landmarks = session.landmarks.clone();
                let pinned = |v: usize| landmarks.0.contains_key(&v);
                let out = session.optimize(steps, Some(cancel), |info, w| {
                    if take_pending(&mut weights) {
                        *w = weights.quality;
                    }
                    progress(info);
                    if throttle.due() {
                        let pos = realize_quality(info.params, &hex.volume_index, constrained.then_some(&target), &pinned);
                        send(WorkerMsg::Snapshot(StateDelta::single(PART_HEX_POSITIONS, state::positions_part(&pos))));
                    }
                    Control::Continue
                })?;
                Ok(RunSummary { outcome: out.run, landmark_inversions: out.landmark_inversions })
            }
        }
    })();
    take_pending(&mut weights);
    send(WorkerMsg::Done { session: Box::new(session), stage, weights, result: result.map_err(|e| e.to_string()) });
}
