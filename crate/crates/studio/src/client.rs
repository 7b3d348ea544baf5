//! Blocking client, used by tests and scripted sessions.

use std::collections::VecDeque;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde_json::Value;

use crate::frame::{read_frame, write_frame, Frame};
use crate::protocol::{Command, Event, EventKind, Message, Request, Response, RunStage, Status, PROTOCOL_VERSION};
use crate::state::{decode_delta, decode_parts, StateView};
use crate::StudioError;

pub const READ_TIMEOUT: Duration = Duration::from_secs(30);

pub struct Client {
    stream: TcpStream,
    next_id: u64,
    events: VecDeque<Event>,
    /// Local mirror of the server state, kept current by state-delta events.
    pub view: StateView,
    /// State-delta events whose checksum did not match the local mirror.
    pub checksum_mismatches: usize,
    last_seq: Option<u64>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, StudioError> {
        Self::connect_with_version(addr, PROTOCOL_VERSION)
    }

    pub fn connect_with_version(addr: impl ToSocketAddrs, version: u32) -> Result<Self, StudioError> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(READ_TIMEOUT))?;
        let hello = Message::Hello { protocol: version, role: "client".into() };
        write_frame(&mut stream, &Frame::json(serde_json::to_value(hello)?))?;
        let reply = read_frame(&mut stream)?.ok_or_else(|| StudioError::Protocol("closed during handshake".into()))?;
        match serde_json::from_value(reply.header)? {
            Message::Hello { protocol, .. } if protocol == version => {}
            Message::Error { message } => return Err(StudioError::Rejected(message)),
            other => return Err(StudioError::Protocol(format!("unexpected handshake reply {other:?}"))),
        }
        Ok(Self { stream, next_id: 0, events: VecDeque::new(), view: StateView::default(), checksum_mismatches: 0, last_seq: None })
    }

    /// Send a request without waiting; returns its id.
    pub fn send(&mut self, command: Command, stage: Option<RunStage>, payload: Value) -> Result<u64, StudioError> {
        let id = self.next_id;
        self.next_id += 1;
        let m = Message::Request(Request { id, command, stage, payload });
        write_frame(&mut self.stream, &Frame::json(serde_json::to_value(m)?))?;
        Ok(id)
    }

    /// Send a request and wait for its response, queueing events that
    /// arrive meanwhile.
    pub fn call(&mut self, command: Command, stage: Option<RunStage>, payload: Value) -> Result<Response, StudioError> {
        let id = self.send(command, stage, payload)?;
        loop {
            let frame = self.read()?;
            match serde_json::from_value(frame.header.clone())? {
                Message::Response(r) if r.id == id => {
                    if command == Command::GetState && r.status == Status::Ok {
                        let parts = decode_parts(r.payload.get("parts").unwrap_or(&Value::Null), &frame.buffers)?;
                        self.view = StateView { parts };
                    }
                    return Ok(r);
                }
                Message::Response(r) => return Err(StudioError::Protocol(format!("response {} while waiting for {id}", r.id))),
                Message::Event(e) => self.accept_event(e, &frame)?,
                Message::Error { message } => return Err(StudioError::Rejected(message)),
                Message::Hello { .. } | Message::Request(_) => return Err(StudioError::Protocol("unexpected message".into())),
            }
        }
    }

    /// Replace the local mirror with the server state; returns the server's
    /// checksum.
    pub fn get_state(&mut self) -> Result<String, StudioError> {
        let r = self.call(Command::GetState, None, Value::Null)?;
        if r.status != Status::Ok {
            return Err(StudioError::Rejected(r.payload.to_string()));
        }
        r.payload["checksum"].as_str().map(str::to_owned).ok_or_else(|| StudioError::Protocol("get-state without checksum".into()))
    }

    /// Next event, queued or read from the connection.
    pub fn next_event(&mut self) -> Result<Event, StudioError> {
        if let Some(e) = self.events.pop_front() {
            return Ok(e);
        }
        loop {
            let frame = self.read()?;
            match serde_json::from_value(frame.header.clone())? {
                Message::Event(e) => {
                    self.accept_event(e, &frame)?;
                    return Ok(self.events.pop_front().expect("just queued"));
                }
                Message::Error { message } => return Err(StudioError::Rejected(message)),
                other => return Err(StudioError::Protocol(format!("unexpected {other:?} while waiting for an event"))),
            }
        }
    }

    /// Read events until the terminal progress event of a run.
    pub fn wait_done(&mut self) -> Result<Event, StudioError> {
        loop {
            let e = self.next_event()?;
            if e.event == EventKind::Progress && e.payload["done"] == Value::Bool(true) {
                return Ok(e);
            }
        }
    }

    fn read(&mut self) -> Result<Frame, StudioError> {
        read_frame(&mut self.stream)?.ok_or_else(|| StudioError::Protocol("server closed the connection".into()))
    }

    fn accept_event(&mut self, e: Event, frame: &Frame) -> Result<(), StudioError> {
        if let Some(last) = self.last_seq {
            if e.seq != last + 1 {
                return Err(StudioError::Protocol(format!("event seq {} after {last}", e.seq)));
            }
        }
        self.last_seq = Some(e.seq);
        if e.event == EventKind::StateDelta {
            let (delta, checksum) = decode_delta(&e.payload, &frame.buffers)?;
            self.view.apply(&delta);
            if self.view.checksum() != checksum {
                self.checksum_mismatches += 1;
            }
        }
        self.events.push_back(e);
        Ok(())
    }
}
