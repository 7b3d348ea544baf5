//! Local session server for interactive editing of a polyhex session.
//!
//! One client at a time talks to the server over loopback TCP using
//! length-prefixed frames (see [`frame`]). The server owns the [`Session`],
//! runs optimizer stages on a worker thread and streams progress and
//! geometry deltas while a stage runs.
//!
//! [`Session`]: polyhex::session::Session

pub mod client;
pub mod frame;
pub mod protocol;
pub mod server;
pub mod state;

use std::net::SocketAddr;

pub use client::Client;
pub use server::{serve, serve_with, ServeOptions, ServerHandle};
pub use state::StateView;

#[derive(Debug, thiserror::Error)]
pub enum StudioError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] polyhex::Error),
    #[error(transparent)]
    Mesh(#[from] polyhex::mesh::MeshError),
    #[error("refusing to listen on non-loopback address {0}")]
    NotLoopback(SocketAddr),
    #[error("rejected by server: {0}")]
    Rejected(String),
}
