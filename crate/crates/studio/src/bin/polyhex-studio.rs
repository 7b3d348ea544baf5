use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use polyhex::session::{load_session, Session};

/// Serve a polyhex session to an interactive editor on a loopback port.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Session archive to open.
    #[arg(long, conflicts_with = "input")]
    session: Option<PathBuf>,
    /// Start a new session from a tet mesh instead.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: SocketAddr,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let level = match args.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let session: Session = match (&args.session, &args.input) {
        (Some(p), _) => load_session(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(p)) => Session::from_mesh_file(p, args.seed).with_context(|| format!("reading {}", p.display()))?,
        (None, None) => anyhow::bail!("pass --session or --input"),
    };
    let handle = polyhex_studio::serve(session, args.addr)?;
    println!("listening on {}", handle.addr());
    handle.wait();
    Ok(())
}
