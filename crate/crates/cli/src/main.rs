//! `polyhex`: run the hex-meshing pipeline stage by stage on session files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use polyhex::io::{self, IoError};
use polyhex::optim::{Control, StepInfo};
use polyhex::pipeline::{self, Config};
use polyhex::polycube::AddMode;
use polyhex::quality::QualityReport;
use polyhex::session::{self, Session, Stage};

/// Environment variable with the worker thread count.
const THREADS_ENV: &str = "POLYHEX_THREADS";
const LOG_EVERY: usize = 100;

#[derive(Parser)]
#[command(name = "polyhex", version, about = "PolyCube hexahedral meshing pipeline")]
struct Cli {
    /// Log progress (-v) or debug output (-vv).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SessionArgs {
    /// Session file to read.
    #[arg(long)]
    session: PathBuf,
    /// Weights and step counts (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Step count, overriding the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Where to write the updated session (default: overwrite --session).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AddArg {
    Volume,
    Distance,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Deform the input toward a near-PolyCube. With --input, start a new
    /// session from a tet mesh.
    Deform {
        /// Tet mesh (.mesh or .vtk) to start a new session from.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Edit and fit the cuboid decomposition. Without an edit flag, cuboids
    /// are added automatically when the PolyCube is empty, then fitted.
    PolycubeFit {
        #[command(flatten)]
        common: SessionArgs,
        /// Add the suggested cuboid before fitting.
        #[arg(long, value_enum)]
        add: Option<AddArg>,
        /// Subtract the suggested over-covered region before fitting.
        #[arg(long)]
        subtract: bool,
    },
    /// Snap the PolyCube to a voxel lattice and build the hex mesh.
    Voxelize {
        #[command(flatten)]
        common: SessionArgs,
        /// Edge length in normalized units (default: bbox diagonal / 40).
        #[arg(long)]
        cell_size: Option<f64>,
        /// Add one global padding layer.
        #[arg(long)]
        pad: bool,
        /// Build the hex mesh despite non-manifold voxels.
        #[arg(long)]
        allow_invalid_topology: bool,
    },
    /// Inversion-free pullback of the voxel mesh onto the input.
    Pullback {
        #[command(flatten)]
        common: SessionArgs,
        #[arg(long, value_enum, default_value = "both")]
        phase: Phase,
    },
    /// Quality optimization of the hex mesh.
    Optimize {
        #[command(flatten)]
        common: SessionArgs,
    },
    /// Print the quality metrics of the current hex mesh.
    Report {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Surface samples per direction for the Hausdorff distance.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        json: bool,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline on a tet mesh.
    RunAll {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed (default: the config's `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Hex mesh output (.mesh, .vtk or .obj), in input coordinates.
        #[arg(long)]
        out: PathBuf,
        /// Also save the final session.
        #[arg(long)]
        session: Option<PathBuf>,
        /// Write the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Export the current hex mesh (or the deformed tet mesh with --deformed)
    /// in input coordinates.
    Export {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        deformed: bool,
    },
}

/// Process exit codes. Usage errors exit with 2 (clap).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Failure {
    Io = 3,
    Config = 4,
    Stage = 5,
    Numeric = 6,
    Other = 1,
}

impl Failure {
    fn kind(self) -> &'static str {
        match self {
            Self::Io => "io",
            Self::Config => "config",
            Self::Stage => "stage",
            Self::Numeric => "numeric",
            Self::Other => "other",
        }
    }

    fn classify(err: &anyhow::Error) -> Self {
        for cause in err.chain() {
            if cause.is::<IoError>() || cause.is::<std::io::Error>() {
                return Self::Io;
            }
            if cause.is::<pipeline::ConfigError>() {
                return Self::Config;
            }
            if let Some(e) = cause.downcast_ref::<polyhex::Error>() {
                return match e {
                    polyhex::Error::Io(_) => Self::Io,
                    polyhex::Error::Config(_) => Self::Config,
                    polyhex::Error::Stage { .. } | polyhex::Error::InvalidArgument(_) => Self::Stage,
                    _ => Self::Numeric,
                };
            }
        }
        Self::Other
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn open(path: &Path) -> Result<Session> {
    session::load_session(path).with_context(|| format!("loading session {}", path.display()))
}

fn save(session: &Session, path: &Path) -> Result<()> {
    session::save_session(path, session).with_context(|| format!("saving session {}", path.display()))
}

fn logger(stage: Stage) -> impl FnMut(&StepInfo) -> Control {
    move |info| {
        if info.step % LOG_EVERY == 0 {
            let terms: Vec<String> = info.report.terms.iter().map(|(k, v)| format!("{k}={v:.6e}")).collect();
            log::info!("{} step {}: {}", stage.name(), info.step, terms.join(" "));
        }
        Control::Continue
    }
}

fn weighted<W>(stage: Stage) -> impl FnMut(&StepInfo, &mut W) -> Control {
    let mut log = logger(stage);
    move |info, _| log(info)
}

fn note_cancel(outcome: &polyhex::optim::LoopOutcome, stage: Stage) {
    if outcome.rejected_steps > 0 {
        log::warn!("{}: {} steps rejected by the inversion guard", stage.name(), outcome.rejected_steps);
    }
}

fn format_report(report: &QualityReport, json: bool) -> Result<String> {
    Ok(if json { serde_json::to_string(report)? + "\n" } else { format!("{report}\n") })
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| IoError::File { path: p.to_path_buf(), source: e })?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Deform { input, seed, session, config, steps, out } => {
            let config = load_config(config.as_deref())?;
            let mut s = match input {
                Some(mesh) => Session::from_mesh_file(&mesh, seed.unwrap_or(config.seed))
                    .with_context(|| format!("loading input {}", mesh.display()))?,
                None if seed.is_some() => bail!(polyhex::Error::InvalidArgument("--seed only applies with --input".into())),
                None => open(&session)?,
            };
            config.apply(&mut s)?;
            let o = s.deform(steps.unwrap_or(config.deform.steps), None, weighted(Stage::Deformed))?;
            note_cancel(&o, Stage::Deformed);
            save(&s, out.as_deref().unwrap_or(&session))
        }
        Command::PolycubeFit { common, add, subtract } => {
            let config = load_config(common.config.as_deref())?;
            let mut s = open(&common.session)?;
            config.apply(&mut s)?;
            if let Some(steps) = common.steps {
                s.fit.steps = steps;
            }
            if subtract {
                let r = s.polycube_subtract()?;
                log::info!("subtracted [{:?}, {:?}]", r.min().as_slice(), r.max().as_slice());
            }
            match add {
                Some(mode) => {
                    let mode = match mode {
                        AddArg::Volume => AddMode::Volume,
                        AddArg::Distance => AddMode::Distance,
                    };
                    let id = s.polycube_add(mode)?;
                    log::info!("added cuboid {id}");
                    s.polycube_fit(s.fit.steps, None, logger(Stage::Decomposed))?;
                }
                None if s.polycube.is_empty() => {
                    let n = s.polycube_auto(config.polycube.max_cuboids, None, logger(Stage::Decomposed))?;
                    log::info!("automatic decomposition: {n} cuboids");
                }
                None => {
                    s.polycube_fit(s.fit.steps, None, logger(Stage::Decomposed))?;
                }
            }
            save(&s, common.out.as_deref().unwrap_or(&common.session))
        }
        Command::Voxelize { common, cell_size, pad, allow_invalid_topology } => {
            let config = load_config(common.config.as_deref())?;
            if common.steps.is_some() {
                bail!(polyhex::Error::InvalidArgument("voxelize takes no --steps".into()));
            }
            let mut s = open(&common.session)?;
            config.apply(&mut s)?;
            let grid = s.voxelize(cell_size.or(config.voxel.cell_size))?;
            let report = grid.validate_topology()?;
            if !report.is_clean() {
                log::warn!("voxel topology: {report:?}");
            }
            let hex = s.build_hex(pad || config.voxel.pad, allow_invalid_topology || config.voxel.allow_invalid_topology)?;
            log::info!("hex mesh: {} elements", hex.rest.hexes().len());
            save(&s, common.out.as_deref().unwrap_or(&common.session))
        }
        Command::Pullback { common, phase } => {
            let config = load_config(common.config.as_deref())?;
            let mut s = open(&common.session)?;
            config.apply(&mut s)?;
            if phase != Phase::Two {
                let o = s.pullback_phase1(common.steps.unwrap_or(config.pullback.phase1_steps), None, weighted(Stage::Phase1))?;
                note_cancel(&o, Stage::Phase1);
            }
            if phase != Phase::One {
                let o = s.pullback_phase2(common.steps.unwrap_or(config.pullback.phase2_steps), None, weighted(Stage::Phase2))?;
                note_cancel(&o, Stage::Phase2);
            }
            save(&s, common.out.as_deref().unwrap_or(&common.session))
        }
        Command::Optimize { common } => {
            let config = load_config(common.config.as_deref())?;
            let mut s = open(&common.session)?;
            config.apply(&mut s)?;
            let o = s.optimize(common.steps.unwrap_or(config.quality.steps), None, weighted(Stage::Optimized))?;
            note_cancel(&o.run, Stage::Optimized);
            if !o.landmark_inversions.is_empty() {
                log::warn!("landmarks {:?} invert elements", o.landmark_inversions);
            }
            save(&s, common.out.as_deref().unwrap_or(&common.session))
        }
        Command::Report { session, config, samples, json, out } => {
            let config = load_config(config.as_deref())?;
            let s = open(&session)?;
            let report = s.report(samples.unwrap_or(config.report.samples))?;
            emit(&format_report(&report, json)?, out.as_deref())
        }
        Command::RunAll { input, config, seed, out, session, json } => {
            let config = load_config(config.as_deref())?;
            let mut s = Session::from_mesh_file(&input, seed.unwrap_or(config.seed))
                .with_context(|| format!("loading input {}", input.display()))?;
            let mut log = |p: pipeline::Progress| logger(p.stage)(p.info);
            let report = pipeline::run_all(&mut s, &config, None, &mut log)?;
            let hex = s.current_hex().expect("run_all builds a hex mesh");
            io::save_hex_mesh(&out, &hex, Some(&s.normalization))?;
            if let Some(path) = session {
                save(&s, &path)?;
            }
            emit(&format_report(&report, json)?, None)
        }
        Command::Export { session, out, deformed } => {
            let s = open(&session)?;
            if deformed {
                io::save_tet_mesh(&out, &s.deformed_mesh(), Some(&s.normalization))?;
            } else {
                let hex = s.current_hex().ok_or_else(|| polyhex::Error::Stage { stage: "export", reason: "no hex mesh yet; run voxelize".into() })?;
                io::save_hex_mesh(&out, &hex, Some(&s.normalization))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let failure = Failure::classify(&err);
            let record = serde_json::json!({
                "error": {
                    "kind": failure.kind(),
                    "code": failure as u8,
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{record}");
            ExitCode::from(failure as u8)
        }
    }
}
