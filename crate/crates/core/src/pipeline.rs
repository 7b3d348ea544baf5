//! Batch pipeline configuration and the `run_all` driver.
//!
//! The configuration is TOML. Every key maps to a stage weight or step count;
//! unknown keys are rejected.
//!
//! ```toml
//! seed = 1
//! [deform]
//! steps = 500
//! [deform.weights]
//! cube = 2.0
//! [voxel]
//! cell_size = 0.25
//! [quality.weights]
//! custom = 0.5
//! ```

use std::path::Path;
use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deform::DeformWeights;
use crate::io::IoError;
use crate::optim::{Control, StepInfo};
use crate::polycube::{FitOptions, PolycubeWeights};
use crate::pullback::PullbackWeights;
use crate::quality::{QualityReport, QualityWeights, SurfaceMode, DEFAULT_QUALITY_STEPS, DEFAULT_REPORT_SAMPLES};
use crate::session::{AnchorParams, Session, Stage, StageWeights};

pub const DEFAULT_DEFORM_STEPS: usize = 500;
pub const DEFAULT_POLYCUBE_STEPS: usize = 300;
pub const DEFAULT_PULLBACK_STEPS: usize = 800;
pub const DEFAULT_MAX_CUBOIDS: usize = 16;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformConfig {
    pub steps: usize,
    pub weights: DeformWeights,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_DEFORM_STEPS, weights: DeformWeights::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolycubeConfig {
    pub steps: usize,
    pub lr: f64,
    /// Automatic decomposition stops after this many cuboids.
    pub max_cuboids: usize,
    pub min_half_fraction: f64,
    pub weights: PolycubeWeights,
    pub anchors: AnchorParams,
}

impl Default for PolycubeConfig {
    fn default() -> Self {
        let f = FitOptions::default();
        Self {
            steps: DEFAULT_POLYCUBE_STEPS,
            lr: f.lr,
            max_cuboids: DEFAULT_MAX_CUBOIDS,
            min_half_fraction: f.min_half_fraction,
            weights: f.weights,
            anchors: AnchorParams::default(),
        }
    }
}

impl PolycubeConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions { steps: self.steps, lr: self.lr, weights: self.weights, min_half_fraction: self.min_half_fraction }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelConfig {
    /// Lattice spacing in normalized units; bounding-box diagonal / 40 when
    /// absent.
    pub cell_size: Option<f64>,
    pub pad: bool,
    pub allow_invalid_topology: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PullbackConfig {
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub weights: PullbackWeights,
}

impl Default for PullbackConfig {
    fn default() -> Self {
        Self { phase1_steps: DEFAULT_PULLBACK_STEPS, phase2_steps: DEFAULT_PULLBACK_STEPS, weights: PullbackWeights::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    pub steps: usize,
    pub mode: SurfaceMode,
    pub weights: QualityWeights,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_QUALITY_STEPS, mode: SurfaceMode::Free, weights: QualityWeights::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub samples: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { samples: DEFAULT_REPORT_SAMPLES }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub deform: DeformConfig,
    pub polycube: PolycubeConfig,
    pub voxel: VoxelConfig,
    pub pullback: PullbackConfig,
    pub quality: QualityConfig,
    pub report: ReportConfig,
}

fn check(ok: bool, what: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid(what.to_string()))
    }
}

fn nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
        Ok(Self::parse(&text)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.deform.weights;
        check([d.angle, d.vol, d.cube, d.smooth].into_iter().all(nonneg), "deform weights must be non-negative")?;
        check(d.eps > 0.0 && d.eps.is_finite(), "deform.weights.eps must be positive")?;
        let p = &self.polycube;
        check(nonneg(p.weights.plus) && nonneg(p.weights.minus), "polycube weights must be non-negative")?;
        check(p.lr > 0.0 && p.lr.is_finite(), "polycube.lr must be positive")?;
        check(p.max_cuboids > 0, "polycube.max_cuboids must be positive")?;
        check(p.anchors.grid > 0 && nonneg(p.anchors.sigma), "polycube.anchors needs grid > 0 and sigma >= 0")?;
        check(self.voxel.cell_size.is_none_or(|c| c > 0.0 && c.is_finite()), "voxel.cell_size must be positive")?;
        let w = &self.pullback.weights;
        check([w.angle, w.vol, w.to_target, w.from_target, w.lap, w.pullback].into_iter().all(nonneg), "pullback weights must be non-negative")?;
        check(w.eps > 0.0 && w.eps.is_finite(), "pullback.weights.eps must be positive")?;
        self.quality.weights.validate().map_err(|e| ConfigError::Invalid(format!("quality: {e}")))?;
        check(self.report.samples > 0, "report.samples must be positive")?;
        Ok(())
    }

    /// Copy weights and stage options into `session` for subsequent runs.
    pub fn apply(&self, session: &mut Session) -> crate::Result<()> {
        session.anchors = self.polycube.anchors;
        session.set_weights(StageWeights {
            deform: self.deform.weights,
            polycube: self.polycube.fit_options(),
            pullback: self.pullback.weights,
            quality: self.quality.weights,
            mode: self.quality.mode,
        })
    }
}

/// Progress notice from [`run_all`]: the stage and the step just recorded.
pub struct Progress<'a> {
    pub stage: Stage,
    pub info: &'a StepInfo<'a>,
}

/// Run every stage with `config` on a fresh session: deform, automatic
/// decomposition (alternating volume-mode Add and fit; a fit only when the
/// session already has cuboids),
/// voxelize, both pullback phases and quality optimization. Returns the
/// report of the final mesh.
pub fn run_all<P>(session: &mut Session, config: &Config, cancel: Option<&AtomicBool>, mut progress: P) -> crate::Result<QualityReport>
where
    P: FnMut(Progress) -> Control,
{
    config.validate()?;
    config.apply(session)?;
    session.deform(config.deform.steps, cancel, |info, _| progress(Progress { stage: Stage::Deformed, info }))?;
    let mut fit_progress = |info: &StepInfo| progress(Progress { stage: Stage::Decomposed, info });
    if session.polycube.is_empty() {
        let n = session.polycube_auto(config.polycube.max_cuboids, cancel, &mut fit_progress)?;
        log::info!("automatic decomposition: {n} cuboids");
    } else {
        session.polycube_fit(config.polycube.steps, cancel, &mut fit_progress)?;
    }
    session.voxelize(config.voxel.cell_size)?;
    let hex = session.build_hex(config.voxel.pad, config.voxel.allow_invalid_topology)?;
    log::info!("hex mesh: {} elements", hex.rest.hexes().len());
    session.pullback_phase1(config.pullback.phase1_steps, cancel, |info, _| progress(Progress { stage: Stage::Phase1, info }))?;
    session.pullback_phase2(config.pullback.phase2_steps, cancel, |info, _| progress(Progress { stage: Stage::Phase2, info }))?;
    let out = session.optimize(config.quality.steps, cancel, |info, _| progress(Progress { stage: Stage::Optimized, info }))?;
    if !out.landmark_inversions.is_empty() {
        log::warn!("landmarks {:?} invert elements", out.landmark_inversions);
    }
    session.report(config.report.samples)
}
