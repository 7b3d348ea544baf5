//! Adam with an admissibility guard, a step loop with callbacks, and a
//! finite-difference gradient checker.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Step retries after halving the learning rate.
pub const MAX_HALVINGS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient at index {index} (block `{block}`)")]
    NonFiniteGradient { index: usize, block: String },
    #[error("non-finite energy at step {step}")]
    NonFiniteEnergy { step: usize },
    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    ShapeMismatch { params: usize, grads: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.9, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Named consecutive parameter ranges, for error messages.
    blocks: Vec<(String, usize)>,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self { config, step: 0, m: vec![0.0; n], v: vec![0.0; n], blocks: vec![("params".into(), n)] }
    }

    /// Name parameter blocks; lengths must add up to the parameter count.
    pub fn with_blocks(mut self, blocks: Vec<(String, usize)>) -> Self {
        assert_eq!(blocks.iter().map(|b| b.1).sum::<usize>(), self.m.len());
        self.blocks = blocks;
        self
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    fn block_of(&self, index: usize) -> String {
        let mut start = 0;
        for (name, len) in &self.blocks {
            if index < start + len {
                return name.clone();
            }
            start += len;
        }
        "params".into()
    }

    fn check(&self, params: &[f64], grads: &[f64]) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::ShapeMismatch { params: params.len(), grads: grads.len() });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { index, block: self.block_of(index) });
        }
        Ok(())
    }

    /// Moments after observing `grads` and the bias-corrected direction
    /// `m̂ / (√v̂ + ε)`. Does not modify the state.
    fn direction(&self, grads: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let t = (self.step + 1) as i32;
        let (b1t, b2t) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let mut dir = vec![0.0; grads.len()];
        for i in 0..grads.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grads[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
            dir[i] = (m[i] / b1t) / ((v[i] / b2t).sqrt() + c.eps);
        }
        (m, v, dir)
    }

    /// Plain bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), OptimError> {
        self.check(params, grads)?;
        let (m, v, dir) = self.direction(grads);
        for (p, d) in params.iter_mut().zip(&dir) {
            *p -= self.config.lr * d;
        }
        self.m = m;
        self.v = v;
        self.step += 1;
        Ok(())
    }

    /// Adam update that only accepts finite candidates passing `admissible`,
    /// halving the learning rate up to [`MAX_HALVINGS`] times. `admissible`
    /// may also project the candidate in place (e.g. onto bounds). When every
    /// candidate fails, `params` are left unchanged but the moments still
    /// advance. Returns the learning rate used, or `None` on rejection.
    pub fn guarded_step<A>(&mut self, params: &mut [f64], grads: &[f64], mut admissible: A) -> Result<Option<f64>, OptimError>
    where
        A: FnMut(&mut [f64]) -> bool,
    {
        self.check(params, grads)?;
        let (m, v, dir) = self.direction(grads);
        self.m = m;
        self.v = v;
        self.step += 1;
        let mut lr = self.config.lr;
        let mut candidate = params.to_vec();
        for _ in 0..=MAX_HALVINGS {
            for ((c, p), d) in candidate.iter_mut().zip(params.iter()).zip(&dir) {
                *c = p - lr * d;
            }
            if candidate.iter().all(|x| x.is_finite()) && admissible(&mut candidate) {
                params.copy_from_slice(&candidate);
                return Ok(Some(lr));
            }
            lr *= 0.5;
        }
        Ok(None)
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<(), OptimError> {
    state.step(params, grads)
}

/// Energy value with a per-term breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub iteration: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl EnergyReport {
    pub fn new(iteration: usize, terms: BTreeMap<String, f64>) -> Self {
        let total = terms.values().sum();
        Self { iteration, total, terms }
    }

    pub fn from_terms<'a>(iteration: usize, terms: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        Self::new(iteration, terms.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    pub fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }
}

/// What a callback sees after each step.
pub struct StepInfo<'a> {
    pub step: usize,
    pub report: &'a EnergyReport,
    pub params: &'a [f64],
    /// Learning rate actually used; `None` if the step was rejected.
    pub lr_used: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoopOutcome {
    /// Energy at the iterate each step started from.
    pub history: Vec<EnergyReport>,
    pub cancelled: bool,
    pub rejected_steps: usize,
}

/// Run up to `n_steps` guarded Adam steps. `energy` returns the report and
/// gradient at the given parameters. The loop stops early when `cancel` is
/// raised or `callback` returns [`Control::Stop`]; `params` always hold the
/// last accepted iterate.
pub fn run_loop<E, A, C>(
    adam: &mut AdamState,
    params: &mut [f64],
    n_steps: usize,
    mut energy: E,
    mut admissible: A,
    cancel: Option<&AtomicBool>,
    mut callback: C,
) -> crate::Result<LoopOutcome>
where
    E: FnMut(&[f64]) -> crate::Result<(EnergyReport, Vec<f64>)>,
    A: FnMut(&mut [f64]) -> bool,
    C: FnMut(&StepInfo) -> Control,
{
    let mut out = LoopOutcome::default();
    for step in 0..n_steps {
        if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            out.cancelled = true;
            break;
        }
        let (mut report, grads) = energy(params)?;
        if !report.total.is_finite() {
            return Err(OptimError::NonFiniteEnergy { step }.into());
        }
        report.iteration = step;
        let lr_used = adam.guarded_step(params, &grads, &mut admissible)?;
        if lr_used.is_none() {
            out.rejected_steps += 1;
            log::warn!("step {step}: no admissible candidate after {MAX_HALVINGS} halvings");
        }
        let control = callback(&StepInfo { step, report: &report, params, lr_used });
        out.history.push(report);
        if control == Control::Stop {
            out.cancelled = true;
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    /// `(index, analytic, finite difference)` per probe.
    pub probes: Vec<(usize, f64, f64)>,
}

/// Compare the analytic gradient with central differences on `n_probes`
/// random coordinates. Each probe's error is `|a − fd| / max(|fd|, floor)`
/// with `floor = 1e-3 · max |fd| + 1e-12`, so tiny components don't blow up
/// the ratio.
pub fn check_gradient<F>(mut energy: F, params: &[f64], n_probes: usize, step: f64, seed: u64) -> GradientCheck
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(step > 0.0);
    let (_, grad) = energy(params);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = params.len();
    let indices: Vec<usize> =
        if n_probes >= n { (0..n).collect() } else { (0..n_probes).map(|_| rng.random_range(0..n)).collect() };
    let mut x = params.to_vec();
    let probes: Vec<(usize, f64, f64)> = indices
        .into_iter()
        .map(|i| {
            x[i] = params[i] + step;
            let ep = energy(&x).0;
            x[i] = params[i] - step;
            let em = energy(&x).0;
            x[i] = params[i];
            (i, grad[i], (ep - em) / (2.0 * step))
        })
        .collect();
    let scale = probes.iter().map(|p| p.2.abs()).fold(0.0, f64::max);
    let floor = 1e-3 * scale + 1e-12;
    let max_rel_error = probes.iter().map(|&(_, a, fd)| (a - fd).abs() / fd.abs().max(floor)).fold(0.0, f64::max);
    GradientCheck { max_rel_error, probes }
}

/// Flatten 3-vectors into a parameter vector.
pub fn flatten(v: &[crate::Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn unflatten(x: &[f64]) -> Vec<crate::Vec3> {
    x.chunks_exact(3).map(|c| crate::Vec3::new(c[0], c[1], c[2])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl(x: &[f64]) -> crate::Result<(EnergyReport, Vec<f64>)> {
        let e: f64 = x.iter().map(|v| v * v).sum();
        Ok((EnergyReport::from_terms(0, [("bowl", e)]), x.iter().map(|v| 2.0 * v).collect()))
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, -2.0];
        s.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_lr() {
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        s.step(&mut p, &[1.0]).unwrap();
        let expect = -1e-3 * (0.1 / 0.1) / ((0.1f64 / 0.1).sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-18);
    }

    #[test]
    fn nonfinite_gradient_names_block() {
        let mut s = AdamState::new(3, AdamConfig::default()).with_blocks(vec![("a".into(), 1), ("b".into(), 2)]);
        let err = s.step(&mut [0.0; 3], &[0.0, 0.0, f64::NAN]).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { index: 2, block: "b".into() });
    }

    #[test]
    fn converges_on_parabola() {
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut p = vec![1.0];
        for _ in 0..1000 {
            let g = [2.0 * p[0]];
            s.step(&mut p, &g).unwrap();
        }
        assert!(p[0].abs() < 0.05, "{}", p[0]);
    }

    #[test]
    fn loop_zero_steps_and_cancel() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, 1.0];
        let out = run_loop(&mut s, &mut p, 0, bowl, |_| true, None, |_| Control::Continue).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(p, vec![1.0, 1.0]);
        let out = run_loop(&mut s, &mut p, 100, bowl, |_| true, None, |i| if i.step + 1 == 7 { Control::Stop } else { Control::Continue })
            .unwrap();
        assert_eq!(out.history.len(), 7);
        assert!(out.cancelled);
        let flag = AtomicBool::new(true);
        let out = run_loop(&mut s, &mut p, 100, bowl, |_| true, Some(&flag), |_| Control::Continue).unwrap();
        assert!(out.history.is_empty());
    }

    #[test]
    fn bowl_descends_over_windows() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -0.5, 0.25];
        let out = run_loop(&mut s, &mut p, 500, bowl, |_| true, None, |_| Control::Continue).unwrap();
        for w in 0..450 {
            assert!(out.history[w + 50].total <= out.history[w].total);
        }
    }

    #[test]
    fn guarded_step_halves_until_admissible() {
        let mut s = AdamState::new(1, AdamConfig::with_lr(1.0));
        let mut p = vec![1.0];
        // only allow staying above 0.7
        let lr = s.guarded_step(&mut p, &[1.0], |x| x[0] > 0.7).unwrap();
        assert_eq!(lr, Some(0.25));
        let before = p[0];
        let lr = s.guarded_step(&mut p, &[1.0], |_| false).unwrap();
        assert_eq!(lr, None);
        assert_eq!(p[0], before);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn checker_calibration() {
        let lin = |x: &[f64]| (x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum(), (1..=x.len()).map(|i| i as f64).collect());
        assert!(check_gradient(lin, &[0.3, 0.1, -2.0], 3, 1e-5, 0).max_rel_error <= 1e-10);
        let wrong = |x: &[f64]| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 4.0 * v).collect());
        let e = check_gradient(wrong, &[0.3, 0.1, -2.0], 3, 1e-5, 0).max_rel_error;
        assert!((e - 1.0).abs() < 1e-3, "{e}");
    }

    #[test]
    fn sign_pattern_invariant_to_energy_scale() {
        let g: Vec<f64> = vec![0.3, -1.2, 0.01, -0.5];
        let mut a = AdamState::new(4, AdamConfig::default());
        let mut b = AdamState::new(4, AdamConfig::default());
        let (mut pa, mut pb) = (vec![0.0; 4], vec![0.0; 4]);
        for _ in 0..100 {
            a.step(&mut pa, &g).unwrap();
            let g10: Vec<f64> = g.iter().map(|x| 10.0 * x).collect();
            b.step(&mut pb, &g10).unwrap();
        }
        for i in 0..4 {
            assert_eq!(pa[i].signum(), pb[i].signum());
        }
    }
}
