//! LAQ, BLAQ and full-precision steps over groups of per-layer state.
//!
//! Every step takes a slice of [`LayerQuantState`] (one per weight group)
//! and a [`GradientOracle`] that maps the current point of every group to
//! its gradients in a single evaluation, so a network layer stack costs one
//! forward/backward pass per oracle call. A single-layer problem is just a
//! one-element slice.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::GraphError;
use crate::curvature::{CurvatureError, CurvatureState};
use crate::quantizer::{self, QuantError, QuantGrid, ScaledCode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
    #[error("gradient evaluation failed: {0}")]
    Evaluation(#[from] GraphError),
    #[error("gradient oracle returned {actual} groups, expected {expected}")]
    GroupCount { expected: usize, actual: usize },
    #[error("group {group}: gradient has length {actual}, weights have {expected}")]
    GradientLength { group: usize, expected: usize, actual: usize },
    #[error("trial was built at step {trial} but the state is at step {state}")]
    StaleTrial { trial: u64, state: u64 },
    #[error("state was not refreshed with a gradient at the current quantized point")]
    NotRefreshed,
    #[error("mixing coefficient must lie in [0, 1], got {0}")]
    Mixing(f64),
    #[error("weights are empty")]
    Empty,
    #[error("curvature dimension {curvature} differs from weight dimension {weights}")]
    CurvatureDimension { weights: usize, curvature: usize },
}

/// Source of gradients: given the evaluation point of every group, returns
/// one gradient per group.
pub trait GradientOracle {
    fn gradients(&mut self, points: &[&[f64]]) -> Result<Vec<Vec<f64>>, OptimError>;
}

impl<F> GradientOracle for F
where
    F: FnMut(&[&[f64]]) -> Result<Vec<Vec<f64>>, OptimError>,
{
    fn gradients(&mut self, points: &[&[f64]]) -> Result<Vec<Vec<f64>>, OptimError> {
        self(points)
    }
}

/// Wraps an oracle and counts its invocations.
pub struct CountingOracle<O> {
    inner: O,
    calls: u64,
}

impl<O: GradientOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, calls: 0 }
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: GradientOracle> GradientOracle for CountingOracle<O> {
    fn gradients(&mut self, points: &[&[f64]]) -> Result<Vec<Vec<f64>>, OptimError> {
        self.calls += 1;
        self.inner.gradients(points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlaqConfig {
    /// Weight of the current-point gradient and metric in the mix.
    pub a: f64,
    /// Alternating projection iterations.
    pub m: usize,
}

impl BlaqConfig {
    pub fn new(a: f64, m: usize) -> Result<Self, OptimError> {
        if !(0.0..=1.0).contains(&a) {
            return Err(OptimError::Mixing(a));
        }
        if m == 0 {
            return Err(QuantError::ZeroIterations.into());
        }
        Ok(Self { a, m })
    }
}

impl Default for BlaqConfig {
    fn default() -> Self {
        Self { a: 0.6, m: 5 }
    }
}

/// Optimizer state of one weight group.
///
/// With `grid = None` the group is kept at full precision: projection is the
/// identity and `code` holds `α = 1`, `β = w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuantState {
    pub w: Vec<f64>,
    pub code: ScaledCode,
    pub g_hat: Vec<f64>,
    /// Metric paired with `g_hat`.
    pub d_hat: Vec<f64>,
    pub curvature: CurvatureState,
    pub grid: Option<QuantGrid>,
    /// Curvature step at which `g_hat` was evaluated at the current `ŵ`.
    refreshed_at: Option<u64>,
}

impl LayerQuantState {
    /// Initial state at `w0`, quantized under the unit metric.
    pub fn new(
        w0: Vec<f64>,
        grid: Option<QuantGrid>,
        curvature: CurvatureState,
        m: usize,
    ) -> Result<Self, OptimError> {
        if w0.is_empty() {
            return Err(OptimError::Empty);
        }
        if curvature.dim() != w0.len() {
            return Err(OptimError::CurvatureDimension {
                weights: w0.len(),
                curvature: curvature.dim(),
            });
        }
        let ones = vec![1.0; w0.len()];
        let code = project(&w0, &ones, grid.as_ref(), m)?;
        let d_hat = curvature.current();
        Ok(Self {
            g_hat: vec![0.0; w0.len()],
            w: w0,
            code,
            d_hat,
            curvature,
            grid,
            refreshed_at: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// The point at which gradients are evaluated: `ŵ = αβ`.
    pub fn w_hat(&self) -> Vec<f64> {
        self.code.dequantize()
    }

    pub fn step(&self) -> u64 {
        self.curvature.step()
    }
}

/// Trial quantities from the one-step forward search.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialState {
    pub w_star: Vec<f64>,
    pub code_star: ScaledCode,
    pub g_star: Vec<f64>,
    pub d_star: Vec<f64>,
    step: u64,
}

impl TrialState {
    pub fn step(&self) -> u64 {
        self.step
    }
}

fn project(w: &[f64], d: &[f64], grid: Option<&QuantGrid>, m: usize) -> Result<ScaledCode, OptimError> {
    match grid {
        Some(g) => Ok(quantizer::project(w, d, g, m)?),
        None => Ok(ScaledCode {
            alpha: 1.0,
            beta: w.to_vec(),
        }),
    }
}

fn evaluate(
    oracle: &mut impl GradientOracle,
    points: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, OptimError> {
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let grads = oracle.gradients(&refs)?;
    if grads.len() != points.len() {
        return Err(OptimError::GroupCount {
            expected: points.len(),
            actual: grads.len(),
        });
    }
    for (group, (g, p)) in grads.iter().zip(points).enumerate() {
        if g.len() != p.len() {
            return Err(OptimError::GradientLength {
                group,
                expected: p.len(),
                actual: g.len(),
            });
        }
    }
    Ok(grads)
}

/// `base − g ⊘ d`.
fn descend(base: &[f64], g: &[f64], d: &[f64]) -> Vec<f64> {
    base.iter().zip(g).zip(d).map(|((b, g), d)| b - g / d).collect()
}

/// One LAQ step: gradient at `ŵ`, curvature update, a step from `ŵ`, then
/// projection under the updated metric.
pub fn laq_step(
    states: &mut [LayerQuantState],
    m: usize,
    oracle: &mut impl GradientOracle,
) -> Result<(), OptimError> {
    let points: Vec<Vec<f64>> = states.iter().map(LayerQuantState::w_hat).collect();
    let grads = evaluate(oracle, &points)?;
    for ((s, g), w_hat) in states.iter_mut().zip(grads).zip(&points) {
        let d = s.curvature.update(&g)?;
        let w = descend(w_hat, &g, &d);
        s.code = project(&w, &d, s.grid.as_ref(), m)?;
        s.w = w;
        s.g_hat = g;
        s.d_hat = d;
        s.refreshed_at = None;
    }
    Ok(())
}

/// Evaluates the gradient at the current `ŵ` and advances the curvature
/// with it, leaving `g_hat` and `d_hat` ready for [`blaq_stage1`].
pub fn blaq_refresh(
    states: &mut [LayerQuantState],
    oracle: &mut impl GradientOracle,
) -> Result<(), OptimError> {
    let points: Vec<Vec<f64>> = states.iter().map(LayerQuantState::w_hat).collect();
    let grads = evaluate(oracle, &points)?;
    for (s, g) in states.iter_mut().zip(grads) {
        s.d_hat = s.curvature.update(&g)?;
        s.g_hat = g;
        s.refreshed_at = Some(s.curvature.step());
    }
    Ok(())
}

/// One-step forward search from the full-precision point. The trial metric
/// comes from a copy of the curvature state, so the real state is untouched.
pub fn blaq_stage1(
    states: &[LayerQuantState],
    cfg: &BlaqConfig,
    oracle: &mut impl GradientOracle,
) -> Result<Vec<TrialState>, OptimError> {
    let mut partial = Vec::with_capacity(states.len());
    for s in states {
        if s.refreshed_at != Some(s.curvature.step()) {
            return Err(OptimError::NotRefreshed);
        }
        let w_star = descend(&s.w, &s.g_hat, &s.d_hat);
        let code_star = project(&w_star, &s.d_hat, s.grid.as_ref(), cfg.m)?;
        partial.push((w_star, code_star));
    }
    let points: Vec<Vec<f64>> = partial.iter().map(|(_, c)| c.dequantize()).collect();
    let grads = evaluate(oracle, &points)?;
    states
        .iter()
        .zip(partial)
        .zip(grads)
        .map(|((s, (w_star, code_star)), g_star)| {
            let d_star = s.curvature.clone().update(&g_star)?;
            Ok(TrialState {
                w_star,
                code_star,
                g_star,
                d_star,
                step: s.curvature.step(),
            })
        })
        .collect()
}

/// Backtracking: mixes current and trial gradients and metrics, steps from
/// the full-precision point and re-projects under the mixed metric.
pub fn blaq_stage2(
    states: &mut [LayerQuantState],
    trials: &[TrialState],
    cfg: &BlaqConfig,
) -> Result<(), OptimError> {
    if trials.len() != states.len() {
        return Err(OptimError::GroupCount {
            expected: states.len(),
            actual: trials.len(),
        });
    }
    for (s, t) in states.iter().zip(trials) {
        if t.step != s.curvature.step() || s.refreshed_at != Some(t.step) {
            return Err(OptimError::StaleTrial {
                trial: t.step,
                state: s.curvature.step(),
            });
        }
    }
    let a = cfg.a;
    for (s, t) in states.iter_mut().zip(trials) {
        let g: Vec<f64> = s.g_hat.iter().zip(&t.g_star).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let d: Vec<f64> = s.d_hat.iter().zip(&t.d_star).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let w = descend(&s.w, &g, &d);
        s.code = project(&w, &d, s.grid.as_ref(), cfg.m)?;
        s.w = w;
        s.g_hat = g;
        s.d_hat = d;
        s.refreshed_at = None;
    }
    Ok(())
}

/// Full BLAQ step: two gradient evaluations.
pub fn blaq_step(
    states: &mut [LayerQuantState],
    cfg: &BlaqConfig,
    oracle: &mut impl GradientOracle,
) -> Result<(), OptimError> {
    blaq_refresh(states, oracle)?;
    let trials = blaq_stage1(states, cfg, oracle)?;
    blaq_stage2(states, &trials, cfg)
}

/// Adaptive-gradient step `w ← w − g ⊘ D̂` with no quantization.
pub fn full_precision_step(
    states: &mut [LayerQuantState],
    oracle: &mut impl GradientOracle,
) -> Result<(), OptimError> {
    let points: Vec<Vec<f64>> = states.iter().map(|s| s.w.clone()).collect();
    let grads = evaluate(oracle, &points)?;
    for (s, g) in states.iter_mut().zip(grads) {
        let d = s.curvature.update(&g)?;
        s.w = descend(&s.w, &g, &d);
        s.code = ScaledCode {
            alpha: 1.0,
            beta: s.w.clone(),
        };
        s.g_hat = g;
        s.d_hat = d;
        s.refreshed_at = None;
    }
    Ok(())
}
