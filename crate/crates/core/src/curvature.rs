//! Diagonal Hessian approximation `D̂` used as the step metric.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurvatureError {
    #[error("gradient has length {actual}, state has dimension {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("gradient entry {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("learning-rate schedule is invalid: {0}")]
    Schedule(String),
    #[error("beta2 must lie in [0, 1), got {0}")]
    Beta2(f64),
    #[error("eps must be positive, got {0}")]
    Eps(f64),
}

/// Piecewise-constant learning rate: each `(step, value)` pair takes effect
/// from that step (1-based, matching the curvature step counter) onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u64, f64)>", into = "Vec<(u64, f64)>")]
pub struct LrSchedule {
    points: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn new(mut points: Vec<(u64, f64)>) -> Result<Self, CurvatureError> {
        if points.is_empty() {
            return Err(CurvatureError::Schedule("no entries".into()));
        }
        points.sort_by_key(|p| p.0);
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(CurvatureError::Schedule("duplicate step".into()));
        }
        if let Some(&(s, v)) = points.iter().find(|p| !(p.1 > 0.0 && p.1.is_finite())) {
            return Err(CurvatureError::Schedule(format!(
                "value {v} at step {s} must be positive"
            )));
        }
        Ok(Self { points })
    }

    pub fn constant(eta: f64) -> Result<Self, CurvatureError> {
        Self::new(vec![(0, eta)])
    }

    /// Rate in effect at `step`. Steps before the first entry use its value.
    pub fn at(&self, step: u64) -> f64 {
        self.points
            .iter()
            .rev()
            .find(|p| p.0 <= step)
            .unwrap_or(&self.points[0])
            .1
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }
}

impl TryFrom<Vec<(u64, f64)>> for LrSchedule {
    type Error = CurvatureError;

    fn try_from(points: Vec<(u64, f64)>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<LrSchedule> for Vec<(u64, f64)> {
    fn from(s: LrSchedule) -> Self {
        s.points
    }
}

/// How `D̂` is formed from gradient history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `(sqrt(v̂) + eps)/η`, with `v̂` the bias-corrected EMA of `g²`.
    #[default]
    SecondMoment,
    /// `1/η` in every coordinate, i.e. plain gradient steps of size `η`.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureState {
    v: Vec<f64>,
    step: u64,
    beta2: f64,
    eps: f64,
    schedule: LrSchedule,
    metric: Metric,
}

impl CurvatureState {
    pub fn new(
        dim: usize,
        beta2: f64,
        eps: f64,
        schedule: LrSchedule,
        metric: Metric,
    ) -> Result<Self, CurvatureError> {
        if !(0.0..1.0).contains(&beta2) {
            return Err(CurvatureError::Beta2(beta2));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(CurvatureError::Eps(eps));
        }
        Ok(Self {
            v: vec![0.0; dim],
            step: 0,
            beta2,
            eps,
            schedule,
            metric,
        })
    }

    /// Second-moment metric with `beta2 = 0.999`, `eps = 1e−8`.
    pub fn with_defaults(dim: usize, schedule: LrSchedule) -> Self {
        Self::new(dim, 0.999, 1e-8, schedule, Metric::SecondMoment).expect("default constants are valid")
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    /// Folds `g` into the running statistics, advances the step counter and
    /// returns the new `D̂`.
    pub fn update(&mut self, g: &[f64]) -> Result<Vec<f64>, CurvatureError> {
        if g.len() != self.v.len() {
            return Err(CurvatureError::LengthMismatch {
                expected: self.v.len(),
                actual: g.len(),
            });
        }
        if let Some((index, &value)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(CurvatureError::NonFinite { index, value });
        }
        for (v, gi) in self.v.iter_mut().zip(g) {
            *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
        }
        self.step += 1;
        Ok(self.current())
    }

    /// `D̂` at the current step without changing the state.
    pub fn current(&self) -> Vec<f64> {
        let eta = self.schedule.at(self.step);
        match self.metric {
            Metric::Identity => vec![1.0 / eta; self.v.len()],
            Metric::SecondMoment => {
                let correction = 1.0 - self.beta2.powi(self.step.max(1) as i32);
                self.v
                    .iter()
                    .map(|v| ((v / correction).sqrt() + self.eps) / eta)
                    .collect()
            }
        }
    }
}
