//! Zig-zag diagnostics over recorded optimization trajectories.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("window is empty")]
    EmptyWindow,
    #[error("window of {window} steps exceeds the {len} recorded")]
    WindowTooLarge { window: usize, len: usize },
    #[error("coordinate {coord} is out of range for dimension {dim}")]
    Coordinate { coord: usize, dim: usize },
    #[error("step {step} does not follow step {last}")]
    NonIncreasingStep { last: u64, step: u64 },
    #[error("snapshot has dimension {actual}, record has {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("direction changes need at least two updates in the window")]
    TooFewUpdates,
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
}

/// One optimizer step. `code` holds the grid levels `β` behind `w_hat`;
/// `update` is the change of `w` produced by this step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: u64,
    pub loss: f64,
    pub w: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub code: Vec<f64>,
    pub update: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    steps: Vec<TrajectoryStep>,
}

impl TrajectoryRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, s: TrajectoryStep) -> Result<(), MetricsError> {
        if let Some(last) = self.steps.last() {
            if s.step <= last.step {
                return Err(MetricsError::NonIncreasingStep {
                    last: last.step,
                    step: s.step,
                });
            }
            let expected = last.w.len();
            for len in [s.w.len(), s.w_hat.len(), s.code.len(), s.update.len()] {
                if len != expected {
                    return Err(MetricsError::Dimension { expected, actual: len });
                }
            }
        } else {
            let expected = s.w.len();
            for len in [s.w_hat.len(), s.code.len(), s.update.len()] {
                if len != expected {
                    return Err(MetricsError::Dimension { expected, actual: len });
                }
            }
        }
        self.steps.push(s);
        Ok(())
    }

    pub fn steps(&self) -> &[TrajectoryStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.steps.first().map(|s| s.w.len())
    }

    pub fn last(&self) -> Option<&TrajectoryStep> {
        self.steps.last()
    }

    /// The final `window` steps.
    pub fn window(&self, window: usize) -> Result<&[TrajectoryStep], MetricsError> {
        if window == 0 {
            return Err(MetricsError::EmptyWindow);
        }
        if window > self.steps.len() {
            return Err(MetricsError::WindowTooLarge {
                window,
                len: self.steps.len(),
            });
        }
        Ok(&self.steps[self.steps.len() - window..])
    }

    fn coord_window(&self, coord: usize, window: usize) -> Result<&[TrajectoryStep], MetricsError> {
        let steps = self.window(window)?;
        let dim = steps[0].w.len();
        if coord >= dim {
            return Err(MetricsError::Coordinate { coord, dim });
        }
        Ok(steps)
    }
}

/// Largest per-step change of `w[coord]` within the last `window` steps.
pub fn oscillation_amplitude(
    record: &TrajectoryRecord,
    coord: usize,
    window: usize,
) -> Result<f64, MetricsError> {
    let steps = record.coord_window(coord, window)?;
    Ok(steps
        .windows(2)
        .map(|p| (p[1].w[coord] - p[0].w[coord]).abs())
        .fold(0.0, f64::max))
}

/// Number of consecutive step pairs in the window whose grid level at
/// `coord` differs. The scale `α` is shared by a whole group and moves on
/// every step, so changes are counted on the level, not on `α·β`.
pub fn flip_count(record: &TrajectoryRecord, coord: usize, window: usize) -> Result<usize, MetricsError> {
    let steps = record.coord_window(coord, window)?;
    Ok(steps
        .windows(2)
        .filter(|p| p[1].code[coord] != p[0].code[coord])
        .count())
}

/// Number of consecutive update pairs in the window pointing more than 90°
/// apart.
pub fn direction_change_count(record: &TrajectoryRecord, window: usize) -> Result<usize, MetricsError> {
    let steps = record.window(window)?;
    if steps.len() < 2 {
        return Err(MetricsError::TooFewUpdates);
    }
    Ok(steps
        .windows(2)
        .filter(|p| dot(&p[0].update, &p[1].update) < 0.0)
        .count())
}

/// Step index of the first entry with `loss − target ≤ tol`.
pub fn steps_to_tolerance(
    record: &TrajectoryRecord,
    target: f64,
    tol: f64,
) -> Result<Option<u64>, MetricsError> {
    if !(tol > 0.0) {
        return Err(MetricsError::Tolerance(tol));
    }
    Ok(record
        .steps
        .iter()
        .find(|s| s.loss - target <= tol)
        .map(|s| s.step))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_record(ws: &[f64], codes: &[f64]) -> TrajectoryRecord {
        let mut r = TrajectoryRecord::new();
        let mut prev = ws[0];
        for (i, (&w, &c)) in ws.iter().zip(codes).enumerate() {
            r.push(TrajectoryStep {
                step: i as u64,
                loss: 0.0,
                w: vec![w],
                w_hat: vec![c],
                code: vec![c],
                update: vec![w - prev],
            })
            .unwrap();
            prev = w;
        }
        r
    }

    fn update_record(updates: &[Vec<f64>]) -> TrajectoryRecord {
        let mut r = TrajectoryRecord::new();
        for (i, u) in updates.iter().enumerate() {
            r.push(TrajectoryStep {
                step: i as u64,
                loss: 0.0,
                w: vec![0.0; u.len()],
                w_hat: vec![0.0; u.len()],
                code: vec![1.0; u.len()],
                update: u.clone(),
            })
            .unwrap();
        }
        r
    }

    #[test]
    fn amplitude_examples() {
        let r = scalar_record(&[0.1, 0.1, 0.1], &[1.0; 3]);
        assert_eq!(oscillation_amplitude(&r, 0, 3).unwrap(), 0.0);
        let r = scalar_record(&[0.0, 0.002, 0.001], &[1.0; 3]);
        assert_eq!(oscillation_amplitude(&r, 0, 3).unwrap(), 0.002);
    }

    #[test]
    fn flip_examples() {
        let r = scalar_record(&[0.0; 5], &[1.0, -1.0, 1.0, 1.0, -1.0]);
        assert_eq!(flip_count(&r, 0, 5).unwrap(), 3);
        let r = scalar_record(&[0.0; 4], &[0.5; 4]);
        assert_eq!(flip_count(&r, 0, 4).unwrap(), 0);
    }

    #[test]
    fn direction_examples() {
        assert_eq!(
            direction_change_count(&update_record(&[vec![1.0, 0.0], vec![-1.0, 0.1]]), 2).unwrap(),
            1
        );
        assert_eq!(
            direction_change_count(&update_record(&[vec![1.0, 0.0], vec![0.0, 1.0]]), 2).unwrap(),
            0
        );
        assert_eq!(
            direction_change_count(&update_record(&vec![vec![0.3, -0.2]; 5]), 5).unwrap(),
            0
        );
    }

    #[test]
    fn tolerance_examples() {
        let mut r = TrajectoryRecord::new();
        for (i, loss) in [3.0, 2.0, 1.0, 0.5].into_iter().enumerate() {
            r.push(TrajectoryStep {
                step: i as u64 + 1,
                loss,
                w: vec![0.0],
                w_hat: vec![0.0],
                code: vec![1.0],
                update: vec![0.0],
            })
            .unwrap();
        }
        assert_eq!(steps_to_tolerance(&r, 0.0, 1.0).unwrap(), Some(3));
        assert_eq!(steps_to_tolerance(&r, 0.0, 0.1).unwrap(), None);
        assert!(steps_to_tolerance(&r, 0.0, 0.0).is_err());
    }

    #[test]
    fn window_errors() {
        let r = scalar_record(&[0.0, 1.0], &[1.0, 1.0]);
        assert_eq!(flip_count(&r, 0, 0), Err(MetricsError::EmptyWindow));
        assert!(matches!(flip_count(&r, 0, 3), Err(MetricsError::WindowTooLarge { .. })));
        assert!(matches!(flip_count(&r, 1, 2), Err(MetricsError::Coordinate { .. })));
        assert_eq!(direction_change_count(&r, 1), Err(MetricsError::TooFewUpdates));
    }

    #[test]
    fn push_validates() {
        let mut r = scalar_record(&[0.0, 1.0], &[1.0, 1.0]);
        let mut s = r.last().unwrap().clone();
        assert!(matches!(r.push(s.clone()), Err(MetricsError::NonIncreasingStep { .. })));
        s.step = 10;
        s.w = vec![0.0, 0.0];
        assert!(matches!(r.push(s), Err(MetricsError::Dimension { .. })));
    }
}
