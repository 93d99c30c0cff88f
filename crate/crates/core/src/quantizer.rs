//! Fixed-point level grids and the metric-weighted scaled projection
//! `argmin_{α,β} ½ Σ d_i (w_i − α β_i)²` with every `β_i` on the grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scale returned for an all-zero input, where any α is optimal.
pub const ALPHA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bitwidth must be between 1 and 16, got {0}")]
    Bitwidth(u32),
    #[error("weights have length {w} but metric has length {d}")]
    LengthMismatch { w: usize, d: usize },
    #[error("metric entry {index} is {value}, must be positive and finite")]
    NonPositiveMetric { index: usize, value: f64 },
    #[error("alternating iteration count must be at least 1")]
    ZeroIterations,
    #[error("cannot project an empty vector")]
    Empty,
    #[error("weight entry {index} is not finite")]
    NonFinite { index: usize },
}

/// The symmetric level set `{±i/2^(k−1) : i = 1..2^(k−1)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct QuantGrid {
    bits: u32,
    levels: Vec<f64>,
}

impl QuantGrid {
    pub fn new(bits: u32) -> Result<Self, QuantError> {
        if !(1..=16).contains(&bits) {
            return Err(QuantError::Bitwidth(bits));
        }
        let half = 1usize << (bits - 1);
        let step = 1.0 / half as f64;
        let mut levels: Vec<f64> = (1..=half).rev().map(|i| -(i as f64) * step).collect();
        levels.extend((1..=half).map(|i| i as f64 * step));
        Ok(Self { bits, levels })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Sorted ascending.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Closest level to `x`, clamping to ±1; ties go away from zero and
    /// zero itself maps to the smallest positive level.
    pub fn nearest_level(&self, x: f64) -> f64 {
        let half = (self.levels.len() / 2) as f64;
        let mag = x.abs().min(1.0);
        // Levels are i/half; the nearest i ≥ 1 with ties rounded up.
        let i = (mag * half + 0.5).floor().clamp(1.0, half);
        let level = i / half;
        if x < 0.0 {
            -level
        } else {
            level
        }
    }
}

impl TryFrom<u32> for QuantGrid {
    type Error = QuantError;

    fn try_from(bits: u32) -> Result<Self, Self::Error> {
        Self::new(bits)
    }
}

impl From<QuantGrid> for u32 {
    fn from(g: QuantGrid) -> u32 {
        g.bits
    }
}

/// Quantized weights `ŵ = α·β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledCode {
    pub alpha: f64,
    pub beta: Vec<f64>,
}

impl ScaledCode {
    pub fn dequantize(&self) -> Vec<f64> {
        self.beta.iter().map(|b| self.alpha * b).collect()
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// `½ Σ d_i (w_i − α β_i)²`.
pub fn weighted_objective(w: &[f64], d: &[f64], code: &ScaledCode) -> f64 {
    0.5 * w
        .iter()
        .zip(d)
        .zip(&code.beta)
        .map(|((wi, di), bi)| di * (wi - code.alpha * bi).powi(2))
        .sum::<f64>()
}

/// Alternating minimization over β (nearest level of `w/α`) and α
/// (weighted least squares given β), run `m` times from [`initial_scale`].
pub fn project(w: &[f64], d: &[f64], grid: &QuantGrid, m: usize) -> Result<ScaledCode, QuantError> {
    project_traced(w, d, grid, m, |_| {})
}

/// [`project`] calling `observe` with the intermediate code after every
/// half-step (β update, then α update).
pub fn project_traced(
    w: &[f64],
    d: &[f64],
    grid: &QuantGrid,
    m: usize,
    observe: impl FnMut(&ScaledCode),
) -> Result<ScaledCode, QuantError> {
    validate(w, d, m)?;
    let alpha0 = initial_scale(w, d, grid);
    project_from(w, d, grid, m, alpha0, observe)
}

/// The alternating iteration started from an arbitrary scale `alpha0 > 0`.
pub fn project_from(
    w: &[f64],
    d: &[f64],
    grid: &QuantGrid,
    m: usize,
    alpha0: f64,
    mut observe: impl FnMut(&ScaledCode),
) -> Result<ScaledCode, QuantError> {
    validate(w, d, m)?;
    if w.iter().all(|&x| x == 0.0) {
        return Ok(ScaledCode {
            alpha: ALPHA_FLOOR,
            beta: vec![1.0; w.len()],
        });
    }
    let mut code = ScaledCode {
        alpha: alpha0.max(ALPHA_FLOOR),
        beta: vec![1.0; w.len()],
    };
    for _ in 0..m {
        for (b, wi) in code.beta.iter_mut().zip(w) {
            *b = grid.nearest_level(wi / code.alpha);
        }
        observe(&code);
        let (mut num, mut den) = (0.0, 0.0);
        for ((wi, di), bi) in w.iter().zip(d).zip(&code.beta) {
            num += di * wi * bi;
            den += di * bi * bi;
        }
        // β_i shares the sign of w_i wherever w_i ≠ 0, so num > 0 here.
        code.alpha = (num / den).max(ALPHA_FLOOR);
        observe(&code);
    }
    Ok(code)
}

/// Weighted mean of `|w|`: the exact 1-bit scale.
pub fn weighted_mean_scale(w: &[f64], d: &[f64]) -> f64 {
    w.iter().zip(d).map(|(wi, di)| di * wi.abs()).sum::<f64>() / d.iter().sum::<f64>()
}

/// Starting scale for the alternation.
///
/// As α decreases from ∞, the nearest-level code of `w/α` changes only when
/// some `|w_i|/α` crosses a midpoint between adjacent levels, so there are
/// at most `n·(2^(k−1) − 1) + 1` distinct codes. Each is scored with its own
/// least-squares scale and the best scale is returned. The optimal code is
/// the nearest-level code of its own scale, so it is among the candidates.
/// For `k = 1` there is a single candidate and this is [`weighted_mean_scale`].
///
/// Inputs are assumed valid (equal lengths, `d > 0`).
pub fn initial_scale(w: &[f64], d: &[f64], grid: &QuantGrid) -> f64 {
    let half = grid.levels().len() / 2;
    let step = 1.0 / half as f64;
    if half == 1 {
        return weighted_mean_scale(w, d);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (wi, di) in w.iter().zip(d) {
        num += di * wi.abs() * step;
        den += di * step * step;
    }

    // (α at which coordinate i moves up to level j+1, i, j+1)
    let mut events: Vec<(f64, usize, usize)> = Vec::new();
    for (i, wi) in w.iter().enumerate() {
        let a = wi.abs();
        if a == 0.0 {
            continue;
        }
        for j in 1..half {
            let midpoint = (j as f64 + 0.5) * step;
            events.push((a / midpoint, i, j + 1));
        }
    }
    events.sort_by(|x, y| y.0.total_cmp(&x.0));

    // With α at its least-squares value the objective is ½(Σdw² − num²/den),
    // so maximizing num²/den picks the best code.
    let score = |num: f64, den: f64| num * num / den;
    let mut best = (score(num, den), num / den);
    let mut level = vec![1usize; w.len()];
    let mut k = 0;
    while k < events.len() {
        let at = events[k].0;
        while k < events.len() && events[k].0 == at {
            let (_, i, to) = events[k];
            let (old, new) = (level[i] as f64 * step, to as f64 * step);
            num += d[i] * w[i].abs() * (new - old);
            den += d[i] * (new * new - old * old);
            level[i] = to;
            k += 1;
        }
        // Codes that are scaled copies of each other score the same; the
        // later (smaller α, max |β| = 1) one is kept so the result does not
        // depend on summation order.
        let s = score(num, den);
        if s >= best.0 * (1.0 - 1e-12) {
            best = (s.max(best.0), num / den);
        }
    }
    best.1
}

/// The exact 1-bit projection: `β = sign(w)`, `α` the `d`-weighted mean of `|w|`.
pub fn project_binary(w: &[f64], d: &[f64]) -> Result<ScaledCode, QuantError> {
    validate(w, d, 1)?;
    if w.iter().all(|&x| x == 0.0) {
        return Ok(ScaledCode {
            alpha: ALPHA_FLOOR,
            beta: vec![1.0; w.len()],
        });
    }
    Ok(ScaledCode {
        alpha: weighted_mean_scale(w, d),
        beta: w.iter().map(|&x| if x < 0.0 { -1.0 } else { 1.0 }).collect(),
    })
}

fn validate(w: &[f64], d: &[f64], m: usize) -> Result<(), QuantError> {
    if w.len() != d.len() {
        return Err(QuantError::LengthMismatch { w: w.len(), d: d.len() });
    }
    if w.is_empty() {
        return Err(QuantError::Empty);
    }
    if m == 0 {
        return Err(QuantError::ZeroIterations);
    }
    if let Some(index) = w.iter().position(|x| !x.is_finite()) {
        return Err(QuantError::NonFinite { index });
    }
    if let Some((index, &value)) = d.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
        return Err(QuantError::NonPositiveMetric { index, value });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_levels() {
        assert_eq!(QuantGrid::new(1).unwrap().levels(), &[-1.0, 1.0]);
        assert_eq!(
            QuantGrid::new(2).unwrap().levels(),
            &[-1.0, -0.5, 0.5, 1.0]
        );
        let g4 = QuantGrid::new(4).unwrap();
        assert_eq!(g4.levels().len(), 16);
        assert_eq!(g4.levels()[8], 0.125);
        assert!(QuantGrid::new(0).is_err());
    }

    #[test]
    fn nearest_level_examples() {
        let g2 = QuantGrid::new(2).unwrap();
        assert_eq!(g2.nearest_level(0.6), 0.5);
        assert_eq!(g2.nearest_level(0.75), 1.0);
        assert_eq!(g2.nearest_level(-0.75), -1.0);
        assert_eq!(g2.nearest_level(0.0), 0.5);
        assert_eq!(g2.nearest_level(-0.1), -0.5);
        let g1 = QuantGrid::new(1).unwrap();
        assert_eq!(g1.nearest_level(-2.0), -1.0);
        assert_eq!(g1.nearest_level(0.0), 1.0);
    }

    #[test]
    fn binary_example() {
        let g = QuantGrid::new(1).unwrap();
        let c = project(&[0.3, -0.5], &[1.0, 1.0], &g, 5).unwrap();
        assert_eq!(c.beta, vec![1.0, -1.0]);
        assert!((c.alpha - 0.4).abs() < 1e-15);
    }

    #[test]
    fn initial_scale_cases() {
        let w = [0.3, -0.5, 0.0];
        let d = [1.0, 3.0, 2.0];
        assert_eq!(initial_scale(&w, &d, &QuantGrid::new(1).unwrap()), weighted_mean_scale(&w, &d));
        // Codes (±1, ±1) and (±0.5, ±1) are the candidates that matter; the
        // second fits [0.25, 0.5] exactly with α = 0.5.
        let g2 = QuantGrid::new(2).unwrap();
        assert!((initial_scale(&[0.25, 0.5], &[1.0, 1.0], &g2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_zero_input() {
        let g = QuantGrid::new(2).unwrap();
        let c = project(&[0.0; 3], &[1.0; 3], &g, 5).unwrap();
        assert_eq!(c.alpha, ALPHA_FLOOR);
        assert_eq!(c.beta, vec![1.0; 3]);
    }

    #[test]
    fn domain_errors() {
        let g = QuantGrid::new(1).unwrap();
        assert!(matches!(
            project(&[1.0, 2.0], &[1.0, 0.0], &g, 5),
            Err(QuantError::NonPositiveMetric { index: 1, .. })
        ));
        assert!(matches!(
            project(&[1.0], &[1.0, 1.0], &g, 5),
            Err(QuantError::LengthMismatch { .. })
        ));
        assert_eq!(project(&[1.0], &[1.0], &g, 0), Err(QuantError::ZeroIterations));
    }

    #[test]
    fn exact_code_is_recovered() {
        let g = QuantGrid::new(2).unwrap();
        let w = [0.3, -0.15, 0.15, -0.3];
        let c = project(&w, &[1.0, 2.0, 3.0, 4.0], &g, 5).unwrap();
        assert!((c.alpha - 0.3).abs() < 1e-15);
        assert_eq!(c.beta, vec![1.0, -0.5, 0.5, -1.0]);
    }
}
