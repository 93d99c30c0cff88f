//! Numeric checks of the convergence bound and the LAQ/BLAQ comparison
//! region on diagonal quadratics with known constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvature::{CurvatureState, LrSchedule, Metric};
use crate::optimizers::{self, BlaqConfig, LayerQuantState, OptimError};
use crate::quantizer::QuantGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid quadratic: {0}")]
    Quadratic(String),
    #[error("invalid suite setting: {0}")]
    Setting(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub l1: f64,
    pub mu: f64,
    pub eta: f64,
    pub delta: f64,
    pub a: f64,
}

/// `(L1 + L1³η² − 2μ²η)/2 · Δ²`.
pub fn theorem1_bound(p: &TheoryParams) -> f64 {
    (p.l1 + p.l1.powi(3) * p.eta * p.eta - 2.0 * p.mu * p.mu * p.eta) / 2.0 * p.delta * p.delta
}

/// Open interval `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo < x && x < self.hi
    }
}

/// Mixing coefficients for which BLAQ is claimed to beat LAQ:
/// `(2/(L1·η) − 1, 1)`, empty when `L1·η ≤ 1`.
pub fn theorem2_region(l1: f64, eta: f64) -> Interval {
    Interval {
        lo: 2.0 / (l1 * eta) - 1.0,
        hi: 1.0,
    }
}

/// `ℓ(w) = ½ Σ λ_i (w_i − c_i)²` with all `λ_i > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    lambda: Vec<f64>,
    center: Vec<f64>,
}

impl Quadratic {
    pub fn new(lambda: Vec<f64>, center: Vec<f64>) -> Result<Self, TheoryError> {
        if lambda.is_empty() || lambda.len() != center.len() {
            return Err(TheoryError::Quadratic(format!(
                "{} curvatures for {} centers",
                lambda.len(),
                center.len()
            )));
        }
        if lambda.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(TheoryError::Quadratic("curvatures must be positive".into()));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(TheoryError::Quadratic("centers must be finite".into()));
        }
        Ok(Self { lambda, center })
    }

    /// Random instance whose smallest curvature is exactly `mu` and largest
    /// exactly `l1`; the rest are log-uniform in between. Centers are
    /// uniform in `[−1, 1]`.
    pub fn random(rng: &mut impl Rng, dim: usize, mu: f64, l1: f64) -> Result<Self, TheoryError> {
        if dim < 2 || !(mu > 0.0 && mu <= l1) {
            return Err(TheoryError::Quadratic(format!(
                "need dim ≥ 2 and 0 < mu ≤ l1, got dim {dim}, mu {mu}, l1 {l1}"
            )));
        }
        let (lo, hi) = (mu.ln(), l1.ln());
        let mut lambda: Vec<f64> = (0..dim)
            .map(|_| if hi > lo { rng.random_range(lo..hi).exp() } else { mu })
            .collect();
        lambda[0] = mu;
        lambda[1] = l1;
        let center = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self::new(lambda, center)
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// The unconstrained minimizer.
    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn l1(&self) -> f64 {
        self.lambda.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn mu(&self) -> f64 {
        self.lambda.iter().copied().fold(f64::MAX, f64::min)
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        0.5 * self
            .lambda
            .iter()
            .zip(&self.center)
            .zip(w)
            .map(|((l, c), x)| l * (x - c).powi(2))
            .sum::<f64>()
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        self.lambda
            .iter()
            .zip(&self.center)
            .zip(w)
            .map(|((l, c), x)| l * (x - c))
            .collect()
    }
}

/// Outcome of running both quantized optimizers on one quadratic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Final loss at the quantized iterate.
    pub loss_blaq: f64,
    pub loss_laq: f64,
    /// BLAQ steps where `ℓ(ω^{t+1}) − ℓ(ω*)` exceeded a positive bound
    /// computed with `Δ = ‖ω^t − ω*‖`.
    pub bound_violations: usize,
    /// BLAQ steps where the bound was positive and therefore checked.
    pub bound_checked: usize,
}

/// Runs LAQ and BLAQ from `w0` for `steps` steps with the fixed metric
/// `I/η` and the same grid.
pub fn compare_convergence(
    q: &Quadratic,
    grid: &QuantGrid,
    cfg: &BlaqConfig,
    eta: f64,
    steps: usize,
    w0: &[f64],
) -> Result<Comparison, TheoryError> {
    let fresh = || -> Result<Vec<LayerQuantState>, TheoryError> {
        let schedule = LrSchedule::constant(eta).map_err(OptimError::from)?;
        let curvature =
            CurvatureState::new(q.dim(), 0.999, 1e-8, schedule, Metric::Identity).map_err(OptimError::from)?;
        Ok(vec![LayerQuantState::new(
            w0.to_vec(),
            Some(grid.clone()),
            curvature,
            cfg.m,
        )?])
    };
    let mut oracle = |p: &[&[f64]]| Ok(vec![q.grad(p[0])]);

    let mut laq = fresh()?;
    for _ in 0..steps {
        optimizers::laq_step(&mut laq, cfg.m, &mut oracle)?;
    }

    let mut blaq = fresh()?;
    let optimum = q.loss(q.center());
    let params = |delta| TheoryParams {
        l1: q.l1(),
        mu: q.mu(),
        eta,
        delta,
        a: cfg.a,
    };
    let (mut violations, mut checked) = (0, 0);
    for _ in 0..steps {
        let delta = distance(&blaq[0].w, q.center());
        optimizers::blaq_step(&mut blaq, cfg, &mut oracle)?;
        let bound = theorem1_bound(&params(delta));
        if bound > 0.0 {
            checked += 1;
            if q.loss(&blaq[0].w) - optimum > bound {
                violations += 1;
            }
        }
    }

    Ok(Comparison {
        loss_blaq: q.loss(&blaq[0].w_hat()),
        loss_laq: q.loss(&laq[0].w_hat()),
        bound_violations: violations,
        bound_checked: checked,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Settings of the random quadratic suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub min_dim: usize,
    pub max_dim: usize,
    pub mu: f64,
    pub l1_min: f64,
    pub l1_max: f64,
    /// `η` is drawn as `f/L1` with `f` uniform in this range.
    pub eta_factor: (f64, f64),
    pub bits: u32,
    pub m: usize,
    pub steps: usize,
    /// Minimum number of instances with `loss_blaq ≤ loss_laq + slack`.
    pub required: usize,
    pub slack: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            min_dim: 2,
            max_dim: 8,
            mu: 1.0,
            l1_min: 2.0,
            l1_max: 20.0,
            eta_factor: (1.1, 1.9),
            bits: 1,
            m: 5,
            steps: 300,
            required: 45,
            slack: 1e-9,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |msg: &str| Err(TheoryError::Setting(msg.to_string()));
        if self.instances == 0 || self.steps == 0 || self.m == 0 {
            return bad("instances, steps and m must be positive");
        }
        if self.min_dim < 2 || self.min_dim > self.max_dim {
            return bad("dimension range must satisfy 2 ≤ min_dim ≤ max_dim");
        }
        if !(self.mu > 0.0 && self.mu <= self.l1_min && self.l1_min <= self.l1_max) {
            return bad("curvature range must satisfy 0 < mu ≤ l1_min ≤ l1_max");
        }
        let (f0, f1) = self.eta_factor;
        if !(f0 > 0.0 && f0 <= f1) {
            return bad("eta_factor must be a positive, ordered pair");
        }
        if !(self.slack >= 0.0) {
            return bad("slack must be non-negative");
        }
        QuantGrid::new(self.bits).map_err(|e| TheoryError::Setting(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub dim: usize,
    #[serde(rename = "L1")]
    pub l1: f64,
    pub mu: f64,
    pub eta: f64,
    pub a: f64,
    /// Set when the comparison region is empty; such instances are not run.
    pub skipped: bool,
    pub loss_blaq: Option<f64>,
    pub loss_laq: Option<f64>,
    pub blaq_not_worse: Option<bool>,
    pub bound_violations: usize,
    pub bound_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub delta_definition: String,
    pub comparison_metric: String,
    pub evaluated: usize,
    pub skipped: usize,
    pub blaq_not_worse: usize,
    pub required: usize,
    pub total_bound_violations: usize,
    pub instances: Vec<InstanceReport>,
}

impl SuiteReport {
    pub fn ordering_holds(&self) -> bool {
        self.blaq_not_worse >= self.required
    }

    pub fn bound_holds(&self) -> bool {
        self.total_bound_violations == 0
    }
}

/// Draws and runs the random quadratic suite. Each instance gets its own
/// dimension, `L1`, `η` (inside the stable range so the region is
/// non-empty), `a` uniform in the region, centers and start point.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport, TheoryError> {
    cfg.validate()?;
    let grid = QuantGrid::new(cfg.bits).map_err(OptimError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut instances = Vec::with_capacity(cfg.instances);
    for index in 0..cfg.instances {
        let dim = rng.random_range(cfg.min_dim..=cfg.max_dim);
        let l1 = if cfg.l1_max > cfg.l1_min {
            rng.random_range(cfg.l1_min..cfg.l1_max)
        } else {
            cfg.l1_min
        };
        let q = Quadratic::random(&mut rng, dim, cfg.mu, l1)?;
        let w0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (f0, f1) = cfg.eta_factor;
        let eta = if f1 > f0 { rng.random_range(f0..f1) } else { f0 } / l1;
        let region = theorem2_region(l1, eta);
        let u: f64 = rng.random();
        let mut report = InstanceReport {
            index,
            dim,
            l1,
            mu: cfg.mu,
            eta,
            a: f64::NAN,
            skipped: true,
            loss_blaq: None,
            loss_laq: None,
            blaq_not_worse: None,
            bound_violations: 0,
            bound_checked: 0,
        };
        if region.is_empty() {
            report.a = 1.0;
            instances.push(report);
            continue;
        }
        let lo = region.lo.max(0.0);
        let a = lo + u * (region.hi - lo);
        let blaq = BlaqConfig::new(a, cfg.m)?;
        let c = compare_convergence(&q, &grid, &blaq, eta, cfg.steps, &w0)?;
        report.a = a;
        report.skipped = false;
        report.blaq_not_worse = Some(c.loss_blaq <= c.loss_laq + cfg.slack);
        report.loss_blaq = Some(c.loss_blaq);
        report.loss_laq = Some(c.loss_laq);
        report.bound_violations = c.bound_violations;
        report.bound_checked = c.bound_checked;
        instances.push(report);
    }
    let evaluated = instances.iter().filter(|r| !r.skipped).count();
    Ok(SuiteReport {
        delta_definition: "Delta = ||w^t - w*||, distance of the full-precision iterate to the unconstrained minimizer before the step".into(),
        comparison_metric: "final loss at the quantized iterate".into(),
        evaluated,
        skipped: instances.len() - evaluated,
        blaq_not_worse: instances.iter().filter(|r| r.blaq_not_worse == Some(true)).count(),
        required: cfg.required,
        total_bound_violations: instances.iter().map(|r| r.bound_violations).sum(),
        instances,
    })
}
