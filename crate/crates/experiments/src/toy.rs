//! Low-dimensional toy objectives: the anisotropic 2-D quadratic and the
//! `c·|ω|^{3/2}` oscillation example.

use std::collections::HashMap;

use blaq_core::autodiff::Graph;
use blaq_core::curvature::CurvatureState;
use blaq_core::metrics::{self, TrajectoryRecord, TrajectoryStep};
use blaq_core::optimizers::{self, CountingOracle, LayerQuantState, OptimError};
use blaq_core::quantizer::QuantGrid;
use blaq_core::tensor::Tensor;
use serde::Serialize;

use crate::config::{ExperimentConfig, OptimizerKind};
use crate::error::RunError;
use crate::output::{self, Check};

/// `ℓ(ω) = 5(ω₁ − 0.054)² + (ω₂ + 0.055)²`.
pub const TOY2D_WEIGHTS: [f64; 2] = [5.0, 1.0];
pub const TOY2D_MINIMIZER: [f64; 2] = [0.054, -0.055];

/// LAQ flips at least this often over the window on the 3/2-power toy.
pub const POW32_LAQ_MIN_FLIPS: usize = 50;
/// BLAQ flips at most this often over the same window.
pub const POW32_BLAQ_MAX_FLIPS: usize = 5;

pub fn toy2d_graph() -> Graph {
    let mut g = Graph::new();
    let w = g.parameter("w", &[2]).expect("fresh graph");
    let c = g.constant(Tensor::vector(TOY2D_MINIMIZER.to_vec()).expect("finite"));
    let k = g.constant(Tensor::vector(TOY2D_WEIGHTS.to_vec()).expect("finite"));
    let d = g.sub(w, c).expect("shapes match");
    let sq = g.square(d).expect("unary");
    let weighted = g.mul(k, sq).expect("shapes match");
    let loss = g.sum(weighted).expect("unary");
    g.set_output(loss).expect("scalar");
    g
}

/// `c·|ω|^{3/2}`; its unique minimizer is 0.
pub fn pow32_graph(c: f64) -> Graph {
    let mut g = Graph::new();
    let w = g.parameter("w", &[1]).expect("fresh graph");
    let a = g.abs(w).expect("unary");
    let p = g.power(a, 1.5).expect("unary");
    let s = g.scale(p, c).expect("unary");
    let loss = g.sum(s).expect("unary");
    g.set_output(loss).expect("scalar");
    g
}

/// Loss and gradient of a single-parameter graph with leaf `w`.
pub fn evaluate(graph: &mut Graph, w: &[f64]) -> Result<(f64, Vec<f64>), RunError> {
    let t = Tensor::new(vec![w.len()], w.to_vec()).map_err(blaq_core::autodiff::GraphError::from)?;
    let loss = graph.forward(HashMap::from([("w".to_string(), t)]))?;
    let mut grads = graph.backward()?;
    let g = grads.remove("w").expect("w is trainable").into_data();
    Ok((loss, g))
}

/// Best `ŵ = αβ` for the 2-D quadratic over every code on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizedOptimum {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub loss: f64,
}

pub fn toy2d_quantized_optimum(grid: &QuantGrid) -> QuantizedOptimum {
    let lambda = TOY2D_WEIGHTS.map(|k| 2.0 * k);
    let loss = |w: [f64; 2]| -> f64 {
        (0..2)
            .map(|i| TOY2D_WEIGHTS[i] * (w[i] - TOY2D_MINIMIZER[i]).powi(2))
            .sum()
    };
    let mut best: Option<QuantizedOptimum> = None;
    for &b0 in grid.levels() {
        for &b1 in grid.levels() {
            let beta = [b0, b1];
            let num: f64 = (0..2).map(|i| lambda[i] * TOY2D_MINIMIZER[i] * beta[i]).sum();
            let den: f64 = (0..2).map(|i| lambda[i] * beta[i] * beta[i]).sum();
            let alpha = num / den;
            if alpha <= 0.0 {
                continue;
            }
            let l = loss([alpha * b0, alpha * b1]);
            if best.as_ref().map_or(true, |b| l < b.loss) {
                best = Some(QuantizedOptimum {
                    alpha,
                    beta: beta.to_vec(),
                    loss: l,
                });
            }
        }
    }
    best.expect("some code has a positive optimal scale")
}

/// A recorded run with its final optimizer state.
pub struct ToyRun {
    pub record: TrajectoryRecord,
    pub state: LayerQuantState,
    pub grad_evaluations: u64,
}

/// Runs `optimizer` at `bits` from `cfg.w0` for `cfg.steps` steps. Step 0
/// of the record is the starting point.
pub fn run_trajectory(
    cfg: &ExperimentConfig,
    optimizer: OptimizerKind,
    bits: u32,
    graph: &Graph,
) -> Result<ToyRun, RunError> {
    let dim = cfg.w0.len();
    let curvature = CurvatureState::new(dim, cfg.beta2, cfg.eps, cfg.schedule()?, cfg.metric)
        .map_err(OptimError::from)?;
    let grid = match optimizer {
        OptimizerKind::FullPrecision => None,
        _ => Some(QuantGrid::new(bits).map_err(OptimError::from)?),
    };
    let mut states = vec![LayerQuantState::new(cfg.w0.clone(), grid, curvature, cfg.m)?];

    let mut eval_graph = graph.clone();
    let mut loss_graph = graph.clone();
    let mut oracle = CountingOracle::new(|p: &[&[f64]]| {
        let (_, g) = evaluate(&mut eval_graph, p[0]).map_err(|e| match e {
            RunError::Graph(g) => OptimError::Evaluation(g),
            other => unreachable!("toy evaluation only raises graph errors: {other}"),
        })?;
        Ok(vec![g])
    });

    let mut record = TrajectoryRecord::new();
    let snapshot = |s: &LayerQuantState, loss_graph: &mut Graph, step: u64, prev: &[f64]| {
        let w_hat = s.w_hat();
        let (loss, _) = evaluate(loss_graph, &w_hat)?;
        Ok::<_, RunError>(TrajectoryStep {
            step,
            loss,
            update: s.w.iter().zip(prev).map(|(a, b)| a - b).collect(),
            w: s.w.clone(),
            w_hat,
            code: s.code.beta.clone(),
        })
    };
    record.push(snapshot(&states[0], &mut loss_graph, 0, &states[0].w)?)?;

    let blaq = cfg.blaq();
    for t in 1..=cfg.steps as u64 {
        let prev = states[0].w.clone();
        match optimizer {
            OptimizerKind::Laq => optimizers::laq_step(&mut states, cfg.m, &mut oracle)?,
            OptimizerKind::Blaq => optimizers::blaq_step(&mut states, &blaq, &mut oracle)?,
            OptimizerKind::FullPrecision => optimizers::full_precision_step(&mut states, &mut oracle)?,
        }
        record.push(snapshot(&states[0], &mut loss_graph, t, &prev)?)?;
    }
    let grad_evaluations = oracle.calls();
    Ok(ToyRun {
        record,
        state: states.pop().expect("one group"),
        grad_evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub optimizer: String,
    pub bits: Option<u32>,
    pub steps: usize,
    pub grad_evaluations: u64,
    pub final_w: Vec<f64>,
    pub final_w_hat: Vec<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub final_loss: f64,
    pub target_loss: f64,
    pub steps_to_tolerance: Option<u64>,
    pub window: usize,
    pub flip_count: Vec<usize>,
    pub direction_change_count: usize,
    pub oscillation_amplitude: Vec<f64>,
}

impl RunStats {
    pub fn total_flips(&self) -> usize {
        self.flip_count.iter().sum()
    }
}

/// Window metrics over the last `cfg.window` steps (excluding the start).
pub fn stats(
    cfg: &ExperimentConfig,
    optimizer: OptimizerKind,
    bits: u32,
    run: &ToyRun,
    target_loss: f64,
) -> Result<RunStats, RunError> {
    let window = cfg.window.min(run.record.len() - 1).max(2);
    let dim = cfg.w0.len();
    let last = run.record.last().expect("non-empty");
    let quantized = optimizer != OptimizerKind::FullPrecision;
    Ok(RunStats {
        optimizer: optimizer.name().to_string(),
        bits: quantized.then_some(bits),
        steps: cfg.steps,
        grad_evaluations: run.grad_evaluations,
        final_w: last.w.clone(),
        final_w_hat: last.w_hat.clone(),
        alpha: quantized.then_some(run.state.code.alpha),
        beta: quantized.then(|| run.state.code.beta.clone()),
        final_loss: last.loss,
        target_loss,
        steps_to_tolerance: metrics::steps_to_tolerance(&run.record, target_loss, cfg.tol)?,
        window,
        flip_count: (0..dim)
            .map(|c| metrics::flip_count(&run.record, c, window))
            .collect::<Result<_, _>>()?,
        direction_change_count: metrics::direction_change_count(&run.record, window)?,
        oscillation_amplitude: (0..dim)
            .map(|c| metrics::oscillation_amplitude(&run.record, c, window))
            .collect::<Result<_, _>>()?,
    })
}

fn fp_check(s: &RunStats) -> Check {
    let err = s
        .final_w
        .iter()
        .zip(TOY2D_MINIMIZER)
        .map(|(w, m)| (w - m).abs())
        .fold(0.0, f64::max);
    Check::new(
        "full-precision reaches the minimizer within 1e-6",
        err <= 1e-6,
        format!("max coordinate error {err:e}"),
    )
}

fn terminal_check(s: &RunStats, opt: &QuantizedOptimum) -> Check {
    let beta_ok = s.beta.as_deref() == Some(opt.beta.as_slice());
    let alpha = s.alpha.unwrap_or(f64::NAN);
    let alpha_ok = (alpha - opt.alpha).abs() <= 1e-4;
    Check::new(
        &format!("{} k={} terminates at the quantized optimum", s.optimizer, s.bits.unwrap_or(0)),
        beta_ok && alpha_ok,
        format!(
            "beta {:?} (optimum {:?}), alpha {alpha} (optimum {})",
            s.beta.as_deref().unwrap_or(&[]),
            opt.beta,
            opt.alpha
        ),
    )
}

#[derive(Debug, Serialize)]
struct Toy2dSummary<'a> {
    experiment: &'static str,
    minimizer: [f64; 2],
    quantized_optimum: &'a QuantizedOptimum,
    tol: f64,
    run: &'a RunStats,
    checks: &'a [Check],
}

#[derive(Debug, Serialize)]
struct Toy2dComparison<'a> {
    experiment: &'static str,
    minimizer: [f64; 2],
    tol: f64,
    runs: &'a [RunStats],
    quantized_optima: &'a [(u32, QuantizedOptimum)],
    checks: &'a [Check],
}

/// Bitwidths covered by the comparison report.
pub const COMPARE_BITS: [u32; 3] = [1, 2, 4];

/// toy2d: one run, or with `compare` every optimizer at every bitwidth
/// in [`COMPARE_BITS`] plus the full-precision reference.
pub fn run_toy2d(cfg: &ExperimentConfig) -> Result<Vec<Check>, RunError> {
    output::ensure_dir(&cfg.output_dir)?;
    output::write_json(&cfg.output_dir.join("config.json"), cfg)?;
    let graph = toy2d_graph();
    let coords = [0, 1];

    if !cfg.compare {
        let run = run_trajectory(cfg, cfg.optimizer, cfg.bits, &graph)?;
        output::write_trajectory_csv(&cfg.output_dir.join("trajectory.csv"), &run.record, &coords, &coords)?;
        let opt = toy2d_quantized_optimum(&cfg.grid());
        let (target, check) = match cfg.optimizer {
            OptimizerKind::FullPrecision => (0.0, None),
            _ => (opt.loss, Some(())),
        };
        let s = stats(cfg, cfg.optimizer, cfg.bits, &run, target)?;
        let checks = vec![match check {
            None => fp_check(&s),
            Some(()) => terminal_check(&s, &opt),
        }];
        output::write_json(
            &cfg.output_dir.join("summary.json"),
            &Toy2dSummary {
                experiment: "toy2d",
                minimizer: TOY2D_MINIMIZER,
                quantized_optimum: &opt,
                tol: cfg.tol,
                run: &s,
                checks: &checks,
            },
        )?;
        return Ok(checks);
    }

    let mut runs = Vec::new();
    let mut optima = Vec::new();
    let fp = run_trajectory(cfg, OptimizerKind::FullPrecision, cfg.bits, &graph)?;
    output::write_trajectory_csv(
        &cfg.output_dir.join("trajectory_full-precision.csv"),
        &fp.record,
        &coords,
        &coords,
    )?;
    runs.push(stats(cfg, OptimizerKind::FullPrecision, cfg.bits, &fp, 0.0)?);
    for bits in COMPARE_BITS {
        let opt = toy2d_quantized_optimum(&QuantGrid::new(bits).map_err(OptimError::from)?);
        for kind in [OptimizerKind::Laq, OptimizerKind::Blaq] {
            let run = run_trajectory(cfg, kind, bits, &graph)?;
            output::write_trajectory_csv(
                &cfg.output_dir.join(format!("trajectory_{}_k{bits}.csv", kind.name())),
                &run.record,
                &coords,
                &coords,
            )?;
            runs.push(stats(cfg, kind, bits, &run, opt.loss)?);
        }
        optima.push((bits, opt));
    }
    let checks = comparison_checks(&runs, &optima[0].1);
    output::write_json(
        &cfg.output_dir.join("summary.json"),
        &Toy2dComparison {
            experiment: "toy2d",
            minimizer: TOY2D_MINIMIZER,
            tol: cfg.tol,
            runs: &runs,
            quantized_optima: &optima,
            checks: &checks,
        },
    )?;
    Ok(checks)
}

fn find<'a>(runs: &'a [RunStats], opt: &str, bits: Option<u32>) -> &'a RunStats {
    runs.iter()
        .find(|r| r.optimizer == opt && (bits.is_none() || r.bits == bits))
        .expect("run present")
}

/// Orderings between the runs of a comparison report.
pub fn comparison_checks(runs: &[RunStats], opt_k1: &QuantizedOptimum) -> Vec<Check> {
    let fp = find(runs, "full-precision", None);
    let laq1 = find(runs, "laq", Some(1));
    let blaq1 = find(runs, "blaq", Some(1));
    let faster = match (blaq1.steps_to_tolerance, laq1.steps_to_tolerance) {
        (Some(b), Some(l)) => b < l,
        (Some(_), None) => true,
        _ => false,
    };
    let flips: Vec<usize> = COMPARE_BITS
        .iter()
        .map(|&k| find(runs, "laq", Some(k)).total_flips())
        .collect();
    vec![
        fp_check(fp),
        terminal_check(laq1, opt_k1),
        terminal_check(blaq1, opt_k1),
        Check::new(
            "blaq k=1 reaches tolerance in fewer steps than laq k=1",
            faster,
            format!(
                "blaq {:?}, laq {:?}",
                blaq1.steps_to_tolerance, laq1.steps_to_tolerance
            ),
        ),
        Check::new(
            "blaq k=1 changes direction less often than laq k=1",
            blaq1.direction_change_count < laq1.direction_change_count,
            format!(
                "blaq {}, laq {}",
                blaq1.direction_change_count, laq1.direction_change_count
            ),
        ),
        Check::new(
            "blaq k=1 flips less often than laq k=1",
            blaq1.total_flips() < laq1.total_flips(),
            format!("blaq {}, laq {}", blaq1.total_flips(), laq1.total_flips()),
        ),
        Check::new(
            "laq flip count is non-increasing in bitwidth",
            flips.windows(2).all(|p| p[0] >= p[1]),
            format!("k=1,2,4 flips {flips:?}"),
        ),
    ]
}

#[derive(Debug, Serialize)]
struct Pow32Summary<'a> {
    experiment: &'static str,
    c: f64,
    w0: f64,
    run: &'a RunStats,
    checks: &'a [Check],
}

/// The 3/2-power toy: reports quantized flips over the trailing window.
pub fn run_toy_pow32(cfg: &ExperimentConfig) -> Result<Vec<Check>, RunError> {
    output::ensure_dir(&cfg.output_dir)?;
    output::write_json(&cfg.output_dir.join("config.json"), cfg)?;
    let graph = pow32_graph(cfg.c);
    let run = run_trajectory(cfg, cfg.optimizer, cfg.bits, &graph)?;
    output::write_trajectory_csv(&cfg.output_dir.join("trajectory.csv"), &run.record, &[0], &[0])?;
    let s = stats(cfg, cfg.optimizer, cfg.bits, &run, 0.0)?;
    let flips = s.flip_count[0];
    let checks = match cfg.optimizer {
        OptimizerKind::Laq => vec![Check::new(
            "laq keeps oscillating",
            flips >= POW32_LAQ_MIN_FLIPS,
            format!("{flips} flips over the last {} steps", s.window),
        )],
        OptimizerKind::Blaq => vec![Check::new(
            "blaq settles",
            flips <= POW32_BLAQ_MAX_FLIPS,
            format!("{flips} flips over the last {} steps", s.window),
        )],
        OptimizerKind::FullPrecision => vec![],
    };
    output::write_json(
        &cfg.output_dir.join("summary.json"),
        &Pow32Summary {
            experiment: "toy-pow32",
            c: cfg.c,
            w0: cfg.w0[0],
            run: &s,
            checks: &checks,
        },
    )?;
    Ok(checks)
}
