//! Fully-connected MNIST classifier trained with LAQ, BLAQ or full precision.

use std::collections::HashMap;

use blaq_core::autodiff::{Bindings, Graph, GraphError, NodeId};
use blaq_core::curvature::{CurvatureState, LrSchedule};
use blaq_core::metrics::{self, TrajectoryRecord, TrajectoryStep};
use blaq_core::optimizers::{self, CountingOracle, LayerQuantState, OptimError};
use blaq_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, OptimizerKind};
use crate::data::{self, MnistDataset, Split, CLASSES, PIXELS};
use crate::error::RunError;
use crate::output::{self, Check, EpochRow};

/// Layer widths from input to output.
pub fn layer_sizes(hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![PIXELS];
    sizes.extend_from_slice(hidden);
    sizes.push(CLASSES);
    sizes
}

/// Parameter names and shapes, weights and biases interleaved per layer.
pub fn parameter_shapes(sizes: &[usize]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (l, pair) in sizes.windows(2).enumerate() {
        out.push((format!("W{}", l + 1), vec![pair[0], pair[1]]));
        out.push((format!("b{}", l + 1), vec![pair[1]]));
    }
    out
}

/// An MLP graph for a fixed batch size: relu hidden layers, softmax
/// cross-entropy output. Inputs are `x` (batch×784) and `y` (batch).
pub struct Mlp {
    pub graph: Graph,
    pub logits: NodeId,
    pub batch: usize,
    names: Vec<String>,
}

impl Mlp {
    pub fn new(sizes: &[usize], batch: usize) -> Result<Self, GraphError> {
        let mut g = Graph::new();
        let x = g.input("x", &[batch, sizes[0]])?;
        let y = g.input("y", &[batch])?;
        let mut h = x;
        let layers = sizes.len() - 1;
        let mut names = Vec::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            let w = g.parameter(&format!("W{}", l + 1), &[pair[0], pair[1]])?;
            let b = g.parameter(&format!("b{}", l + 1), &[pair[1]])?;
            names.push(format!("W{}", l + 1));
            names.push(format!("b{}", l + 1));
            let z = g.matmul(h, w)?;
            let z = g.add_bias(z, b)?;
            h = if l + 1 < layers { g.relu(z)? } else { z };
        }
        let loss = g.softmax_cross_entropy(h, y)?;
        g.set_output(loss)?;
        Ok(Self {
            graph: g,
            logits: h,
            batch,
            names,
        })
    }

    fn bind(&self, params: &[&[f64]], x: Tensor, y: Tensor) -> Result<Bindings, GraphError> {
        let mut b: Bindings = HashMap::with_capacity(params.len() + 2);
        b.insert("x".into(), x);
        b.insert("y".into(), y);
        for (name, p) in self.names.iter().zip(params) {
            let id = self.graph.leaf_id(name).expect("parameter exists");
            let shape = self.graph.node_shape(id).expect("node exists").to_vec();
            b.insert(name.clone(), Tensor::new(shape, p.to_vec())?);
        }
        Ok(b)
    }

    /// Loss and one gradient per parameter group, in group order.
    pub fn loss_and_grads(
        &mut self,
        params: &[&[f64]],
        x: &Tensor,
        y: &Tensor,
    ) -> Result<(f64, Vec<Vec<f64>>), GraphError> {
        let bindings = self.bind(params, x.clone(), y.clone())?;
        let loss = self.graph.forward(bindings)?;
        let mut grads = self.graph.backward()?;
        let out = self
            .names
            .iter()
            .map(|n| grads.remove(n).expect("trainable").into_data())
            .collect();
        Ok((loss, out))
    }

    /// Number of correct argmax predictions on the batch.
    pub fn correct(&mut self, params: &[&[f64]], x: Tensor, y: Tensor) -> Result<usize, GraphError> {
        let labels = y.data().to_vec();
        let bindings = self.bind(params, x, y)?;
        self.graph.forward(bindings)?;
        let logits = self.graph.value(self.logits).expect("forward ran");
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(classes)
            .zip(labels)
            .filter(|(row, label)| argmax(row) == *label as usize)
            .count())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Glorot-uniform weights and zero biases.
pub fn init_params(sizes: &[usize], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for pair in sizes.windows(2) {
        let limit = (6.0 / (pair[0] + pair[1]) as f64).sqrt();
        out.push((0..pair[0] * pair[1]).map(|_| rng.random_range(-limit..limit)).collect());
        out.push(vec![0.0; pair[1]]);
    }
    out
}

/// Test accuracy of `params` over the whole split.
pub fn accuracy(sizes: &[usize], params: &[&[f64]], split: &Split, batch: usize) -> Result<f64, GraphError> {
    let n = split.len();
    let batch = batch.min(n);
    let mut graphs: HashMap<usize, Mlp> = HashMap::new();
    let mut correct = 0;
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let idx: Vec<usize> = (start..start + len).collect();
        if !graphs.contains_key(&len) {
            graphs.insert(len, Mlp::new(sizes, len)?);
        }
        let mlp = graphs.get_mut(&len).expect("inserted");
        let x = Tensor::new(vec![len, PIXELS], split.pixels(&idx))?;
        let y = Tensor::new(vec![len], split.labels_f64(&idx))?;
        correct += mlp.correct(params, x, y)?;
        start += len;
    }
    Ok(correct as f64 / n as f64)
}

/// Converts `(epoch, η)` pairs to curvature steps: epoch `e` begins at
/// step `e·steps_per_epoch + 1`.
pub fn epoch_schedule(points: &[(u64, f64)], steps_per_epoch: usize) -> Result<LrSchedule, RunError> {
    let converted = points
        .iter()
        .map(|&(e, v)| (e * steps_per_epoch as u64 + 1, v))
        .collect();
    Ok(LrSchedule::new(converted).map_err(OptimError::from)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledCoord {
    pub coord_id: usize,
    pub layer: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MnistSummary {
    pub experiment: &'static str,
    pub optimizer: String,
    pub bits: Option<u32>,
    pub layer_sizes: Vec<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub grad_evaluations: u64,
    pub final_train_loss: f64,
    pub final_test_accuracy: f64,
    pub sampled_coords: Vec<SampledCoord>,
    /// Trailing window used for the zig-zag metrics: the last quarter of
    /// all optimizer steps.
    pub window: usize,
    pub flip_count: Vec<usize>,
    pub oscillation_amplitude: Vec<f64>,
    pub checks: Vec<Check>,
}

/// Trains the model and writes the epoch log, coordinate traces and summary.
pub fn run_train_mnist(cfg: &ExperimentConfig) -> Result<MnistSummary, RunError> {
    let dir = cfg.resolve_data_dir();
    if let Some(mirror) = &cfg.mirror {
        data::fetch_missing(&dir, mirror)?;
    }
    let mut ds = data::load_mnist(&dir)?;
    if let Some(n) = cfg.train_limit {
        ds.train.truncate(n);
    }
    if let Some(n) = cfg.test_limit {
        ds.test.truncate(n);
    }
    output::ensure_dir(&cfg.output_dir)?;
    output::write_json(&cfg.output_dir.join("config.json"), cfg)?;
    train(cfg, &ds)
}

pub fn train(cfg: &ExperimentConfig, ds: &MnistDataset) -> Result<MnistSummary, RunError> {
    let sizes = layer_sizes(&cfg.hidden);
    let shapes = parameter_shapes(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = init_params(&sizes, &mut rng);

    let n = ds.train.len();
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n / batch;
    let schedule = epoch_schedule(&cfg.eta, steps_per_epoch)?;

    let quantized = cfg.optimizer != OptimizerKind::FullPrecision;
    let mut states = Vec::with_capacity(init.len());
    for ((name, _), w0) in shapes.iter().zip(init) {
        let curvature = CurvatureState::new(w0.len(), cfg.beta2, cfg.eps, schedule.clone(), cfg.metric)
            .map_err(OptimError::from)?;
        let grid = (quantized && name.starts_with('W')).then(|| cfg.grid());
        states.push(LayerQuantState::new(w0, grid, curvature, cfg.m)?);
    }

    // Coordinates are drawn from weight matrices only, by global index over
    // the concatenated weights.
    let weight_groups: Vec<usize> = (0..shapes.len()).step_by(2).collect();
    let total_weights: usize = weight_groups.iter().map(|&g| states[g].dim()).sum();
    let mut sampled: Vec<usize> = rand::seq::index::sample(&mut rng, total_weights, cfg.coords.min(total_weights)).into_vec();
    sampled.sort_unstable();
    let locate = |global: usize| -> (usize, usize) {
        let mut rest = global;
        for &g in &weight_groups {
            if rest < states[g].dim() {
                return (g, rest);
            }
            rest -= states[g].dim();
        }
        unreachable!("index below total")
    };
    let located: Vec<(usize, usize)> = sampled.iter().map(|&c| locate(c)).collect();

    let mut mlp = Mlp::new(&sizes, batch)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut record = TrajectoryRecord::new();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let blaq = cfg.blaq();
    let mut grad_evaluations = 0;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks_exact(batch) {
            let x = Tensor::new(vec![batch, PIXELS], ds.train.pixels(chunk)).map_err(GraphError::from)?;
            let y = Tensor::new(vec![batch], ds.train.labels_f64(chunk)).map_err(GraphError::from)?;
            let mut first_loss = None;
            let before: Vec<f64> = located.iter().map(|&(g, i)| states[g].w[i]).collect();
            {
                let mut oracle = CountingOracle::new(|points: &[&[f64]]| {
                    let (loss, grads) = mlp.loss_and_grads(points, &x, &y)?;
                    first_loss.get_or_insert(loss);
                    Ok(grads)
                });
                match cfg.optimizer {
                    OptimizerKind::Laq => optimizers::laq_step(&mut states, cfg.m, &mut oracle)?,
                    OptimizerKind::Blaq => optimizers::blaq_step(&mut states, &blaq, &mut oracle)?,
                    OptimizerKind::FullPrecision => optimizers::full_precision_step(&mut states, &mut oracle)?,
                }
                grad_evaluations += oracle.calls();
            }
            step += 1;
            let loss = first_loss.expect("oracle ran");
            loss_sum += loss;
            let w: Vec<f64> = located.iter().map(|&(g, i)| states[g].w[i]).collect();
            record.push(TrajectoryStep {
                step,
                loss,
                update: w.iter().zip(&before).map(|(a, b)| a - b).collect(),
                w_hat: located
                    .iter()
                    .map(|&(g, i)| states[g].code.alpha * states[g].code.beta[i])
                    .collect(),
                code: located.iter().map(|&(g, i)| states[g].code.beta[i]).collect(),
                w,
            })?;
        }
        let points: Vec<Vec<f64>> = states.iter().map(LayerQuantState::w_hat).collect();
        let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
        let acc = accuracy(&sizes, &refs, &ds.test, 1000)?;
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            test_accuracy: acc,
        });
    }

    output::write_training_csv(&cfg.output_dir.join("training.csv"), &rows)?;
    let positions: Vec<usize> = (0..sampled.len()).collect();
    output::write_trajectory_csv(&cfg.output_dir.join("trajectory.csv"), &record, &positions, &sampled)?;

    let window = (record.len() / 4).max(2).min(record.len());
    let flip_count = positions
        .iter()
        .map(|&c| metrics::flip_count(&record, c, window))
        .collect::<Result<Vec<_>, _>>()?;
    let oscillation_amplitude = positions
        .iter()
        .map(|&c| metrics::oscillation_amplitude(&record, c, window))
        .collect::<Result<Vec<_>, _>>()?;
    let last = rows.last().expect("at least one epoch");
    let mut checks = Vec::new();
    if let Some(min) = cfg.min_accuracy {
        checks.push(Check::new(
            "test accuracy meets the configured floor",
            last.test_accuracy >= min,
            format!("accuracy {} vs floor {min}", last.test_accuracy),
        ));
    }
    let summary = MnistSummary {
        experiment: "train-mnist",
        optimizer: cfg.optimizer.name().to_string(),
        bits: quantized.then_some(cfg.bits),
        layer_sizes: sizes,
        train_samples: n,
        test_samples: ds.test.len(),
        epochs: cfg.epochs,
        steps_per_epoch,
        grad_evaluations,
        final_train_loss: last.train_loss,
        final_test_accuracy: last.test_accuracy,
        sampled_coords: sampled
            .iter()
            .zip(&located)
            .map(|(&coord_id, &(g, index))| SampledCoord {
                coord_id,
                layer: shapes[g].0.clone(),
                index,
            })
            .collect(),
        window,
        flip_count,
        oscillation_amplitude,
        checks,
    };
    output::write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
