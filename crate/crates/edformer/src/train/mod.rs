//! Mini-batch training with Adam, early stopping on validation loss,
//! best-parameter restoration, evaluation, and a wall-clock speed benchmark.

mod checkpoint;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_windows, WindowPair};
use crate::engine::{AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{EdFormer, ForwardOptions};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs без validation improvement.
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            max_epochs: 10,
            patience: 3,
            seed: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Train in place. Minimizes mean squared error over shuffled mini-batches
/// (incomplete final batch kept), early-stops when validation loss fails to
/// improve for `patience` epochs, and restores the best-validation
/// parameters before returning.
pub fn train(
    model: &mut EdFormer,
    train_windows: &[WindowPair],
    val_windows: &[WindowPair],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if train_windows.is_empty() {
        return Err(Error::EmptySeries);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) {
        return Err(Error::Config(format!(
            "learning_rate must be finite and non-negative, got {}",
            cfg.learning_rate
        )));
    }

    let sizes: Vec<usize> = model.param_tensors().iter().map(Tensor::numel).collect();
    let mut adam = AdamState::new(cfg.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params: Vec<Tensor> = model.param_tensors().to_vec();
    let mut epochs_without_improvement = 0usize;
    let mut global_step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }

        let mut loss_sum = 0.0;
        let mut window_count = 0usize;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowPair> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let (x, y) = batch_windows(&batch)?;

            let mut tape = Tape::new();
            let x_node = EdFormer::input_leaf(&mut tape, &x, false);
            let fwd = model.forward_on_tape(
                &mut tape,
                x_node,
                ForwardOptions {
                    dropout_rng: Some(&mut rng),
                    capture: None,
                },
            )?;
            let y_node = EdFormer::input_leaf(&mut tape, &y, false);
            let diff = tape.sub(fwd.output, y_node)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean(sq)?;
            let loss_val = tape.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::NanLoss {
                    step: global_step,
                    batch: batch_id,
                });
            }
            tape.backward(loss)?;

            for (tensor, node) in model.param_tensors_mut().iter_mut().zip(&fwd.param_nodes) {
                match tape.grad(*node) {
                    Some(g) => tensor.set_grad(g.to_vec())?,
                    None => tensor.clear_grad(),
                }
            }
            adam.step(model.param_tensors_mut())?;

            loss_sum += loss_val * batch.len() as f64;
            window_count += batch.len();
            global_step += 1;
        }
        let train_loss = loss_sum / window_count as f64;
        let (val_loss, _) = evaluate(model, val_windows)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_params = model.param_tensors().to_vec();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= cfg.patience {
                break;
            }
        }
    }

    for (slot, best) in model.param_tensors_mut().iter_mut().zip(best_params) {
        *slot = best;
    }
    Ok(history)
}

/// Mean squared / absolute error over all windows, horizons, and variates,
/// in standardized units.
pub fn evaluate(model: &EdFormer, windows: &[WindowPair]) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut sq_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(64) {
        let refs: Vec<&WindowPair> = chunk.iter().collect();
        let (x, y) = batch_windows(&refs)?;
        let pred = model.forecast(&x)?;
        for (p, t) in pred.data().iter().zip(y.data()) {
            sq_sum += (p - t) * (p - t);
            abs_sum += (p - t).abs();
        }
        count += pred.data().len();
    }
    Ok((sq_sum / count as f64, abs_sum / count as f64))
}

/// Forecast error of the repeat-last baseline (every horizon step predicts
/// the final lookback value), for trainability comparisons.
pub fn repeat_last_baseline(windows: &[WindowPair]) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut sq_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    for w in windows {
        let [_, l, n] = w.input.shape();
        let [_, h, _] = w.target.shape();
        for step in 0..h {
            for var in 0..n {
                let pred = w.input.at(0, l - 1, var);
                let truth = w.target.at(0, step, var);
                sq_sum += (pred - truth) * (pred - truth);
                abs_sum += (pred - truth).abs();
            }
        }
        count += h * n;
    }
    Ok((sq_sum / count as f64, abs_sum / count as f64))
}

/// Wall-clock speed of forward+backward steps at batch 32 (or fewer if not
/// enough windows). Returns (seconds per iteration, total seconds).
pub fn benchmark_speed(
    model: &EdFormer,
    windows: &[WindowPair],
    iters: usize,
) -> Result<(f64, f64)> {
    if iters == 0 || windows.is_empty() {
        return Err(Error::Config("benchmark needs iters >= 1 and windows".into()));
    }
    let batch: Vec<&WindowPair> = windows.iter().take(32).collect();
    let (x, y) = batch_windows(&batch)?;
    let start = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let x_node = EdFormer::input_leaf(&mut tape, &x, false);
        let fwd = model.forward_on_tape(&mut tape, x_node, ForwardOptions::eval())?;
        let y_node = EdFormer::input_leaf(&mut tape, &y, false);
        let diff = tape.sub(fwd.output, y_node)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        tape.backward(loss)?;
        std::hint::black_box(tape.grad(fwd.param_nodes[0]));
    }
    let total = start.elapsed().as_secs_f64();
    Ok((total / iters as f64, total))
}
