//! SGD-with-momentum outer loop over any gradient maker.

use std::f64::consts::PI;
use std::time::Instant;

use precond_core::gradient_maker::{GradientMaker, MakerError, ModelCall};
use precond_core::linalg::{axpy, norm2};
use precond_core::network::{accuracy, select_rows, LossKind, Network, Targets};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::data::{DatasetSplit, Split};

/// Steps at the start of a run excluded from the throughput figure.
pub const WARMUP_STEPS: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Maker(#[from] MakerError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    pub examples_per_sec: f64,
    pub state_bytes: usize,
    pub ms_per_step: f64,
    /// Empty for a normal row; describes the failure on a divergence row.
    pub note: String,
}

#[derive(Debug)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub best_epoch: Option<usize>,
    pub best_validation_accuracy: f64,
    /// Test accuracy of the checkpoint with the best validation accuracy.
    pub test_accuracy: f64,
    pub diverged: bool,
    pub network: Network,
}

/// `η₀ · ½(1 + cos(π t / total))`.
pub fn cosine_lr(eta0: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return eta0;
    }
    let t = t.min(total) as f64;
    0.5 * eta0 * (1.0 + (PI * t / total as f64).cos())
}

/// Rescales `g` in place to norm `max_norm` when it is longer. Returns the
/// norm before clipping.
pub fn clip_by_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = norm2(g);
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

pub fn evaluate(net: &Network, split: &Split) -> f64 {
    if split.is_empty() {
        return 0.0;
    }
    const CHUNK: usize = 2048;
    let mut correct = 0.0;
    for start in (0..split.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(split.len())).collect();
        let logits = net.predict(&select_rows(&split.inputs, &idx));
        let labels: Vec<usize> = idx.iter().map(|&i| split.labels[i]).collect();
        correct += accuracy(&logits, &labels) * idx.len() as f64;
    }
    correct / split.len() as f64
}

/// Shuffled example order for each epoch, fixed by `seed`.
pub fn epoch_orders(n: usize, epochs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_da7a);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

pub fn build_network(cfg: &TrainConfig, input_dim: usize, classes: usize) -> Network {
    let mut dims = vec![input_dim];
    dims.extend(&cfg.widths);
    dims.push(classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Network::mlp(&dims, cfg.activation, LossKind::CrossEntropy, &mut rng)
}

/// Trains per `cfg` on `data`. Each step preconditions the mini-batch
/// gradient, clips it, feeds it to a momentum buffer and applies decoupled
/// weight decay; the step size follows a cosine decay that reaches zero on
/// the final step. A non-finite loss or gradient stops the run with a
/// diagnostics row.
pub fn train(cfg: &TrainConfig, data: &DatasetSplit) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let net = build_network(cfg, data.train.dim(), data.classes());
    let mut maker = GradientMaker::new(net, cfg.maker, cfg.precond.clone(), cfg.seed)?;

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let orders = epoch_orders(n, cfg.epochs, cfg.seed);

    let mut momentum = vec![0.0; maker.network().param_count()];
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64, f64)> = None;
    let mut step = 0u64;
    let mut timed = (0u64, 0usize, 0.0f64);
    let mut diverged = false;

    'epochs: for (epoch, order) in orders.iter().enumerate() {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let x = select_rows(&data.train.inputs, idx);
            let t = Targets::Classes(idx.iter().map(|&i| data.train.labels[i]).collect());
            maker.network_mut().zero_grad();
            let root = maker.setup_model_call(ModelCall::new(x));
            maker.setup_loss_call(LossKind::CrossEntropy, &root, t)?;
            let out = match maker.forward_and_backward() {
                Ok(out) => out,
                Err(MakerError::Numeric { .. }) | Err(MakerError::Network(_)) if step > 0 => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            let mut g = maker
                .network()
                .grad()
                .expect("forward_and_backward stores a gradient")
                .flatten();
            if !out.loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                diverged = true;
                break 'epochs;
            }
            clip_by_global_norm(&mut g, cfg.clip_norm);
            let eta = cosine_lr(cfg.lr, step + 1, total);
            let mut theta = maker.network().params();
            for ((m, gi), p) in momentum.iter_mut().zip(&g).zip(theta.iter_mut()) {
                *m = cfg.momentum * *m + gi;
                *p -= eta * cfg.weight_decay * *p;
            }
            axpy(-eta, &momentum, &mut theta);
            maker.network_mut().set_params(&theta);

            step += 1;
            if step > WARMUP_STEPS {
                timed.0 += 1;
                timed.1 += idx.len();
                timed.2 += started.elapsed().as_secs_f64();
            }
            loss_sum += out.loss * idx.len() as f64;
            seen += idx.len();
        }

        let net = maker.network();
        let validation_accuracy = evaluate(net, &data.validation);
        let test_accuracy = evaluate(net, &data.test);
        if best.is_none_or(|(_, v, _)| validation_accuracy > v) {
            best = Some((epoch, validation_accuracy, test_accuracy));
        }
        rows.push(MetricsRow {
            step,
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            validation_accuracy,
            test_accuracy,
            examples_per_sec: throughput(timed),
            state_bytes: maker.state_bytes(),
            ms_per_step: ms_per_step(timed),
            note: String::new(),
        });
    }

    if diverged {
        rows.push(MetricsRow {
            step,
            epoch: rows.len(),
            train_loss: f64::NAN,
            validation_accuracy: f64::NAN,
            test_accuracy: f64::NAN,
            examples_per_sec: throughput(timed),
            state_bytes: maker.state_bytes(),
            ms_per_step: ms_per_step(timed),
            note: format!("diverged at step {step}"),
        });
    }
    let (best_epoch, best_validation_accuracy, test_accuracy) = match best {
        Some((e, v, t)) => (Some(e), v, t),
        None => (None, f64::NAN, f64::NAN),
    };
    Ok(TrainReport {
        rows,
        best_epoch,
        best_validation_accuracy,
        test_accuracy,
        diverged,
        network: maker.into_network(),
    })
}

fn throughput((steps, examples, secs): (u64, usize, f64)) -> f64 {
    if steps == 0 || secs <= 0.0 {
        0.0
    } else {
        examples as f64 / secs
    }
}

fn ms_per_step((steps, _, secs): (u64, usize, f64)) -> f64 {
    if steps == 0 {
        0.0
    } else {
        1e3 * secs / steps as f64
    }
}

/// Test accuracy of an untrained network built from `cfg`.
pub fn untrained_accuracy(cfg: &TrainConfig, data: &DatasetSplit) -> f64 {
    let net = build_network(cfg, data.train.dim(), data.classes());
    evaluate(&net, &data.test)
}
