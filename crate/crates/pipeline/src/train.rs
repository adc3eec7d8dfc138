//! The training loop: augment, encode, forward, objective, backward, Adam
//! with a polynomial learning-rate decay; validation after every epoch
//! selects the best checkpoint.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array3, Array4, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spine_core::objectives::{total_loss_grad, BranchPrediction, EpochState, LossBreakdown};
use spine_net::{poly_lr, read_optimizer, save_optimizer, Adam, Module, RawOutputs, SpineNet};

use crate::checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta, MetricSnapshot, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::data::{make_batch, Batch, PreparedExam};
use crate::error::{PipelineError, Result};
use crate::evaluate::evaluate;

pub const BEST: &str = "best.cbor";
pub const LAST: &str = "last.cbor";
pub const OPTIMIZER: &str = "optimizer.cbor";
pub const LOG: &str = "train_log.jsonl";
pub const CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        oa_active: bool,
        mean_loss: f64,
        validation: MetricSnapshot,
        best_epoch: usize,
        seconds: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: CheckpointMeta,
    pub last: CheckpointMeta,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

/// Learning rate of every epoch, `lr0 * (1 - i / T)^power`.
pub fn lr_schedule(config: &RunConfig) -> Vec<f64> {
    (0..config.epochs)
        .map(|i| poly_lr(config.initial_lr, i, config.epochs, config.lr_power))
        .collect()
}

fn zeros_like(raw: &RawOutputs) -> RawOutputs {
    RawOutputs {
        disc_logits: Array4::zeros(raw.disc_logits.raw_dim()),
        disc_offset: Array4::zeros(raw.disc_offset.raw_dim()),
        vert_logits: Array4::zeros(raw.vert_logits.raw_dim()),
        vert_offset: Array4::zeros(raw.vert_offset.raw_dim()),
    }
}

/// Batch-mean objective and its gradient with respect to the raw outputs.
/// The objective sees probabilities, so heatmap gradients pick up the
/// sigmoid derivative `p (1 - p)` on the way back to the logits.
pub fn batch_objective(raw: &RawOutputs, batch: &Batch, state: EpochState, config: &RunConfig) -> Result<(LossBreakdown, RawOutputs)> {
    let loss_config = config.loss_config();
    let n = batch.targets.len();
    let scale = 1.0 / n as f64;
    let mut grads = zeros_like(raw);
    let mut sum = LossBreakdown {
        disc_heatmap: 0.0,
        disc_offset: 0.0,
        vert_heatmap: 0.0,
        vert_offset: 0.0,
        total: 0.0,
        oa_active: false,
    };
    let to64 = |a: &Array3<f32>| a.mapv(|v| v as f64);
    for (b, (disc_t, vert_t)) in batch.targets.iter().enumerate() {
        let sample = raw.sample(b);
        let (dh, doff) = (to64(&sample.disc_heatmap), to64(&sample.disc_offset));
        let (vh, voff) = (to64(&sample.vert_heatmap), to64(&sample.vert_offset));
        let (loss, [dg, vg]) = total_loss_grad(
            BranchPrediction {
                heatmap: dh.view(),
                offset: doff.view(),
            },
            BranchPrediction {
                heatmap: vh.view(),
                offset: voff.view(),
            },
            (disc_t, vert_t),
            state,
            &loss_config,
        )?;
        sum.disc_heatmap += loss.disc_heatmap * scale;
        sum.disc_offset += loss.disc_offset * scale;
        sum.vert_heatmap += loss.vert_heatmap * scale;
        sum.vert_offset += loss.vert_offset * scale;
        sum.total += loss.total * scale;
        sum.oa_active = loss.oa_active;
        let logit_grad = |g: &Array3<f64>, p: &Array3<f64>| {
            Zip::from(g)
                .and(p)
                .map_collect(|&g, &p| (g * p * (1.0 - p) * scale) as f32)
        };
        grads.disc_logits.slice_mut(s![b, .., .., ..]).assign(&logit_grad(&dg.heatmap, &dh));
        grads.vert_logits.slice_mut(s![b, .., .., ..]).assign(&logit_grad(&vg.heatmap, &vh));
        grads.disc_offset.slice_mut(s![b, .., .., ..]).assign(&dg.offset.mapv(|v| (v * scale) as f32));
        grads.vert_offset.slice_mut(s![b, .., .., ..]).assign(&vg.offset.mapv(|v| (v * scale) as f32));
    }
    Ok((sum, grads))
}

/// Exam order of `epoch`, a pure function of the seed and the epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

/// Batches of one epoch. A trailing batch of one sample is dropped because
/// batch statistics are undefined for it.
pub fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|c| c.len() > 1 || order.len() == 1).collect()
}

struct Logger {
    out: BufWriter<File>,
}

impl Logger {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| PipelineError::io(path, e))?;
        Ok(Logger {
            out: BufWriter::new(file),
        })
    }

    fn write(&mut self, record: &LogRecord, path: &Path) -> Result<()> {
        let line = serde_json::to_string(record).expect("serializable");
        writeln!(self.out, "{line}").map_err(|e| PipelineError::io(path, e))
    }

    fn flush(&mut self, path: &Path) -> Result<()> {
        self.out.flush().map_err(|e| PipelineError::io(path, e))
    }
}

fn is_better(candidate: &MetricSnapshot, best: Option<&MetricSnapshot>) -> bool {
    match best {
        None => true,
        Some(b) => (candidate.overall_macro_f1, candidate.overall_pck) > (b.overall_macro_f1, b.overall_pck),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from the `last` checkpoint in the output directory.
    pub resume: bool,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
    /// Return once this epoch (0-based) is done, leaving a resumable run.
    pub stop_after: Option<usize>,
}

/// Trains on `train` and selects checkpoints on `val`, writing everything
/// into `config.out_dir`.
pub fn train(config: &RunConfig, train: &[PreparedExam], val: &[PreparedExam], options: TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(PipelineError::EmptyDataset(config.train_dir.clone()));
    }
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let (best_path, last_path) = (out.join(BEST), out.join(LAST));
    let (log_path, opt_path) = (out.join(LOG), out.join(OPTIMIZER));
    let hash = config.hash();

    let (mut net, mut adam, start, mut best) = if options.resume {
        let (net, last) = load_checkpoint(&last_path, Some(config))?;
        let adam = Adam::from_state(config.adam, &read_optimizer(&opt_path)?);
        let best = read_meta(&best_path)?;
        (net, adam, last.epoch + 1, Some(best))
    } else {
        (SpineNet::new(config.model_spec()), Adam::new(config.adam), 0, None)
    };
    config.save(&out.join(CONFIG))?;
    let mut logger = Logger::open(&log_path, options.resume)?;
    let schedule = lr_schedule(config);
    let mut last = None;

    for epoch in start..config.epochs {
        let started = Instant::now();
        let lr = schedule[epoch];
        let state = EpochState {
            epoch,
            total_epochs: config.epochs,
        };
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        let batches = epoch_batches(&order, config.batch_size);
        for (step, indices) in batches.iter().enumerate() {
            let batch = make_batch(train, indices, epoch, config)?;
            let raw = net.forward(&batch.input, true)?;
            let (loss, grads) = batch_objective(&raw, &batch, state, config)?;
            if !loss.total.is_finite() {
                return Err(PipelineError::Diverged { epoch, step });
            }
            net.zero_grad();
            net.backward(&grads);
            adam.step(&mut net, lr);
            loss_sum += loss.total;
            logger.write(
                &LogRecord::Step {
                    epoch,
                    step,
                    lr,
                    loss,
                },
                &log_path,
            )?;
        }

        let report = evaluate(&mut net, val, config, config.eval.threshold_mm, &[])?;
        let snapshot = MetricSnapshot::from(&report);
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            backbone: config.model.backbone.name.clone(),
            epoch,
            config_hash: hash.clone(),
            metrics: Some(snapshot.clone()),
            model: config.model_spec(),
        };
        if is_better(&snapshot, best.as_ref().and_then(|b| b.metrics.as_ref())) {
            save_checkpoint(&mut net, &meta, &best_path)?;
            best = Some(meta.clone());
        }
        save_checkpoint(&mut net, &meta, &last_path)?;
        save_optimizer(&adam.state(), &opt_path)?;
        let oa_active = config.oa_enabled && config.oa.is_active(state);
        let best_epoch = best.as_ref().map_or(epoch, |b| b.epoch);
        let record = LogRecord::Epoch {
            epoch,
            lr,
            oa_active,
            mean_loss: loss_sum / batches.len() as f64,
            validation: snapshot,
            best_epoch,
            seconds: started.elapsed().as_secs_f64(),
        };
        logger.write(&record, &log_path)?;
        logger.flush(&log_path)?;
        if options.verbose {
            eprintln!("{}", serde_json::to_string(&record).expect("serializable"));
        }
        last = Some(meta);
        if options.stop_after == Some(epoch) {
            break;
        }
    }

    let last = match last {
        Some(m) => m,
        None => read_meta(&last_path)?,
    };
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        last,
        best_path,
        last_path,
    })
}
