//! Width-interleaved training: every step runs the same batch through each
//! configured width, sums the gradients, and applies one optimizer update.

mod optim;

pub use optim::{LrSchedule, Optimizer, OptimizerConfig};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Mode};
use crate::checkpoint::{self, Container, CONFIG_KEY, STEP_KEY};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::slim::WidthList;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Widths trained every step, largest first; a subset of the model's list.
    pub widths: WidthList,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates at the end of each epoch.
    pub eval_every: u64,
    /// Emit a JSON log line every this many steps.
    pub log_every: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            widths: WidthList::new(vec![1.0, 0.75, 0.5, 0.25]).expect("static list"),
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            schedule: LrSchedule::Constant,
            seed: 0,
            eval_every: 0,
            log_every: 10,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model_widths: &WidthList) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !self.widths.is_subset_of(model_widths) {
            return Err(Error::Config(format!(
                "training widths {} are not all in the model's width list {}",
                self.widths, model_widths
            )));
        }
        self.optimizer.validate()
    }
}

/// Forward and backward pass of one width within a step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WidthPass {
    pub width: f64,
    pub loss: f64,
    pub time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    /// One entry per width, in training order.
    pub passes: Vec<WidthPass>,
    pub grad_norm: f64,
    /// Whole step including the optimizer update.
    pub time_ms: f64,
}

/// Zeroes gradients, then for each width runs a train-mode forward on the
/// same batch and backpropagates without updating, so the stored gradient
/// ends up as the sum over widths. Each width's norm statistics are updated
/// during its own pass. The active width is restored afterwards.
pub fn accumulate_gradients<T: Scalar>(
    model: &mut Model<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    widths: &[f64],
) -> Result<Vec<WidthPass>> {
    if widths.is_empty() {
        return Err(Error::Config("width list is empty".into()));
    }
    let restore = model.active_width();
    model.store_mut().zero_grad();
    let mut losses = Vec::with_capacity(widths.len());
    let result = (|| {
        for &w in widths {
            let start = Instant::now();
            model.set_active_width(w)?;
            let width_err = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("width {w}: {m}")),
                e => e,
            };
            let mut g = Graph::new();
            let x = g.input(batch.clone())?;
            let logits = model.forward_graph(&mut g, x, Mode::Train).map_err(width_err)?;
            let loss = g.cross_entropy(logits, labels).map_err(width_err)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("width {w}: loss is {value}")));
            }
            let updates = g.take_stat_updates();
            g.backward(loss, model.store_mut()).map_err(width_err)?;
            model.apply_stat_updates(updates);
            losses.push(WidthPass {
                width: w,
                loss: value,
                time_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok(())
    })();
    model.set_active_width(restore)?;
    result.map(|()| losses)
}

/// One training step: gradient accumulation over `widths` followed by
/// exactly one optimizer update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    widths: &[f64],
    lr: f64,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let passes = accumulate_gradients(model, batch, labels, widths)?;
    let grad_norm = model.store().grad_norm_sq().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient norm {grad_norm} after widths {widths:?}"
        )));
    }
    opt.step(model.store_mut(), lr)?;
    Ok(StepMetrics {
        passes,
        grad_norm,
        time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub width: f64,
    pub loss: f64,
    pub accuracy: f64,
    /// Softmax class probabilities per example.
    pub scores: Vec<Vec<f32>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EvalResult {
    /// Probability of class `positive` per example.
    pub fn class_scores(&self, positive: usize) -> Vec<f64> {
        self.scores.iter().map(|s| s[positive] as f64).collect()
    }
}

/// Eval-mode pass over `data` at `width`; never modifies the model.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, width: f64, batch_size: usize) -> Result<EvalResult> {
    model.spec().widths.index_of(width)?;
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let mut scores = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.infer_at(&x.cast::<T>(), width)?;
        let k = logits.shape()[1];
        for (r, &label) in y.iter().enumerate() {
            if label >= k {
                return Err(Error::Index(format!("label {label} out of range for {k} classes")));
            }
            let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss_sum += lse - row[label];
            let pred = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(pred == label);
            scores.push(row.iter().map(|v| (v - lse).exp() as f32).collect());
            predictions.push(pred);
            labels.push(label);
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        width,
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        scores,
        predictions,
        labels,
    })
}

/// Resumable part of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub best_accuracy: Option<f64>,
    pub optimizer: Optimizer<f32>,
}

pub const BEST_KEY: &str = "meta/best_accuracy";

/// Writes model, optimizer state, step counter and an optional config copy.
pub fn save_training(path: &Path, model: &Model<f32>, state: &TrainState, config_text: Option<&str>) -> Result<()> {
    let mut c = Container::new();
    checkpoint::put_model(&mut c, model);
    c.put_u64(STEP_KEY, state.step);
    if let Some(b) = state.best_accuracy {
        c.put_text(BEST_KEY, &b.to_string());
    }
    state.optimizer.save(&mut c, model.store());
    if let Some(text) = config_text {
        c.put_text(CONFIG_KEY, text);
    }
    c.write(path)
}

pub struct LoadedCheckpoint {
    pub model: Model<f32>,
    /// Present when the file carries optimizer state.
    pub state: Option<TrainState>,
    pub config_text: Option<String>,
}

pub fn load_training(path: &Path, optimizer: &OptimizerConfig) -> Result<LoadedCheckpoint> {
    let c = Container::read(path)?;
    let model = checkpoint::take_model(&c)?;
    let state = match c.get_u64("optim/t")? {
        Some(_) => Some(TrainState {
            step: c.get_u64(STEP_KEY)?.unwrap_or(0),
            best_accuracy: match c.get_text(BEST_KEY)? {
                Some(t) => Some(
                    t.parse()
                        .map_err(|_| Error::Format(format!("bad {BEST_KEY} value '{t}'")))?,
                ),
                None => None,
            },
            optimizer: Optimizer::load(optimizer.clone(), &c, model.store())?,
        }),
        None => None,
    };
    Ok(LoadedCheckpoint {
        model,
        state,
        config_text: c.get_text(CONFIG_KEY)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    pub width: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `(width, mean training loss over the epoch's steps)`
    pub mean_loss: Vec<(f64, f64)>,
    /// `(width, mean forward-backward milliseconds)`
    pub mean_width_ms: Vec<(f64, f64)>,
    pub mean_step_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_step: u64,
    pub best: Option<EvalRecord>,
}

impl TrainLog {
    /// Mean forward-backward milliseconds at `width` over all logged epochs.
    pub fn mean_width_ms(&self, width: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .epochs
            .iter()
            .flat_map(|e| e.mean_width_ms.iter().filter(|p| p.0 == width).map(|p| p.1))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub eval_set: Option<&'a Dataset>,
    /// Final checkpoint path; `<path>.best` and `<path>.failed` sit beside it.
    pub checkpoint: Option<PathBuf>,
    pub config_text: Option<String>,
    pub log: Option<&'a mut dyn Write>,
    pub resume: Option<TrainState>,
    /// Stop after this global step; used to interrupt runs.
    pub max_steps: Option<u64>,
}

#[derive(Serialize)]
struct StepLine {
    step: u64,
    width: f64,
    loss: f64,
    time_ms: f64,
}

#[derive(Serialize)]
struct EvalLine {
    step: u64,
    eval_width: f64,
    loss: f64,
    accuracy: f64,
}

fn emit<S: Serialize>(log: &mut Option<&mut dyn Write>, line: &S) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let text = serde_json::to_string(line).expect("log line serializes");
        writeln!(w, "{text}").map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Shuffled example order for an epoch; depends only on seed and epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Seeded epoch loop over `data`. Resuming from a state saved at step `s`
/// continues with exactly the batches and updates an uninterrupted run
/// would have used after step `s`.
pub fn train(model: &mut Model<f32>, data: &Dataset, cfg: &TrainConfig, mut opts: TrainOptions<'_>) -> Result<TrainLog> {
    cfg.validate(&model.spec().widths)?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if data.feature_shape() != Some((model.spec().frames, model.spec().mel_bins)) {
        return Err(Error::Input(format!(
            "features are {:?} (frames, mels) but the model expects {:?}",
            data.feature_shape().unwrap_or_default(),
            (model.spec().frames, model.spec().mel_bins)
        )));
    }
    if data.num_classes() > model.spec().num_classes {
        return Err(Error::Input(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes(),
            model.spec().num_classes
        )));
    }
    let mut state = opts.resume.take().unwrap_or_else(|| TrainState {
        step: 0,
        best_accuracy: None,
        optimizer: Optimizer::new(cfg.optimizer.clone(), model.store()),
    });
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let stop_at = opts.max_steps.unwrap_or(total_steps).min(total_steps);
    let mut log = TrainLog::default();
    let base_lr = cfg.optimizer.lr();
    let eval_widths = model.spec().widths.clone();

    let ckpt = opts.checkpoint.clone();
    let config_text = opts.config_text.clone();
    let save = |path: &Path, model: &Model<f32>, state: &TrainState| {
        save_training(path, model, state, config_text.as_deref())
    };

    let first_epoch = (state.step / steps_per_epoch) as usize;
    for epoch in first_epoch..cfg.epochs {
        if state.step >= stop_at {
            break;
        }
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let skip = (state.step - epoch as u64 * steps_per_epoch) as usize;
        let mut sums = vec![0.0; cfg.widths.len()];
        let mut width_ms = vec![0.0; cfg.widths.len()];
        let (mut counted, mut ms) = (0usize, 0.0);
        for idx in &batches[skip..] {
            if state.step >= stop_at {
                break;
            }
            let (x, y) = data.batch(idx)?;
            let lr = cfg.schedule.lr_at(base_lr, state.step, total_steps);
            let metrics = match train_step(model, &mut state.optimizer, &x, &y, cfg.widths.widths(), lr) {
                Ok(m) => m,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(p) = &ckpt {
                        let failed = suffixed(p, ".failed");
                        save(&failed, model, &state)?;
                        log::error!("training diverged at step {}; state saved to {}", state.step, failed.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            state.step += 1;
            for ((s, t), p) in sums.iter_mut().zip(&mut width_ms).zip(&metrics.passes) {
                *s += p.loss;
                *t += p.time_ms;
            }
            counted += 1;
            ms += metrics.time_ms;
            if cfg.log_every > 0 && state.step.is_multiple_of(cfg.log_every) {
                for p in &metrics.passes {
                    emit(
                        &mut opts.log,
                        &StepLine {
                            step: state.step,
                            width: p.width,
                            loss: p.loss,
                            time_ms: p.time_ms,
                        },
                    )?;
                }
            }
            let epoch_done = state.step.is_multiple_of(steps_per_epoch);
            let due = if cfg.eval_every > 0 {
                state.step.is_multiple_of(cfg.eval_every)
            } else {
                epoch_done
            };
            if due {
                if let Some(eval_set) = opts.eval_set {
                    for w in eval_widths.iter() {
                        let r = evaluate(model, eval_set, w, cfg.eval_batch_size)?;
                        let rec = EvalRecord {
                            step: state.step,
                            epoch,
                            width: w,
                            loss: r.loss,
                            accuracy: r.accuracy,
                        };
                        emit(
                            &mut opts.log,
                            &EvalLine {
                                step: state.step,
                                eval_width: w,
                                loss: r.loss,
                                accuracy: r.accuracy,
                            },
                        )?;
                        if w == 1.0 && state.best_accuracy.is_none_or(|b| r.accuracy > b) {
                            state.best_accuracy = Some(r.accuracy);
                            log.best = Some(rec.clone());
                            if let Some(p) = &ckpt {
                                save(&suffixed(p, ".best"), model, &state)?;
                            }
                        }
                        log.evals.push(rec);
                    }
                }
            }
        }
        if counted > 0 {
            let losses: Vec<String> = cfg
                .widths
                .iter()
                .zip(&sums)
                .map(|(w, s)| format!("{w}: {:.4}", s / counted as f64))
                .collect();
            log::info!("epoch {} done at step {}; mean loss {}", epoch + 1, state.step, losses.join(", "));
            log.epochs.push(EpochRecord {
                epoch,
                mean_loss: cfg
                    .widths
                    .iter()
                    .zip(&sums)
                    .map(|(w, s)| (w, s / counted as f64))
                    .collect(),
                mean_width_ms: cfg
                    .widths
                    .iter()
                    .zip(&width_ms)
                    .map(|(w, t)| (w, t / counted as f64))
                    .collect(),
                mean_step_ms: ms / counted as f64,
            });
        }
    }
    log.final_step = state.step;
    if let Some(p) = &ckpt {
        save(p, model, &state)?;
    }
    Ok(log)
}
