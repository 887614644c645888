//! Optimiser, learning-rate schedule, dropout and the training loop.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, ParamVars, Tape, Tensor, Var};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::real::Real;

/// A trainable network over [`Example`] batches.
pub trait Model<T: Real> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Scalar training loss for a batch. `rng` enables dropout.
    fn loss(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        batch: &[&Example],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var>;

    /// Evaluation-mode counts for a batch.
    fn score(&self, batch: &[&Example]) -> Result<Score>;
}

/// Evaluation counts for one batch: `loss_sum` is the mean loss times `count`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Score {
    pub correct: usize,
    pub count: usize,
    pub loss_sum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

/// Accuracy and mean loss of `model` over `data`.
pub fn evaluate<T: Real, M: Model<T>>(
    model: &M,
    data: &[Example],
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptySequence("evaluation set"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut total = Score::default();
    let refs: Vec<&Example> = data.iter().collect();
    for chunk in refs.chunks(batch_size) {
        let s = model.score(chunk)?;
        total.correct += s.correct;
        total.count += s.count;
        total.loss_sum += s.loss_sum;
    }
    Ok(EvalResult {
        accuracy: total.correct as f64 / total.count as f64,
        loss: total.loss_sum / total.count as f64,
        count: total.count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// ADAM moments with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` against `grads` at learning rate `cfg.lr`.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "AdamState::step",
                expected: params.len(),
                found: grads.len(),
            });
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    context: "AdamState::step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one, lr, eps) = (T::one(), T::lit(cfg.lr), T::lit(cfg.eps));
        let (c1, c2) = (T::lit(c1), T::lit(c2));
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.squared_norm().as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Learning rate halved whenever an epoch's dev accuracy falls below the
/// previous epoch's.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub lr: f64,
    pub prev_dev_accuracy: Option<f64>,
    pub eval_interval: usize,
}

impl TrainSchedule {
    pub fn new(lr: f64, eval_interval: usize) -> Self {
        Self {
            lr,
            prev_dev_accuracy: None,
            eval_interval,
        }
    }

    /// Records an epoch's dev accuracy and returns the learning rate to use next.
    pub fn schedule_update(&mut self, dev_accuracy: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&dev_accuracy) {
            return Err(Error::InvalidArgument(format!(
                "dev accuracy {dev_accuracy} outside [0, 1]"
            )));
        }
        if let Some(prev) = self.prev_dev_accuracy {
            if dev_accuracy < prev {
                self.lr *= 0.5;
            }
        }
        self.prev_dev_accuracy = Some(dev_accuracy);
        Ok(self.lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")))
    }
}

fn dropout_mask<T: Real, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Inverted dropout on a slice: identity in [`DropoutMode::Eval`].
pub fn dropout_apply<T: Real, R: Rng + ?Sized>(
    x: &[T],
    p: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<Vec<T>> {
    check_rate(p)?;
    if mode == DropoutMode::Eval || p == 0.0 {
        return Ok(x.to_vec());
    }
    let mask = dropout_mask::<T, R>(x.len(), p, rng);
    Ok(x.iter().zip(mask).map(|(&v, m)| v * m).collect())
}

/// Inverted dropout on a tape variable.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<Var> {
    check_rate(p)?;
    if mode == DropoutMode::Eval || p == 0.0 {
        return Ok(x);
    }
    let (rows, cols) = tape.shape(x);
    let mask = Tensor::new(rows, cols, dropout_mask::<T, R>(rows * cols, p, rng))?;
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Optimiser steps to run.
    pub max_steps: usize,
    /// Steps between dev evaluations; epochs also end with one.
    pub eval_interval: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Halve the learning rate when epoch dev accuracy drops.
    pub halve_lr: bool,
    pub eval_batch_size: usize,
    /// Appends one row per evaluation when set.
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            adam: AdamConfig::default(),
            max_steps: 10_000,
            eval_interval: 1000,
            clip_norm: None,
            seed: 0,
            halve_lr: true,
            eval_batch_size: 200,
            metrics_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_acc: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,train_loss,dev_loss,dev_acc,lr";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6e}",
            self.step, self.train_loss, self.dev_loss, self.dev_acc, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub metrics: Vec<MetricsRow>,
    /// Training loss of every optimiser step.
    pub step_losses: Vec<f64>,
    pub best_dev_accuracy: f64,
    pub best_step: usize,
    pub best_params: ParamStore<T>,
    pub steps: usize,
    pub final_lr: f64,
}

/// Runs one optimiser step on `batch` and returns its loss.
pub fn train_step<T: Real, M: Model<T>>(
    model: &mut M,
    adam: &mut AdamState<T>,
    cfg: &AdamConfig,
    batch: &[&Example],
    clip_norm: Option<f64>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let loss = model.loss(&mut tape, &p, batch, rng)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite training loss {value}")));
    }
    let grads = tape.backward(loss)?;
    let mut grads = p.grads(&tape, &grads);
    drop(tape);
    if let Some(c) = clip_norm {
        clip_global_norm(&mut grads, c);
    }
    adam.step(cfg, model.params_mut(), &grads)?;
    Ok(value)
}

/// Mini-batch training with per-epoch reshuffling, periodic dev evaluation
/// and best-dev parameter retention. On return `model` holds the best
/// parameters seen.
pub fn train_loop<T: Real, M: Model<T>>(
    model: &mut M,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    if train.is_empty() {
        return Err(Error::EmptySequence("training set"));
    }
    if cfg.batch_size == 0 || cfg.eval_interval == 0 {
        return Err(Error::InvalidArgument(
            "batch size and eval interval must be >= 1".into(),
        ));
    }
    let mut metrics_file = match &cfg.metrics_path {
        Some(path) => {
            let mut f = fs::File::create(path)?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut schedule = TrainSchedule::new(cfg.adam.lr, cfg.eval_interval);
    let mut adam_cfg = cfg.adam;
    let mut report = TrainReport {
        metrics: Vec::new(),
        step_losses: Vec::new(),
        best_dev_accuracy: f64::NEG_INFINITY,
        best_step: 0,
        best_params: model.params().clone(),
        steps: 0,
        final_lr: cfg.adam.lr,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_eval: Vec<f64> = Vec::new();
    let mut step = 0;
    let mut done = false;

    let mut evaluate_now =
        |model: &M, step: usize, since: &mut Vec<f64>, lr: f64, report: &mut TrainReport<T>| {
            let train_loss = if since.is_empty() {
                f64::NAN
            } else {
                since.iter().sum::<f64>() / since.len() as f64
            };
            since.clear();
            let ev = evaluate(model, dev, cfg.eval_batch_size)?;
            let row = MetricsRow {
                step,
                train_loss,
                dev_loss: ev.loss,
                dev_acc: ev.accuracy,
                lr,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", row.to_csv())?;
            }
            if ev.accuracy > report.best_dev_accuracy {
                report.best_dev_accuracy = ev.accuracy;
                report.best_step = step;
                report.best_params = model.params().clone();
            }
            report.metrics.push(row);
            Ok::<f64, Error>(ev.accuracy)
        };

    while !done && step < cfg.max_steps {
        order.shuffle(&mut rng);
        let mut last_acc = None;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= cfg.max_steps {
                done = true;
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = train_step(model, &mut adam, &adam_cfg, &batch, cfg.clip_norm, Some(&mut rng))?;
            step += 1;
            report.step_losses.push(loss);
            since_eval.push(loss);
            if !dev.is_empty() && step % cfg.eval_interval == 0 {
                let acc = evaluate_now(model, step, &mut since_eval, adam_cfg.lr, &mut report)?;
                last_acc = Some(acc);
            }
        }
        if dev.is_empty() {
            continue;
        }
        let acc = match last_acc {
            Some(a) if since_eval.is_empty() => a,
            _ if since_eval.is_empty() => break,
            _ => evaluate_now(model, step, &mut since_eval, adam_cfg.lr, &mut report)?,
        };
        if cfg.halve_lr {
            adam_cfg.lr = schedule.schedule_update(acc)?;
        }
    }
    report.steps = step;
    report.final_lr = adam_cfg.lr;
    if !dev.is_empty() && report.best_dev_accuracy.is_finite() {
        model.params_mut().load(report.best_params.tensors().to_vec())?;
    } else {
        report.best_params = model.params().clone();
    }
    Ok(report)
}
