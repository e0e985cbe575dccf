//! AdamW training with warmup and cosine decay, global-norm clipping,
//! periodic evaluation, checkpoints and a CSV metrics stream.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{GradStore, HasParams};
use crate::checkpoint;
use crate::error::{dim_err, Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::scan::ScanMode;
use crate::tasks::{self, Example, LmCorpus, MqarSpec};
use crate::tensor::cross_entropy;

/// Learning rates searched for recall runs.
pub const MQAR_LR_GRID: [f64; 4] = [1e-4, 4.6e-4, 2.2e-3, 1e-2];

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

const METRICS_HEADER: [&str; 7] = ["step", "lr", "split", "metric", "value", "tokens", "wall_ms"];
/// Gradient shards per batch; fixed so the reduction order never depends
/// on the thread count.
const SHARDS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Steps between evaluations; the last step is always evaluated.
    pub eval_interval: usize,
    /// Validation sequences (recall) or windows (language modelling);
    /// `0` uses every validation window.
    pub eval_size: usize,
    /// Steps between checkpoints; `0` keeps only the initial and final ones.
    pub checkpoint_interval: usize,
    pub scan_mode: ScanMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::with_total(10_000)
    }
}

impl TrainConfig {
    /// Defaults with warmup set to 5% of `total_steps`.
    pub fn with_total(total_steps: usize) -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            final_lr: 1e-4,
            warmup_steps: total_steps / 20,
            total_steps,
            batch_size: 16,
            weight_decay: 0.01,
            clip_norm: 1.0,
            eval_interval: 500,
            eval_size: 64,
            checkpoint_interval: 0,
            scan_mode: ScanMode::Parallel,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train: {m}")));
        if !(self.final_lr > 0.0 && self.final_lr <= self.peak_lr) {
            return bad("need 0 < final_lr <= peak_lr");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup longer than the run");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to peak, then cosine decay to the final rate.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (peak, last) = (cfg.peak_lr, cfg.final_lr);
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return peak;
    }
    let p = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    last + (peak - last) * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
}

/// Rescale so the global norm is at most `c`. Returns the norm before
/// clipping.
pub fn clip_global<F: Scalar>(grads: &mut GradStore<F>, c: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > c {
        let scale = F::lit(c / norm);
        for g in grads.tensors_mut() {
            g.scale_assign(scale);
        }
    }
    norm
}

type ProgressFn<'a> = Box<dyn FnMut(&MetricRecord) + 'a>;

/// Adam moments for every parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F> {
    pub m: GradStore<F>,
    pub v: GradStore<F>,
    pub step: u64,
}

impl<F: Scalar> OptState<F> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        OptState {
            m: GradStore::zeros(shapes),
            v: GradStore::zeros(shapes),
            step: 0,
        }
    }
}

/// Decoupled weight decay, then one Adam step.
pub fn adamw_apply<F: Scalar, P: HasParams<F> + ?Sized>(
    params: &mut P,
    grads: &GradStore<F>,
    opt: &mut OptState<F>,
    lr: f64,
    wd: f64,
) -> Result<()> {
    let mut n = 0;
    params.visit(&mut |_| n += 1);
    if grads.tensors().len() != n || opt.m.tensors().len() != n || opt.v.tensors().len() != n {
        return Err(dim_err("adamw", format!("{n} parameters, {} gradients", grads.tensors().len())));
    }
    let mut mismatch = None;
    let mut slot = 0;
    params.visit(&mut |p| {
        if p.shape() != grads.tensors()[slot].shape() || p.shape() != opt.m.tensors()[slot].shape() {
            mismatch.get_or_insert(slot);
        }
        slot += 1;
    });
    if let Some(s) = mismatch {
        return Err(dim_err("adamw", format!("shape mismatch at parameter {s}")));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bias1 = F::lit(1.0 - ADAM_BETA1.powi(t));
    let bias2 = F::lit(1.0 - ADAM_BETA2.powi(t));
    let (b1, b2, eps) = (F::lit(ADAM_BETA1), F::lit(ADAM_BETA2), F::lit(ADAM_EPS));
    let (lr_f, decay) = (F::lit(lr), F::lit(1.0 - lr * wd));
    let one = F::one();
    let mut slot = 0;
    params.visit_mut(&mut |p| {
        let g = grads.tensors()[slot].data();
        let m = opt.m.tensors_mut()[slot].data_mut();
        let v = opt.v.tensors_mut()[slot].data_mut();
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= decay;
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= lr_f * m_hat / (v_hat.sqrt() + eps);
        }
        slot += 1;
    });
    Ok(())
}

/// What a run trains on.
#[derive(Debug, Clone)]
pub enum Task<'a> {
    Mqar(MqarSpec),
    Lm { corpus: &'a LmCorpus, context: usize },
    /// The same sequences at every step, also used for evaluation.
    Fixed(Vec<Example>),
}

impl Task<'_> {
    /// Batch for optimizer step `step` (1-based); a pure function of
    /// `(seed, step)` so resumed runs see the same data.
    pub fn train_batch(&self, seed: u64, step: usize, batch: usize) -> Result<Vec<Example>> {
        let step_seed: u64 = tasks::stream_rng(seed, step as u64).gen();
        match self {
            Task::Mqar(spec) => tasks::mqar_batch(&spec.with_seed(step_seed), batch),
            Task::Lm { corpus, context } => tasks::lm_windows(corpus, *context, batch, step_seed),
            Task::Fixed(set) => Ok(set.clone()),
        }
    }

    /// Held-out set; `size == 0` means all available windows.
    pub fn val_set(&self, seed: u64, size: usize) -> Result<Vec<Example>> {
        match self {
            Task::Mqar(spec) => {
                let val_seed: u64 = tasks::stream_rng(seed, u64::MAX).gen();
                tasks::mqar_batch(&spec.with_seed(val_seed), size.max(1))
            }
            Task::Lm { corpus, context } => {
                let mut all = tasks::val_windows(corpus, *context)?;
                if size > 0 {
                    all.truncate(size);
                }
                Ok(all)
            }
            Task::Fixed(set) => Ok(set.clone()),
        }
    }

    pub fn reports_accuracy(&self) -> bool {
        !matches!(self, Task::Lm { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Mean masked cross-entropy over sequences.
    pub loss: f64,
    /// Argmax accuracy over scored positions.
    pub accuracy: f64,
    pub scored: usize,
}

impl EvalResult {
    pub fn perplexity(&self) -> f64 {
        self.loss.exp()
    }
}

/// Loss and accuracy of `model` on `set`, computed in parallel and reduced
/// in set order.
pub fn evaluate<F: Scalar>(model: &Model<F>, set: &[Example], mode: ScanMode) -> Result<EvalResult> {
    if set.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let per: Vec<(f64, usize, usize)> = set
        .par_iter()
        .map(|ex| {
            let logits = model.forward(&ex.tokens, mode)?;
            let (loss, _) = cross_entropy(&logits, &ex.targets, &ex.mask_as::<F>())?;
            let (correct, scored) = tasks::recall_counts(&logits, &ex.targets, &ex.mask);
            Ok((loss.as_f64(), correct, scored))
        })
        .collect::<Result<_>>()?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let correct: usize = per.iter().map(|p| p.1).sum();
    let scored: usize = per.iter().map(|p| p.2).sum();
    Ok(EvalResult {
        loss,
        accuracy: correct as f64 / scored.max(1) as f64,
        scored,
    })
}

/// Mean loss over `batch` and the mean gradient.
pub fn batch_gradients<F: Scalar>(
    model: &Model<F>,
    batch: &[Example],
    mode: ScanMode,
) -> Result<(f64, GradStore<F>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let n = batch.len();
    let shards = SHARDS.min(n);
    let parts: Vec<(f64, GradStore<F>)> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut grads = model.zero_grads();
            let mut loss = 0.0;
            for ex in &batch[s * n / shards..(s + 1) * n / shards] {
                loss += model
                    .loss_and_grads(&ex.tokens, &ex.targets, &ex.mask_as::<F>(), mode, &mut grads)?
                    .as_f64();
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one shard");
    for (l, g) in iter {
        loss += l;
        grads.add_scaled(&g, F::one());
    }
    let inv = F::lit(1.0 / n as f64);
    for g in grads.tensors_mut() {
        g.scale_assign(inv);
    }
    Ok((loss / n as f64, grads))
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
    pub tokens: u64,
    pub wall_ms: u64,
}

/// Loss and norm of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct Trainer<'a, F: Scalar> {
    pub model: Model<F>,
    pub opt: OptState<F>,
    pub step: usize,
    pub tokens: u64,
    cfg: TrainConfig,
    task: Task<'a>,
    val: Vec<Example>,
    records: Vec<MetricRecord>,
    run_dir: Option<PathBuf>,
    metrics: Option<csv::Writer<File>>,
    clock: Instant,
    wall_offset: u64,
    progress: Option<ProgressFn<'a>>,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(model: Model<F>, task: Task<'a>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptState::new(model.param_shapes());
        let val = task.val_set(cfg.seed, cfg.eval_size)?;
        Ok(Trainer {
            model,
            opt,
            step: 0,
            tokens: 0,
            cfg,
            task,
            val,
            records: Vec::new(),
            run_dir: None,
            metrics: None,
            clock: Instant::now(),
            wall_offset: 0,
            progress: None,
        })
    }

    /// Continue from a saved checkpoint.
    pub fn resume(ckpt: checkpoint::Checkpoint<F>, task: Task<'a>, cfg: TrainConfig) -> Result<Self> {
        let opt = ckpt
            .opt
            .ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?;
        let parse = |key: &str| -> Result<u64> {
            ckpt.meta
                .get(key)
                .map(|v| v.parse::<u64>())
                .transpose()
                .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
                .map(Option::unwrap_or_default)
        };
        let tokens = parse("tokens")?;
        let wall = parse("wall_ms")?;
        let mut t = Trainer::new(ckpt.model, task, cfg)?;
        t.opt = opt;
        t.step = ckpt.step;
        t.tokens = tokens;
        t.wall_offset = wall;
        Ok(t)
    }

    /// Write metrics and checkpoints under `dir`. Existing metrics are
    /// appended to.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        let fresh = !path.exists() || std::fs::metadata(&path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(METRICS_HEADER).map_err(csv_err)?;
            w.flush()?;
        }
        self.metrics = Some(w);
        self.run_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Called with every metrics record as it is emitted.
    pub fn with_progress(mut self, f: impl FnMut(&MetricRecord) + 'a) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    fn wall_ms(&self) -> u64 {
        self.wall_offset + self.clock.elapsed().as_millis() as u64
    }

    fn emit(&mut self, split: &'static str, metric: &'static str, value: f64, lr: f64) -> Result<()> {
        let rec = MetricRecord {
            step: self.step,
            lr,
            split,
            metric,
            value,
            tokens: self.tokens,
            wall_ms: self.wall_ms(),
        };
        if let Some(w) = &mut self.metrics {
            w.write_record([
                rec.step.to_string(),
                format!("{:e}", rec.lr),
                rec.split.to_string(),
                rec.metric.to_string(),
                format!("{:?}", rec.value),
                rec.tokens.to_string(),
                rec.wall_ms.to_string(),
            ])
            .map_err(csv_err)?;
            w.flush()?;
        }
        if let Some(f) = &mut self.progress {
            f(&rec);
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn evaluate(&self) -> Result<EvalResult> {
        evaluate(&self.model, &self.val, self.cfg.scan_mode)
    }

    /// Evaluate and record validation metrics.
    pub fn log_eval(&mut self) -> Result<EvalResult> {
        let r = self.evaluate()?;
        let lr = lr_at(self.step, &self.cfg);
        self.emit("val", "loss", r.loss, lr)?;
        if self.task.reports_accuracy() {
            self.emit("val", "accuracy", r.accuracy, lr)?;
        } else {
            self.emit("val", "perplexity", r.perplexity(), lr)?;
        }
        Ok(r)
    }

    /// One optimizer step.
    pub fn step_once(&mut self) -> Result<StepStats> {
        let step = self.step + 1;
        let lr = lr_at(step, &self.cfg);
        let batch = self.task.train_batch(self.cfg.seed, step, self.cfg.batch_size)?;
        let (loss, mut grads) = batch_gradients(&self.model, &batch, self.cfg.scan_mode)?;
        let grad_norm = clip_global(&mut grads, self.cfg.clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr, grad_norm });
        }
        adamw_apply(&mut self.model, &grads, &mut self.opt, lr, self.cfg.weight_decay)?;
        self.step = step;
        self.tokens += batch.iter().map(|ex| ex.tokens.len() as u64).sum::<u64>();
        self.emit("train", "loss", loss, lr)?;
        self.emit("train", "grad_norm", grad_norm, lr)?;
        Ok(StepStats {
            step,
            lr,
            loss,
            grad_norm,
        })
    }

    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.run_dir else {
            return Ok(None);
        };
        let path = dir.join("checkpoints").join(format!("step-{:08}", self.step));
        let mut meta = BTreeMap::new();
        meta.insert("tokens".to_string(), self.tokens.to_string());
        meta.insert("wall_ms".to_string(), self.wall_ms().to_string());
        checkpoint::save(&path, &self.model, self.step, Some(&self.opt), &meta)?;
        Ok(Some(path))
    }

    /// Train until `total_steps`, evaluating and checkpointing on schedule.
    /// Returns the final evaluation.
    pub fn run(&mut self) -> Result<EvalResult> {
        let total = self.cfg.total_steps;
        let mut last = None;
        if self.step == 0 {
            self.save_checkpoint()?;
            last = Some(self.log_eval()?);
        }
        while self.step < total {
            self.step_once()?;
            let at_end = self.step == total;
            last = None;
            if self.step.is_multiple_of(self.cfg.eval_interval) || at_end {
                last = Some(self.log_eval()?);
            }
            let every = self.cfg.checkpoint_interval;
            if at_end || (every > 0 && self.step.is_multiple_of(every)) {
                self.save_checkpoint()?;
            }
        }
        match last {
            Some(r) => Ok(r),
            None => self.log_eval(),
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// One full run per learning rate; returns each rate with its final
/// evaluation, in grid order.
pub fn lr_sweep<F: Scalar>(
    model: &Model<F>,
    task: &Task<'_>,
    base: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<(f64, EvalResult)>> {
    grid.iter()
        .map(|&lr| {
            let cfg = TrainConfig {
                peak_lr: lr,
                final_lr: base.final_lr.min(lr),
                ..base.clone()
            };
            let mut t = Trainer::new(model.clone(), task.clone(), cfg)?;
            Ok((lr, t.run()?))
        })
        .collect()
}
