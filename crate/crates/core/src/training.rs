//! NLL loss, RMSProp, gradient clipping, learning-rate decay, the training
//! loop and the grid-search runner.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::models::{Decode, Model, ModelConfig, ModelKind};
use crate::params::{InitScheme, ParamSet};
use crate::scalar::Scalar;
use crate::tasks::{generate, Regime, TaskInstance, TaskSpec};

/// Mean over steps of `-log softmax(logits[t])[targets[t]]`.
///
/// `targets` already ends with the end-of-output id, so it must have one
/// entry per decoder step.
pub fn nll_loss<S: Scalar>(g: &mut Graph<S>, logits: &[Var], targets: &[usize]) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::InvalidArgument(format!("{} logit steps for {} targets", logits.len(), targets.len())));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&y, &t) in logits.iter().zip(targets) {
        let data = g.data(y);
        if t >= data.len() {
            return Err(Error::InvalidArgument(format!("target {t} outside {} classes", data.len())));
        }
        let m = data.iter().copied().fold(S::neg_infinity(), S::max);
        let shift = g.add_const(y, -m)?;
        let e = g.exp(shift)?;
        let z = g.sum(e)?;
        let lse = g.log(z)?;
        let picked = g.slice(shift, t, 1)?;
        terms.push(g.sub(lse, picked)?);
    }
    let all = g.concat(&terms)?;
    Ok(g.mean(all)?)
}

/// RMSProp: `s <- rho s + (1 - rho) g^2`, `p <- p - lr g / (sqrt(s) + eps)`.
#[derive(Clone, Debug)]
pub struct RmsProp<S> {
    pub rho: S,
    pub eps: S,
    state: Vec<Vec<S>>,
}

impl<S: Scalar> RmsProp<S> {
    pub fn new(params: &ParamSet<S>, rho: f64, eps: f64) -> Self {
        RmsProp { rho: S::c(rho), eps: S::c(eps), state: params.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect() }
    }

    pub fn state(&self) -> &[Vec<S>] {
        &self.state
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Vec<S>], lr: S) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.len() {
            return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.state) {
            if p.len() != g.len() || p.len() != s.len() {
                return Err(Error::InvalidArgument(format!("shape mismatch: {} values, {} gradients", p.len(), g.len())));
            }
            for ((pv, &gv), sv) in p.data_mut().iter_mut().zip(g).zip(s.iter_mut()) {
                *sv = self.rho * *sv + (S::one() - self.rho) * gv * gv;
                *pv -= lr * gv / (sv.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|&g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = S::c(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= c);
    }
    norm
}

/// `lr0 · factor^floor(update / delay)`: constant for the first `delay`
/// updates, then multiplied by `factor` every `delay` updates.
pub fn learning_rate(lr0: f64, update: u64, delay: u64, factor: f64) -> f64 {
    if delay == 0 {
        return lr0;
    }
    lr0 * factor.powi((update / delay) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_delay: u64,
    pub decay_factor: f64,
    pub init: InitScheme,
    pub batch_size: usize,
    /// Training instances generated once per run.
    pub samples: usize,
    /// Passes over the training instances.
    pub passes: usize,
    pub seed: u64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub clip_norm: f64,
    /// Held-out 2x instances.
    pub eval_count: usize,
    /// Evaluate every this many updates; 0 evaluates after each pass only.
    pub eval_interval: u64,
    pub eval_seed: u64,
    /// Held-out 2x validation instances; when positive, the parameters with
    /// the best validation score are kept and scored on the eval set.
    pub validation_count: usize,
    pub validation_seed: u64,
    /// Stop once an evaluation reaches this coarse score.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at_coarse: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.02,
            decay_delay: 300,
            decay_factor: 0.5,
            init: InitScheme::FanIn,
            batch_size: 32,
            samples: 16_000,
            passes: 20,
            seed: 1,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            clip_norm: 5.0,
            eval_count: 3_200,
            eval_interval: 0,
            eval_seed: 1_000_003,
            validation_count: 0,
            validation_seed: 2_000_003,
            stop_at_coarse: None,
        }
    }
}

impl TrainConfig {
    /// 16K samples iterated 20 times.
    pub fn small_regime() -> Self {
        TrainConfig::default()
    }

    /// 320K samples iterated once.
    pub fn large_regime() -> Self {
        TrainConfig { samples: 320_000, passes: 1, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning_rate and clip_norm must be positive, rmsprop_decay in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub update: u64,
    pub fine: f64,
    pub coarse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    /// Mean training loss of each pass.
    pub epoch_losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// Scores of the final model on the held-out 2x set.
    pub fine: f64,
    pub coarse: f64,
    pub updates: u64,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl RunRecord {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        a == *other
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Loss and parameter gradients of one instance.
pub fn instance_gradients<S: Scalar>(model: &Model<S>, inst: &TaskInstance) -> Result<(f64, Vec<Vec<S>>)> {
    let mut g = Graph::<S>::new();
    let bound = model.params().bind(&mut g);
    let steps = inst.target.len() + 1;
    let fwd = model.encode_decode(&mut g, &bound, &inst.input, Decode::Steps(steps), false)?;
    let mut targets = inst.target.clone();
    targets.push(model.vocab().end());
    let loss = nll_loss(&mut g, &fwd.logits, &targets)?;
    let value = g.item(loss).to_f64_lossy();
    let grads = g.backward(loss)?;
    let mut acc: Vec<Vec<S>> = model.params().tensors().iter().map(|t| vec![S::zero(); t.len()]).collect();
    bound.accumulate(&grads, &mut acc);
    Ok((value, acc))
}

/// Held-out 2x instances for a task.
pub fn eval_set(task: &TaskSpec, train: &TrainConfig) -> Result<Vec<TaskInstance>> {
    let spec = TaskSpec { seed: train.eval_seed, ..task.clone() };
    if train.eval_count == 0 {
        return Ok(Vec::new());
    }
    generate(&spec, train.eval_count, Regime::Double)
}

pub fn validation_set(task: &TaskSpec, train: &TrainConfig) -> Result<Vec<TaskInstance>> {
    let spec = TaskSpec { seed: train.validation_seed, ..task.clone() };
    if train.validation_count == 0 {
        return Ok(Vec::new());
    }
    generate(&spec, train.validation_count, Regime::Double)
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Observer for progress inside [`run_training_with`].
pub trait Progress {
    fn update(&mut self, _update: u64, _loss: f64) {}
    fn eval(&mut self, _point: &EvalPoint) {}
}

impl Progress for () {}

/// Trains from scratch and scores the final model on the 2x set.
pub fn run_training(model: &ModelConfig, train: &TrainConfig, task: &TaskSpec) -> Result<(RunRecord, Model<f32>)> {
    run_training_with(model, train, task, &mut ())
}

pub fn run_training_with<P: Progress>(
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    task: &TaskSpec,
    progress: &mut P,
) -> Result<(RunRecord, Model<f32>)> {
    train.validate()?;
    task.validate()?;
    if model_cfg.content_vocab != task.vocab {
        return Err(Error::Config(format!("model vocabulary {} differs from task vocabulary {}", model_cfg.content_vocab, task.vocab)));
    }
    let start = Instant::now();
    let mut model = Model::<f32>::new(model_cfg.clone(), train.init, train.seed)?;
    let mut opt = RmsProp::new(model.params(), train.rmsprop_decay, train.rmsprop_eps);
    let mut data = if train.samples > 0 { generate(task, train.samples, Regime::InSample)? } else { Vec::new() };
    let held_out = eval_set(task, train)?;
    let validation = validation_set(task, train)?;
    let mut record = RunRecord {
        model: model_cfg.clone(),
        train: train.clone(),
        task: task.clone(),
        epoch_losses: Vec::new(),
        evals: Vec::new(),
        fine: 0.0,
        coarse: 0.0,
        updates: 0,
        wall_time_secs: 0.0,
        failed: None,
        checkpoint: None,
    };
    let monitor = if validation.is_empty() { &held_out } else { &validation };
    let mut best: Option<(f64, f64, Vec<Tensor<f32>>)> = None;
    let mut do_eval = |model: &Model<f32>, update: u64, record: &mut RunRecord, progress: &mut P| -> Result<bool> {
        let report = evaluate(model, Some(task.task), monitor)?;
        let point = EvalPoint { update, fine: report.fine, coarse: report.coarse };
        progress.eval(&point);
        record.evals.push(point);
        if !validation.is_empty() && best.as_ref().map_or(true, |(c, f, _)| (report.coarse, report.fine) > (*c, *f)) {
            best = Some((report.coarse, report.fine, model.params().tensors().to_vec()));
        }
        Ok(train.stop_at_coarse.is_some_and(|c| report.coarse >= c))
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, 1));
    let mut stopped = false;
    'passes: for _ in 0..if data.is_empty() { 0 } else { train.passes } {
        data.shuffle(&mut shuffle_rng);
        let mut pass_loss = 0.0;
        let mut pass_batches = 0usize;
        for batch in data.chunks(train.batch_size) {
            let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = batch.par_iter().map(|inst| instance_gradients(&model, inst)).collect();
            let mut grads: Vec<Vec<f32>> = model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            let mut loss = 0.0;
            for r in results {
                let (l, gr) = match r {
                    Ok(v) => v,
                    Err(Error::Autodiff(e)) => {
                        record.failed = Some(format!("diverged at update {}: {e}", record.updates));
                        break 'passes;
                    }
                    Err(e) => return Err(e),
                };
                loss += l;
                for (a, b) in grads.iter_mut().zip(gr) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
            let n = batch.len() as f32;
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            loss /= batch.len() as f64;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                record.failed = Some(format!("diverged at update {}: non-finite loss", record.updates));
                break 'passes;
            }
            clip_global_norm(&mut grads, train.clip_norm);
            let lr = learning_rate(train.learning_rate, record.updates, train.decay_delay, train.decay_factor);
            opt.step(model.params_mut().tensors_mut(), &grads, lr as f32)?;
            record.updates += 1;
            model.schedule_step = record.updates;
            progress.update(record.updates, loss);
            pass_loss += loss;
            pass_batches += 1;
            if train.eval_interval > 0 && record.updates % train.eval_interval == 0 && !held_out.is_empty() {
                if do_eval(&model, record.updates, &mut record, progress)? {
                    stopped = true;
                    break 'passes;
                }
            }
        }
        record.epoch_losses.push(pass_loss / pass_batches.max(1) as f64);
        if train.eval_interval == 0 && !held_out.is_empty() && do_eval(&model, record.updates, &mut record, progress)? {
            stopped = true;
            break;
        }
    }
    if record.failed.is_none() && !monitor.is_empty() && !stopped && record.evals.last().map(|p| p.update) != Some(record.updates) {
        do_eval(&model, record.updates, &mut record, progress)?;
    }
    drop(do_eval);
    if record.failed.is_none() {
        if let Some((_, _, tensors)) = best {
            for (dst, src) in model.params_mut().tensors_mut().iter_mut().zip(tensors) {
                *dst = src;
            }
        }
        if !validation.is_empty() && !held_out.is_empty() {
            let report = evaluate(&model, Some(task.task), &held_out)?;
            record.fine = report.fine;
            record.coarse = report.coarse;
        } else if let Some(p) = record.evals.last() {
            record.fine = p.fine;
            record.coarse = p.coarse;
        }
    }
    record.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((record, model))
}

/// Axes of the hyperparameter grid; each list is one axis of the cross product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    pub decay_delays: Vec<u64>,
    pub inits: Vec<InitScheme>,
    /// RAM key dimensions; ignored for other models.
    pub key_dims: Vec<usize>,
    /// Angle bound (SLANTM) or sharpening (RAM/Tape); ignored elsewhere.
    pub custom: Vec<bool>,
    /// LSTM layer counts; ignored for memory models.
    pub layers: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid::table(ModelKind::Lantm)
    }
}

impl Grid {
    /// The published grid for a model family, over seeds 1 to 3.
    pub fn table(kind: ModelKind) -> Self {
        let memory = Grid {
            learning_rates: vec![0.01, 0.02, 0.04],
            decay_delays: vec![300, 600],
            inits: vec![InitScheme::Uniform1, InitScheme::FanIn],
            key_dims: vec![2],
            custom: vec![false],
            layers: vec![1],
            seeds: vec![1, 2, 3],
        };
        match kind {
            ModelKind::Lantm => memory,
            ModelKind::Slantm => Grid { key_dims: vec![3], custom: vec![false, true], ..memory },
            ModelKind::Ram => Grid { key_dims: vec![2, 20], ..memory },
            ModelKind::RamTape => Grid { key_dims: vec![2, 20], custom: vec![false, true], ..memory },
            ModelKind::Lstm => Grid {
                learning_rates: vec![0.2, 0.02, 0.002, 0.0002],
                decay_delays: vec![500, 700],
                inits: vec![InitScheme::FanIn],
                key_dims: vec![0],
                custom: vec![false],
                layers: vec![1, 2, 3, 4],
                seeds: vec![1, 2, 3],
            },
        }
    }

    /// Expands the cross product around a base configuration.
    pub fn cells(&self, model: &ModelConfig, train: &TrainConfig) -> Vec<(ModelConfig, TrainConfig)> {
        let kind = model.kind;
        let key_dims: Vec<Option<usize>> =
            if matches!(kind, ModelKind::Ram | ModelKind::RamTape) { self.key_dims.iter().map(|&k| Some(k)).collect() } else { vec![None] };
        let custom: Vec<Option<bool>> =
            if matches!(kind, ModelKind::Slantm | ModelKind::RamTape) { self.custom.iter().map(|&c| Some(c)).collect() } else { vec![None] };
        let layers: Vec<Option<usize>> = if kind == ModelKind::Lstm { self.layers.iter().map(|&l| Some(l)).collect() } else { vec![None] };
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &delay in &self.decay_delays {
                for &init in &self.inits {
                    for &kd in &key_dims {
                        for &c in &custom {
                            for &l in &layers {
                                for &seed in &self.seeds {
                                    let mut m = model.clone();
                                    if let Some(kd) = kd {
                                        m.key_dim = kd;
                                    }
                                    match (kind, c) {
                                        (ModelKind::Slantm, Some(c)) => m.angle_bound = c,
                                        (ModelKind::RamTape, Some(c)) => m.sharpen = c,
                                        _ => {}
                                    }
                                    if let Some(l) = l {
                                        m.layers = l;
                                    }
                                    let t = TrainConfig { learning_rate: lr, decay_delay: delay, init, seed, ..train.clone() };
                                    out.push((m, t));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Best record by coarse then fine score; failed runs are skipped.
pub fn select_best(records: &[RunRecord]) -> Option<&RunRecord> {
    records
        .iter()
        .filter(|r| r.failed.is_none())
        .fold(None, |best: Option<&RunRecord>, r| match best {
            Some(b) if (b.coarse, b.fine) >= (r.coarse, r.fine) => Some(b),
            _ => Some(r),
        })
}

/// Worker count from `LIE_MEM_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var("LIE_MEM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs every cell on a bounded pool and passes each finished record to
/// `sink` (called from one thread at a time). Records come back in cell order.
pub fn grid_search<F>(cells: &[(ModelConfig, TrainConfig)], task: &TaskSpec, threads: usize, sink: F) -> Result<Vec<RunRecord>>
where
    F: Fn(&RunRecord) + Send + Sync,
{
    if cells.is_empty() {
        return Err(Error::Config("grid is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let lock = std::sync::Mutex::new(());
    pool.install(|| {
        cells
            .par_iter()
            .map(|(m, t)| {
                let record = run_training(m, t, task).map(|(r, _)| r).or_else(|e| match e {
                    Error::Autodiff(_) => Ok(failed_record(m, t, task, e.to_string())),
                    other => Err(other),
                })?;
                let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
                sink(&record);
                Ok(record)
            })
            .collect()
    })
}

fn failed_record(m: &ModelConfig, t: &TrainConfig, task: &TaskSpec, why: String) -> RunRecord {
    RunRecord {
        model: m.clone(),
        train: t.clone(),
        task: task.clone(),
        epoch_losses: Vec::new(),
        evals: Vec::new(),
        fine: 0.0,
        coarse: 0.0,
        updates: 0,
        wall_time_secs: 0.0,
        failed: Some(why),
        checkpoint: None,
    }
}
