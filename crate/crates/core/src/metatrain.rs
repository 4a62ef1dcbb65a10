//! First-order MAML: SGD inner adaptation, AdaBelief outer updates from
//! averaged query gradients, decaying learning rates and best-validation
//! checkpointing.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::data::{Batch, Phase, SplitPools, SplitSpec, Task, TaskSampler};
use crate::error::{Error, Result};
use crate::net::{self, init_params, Architecture, ModelParams, Mode};
use crate::objective::{LossConfig, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Step,
    Constant,
}

/// Floor of the decaying schedules as a fraction of the base rate.
pub const LR_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaBeliefConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdaBeliefConfig {
    fn default() -> Self {
        AdaBeliefConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub tasks_per_epoch: usize,
    pub n_support: usize,
    pub n_query: usize,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub adabelief: AdaBeliefConfig,
    pub seed: u64,
    /// Meta-validation tasks, sampled once and reused every epoch.
    pub val_tasks: usize,
    /// Meta-test tasks drawn by [`meta_evaluate`].
    pub test_tasks: usize,
    pub split: SplitSpec,
    pub loss: LossConfig,
    pub architecture: Architecture,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.0005,
            outer_lr: 0.0003,
            inner_steps: 5,
            tasks_per_epoch: 64,
            n_support: 512,
            n_query: 256,
            epochs: 100,
            lr_schedule: LrSchedule::Cosine,
            adabelief: AdaBeliefConfig::default(),
            seed: 0,
            val_tasks: 8,
            test_tasks: 16,
            split: SplitSpec::default(),
            loss: LossConfig::default(),
            architecture: Architecture::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) || !(self.outer_lr > 0.0) {
            return Err(Error::config("learning rates must be > 0"));
        }
        if self.inner_steps < 1 {
            return Err(Error::config("inner_steps must be >= 1"));
        }
        if self.tasks_per_epoch < 1 || self.val_tasks < 1 || self.test_tasks < 1 {
            return Err(Error::config("task counts must be >= 1"));
        }
        if self.n_support < 2 || self.n_query < 2 {
            return Err(Error::config("n_support and n_query must be >= 2"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        let ab = &self.adabelief;
        if !(0.0..1.0).contains(&ab.beta1) || !(0.0..1.0).contains(&ab.beta2) || !(ab.epsilon > 0.0) {
            return Err(Error::config("adabelief betas must be in [0, 1) and epsilon > 0"));
        }
        self.split.validate()?;
        self.loss.validate()?;
        self.architecture.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: MetaConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// Learning rate at `epoch` of a `total`-epoch run.
pub fn lr_schedule(epoch: usize, total: usize, base: f64, kind: LrSchedule) -> f64 {
    debug_assert!(epoch < total.max(1));
    let epoch = epoch.min(total.saturating_sub(1));
    match kind {
        LrSchedule::Constant => base,
        _ if total <= 1 => base,
        LrSchedule::Cosine => {
            let phase = epoch as f64 / (total - 1) as f64;
            base * (LR_FLOOR + (1.0 - LR_FLOOR) * (1.0 + (PI * phase).cos()) / 2.0)
        }
        LrSchedule::Step => {
            // halve every quarter of the run, then hold the floor on the last epoch
            if epoch + 1 == total {
                base * LR_FLOOR
            } else {
                let k = (4 * epoch / total) as i32;
                base * 0.5f64.powi(k).max(LR_FLOOR)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaBeliefState {
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub t: u64,
}

impl AdaBeliefState {
    pub fn new(n: usize) -> Self {
        AdaBeliefState {
            m: vec![0.0; n],
            s: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdaBelief step; returns updated parameters and state.
pub fn adabelief_update(
    state: &AdaBeliefState,
    p: &ModelParams,
    grad: &[f64],
    lr: f64,
    cfg: &AdaBeliefConfig,
) -> Result<(ModelParams, AdaBeliefState)> {
    let (values, next) = adabelief_step(state, &p.values, grad, lr, cfg)?;
    Ok((p.with_values(values)?, next))
}

/// [`adabelief_update`] on a bare vector.
pub fn adabelief_step(
    state: &AdaBeliefState,
    theta: &[f64],
    grad: &[f64],
    lr: f64,
    cfg: &AdaBeliefConfig,
) -> Result<(Vec<f64>, AdaBeliefState)> {
    let n = theta.len();
    if grad.len() != n || state.m.len() != n || state.s.len() != n {
        return Err(Error::Shape(format!(
            "adabelief: {} params, {} grads, state of {}",
            n,
            grad.len(),
            state.m.len()
        )));
    }
    let t = state.t + 1;
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let mut m = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad[i];
        let mi = b1 * state.m[i] + (1.0 - b1) * g;
        let d = g - mi;
        let si = b2 * state.s[i] + (1.0 - b2) * d * d + eps;
        let m_hat = mi / bc1;
        let s_hat = si / bc2;
        out.push(theta[i] - lr * m_hat / (s_hat.sqrt() + eps));
        m.push(mi);
        s.push(si);
    }
    Ok((out, AdaBeliefState { m, s, t }))
}

fn check_finite(loss: f64, what: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(what()))
    }
}

/// `steps` full-batch SGD steps on the support set, dropout off.
pub fn inner_adapt(
    p: &ModelParams,
    support: &Batch,
    steps: usize,
    lr: f64,
    loss_cfg: &LossConfig,
) -> Result<ModelParams> {
    Ok(inner_adapt_traced(p, support, steps, lr, loss_cfg)?.0)
}

/// Like [`inner_adapt`], also returning the loss seen before each step.
pub fn inner_adapt_traced(
    p: &ModelParams,
    support: &Batch,
    steps: usize,
    lr: f64,
    loss_cfg: &LossConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    if support.is_empty() {
        return Err(Error::Shape("empty support set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cur = p.clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, g) = net::loss_and_grad(&cur, &support.x, &support.y, Mode::Eval, loss_cfg, &mut rng)?;
        check_finite(loss, || format!("inner step {step}: support loss is {loss}"))?;
        for (v, gi) in cur.values.iter_mut().zip(&g) {
            *v -= lr * gi;
        }
        losses.push(loss);
    }
    Ok((cur, losses))
}

/// Dropout stream of one task, keyed by run seed and task id only.
pub fn task_rng(seed: u64, task_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20e_u64.rotate_left(17));
    rng.set_stream(task_id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradient {
    pub task_id: u64,
    pub grad: Vec<f64>,
    /// Support loss before adaptation (NaN when no inner step ran).
    pub support_loss: f64,
    pub query_loss: f64,
}

/// First-order meta-gradient of one task: the query gradient at the adapted parameters.
pub fn task_meta_gradient(
    p: &ModelParams,
    task: &Task,
    inner_steps: usize,
    inner_lr: f64,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<TaskGradient> {
    let (adapted, losses) = inner_adapt_traced(p, &task.support, inner_steps, inner_lr, loss_cfg)
        .map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!("task {}: {m}", task.id)),
            other => other,
        })?;
    let mut rng = task_rng(seed, task.id);
    let (query_loss, grad) =
        net::loss_and_grad(&adapted, &task.query.x, &task.query.y, Mode::Train, loss_cfg, &mut rng)?;
    check_finite(query_loss, || format!("task {}: query loss is {query_loss}", task.id))?;
    Ok(TaskGradient {
        task_id: task.id,
        grad,
        support_loss: losses.first().copied().unwrap_or(f64::NAN),
        query_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub inner_lr: f64,
    pub outer_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub support_loss: f64,
    pub query_loss: f64,
}

/// Mean of per-task gradients, reduced in task-id order.
pub fn average_gradients(mut parts: Vec<TaskGradient>) -> Result<Vec<f64>> {
    if parts.is_empty() {
        return Err(Error::Shape("no task gradients to average".into()));
    }
    parts.sort_by_key(|t| t.task_id);
    let n = parts[0].grad.len();
    let mut sum = vec![0.0; n];
    for t in &parts {
        for (s, g) in sum.iter_mut().zip(&t.grad) {
            *s += g;
        }
    }
    let k = parts.len() as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    Ok(sum)
}

/// Per-task meta-gradients, computed concurrently, in input order.
pub fn meta_gradients(
    p: &ModelParams,
    tasks: &[Task],
    cfg: &MetaConfig,
    inner_lr: f64,
) -> Result<Vec<TaskGradient>> {
    tasks
        .par_iter()
        .map(|t| task_meta_gradient(p, t, cfg.inner_steps, inner_lr, &cfg.loss, cfg.seed))
        .collect()
}

/// One outer update from a batch of tasks.
pub fn meta_step(
    p: &ModelParams,
    tasks: &[Task],
    cfg: &MetaConfig,
    state: &AdaBeliefState,
    rates: Rates,
) -> Result<(ModelParams, AdaBeliefState, StepStats)> {
    if tasks.is_empty() {
        return Err(Error::Shape("meta_step needs at least one task".into()));
    }
    let parts = meta_gradients(p, tasks, cfg, rates.inner_lr)?;
    let k = parts.len() as f64;
    let stats = StepStats {
        support_loss: parts.iter().map(|t| t.support_loss).sum::<f64>() / k,
        query_loss: parts.iter().map(|t| t.query_loss).sum::<f64>() / k,
    };
    let grad = average_gradients(parts)?;
    let (next, state) = adabelief_update(state, p, &grad, rates.outer_lr, &cfg.adabelief)?;
    Ok((next, state, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: u64,
    pub n_query: usize,
    pub query: Metrics,
    pub support_after: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub per_task: Vec<TaskMetrics>,
}

/// Adapts a copy of `params` on each task's support set and scores its query set.
pub fn evaluate_tasks(
    params: &ModelParams,
    tasks: &[Task],
    inner_steps: usize,
    inner_lr: f64,
    loss_cfg: &LossConfig,
) -> Result<EvalReport> {
    let per_task: Vec<TaskMetrics> = tasks
        .par_iter()
        .map(|t| {
            let adapted = if inner_lr == 0.0 || inner_steps == 0 {
                params.clone()
            } else {
                inner_adapt(params, &t.support, inner_steps, inner_lr, loss_cfg)?
            };
            let q = net::predict_batch(&adapted, &t.query.x)?;
            let s = net::predict_batch(&adapted, &t.support.x)?;
            Ok(TaskMetrics {
                task_id: t.id,
                n_query: t.query.len(),
                query: Metrics::compute(&q, &t.query.y)?,
                support_after: Metrics::compute(&s, &t.support.y)?,
            })
        })
        .collect::<Result<_>>()?;
    let weighted: Vec<(Metrics, usize)> = per_task.iter().map(|t| (t.query, t.n_query)).collect();
    let metrics = Metrics::weighted_mean(&weighted).ok_or_else(|| Error::Shape("no tasks".into()))?;
    Ok(EvalReport { metrics, per_task })
}

/// Seed of the meta-test task stream.
pub fn test_task_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7e57
}

fn val_task_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x0a11
}

/// Draws `count` eval-phase tasks from `pool` with a fixed seed.
pub fn sample_eval_tasks(
    sampler: &TaskSampler,
    count: usize,
    n_support: usize,
    n_query: usize,
    seed: u64,
) -> Result<Vec<Task>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count as u64)
        .map(|id| sampler.sample(n_support, n_query, id, &mut rng))
        .collect()
}

/// Meta-test: adapt the checkpoint per task on eval-support, score on eval-query.
pub fn meta_evaluate(
    ck: &Checkpoint,
    test_pool: &[crate::data::Sample],
    cfg: &MetaConfig,
) -> Result<EvalReport> {
    ck.check_architecture(&cfg.architecture)?;
    let sampler = TaskSampler::new(test_pool, &ck.scaler, &cfg.split, Phase::Eval);
    let tasks = sample_eval_tasks(&sampler, cfg.test_tasks, cfg.n_support, cfg.n_query, test_task_seed(cfg.seed))?;
    evaluate_tasks(&ck.params, &tasks, cfg.inner_steps, cfg.inner_lr, &cfg.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_support_loss: f64,
    pub train_query_loss: f64,
    pub val: Metrics,
    pub inner_lr: f64,
    pub outer_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timings {
    pub total_secs: f64,
    pub train_secs: f64,
    pub test_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: String,
    pub seed: u64,
    pub split: String,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test: Metrics,
    /// Wall-clock; kept out of the serialized report so reruns compare byte-for-byte.
    #[serde(skip)]
    pub timings: Timings,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,val_mse,val_mae,val_cc,inner_lr,outer_lr";

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-epoch curve as CSV.
    pub fn epoch_csv(&self) -> String {
        let mut out = String::from(EPOCH_CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                e.epoch, e.train_query_loss, e.val.mse, e.val.mae, e.val.cc, e.inner_lr, e.outer_lr
            ));
        }
        out
    }
}

/// Full meta-training run; returns the best-validation checkpoint and the report.
pub fn meta_train(cfg: &MetaConfig, pools: &SplitPools) -> Result<(Checkpoint, TrainReport)> {
    meta_train_with(cfg, pools, |_| {})
}

/// [`meta_train`] with a per-epoch callback (progress logging).
pub fn meta_train_with(
    cfg: &MetaConfig,
    pools: &SplitPools,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let train_sampler = TaskSampler::new(&pools.train, &pools.scaler, &cfg.split, Phase::Train);
    let val_sampler = TaskSampler::new(&pools.val, &pools.scaler, &cfg.split, Phase::Eval);
    let val_tasks = sample_eval_tasks(&val_sampler, cfg.val_tasks, cfg.n_support, cfg.n_query, val_task_seed(cfg.seed))?;

    let mut params = init_params(&cfg.architecture, cfg.seed)?;
    let mut state = AdaBeliefState::new(params.len());
    let mut task_rng_stream = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 0..cfg.epochs {
        let rates = Rates {
            inner_lr: lr_schedule(epoch, cfg.epochs, cfg.inner_lr, cfg.lr_schedule),
            outer_lr: lr_schedule(epoch, cfg.epochs, cfg.outer_lr, cfg.lr_schedule),
        };
        let base_id = (epoch * cfg.tasks_per_epoch) as u64;
        let tasks: Vec<Task> = (0..cfg.tasks_per_epoch as u64)
            .map(|i| train_sampler.sample(cfg.n_support, cfg.n_query, base_id + i, &mut task_rng_stream))
            .collect::<Result<_>>()?;
        let (next, next_state, stats) = meta_step(&params, &tasks, cfg, &state, rates)
            .map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("epoch {epoch}, {m}")),
                other => other,
            })?;
        params = next;
        state = next_state;

        let val = evaluate_tasks(&params, &val_tasks, cfg.inner_steps, cfg.inner_lr, &cfg.loss)?.metrics;
        let rec = EpochRecord {
            epoch,
            train_support_loss: stats.support_loss,
            train_query_loss: stats.query_loss,
            val,
            inner_lr: rates.inner_lr,
            outer_lr: rates.outer_lr,
        };
        on_epoch(&rec);
        epochs.push(rec);
        if best.as_ref().is_none_or(|(_, l, _)| val.mse < *l) {
            best = Some((epoch, val.mse, params.clone()));
        }
    }
    let train_secs = start.elapsed().as_secs_f64();

    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch");
    let ck = Checkpoint {
        params: best_params,
        scaler: pools.scaler.clone(),
        meta: TrainingMeta {
            kind: "metafap".into(),
            seed: cfg.seed,
            split: cfg.split.name.as_str().into(),
            epochs: cfg.epochs,
            best_epoch: Some(best_epoch),
            best_val_loss: Some(best_val_loss),
            inner_lr: cfg.inner_lr,
            inner_steps: cfg.inner_steps,
        },
    };
    let t0 = Instant::now();
    let test = meta_evaluate(&ck, &pools.test, cfg)?.metrics;
    let report = TrainReport {
        kind: "metafap".into(),
        seed: cfg.seed,
        split: cfg.split.name.as_str().into(),
        param_count: ck.params.len(),
        epochs,
        best_epoch,
        best_val_loss,
        test,
        timings: Timings {
            total_secs: start.elapsed().as_secs_f64(),
            train_secs,
            test_secs: t0.elapsed().as_secs_f64(),
        },
    };
    Ok((ck, report))
}

/// Uniform random perturbation helper for tests and examples.
pub fn jitter<R: Rng + ?Sized>(values: &mut [f64], scale: f64, rng: &mut R) {
    for v in values {
        *v += scale * (2.0 * rng.random::<f64>() - 1.0);
    }
}
