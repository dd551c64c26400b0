//! Meta-learned training: per-entity tasks, a first-order MAML inner/outer
//! loop over the attention projections, and the plain gradient-descent
//! loop used when meta-learning is switched off.

use serde::{Deserialize, Serialize};

use crate::data::{make_windows, MtsDataset, SplitKind, WindowSample};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::model::{is_attention_param, Bound, Model, ParamSet};
use crate::par;
use crate::rng::Rng;
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptScope {
    /// Only the attention projections `W_Q, W_K, W_V, W_O`.
    AttentionOnly,
    AllParams,
}

/// Anything trainable by the loops below.
pub trait Learner: Sync {
    fn loss(&self, tape: &mut Tape, params: &Bound, batch: &[WindowSample], rng: &mut Rng) -> Result<Var>;

    /// Whether the inner loop may move parameter `name`.
    fn adaptable(&self, name: &str, scope: AdaptScope) -> bool {
        match scope {
            AdaptScope::AllParams => true,
            AdaptScope::AttentionOnly => is_attention_param(name),
        }
    }
}

impl Learner for Model {
    fn loss(&self, tape: &mut Tape, params: &Bound, batch: &[WindowSample], rng: &mut Rng) -> Result<Var> {
        let c = self.config();
        self.batch_loss(tape, params, batch, c.train_dropout && c.dropout > 0.0, rng)
    }
}

fn default_inner_steps() -> usize {
    1
}
fn default_size() -> usize {
    4
}
fn default_scope() -> AdaptScope {
    AdaptScope::AttentionOnly
}
fn default_first_order() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (task-level) learning rate α.
    pub inner_lr: f64,
    /// Outer (meta) learning rate β; also the plain-path step size.
    pub meta_lr: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    #[serde(default = "default_size")]
    pub support_size: usize,
    #[serde(default = "default_size")]
    pub query_size: usize,
    #[serde(default = "default_scope")]
    pub adapt_scope: AdaptScope,
    #[serde(default = "default_first_order")]
    pub first_order: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            meta_lr: 0.01,
            inner_steps: 1,
            tasks_per_batch: 4,
            support_size: 4,
            query_size: 4,
            adapt_scope: AdaptScope::AttentionOnly,
            first_order: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr.is_finite() && self.inner_lr >= 0.0) {
            return Err(Error::Config("inner_lr must be finite and non-negative".into()));
        }
        if !(self.meta_lr.is_finite() && self.meta_lr >= 0.0) {
            return Err(Error::Config("meta_lr must be finite and non-negative".into()));
        }
        if self.inner_steps == 0 || self.tasks_per_batch == 0 || self.support_size == 0 || self.query_size == 0 {
            return Err(Error::Config(
                "inner_steps, tasks_per_batch, support_size and query_size must be at least 1".into(),
            ));
        }
        if !self.first_order {
            return Err(Error::Unsupported("second-order meta-gradients".into()));
        }
        Ok(())
    }
}

/// One entity's support and query windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Position in the sampled meta-batch.
    pub id: usize,
    pub entity: usize,
    pub horizon: usize,
    pub support: Vec<WindowSample>,
    pub query: Vec<WindowSample>,
}

/// Training windows grouped by entity.
#[derive(Debug, Clone)]
pub struct TaskPool {
    by_entity: Vec<Vec<WindowSample>>,
}

impl TaskPool {
    pub fn new(ds: &MtsDataset, lookback: usize, horizon: usize, stride: usize) -> Result<Self> {
        let windows = make_windows(ds, SplitKind::Train, lookback, horizon, stride)?;
        Ok(Self::from_windows(ds.dims().0, windows))
    }

    pub fn from_windows(entities: usize, windows: Vec<WindowSample>) -> Self {
        let mut by_entity = vec![Vec::new(); entities];
        for w in windows {
            if w.entity >= by_entity.len() {
                by_entity.resize(w.entity + 1, Vec::new());
            }
            by_entity[w.entity].push(w);
        }
        Self { by_entity }
    }

    pub fn windows(&self, entity: usize) -> &[WindowSample] {
        &self.by_entity[entity]
    }

    pub fn all_windows(&self) -> impl Iterator<Item = &WindowSample> {
        self.by_entity.iter().flatten()
    }

    pub fn total(&self) -> usize {
        self.by_entity.iter().map(Vec::len).sum()
    }

    /// Entities with at least `n` windows.
    pub fn eligible(&self, n: usize) -> Vec<usize> {
        (0..self.by_entity.len()).filter(|&e| self.by_entity[e].len() >= n).collect()
    }
}

/// Draws `k` tasks. Each picks an entity uniformly among those with enough
/// windows, then `support + query` distinct windows from it.
pub fn sample_tasks(pool: &TaskPool, k: usize, support: usize, query: usize, rng: &mut Rng) -> Result<Vec<Task>> {
    let need = support + query;
    let eligible = pool.eligible(need);
    if eligible.is_empty() {
        return Err(Error::Task(format!(
            "no entity has the {need} training windows one support+query pair needs"
        )));
    }
    let mut tasks = Vec::with_capacity(k);
    for id in 0..k {
        let entity = eligible[rng.below(eligible.len())];
        let windows = pool.windows(entity);
        let picks = rng.sample_indices(windows.len(), need);
        let take = |idx: &[usize]| idx.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
        tasks.push(Task {
            id,
            entity,
            horizon: windows[0].horizon(),
            support: take(&picks[..support]),
            query: take(&picks[support..]),
        });
    }
    Ok(tasks)
}

fn is_non_finite(e: &Error) -> bool {
    matches!(
        e,
        Error::Numeric { .. } | Error::Tensor(TensorError::NonFinite { .. })
    )
}

/// Loss and zero-filled gradients of `learner` on `batch` at `params`.
fn loss_and_grads<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    batch: &[WindowSample],
    trainable: impl Fn(&str) -> bool,
    rng: &mut Rng,
    stage: &'static str,
    task: usize,
) -> Result<(f64, ParamSet)> {
    let non_finite = || Error::NonFiniteLoss { stage, task };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, trainable)?;
    let loss = learner
        .loss(&mut tape, &bound, batch, rng)
        .map_err(|e| if is_non_finite(&e) { non_finite() } else { e })?;
    let value = tape.value(loss)?.item().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(non_finite());
    }
    tape.backward(loss).map_err(|e| match e {
        TensorError::NonFinite { .. } => non_finite(),
        other => other.into(),
    })?;
    let grads = bound.grads(&tape)?;
    if !grads.is_finite() {
        return Err(non_finite());
    }
    Ok((value, grads))
}

/// `θ′ = θ − α∇L_support`, repeated `inner_steps` times on the adaptable
/// parameters. `theta` is not modified.
pub fn inner_adapt<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamSet,
    task: &Task,
    config: &MetaConfig,
    rng: &mut Rng,
) -> Result<ParamSet> {
    if task.support.is_empty() {
        return Err(Error::Task(format!("task {} has no support windows", task.id)));
    }
    let scope = config.adapt_scope;
    let filter = |n: &str| learner.adaptable(n, scope);
    let mut cur = theta.clone();
    for _ in 0..config.inner_steps {
        let (_, g) = loss_and_grads(learner, &cur, &task.support, filter, rng, "adapting", task.id)?;
        cur = cur.update(&g, config.inner_lr, filter)?;
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaStep {
    pub params: ParamSet,
    /// Sum of post-adaptation query losses, measured before the update.
    pub meta_loss: f64,
}

/// One outer update. Every task adapts from `theta`, its query loss is
/// differentiated at the adapted parameters, and the summed gradients are
/// applied to `theta` with rate `meta_lr`. Task `i` draws from
/// `rng.substream(i)`; sums run in task order.
pub fn meta_step<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamSet,
    tasks: &[Task],
    config: &MetaConfig,
    rng: &Rng,
) -> Result<MetaStep> {
    if tasks.is_empty() {
        return Err(Error::Task("meta_step needs at least one task".into()));
    }
    let per_task = par::try_map_indexed(tasks.len(), |i| {
        let task = &tasks[i];
        if task.query.is_empty() {
            return Err(Error::Task(format!("task {} has no query windows", task.id)));
        }
        let mut r = rng.substream(i as u64);
        let adapted = inner_adapt(learner, theta, task, config, &mut r)?;
        loss_and_grads(learner, &adapted, &task.query, |_| true, &mut r, "evaluating query of", task.id)
    })?;
    let mut meta_loss = 0.0;
    let mut total = theta.zeros_like();
    for (loss, g) in &per_task {
        meta_loss += loss;
        total = total.add(g)?;
    }
    if !meta_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: "summing",
            task: tasks.len(),
        });
    }
    Ok(MetaStep {
        params: theta.update(&total, config.meta_lr, |_| true)?,
        meta_loss,
    })
}

/// One plain descent step with rate `lr` on the mean loss of `batch`.
pub fn plain_step<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamSet,
    batch: &[WindowSample],
    lr: f64,
    rng: &mut Rng,
) -> Result<(ParamSet, f64)> {
    let (loss, g) = loss_and_grads(learner, theta, batch, |_| true, rng, "training on", 0)?;
    Ok((theta.update(&g, lr, |_| true)?, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Meta,
    Plain,
}

impl TrainMode {
    /// History column holding the per-epoch training loss.
    pub fn loss_column(self) -> &'static str {
        match self {
            TrainMode::Meta => "train_meta_loss",
            TrainMode::Plain => "train_mse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps of the meta loss (meta path) or of the
    /// minibatch window MSE (plain path).
    pub train_loss: f64,
    pub val_mse: f64,
}

fn default_steps() -> usize {
    20
}
fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    #[serde(default = "default_steps")]
    pub steps_per_epoch: usize,
    /// Stride of training windows.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Seed for the validation forecasts; fixed across epochs.
    #[serde(default)]
    pub eval_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: default_steps(),
            stride: 1,
            eval_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters.
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    pub mode: TrainMode,
    pub best_epoch: Option<usize>,
}

/// Draws a minibatch of `n` training windows (without replacement up to the
/// pool size).
fn sample_batch(pool: &TaskPool, n: usize, rng: &mut Rng) -> Vec<WindowSample> {
    let all: Vec<&WindowSample> = pool.all_windows().collect();
    let picks = rng.sample_indices(all.len(), n.min(all.len()));
    picks.into_iter().map(|i| all[i].clone()).collect()
}

/// Trains `model` from `init`. Meta path when the configuration uses
/// meta-learning, plain minibatch descent otherwise; the plain batch holds
/// `tasks_per_batch · (support + query)` windows and its gradient is scaled
/// by `tasks_per_batch` to match the summed meta-gradient. Validation MSE is
/// measured after each epoch (MC inference where enabled) and the best
/// snapshot is kept.
pub fn train(
    model: &Model,
    init: ParamSet,
    ds: &MtsDataset,
    meta: &MetaConfig,
    opts: &TrainOptions,
    rng: &Rng,
) -> Result<TrainOutcome> {
    meta.validate()?;
    model.check_params(&init)?;
    let mc = model.config();
    let mode = if mc.uses_maml() { TrainMode::Meta } else { TrainMode::Plain };
    if opts.epochs == 0 {
        return Ok(TrainOutcome {
            params: init,
            history: Vec::new(),
            mode,
            best_epoch: None,
        });
    }
    if opts.steps_per_epoch == 0 || opts.stride == 0 {
        return Err(Error::Config("steps_per_epoch and stride must be at least 1".into()));
    }
    let pool = TaskPool::new(ds, mc.lookback, mc.horizon, opts.stride)?;
    if pool.total() == 0 {
        return Err(Error::Task("training split yields no windows".into()));
    }
    let eval_opts = EvalOptions {
        mc: true,
        seed: opts.eval_seed,
        ..EvalOptions::default()
    };

    let mut theta = init;
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut history = Vec::with_capacity(opts.epochs);
    let batch_windows = meta.tasks_per_batch * (meta.support_size + meta.query_size);
    for epoch in 1..=opts.epochs {
        let mut epoch_rng = rng.substream(epoch as u64);
        let mut total = 0.0;
        for step in 0..opts.steps_per_epoch {
            let result = match mode {
                TrainMode::Meta => sample_tasks(&pool, meta.tasks_per_batch, meta.support_size, meta.query_size, &mut epoch_rng)
                    .and_then(|tasks| meta_step(model, &theta, &tasks, meta, &epoch_rng.substream(step as u64)))
                    .map(|s| (s.params, s.meta_loss)),
                TrainMode::Plain => {
                    let batch = sample_batch(&pool, batch_windows, &mut epoch_rng);
                    let lr = meta.meta_lr * meta.tasks_per_batch as f64;
                    plain_step(model, &theta, &batch, lr, &mut epoch_rng.substream(step as u64))
                }
            };
            let (next, loss) = match result {
                Ok((p, _)) if !p.is_finite() => Err(Error::NonFiniteLoss {
                    stage: "updating after",
                    task: step,
                }),
                other => other,
            }
            .map_err(|e| Error::Diverged {
                epoch,
                history: history.clone(),
                source: Box::new(e),
            })?;
            theta = next;
            total += loss;
        }
        let val = eval::evaluate(model, &theta, ds, SplitKind::Val, &eval_opts).map_err(|e| Error::Diverged {
            epoch,
            history: history.clone(),
            source: Box::new(e),
        })?;
        let val_mse = val.report.mse;
        log::info!(
            "epoch {epoch}: {} {:.6} val_mse {:.6}",
            mode.loss_column(),
            total / opts.steps_per_epoch as f64,
            val_mse
        );
        history.push(EpochRecord {
            epoch,
            train_loss: total / opts.steps_per_epoch as f64,
            val_mse,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_mse < *b) {
            best = Some((val_mse, epoch, theta.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        history,
        mode,
        best_epoch: Some(best_epoch),
    })
}
