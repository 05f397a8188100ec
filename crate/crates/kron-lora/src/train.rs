//! AdamW, the linear schedule, toy tasks and the training/sequential
//! harness.
//!
//! The optimizer is AdamW with decoupled weight decay: the decay term
//! `lr * wd * p` is subtracted alongside the bias-corrected Adam update
//! and never touches the moment estimates. With a zero gradient a
//! parameter therefore shrinks by exactly `(1 - lr * wd)` per step.
//!
//! Two toy tasks stand in for real fine-tuning corpora:
//!
//! * [`TeacherRegression`]: a hidden update `delta W*` on top of the frozen
//!   layer generates regression targets. The hidden update is built by
//!   replaying the adapter initialization stream for the task seed and
//!   then filling the zero-initialized factor with small values, so a
//!   student initialized from the same seed starts with the matching
//!   factors and the target is reachable by training that one factor.
//!   (An unrelated random teacher is provably out of reach at the default
//!   learning-rate budget: Kronecker factorizations are unique up to
//!   scale, so the student's `A` would have to cross a parameter distance
//!   far larger than the schedule allows.)
//! * [`ClusterClassification`]: Gaussian clusters fed through the frozen
//!   layer plus adapter, classified by a fully trained linear head.
//!
//! Sequential fine-tuning trains one adapter on task 1, then continues on
//! task 2, and reports how much task-1 accuracy survived.

use crate::adapters::{init_adapter, Adapter, FrozenLinear};
use crate::autograd::{backward, GradientSet, LossKind, LossSpec};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::plan::AdapterPlan;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_LR: f64 = 3e-4;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-parameter AdamW state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// Learning rate for the next step; the caller schedules it.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    /// `(name, first moment, second moment)`, in registration order.
    moments: Vec<(String, DenseMatrix, DenseMatrix)>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64, params: &[(&str, &DenseMatrix)]) -> Self {
        let moments = params
            .iter()
            .map(|(name, p)| {
                (
                    name.to_string(),
                    DenseMatrix::zeros(p.rows(), p.cols()),
                    DenseMatrix::zeros(p.rows(), p.cols()),
                )
            })
            .collect();
        OptimizerState {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            weight_decay,
            step_count: 0,
            moments,
        }
    }
}

/// One AdamW step over `params`. `grads` must cover every parameter with a
/// matching shape; `state.lr` is the already-scheduled rate for this step.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut [(&str, &mut DenseMatrix)],
    grads: &GradientSet,
) -> Result<()> {
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let (lr, b1, b2, eps, wd) = (
        state.lr,
        state.beta1,
        state.beta2,
        state.eps,
        state.weight_decay,
    );
    for (name, param) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter {name}")))?;
        if grad.shape() != param.shape() {
            return Err(Error::shape("adamw_step", param.shape(), grad.shape()));
        }
        let (m, v) = state
            .moments
            .iter_mut()
            .find(|(n, _, _)| n == name)
            .map(|(_, m, v)| (m, v))
            .ok_or_else(|| Error::State(format!("optimizer does not track {name}")))?;
        let pm = param.data_mut();
        let gm = grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pm.len() {
            let g = gm[i];
            md[i] = b1 * md[i] + (1.0 - b1) * g;
            vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
            let m_hat = md[i] / bias1;
            let v_hat = vd[i] / bias2;
            // Decoupled decay: computed from the pre-step parameter and
            // independent of the moments.
            pm[i] -= lr * wd * pm[i] + lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear decay without warmup: `base_lr * (1 - step / total_steps)`,
/// clamped at zero. `step` counts from 0; `total_steps` must be positive.
pub fn linear_schedule(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs total_steps >= 1".into()));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).max(0.0))
}

/// Fully trained linear classifier on top of the adapted layer output.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

impl LinearHead {
    pub fn random(d_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        LinearHead {
            weight: DenseMatrix::random_normal(n_out, d_in, (d_in as f64).powf(-0.5), rng),
            bias: DenseMatrix::zeros(n_out, 1),
        }
    }

    pub fn forward(&self, h: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = self.weight.matmul(h)?;
        for i in 0..out.rows() {
            let b = self.bias.get(i, 0);
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + b);
            }
        }
        Ok(out)
    }

    /// Gradients for `dL/d(logits) = g`: returns `(dW, db, dh)`.
    fn backward(
        &self,
        h: &DenseMatrix,
        g: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
        let gw = g.matmul(&h.transpose())?;
        let mut gb = DenseMatrix::zeros(g.rows(), 1);
        for i in 0..g.rows() {
            let mut s = 0.0;
            for j in 0..g.cols() {
                s += g.get(i, j);
            }
            gb.set(i, 0, s);
        }
        let gh = self.weight.transpose().matmul(g)?;
        Ok((gw, gb, gh))
    }
}

/// Adapter plus (for classification tasks) its head.
#[derive(Debug, Clone)]
pub struct AdapterModel {
    pub adapter: Adapter,
    pub head: Option<LinearHead>,
}

impl AdapterModel {
    pub fn new(adapter: Adapter) -> Self {
        AdapterModel {
            adapter,
            head: None,
        }
    }

    /// Attach whatever the task needs: a classification head for cluster
    /// tasks, nothing for regression.
    pub fn for_task(adapter: Adapter, task: &ToyTask, rng: &mut Rng) -> Self {
        let head = match task {
            ToyTask::ClusterClassification(c) => Some(LinearHead::random(
                adapter.plan().d_out,
                c.n_classes,
                rng,
            )),
            ToyTask::TeacherRegression(_) => None,
        };
        AdapterModel { adapter, head }
    }
}

/// Regression task: targets are `layer(x) + delta W* x` for a hidden
/// in-family update `delta W*`. See the module docs for why the teacher
/// shares the student's initialization stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRegression {
    pub seed: u64,
    pub plan: AdapterPlan,
    /// Standard deviation of the teacher's fill-in for the factor that
    /// initialization leaves at zero.
    pub teacher_scale: f64,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
}

impl TeacherRegression {
    /// The adapter a student should start from: plain initialization from
    /// the task seed.
    pub fn student_adapter(&self) -> Result<Adapter> {
        init_adapter(&self.plan, &mut Rng::new(self.seed))
    }

    /// The hidden teacher: same initialization stream as the student, with
    /// the zero factor filled in from a split stream.
    pub fn teacher_adapter(&self) -> Result<Adapter> {
        Ok(self.streams()?.0)
    }

    fn streams(&self) -> Result<(Adapter, Rng)> {
        let mut rng = Rng::new(self.seed);
        let mut teacher = init_adapter(&self.plan, &mut rng)?;
        let mut fill = rng.split();
        let zero_factor = match self.plan.kind {
            crate::plan::AdapterKind::KronLora => "B1",
            crate::plan::AdapterKind::Lora => "up",
            crate::plan::AdapterKind::KronA => "B",
        };
        teacher
            .param_mut(zero_factor)
            .expect("plan kind has its zero factor")
            .fill_normal(self.teacher_scale, &mut fill);
        let data_rng = rng.split();
        Ok((teacher, data_rng))
    }
}

/// Classification task: `n_classes` Gaussian clusters in input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterClassification {
    pub seed: u64,
    pub d_in: usize,
    pub n_classes: usize,
    /// Standard deviation of the cluster centers.
    pub spread: f64,
    /// Standard deviation of the per-example noise around its center.
    pub noise: f64,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
}

/// The two toy tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum ToyTask {
    TeacherRegression(TeacherRegression),
    ClusterClassification(ClusterClassification),
}

impl ToyTask {
    pub fn name(&self) -> &'static str {
        match self {
            ToyTask::TeacherRegression(_) => "teacher_regression",
            ToyTask::ClusterClassification(_) => "cluster_classification",
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self {
            ToyTask::TeacherRegression(_) => LossKind::Mse,
            ToyTask::ClusterClassification(_) => LossKind::SoftmaxCrossEntropy,
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            ToyTask::TeacherRegression(t) => t.plan.d_in,
            ToyTask::ClusterClassification(c) => c.d_in,
        }
    }

    /// Output arity: regression target width or number of classes.
    pub fn arity(&self) -> usize {
        match self {
            ToyTask::TeacherRegression(t) => t.plan.d_out,
            ToyTask::ClusterClassification(c) => c.n_classes,
        }
    }

    /// Materialize the three disjoint splits. Deterministic in the task
    /// seed; train, val and test are consecutive ranges of one stream.
    pub fn generate(&self, layer: &FrozenLinear) -> Result<TaskData> {
        match self {
            ToyTask::TeacherRegression(t) => {
                if layer.d_in() != t.plan.d_in || layer.d_out() != t.plan.d_out {
                    return Err(Error::Config(format!(
                        "task expects a {}x{} layer, got {}x{}",
                        t.plan.d_out,
                        t.plan.d_in,
                        layer.d_out(),
                        layer.d_in()
                    )));
                }
                let (teacher, mut data_rng) = t.streams()?;
                let delta = teacher.expand_delta()?;
                let mut make = |n: usize| -> Result<Split> {
                    let x = DenseMatrix::random_normal(t.plan.d_in, n, 1.0, &mut data_rng);
                    let mut y = layer.forward(&x)?;
                    y.add_scaled(&delta.matmul(&x)?, 1.0)?;
                    Ok(Split {
                        x,
                        targets: y,
                        labels: None,
                    })
                };
                Ok(TaskData {
                    train: make(t.train_examples)?,
                    val: make(t.val_examples)?,
                    test: make(t.test_examples)?,
                })
            }
            ToyTask::ClusterClassification(c) => {
                if c.n_classes < 2 {
                    return Err(Error::Config("classification needs >= 2 classes".into()));
                }
                let mut rng = Rng::new(c.seed);
                let centers =
                    DenseMatrix::random_normal(c.d_in, c.n_classes, c.spread, &mut rng);
                let make = |n: usize, rng: &mut Rng| -> Split {
                    let mut x = DenseMatrix::zeros(c.d_in, n);
                    let mut targets = DenseMatrix::zeros(c.n_classes, n);
                    let mut labels = Vec::with_capacity(n);
                    for i in 0..n {
                        let label = i % c.n_classes;
                        for row in 0..c.d_in {
                            x.set(row, i, centers.get(row, label) + rng.normal(0.0, c.noise));
                        }
                        targets.set(label, i, 1.0);
                        labels.push(label);
                    }
                    Split {
                        x,
                        targets,
                        labels: Some(labels),
                    }
                };
                let mut train_rng = rng.split();
                let mut val_rng = rng.split();
                let mut test_rng = rng.split();
                Ok(TaskData {
                    train: make(c.train_examples, &mut train_rng),
                    val: make(c.val_examples, &mut val_rng),
                    test: make(c.test_examples, &mut test_rng),
                })
            }
        }
    }
}

/// One data split: inputs are `d_in x n` columns.
#[derive(Debug, Clone)]
pub struct Split {
    pub x: DenseMatrix,
    pub targets: DenseMatrix,
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// When false the adapter stays in eval mode during training and no
    /// dropout is applied.
    pub dropout_active: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 1,
            seed: 0,
            dropout_active: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is legal: a no-op run used as a determinism control.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Validation metric: accuracy for classification, MSE for regression.
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: String,
    /// "accuracy" (higher is better) or "mse" (lower is better).
    pub metric: String,
    pub steps: usize,
    pub epoch_stats: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    /// Test metric before any training, and from the restored best epoch.
    pub initial_test_metric: f64,
    pub final_test_metric: f64,
    pub checkpoint_file: Option<String>,
    pub checkpoint_bytes: Option<u64>,
}

/// Metric on a split with dropout disabled: accuracy when labels are
/// present, MSE otherwise.
pub fn evaluate(model: &AdapterModel, layer: &FrozenLinear, split: &Split) -> Result<f64> {
    let mid = model.adapter.forward_eval(layer, &split.x)?;
    match (&model.head, &split.labels) {
        (Some(head), Some(labels)) => {
            let logits = head.forward(&mid)?;
            let mut correct = 0usize;
            for (col, &label) in labels.iter().enumerate() {
                let mut best = 0;
                for i in 1..logits.rows() {
                    if logits.get(i, col) > logits.get(best, col) {
                        best = i;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
            Ok(correct as f64 / labels.len() as f64)
        }
        (None, None) => LossSpec::mse(split.targets.clone()).value(&mid),
        _ => Err(Error::Config(
            "model/head and split/labels disagree about the task type".into(),
        )),
    }
}

/// Train `model` on `task`, tracking validation each epoch and restoring
/// the best epoch's parameters before the final test evaluation.
///
/// When `checkpoint` is given, the best adapter is saved as
/// `<dir>/<label>.ckpt`. Everything is deterministic in `cfg.seed` and the
/// task seed.
pub fn train(
    model: &mut AdapterModel,
    layer: &FrozenLinear,
    task: &ToyTask,
    cfg: &TrainConfig,
    checkpoint_sink: Option<(&Path, &str)>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let data = task.generate(layer)?;
    let loss_kind = task.loss_kind();
    if matches!(task, ToyTask::ClusterClassification(_)) != model.head.is_some() {
        return Err(Error::Config(
            "classification tasks need a head; regression tasks must not have one".into(),
        ));
    }
    let n_train = data.train.x.cols();
    if n_train < cfg.batch_size {
        return Err(Error::Config(format!(
            "training split has {n_train} examples, smaller than one batch of {}",
            cfg.batch_size
        )));
    }
    let batches_per_epoch = n_train / cfg.batch_size;
    let total_steps = cfg.epochs * batches_per_epoch;

    let mut opt = {
        let mut registered: Vec<(&str, &DenseMatrix)> = model.adapter.trainable_parameters();
        if let Some(head) = &model.head {
            registered.push(("head.weight", &head.weight));
            registered.push(("head.bias", &head.bias));
        }
        OptimizerState::new(cfg.lr, cfg.weight_decay, &registered)
    };

    let mut dropout_rng = Rng::new(cfg.seed).split();
    let initial_test_metric = evaluate(model, layer, &data.test)?;
    // Higher-is-better score used for best-epoch selection.
    let score = |metric: f64| match loss_kind {
        LossKind::SoftmaxCrossEntropy => metric,
        LossKind::Mse => -metric,
    };

    model.adapter.set_training(cfg.dropout_active);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Adapter, Option<LinearHead>)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for b in 0..batches_per_epoch {
            let xb = data.train.x.columns(b * cfg.batch_size, cfg.batch_size);
            let tb = data.train.targets.columns(b * cfg.batch_size, cfg.batch_size);
            opt.lr = linear_schedule(step, total_steps, cfg.lr)?;

            let mid = if model.adapter.is_training() {
                model.adapter.forward(layer, &xb, &mut dropout_rng)?
            } else {
                model.adapter.forward_eval(layer, &xb)?
            };
            let loss_spec = LossSpec {
                kind: loss_kind,
                targets: tb,
            };
            let (loss, mut grads, head_grads) = match &model.head {
                Some(head) => {
                    let logits = head.forward(&mid)?;
                    let (loss, dlogits) = loss_spec.value_and_grad(&logits)?;
                    let (gw, gb, gh) = head.backward(&mid, &dlogits)?;
                    let grads = backward(&mut model.adapter, layer, &xb, &gh)?;
                    (loss, grads, Some((gw, gb)))
                }
                None => {
                    let (loss, dout) = loss_spec.value_and_grad(&mid)?;
                    let grads = backward(&mut model.adapter, layer, &xb, &dout)?;
                    (loss, grads, None)
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            if let Some((gw, gb)) = head_grads {
                grads.insert("head.weight", gw);
                grads.insert("head.bias", gb);
            }

            let mut params = model.adapter.trainable_parameters_mut();
            if let Some(head) = &mut model.head {
                params.push(("head.weight", &mut head.weight));
                params.push(("head.bias", &mut head.bias));
            }
            adamw_step(&mut opt, &mut params, &grads)?;
            loss_sum += loss;
            step += 1;
        }
        let val_metric = evaluate(model, layer, &data.val)?;
        stats.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_metric,
        });
        let better = match &best {
            None => true,
            Some((_, best_score, _, _)) => score(val_metric) > *best_score,
        };
        if better {
            best = Some((
                epoch,
                score(val_metric),
                model.adapter.clone(),
                model.head.clone(),
            ));
        }
    }

    let (best_epoch, best_score_val, best_adapter, best_head) =
        best.expect("at least one epoch ran");
    model.adapter = best_adapter;
    model.head = best_head;
    model.adapter.set_training(false);
    let best_val_metric = match loss_kind {
        LossKind::SoftmaxCrossEntropy => best_score_val,
        LossKind::Mse => -best_score_val,
    };
    let final_test_metric = evaluate(model, layer, &data.test)?;

    let (checkpoint_file, checkpoint_bytes) = match checkpoint_sink {
        Some((dir, label)) => {
            let file = format!("{label}.ckpt");
            let bytes = checkpoint::save(&model.adapter, &dir.join(&file))?;
            (Some(file), Some(bytes))
        }
        None => (None, None),
    };

    Ok(TrainReport {
        task: task.name().to_string(),
        metric: match loss_kind {
            LossKind::SoftmaxCrossEntropy => "accuracy".to_string(),
            LossKind::Mse => "mse".to_string(),
        },
        steps: total_steps,
        epoch_stats: stats,
        best_epoch,
        best_val_metric,
        initial_test_metric,
        final_test_metric,
        checkpoint_file,
        checkpoint_bytes,
    })
}

/// Whether phase 2 continues the phase-1 adapter or starts fresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequentialMode {
    /// One adapter and head, trained on task 1 then task 2.
    Continued,
    /// Control: independent models per task. Task-1 accuracy cannot move,
    /// so the forgetting delta is exactly zero.
    FreshPerTask,
}

/// Accuracies around a two-task sequential run.
///
/// `delta_t1` is exactly `acc_t1_after_t2 - acc_t1_after_t1`: negative
/// values measure forgetting of task 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialRunReport {
    pub acc_t1_after_t1: f64,
    pub acc_t2_after_t2: f64,
    pub acc_t1_after_t2: f64,
    pub delta_t1: f64,
}

impl SequentialRunReport {
    pub fn from_accuracies(
        acc_t1_after_t1: f64,
        acc_t2_after_t2: f64,
        acc_t1_after_t2: f64,
    ) -> Self {
        SequentialRunReport {
            acc_t1_after_t1,
            acc_t2_after_t2,
            acc_t1_after_t2,
            delta_t1: acc_t1_after_t2 - acc_t1_after_t1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequentialOutcome {
    pub report: SequentialRunReport,
    pub phase1: TrainReport,
    pub phase2: TrainReport,
}

/// Two-task sequential protocol over classification tasks.
///
/// Trains on task 1, records task-1 test accuracy, continues (or restarts,
/// per `mode`) on task 2, then re-evaluates task 1.
pub fn run_sequential<F>(
    mut make_model: F,
    layer: &FrozenLinear,
    task1: &ToyTask,
    task2: &ToyTask,
    cfg1: &TrainConfig,
    cfg2: &TrainConfig,
    mode: SequentialMode,
    checkpoint_sink: Option<(&Path, &str)>,
) -> Result<SequentialOutcome>
where
    F: FnMut() -> Result<AdapterModel>,
{
    if !matches!(task1, ToyTask::ClusterClassification(_))
        || !matches!(task2, ToyTask::ClusterClassification(_))
    {
        return Err(Error::Config(
            "sequential runs are defined over classification tasks".into(),
        ));
    }
    if task1.d_in() != task2.d_in() || task1.arity() != task2.arity() {
        return Err(Error::Config(format!(
            "tasks must share input width and output arity, got {}x{} vs {}x{}",
            task1.d_in(),
            task1.arity(),
            task2.d_in(),
            task2.arity()
        )));
    }
    let sink = |label: &'static str| -> Option<(&Path, String)> {
        checkpoint_sink.map(|(dir, prefix)| (dir, format!("{prefix}_{label}")))
    };
    let run = |model: &mut AdapterModel, task, cfg, label| -> Result<TrainReport> {
        match sink(label) {
            Some((dir, name)) => train(model, layer, task, cfg, Some((dir, &name))),
            None => train(model, layer, task, cfg, None),
        }
    };

    match mode {
        SequentialMode::Continued => {
            let mut model = make_model()?;
            let phase1 = run(&mut model, task1, cfg1, "phase1")?;
            let acc_t1_after_t1 = phase1.final_test_metric;
            let phase2 = run(&mut model, task2, cfg2, "phase2")?;
            let acc_t2_after_t2 = phase2.final_test_metric;
            let task1_data = task1.generate(layer)?;
            let acc_t1_after_t2 = evaluate(&model, layer, &task1_data.test)?;
            Ok(SequentialOutcome {
                report: SequentialRunReport::from_accuracies(
                    acc_t1_after_t1,
                    acc_t2_after_t2,
                    acc_t1_after_t2,
                ),
                phase1,
                phase2,
            })
        }
        SequentialMode::FreshPerTask => {
            let mut model1 = make_model()?;
            let phase1 = run(&mut model1, task1, cfg1, "phase1")?;
            let acc_t1_after_t1 = phase1.final_test_metric;
            let mut model2 = make_model()?;
            let phase2 = run(&mut model2, task2, cfg2, "phase2")?;
            let acc_t2_after_t2 = phase2.final_test_metric;
            // Task 2 never touched model1; re-evaluating task 1 reproduces
            // the phase-1 number exactly.
            let task1_data = task1.generate(layer)?;
            let acc_t1_after_t2 = evaluate(&model1, layer, &task1_data.test)?;
            Ok(SequentialOutcome {
                report: SequentialRunReport::from_accuracies(
                    acc_t1_after_t1,
                    acc_t2_after_t2,
                    acc_t1_after_t2,
                ),
                phase1,
                phase2,
            })
        }
    }
}
