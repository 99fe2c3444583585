//! Training support: loss, optimizers, evaluation metrics, and the epoch
//! loop.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, ClipRecord};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{Scalar, Tensor};

/// Numeric guard inside the cross-entropy logarithm.
pub const CROSS_ENTROPY_EPSILON: f64 = 1e-12;

/// Mean categorical cross-entropy over a `[B, K]` probability batch, plus the
/// gradient with respect to the pre-softmax logits.
///
/// The gradient uses the fused softmax/cross-entropy form `(probs − onehot)/B`
/// and must therefore be seeded at the classifier's pre-activation, not at the
/// probabilities.
pub fn categorical_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    if probs.rank() != 2 || probs.shape() != onehot.shape() {
        return Err(Error::Dimension(format!(
            "cross-entropy expects matching [batch, classes] tensors, got {:?} and {:?}",
            probs.shape(),
            onehot.shape()
        )));
    }
    let batch = probs.shape()[0];
    let eps = T::from_f64(CROSS_ENTROPY_EPSILON);
    let inv_b = T::one() / T::from_f64(batch as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(probs.shape());
    {
        let g = grad.data_mut();
        for (idx, slot) in g.iter_mut().enumerate() {
            let p = probs.data()[idx];
            let y = onehot.data()[idx];
            if y != T::zero() {
                loss = loss - y * (p + eps).ln();
            }
            *slot = (p - y) * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

/// Gradient-descent family selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters. The defaults (Adam, learning rate 1e-4,
/// betas 0.9/0.999, epsilon 1e-7) are the crate's pinned training
/// configuration; beta and epsilon fields are ignored by plain SGD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Argument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Argument(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Argument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Stateful parameter updater. Adam keeps first/second moment tensors per
/// parameter name plus one shared step counter; SGD is stateless.
///
/// Call [`Optimizer::step`] once per mini-batch to update a whole model, or
/// drive individual tensors with [`Optimizer::begin_step`] +
/// [`Optimizer::apply`].
pub struct Optimizer<T: Scalar> {
    config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Number of completed update steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per mini-batch before any
    /// [`Optimizer::apply`] calls for that batch.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one named parameter in place from its gradient. A non-finite
    /// gradient is a numeric error naming the tensor, and leaves the
    /// parameter untouched.
    pub fn apply(&mut self, name: &str, value: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if value.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "parameter '{name}' has shape {:?} but its gradient has {:?}",
                value.shape(),
                grad.shape()
            )));
        }
        if !grad.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{name}'"
            )));
        }
        let lr = T::from_f64(self.config.learning_rate);
        match self.config.kind {
            OptimizerKind::Sgd => {
                let v = value.data_mut();
                for (p, &g) in v.iter_mut().zip(grad.data()) {
                    *p = *p - lr * g;
                }
            }
            OptimizerKind::Adam => {
                let beta1 = T::from_f64(self.config.beta1);
                let beta2 = T::from_f64(self.config.beta2);
                let eps = T::from_f64(self.config.epsilon);
                let one = T::one();
                let t = self.step.max(1) as i32;
                let correction1 = one - beta1.powi(t);
                let correction2 = one - beta2.powi(t);
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
                if m.shape() != grad.shape() {
                    return Err(Error::Dimension(format!(
                        "optimizer state for '{name}' has shape {:?} but the gradient has {:?}",
                        m.shape(),
                        grad.shape()
                    )));
                }
                let p = value.data_mut();
                let md = m.data_mut();
                let vd = v.data_mut();
                for i in 0..p.len() {
                    let g = grad.data()[i];
                    md[i] = beta1 * md[i] + (one - beta1) * g;
                    vd[i] = beta2 * vd[i] + (one - beta2) * g * g;
                    let m_hat = md[i] / correction1;
                    let v_hat = vd[i] / correction2;
                    p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// One optimization step over every parameter of `model`, in the model's
    /// deterministic traversal order. Any non-finite gradient aborts with a
    /// numeric error naming the offending tensor.
    pub fn step(&mut self, model: &mut ModelGraph<T>) -> Result<()> {
        let mut bad: Option<String> = None;
        model.visit_params(&mut |name, p| {
            if bad.is_none() && !p.grad.all_finite() {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{name}'"
            )));
        }
        self.begin_step();
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |name, p| {
            if failure.is_none() {
                if let Err(e) = self.apply(name, &mut p.value, &p.grad) {
                    failure = Some(e);
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Classification quality over a scored set: argmax accuracy, recall with
/// the positive class at index 1, and the ranking AUC of the positive-class
/// score. `recall` is absent when the set holds no positives and `auc` when
/// either class is missing (undefined, never reported as 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub recall: Option<f64>,
    pub auc: Option<f64>,
    /// Confusion counts indexed `[actual][predicted]`; entries sum to the
    /// number of scored samples.
    pub confusion: [[usize; 2]; 2],
}

/// Computes [`MetricReport`] from `[N, 2]` probabilities and one-hot labels.
///
/// The predicted class is the probability argmax with ties resolved to the
/// lower index. AUC is the Mann-Whitney statistic of the class-1 score:
/// the fraction of (positive, negative) pairs ranked correctly, tied scores
/// counting one half.
pub fn metrics<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<MetricReport> {
    if probs.rank() != 2 || probs.shape() != onehot.shape() {
        return Err(Error::Dimension(format!(
            "metrics expect matching [samples, classes] tensors, got {:?} and {:?}",
            probs.shape(),
            onehot.shape()
        )));
    }
    if probs.shape()[1] != 2 {
        return Err(Error::Dimension(format!(
            "metrics are defined for exactly 2 classes, got {}",
            probs.shape()[1]
        )));
    }
    let n = probs.shape()[0];
    if n == 0 {
        return Err(Error::Argument("metrics need at least one sample".into()));
    }
    if !probs.all_finite() {
        return Err(Error::Numeric("metrics need finite probabilities".into()));
    }
    let mut confusion = [[0usize; 2]; 2];
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(n);
    for row in 0..n {
        let p0 = probs.data()[row * 2].to_f64();
        let p1 = probs.data()[row * 2 + 1].to_f64();
        let predicted = usize::from(p1 > p0);
        let actual = usize::from(onehot.data()[row * 2 + 1] != T::zero());
        confusion[actual][predicted] += 1;
        scored.push((p1, actual == 1));
    }
    let accuracy = (confusion[0][0] + confusion[1][1]) as f64 / n as f64;
    let positives = confusion[1][0] + confusion[1][1];
    let recall = if positives > 0 {
        Some(confusion[1][1] as f64 / positives as f64)
    } else {
        None
    };
    Ok(MetricReport {
        accuracy,
        recall,
        auc: ranking_auc(&mut scored),
        confusion,
    })
}

/// Mann-Whitney AUC over `(score, is_positive)` pairs via a single sorted
/// sweep: each positive contributes the count of strictly lower negatives
/// plus half the count of equal-scored negatives. `None` when either class
/// is absent.
fn ranking_auc(scored: &mut [(f64, bool)]) -> Option<f64> {
    let positives = scored.iter().filter(|(_, pos)| *pos).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut u = 0.0f64;
    let mut negatives_below = 0usize;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let tied = &scored[i..j];
        let tied_pos = tied.iter().filter(|(_, pos)| *pos).count();
        let tied_neg = tied.len() - tied_pos;
        u += tied_pos as f64 * (negatives_below as f64 + 0.5 * tied_neg as f64);
        negatives_below += tied_neg;
        i = j;
    }
    Some(u / (positives as f64 * negatives as f64))
}

/// Epoch-loop settings. Defaults: 30 epochs, batch size 4, the default
/// Adam configuration, and no checkpointing.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// When set, the model weights with the best validation accuracy so far
    /// are saved here at the end of each improving epoch (strict
    /// improvement, so the earliest best epoch wins ties).
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            checkpoint_path: None,
        }
    }
}

/// Loss plus [`MetricReport`] for one split in one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub recall: Option<f64>,
    pub auc: Option<f64>,
}

/// One completed epoch: training metrics (accumulated over the pass while
/// parameters update) and validation metrics (computed with frozen
/// parameters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: EpochMetrics,
    pub validation: EpochMetrics,
}

/// Full run record: one entry per epoch, total wall time, and where the best
/// validation accuracy occurred.
#[derive(Clone, Debug, Serialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub wall_seconds: f64,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
}

impl TrainHistory {
    /// Renders the per-epoch metrics as `epoch,split,metric,value` CSV.
    /// Absent metrics (undefined AUC or recall) emit no row. The output is
    /// bytewise deterministic for a given history; wall time is excluded on
    /// purpose (it lives in [`TrainHistory::summary_json`]).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for record in &self.records {
            for (split, m) in [("train", &record.train), ("validation", &record.validation)] {
                let mut push = |metric: &str, value: f64| {
                    out.push_str(&format!("{},{split},{metric},{value}\n", record.epoch));
                };
                push("loss", m.loss);
                push("accuracy", m.accuracy);
                if let Some(recall) = m.recall {
                    push("recall", recall);
                }
                if let Some(auc) = m.auc {
                    push("auc", auc);
                }
            }
        }
        out
    }

    /// JSON run summary: epoch count, wall time, best epoch, and the final
    /// epoch's metrics.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "epochs": self.records.len(),
            "wall_seconds": self.wall_seconds,
            "best_epoch": self.best_epoch,
            "best_validation_accuracy": self.best_validation_accuracy,
            "final": self.records.last(),
        })
    }
}

/// Runs one forward pass over `clips` with frozen parameters and reports
/// loss plus metrics. This is the validation half of [`train_loop`] and the
/// engine behind the evaluate command; taking `&ModelGraph` makes parameter
/// mutation impossible by construction.
pub fn evaluate_clips<T: Scalar>(
    model: &ModelGraph<T>,
    clips: &[ClipRecord],
    batch_size: usize,
) -> Result<EpochMetrics> {
    let mut collected_probs: Vec<T> = Vec::new();
    let mut collected_labels: Vec<T> = Vec::new();
    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    let config = &model.config;
    for batch in batch_iterator::<T>(
        clips,
        batch_size,
        config.frames,
        config.height,
        config.width,
    )? {
        let (frames, labels) = batch?;
        let probs = model.model_forward(&frames)?;
        let (loss, _) = categorical_cross_entropy(&probs, &labels)?;
        let b = frames.shape()[0];
        loss_sum += loss.to_f64() * b as f64;
        count += b;
        collected_probs.extend_from_slice(probs.data());
        collected_labels.extend_from_slice(labels.data());
    }
    if count == 0 {
        return Err(Error::Config("evaluation needs at least one clip".into()));
    }
    let probs = Tensor::new(&[count, 2], collected_probs)?;
    let labels = Tensor::new(&[count, 2], collected_labels)?;
    let report = metrics(&probs, &labels)?;
    Ok(EpochMetrics {
        loss: loss_sum / count as f64,
        accuracy: report.accuracy,
        recall: report.recall,
        auc: report.auc,
    })
}

/// The epoch loop: for each epoch, one full pass over the training clips
/// (forward, loss, backward, optimizer step per mini-batch, in the fixed
/// clip order) followed by a frozen-parameter validation pass.
///
/// Training metrics are accumulated from the per-batch predictions as the
/// parameters evolve; validation metrics come from [`evaluate_clips`]. When
/// `settings.checkpoint_path` is set, weights are saved each time validation
/// accuracy strictly improves. A non-finite loss aborts with the epoch and
/// batch in the error. Identical inputs and settings produce bitwise
/// identical history and weights.
pub fn train_loop<T: Scalar>(
    model: &mut ModelGraph<T>,
    train_clips: &[ClipRecord],
    validation_clips: &[ClipRecord],
    settings: &TrainSettings,
) -> Result<TrainHistory> {
    if train_clips.is_empty() {
        return Err(Error::Config("training segment is empty".into()));
    }
    if validation_clips.is_empty() {
        return Err(Error::Config("validation segment is empty".into()));
    }
    if settings.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut optimizer = Optimizer::new(settings.optimizer)?;
    let started = Instant::now();
    let mut records = Vec::with_capacity(settings.epochs);
    let mut best_epoch = 0usize;
    let mut best_accuracy = f64::NEG_INFINITY;
    let config = model.config.clone();
    for epoch in 1..=settings.epochs {
        let mut collected_probs: Vec<T> = Vec::new();
        let mut collected_labels: Vec<T> = Vec::new();
        let mut loss_sum = 0.0f64;
        let mut count = 0usize;
        let batches = batch_iterator::<T>(
            train_clips,
            settings.batch_size,
            config.frames,
            config.height,
            config.width,
        )?;
        for (batch_index, batch) in batches.enumerate() {
            let (frames, labels) = batch?;
            model.zero_grads();
            let (loss, probs) = model.model_backward(&frames, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {loss} at epoch {epoch}, batch {batch_index}"
                )));
            }
            optimizer.step(model).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("epoch {epoch}, batch {batch_index}: {msg}"))
                }
                other => other,
            })?;
            let b = frames.shape()[0];
            loss_sum += loss.to_f64() * b as f64;
            count += b;
            collected_probs.extend_from_slice(probs.data());
            collected_labels.extend_from_slice(labels.data());
        }
        let train_probs = Tensor::new(&[count, 2], collected_probs)?;
        let train_labels = Tensor::new(&[count, 2], collected_labels)?;
        let train_report = metrics(&train_probs, &train_labels)?;
        let train = EpochMetrics {
            loss: loss_sum / count as f64,
            accuracy: train_report.accuracy,
            recall: train_report.recall,
            auc: train_report.auc,
        };
        let validation =
            evaluate_clips(model, validation_clips, settings.batch_size).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch} validation: {msg}")),
                other => other,
            })?;
        if !validation.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss {} at epoch {epoch}",
                validation.loss
            )));
        }
        if validation.accuracy > best_accuracy {
            best_accuracy = validation.accuracy;
            best_epoch = epoch;
            if let Some(path) = &settings.checkpoint_path {
                model.save_weights(path)?;
            }
        }
        records.push(EpochRecord {
            epoch,
            train,
            validation,
        });
    }
    Ok(TrainHistory {
        records,
        wall_seconds: started.elapsed().as_secs_f64(),
        best_epoch,
        best_validation_accuracy: best_accuracy,
    })
}
