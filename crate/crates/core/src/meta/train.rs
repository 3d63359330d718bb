//! Outer-loop training and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{outer_forward, predict, total_from_forward, TaskBatch};
use super::{MetaModel, ParamGroup};
use crate::data::{argmax, Dataset};
use crate::diff::{gradient, no_grad, Tensor};
use crate::error::{Error, Result};
use crate::estimator::{row_losses, Task};
use crate::optim::{AdamW, AdamWConfig, Optimizer, Sgd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
    /// Apply weight decay to dictionary values too.
    pub decay_values: bool,
    /// Apply weight decay to the inner step sizes too.
    pub decay_alpha: bool,
    /// Divide the learning rate by 10 from this epoch on (1-based).
    pub lr_drop_epoch: Option<usize>,
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("optimizer", format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("optimizer", "weight_decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("optimizer", "momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_drop_epoch {
            Some(e) if epoch >= e => self.lr * 0.1,
            _ => self.lr,
        }
    }

    fn decays(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Values => self.decay_values,
            ParamGroup::Alpha => self.decay_alpha,
            ParamGroup::TauPhi | ParamGroup::TauXi => false,
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Stop after this many epochs without a validation-loss improvement and
    /// restore the best snapshot. Needs validation data.
    pub patience: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy (classification) or MSE (regression) of the post-fine-tuning
    /// outputs seen during the epoch.
    pub train_metric: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

/// Hooks called during [`train`]. Both default to doing nothing.
pub trait TrainObserver {
    /// After every optimizer step; `iteration` counts from 1.
    fn on_step(&mut self, _iteration: usize, _model: &MetaModel) {}
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &MetaModel) {}
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MetaModel,
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned parameters (0 when untrained).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Accuracy (classification) or MSE (regression).
    pub metric: f64,
}

fn metric(task: Task, outputs: &Tensor, labels: &Tensor, losses: &Tensor) -> f64 {
    match task {
        Task::Classification => {
            let b = outputs.shape()[0];
            let hits = (0..b).filter(|&i| argmax(outputs.row(i)) == argmax(labels.row(i))).count();
            hits as f64 / b as f64
        }
        Task::Regression => losses.data().iter().sum::<f64>() / losses.numel() as f64,
    }
}

/// Mean post-fine-tuning loss and accuracy/MSE on a dataset.
pub fn evaluate(model: &MetaModel, data: &Dataset) -> Result<Evaluation> {
    let outputs = predict(model, &data.inputs.to_tensor())?;
    let _g = no_grad();
    let labels = data.labels.to_tensor();
    let losses = row_losses(&outputs, &labels, model.task())?;
    Ok(Evaluation {
        loss: losses.data().iter().sum::<f64>() / losses.numel() as f64,
        metric: metric(model.task(), &outputs, &labels, &losses),
    })
}

fn build_optimizer(spec: &OptimizerSpec, model: &MetaModel) -> Box<dyn Optimizer> {
    let params = model.parameters();
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
    match spec.kind {
        OptimizerKind::Adamw => Box::new(AdamW::new(
            AdamWConfig {
                lr: spec.lr,
                weight_decay: spec.weight_decay,
                ..AdamWConfig::default()
            },
            &sizes,
            params.iter().map(|(g, _)| spec.decays(*g)).collect(),
        )),
        OptimizerKind::Sgd => Box::new(Sgd::new(spec.lr, spec.momentum, &sizes)),
    }
}

/// Meta-train every parameter group with one optimizer.
///
/// Each step adapts the head separately for every query in the batch,
/// evaluates the total loss and back-propagates through the adaptation.
/// Deterministic given `config.seed`.
pub fn train(
    mut model: MetaModel,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.optimizer.validate()?;
    if config.batch_size == 0 {
        return Err(Error::invalid("train", "batch_size must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    if data.input_dim() != model.spec.input_dim() || data.label_dim() != model.spec.output_dim() {
        return Err(Error::shape(
            "train",
            &[data.input_dim(), data.label_dim()],
            &[model.spec.input_dim(), model.spec.output_dim()],
        ));
    }
    if config.patience.is_some() && validation.is_none() {
        return Err(Error::invalid("train", "early stopping needs validation data"));
    }

    let mut opt = build_optimizer(&config.optimizer, &model);
    let mut rng = crate::rng(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, MetaModel)> = None;
    let mut iteration = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let lr = config.optimizer.lr_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut metric_sum) = (0.0, 0.0);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = TaskBatch::from_dataset(data, idx)?;
            let live = model.with_grad_leaves();
            let fwd = outer_forward(&live, &batch)?;
            let total = total_from_forward(&live, &fwd, &batch.labels)?;
            if !total.all_finite() {
                return Err(Error::NonFinite {
                    what: "training loss",
                    context: format!("epoch {epoch}, batch {b}"),
                });
            }
            let grads = gradient(&total, &live.parameter_tensors(), false)?;
            let mut values: Vec<Vec<f64>> = model.parameters().iter().map(|(_, t)| t.to_vec()).collect();
            let grads: Vec<Vec<f64>> = grads.iter().map(Tensor::to_vec).collect();
            opt.step(&mut values, &grads).map_err(|e| match e {
                Error::NonFinite { what, context } => Error::NonFinite {
                    what,
                    context: format!("{context} at epoch {epoch}, batch {b}"),
                },
                other => other,
            })?;
            model = model.with_values(&values)?;
            iteration += 1;
            observer.on_step(iteration, &model);

            let w = idx.len() as f64;
            loss_sum += total.item() * w;
            metric_sum += metric(model.task(), &fwd.outputs, &batch.labels, &fwd.losses) * w;
        }

        let n = data.len() as f64;
        let val = validation.map(|v| evaluate(&model, v)).transpose()?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_metric: metric_sum / n,
            val_loss: val.map(|e| e.loss),
            val_metric: val.map(|e| e.metric),
        };
        observer.on_epoch(&record, &model);
        history.push(record);

        if let (Some(patience), Some(v)) = (config.patience, val) {
            let improved = best.as_ref().is_none_or(|(l, _, _)| v.loss < *l);
            if improved {
                best = Some((v.loss, epoch, model.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => {
            let e = history.len();
            (model, e)
        }
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}
