//! Inner, outer and total losses, fine-tuning, and test-time prediction.

use rayon::prelude::*;

use super::{AlphaMode, MetaModel};
use crate::data::{Dataset, Matrix};
use crate::diff::{enable_grad, gradient, no_grad, Tensor};
use crate::dictionary::{cosine, PreparedKeys};
use crate::error::{Error, Result};
use crate::estimator::{row_losses, Task};
use crate::knn::Neighborhood;

/// A batch of labeled queries: inputs `[B, d]`, labels `[B, n_o]`.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub inputs: Tensor,
    pub labels: Tensor,
}

impl TaskBatch {
    pub fn new(inputs: Tensor, labels: Tensor) -> Result<Self> {
        let (b, _) = inputs.dims2("batch")?;
        let (bl, _) = labels.dims2("batch")?;
        if b == 0 || b != bl {
            return Err(Error::shape("batch", inputs.shape(), labels.shape()));
        }
        if !inputs.all_finite() || !labels.all_finite() {
            return Err(Error::NonFinite {
                what: "batch",
                context: "inputs or labels".into(),
            });
        }
        Ok(TaskBatch { inputs, labels })
    }

    pub fn from_dataset(data: &Dataset, idx: &[usize]) -> Result<Self> {
        TaskBatch::new(
            data.inputs.select_rows(idx).to_tensor(),
            data.labels.select_rows(idx).to_tensor(),
        )
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `phi` as something the inner gradient can be taken against: existing
/// differentiable tensors are kept (so outer gradients flow through them),
/// constants become fresh leaves.
fn differentiable(phi: &[Tensor]) -> Vec<Tensor> {
    phi.iter()
        .map(|p| if p.requires_grad_flag() { p.clone() } else { p.requires_grad() })
        .collect()
}

/// Loss of the head under `phi` on every dictionary entry, `[S]`.
fn entry_losses(model: &MetaModel, phi: &[Tensor], targets: &Tensor) -> Result<Tensor> {
    let keys = &model.dictionary()?.keys;
    row_losses(&model.head_forward(phi, keys)?, targets, model.task())
}

/// Attention-weighted dictionary loss for one query embedding `[m]` under the
/// shared head `phi`.
pub fn inner_loss(model: &MetaModel, query: &Tensor) -> Result<Tensor> {
    inner_loss_at(model, &model.phi, query)
}

/// [`inner_loss`] under arbitrary head parameters.
pub fn inner_loss_at(model: &MetaModel, phi: &[Tensor], query: &Tensor) -> Result<Tensor> {
    let dict = model.dictionary()?;
    let w = dict.attend(query)?;
    let losses = entry_losses(model, phi, &dict.targets()?)?;
    Ok(w.mul(&losses)?.sum())
}

/// Mean loss of the head on retrieved training pairs, the non-learned
/// counterpart of the dictionary loss.
pub fn inner_loss_from_neighbors(model: &MetaModel, phi: &[Tensor], neighborhood: &Neighborhood) -> Result<Tensor> {
    if neighborhood.is_empty() {
        return Err(Error::invalid("inner_loss_from_neighbors", "empty neighborhood"));
    }
    let x = neighborhood.inputs.to_tensor();
    let y = neighborhood.labels.to_tensor();
    let z = model.embed(&x)?;
    Ok(row_losses(&model.head_forward(phi, &z)?, &y, model.task())?.mean())
}

/// One gradient step `phi - alpha * grad`.
fn step(model: &MetaModel, phi: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
    phi.iter()
        .zip(grads)
        .enumerate()
        .map(|(k, (p, g))| {
            let scaled = match model.spec.alpha_mode {
                AlphaMode::Scalar => g.mul_scalar(&model.alpha[0])?,
                AlphaMode::Diagonal => model.alpha[k].mul(g)?,
            };
            p.sub(&scaled)
        })
        .collect()
}

/// Shared, per-batch pieces of the inner loop.
struct InnerContext {
    keys: PreparedKeys,
    targets: Tensor,
    /// Entry losses under the shared `phi`, reused by every query's first step.
    first_losses: Tensor,
}

impl InnerContext {
    fn new(model: &MetaModel, phi: &[Tensor]) -> Result<Self> {
        let dict = model.dictionary()?;
        let targets = dict.targets()?;
        Ok(InnerContext {
            keys: dict.prepare()?,
            first_losses: entry_losses(model, phi, &targets)?,
            targets,
        })
    }
}

/// `inner_steps` gradient steps from `phi` on the dictionary loss of `query`.
///
/// With `create_graph` the result stays differentiable with respect to
/// `phi`, the dictionary, `alpha` and (through `query`) the extractor.
/// Without it, each step starts from a fresh leaf and only values are kept.
fn adapt(model: &MetaModel, ctx: &InnerContext, phi: &[Tensor], query: &Tensor, create_graph: bool) -> Result<Vec<Tensor>> {
    let w = ctx.keys.attend(query)?;
    let mut cur = phi.to_vec();
    for s in 0..model.spec.inner_steps {
        let losses = if s == 0 {
            ctx.first_losses.clone()
        } else {
            entry_losses(model, &cur, &ctx.targets)?
        };
        let loss = w.mul(&losses)?.sum();
        let grads = gradient(&loss, &cur, create_graph)?;
        cur = step(model, &cur, &grads)?;
        if !create_graph {
            cur = cur.iter().map(Tensor::requires_grad).collect();
        }
    }
    Ok(cur)
}

/// Per-query head `phi_i` for one embedding `[m]`. A model without a
/// dictionary returns `phi` unchanged.
pub fn fine_tune(model: &MetaModel, query: &Tensor, create_graph: bool) -> Result<Vec<Tensor>> {
    if model.is_vanilla() {
        return Ok(model.phi.clone());
    }
    let _g = enable_grad();
    let phi: Vec<Tensor> = if create_graph {
        differentiable(&model.phi)
    } else {
        model.phi.iter().map(Tensor::requires_grad).collect()
    };
    let ctx = InnerContext::new(model, &phi)?;
    adapt(model, &ctx, &phi, query, create_graph)
}

/// Post-adaptation outputs for a batch.
pub(crate) struct BatchForward {
    /// Head outputs `[B, n_o]` after fine-tuning.
    pub outputs: Tensor,
    /// Per-sample losses `[B]`.
    pub losses: Tensor,
    /// Embeddings `[B, m]`, for the auxiliary head.
    pub embeddings: Tensor,
}

pub(crate) fn outer_forward(model: &MetaModel, batch: &TaskBatch) -> Result<BatchForward> {
    // The inner step needs a recorded graph even when the caller only wants values.
    let _g = enable_grad();
    let z = model.embed(&batch.inputs)?;
    if model.is_vanilla() {
        let outputs = model.head_forward(&model.phi, &z)?;
        let losses = row_losses(&outputs, &batch.labels, model.task())?;
        return Ok(BatchForward { outputs, losses, embeddings: z });
    }
    let phi = differentiable(&model.phi);
    let ctx = InnerContext::new(model, &phi)?;
    let per_sample: Vec<(Tensor, Tensor)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let _g = enable_grad();
            let zi = z.slice_rows(i, i + 1)?;
            let query = zi.reshape(&[model.spec.embed_dim()])?;
            let phi_i = adapt(model, &ctx, &phi, &query, true)?;
            let out = model.head_forward(&phi_i, &zi)?;
            let loss = row_losses(&out, &batch.labels.slice_rows(i, i + 1)?, model.task())?;
            Ok((out, loss))
        })
        .collect::<Result<_>>()?;
    let (outs, losses): (Vec<Tensor>, Vec<Tensor>) = per_sample.into_iter().unzip();
    Ok(BatchForward {
        outputs: Tensor::concat(&outs)?,
        losses: Tensor::concat(&losses)?,
        embeddings: z,
    })
}

fn batch_mean(losses: &Tensor) -> Tensor {
    losses.sum().scale(1.0 / losses.numel() as f64)
}

/// Mean post-fine-tuning loss over the batch.
pub fn outer_loss(model: &MetaModel, batch: &TaskBatch) -> Result<Tensor> {
    Ok(batch_mean(&outer_forward(model, batch)?.losses))
}

/// Mean loss of the un-tuned head on the batch.
pub fn vanilla_loss(model: &MetaModel, batch: &TaskBatch) -> Result<Tensor> {
    outer_loss(&model.vanilla(), batch)
}

/// Mean loss of the auxiliary head on extractor features.
pub fn aux_loss(model: &MetaModel, batch: &TaskBatch) -> Result<Tensor> {
    let z = model.embed(&batch.inputs)?;
    aux_from_embeddings(model, &z, &batch.labels)
}

fn aux_from_embeddings(model: &MetaModel, z: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok(batch_mean(&row_losses(&model.aux_forward(z)?, labels, model.task())?))
}

/// Outer loss plus `lambda` times the auxiliary loss (when the model has an
/// auxiliary head and `lambda > 0`).
pub fn total_loss(model: &MetaModel, batch: &TaskBatch) -> Result<Tensor> {
    total_from_forward(model, &outer_forward(model, batch)?, &batch.labels)
}

pub(crate) fn total_from_forward(model: &MetaModel, fwd: &BatchForward, labels: &Tensor) -> Result<Tensor> {
    let outer = batch_mean(&fwd.losses);
    if model.xi.is_empty() || model.spec.lambda == 0.0 {
        return Ok(outer);
    }
    let aux = aux_from_embeddings(model, &fwd.embeddings, labels)?;
    outer.add(&aux.scale(model.spec.lambda))
}

/// Post-fine-tuning head outputs for `[N, d]` inputs: logits for
/// classification, predictions for regression. Reads the model only.
pub fn predict(model: &MetaModel, inputs: &Tensor) -> Result<Tensor> {
    let model = model.detached();
    let z = {
        let _g = no_grad();
        model.embed(inputs)?
    };
    if model.is_vanilla() {
        let _g = no_grad();
        return model.head_forward(&model.phi, &z);
    }
    let phi_leaf: Vec<Tensor> = model.phi.iter().map(Tensor::requires_grad).collect();
    let ctx = {
        let _g = enable_grad();
        InnerContext::new(&model, &phi_leaf)?
    };
    let rows: Vec<Tensor> = (0..z.shape()[0])
        .into_par_iter()
        .map(|i| {
            let _g = enable_grad();
            let zi = z.slice_rows(i, i + 1)?;
            let query = zi.reshape(&[model.spec.embed_dim()])?;
            let phi_i = adapt(&model, &ctx, &phi_leaf, &query, false)?;
            let _ng = no_grad();
            model.head_forward(&phi_i, &zi)
        })
        .collect::<Result<_>>()?;
    let _g = no_grad();
    Tensor::concat(&rows)
}

/// Per-sample `(before, after)` cosine similarity between a sample's feature
/// vector and its true class weight, under `phi` and under its fine-tuned
/// `phi_i`. Needs a cosine output layer.
pub fn similarity_shift_report(model: &MetaModel, inputs: &Matrix, classes: &[usize]) -> Result<Vec<(f64, f64)>> {
    if model.task() != Task::Classification || model.spec.head.class_weights(&model.phi).is_none() {
        return Err(Error::invalid("similarity_shift_report", "needs a classification model with a cosine head"));
    }
    if inputs.rows() != classes.len() {
        return Err(Error::shape("similarity_shift_report", &[inputs.rows()], &[classes.len()]));
    }
    let model = model.detached();
    let emb = model.embed_rows(inputs)?;
    let head = &model.spec.head;
    let similarity = |phi: &[Tensor], zi: &Tensor, c: usize| -> Result<f64> {
        let _g = no_grad();
        let h = head.features(phi, zi)?;
        let w = head.class_weights(phi).expect("cosine head");
        Ok(cosine(h.row(0), w.row(c)))
    };
    (0..emb.rows())
        .into_par_iter()
        .map(|i| {
            let zi = Tensor::matrix(1, emb.cols(), emb.row(i).to_vec())?;
            let before = similarity(&model.phi, &zi, classes[i])?;
            let phi_i = {
                let _g = enable_grad();
                fine_tune(&model, &Tensor::vector(emb.row(i).to_vec()), false)?
            };
            Ok((before, similarity(&phi_i, &zi, classes[i])?))
        })
        .collect()
}
